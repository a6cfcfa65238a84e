use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use maskdiff_core::data::{
    bracket_check, read_dataset, source_by_name, write_dataset, BracketSource, Dataset,
    DatasetHeader, SequenceSource,
};
use maskdiff_core::denoiser::{DenoiserConfig, DenoiserParams};
use maskdiff_core::diffusion::{NoiseSchedule, ScheduleKind};
use maskdiff_core::eval::{
    compare_reports, gen_ppl_under_source, global_ar_at_k, grammar_vun, kmer_js, local_ar_at_1,
    nll_upper_bound, token_entropy, Estimate, KmerHistogram, MetricReport,
};
use maskdiff_core::rng::{self, Purpose};
use maskdiff_core::sampler::{batch_sample, OracleDenoiser, SamplerTrace, StepRecord};
use maskdiff_core::trainer::{train, ScMode, TrainState};
use maskdiff_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.log";

#[derive(Parser, Debug)]
#[command(name = "maskdiff", version, about = "Masked discrete diffusion with self-conditioning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a dataset drawn from a built-in source.
    GenData(GenDataArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Continue a trained model, attaching self-conditioning layers if needed.
    Posttrain(PosttrainArgs),
    /// Draw samples and their traces.
    Sample(SampleArgs),
    /// Compute metrics for a sample file.
    Eval(EvalArgs),
    /// Per-metric differences between two reports.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// `markov-default` or `bracket-default`.
    #[arg(long)]
    pub source: String,
    #[arg(long)]
    pub rows: usize,
    #[arg(long, default_value_t = 16)]
    pub len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `section.key=value`, applied after the file; repeatable.
    #[arg(long = "set")]
    pub overrides: Vec<String>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many optimizer steps in this invocation.
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct PosttrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint of the model to continue.
    #[arg(long)]
    pub base: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Model to sample from; not needed with `--oracle`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use exact posteriors of a built-in source instead of a model.
    #[arg(long)]
    pub oracle: Option<String>,
    /// Sequence length; defaults to the model's.
    #[arg(long)]
    pub len: Option<usize>,
    #[arg(long)]
    pub n: usize,
    /// Reverse steps; defaults to the checkpoint's training schedule.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Do not feed each step's estimate into the next step.
    #[arg(long)]
    pub no_sc: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub samples: PathBuf,
    /// Reference dataset for k-mer statistics and novelty.
    #[arg(long)]
    pub reference: PathBuf,
    /// Trace sidecar written by `sample`.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Source for perplexity and validity; defaults to the reference header's.
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub kmer: Vec<usize>,
    /// Model whose NLL bound to report on `--heldout`.
    #[arg(long, requires = "heldout")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub mc_draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Writes `<out>` as key=value text and `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    /// Also write the table as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => cmd_train(&a.run, None),
        Command::Posttrain(a) => {
            let base = a
                .base
                .as_deref()
                .ok_or_else(|| Error::Usage("posttrain needs --base".into()))?;
            cmd_train(&a.run, Some(base))
        }
        Command::Sample(a) => cmd_sample(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Compare(a) => cmd_compare(&a),
    }
}

fn at_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    at_path(path, read_dataset(path))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    at_path(path, Checkpoint::load(path))
}

fn read_text(path: &Path) -> Result<String> {
    at_path(path, fs::read_to_string(path).map_err(Error::from))
}

fn named_source(name: &str) -> Result<Box<dyn SequenceSource>> {
    source_by_name(name).ok_or_else(|| {
        Error::Usage(format!(
            "unknown source `{name}` (expected markov-default or bracket-default)"
        ))
    })
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let source = named_source(&a.source)?;
    if a.source == BracketSource::DEFAULT_NAME && !a.len.is_multiple_of(2) {
        return Err(Error::Usage("bracket sequences need an even length".into()));
    }
    let rows = source.generate(a.rows, a.len, &mut rng::stream(a.seed, 0));
    let header = DatasetHeader {
        vocab: source.vocab().size(),
        len: a.len,
        seed: a.seed,
        source: a.source.clone(),
    };
    write_dataset(&a.out, &Dataset::new(header, rows)?)
}

fn load_or_init(
    cfg: &RunConfig,
    data: &Dataset,
    base: Option<&Path>,
    resume_from: Option<Checkpoint>,
) -> Result<TrainState> {
    if let Some(ck) = resume_from {
        let opt = ck.opt.ok_or_else(|| Error::Usage("checkpoint has no optimizer state to resume".into()))?;
        return Ok(TrainState {
            params: ck.params,
            opt,
            tokens: ck.tokens,
        });
    }
    let params = match base {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Usage(format!("base checkpoint {} does not exist", path.display())));
            }
            let ck = load_checkpoint(path)?;
            if cfg.train.sc_mode != ScMode::Off && ck.params.self_cond.is_none() {
                let mut r = rng::step_stream(cfg.train.seed, 0, Purpose::Init);
                ck.params.attach_self_conditioning(cfg.train.fusion, &mut r)?
            } else {
                ck.params
            }
        }
        None => {
            let model = DenoiserConfig {
                vocab: data.header.vocab,
                seq_len: data.header.len,
                hidden: cfg.model.hidden,
                blocks: cfg.model.blocks,
                time_steps: cfg.model.time_embedding.then_some(cfg.train.steps),
            };
            let fresh_sc = (cfg.train.sc_mode != ScMode::Off).then_some(cfg.train.fusion);
            let mut r = rng::step_stream(cfg.train.seed, 0, Purpose::Init);
            DenoiserParams::init(model, fresh_sc, &mut r)?
        }
    };
    if params.config.vocab != data.header.vocab || params.config.seq_len != data.header.len {
        return Err(Error::Usage(format!(
            "model expects vocab {} and length {}, dataset has {} and {}",
            params.config.vocab, params.config.seq_len, data.header.vocab, data.header.len
        )));
    }
    Ok(TrainState::new(params))
}

fn cmd_train(args: &RunArgs, base: Option<&Path>) -> Result<()> {
    let cfg = at_path(&args.config, RunConfig::load(&args.config, &args.overrides))?;
    let data = load_dataset(&cfg.data.train)?;
    fs::create_dir_all(&cfg.output.dir)?;
    let ckpt_path = cfg.output.dir.join(CHECKPOINT_FILE);
    let resume_from = if args.resume && ckpt_path.exists() {
        Some(load_checkpoint(&ckpt_path)?)
    } else {
        None
    };
    let resuming = resume_from.is_some();
    let mut state = load_or_init(&cfg, &data, base, resume_from)?;
    fs::write(cfg.output.dir.join("config.toml"), cfg.to_toml())?;

    let mut log = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .write(true)
            .append(resuming)
            .truncate(!resuming)
            .open(cfg.output.dir.join(METRICS_FILE))?,
    );
    let save = |state: &TrainState| -> Result<()> {
        let ck = Checkpoint {
            params: state.params.clone(),
            schedule: cfg.train.schedule,
            steps: cfg.train.steps,
            opt: Some(state.opt.clone()),
            tokens: state.tokens,
        };
        ck.save(&ckpt_path)
    };

    let every = cfg.output.checkpoint_every;
    let mut pending: Option<Error> = None;
    let mut remaining = args.max_steps;
    loop {
        let chunk = match (every, remaining) {
            (0, r) => r,
            (e, Some(r)) => Some(e.min(r)),
            (e, None) => Some(e),
        };
        let before = state.opt.step;
        train(&mut state, &data.rows, &cfg.train, chunk, |step, rec, ms| {
            if pending.is_none() {
                if let Err(e) = writeln!(log, "{}", rec.log_line(step, ms)) {
                    pending = Some(e.into());
                }
            }
        })?;
        if let Some(e) = pending.take() {
            return Err(e);
        }
        log.flush()?;
        save(&state)?;
        log::info!("checkpoint at step {} ({} tokens)", state.opt.step, state.tokens);
        let ran = state.opt.step - before;
        if let Some(r) = remaining.as_mut() {
            *r -= ran;
        }
        let done = state.tokens >= cfg.train.max_tokens || ran == 0 || remaining == Some(0);
        if done || every == 0 {
            break;
        }
    }
    println!(
        "trained to {} tokens in {} steps; checkpoint {}",
        state.tokens,
        state.opt.step,
        ckpt_path.display()
    );
    Ok(())
}

/// One line of the trace sidecar.
#[derive(Debug, Serialize, Deserialize)]
pub struct TraceLine {
    pub sample: usize,
    pub t: usize,
    pub unmasked: Vec<usize>,
}

pub fn trace_path(samples: &Path) -> PathBuf {
    let mut s = samples.as_os_str().to_owned();
    s.push(".trace.jsonl");
    PathBuf::from(s)
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let (drawn, vocab, schedule_desc) = match (&a.checkpoint, &a.oracle) {
        (Some(_), Some(_)) => {
            return Err(Error::Usage("give either --checkpoint or --oracle, not both".into()))
        }
        (None, None) => return Err(Error::Usage("sample needs --checkpoint or --oracle".into())),
        (Some(path), None) => {
            let ck = load_checkpoint(path)?;
            let steps = a.steps.unwrap_or(ck.steps);
            let len = a.len.unwrap_or(ck.params.config.seq_len);
            let schedule = NoiseSchedule::new(ck.schedule, steps)?;
            ck.params.time_index(steps, steps)?;
            let drawn = batch_sample(&ck.params, &schedule, len, a.n, a.seed, !a.no_sc)?;
            (drawn, ck.params.config.vocab, format!("model:{steps}"))
        }
        (None, Some(name)) => {
            let source = named_source(name)?;
            let len = a.len.ok_or_else(|| Error::Usage("oracle sampling needs --len".into()))?;
            let steps = a.steps.ok_or_else(|| Error::Usage("oracle sampling needs --steps".into()))?;
            let oracle = OracleDenoiser::new(source.as_ref(), len)?;
            let schedule = NoiseSchedule::new(ScheduleKind::Linear, steps)?;
            let drawn = batch_sample(&oracle, &schedule, len, a.n, a.seed, !a.no_sc)?;
            (drawn, source.vocab().size(), format!("oracle:{steps}"))
        }
    };
    let len = drawn[0].0.len();
    let calls = drawn[0].1.calls;
    let mut trace_out = BufWriter::new(fs::File::create(trace_path(&a.out))?);
    for (i, (_, trace)) in drawn.iter().enumerate() {
        for step in &trace.steps {
            let line = TraceLine {
                sample: i,
                t: step.t,
                unmasked: step.unmasked.clone(),
            };
            writeln!(trace_out, "{}", serde_json::to_string(&line).expect("plain data"))?;
        }
    }
    trace_out.flush()?;
    let header = DatasetHeader {
        vocab,
        len,
        seed: a.seed,
        source: format!("samples-{schedule_desc}"),
    };
    let rows = drawn.into_iter().map(|(s, _)| s).collect();
    write_dataset(&a.out, &Dataset::new(header, rows)?)?;
    println!("wrote {} samples; denoiser calls per sample: {calls}", a.n);
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<Vec<SamplerTrace>> {
    let text = read_text(path)?;
    let mut by_sample: BTreeMap<usize, Vec<StepRecord>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let rec: TraceLine = serde_json::from_str(line)
            .map_err(|e| Error::parse(i + 1, format!("bad trace record: {e}")))?;
        by_sample.entry(rec.sample).or_default().push(StepRecord {
            t: rec.t,
            unmasked: rec.unmasked,
        });
    }
    Ok(by_sample
        .into_values()
        .map(|steps| SamplerTrace {
            origin: None,
            calls: steps.len(),
            steps,
        })
        .collect())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let samples = load_dataset(&a.samples)?;
    let reference = load_dataset(&a.reference)?;
    if samples.header.vocab != reference.header.vocab {
        return Err(Error::Usage(format!(
            "sample vocabulary {} does not match reference vocabulary {}",
            samples.header.vocab, reference.header.vocab
        )));
    }
    let report = evaluate(a, &samples, &reference)?;
    fs::write(&a.out, report.to_kv_text())?;
    let mut json = a.out.as_os_str().to_owned();
    json.push(".json");
    fs::write(PathBuf::from(json), report.to_json())?;
    print!("{}", report.to_kv_text());
    Ok(())
}

fn push_estimate(report: &mut MetricReport, name: &str, values: Vec<f64>) -> Result<()> {
    let e = Estimate::from_values(values);
    report.push(name, e.mean, e.n, Some(e.se))
}

fn evaluate(a: &EvalArgs, samples: &Dataset, reference: &Dataset) -> Result<MetricReport> {
    let vocab = samples.vocab();
    let n = samples.rows.len();
    let mut report = MetricReport::new();
    report.meta.insert("samples".into(), a.samples.display().to_string());
    report.meta.insert("reference".into(), a.reference.display().to_string());
    for &k in &a.kmer {
        let gen = KmerHistogram::from_sequences(&samples.rows, k, vocab)?;
        let refh = KmerHistogram::from_sequences(&reference.rows, k, vocab)?;
        report.push(&format!("js_{k}mer"), kmer_js(&gen, &refh)?, n, None)?;
    }
    push_estimate(&mut report, "token_entropy", samples.rows.iter().map(token_entropy).collect())?;

    let source_name = a.source.clone().unwrap_or_else(|| reference.header.source.clone());
    if let Some(source) = source_by_name(&source_name) {
        report.meta.insert("source".into(), source_name.clone());
        let ppl = gen_ppl_under_source(&samples.rows, source.as_ref())?;
        report.push("gen_ppl", ppl.ppl, n, None)?;
        report.push("gen_ppl_violations", ppl.violations as f64, n, None)?;
        if source_name == BracketSource::DEFAULT_NAME {
            let pairs = vocab.size() / 2;
            let vun = grammar_vun(&samples.rows, |t| bracket_check(t, pairs), &reference.rows);
            report.push("valid", vun.valid as f64, n, None)?;
            report.push("unique", vun.unique as f64, n, None)?;
            report.push("novel", vun.novel as f64, n, None)?;
        }
    }

    if let Some(path) = &a.traces {
        let traces = read_traces(path)?;
        let local = traces.iter().map(local_ar_at_1).collect::<Result<Vec<_>>>()?;
        let global = traces
            .iter()
            .map(|t| global_ar_at_k(t, 4))
            .collect::<Result<Vec<_>>>()?;
        push_estimate(&mut report, "local_ar_1", local)?;
        push_estimate(&mut report, "global_ar_4", global)?;
        report.push("calls_per_sample", traces.first().map_or(0, |t| t.calls) as f64, traces.len(), None)?;
    }

    if let (Some(ck), Some(heldout)) = (&a.checkpoint, &a.heldout) {
        let ck = load_checkpoint(ck)?;
        let held = load_dataset(heldout)?;
        let schedule = NoiseSchedule::new(ck.schedule, ck.steps)?;
        let sc = ck.params.self_cond.is_some();
        let est = nll_upper_bound(&ck.params, &held.rows, &schedule, a.mc_draws, a.seed, sc)?;
        report.push("nll_bound", est.mean, est.n, Some(est.se))?;
        report.meta.insert("nll_units".into(), "nats/token".into());
    }
    Ok(report)
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let ra = MetricReport::from_kv_text(&read_text(&a.a)?)?;
    let rb = MetricReport::from_kv_text(&read_text(&a.b)?)?;
    let deltas = compare_reports(&ra, &rb);
    println!("{:<20} {:>14} {:>14} {:>14} {:>10}", "metric", "a", "b", "delta", "rel_impr");
    for d in &deltas {
        let rel = d
            .relative_improvement
            .map_or("-".to_string(), |r| format!("{:.2}%", 100.0 * r));
        println!("{:<20} {:>14.6} {:>14.6} {:>14.6} {:>10}", d.name, d.a, d.b, d.delta, rel);
    }
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&deltas).expect("plain data"))?;
    }
    Ok(())
}
