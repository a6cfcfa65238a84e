//! Directional comparisons of post-training variants on synthetic sources.
//!
//! Per seed: train a base model without self-conditioning, then continue it
//! three ways on the same batches and corruptions: plain continuation,
//! two-pass self-conditioning, and partial self-conditioning at rate 0.5.
//! Samples of all three share their random streams.

use maskdiff_core::data::{bracket_check, BracketSource, MarkovSource, SequenceSource};
use maskdiff_core::denoiser::{DenoiserConfig, DenoiserParams, FusionMode};
use maskdiff_core::diffusion::{NoiseSchedule, TokenSeq};
use maskdiff_core::eval::{
    gen_ppl_under_source, grammar_vun, js_divergence, nll_upper_bound, Estimate, KmerHistogram,
    Vun,
};
use maskdiff_core::rng::{self, Purpose};
use maskdiff_core::sampler::batch_sample;
use maskdiff_core::trainer::{train, ScMode, TrainConfig, TrainState};
use maskdiff_core::Result;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Variant {
    Vanilla,
    Full,
    Partial,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Vanilla, Variant::Full, Variant::Partial];

    pub fn sc_mode(self) -> ScMode {
        match self {
            Variant::Vanilla => ScMode::Off,
            Variant::Full => ScMode::Full,
            Variant::Partial => ScMode::Partial(0.5),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Task {
    Markov,
    Bracket,
}

impl Task {
    fn source(self) -> Box<dyn SequenceSource> {
        match self {
            Task::Markov => Box::new(MarkovSource::desk_default()),
            Task::Bracket => Box::new(BracketSource::desk_default()),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Budget {
    pub seq_len: usize,
    pub base_tokens: u64,
    pub post_tokens: u64,
    pub base_lr: f64,
    pub post_lr: f64,
    pub train_rows: usize,
    pub heldout_rows: usize,
    pub mc_draws: usize,
    /// Samples per sampling budget on the Markov task.
    pub samples: usize,
    pub bracket_samples: usize,
    pub sample_steps: Vec<usize>,
    pub train_steps: usize,
    pub hidden: usize,
    pub blocks: usize,
}

impl Budget {
    /// Base run of 5M tokens and post-training of a quarter of that, at the
    /// base learning rate.
    pub fn desk() -> Self {
        Self {
            seq_len: 16,
            base_tokens: 5_000_000,
            post_tokens: 1_250_000,
            base_lr: 3e-3,
            post_lr: 3e-3,
            train_rows: 50_000,
            heldout_rows: 512,
            mc_draws: 16,
            samples: 4_000,
            bracket_samples: 1_000,
            sample_steps: vec![8, 32],
            train_steps: 32,
            hidden: 32,
            blocks: 2,
        }
    }

    fn train_config(&self, sc_mode: ScMode, seed: u64, tokens: u64, lr: f64) -> TrainConfig {
        TrainConfig {
            sc_mode,
            fusion: FusionMode::Concat,
            steps: self.train_steps,
            learning_rate: lr,
            warmup_steps: 100,
            seed,
            max_tokens: tokens,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantResult {
    pub variant: Variant,
    /// `(sampling steps, JS 3-mer divergence in bits)`.
    pub js3: Vec<(usize, f64)>,
    /// `(sampling steps, generative perplexity under the source)`.
    pub gen_ppl: Vec<(usize, f64)>,
    /// `(sampling steps, valid/unique/novel)`, bracket task only.
    pub vun: Vec<(usize, Vun)>,
    pub nll: Estimate,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedResult {
    pub task: Task,
    pub seed: u64,
    pub entropy_rate: Option<f64>,
    pub base_nll: Estimate,
    pub variants: Vec<VariantResult>,
}

impl SeedResult {
    pub fn variant(&self, v: Variant) -> &VariantResult {
        self.variants
            .iter()
            .find(|r| r.variant == v)
            .expect("every variant is run")
    }
}

fn reference_trigrams(task: Task, source: &dyn SequenceSource, seed: u64, len: usize) -> Result<Vec<f64>> {
    match task {
        Task::Markov => Ok(MarkovSource::desk_default().kmer_probs(3)),
        Task::Bracket => {
            let mut r = rng::stream(seed, 7);
            let seqs = source.generate(100_000, len, &mut r);
            Ok(KmerHistogram::from_sequences(&seqs, 3, source.vocab())?.frequencies())
        }
    }
}

/// One seed of the comparison. `log` receives progress lines.
pub fn run_seed(task: Task, seed: u64, budget: &Budget, mut log: impl FnMut(&str)) -> Result<SeedResult> {
    let source = task.source();
    let vocab = source.vocab();
    let len = budget.seq_len;
    let train_set = source.generate(budget.train_rows, len, &mut rng::stream(seed, 1));
    let heldout = source.generate(budget.heldout_rows, len, &mut rng::stream(seed, 2));
    let reference = reference_trigrams(task, source.as_ref(), seed, len)?;

    let model_cfg = DenoiserConfig {
        vocab: vocab.size(),
        seq_len: len,
        hidden: budget.hidden,
        blocks: budget.blocks,
        time_steps: None,
    };
    let init = DenoiserParams::init(model_cfg, None, &mut rng::step_stream(seed, 0, Purpose::Init))?;
    let mut base = TrainState::new(init);
    let base_cfg = budget.train_config(ScMode::Off, seed, budget.base_tokens, budget.base_lr);
    train(&mut base, &train_set, &base_cfg, None, |_, _, _| {})?;
    let schedule = base_cfg.schedule()?;
    let nll_seed = seed ^ 0x5eed;
    let base_nll = nll_upper_bound(&base.params, &heldout, &schedule, budget.mc_draws, nll_seed, false)?;
    log(&format!("seed {seed}: base nll {:.4}", base_nll.mean));

    let mut variants = Vec::new();
    for variant in Variant::ALL {
        let mode = variant.sc_mode();
        let params = match mode {
            ScMode::Off => base.params.clone(),
            _ => base
                .params
                .attach_self_conditioning(FusionMode::Concat, &mut rng::stream(seed, 3))?,
        };
        let mut state = TrainState::new(params);
        let post_seed = seed.wrapping_add(1_000_003);
        let cfg = budget.train_config(mode, post_seed, budget.post_tokens, budget.post_lr);
        train(&mut state, &train_set, &cfg, None, |_, _, _| {})?;

        let sc = mode != ScMode::Off;
        let nll = nll_upper_bound(&state.params, &heldout, &schedule, budget.mc_draws, nll_seed, sc)?;
        let mut result = VariantResult {
            variant,
            js3: Vec::new(),
            gen_ppl: Vec::new(),
            vun: Vec::new(),
            nll,
        };
        let n_samples = match task {
            Task::Markov => budget.samples,
            Task::Bracket => budget.bracket_samples,
        };
        for &steps in &budget.sample_steps {
            let sched = NoiseSchedule::new(cfg.schedule, steps)?;
            let drawn = batch_sample(&state.params, &sched, len, n_samples, seed ^ 0xabc, sc)?;
            let seqs: Vec<TokenSeq> = drawn.into_iter().map(|(s, _)| s).collect();
            let hist = KmerHistogram::from_sequences(&seqs, 3, vocab)?;
            result.js3.push((steps, js_divergence(&hist.frequencies(), &reference)));
            result
                .gen_ppl
                .push((steps, gen_ppl_under_source(&seqs, source.as_ref())?.ppl));
            if task == Task::Bracket {
                let pairs = vocab.size() / 2;
                let vun = grammar_vun(&seqs, |t| bracket_check(t, pairs), &train_set);
                result.vun.push((steps, vun));
            }
        }
        log(&format!("seed {seed}: {variant:?} {:?}", result));
        variants.push(result);
    }
    Ok(SeedResult {
        task,
        seed,
        entropy_rate: (task == Task::Markov).then(|| MarkovSource::desk_default().entropy_rate()),
        base_nll,
        variants,
    })
}

pub fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
