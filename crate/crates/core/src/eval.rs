//! Sample and model metrics. Entropies are in nats, JS divergence in bits.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashSet};
use std::hash::{Hash, Hasher};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SequenceSource;
use crate::denoiser::DenoiserParams;
use crate::diffusion::{corrupt_marginal, CleanStateEstimate, NoiseSchedule, TokenSeq, Vocab};
use crate::error::{Error, Result};
use crate::gradcore::PROB_FLOOR;
use crate::rng;
use crate::sampler::SamplerTrace;
use crate::trainer::mdm_loss;

/// Entropy of the empirical token distribution of one sequence.
pub fn token_entropy(x: &TokenSeq) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &tok in x.tokens() {
        *counts.entry(tok).or_default() += 1;
    }
    let n = x.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn trace_len(trace: &SamplerTrace) -> usize {
    trace.steps.iter().map(|s| s.unmasked.len()).sum()
}

/// Fraction of unmasked positions whose left neighbour was already clean when
/// their step began. Position 0 always counts.
pub fn local_ar_at_1(trace: &SamplerTrace) -> Result<f64> {
    let len = trace_len(trace);
    if len == 0 {
        return Err(Error::Usage("local AR needs a non-empty trace".into()));
    }
    let mut clean = vec![false; len];
    let mut hits = 0usize;
    for step in &trace.steps {
        hits += step
            .unmasked
            .iter()
            .filter(|&&i| i == 0 || clean[i - 1])
            .count();
        for &i in &step.unmasked {
            clean[i] = true;
        }
    }
    Ok(hits as f64 / len as f64)
}

/// Fraction of unmasked positions that were among the `k` leftmost
/// still-masked positions when their step began.
pub fn global_ar_at_k(trace: &SamplerTrace, k: usize) -> Result<f64> {
    let len = trace_len(trace);
    if len == 0 {
        return Err(Error::Usage("global AR needs a non-empty trace".into()));
    }
    let mut masked = vec![true; len];
    let mut hits = 0usize;
    for step in &trace.steps {
        let front: Vec<usize> = (0..len).filter(|&i| masked[i]).take(k).collect();
        hits += step.unmasked.iter().filter(|i| front.contains(i)).count();
        for &i in &step.unmasked {
            masked[i] = false;
        }
    }
    Ok(hits as f64 / len as f64)
}

/// Counts of overlapping `k`-mers within each sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KmerHistogram {
    k: usize,
    vocab: usize,
    counts: Vec<u64>,
    total: u64,
}

impl KmerHistogram {
    pub fn new(k: usize, vocab: Vocab) -> Result<Self> {
        let cells = vocab
            .size()
            .checked_pow(k as u32)
            .filter(|&c| k > 0 && c <= 1 << 24)
            .ok_or_else(|| Error::Config(format!("k-mer table for k={k} is too large")))?;
        Ok(Self {
            k,
            vocab: vocab.size(),
            counts: vec![0; cells],
            total: 0,
        })
    }

    pub fn from_sequences(seqs: &[TokenSeq], k: usize, vocab: Vocab) -> Result<Self> {
        let mut h = Self::new(k, vocab)?;
        for s in seqs {
            h.add(s.tokens())?;
        }
        Ok(h)
    }

    pub fn add(&mut self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::Config(format!("token {bad} is not a clean token")));
        }
        for window in tokens.windows(self.k) {
            let idx = window.iter().fold(0, |acc, &t| acc * self.vocab + t);
            self.counts[idx] += 1;
            self.total += 1;
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.total as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

fn kl_to_mixture_bits(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &mi)| pi * (pi / mi).log2())
        .sum()
}

/// Jensen–Shannon divergence between two frequency vectors, base 2.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_to_mixture_bits(p, &m) + 0.5 * kl_to_mixture_bits(q, &m);
    js.clamp(0.0, 1.0)
}

pub fn kmer_js(generated: &KmerHistogram, reference: &KmerHistogram) -> Result<f64> {
    if generated.k != reference.k || generated.vocab != reference.vocab {
        return Err(Error::Usage("k-mer histograms differ in k or vocabulary".into()));
    }
    if generated.total == 0 || reference.total == 0 {
        return Err(Error::Usage("k-mer histogram is empty".into()));
    }
    if generated == reference {
        return Ok(0.0);
    }
    Ok(js_divergence(&generated.frequencies(), &reference.frequencies()))
}

/// A mean with its standard error over `n` independent units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    /// Sorts before summing so the result does not depend on input order.
    pub fn from_values(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Self { mean, se, n }
    }
}

fn content_seed(seed: u64, tokens: &[usize]) -> u64 {
    let mut h = DefaultHasher::new();
    seed.hash(&mut h);
    tokens.hash(&mut h);
    h.finish()
}

/// Monte-Carlo NELBO in nats per token: each sequence gets `mc_draws` draws
/// of `t ~ U{1..T}` and a corruption, scored with the training loss. With
/// `sc_emulation` the score comes from the second of two passes, as in
/// self-conditioned training. Each sequence's draws are seeded from its
/// content, so reordering the dataset leaves the result unchanged.
pub fn nll_upper_bound(
    params: &DenoiserParams,
    data: &[TokenSeq],
    schedule: &NoiseSchedule,
    mc_draws: usize,
    seed: u64,
    sc_emulation: bool,
) -> Result<Estimate> {
    if mc_draws == 0 || data.is_empty() {
        return Err(Error::Usage("NLL bound needs at least one draw and one sequence".into()));
    }
    let vocab = params.vocab();
    let steps = schedule.steps();
    let per_seq = data
        .par_iter()
        .map(|x0| {
            use rand::Rng;
            let mut r = rng::stream(content_seed(seed, x0.tokens()), 0);
            let null = CleanStateEstimate::null(x0.len(), vocab.size());
            let mut total = 0.0;
            for _ in 0..mc_draws {
                let t = r.gen_range(1..=steps);
                let x_t = corrupt_marginal(x0, t, schedule, vocab, &mut r)?;
                if x_t.masked_count() == 0 {
                    continue;
                }
                let mut est = params.forward(&x_t, steps, &null)?;
                if sc_emulation {
                    est = params.forward(&x_t, steps, &est)?;
                }
                total += mdm_loss(&est, x0, &x_t, schedule)?.0;
            }
            Ok(total / (mc_draws * x0.len()) as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::from_values(per_seq))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub ppl: f64,
    /// Tokens whose source probability was floored at `1e-12`.
    pub violations: usize,
}

/// `exp` of the mean negative per-token log-likelihood under the source.
pub fn gen_ppl_under_source(samples: &[TokenSeq], source: &dyn SequenceSource) -> Result<PplReport> {
    let mut nll = 0.0;
    let mut tokens = 0usize;
    let mut violations = 0usize;
    for s in samples {
        for p in source.conditional_probs(s.tokens()) {
            if p < PROB_FLOOR {
                violations += 1;
            }
            nll -= p.max(PROB_FLOOR).ln();
            tokens += 1;
        }
    }
    if tokens == 0 {
        return Err(Error::Usage("no tokens to score".into()));
    }
    Ok(PplReport {
        ppl: (nll / tokens as f64).exp(),
        violations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vun {
    pub valid: usize,
    pub unique: usize,
    pub novel: usize,
}

pub fn grammar_vun(
    samples: &[TokenSeq],
    checker: impl Fn(&[usize]) -> bool,
    train_set: &[TokenSeq],
) -> Vun {
    let valid: Vec<&[usize]> = samples
        .iter()
        .map(TokenSeq::tokens)
        .filter(|t| checker(t))
        .collect();
    let distinct: HashSet<&[usize]> = valid.iter().copied().collect();
    let seen: HashSet<&[usize]> = train_set.iter().map(TokenSeq::tokens).collect();
    Vun {
        valid: valid.len(),
        unique: distinct.len(),
        novel: distinct.iter().filter(|t| !seen.contains(*t)).count(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub n: usize,
    pub se: Option<f64>,
}

/// Named scalars plus free-form metadata.
///
/// Text form: `key=value` lines. Metadata lines are `meta.NAME=VALUE`;
/// each metric `NAME` gives `NAME=VALUE`, `NAME.n=N` and, when known,
/// `NAME.se=SE`. Lines are sorted by key.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: Vec<Metric>,
    pub meta: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn new() -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("entropy_log_base".into(), "e".into());
        meta.insert("js_log_base".into(), "2".into());
        Self {
            metrics: Vec::new(),
            meta,
        }
    }

    pub fn push(&mut self, name: &str, value: f64, n: usize, se: Option<f64>) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::numeric(format!("metric {name}"), format!("value {value}")));
        }
        if name.is_empty() || name.contains(['=', '\n', ' ']) || name.ends_with(".n") || name.ends_with(".se") {
            return Err(Error::Usage(format!("invalid metric name `{name}`")));
        }
        self.metrics.push(Metric {
            name: name.into(),
            value,
            n,
            se: se.filter(|s| s.is_finite()),
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Metric> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn to_kv_text(&self) -> String {
        let mut lines: BTreeMap<String, String> = BTreeMap::new();
        for (k, v) in &self.meta {
            lines.insert(format!("meta.{k}"), v.clone());
        }
        for m in &self.metrics {
            lines.insert(m.name.clone(), format!("{:?}", m.value));
            lines.insert(format!("{}.n", m.name), m.n.to_string());
            if let Some(se) = m.se {
                lines.insert(format!("{}.se", m.name), format!("{se:?}"));
            }
        }
        lines.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut raw: BTreeMap<String, String> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, format!("expected key=value, found `{line}`")))?;
            raw.insert(k.to_string(), v.to_string());
        }
        let mut report = MetricReport::default();
        for (k, v) in &raw {
            if let Some(meta) = k.strip_prefix("meta.") {
                report.meta.insert(meta.into(), v.clone());
                continue;
            }
            if k.ends_with(".n") || k.ends_with(".se") {
                continue;
            }
            let value: f64 = v
                .parse()
                .map_err(|_| Error::parse(0, format!("metric `{k}` is not a number")))?;
            let n = raw
                .get(&format!("{k}.n"))
                .and_then(|s| s.parse().ok())
                .unwrap_or(0);
            let se = raw.get(&format!("{k}.se")).and_then(|s| s.parse().ok());
            report.push(k, value, n, se)?;
        }
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub name: String,
    pub a: f64,
    pub b: f64,
    /// `b − a`.
    pub delta: f64,
    /// `(a − b) / |a|`: positive when `b` is lower. `None` when `a = 0`.
    pub relative_improvement: Option<f64>,
}

/// Per-metric differences for metrics present in both reports, in `a`'s order.
pub fn compare_reports(a: &MetricReport, b: &MetricReport) -> Vec<MetricDelta> {
    a.metrics
        .iter()
        .filter_map(|ma| {
            let mb = b.get(&ma.name)?;
            Some(MetricDelta {
                name: ma.name.clone(),
                a: ma.value,
                b: mb.value,
                delta: mb.value - ma.value,
                relative_improvement: (ma.value != 0.0).then(|| (ma.value - mb.value) / ma.value.abs()),
            })
        })
        .collect()
}
