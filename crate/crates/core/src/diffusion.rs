//! Absorbing-mask forward corruption and the reverse transition kernel.
//!
//! Token ids `0..V` are clean symbols and `V` is the mask. The schedule
//! `α_0..α_T` is the probability that a token is still unmasked at step `t`.
//! In reverse, a masked position at step `t` moves to the mask with weight
//! `1 − α_{t−1}` and to clean token `c` with weight `(α_{t−1} − α_t)·x̂_0[c]`,
//! both divided by `1 − α_t`; unmasked positions are carried over.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!("vocabulary needs at least 2 tokens, got {size}")));
        }
        Ok(Self { size })
    }

    /// Number of clean tokens `V`.
    pub fn size(self) -> usize {
        self.size
    }

    pub fn mask_id(self) -> usize {
        self.size
    }

    /// `V + 1`, clean tokens plus the mask.
    pub fn alphabet(self) -> usize {
        self.size + 1
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `α_t = 1 − t/T`.
    #[default]
    Linear,
    /// `α_t = 1 − ln(1 + (e − 1)·t/T)`; unmasks faster early in sampling.
    LogLinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let tf = steps as f64;
        let alphas = (0..=steps)
            .map(|t| {
                let s = t as f64 / tf;
                match kind {
                    ScheduleKind::Linear => 1.0 - s,
                    ScheduleKind::LogLinear => 1.0 - (1.0 + (std::f64::consts::E - 1.0) * s).ln(),
                }
            })
            .collect::<Vec<_>>();
        let mut alphas = alphas;
        // Pin the endpoints exactly.
        alphas[0] = 1.0;
        alphas[steps] = 0.0;
        Self::from_alphas(alphas)
    }

    pub fn linear(steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::Linear, steps)
    }

    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::Config("schedule needs α_0 and α_T".into()));
        }
        if alphas[0] != 1.0 || *alphas.last().unwrap() != 0.0 {
            return Err(Error::Config("schedule must start at 1 and end at 0".into()));
        }
        if alphas.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Config("schedule must be strictly decreasing".into()));
        }
        Ok(Self { alphas })
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Usage(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `α_t / α_{t−1}`, the per-step survival probability.
    pub fn alpha_ratio(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        let prev = self.alphas[t - 1];
        if prev == 0.0 {
            return Err(Error::numeric(format!("alpha_ratio(t={t})"), "α_{t−1} = 0"));
        }
        Ok(self.alphas[t] / prev)
    }

    /// Coefficients `(mask, clean)` of the reverse kernel at a masked position:
    /// `(1 − α_{t−1})/(1 − α_t)` and `(α_{t−1} − α_t)/(1 − α_t)`.
    pub fn reverse_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let (prev, cur) = (self.alphas[t - 1], self.alphas[t]);
        let denom = 1.0 - cur;
        if denom <= 0.0 {
            return Err(Error::numeric(format!("reverse kernel (t={t})"), "α_t = 1"));
        }
        Ok(((1.0 - prev) / denom, (prev - cur) / denom))
    }
}

/// A clean sequence: no mask tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSeq {
    tokens: Vec<usize>,
}

impl TokenSeq {
    pub fn new(tokens: Vec<usize>, vocab: Vocab) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&tok| tok >= vocab.size()) {
            return Err(Error::Usage(format!(
                "token {bad} is not a clean token for vocabulary of size {}",
                vocab.size()
            )));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A partially masked sequence at diffusion step `t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentSeq {
    tokens: Vec<usize>,
    t: usize,
    vocab: Vocab,
}

impl LatentSeq {
    pub fn new(tokens: Vec<usize>, t: usize, vocab: Vocab) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&tok| tok > vocab.mask_id()) {
            return Err(Error::Usage(format!("latent token {bad} out of range")));
        }
        Ok(Self { tokens, t, vocab })
    }

    pub fn fully_masked(len: usize, t: usize, vocab: Vocab) -> Self {
        Self {
            tokens: vec![vocab.mask_id(); len],
            t,
            vocab,
        }
    }

    pub fn clean(x0: &TokenSeq, vocab: Vocab) -> Self {
        Self {
            tokens: x0.tokens.clone(),
            t: 0,
            vocab,
        }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == self.vocab.mask_id()
    }

    pub fn masked_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_masked(i)).count()
    }

    /// Converts to a clean sequence; fails if any mask remains.
    pub fn into_clean(self) -> Result<TokenSeq> {
        if self.masked_count() > 0 {
            return Err(Error::State("sequence still contains mask tokens".into()));
        }
        Ok(TokenSeq {
            tokens: self.tokens,
        })
    }
}

/// Per-position distribution over clean tokens, or the null estimate `0_sc`.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanStateEstimate {
    len: usize,
    vocab: usize,
    probs: Option<Vec<f64>>,
}

impl CleanStateEstimate {
    pub const ROW_TOLERANCE: f64 = 1e-9;

    pub fn null(len: usize, vocab: usize) -> Self {
        Self {
            len,
            vocab,
            probs: None,
        }
    }

    /// Row-major `len × vocab` probabilities; each row must be a simplex point.
    pub fn from_probs(len: usize, vocab: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != len * vocab {
            return Err(Error::Config(format!(
                "estimate needs {}x{} values, got {}",
                len,
                vocab,
                probs.len()
            )));
        }
        for (i, row) in probs.chunks(vocab.max(1)).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > Self::ROW_TOLERANCE {
                return Err(Error::numeric(
                    format!("clean-state row {i}"),
                    format!("not a probability vector (sum {total})"),
                ));
            }
        }
        Ok(Self {
            len,
            vocab,
            probs: Some(probs),
        })
    }

    pub fn is_null(&self) -> bool {
        self.probs.is_none()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, i: usize) -> Option<&[f64]> {
        self.probs
            .as_ref()
            .map(|p| &p[i * self.vocab..(i + 1) * self.vocab])
    }

    pub fn probs(&self) -> Option<&[f64]> {
        self.probs.as_deref()
    }

    /// Dense `len × vocab` values with zeros for the null estimate.
    pub fn dense(&self) -> Vec<f64> {
        self.probs
            .clone()
            .unwrap_or_else(|| vec![0.0; self.len * self.vocab])
    }
}

/// Per-position categorical over `V + 1` symbols, mask last.
#[derive(Clone, Debug, PartialEq)]
pub struct ReverseDistribution {
    width: usize,
    rows: Vec<f64>,
}

impl ReverseDistribution {
    pub fn len(&self) -> usize {
        self.rows.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.width..(i + 1) * self.width]
    }
}

/// Samples `x_t ~ q(x_t | x_0)`: each position survives with probability `α_t`.
/// One uniform draw per position, in position order.
pub fn corrupt_marginal<R: Rng + ?Sized>(
    x0: &TokenSeq,
    t: usize,
    schedule: &NoiseSchedule,
    vocab: Vocab,
    rng: &mut R,
) -> Result<LatentSeq> {
    if t > schedule.steps() {
        return Err(Error::Usage(format!("step {t} beyond T = {}", schedule.steps())));
    }
    let keep = schedule.alpha(t);
    let tokens = x0
        .tokens()
        .iter()
        .map(|&tok| {
            if rng.gen::<f64>() < keep {
                tok
            } else {
                vocab.mask_id()
            }
        })
        .collect();
    Ok(LatentSeq { tokens, t, vocab })
}

/// One forward step `x_{t−1} → x_t`. Draws only for still-unmasked positions.
pub fn corrupt_stepwise<R: Rng + ?Sized>(
    x_prev: &LatentSeq,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentSeq> {
    if x_prev.t + 1 != t {
        return Err(Error::Usage(format!(
            "stepwise corruption to {t} needs a latent at {}, got {}",
            t.saturating_sub(1),
            x_prev.t
        )));
    }
    let survive = schedule.alpha_ratio(t)?;
    Ok(apply_survival(x_prev, t, survive, rng))
}

fn apply_survival<R: Rng + ?Sized>(x_prev: &LatentSeq, t: usize, survive: f64, rng: &mut R) -> LatentSeq {
    let mask = x_prev.vocab.mask_id();
    let tokens = x_prev
        .tokens
        .iter()
        .map(|&tok| {
            if tok == mask || rng.gen::<f64>() < survive {
                tok
            } else {
                mask
            }
        })
        .collect();
    LatentSeq {
        tokens,
        t,
        vocab: x_prev.vocab,
    }
}

/// The reverse kernel `p(x_{t−1} | x_t, x̂_0)` at every position.
pub fn reverse_distribution(
    x_t: &LatentSeq,
    clean_est: &CleanStateEstimate,
    schedule: &NoiseSchedule,
) -> Result<ReverseDistribution> {
    let vocab = x_t.vocab;
    if clean_est.is_null() {
        return Err(Error::Usage("reverse kernel needs a non-null clean-state estimate".into()));
    }
    if clean_est.len() != x_t.len() || clean_est.vocab() != vocab.size() {
        return Err(Error::Config(format!(
            "estimate is {}x{}, latent needs {}x{}",
            clean_est.len(),
            clean_est.vocab(),
            x_t.len(),
            vocab.size()
        )));
    }
    let (mask_coef, clean_coef) = schedule.reverse_coefficients(x_t.t)?;
    let width = vocab.alphabet();
    let mut rows = vec![0.0; x_t.len() * width];
    for (i, row) in rows.chunks_mut(width).enumerate() {
        let tok = x_t.tokens[i];
        if tok != vocab.mask_id() {
            row[tok] = 1.0;
            continue;
        }
        let probs = clean_est.row(i).expect("checked non-null");
        for (r, p) in row.iter_mut().zip(probs) {
            *r = clean_coef * p;
        }
        row[vocab.mask_id()] = mask_coef;
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(ReverseDistribution { width, rows })
}

/// Draws `x_{t−1}`. One uniform draw per masked position, in position order;
/// unmasked positions consume nothing.
pub fn reverse_sample<R: Rng + ?Sized>(
    x_t: &LatentSeq,
    clean_est: &CleanStateEstimate,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentSeq> {
    let dist = reverse_distribution(x_t, clean_est, schedule)?;
    let mask = x_t.vocab.mask_id();
    let tokens = x_t
        .tokens
        .iter()
        .enumerate()
        .map(|(i, &tok)| {
            if tok != mask {
                tok
            } else {
                sample_categorical(dist.row(i), rng.gen::<f64>())
            }
        })
        .collect();
    Ok(LatentSeq {
        tokens,
        t: x_t.t - 1,
        vocab: x_t.vocab,
    })
}

/// Inverse-CDF draw; round-off past the end lands on the last symbol with mass.
pub(crate) fn sample_categorical(row: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (k, &p) in row.iter().enumerate() {
        cum += p;
        if u < cum {
            return k;
        }
    }
    row.iter()
        .rposition(|&p| p > 0.0)
        .expect("categorical row has positive mass")
}
