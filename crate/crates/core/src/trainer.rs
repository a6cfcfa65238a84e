//! Masked-diffusion training: the vanilla single-pass step, the two-pass
//! self-conditioned step with a stop-gradient between passes, and Adam.

use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserParams, FusionMode, ScInput};
use crate::diffusion::{
    corrupt_marginal, CleanStateEstimate, LatentSeq, NoiseSchedule, ScheduleKind, TokenSeq,
};
use crate::error::{Error, Result};
use crate::gradcore::{Graph, NodeId, ParamKey, Tensor, PROB_FLOOR};
use crate::rng::{self, Purpose};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScMode {
    /// Single pass with the null estimate.
    Off,
    /// Always two passes.
    Full,
    /// With probability `rate` per step, a single unconditioned pass.
    Partial(f64),
}

impl ScMode {
    fn dropout_rate(self) -> f64 {
        match self {
            ScMode::Off => 1.0,
            ScMode::Full => 0.0,
            ScMode::Partial(r) => r,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub sc_mode: ScMode,
    /// Used when self-conditioning layers have to be attached.
    pub fusion: FusionMode,
    pub steps: usize,
    #[serde(default)]
    pub schedule: ScheduleKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    pub seed: u64,
    pub max_tokens: u64,
}

fn default_clip() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sc_mode: ScMode::Off,
            fusion: FusionMode::Concat,
            steps: 32,
            schedule: ScheduleKind::Linear,
            learning_rate: 3e-3,
            warmup_steps: 100,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            clip_norm: 1.0,
            seed: 0,
            max_tokens: 5_000_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let ScMode::Partial(r) = self.sc_mode {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("partial rate must lie in (0, 1), got {r}")));
            }
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule, self.steps)
    }

    /// Constant rate after a linear warmup over `warmup_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Adam moments, aligned with [`DenoiserParams::named`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &DenoiserParams) -> Self {
        let zeros: Vec<Tensor> = params
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    fn matches(&self, params: &[&mut Tensor]) -> bool {
        self.first.len() == params.len()
            && self.second.len() == params.len()
            && params
                .iter()
                .zip(&self.first)
                .all(|(p, m)| p.shape() == m.shape())
    }
}

/// One bias-corrected Adam update with `ε = 1e-8`.
pub fn adam_step(
    params: &mut DenoiserParams,
    grads: &[Tensor],
    opt: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
) -> Result<()> {
    let mut slots: Vec<&mut Tensor> = params.named_mut().into_iter().map(|(_, t)| t).collect();
    if !opt.matches(&slots) || grads.len() != slots.len() {
        return Err(Error::Config("optimizer state does not match parameters".into()));
    }
    opt.step += 1;
    let k = opt.step as i32;
    let c1 = 1.0 - beta1.powi(k);
    let c2 = 1.0 - beta2.powi(k);
    for (i, p) in slots.iter_mut().enumerate() {
        if grads[i].shape() != p.shape() {
            return Err(Error::Config(format!("gradient {i} has the wrong shape")));
        }
        let g = grads[i].as_slice();
        let m = opt.first[i].as_mut_slice();
        let v = opt.second[i].as_mut_slice();
        for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Adds self-conditioning layers with outputs unchanged; see
/// [`DenoiserParams::attach_self_conditioning`].
pub fn attach_self_conditioning<R: Rng + ?Sized>(
    params: &DenoiserParams,
    fusion: FusionMode,
    rng: &mut R,
) -> Result<DenoiserParams> {
    params.attach_self_conditioning(fusion, rng)
}

/// `T · w_t` with `w_t = (α_{t−1} − α_t) / (1 − α_t)`.
pub fn loss_weight(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    let (_, clean_coef) = schedule.reverse_coefficients(t)?;
    Ok(schedule.steps() as f64 * clean_coef)
}

/// `T · w_t · Σ_{masked i} −ln p_i[x0_i]`. Returns the loss and how many
/// probabilities were floored at `1e-12`.
pub fn mdm_loss(
    clean_est: &CleanStateEstimate,
    x0: &TokenSeq,
    x_t: &LatentSeq,
    schedule: &NoiseSchedule,
) -> Result<(f64, usize)> {
    if clean_est.is_null() {
        return Err(Error::Usage("loss needs a non-null clean-state estimate".into()));
    }
    if x0.len() != x_t.len() || clean_est.len() != x_t.len() {
        return Err(Error::Config("loss inputs have different lengths".into()));
    }
    let weight = loss_weight(schedule, x_t.t())?;
    let mut sum = 0.0;
    let mut clamped = 0;
    for i in (0..x_t.len()).filter(|&i| x_t.is_masked(i)) {
        let p = clean_est.row(i).expect("non-null")[x0.tokens()[i]];
        if p < PROB_FLOOR {
            clamped += 1;
        }
        sum -= p.max(PROB_FLOOR).ln();
    }
    if clamped > 0 {
        log::warn!("{clamped} probabilities floored at {PROB_FLOOR}");
    }
    Ok((weight * sum, clamped))
}

/// How the loss graph treats the first pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Passes {
    Single,
    /// Second pass conditioned on a stop-gradient of the first.
    Two,
    /// Second pass conditioned on a constant equal to the first pass output,
    /// computed in a separate graph. Reference for the stop-gradient.
    TwoConstant,
}

/// A loss graph for one sequence, ready for `forward_eval(&[])`.
pub fn loss_graph(
    params: &DenoiserParams,
    x0: &TokenSeq,
    x_t: &LatentSeq,
    schedule: &NoiseSchedule,
    passes: Passes,
) -> Result<(Graph, NodeId)> {
    let t_idx = params.time_index(x_t.t(), schedule.steps())?;
    let mut g = Graph::new();
    let handles = params.register(&mut g);
    let sc = match passes {
        Passes::Single => ScInput::Null,
        Passes::Two => {
            let first = params.build(&mut g, &handles, x_t, t_idx, ScInput::Null)?;
            ScInput::Node(g.stop_gradient(first)?)
        }
        Passes::TwoConstant => {
            let mut scratch = Graph::new();
            let h = params.register(&mut scratch);
            let first = params.build(&mut scratch, &h, x_t, t_idx, ScInput::Null)?;
            scratch.set_output(first)?;
            let value = scratch.forward_eval(&[])?.clone();
            ScInput::Node(g.constant(value))
        }
    };
    let probs = params.build(&mut g, &handles, x_t, t_idx, sc)?;
    let mask = x_t.vocab().mask_id();
    let targets = x_t
        .tokens()
        .iter()
        .zip(x0.tokens())
        .map(|(&z, &x)| (z == mask).then_some(x))
        .collect();
    let loss = g.masked_cross_entropy(probs, targets, loss_weight(schedule, x_t.t())?)?;
    g.set_output(loss)?;
    Ok((g, loss))
}

/// Loss and per-parameter gradients (in [`DenoiserParams::named`] order) for one sequence.
pub fn sequence_gradients(
    params: &DenoiserParams,
    x0: &TokenSeq,
    x_t: &LatentSeq,
    schedule: &NoiseSchedule,
    passes: Passes,
) -> Result<(f64, Vec<Tensor>, usize)> {
    let (mut g, _) = loss_graph(params, x0, x_t, schedule, passes)?;
    let loss = g.forward_eval(&[])?.get(0, 0);
    let clamped = g.clamped_count();
    let grads = g.backward(&Tensor::scalar(1.0))?;
    let count = params.named().len();
    let ordered = (0..count)
        .map(|i| {
            grads
                .get(ParamKey(i))
                .cloned()
                .ok_or_else(|| Error::State(format!("missing gradient for parameter {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, ordered, clamped))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    /// Mean loss over the batch.
    pub loss: f64,
    /// Sampled step per sequence.
    pub t: Vec<usize>,
    pub masked_count: usize,
    pub pass_count: u8,
    pub clamped: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl LossRecord {
    pub fn log_line(&self, step: u64, wall_ms: u128) -> String {
        let ts: Vec<String> = self.t.iter().map(|t| t.to_string()).collect();
        format!(
            "step={step} t={} loss={:.6} masked_count={} pass_count={} wall_ms={wall_ms}",
            ts.join(","),
            self.loss,
            self.masked_count,
            self.pass_count
        )
    }
}

/// Batch-mean gradients for one step without touching the parameters.
///
/// Draw order from `rng`: one `u64` seed per sequence, then, in partial mode
/// only, one uniform deciding the single-pass branch. Each sequence seed
/// drives `t ~ U{1..T}` and then the corruption mask.
pub fn batch_gradients<R: RngCore + ?Sized>(
    params: &DenoiserParams,
    batch: &[TokenSeq],
    sc_mode: ScMode,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(LossRecord, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let seeds: Vec<u64> = batch.iter().map(|_| rng.next_u64()).collect();
    let single = match sc_mode {
        ScMode::Off => true,
        ScMode::Full => false,
        ScMode::Partial(_) => rng.gen::<f64>() < sc_mode.dropout_rate(),
    };
    let passes = if single { Passes::Single } else { Passes::Two };
    let vocab = params.vocab();

    let per_seq = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(x0, &seed)| {
            let mut r = rng::Rng::seed_from_u64(seed);
            let t = r.gen_range(1..=schedule.steps());
            let x_t = corrupt_marginal(x0, t, schedule, vocab, &mut r)?;
            let (loss, grads, clamped) = sequence_gradients(params, x0, &x_t, schedule, passes)?;
            Ok((t, x_t.masked_count(), loss, grads, clamped))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = batch.len() as f64;
    let mut total: Vec<Tensor> = params
        .named()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
        .collect();
    let mut record = LossRecord {
        loss: 0.0,
        t: Vec::with_capacity(batch.len()),
        masked_count: 0,
        pass_count: if single { 1 } else { 2 },
        clamped: 0,
        grad_norm: 0.0,
    };
    for (t, masked, loss, grads, clamped) in per_seq {
        record.t.push(t);
        record.masked_count += masked;
        record.loss += loss;
        record.clamped += clamped;
        for (acc, g) in total.iter_mut().zip(&grads) {
            acc.add_assign(g);
        }
    }
    record.loss /= n;
    for g in &mut total {
        g.scale_in_place(1.0 / n);
    }
    record.grad_norm = total.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if !record.loss.is_finite() || !record.grad_norm.is_finite() {
        return Err(Error::numeric(
            "training step",
            format!("loss {} with gradient norm {}", record.loss, record.grad_norm),
        ));
    }
    Ok((record, total))
}

/// One optimizer step. Gradients are averaged over the batch and clipped to
/// global norm `config.clip_norm`; a non-finite loss aborts before any update.
pub fn train_step<R: RngCore + ?Sized>(
    params: &mut DenoiserParams,
    opt: &mut AdamState,
    batch: &[TokenSeq],
    sc_mode: ScMode,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossRecord> {
    if sc_mode != ScMode::Off && params.self_cond.is_none() {
        return Err(Error::Usage(
            "self-conditioned training needs self-conditioning layers".into(),
        ));
    }
    let (record, mut grads) = batch_gradients(params, batch, sc_mode, schedule, rng)?;
    if record.grad_norm > config.clip_norm {
        let scale = config.clip_norm / record.grad_norm;
        for g in &mut grads {
            g.scale_in_place(scale);
        }
    }
    let lr = config.lr_at(opt.step);
    adam_step(params, &grads, opt, lr, config.adam_beta1, config.adam_beta2)?;
    Ok(record)
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub opt: AdamState,
    /// Tokens consumed by this run so far.
    pub tokens: u64,
}

impl TrainState {
    pub fn new(params: DenoiserParams) -> Self {
        let opt = AdamState::new(&params);
        Self {
            params,
            opt,
            tokens: 0,
        }
    }
}

/// Trains until `state.tokens ≥ config.max_tokens` or `stop_after` steps
/// have run. Step `k` draws its batch and corruption from streams keyed by
/// `(config.seed, k)`, so stopping and resuming reproduces an uninterrupted run.
pub fn train(
    state: &mut TrainState,
    data: &[TokenSeq],
    config: &TrainConfig,
    stop_after: Option<u64>,
    mut on_step: impl FnMut(u64, &LossRecord, u128),
) -> Result<()> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let schedule = config.schedule()?;
    let seq_len = data[0].len() as u64;
    let mut ran = 0u64;
    while state.tokens < config.max_tokens && stop_after.is_none_or(|n| ran < n) {
        let step = state.opt.step;
        let started = Instant::now();
        let mut pick = rng::step_stream(config.seed, step, Purpose::Batch);
        let batch: Vec<TokenSeq> = (0..config.batch_size)
            .map(|_| data[pick.gen_range(0..data.len())].clone())
            .collect();
        let mut corrupt = rng::step_stream(config.seed, step, Purpose::Corruption);
        let record = train_step(
            &mut state.params,
            &mut state.opt,
            &batch,
            config.sc_mode,
            config,
            &schedule,
            &mut corrupt,
        )?;
        state.tokens += config.batch_size as u64 * seq_len;
        ran += 1;
        on_step(step, &record, started.elapsed().as_millis());
    }
    Ok(())
}
