//! Ancestral sampling from the all-mask state, one denoiser call per step.

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SequenceSource;
use crate::denoiser::Denoiser;
use crate::diffusion::{reverse_sample, CleanStateEstimate, LatentSeq, NoiseSchedule, TokenSeq, Vocab};
use crate::error::{Error, Result};
use crate::rng;

/// Largest `V^L` the exact oracle will enumerate.
pub const ORACLE_CAP: usize = 81;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Positions that went from mask to a clean token during this step.
    pub unmasked: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerTrace {
    /// Master seed and stream index, when the sample came from [`batch_sample`].
    pub origin: Option<(u64, u64)>,
    /// Reverse steps in execution order, `t = T` first.
    pub steps: Vec<StepRecord>,
    pub calls: usize,
}

impl SamplerTrace {
    /// Unmasked positions per step as JSON lines, one record per step.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("plain struct"));
            out.push('\n');
        }
        out
    }
}

/// Draws one sequence of length `len`.
///
/// At `t = T` the denoiser sees the null estimate. With `sc_enabled` every
/// later step sees the full estimate from the step before; without it, the
/// null estimate throughout.
pub fn sample<D, R>(
    model: &D,
    schedule: &NoiseSchedule,
    len: usize,
    rng: &mut R,
    sc_enabled: bool,
) -> Result<(TokenSeq, SamplerTrace)>
where
    D: Denoiser + ?Sized,
    R: RngCore + ?Sized,
{
    let vocab = model.vocab();
    let steps = schedule.steps();
    let null = CleanStateEstimate::null(len, vocab.size());
    let mut x = LatentSeq::fully_masked(len, steps, vocab);
    let mut prev = null.clone();
    let mut trace = SamplerTrace {
        origin: None,
        steps: Vec::with_capacity(steps),
        calls: 0,
    };
    for t in (1..=steps).rev() {
        let sc = if sc_enabled { &prev } else { &null };
        let est = model.denoise(&x, steps, sc)?;
        trace.calls += 1;
        let next = reverse_sample(&x, &est, schedule, rng)?;
        let unmasked = (0..len)
            .filter(|&i| x.is_masked(i) && !next.is_masked(i))
            .collect();
        trace.steps.push(StepRecord { t, unmasked });
        x = next;
        prev = est;
    }
    let seq = x
        .into_clean()
        .map_err(|e| Error::State(format!("sampler ended with a masked position: {e}")))?;
    Ok((seq, trace))
}

/// `n` samples; sample `i` uses `stream(master_seed, i)`, so the output does
/// not depend on the thread count.
pub fn batch_sample<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    len: usize,
    n: usize,
    master_seed: u64,
    sc_enabled: bool,
) -> Result<Vec<(TokenSeq, SamplerTrace)>> {
    if n == 0 {
        return Err(Error::Usage("sample count must be at least 1".into()));
    }
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(master_seed, i);
            let (seq, mut trace) = sample(model, schedule, len, &mut r, sc_enabled)?;
            trace.origin = Some((master_seed, i));
            Ok((seq, trace))
        })
        .collect()
}

/// Exact posterior `p(x_0^i | unmasked tokens of x_t)` by enumerating every
/// clean sequence of the source. Ignores the self-conditioning input.
pub struct OracleDenoiser {
    vocab: Vocab,
    len: usize,
    /// Every clean sequence with its probability under the source.
    table: Vec<(Vec<usize>, f64)>,
}

impl OracleDenoiser {
    pub fn new(source: &dyn SequenceSource, len: usize) -> Result<Self> {
        let vocab = source.vocab();
        let v = vocab.size();
        let count = v
            .checked_pow(len as u32)
            .filter(|&c| c <= ORACLE_CAP)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "oracle enumeration of {v}^{len} sequences exceeds the cap of {ORACLE_CAP}"
                ))
            })?;
        let table = (0..count)
            .map(|code| {
                let mut seq = vec![0; len];
                let mut rest = code;
                for slot in seq.iter_mut().rev() {
                    *slot = rest % v;
                    rest /= v;
                }
                let p = source.sequence_prob(&seq);
                (seq, p)
            })
            .collect();
        Ok(Self { vocab, len, table })
    }

    pub fn table(&self) -> &[(Vec<usize>, f64)] {
        &self.table
    }
}

impl Denoiser for OracleDenoiser {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn denoise(
        &self,
        x_t: &LatentSeq,
        _steps: usize,
        _sc: &CleanStateEstimate,
    ) -> Result<CleanStateEstimate> {
        oracle_denoise(self, x_t)
    }
}

pub fn oracle_denoise(oracle: &OracleDenoiser, x_t: &LatentSeq) -> Result<CleanStateEstimate> {
    let (v, len) = (oracle.vocab.size(), oracle.len);
    if x_t.len() != len || x_t.vocab() != oracle.vocab {
        return Err(Error::Config("latent does not match the oracle's shape".into()));
    }
    let mask = oracle.vocab.mask_id();
    let mut probs = vec![0.0; len * v];
    let mut total = 0.0;
    for (seq, p) in &oracle.table {
        let consistent = x_t
            .tokens()
            .iter()
            .zip(seq)
            .all(|(&z, &x)| z == mask || z == x);
        if !consistent || *p == 0.0 {
            continue;
        }
        total += p;
        for (i, &x) in seq.iter().enumerate() {
            probs[i * v + x] += p;
        }
    }
    if total == 0.0 {
        return Err(Error::numeric("oracle posterior", "latent has zero probability under the source"));
    }
    probs.iter_mut().for_each(|p| *p /= total);
    CleanStateEstimate::from_probs(len, v, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{IndependentSource, MarkovSource};
    use crate::diffusion::Vocab;
    use approx::assert_relative_eq;

    /// Ignores everything and predicts a fixed distribution; counts nothing.
    struct Fixed(Vocab, Vec<f64>);

    impl Denoiser for Fixed {
        fn vocab(&self) -> Vocab {
            self.0
        }
        fn denoise(&self, x: &LatentSeq, _: usize, _: &CleanStateEstimate) -> Result<CleanStateEstimate> {
            let rows = (0..x.len()).flat_map(|_| self.1.clone()).collect();
            CleanStateEstimate::from_probs(x.len(), self.0.size(), rows)
        }
    }

    #[test]
    fn call_count_equals_steps() {
        let m = Fixed(Vocab::new(3).unwrap(), vec![0.2, 0.3, 0.5]);
        for steps in [1, 5, 12] {
            let s = NoiseSchedule::linear(steps).unwrap();
            for sc in [false, true] {
                let (_, trace) = sample(&m, &s, 6, &mut rng::stream(1, 0), sc).unwrap();
                assert_eq!(trace.calls, steps);
                assert_eq!(trace.steps.len(), steps);
            }
        }
    }

    #[test]
    fn single_step_unmasks_everything() {
        let m = Fixed(Vocab::new(2).unwrap(), vec![0.5, 0.5]);
        let s = NoiseSchedule::linear(1).unwrap();
        let (seq, trace) = sample(&m, &s, 5, &mut rng::stream(3, 0), true).unwrap();
        assert_eq!(seq.len(), 5);
        assert_eq!(trace.steps[0].unmasked, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn unmasked_sets_partition_positions() {
        let m = Fixed(Vocab::new(4).unwrap(), vec![0.25; 4]);
        let s = NoiseSchedule::linear(8).unwrap();
        for seed in 0..20 {
            let (_, trace) = sample(&m, &s, 10, &mut rng::stream(seed, 0), true).unwrap();
            let mut all: Vec<usize> = trace.steps.iter().flat_map(|s| s.unmasked.clone()).collect();
            all.sort();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn batch_sample_matches_single_stream() {
        let m = Fixed(Vocab::new(3).unwrap(), vec![0.1, 0.6, 0.3]);
        let s = NoiseSchedule::linear(4).unwrap();
        let batch = batch_sample(&m, &s, 5, 3, 42, false).unwrap();
        let (seq, trace) = sample(&m, &s, 5, &mut rng::stream(42, 2), false).unwrap();
        assert_eq!(batch[2].0, seq);
        assert_eq!(batch[2].1.steps, trace.steps);
        assert_eq!(batch[2].1.origin, Some((42, 2)));
    }

    #[test]
    fn oracle_point_masses_and_symmetry() {
        let src = IndependentSource::uniform(3).unwrap();
        let o = OracleDenoiser::new(&src, 3).unwrap();
        let v = src.vocab();
        let clean = LatentSeq::new(vec![2, 0, 1], 1, v).unwrap();
        let est = oracle_denoise(&o, &clean).unwrap();
        assert_eq!(est.row(0).unwrap(), &[0.0, 0.0, 1.0]);
        let masked = LatentSeq::fully_masked(3, 2, v);
        let est = oracle_denoise(&o, &masked).unwrap();
        for i in 0..3 {
            for p in est.row(i).unwrap() {
                assert_relative_eq!(*p, 1.0 / 3.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn oracle_markov_middle_position() {
        let chain = MarkovSource::new(
            1,
            vec![vec![0.7, 0.2, 0.1], vec![0.3, 0.3, 0.4], vec![0.25, 0.25, 0.5]],
        )
        .unwrap();
        let o = OracleDenoiser::new(&chain, 3).unwrap();
        let v = chain.vocab();
        let x = LatentSeq::new(vec![0, 3, 2], 1, v).unwrap();
        let est = oracle_denoise(&o, &x).unwrap();
        // p(m | 0 _ 2) ∝ P(0→m)·P(m→2); the initial term cancels.
        let t = [[0.7, 0.2, 0.1], [0.3, 0.3, 0.4], [0.25, 0.25, 0.5]];
        let w: Vec<f64> = (0..3).map(|m| t[0][m] * t[m][2]).collect();
        let z: f64 = w.iter().sum();
        for m in 0..3 {
            assert_relative_eq!(est.row(1).unwrap()[m], w[m] / z, epsilon = 1e-12);
        }
    }

    #[test]
    fn oracle_cap_is_enforced() {
        let src = IndependentSource::uniform(3).unwrap();
        assert!(OracleDenoiser::new(&src, 4).is_ok());
        assert!(matches!(OracleDenoiser::new(&src, 5), Err(Error::Usage(_))));
    }
}
