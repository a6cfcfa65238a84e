use rand::{Rng, RngCore};

use super::SequenceSource;
use crate::diffusion::{sample_categorical, TokenSeq, Vocab};
use crate::error::{Error, Result};

const ROW_TOLERANCE: f64 = 1e-12;
const STATIONARY_TOLERANCE: f64 = 1e-12;
const MAX_POWER_ITERS: usize = 1_000_000;

/// Order-`k` Markov chain over `V` tokens, started from its stationary
/// distribution over `k`-token contexts.
#[derive(Clone, Debug)]
pub struct MarkovSource {
    order: usize,
    vocab: Vocab,
    /// `V^order` rows of `V` probabilities; row index is the base-`V` context.
    transitions: Vec<Vec<f64>>,
    /// Distribution of the first `order` tokens, as a context index.
    initial: Vec<f64>,
    stationary: Vec<f64>,
    entropy_rate: f64,
}

pub(crate) fn check_row(row: &[f64], what: &str) -> Result<()> {
    let total: f64 = row.iter().sum();
    if row.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::Config(format!(
            "{what}: row is not a probability vector (sum {total})"
        )));
    }
    Ok(())
}

impl MarkovSource {
    pub const DEFAULT_NAME: &'static str = "markov-default";

    /// Fixed order-1 chain over 4 tokens used by the desk-scale experiments.
    pub const DESK_TRANSITIONS: [[f64; 4]; 4] = [
        [0.70, 0.15, 0.10, 0.05],
        [0.10, 0.10, 0.70, 0.10],
        [0.05, 0.60, 0.05, 0.30],
        [0.40, 0.05, 0.05, 0.50],
    ];

    pub fn desk_default() -> Self {
        let rows = Self::DESK_TRANSITIONS.iter().map(|r| r.to_vec()).collect();
        Self::new(1, rows).expect("desk chain is irreducible")
    }

    /// Builds an irreducible chain; the start distribution is stationary.
    pub fn new(order: usize, transitions: Vec<Vec<f64>>) -> Result<Self> {
        let (vocab, contexts) = Self::validate(order, &transitions)?;
        if !is_irreducible(order, vocab.size(), &transitions) {
            return Err(Error::Config("Markov chain is not irreducible".into()));
        }
        let mut uniform = vec![1.0 / contexts as f64; contexts];
        let stationary = power_iterate(order, vocab.size(), &transitions, &mut uniform)?;
        Ok(Self::assemble(order, vocab, transitions, stationary.clone(), stationary))
    }

    /// Chain started from a fixed context; irreducibility is not required.
    /// The entropy rate is taken under the limiting distribution reached from
    /// that start.
    pub fn with_start(order: usize, transitions: Vec<Vec<f64>>, start: &[usize]) -> Result<Self> {
        let (vocab, contexts) = Self::validate(order, &transitions)?;
        if start.len() != order || start.iter().any(|&s| s >= vocab.size()) {
            return Err(Error::Config("start context must be `order` clean tokens".into()));
        }
        let idx = start.iter().fold(0, |acc, &s| acc * vocab.size() + s);
        let mut initial = vec![0.0; contexts];
        initial[idx] = 1.0;
        let mut dist = initial.clone();
        let limit = power_iterate(order, vocab.size(), &transitions, &mut dist)?;
        Ok(Self::assemble(order, vocab, transitions, initial, limit))
    }

    fn validate(order: usize, transitions: &[Vec<f64>]) -> Result<(Vocab, usize)> {
        if order == 0 {
            return Err(Error::Config("Markov order must be at least 1".into()));
        }
        let v = transitions.first().map_or(0, Vec::len);
        let vocab = Vocab::new(v)?;
        let contexts = v.pow(order as u32);
        if transitions.len() != contexts {
            return Err(Error::Config(format!(
                "order-{order} chain over {v} tokens needs {contexts} rows, got {}",
                transitions.len()
            )));
        }
        for row in transitions {
            if row.len() != v {
                return Err(Error::Config("ragged transition matrix".into()));
            }
            check_row(row, "transition")?;
        }
        Ok((vocab, contexts))
    }

    fn assemble(
        order: usize,
        vocab: Vocab,
        transitions: Vec<Vec<f64>>,
        initial: Vec<f64>,
        stationary: Vec<f64>,
    ) -> Self {
        let entropy_rate = entropy_rate_of(&stationary, &transitions);
        Self {
            order,
            vocab,
            transitions,
            initial,
            stationary,
            entropy_rate,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn transitions(&self) -> &[Vec<f64>] {
        &self.transitions
    }

    /// Stationary distribution over contexts.
    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// `−Σ_s π(s) Σ_{s'} P(s'|s) ln P(s'|s)` in nats per token.
    pub fn entropy_rate(&self) -> f64 {
        self.entropy_rate
    }

    /// Recomputes the entropy rate from the stored stationary distribution.
    pub fn recompute_entropy_rate(&self) -> f64 {
        entropy_rate_of(&self.stationary, &self.transitions)
    }

    /// Exact probability of every `k`-mer at a stationary position, indexed
    /// base-`V` with the first token most significant.
    pub fn kmer_probs(&self, k: usize) -> Vec<f64> {
        let v = self.vocab.size();
        let cells = v.pow(k as u32);
        (0..cells)
            .map(|code| {
                let kmer: Vec<usize> = (0..k).rev().map(|j| (code / v.pow(j as u32)) % v).collect();
                let head = kmer.len().min(self.order);
                let span = v.pow((self.order - head) as u32);
                let start = self.context_index(&kmer[..head]) * span;
                let mut p: f64 = self.stationary[start..start + span].iter().sum();
                for i in self.order..k {
                    p *= self.transitions[self.context_index(&kmer[i - self.order..i])][kmer[i]];
                }
                p
            })
            .collect()
    }

    fn context_index(&self, tokens: &[usize]) -> usize {
        tokens.iter().fold(0, |acc, &s| acc * self.vocab.size() + s)
    }

    /// Probability that the first `prefix.len() ≤ order` tokens equal `prefix`.
    fn initial_prefix_prob(&self, prefix: &[usize]) -> f64 {
        let v = self.vocab.size();
        let span = v.pow((self.order - prefix.len()) as u32);
        let start = self.context_index(prefix) * span;
        self.initial[start..start + span].iter().sum()
    }
}

impl SequenceSource for MarkovSource {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn conditional_probs(&self, seq: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(seq.len());
        for i in 0..seq.len() {
            if i < self.order {
                let joint = self.initial_prefix_prob(&seq[..=i]);
                let prev = self.initial_prefix_prob(&seq[..i]);
                out.push(if prev > 0.0 { joint / prev } else { 0.0 });
            } else {
                let ctx = self.context_index(&seq[i - self.order..i]);
                out.push(self.transitions[ctx][seq[i]]);
            }
        }
        out
    }

    fn sample_one(&self, len: usize, rng: &mut dyn RngCore) -> TokenSeq {
        let v = self.vocab.size();
        let ctx = sample_categorical(&self.initial, rng.gen::<f64>());
        let mut tokens: Vec<usize> = (0..self.order)
            .rev()
            .map(|k| (ctx / v.pow(k as u32)) % v)
            .collect();
        tokens.truncate(len);
        while tokens.len() < len {
            let c = self.context_index(&tokens[tokens.len() - self.order..]);
            tokens.push(sample_categorical(&self.transitions[c], rng.gen::<f64>()));
        }
        TokenSeq::new(tokens, self.vocab).expect("chain emits clean tokens")
    }

    fn descriptor(&self) -> String {
        format!("markov-order{}", self.order)
    }
}

fn successors(order: usize, v: usize, ctx: usize) -> impl Iterator<Item = (usize, usize)> {
    let keep = v.pow(order as u32 - 1);
    (0..v).map(move |next| (next, (ctx % keep) * v + next))
}

fn is_irreducible(order: usize, v: usize, transitions: &[Vec<f64>]) -> bool {
    let n = transitions.len();
    let reach = |from: usize, forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![from];
        seen[from] = true;
        while let Some(c) = stack.pop() {
            for d in 0..n {
                let edge = if forward {
                    edge_prob(order, v, transitions, c, d)
                } else {
                    edge_prob(order, v, transitions, d, c)
                };
                if edge > 0.0 && !seen[d] {
                    seen[d] = true;
                    stack.push(d);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(0, true) && reach(0, false)
}

fn edge_prob(order: usize, v: usize, transitions: &[Vec<f64>], from: usize, to: usize) -> f64 {
    successors(order, v, from)
        .find(|&(_, next_ctx)| next_ctx == to)
        .map_or(0.0, |(next, _)| transitions[from][next])
}

/// Iterates the lazy chain `(I + P)/2`, which shares `P`'s stationary
/// distribution and converges even when `P` is periodic.
fn power_iterate(order: usize, v: usize, transitions: &[Vec<f64>], dist: &mut Vec<f64>) -> Result<Vec<f64>> {
    let n = transitions.len();
    for _ in 0..MAX_POWER_ITERS {
        let mut next: Vec<f64> = dist.iter().map(|p| 0.5 * p).collect();
        for (c, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (tok, nc) in successors(order, v, c) {
                next[nc] += 0.5 * p * transitions[c][tok];
            }
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|p| *p /= total);
        let delta: f64 = next.iter().zip(dist.iter()).map(|(a, b)| (a - b).abs()).sum();
        *dist = next;
        if delta < STATIONARY_TOLERANCE {
            return Ok(dist.clone());
        }
    }
    Err(Error::numeric(
        "stationary distribution",
        format!("power iteration did not converge over {n} states"),
    ))
}

fn entropy_rate_of(stationary: &[f64], transitions: &[Vec<f64>]) -> f64 {
    stationary
        .iter()
        .zip(transitions)
        .map(|(pi, row)| {
            pi * row
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum::<f64>()
        })
        .sum()
}
