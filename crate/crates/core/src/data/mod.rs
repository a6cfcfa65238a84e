//! Synthetic sources with exactly computable statistics, plus the dataset file.

mod bracket;
mod dataset;
mod markov;

pub use bracket::{bracket_check, BracketSource};
pub use dataset::{read_dataset, write_dataset, Dataset, DatasetHeader};
pub use markov::MarkovSource;

use rand::Rng;

use crate::diffusion::{TokenSeq, Vocab};
use crate::error::Result;

/// A distribution over fixed-length clean sequences whose likelihood is exact.
pub trait SequenceSource: Sync {
    fn vocab(&self) -> Vocab;

    /// `p(x_i | x_<i)` for every position.
    fn conditional_probs(&self, seq: &[usize]) -> Vec<f64>;

    fn sequence_prob(&self, seq: &[usize]) -> f64 {
        self.conditional_probs(seq).iter().product()
    }

    fn sample_one(&self, len: usize, rng: &mut dyn rand::RngCore) -> TokenSeq;

    /// Short name written into dataset headers.
    fn descriptor(&self) -> String;

    fn generate(&self, n: usize, len: usize, rng: &mut dyn rand::RngCore) -> Vec<TokenSeq> {
        (0..n).map(|_| self.sample_one(len, rng)).collect()
    }
}

/// Every position drawn independently from one categorical.
#[derive(Clone, Debug)]
pub struct IndependentSource {
    vocab: Vocab,
    probs: Vec<f64>,
}

impl IndependentSource {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let vocab = Vocab::new(probs.len())?;
        markov::check_row(&probs, "independent source")?;
        Ok(Self { vocab, probs })
    }

    pub fn uniform(size: usize) -> Result<Self> {
        Self::new(vec![1.0 / size as f64; size])
    }
}

impl SequenceSource for IndependentSource {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn conditional_probs(&self, seq: &[usize]) -> Vec<f64> {
        seq.iter().map(|&tok| self.probs[tok]).collect()
    }

    fn sample_one(&self, len: usize, rng: &mut dyn rand::RngCore) -> TokenSeq {
        let tokens = (0..len)
            .map(|_| crate::diffusion::sample_categorical(&self.probs, rng.gen::<f64>()))
            .collect();
        TokenSeq::new(tokens, self.vocab).expect("categorical draws are clean")
    }

    fn descriptor(&self) -> String {
        "independent".into()
    }
}

/// The default sources, addressable by the name stored in dataset headers.
pub fn source_by_name(name: &str) -> Option<Box<dyn SequenceSource>> {
    match name {
        MarkovSource::DEFAULT_NAME => Some(Box::new(MarkovSource::desk_default())),
        BracketSource::DEFAULT_NAME => Some(Box::new(BracketSource::desk_default())),
        _ => None,
    }
}
