use rand::{Rng, RngCore};

use super::SequenceSource;
use crate::diffusion::{TokenSeq, Vocab};
use crate::error::{Error, Result};

/// Balanced sequences over `P` bracket pairs. Token `2p` opens pair `p` and
/// `2p + 1` closes it.
///
/// Generation walks left to right: when both moves are legal it opens or
/// closes with equal probability, and an opened bracket's type is uniform.
/// Opening is legal while depth stays within `max_depth` and the remaining
/// positions can still close everything.
#[derive(Clone, Debug)]
pub struct BracketSource {
    pairs: usize,
    max_depth: usize,
}

impl BracketSource {
    pub const DEFAULT_NAME: &'static str = "bracket-default";

    pub fn new(pairs: usize, max_depth: usize) -> Result<Self> {
        if pairs == 0 || max_depth == 0 {
            return Err(Error::Config("bracket source needs pairs ≥ 1 and depth ≥ 1".into()));
        }
        Ok(Self { pairs, max_depth })
    }

    pub fn desk_default() -> Self {
        Self::new(2, 4).expect("valid defaults")
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    fn can_open(&self, depth: usize, remaining: usize) -> bool {
        depth < self.max_depth && depth + 1 < remaining
    }
}

/// Stack automaton: every closer matches the innermost open bracket and the
/// stack ends empty.
pub fn bracket_check(tokens: &[usize], pairs: usize) -> bool {
    let mut stack = Vec::new();
    for &tok in tokens {
        if tok >= 2 * pairs {
            return false;
        }
        if tok % 2 == 0 {
            stack.push(tok / 2);
        } else if stack.pop() != Some(tok / 2) {
            return false;
        }
    }
    stack.is_empty()
}

impl SequenceSource for BracketSource {
    fn vocab(&self) -> Vocab {
        Vocab::new(2 * self.pairs).expect("pairs ≥ 1")
    }

    fn conditional_probs(&self, seq: &[usize]) -> Vec<f64> {
        let len = seq.len();
        let mut stack: Vec<usize> = Vec::new();
        let mut out = Vec::with_capacity(len);
        for (i, &tok) in seq.iter().enumerate() {
            let remaining = len - i;
            let depth = stack.len();
            let open_ok = self.can_open(depth, remaining);
            let close_ok = depth > 0;
            let p_open = match (open_ok, close_ok) {
                (true, true) => 0.5,
                (true, false) => 1.0,
                _ => 0.0,
            };
            if tok >= 2 * self.pairs {
                out.push(0.0);
                continue;
            }
            if tok % 2 == 0 {
                out.push(p_open / self.pairs as f64);
                stack.push(tok / 2);
            } else {
                let matches = stack.last() == Some(&(tok / 2));
                out.push(if matches { 1.0 - p_open } else { 0.0 });
                stack.pop();
            }
        }
        out
    }

    fn sample_one(&self, len: usize, rng: &mut dyn RngCore) -> TokenSeq {
        assert!(len.is_multiple_of(2), "bracket sequences need even length");
        let mut stack: Vec<usize> = Vec::new();
        let mut tokens = Vec::with_capacity(len);
        for i in 0..len {
            let remaining = len - i;
            let open_ok = self.can_open(stack.len(), remaining);
            let close_ok = !stack.is_empty();
            let open = match (open_ok, close_ok) {
                (true, true) => rng.gen::<f64>() < 0.5,
                (true, false) => true,
                _ => false,
            };
            if open {
                let kind = rng.gen_range(0..self.pairs);
                stack.push(kind);
                tokens.push(2 * kind);
            } else {
                let kind = stack.pop().expect("close only with a non-empty stack");
                tokens.push(2 * kind + 1);
            }
        }
        TokenSeq::new(tokens, self.vocab()).expect("bracket tokens are clean")
    }

    fn descriptor(&self) -> String {
        format!("bracket-p{}-d{}", self.pairs, self.max_depth)
    }
}
