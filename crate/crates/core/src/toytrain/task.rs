use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target value for positions that do not contribute to the loss.
pub const IGNORE: i32 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// `s_0 .. s_{L-1} SEP s_0 ..`: after the separator the model must
    /// reproduce the prefix. Symbols are `0 .. vocab-2`, `SEP = vocab-1`.
    Copy,
    /// Repeated triples `x y r` with `r = (x + y) mod (vocab - 3)`; only the
    /// prediction of `r` (at the position of `y`) is scored.
    ModularAdd,
}

impl TaskKind {
    pub(crate) fn check_vocab(self, vocab: usize) -> Result<()> {
        let min = match self {
            TaskKind::Copy => 3,
            TaskKind::ModularAdd => 5,
        };
        if vocab < min || vocab > u32::MAX as usize {
            return Err(Error::InvalidConfig(format!(
                "vocab {vocab} too small for {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub seed: u64,
}

/// Next-token inputs and targets, `batch × seq_len` each, sequence-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<u32>,
    pub targets: Vec<i32>,
}

impl Batch {
    pub fn scored(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE).count()
    }
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, vocab: usize, seq_len: usize, seed: u64) -> Result<Self> {
        kind.check_vocab(vocab)?;
        if seq_len < 2 {
            return Err(Error::InvalidConfig(format!("seq_len {seq_len} too short")));
        }
        Ok(SyntheticTask {
            kind,
            vocab,
            seq_len,
            seed,
        })
    }

    pub fn separator(&self) -> u32 {
        (self.vocab - 1) as u32
    }

    pub fn modulus(&self) -> u32 {
        (self.vocab - 3) as u32
    }

    /// One full sequence of `seq_len + 1` tokens and the scored mask over the
    /// first `seq_len` positions.
    fn sequence(&self, rng: &mut impl Rng) -> (Vec<u32>, Vec<bool>) {
        let n = self.seq_len + 1;
        match self.kind {
            TaskKind::Copy => {
                let prefix = self.seq_len / 2;
                let symbols: Vec<u32> = (0..prefix)
                    .map(|_| rng.random_range(0..self.separator()))
                    .collect();
                let mut full = symbols.clone();
                full.push(self.separator());
                full.extend(symbols.iter().cycle().take(n - prefix - 1));
                let mask = (0..self.seq_len).map(|i| i >= prefix).collect();
                (full, mask)
            }
            TaskKind::ModularAdd => {
                let m = self.modulus();
                let mut full = Vec::with_capacity(n + 2);
                while full.len() < n {
                    let x = rng.random_range(0..m);
                    let y = rng.random_range(0..m);
                    full.extend([x, y, (x + y) % m]);
                }
                full.truncate(n);
                let mask = (0..self.seq_len).map(|i| i % 3 == 1).collect();
                (full, mask)
            }
        }
    }

    /// Deterministic in `(seed, step)`.
    pub fn make_batch(&self, batch: usize, step: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        let mut tokens = Vec::with_capacity(batch * self.seq_len);
        let mut targets = Vec::with_capacity(batch * self.seq_len);
        for _ in 0..batch {
            let (full, mask) = self.sequence(&mut rng);
            tokens.extend_from_slice(&full[..self.seq_len]);
            targets.extend(
                full[1..]
                    .iter()
                    .zip(&mask)
                    .map(|(&t, &scored)| if scored { t as i32 } else { IGNORE }),
            );
        }
        Batch {
            batch,
            seq_len: self.seq_len,
            tokens,
            targets,
        }
    }
}
