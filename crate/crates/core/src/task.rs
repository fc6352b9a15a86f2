//! Seeded synthetic datasets. A batch depends only on the dataset seed, the
//! step number and the batch size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Input, Target};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `t = sin(a . x)` for a fixed teacher vector `a`, `x ~ U[-1, 1]^d`.
    Regression,
    /// Predict each input token at its own position.
    SequenceCopy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// Regression only.
    #[serde(default = "one")]
    pub input_dim: usize,
    /// Sequence copy only.
    #[serde(default = "one")]
    pub seq_len: usize,
    /// Sequence copy only.
    #[serde(default)]
    pub vocab: usize,
    pub dataset_seed: u64,
}

fn one() -> usize {
    1
}

impl SyntheticTask {
    pub fn regression(input_dim: usize, dataset_seed: u64) -> Self {
        SyntheticTask {
            kind: TaskKind::Regression,
            input_dim,
            seq_len: 1,
            vocab: 0,
            dataset_seed,
        }
    }

    pub fn sequence_copy(seq_len: usize, vocab: usize, dataset_seed: u64) -> Self {
        SyntheticTask {
            kind: TaskKind::SequenceCopy,
            input_dim: 1,
            seq_len,
            vocab,
            dataset_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            TaskKind::Regression => self.input_dim >= 1,
            TaskKind::SequenceCopy => self.seq_len >= 1 && self.vocab >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid task extents: {self:?}")))
        }
    }

    /// Teacher weights for the regression target, fixed by the dataset seed.
    fn teacher(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.dataset_seed);
        rng.set_stream(u64::MAX);
        (0..self.input_dim)
            .map(|_| rng.gen_range(-1.5..=1.5))
            .collect()
    }

    pub fn sample_batch(&self, batch: usize, step: u64) -> Result<Batch> {
        if batch == 0 {
            return Err(Error::InvalidConfig("batch must be >= 1".into()));
        }
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.dataset_seed);
        rng.set_stream(step);
        match self.kind {
            TaskKind::Regression => {
                let d = self.input_dim;
                let teacher = self.teacher();
                let xs: Vec<f64> = (0..batch * d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let ts = xs
                    .chunks(d)
                    .map(|row| {
                        let dot = row.iter().zip(&teacher).fold(0.0, |a, (x, w)| a + x * w);
                        dot.sin()
                    })
                    .collect();
                Ok(Batch {
                    input: Input::Dense(Tensor::new(vec![batch, d], xs, Precision::Full)?),
                    target: Target::Dense(Tensor::new(vec![batch, 1], ts, Precision::Full)?),
                })
            }
            TaskKind::SequenceCopy => {
                let ids: Vec<usize> = (0..batch * self.seq_len)
                    .map(|_| rng.gen_range(0..self.vocab))
                    .collect();
                Ok(Batch {
                    input: Input::Tokens {
                        ids: ids.clone(),
                        batch,
                        seq: self.seq_len,
                    },
                    target: Target::Tokens(ids),
                })
            }
        }
    }
}
