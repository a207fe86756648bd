use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::schema::SparseInstance;
use super::IngestError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), IngestError> {
        let r = [self.train, self.validation, self.test];
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) || ((r[0] + r[1] + r[2]) - 1.0).abs() > 1e-9 {
            return Err(IngestError::BadRatios(r));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<SparseInstance>,
    pub validation: Vec<SparseInstance>,
    pub test: Vec<SparseInstance>,
    pub batch_size: usize,
    pub seed: u64,
}

/// Shuffles once with `seed`, then cuts into train/validation/test by rounding
/// `n · ratio`, the test split taking the remainder.
pub fn split_and_batch(
    data: &[SparseInstance],
    ratios: SplitRatios,
    batch_size: usize,
    seed: u64,
) -> Result<DatasetSplit, IngestError> {
    ratios.validate()?;
    if batch_size == 0 {
        return Err(IngestError::ZeroBatch);
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * ratios.train).round() as usize;
    let n_val = (((n as f64) * ratios.validation).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let n_test = n - n_train - n_val;
    for (name, ratio, count) in [
        ("train", ratios.train, n_train),
        ("validation", ratios.validation, n_val),
        ("test", ratios.test, n_test),
    ] {
        if ratio > 0.0 && count == 0 {
            return Err(IngestError::EmptySplit(name));
        }
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    Ok(DatasetSplit {
        train: pick(&order[..n_train]),
        validation: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
        batch_size,
        seed,
    })
}

/// Index batches over the training split for one epoch. The order depends
/// only on the split seed and the epoch number; the last batch may be short.
#[derive(Debug, Clone)]
pub struct Batches {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(out)
    }
}

impl DatasetSplit {
    pub fn train_batches(&self, epoch: u64) -> Batches {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let stream = self.seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch.wrapping_add(1));
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream));
        Batches {
            order,
            batch_size: self.batch_size,
            pos: 0,
        }
    }

    pub fn num_batches(&self) -> usize {
        self.train.len().div_ceil(self.batch_size)
    }
}
