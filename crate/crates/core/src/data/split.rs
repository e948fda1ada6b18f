use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultiSourceDataset;
use crate::error::{DmspError, Result};

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.6, 0.2, 0.2];

/// Per-source train / validation / test index sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<Vec<usize>>,
    pub validation: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

/// Random per-source partition. Validation and test each get
/// `round(fraction * n)` samples (at least one when their fraction is
/// positive); training keeps the rest.
pub fn split(dataset: &MultiSourceDataset, fractions: [f64; 3], seed: u64) -> Result<SplitIndices> {
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DmspError::Config(format!(
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let mut out = SplitIndices {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for src in dataset.sources() {
        let n = src.len();
        if n < 3 {
            return Err(DmspError::SplitInfeasible(format!(
                "source {} has {n} samples; at least 3 are required",
                src.source_id()
            )));
        }
        let part = |f: f64| {
            if f > 0.0 {
                ((f * n as f64).round() as usize).max(1)
            } else {
                0
            }
        };
        let n_val = part(fractions[1]);
        let n_test = part(fractions[2]);
        if n_val + n_test >= n {
            return Err(DmspError::SplitInfeasible(format!(
                "source {} has {n} samples, too few for fractions {fractions:?}",
                src.source_id()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(src.source_id() as u64);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut val = perm[..n_val].to_vec();
        let mut test = perm[n_val..n_val + n_test].to_vec();
        let mut train = perm[n_val + n_test..].to_vec();
        val.sort_unstable();
        test.sort_unstable();
        train.sort_unstable();
        out.train.push(train);
        out.validation.push(val);
        out.test.push(test);
    }
    Ok(out)
}
