//! Seeded train/val/test partitioning.

use rand::seq::SliceRandom;

use super::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Shuffle ids with a seeded generator, then assign `floor(r_train * n)`
/// to train, `floor(r_val * n)` to val, and the remainder to test. Entries
/// come back in the original id order.
pub fn split_dataset(
    case_ids: &[String],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest> {
    if case_ids.is_empty() {
        return Err(Error::Validation("split_dataset: empty id list".into()));
    }
    let (rt, rv, rs) = ratios;
    if rt < 0.0 || rv < 0.0 || rs < 0.0 || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    {
        let mut seen = std::collections::BTreeSet::new();
        for id in case_ids {
            if !seen.insert(id) {
                return Err(Error::Validation(format!("duplicate case_id '{id}'")));
            }
        }
    }

    let n = case_ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, "split", 0);
    order.shuffle(&mut rng);

    let n_train = (rt * n as f64).floor() as usize;
    let n_val = (rv * n as f64).floor() as usize;

    let mut assigned = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        assigned[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    Ok(DatasetManifest {
        dataset: String::new(),
        seed,
        entries: case_ids
            .iter()
            .cloned()
            .zip(assigned)
            .collect(),
        params: Default::default(),
    })
}
