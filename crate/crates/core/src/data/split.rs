use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::example::LabeledExample;
use crate::error::{invalid, Result};
use edos_numcore::rng;

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.70, 0.10, 0.20);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

/// Sizes for `n` items: dev and test take the floor of their share, train
/// takes everything left over.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (tr, dv, te) = ratios;
    if !(tr > 0.0 && dv > 0.0 && te > 0.0) || ((tr + dv + te) - 1.0).abs() > 1e-9 {
        return invalid(format!(
            "split ratios must be positive and sum to 1, got ({tr}, {dv}, {te})"
        ));
    }
    // The small epsilon keeps products such as 20000 * 0.1 from flooring to 1999.
    let dev = ((n as f64) * dv + 1e-9).floor() as usize;
    let test = ((n as f64) * te + 1e-9).floor() as usize;
    Ok((n - dev - test, dev, test))
}

/// Shuffles under `seed`, then cuts train | dev | test.
pub fn split_dataset(
    examples: &[LabeledExample],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (n_train, n_dev, _) = split_sizes(examples.len(), ratios)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng::stream(seed, rng::stream_id("split")));
    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect();
    Ok(DatasetSplit {
        train: pick(&order[..n_train]),
        dev: pick(&order[n_train..n_train + n_dev]),
        test: pick(&order[n_train + n_dev..]),
    })
}
