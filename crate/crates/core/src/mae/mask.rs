use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Partition of `P` patch positions into kept and masked sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub num_patches: usize,
    pub kept: Vec<usize>,
    pub masked: Vec<usize>,
}

/// Number of masked patches for `P` patches at `ratio`.
pub fn masked_count(num_patches: usize, ratio: f64) -> usize {
    (ratio * num_patches as f64).round() as usize
}

impl MaskPlan {
    /// Masks a uniformly random subset of `round(ratio * P)` patches.
    pub fn sample(num_patches: usize, ratio: f64, rng: &mut RngStream) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
        }
        let n_mask = masked_count(num_patches, ratio);
        if n_mask == 0 || n_mask >= num_patches {
            return Err(Error::Config(format!(
                "mask ratio {ratio} masks {n_mask} of {num_patches} patches"
            )));
        }
        let mut masked = rng.choose_distinct(num_patches, n_mask);
        masked.sort_unstable();
        let mut is_masked = vec![false; num_patches];
        for &i in &masked {
            is_masked[i] = true;
        }
        let kept = (0..num_patches).filter(|&i| !is_masked[i]).collect();
        Ok(Self {
            num_patches,
            kept,
            masked,
        })
    }

    /// Plan with nothing masked. Not a valid pretraining plan; used to probe
    /// reconstruction capacity.
    pub fn keep_all(num_patches: usize) -> Self {
        Self {
            num_patches,
            kept: (0..num_patches).collect(),
            masked: Vec::new(),
        }
    }

    /// For each original position, its index in `kept ++ masked`.
    pub fn restore_order(&self) -> Vec<usize> {
        let mut restore = vec![0; self.num_patches];
        for (slot, &pos) in self.kept.iter().chain(&self.masked).enumerate() {
            restore[pos] = slot;
        }
        restore
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.masked.binary_search(&pos).is_ok()
    }
}
