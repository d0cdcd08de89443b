//! Class-incremental splits: a seeded class permutation cut into stages.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// `B-m Inc-n`: `m` base classes (0 means the first stage is a regular increment), then `n` per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base_classes: usize,
    pub increment: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(base_classes: usize, increment: usize, seed: u64) -> Result<Self> {
        if increment == 0 {
            bail!(Config, "class increment must be at least 1");
        }
        Ok(SplitSpec { base_classes, increment, seed })
    }

    /// Stage count for a corpus of `total` classes.
    pub fn stages(&self, total: usize) -> usize {
        if self.base_classes == 0 {
            total.div_ceil(self.increment)
        } else {
            1 + total.saturating_sub(self.base_classes).div_ceil(self.increment)
        }
    }
}

/// Class ids of every stage, after a seeded permutation of the sorted corpus classes.
pub fn build_task_stream(spec: &SplitSpec, classes: &[u32]) -> Result<Vec<Vec<u32>>> {
    if spec.increment == 0 {
        bail!(Config, "class increment must be at least 1");
    }
    let mut order = classes.to_vec();
    order.sort_unstable();
    order.dedup();
    if order.len() != classes.len() {
        bail!(Input, "duplicate class ids in the corpus");
    }
    if order.len() < spec.increment || order.len() < spec.base_classes {
        bail!(
            Input,
            "corpus has {} classes, split needs at least {}",
            order.len(),
            spec.increment.max(spec.base_classes)
        );
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let first = if spec.base_classes == 0 { spec.increment } else { spec.base_classes };
    let mut stages = Vec::with_capacity(spec.stages(order.len()));
    stages.push(order[..first].to_vec());
    for chunk in order[first..].chunks(spec.increment) {
        stages.push(chunk.to_vec());
    }
    Ok(stages)
}

/// Sample indices whose label belongs to `classes`, in corpus order.
pub fn indices_for(labels: &[u32], classes: &[u32]) -> Vec<usize> {
    labels.iter().enumerate().filter(|(_, l)| classes.contains(l)).map(|(i, _)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: u32) -> Vec<u32> {
        (0..n).collect()
    }

    #[test]
    fn cifar100_b0_inc5() {
        let s = build_task_stream(&SplitSpec::new(0, 5, 1).unwrap(), &ids(100)).unwrap();
        assert_eq!(s.len(), 20);
        assert!(s.iter().all(|st| st.len() == 5));
    }

    #[test]
    fn ten_classes_b0_inc2() {
        let s = build_task_stream(&SplitSpec::new(0, 2, 0).unwrap(), &ids(10)).unwrap();
        assert_eq!(s.len(), 5);
    }

    #[test]
    fn base_stage_then_increments() {
        let spec = SplitSpec::new(50, 10, 3).unwrap();
        let s = build_task_stream(&spec, &ids(100)).unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(s[0].len(), 50);
        assert_eq!(spec.stages(100), 6);
    }

    #[test]
    fn uneven_tail() {
        let s = build_task_stream(&SplitSpec::new(0, 3, 0).unwrap(), &ids(10)).unwrap();
        assert_eq!(s.iter().map(Vec::len).collect::<Vec<_>>(), [3, 3, 3, 1]);
    }

    #[test]
    fn seeds_change_assignment_not_sizes() {
        let a = build_task_stream(&SplitSpec::new(0, 2, 1).unwrap(), &ids(10)).unwrap();
        let b = build_task_stream(&SplitSpec::new(0, 2, 2).unwrap(), &ids(10)).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), b.iter().map(Vec::len).collect::<Vec<_>>());
    }

    #[test]
    fn zero_increment_is_config_error() {
        assert!(matches!(SplitSpec::new(0, 0, 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn too_few_classes() {
        let r = build_task_stream(&SplitSpec::new(0, 5, 0).unwrap(), &ids(3));
        assert!(matches!(r, Err(crate::Error::Input(_))));
    }
}
