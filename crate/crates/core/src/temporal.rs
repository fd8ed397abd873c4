//! Windowed identifier statistics: the RATIO and SE features.
//!
//! The stream is cut into consecutive, non-overlapping windows of a fixed
//! number of frames (the filter size). Inside a window each identifier `j`
//! has a share `P_j`; RATIO is that share, and SE is the identifier's
//! contribution to the window's Shannon entropy,
//! `P_j log2 P_j / sum_i P_i log2 P_i`.

use std::collections::HashMap;
use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::CanFrame;

/// Per-frame temporal features, `[SE, RATIO]`.
pub type TemporalFeatures = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdStats {
    pub count: usize,
    pub proportion: f64,
    pub se: f64,
}

/// Statistics of one window, keyed by CAN identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowStats {
    pub len: usize,
    pub ids: HashMap<u32, IdStats>,
}

impl WindowStats {
    pub fn from_ids(ids: &[u32]) -> Self {
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for &id in ids {
            *counts.entry(id).or_default() += 1;
        }
        let total = ids.len() as f64;
        // Sum in a fixed order so results do not depend on hash iteration.
        let mut keys: Vec<u32> = counts.keys().copied().collect();
        keys.sort_unstable();
        let terms: Vec<f64> = keys
            .iter()
            .map(|k| {
                let p = counts[k] as f64 / total;
                p * p.log2()
            })
            .collect();
        let denom: f64 = terms.iter().sum();
        let stats = keys
            .iter()
            .zip(&terms)
            .map(|(&k, &term)| {
                let count = counts[&k];
                // A single-identifier window is 0/0; its lone ID carries all the mass.
                let se = if denom == 0.0 { 1.0 } else { term / denom };
                (
                    k,
                    IdStats {
                        count,
                        proportion: count as f64 / total,
                        se,
                    },
                )
            })
            .collect();
        WindowStats {
            len: ids.len(),
            ids: stats,
        }
    }
}

/// Consecutive tumbling windows of `filter_size` frames; the last may be short.
pub fn window_partition(n_frames: usize, filter_size: usize) -> Result<Vec<Range<usize>>> {
    if filter_size == 0 {
        return Err(Error::config("filter size must be at least 1"));
    }
    Ok((0..n_frames)
        .step_by(filter_size)
        .map(|start| start..(start + filter_size).min(n_frames))
        .collect())
}

/// RATIO of each frame's identifier within `window`.
pub fn compute_ratio(window: &[u32]) -> Vec<f64> {
    let stats = WindowStats::from_ids(window);
    window.iter().map(|id| stats.ids[id].proportion).collect()
}

/// SE of each frame's identifier within `window`.
pub fn compute_se(window: &[u32]) -> Vec<f64> {
    let stats = WindowStats::from_ids(window);
    window.iter().map(|id| stats.ids[id].se).collect()
}

/// `[SE, RATIO]` for every frame of the stream at the given filter size.
pub fn temporal_features(frames: &[CanFrame], filter_size: usize) -> Result<Vec<TemporalFeatures>> {
    let ids: Vec<u32> = frames.iter().map(|f| f.can_id).collect();
    temporal_features_for_ids(&ids, filter_size)
}

pub fn temporal_features_for_ids(ids: &[u32], filter_size: usize) -> Result<Vec<TemporalFeatures>> {
    let windows = window_partition(ids.len(), filter_size)?;
    let per_window: Vec<Vec<TemporalFeatures>> = windows
        .into_par_iter()
        .map(|range| {
            let window = &ids[range];
            let stats = WindowStats::from_ids(window);
            window
                .iter()
                .map(|id| {
                    let s = stats.ids[id];
                    [s.se, s.proportion]
                })
                .collect()
        })
        .collect();
    Ok(per_window.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn partition_sizes() {
        let sizes: Vec<usize> = window_partition(10, 4).unwrap().iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert!(window_partition(10, 1).unwrap().iter().all(|r| r.len() == 1));
        assert_eq!(window_partition(10, 1).unwrap().len(), 10);
        assert_eq!(window_partition(3_672_151, 9332).unwrap().len(), 3_672_151usize.div_ceil(9332));
        assert!(matches!(window_partition(10, 0), Err(Error::Config(_))));
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(compute_ratio(&[1, 1, 2, 1]), vec![0.75, 0.75, 0.25, 0.75]);
        assert_eq!(compute_ratio(&[5, 5, 5]), vec![1.0; 3]);
        assert_eq!(compute_ratio(&[1, 2, 3, 4]), vec![0.25; 4]);
    }

    #[test]
    fn se_examples() {
        assert_eq!(compute_se(&[1, 2]), vec![0.5, 0.5]);
        let se = compute_se(&[1, 1, 2, 3]);
        for v in se {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(compute_se(&[9, 9, 9]), vec![1.0; 3]);
    }

    #[test]
    fn features_follow_windows() {
        let ids = [1, 1, 2, 2, 3, 3, 3];
        let feats = temporal_features_for_ids(&ids, 4).unwrap();
        assert_eq!(feats.len(), 7);
        assert_eq!(feats[0], [0.5, 0.5]);
        assert_eq!(feats[4], [1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn se_sums_to_one(ids in prop::collection::vec(0u32..20, 1..200)) {
            let stats = WindowStats::from_ids(&ids);
            let p: f64 = stats.ids.values().map(|s| s.proportion).sum();
            prop_assert!((p - 1.0).abs() < 1e-9);
            if stats.ids.len() >= 2 {
                let se: f64 = stats.ids.values().map(|s| s.se).sum();
                prop_assert!((se - 1.0).abs() < 1e-9);
            }
            for s in stats.ids.values() {
                prop_assert!((0.0..=1.0).contains(&s.se));
                prop_assert!(s.proportion > 0.0 && s.proportion <= 1.0);
            }
        }

        #[test]
        fn permutation_invariant(mut ids in prop::collection::vec(0u32..8, 1..100), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let before = WindowStats::from_ids(&ids);
            ids.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(before, WindowStats::from_ids(&ids));
        }

        #[test]
        fn flooding_raises_ratio(ids in prop::collection::vec(0u32..8, 1..100), extra in 1usize..20) {
            let target = ids[0];
            let before = WindowStats::from_ids(&ids).ids[&target].proportion;
            let mut flooded = ids.clone();
            flooded.extend(std::iter::repeat_n(target, extra));
            let after = WindowStats::from_ids(&flooded).ids[&target].proportion;
            if before < 1.0 {
                prop_assert!(after > before);
            } else {
                prop_assert_eq!(after, 1.0);
            }
        }
    }
}
