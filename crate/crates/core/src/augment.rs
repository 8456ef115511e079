//! Dual-crop sampling and Bernoulli timestamp masking.
//!
//! Each training window yields two overlapping crops; the student's crop is
//! masked in raw space before projection while the teacher's crop is masked
//! later in latent space (see the model module). All pretraining losses are
//! computed on the overlap segment only.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{for_each_lane, Tensor};

/// Two overlapping crop index ranges into a source window.
///
/// Crop one is [a1, b1), crop two is [a2, b2), and the invariant
/// a1 <= a2 < b1 <= b2 makes the overlap [a2, b1) non-empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropPair {
    pub a1: usize,
    pub b1: usize,
    pub a2: usize,
    pub b2: usize,
}

impl CropPair {
    pub fn new(a1: usize, b1: usize, a2: usize, b2: usize) -> Result<Self> {
        if !(a1 <= a2 && a2 < b1 && b1 <= b2) {
            return Err(Error::Param(format!(
                "crop indices must satisfy a1 <= a2 < b1 <= b2, got ({a1}, {b1}, {a2}, {b2})"
            )));
        }
        Ok(CropPair { a1, b1, a2, b2 })
    }

    /// Length of the overlap segment [a2, b1).
    pub fn overlap_len(&self) -> usize {
        self.b1 - self.a2
    }

    /// Overlap segment in the coordinates of crop one.
    pub fn overlap_in_first(&self) -> (usize, usize) {
        (self.a2 - self.a1, self.b1 - self.a1)
    }

    /// Overlap segment in the coordinates of crop two.
    pub fn overlap_in_second(&self) -> (usize, usize) {
        (0, self.b1 - self.a2)
    }

    pub fn fits(&self, window_len: usize) -> bool {
        self.b2 <= window_len
    }
}

/// Draw a crop pair by direct construction, no rejection loop:
/// a2 and b1 first (a2 < b1), then a1 <= a2 and b2 >= b1, each uniform
/// over its valid range.
pub fn sample_crop_pair(window_len: usize, rng: &mut ChaCha8Rng) -> Result<CropPair> {
    sample_crop_pair_min_overlap(window_len, 1, rng)
}

/// Crop pair whose overlap is at least `min_overlap` steps. The training
/// loop uses 2 because the temporal distillation softmax is degenerate on a
/// single shared timestamp.
pub fn sample_crop_pair_min_overlap(
    window_len: usize,
    min_overlap: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CropPair> {
    if min_overlap < 1 {
        return Err(Error::Param("minimum overlap must be >= 1".into()));
    }
    if window_len < 2 || window_len < min_overlap {
        return Err(Error::Sizing(format!(
            "crop sampling needs a window of at least max(2, {min_overlap}) steps, got {window_len}"
        )));
    }
    let a2 = rng.random_range(0..=window_len - min_overlap);
    let b1 = rng.random_range(a2 + min_overlap..=window_len);
    let a1 = rng.random_range(0..=a2);
    let b2 = rng.random_range(b1..=window_len);
    CropPair::new(a1, b1, a2, b2)
}

/// Keep-probability and the realized per-timestamp keep/drop draws.
#[derive(Clone, Debug)]
pub struct MaskPlan {
    keep_prob: f64,
    mask: Vec<f64>,
}

impl MaskPlan {
    /// Sample a fresh mask: each timestamp kept independently with
    /// probability `keep_prob` in (0, 1].
    pub fn sample(keep_prob: f64, len: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::Param(format!(
                "keep probability must lie in (0, 1], got {keep_prob}"
            )));
        }
        let mask = (0..len)
            .map(|_| {
                let u: f64 = rng.random_range(0.0..1.0);
                if u < keep_prob {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Ok(MaskPlan { keep_prob, mask })
    }

    /// Wrap an explicit 0/1 mask (test fixtures, replay).
    pub fn from_mask(keep_prob: f64, mask: Vec<f64>) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::Param(format!(
                "keep probability must lie in (0, 1], got {keep_prob}"
            )));
        }
        if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Param("mask entries must be 0 or 1".into()));
        }
        Ok(MaskPlan { keep_prob, mask })
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Zero or keep whole timestamps: the same per-timestamp decision applies to
/// every channel at that position. The mask indexes `time_axis` and
/// broadcasts over all other axes.
pub fn bernoulli_mask(x: &Tensor, plan: &MaskPlan, time_axis: usize) -> Result<Tensor> {
    if time_axis >= x.rank() {
        return Err(Error::Dim(format!(
            "time axis {time_axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    if x.shape()[time_axis] != plan.len() {
        return Err(Error::Dim(format!(
            "mask covers {} timestamps, axis has {}",
            plan.len(),
            x.shape()[time_axis]
        )));
    }
    let mut out = x.clone();
    let n = plan.len();
    for_each_lane(x.shape(), time_axis, |start, stride| {
        for t in 0..n {
            out.data_mut()[start + t * stride] *= plan.mask[t];
        }
    });
    Ok(out)
}

/// Build the two branch inputs for one window [L, C]:
/// the teacher's raw crop (unmasked here; its mask is applied in latent
/// space after projection) and the student's crop masked in raw space.
/// Mask draws are independent per branch.
pub fn augment_for_branches(
    window: &Tensor,
    crop: &CropPair,
    keep_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    if window.rank() != 2 {
        return Err(Error::Dim(format!(
            "window must be [L, C], got {:?}",
            window.shape()
        )));
    }
    if !crop.fits(window.shape()[0]) {
        return Err(Error::Dim(format!(
            "crop {:?} does not fit window of length {}",
            crop,
            window.shape()[0]
        )));
    }
    let teacher_raw = slice_rows(window, crop.a1, crop.b1);
    let student_raw = slice_rows(window, crop.a2, crop.b2);
    let plan = MaskPlan::sample(keep_prob, student_raw.shape()[0], rng)?;
    let student_masked = bernoulli_mask(&student_raw, &plan, 0)?;
    Ok((teacher_raw, student_masked))
}

/// Copy rows [from, to) of a rank-2 tensor.
pub fn slice_rows(x: &Tensor, from: usize, to: usize) -> Tensor {
    let c = x.shape()[1];
    Tensor::new(
        vec![to - from, c],
        x.data()[from * c..to * c].to_vec(),
    )
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_only_emits_valid_pairs_for_tiny_windows() {
        // enumerate every tuple satisfying a1 <= a2 < b1 <= b2 <= 2
        let mut valid = Vec::new();
        let w = 2usize;
        for a1 in 0..w {
            for a2 in a1..w {
                for b1 in (a2 + 1)..=w {
                    for b2 in b1..=w {
                        valid.push(CropPair { a1, b1, a2, b2 });
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            let pair = sample_crop_pair(w, &mut rng).unwrap();
            assert!(valid.contains(&pair), "{pair:?} outside the valid set");
            seen.insert((pair.a1, pair.b1, pair.a2, pair.b2));
        }
        // the sampler should also reach every configuration eventually
        assert_eq!(seen.len(), valid.len());
    }

    #[test]
    fn overlap_always_non_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10_000 {
            let w = rng.random_range(2..64);
            let pair = sample_crop_pair(w, &mut rng).unwrap();
            assert!(pair.a1 <= pair.a2 && pair.a2 < pair.b1 && pair.b1 <= pair.b2);
            assert!(pair.b2 <= w);
            assert!(pair.overlap_len() >= 1 && pair.overlap_len() <= w);
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..32).map(|_| sample_crop_pair(16, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn window_too_short_is_sizing_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_crop_pair(1, &mut rng), Err(Error::Sizing(_))));
    }

    #[test]
    fn keep_prob_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(vec![5, 2], (0..10).map(|v| v as f64).collect()).unwrap();
        let plan = MaskPlan::sample(1.0, 5, &mut rng).unwrap();
        assert_eq!(bernoulli_mask(&x, &plan, 0).unwrap(), x);
    }

    #[test]
    fn all_zero_mask_annihilates() {
        let x = Tensor::filled(&[4, 3], 2.5);
        let plan = MaskPlan::from_mask(0.5, vec![0.0; 4]).unwrap();
        let y = bernoulli_mask(&x, &plan, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn keep_fraction_obeys_law_of_large_numbers() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let plan = MaskPlan::sample(0.5, 100_000, &mut rng).unwrap();
        let kept: f64 = plan.mask().iter().sum::<f64>() / 100_000.0;
        assert!((kept - 0.5).abs() < 0.01, "kept fraction {kept}");
    }

    #[test]
    fn out_of_range_keep_prob_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MaskPlan::sample(0.0, 4, &mut rng).is_err());
        assert!(MaskPlan::sample(1.2, 4, &mut rng).is_err());
        assert!(MaskPlan::sample(-0.1, 4, &mut rng).is_err());
    }

    #[test]
    fn masking_commutes_with_channel_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = 16;
        let c = 3;
        let x = Tensor::new(
            vec![l, c],
            (0..l * c).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let plan = MaskPlan::sample(0.5, l, &mut rng).unwrap();
        // permute channels (rotate left by 1)
        let permute = |t: &Tensor| {
            let mut data = vec![0.0; l * c];
            for ti in 0..l {
                for ch in 0..c {
                    data[ti * c + ch] = t.data()[ti * c + (ch + 1) % c];
                }
            }
            Tensor::new(vec![l, c], data).unwrap()
        };
        let mask_then_permute = permute(&bernoulli_mask(&x, &plan, 0).unwrap());
        let permute_then_mask = bernoulli_mask(&permute(&x), &plan, 0).unwrap();
        assert_eq!(mask_then_permute, permute_then_mask);
    }

    #[test]
    fn masked_mean_converges_to_keep_prob_times_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let keep = 0.7;
        let x = 1.8;
        let n = 40_000;
        let tensor = Tensor::filled(&[1, 1], x);
        let mut acc = 0.0;
        for _ in 0..n {
            let plan = MaskPlan::sample(keep, 1, &mut rng).unwrap();
            acc += bernoulli_mask(&tensor, &plan, 0).unwrap().data()[0];
        }
        let mean = acc / n as f64;
        let se = x * (keep * (1.0 - keep) / n as f64).sqrt();
        assert!(
            (mean - keep * x).abs() <= 3.0 * se,
            "mean {mean}, expected {} +- {}",
            keep * x,
            3.0 * se
        );
    }

    #[test]
    fn branches_get_expected_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let window = Tensor::new(vec![8, 2], (0..16).map(|v| v as f64).collect()).unwrap();
        let crop = CropPair::new(1, 6, 3, 8).unwrap();

        // with keep_prob 1 both branches are plain slices
        let (teacher, student) = augment_for_branches(&window, &crop, 1.0, &mut rng).unwrap();
        assert_eq!(teacher, slice_rows(&window, 1, 6));
        assert_eq!(student, slice_rows(&window, 3, 8));

        // teacher crop is the raw slice regardless of keep_prob
        let (teacher2, _) = augment_for_branches(&window, &crop, 0.3, &mut rng).unwrap();
        assert_eq!(teacher2, slice_rows(&window, 1, 6));
    }

    #[test]
    fn branch_inputs_deterministic_under_seed() {
        let window = Tensor::new(vec![10, 3], (0..30).map(|v| (v as f64).cos()).collect()).unwrap();
        let crop = CropPair::new(0, 7, 2, 10).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            augment_for_branches(&window, &crop, 0.5, &mut rng).unwrap()
        };
        assert_eq!(run(21), run(21));
    }
}
