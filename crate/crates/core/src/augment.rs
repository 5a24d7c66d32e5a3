//! Data augmentation: AugMix chain mixing plus MixUp/CutMix.
//!
//! Augmentation operates on single samples, either images `[H, W]` or
//! vectors `[D]`. Primitives clamp into the sample's own value range, so a
//! `[0, 1]` image stays a `[0, 1]` image. All randomness comes from an
//! explicit [`SeededRng`] substream.

use crate::error::{CoreError, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Augmentation primitives. `Rotate90` and `CutMix` require image-shaped
/// (square, for rotation) input; everything else also works on vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveOp {
    FlipH,
    Rotate90,
    Translate,
    CropResize,
    Brightness,
    Contrast,
}

/// AugMix policy: which primitives to draw, how many chains, how deep, and
/// the Dirichlet/Beta mixing parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugPolicy {
    pub op_set: Vec<PrimitiveOp>,
    /// Distortion strength, 1..=10. Scales translation distance, crop size,
    /// and brightness/contrast jitter.
    pub severity: u8,
    /// Number of augmentation chains mixed together.
    pub chain_count: usize,
    /// Inclusive chain depth range, within 1..=3.
    pub depth_range: (usize, usize),
    /// Dirichlet concentration for the chain weights.
    pub dirichlet_alpha: f64,
    /// Beta(a, a) parameter for the skip-connection weight.
    pub beta_alpha: f64,
}

impl AugPolicy {
    /// The cited AugMix defaults: 3 chains, depth 1-3, alpha = 1, severity 3.
    pub fn default_image() -> Self {
        AugPolicy {
            op_set: vec![
                PrimitiveOp::FlipH,
                PrimitiveOp::Rotate90,
                PrimitiveOp::Translate,
                PrimitiveOp::CropResize,
                PrimitiveOp::Brightness,
                PrimitiveOp::Contrast,
            ],
            severity: 3,
            chain_count: 3,
            depth_range: (1, 3),
            dirichlet_alpha: 1.0,
            beta_alpha: 1.0,
        }
    }

    /// Same defaults minus the rotation, which has no vector meaning.
    pub fn default_vector() -> Self {
        let mut p = Self::default_image();
        p.op_set.retain(|op| *op != PrimitiveOp::Rotate90);
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.op_set.is_empty() {
            return Err(CoreError::invalid("empty op_set".to_string()));
        }
        if !(1..=10).contains(&self.severity) {
            return Err(CoreError::invalid(format!("severity {} outside 1..=10", self.severity)));
        }
        if self.chain_count < 1 {
            return Err(CoreError::invalid("chain_count must be >= 1".to_string()));
        }
        let (lo, hi) = self.depth_range;
        if !(1 <= lo && lo <= hi && hi <= 3) {
            return Err(CoreError::invalid(format!("depth_range {:?} outside [1, 3]", self.depth_range)));
        }
        if self.dirichlet_alpha <= 0.0
            || self.beta_alpha <= 0.0
            || self.dirichlet_alpha.is_nan()
            || self.beta_alpha.is_nan()
        {
            return Err(CoreError::invalid("dirichlet_alpha and beta_alpha must be positive".to_string()));
        }
        Ok(())
    }
}

fn sample_range(x: &Tensor) -> (f64, f64) {
    (x.min(), x.max())
}

fn clamp_into(x: &mut Tensor, lo: f64, hi: f64) {
    for v in x.values_mut() {
        *v = v.clamp(lo, hi);
    }
}

/// Applies one primitive. Draw order per op is fixed and documented by the
/// implementation; ops undefined for the input shape are rejected.
pub fn apply_primitive(x: &Tensor, op: PrimitiveOp, severity: u8, rng: &mut SeededRng) -> Result<Tensor> {
    let (lo, hi) = sample_range(x);
    let sev = severity as f64;
    let mut out = match (op, x.shape()) {
        (PrimitiveOp::FlipH, [h, w]) => {
            let (h, w) = (*h, *w);
            let mut out = x.clone();
            for i in 0..h {
                for j in 0..w {
                    out.values_mut()[i * w + j] = x.values()[i * w + (w - 1 - j)];
                }
            }
            out
        }
        (PrimitiveOp::FlipH, [_d]) => {
            let mut vals = x.values().to_vec();
            vals.reverse();
            Tensor::new(x.shape().to_vec(), vals)?
        }
        (PrimitiveOp::Rotate90, [h, w]) => {
            if h != w {
                return Err(CoreError::invalid(format!(
                    "rotate90 needs a square image, got {h}x{w}"
                )));
            }
            let n = *h;
            let mut out = x.clone();
            // 90 degrees clockwise.
            for i in 0..n {
                for j in 0..n {
                    out.values_mut()[i * n + j] = x.values()[(n - 1 - j) * n + i];
                }
            }
            out
        }
        (PrimitiveOp::Rotate90, _) => {
            return Err(CoreError::invalid("rotate90 undefined for vector input".to_string()));
        }
        (PrimitiveOp::Translate, [h, w]) => {
            let (h, w) = (*h, *w);
            let max_dy = max_shift(sev, h);
            let max_dx = max_shift(sev, w);
            let dy = rng.int_in(-max_dy, max_dy);
            let dx = rng.int_in(-max_dx, max_dx);
            let mut out = Tensor::zeros(vec![h, w]);
            for i in 0..h {
                for j in 0..w {
                    let si = i as i64 - dy;
                    let sj = j as i64 - dx;
                    out.values_mut()[i * w + j] =
                        if (0..h as i64).contains(&si) && (0..w as i64).contains(&sj) {
                            x.values()[si as usize * w + sj as usize]
                        } else {
                            lo // vacated cells take the sample minimum
                        };
                }
            }
            out
        }
        (PrimitiveOp::Translate, [d]) => {
            let d = *d;
            let shift = rng.int_in(-max_shift(sev, d), max_shift(sev, d));
            let mut out = Tensor::zeros(vec![d]);
            for j in 0..d {
                let sj = j as i64 - shift;
                out.values_mut()[j] = if (0..d as i64).contains(&sj) {
                    x.values()[sj as usize]
                } else {
                    lo
                };
            }
            out
        }
        (PrimitiveOp::CropResize, [h, w]) => {
            let (h, w) = (*h, *w);
            let ch = crop_len(sev, h);
            let cw = crop_len(sev, w);
            let top = rng.index(h - ch + 1);
            let left = rng.index(w - cw + 1);
            let mut out = Tensor::zeros(vec![h, w]);
            for i in 0..h {
                for j in 0..w {
                    let sy = top as f64 + map_coord(i, h, ch);
                    let sx = left as f64 + map_coord(j, w, cw);
                    out.values_mut()[i * w + j] = bilinear(x.values(), h, w, sy, sx);
                }
            }
            out
        }
        (PrimitiveOp::CropResize, [d]) => {
            let d = *d;
            let cl = crop_len(sev, d);
            let start = rng.index(d - cl + 1);
            let mut out = Tensor::zeros(vec![d]);
            for j in 0..d {
                let s = start as f64 + map_coord(j, d, cl);
                out.values_mut()[j] = linear_1d(x.values(), s);
            }
            out
        }
        (PrimitiveOp::Brightness, _) => {
            let span = hi - lo;
            let delta = rng.uniform_in(-0.1 * sev * span, 0.1 * sev * span);
            let mut out = x.clone();
            for v in out.values_mut() {
                *v += delta;
            }
            out
        }
        (PrimitiveOp::Contrast, _) => {
            let factor = rng.uniform_in((1.0 - 0.1 * sev).max(0.1), 1.0 + 0.1 * sev);
            let mean = x.values().iter().sum::<f64>() / x.len() as f64;
            let mut out = x.clone();
            for v in out.values_mut() {
                *v = mean + (*v - mean) * factor;
            }
            out
        }
        (op, shape) => {
            return Err(CoreError::invalid(format!("{op:?} undefined for shape {shape:?}")));
        }
    };
    clamp_into(&mut out, lo, hi);
    Ok(out)
}

/// Translation distance cap: 5% of the axis per severity point, at least 1.
fn max_shift(sev: f64, dim: usize) -> i64 {
    ((0.05 * sev * dim as f64).round() as i64).max(1)
}

/// Crop window length: shrinks 5% per severity point, at least 2 cells.
fn crop_len(sev: f64, dim: usize) -> usize {
    (((1.0 - 0.05 * sev) * dim as f64).round() as usize).clamp(2.min(dim), dim)
}

/// Maps output coordinate `i` of an axis of length `n` into a crop window of
/// length `c` (align-corners linear mapping).
fn map_coord(i: usize, n: usize, c: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        i as f64 * (c - 1) as f64 / (n - 1) as f64
    }
}

fn linear_1d(vals: &[f64], s: f64) -> f64 {
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(vals.len() - 1);
    let t = s - i0 as f64;
    vals[i0] * (1.0 - t) + vals[i1] * t
}

fn bilinear(vals: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = y - y0 as f64;
    let tx = x - x0 as f64;
    let v00 = vals[y0 * w + x0];
    let v01 = vals[y0 * w + x1];
    let v10 = vals[y1 * w + x0];
    let v11 = vals[y1 * w + x1];
    v00 * (1.0 - ty) * (1.0 - tx) + v01 * (1.0 - ty) * tx + v10 * ty * (1.0 - tx) + v11 * ty * tx
}

/// AugMix: `(1 - m) * x + m * sum_i w_i * chain_i(x)` with `w ~ Dirichlet`,
/// `m ~ Beta`, and each chain a random composition of `depth` primitives.
///
/// Draw order: chain weights, skip weight, then per chain its depth followed
/// by per-step op choice and op parameters.
pub fn augmix(x: &Tensor, policy: &AugPolicy, rng: &mut SeededRng) -> Result<Tensor> {
    policy.validate()?;
    let w = rng.dirichlet(policy.dirichlet_alpha, policy.chain_count);
    let m = rng.beta(policy.beta_alpha, policy.beta_alpha);
    augmix_with_mixing(x, policy, &w, m, rng)
}

/// AugMix body with explicit mixing coefficients; `augmix` draws them. The
/// split keeps the mixing rule directly testable.
pub fn augmix_with_mixing(
    x: &Tensor,
    policy: &AugPolicy,
    chain_weights: &[f64],
    skip_m: f64,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    policy.validate()?;
    if chain_weights.len() != policy.chain_count {
        return Err(CoreError::invalid("one weight per chain required".to_string()));
    }
    let mut mixed = Tensor::zeros(x.shape().to_vec());
    for &weight in chain_weights {
        let (dlo, dhi) = policy.depth_range;
        let depth = rng.int_in(dlo as i64, dhi as i64) as usize;
        let mut chained = x.clone();
        for _ in 0..depth {
            let op = policy.op_set[rng.index(policy.op_set.len())];
            chained = apply_primitive(&chained, op, policy.severity, rng)?;
        }
        for (mv, cv) in mixed.values_mut().iter_mut().zip(chained.values()) {
            *mv += weight * cv;
        }
    }
    let mut out = x.clone();
    for (ov, mv) in out.values_mut().iter_mut().zip(mixed.values()) {
        *ov = (1.0 - skip_m) * *ov + skip_m * *mv;
    }
    Ok(out)
}

/// A convexly mixed sample with its two-label soft target.
#[derive(Debug, Clone)]
pub struct MixedSample {
    pub x: Tensor,
    pub label1: usize,
    pub label2: usize,
    /// Weight on `label1`; `label2` carries `1 - weight1`.
    pub weight1: f64,
}

/// MixUp: `x = lambda*x1 + (1-lambda)*x2` with the matching label weights.
pub fn mixup(x1: &Tensor, y1: usize, x2: &Tensor, y2: usize, lambda: f64) -> Result<MixedSample> {
    if x1.shape() != x2.shape() {
        return Err(CoreError::shape("mixup inputs must share a shape".to_string()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CoreError::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut x = x1.clone();
    for (v, &b) in x.values_mut().iter_mut().zip(x2.values()) {
        *v = lambda * *v + (1.0 - lambda) * b;
    }
    Ok(MixedSample { x, label1: y1, label2: y2, weight1: lambda })
}

/// CutMix: paste a rectangle of area ratio `1 - lambda` from `x2` into `x1`.
/// The label weight is re-derived from the realized patch area.
pub fn cutmix(
    x1: &Tensor,
    y1: usize,
    x2: &Tensor,
    y2: usize,
    lambda: f64,
    rng: &mut SeededRng,
) -> Result<MixedSample> {
    if x1.shape() != x2.shape() {
        return Err(CoreError::shape("cutmix inputs must share a shape".to_string()));
    }
    let [h, w] = x1.shape() else {
        return Err(CoreError::invalid("cutmix is undefined for vector-shaped input".to_string()));
    };
    let (h, w) = (*h, *w);
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CoreError::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let side = (1.0 - lambda).sqrt();
    let ph = (side * h as f64).round() as usize;
    let pw = (side * w as f64).round() as usize;
    let mut x = x1.clone();
    if ph > 0 && pw > 0 {
        let top = rng.index(h - ph + 1);
        let left = rng.index(w - pw + 1);
        for i in top..top + ph {
            for j in left..left + pw {
                x.values_mut()[i * w + j] = x2.values()[i * w + j];
            }
        }
    }
    let lambda_adj = 1.0 - (ph * pw) as f64 / (h * w) as f64;
    Ok(MixedSample { x, label1: y1, label2: y2, weight1: lambda_adj })
}

/// What the training loop applies per batch. AugMix runs per sample;
/// MixUp/CutMix (mutually exclusive) pair each sample with a shuffled
/// partner using a Beta(alpha, alpha) mixing draw.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentPlan {
    pub augmix: Option<AugPolicy>,
    /// Beta parameter for MixUp; 0 disables.
    pub mixup_alpha: f64,
    /// Beta parameter for CutMix; 0 disables.
    pub cutmix_alpha: f64,
}

impl AugmentPlan {
    pub fn none() -> Self {
        AugmentPlan { augmix: None, mixup_alpha: 0.0, cutmix_alpha: 0.0 }
    }

    pub fn is_noop(&self) -> bool {
        self.augmix.is_none() && self.mixup_alpha == 0.0 && self.cutmix_alpha == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(policy) = &self.augmix {
            policy.validate()?;
        }
        if self.mixup_alpha < 0.0 || self.cutmix_alpha < 0.0 {
            return Err(CoreError::invalid("mix alphas must be nonnegative".to_string()));
        }
        if self.mixup_alpha > 0.0 && self.cutmix_alpha > 0.0 {
            return Err(CoreError::invalid(
                "mixup and cutmix cannot both be enabled".to_string(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image4() -> Tensor {
        Tensor::new(vec![4, 4], (0..16).map(|v| v as f64 / 15.0).collect()).unwrap()
    }

    #[test]
    fn flip_h_mirrors_columns() {
        let x = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let mut rng = SeededRng::new(0);
        let y = apply_primitive(&x, PrimitiveOp::FlipH, 3, &mut rng).unwrap();
        assert_eq!(y.values(), &[3., 2., 1., 6., 5., 4.]);
    }

    #[test]
    fn flip_h_reverses_vectors() {
        let x = Tensor::new(vec![4], vec![1., 2., 3., 4.]).unwrap();
        let mut rng = SeededRng::new(0);
        let y = apply_primitive(&x, PrimitiveOp::FlipH, 3, &mut rng).unwrap();
        assert_eq!(y.values(), &[4., 3., 2., 1.]);
    }

    #[test]
    fn rotate90_rejects_vectors_and_non_square() {
        let mut rng = SeededRng::new(0);
        let v = Tensor::new(vec![4], vec![0.; 4]).unwrap();
        assert!(apply_primitive(&v, PrimitiveOp::Rotate90, 3, &mut rng).is_err());
        let rect = Tensor::zeros(vec![2, 3]);
        assert!(apply_primitive(&rect, PrimitiveOp::Rotate90, 3, &mut rng).is_err());
    }

    #[test]
    fn rotate90_four_times_is_identity() {
        let x = image4();
        let mut rng = SeededRng::new(0);
        let mut y = x.clone();
        for _ in 0..4 {
            y = apply_primitive(&y, PrimitiveOp::Rotate90, 3, &mut rng).unwrap();
        }
        assert_eq!(y, x);
    }

    #[test]
    fn primitives_stay_in_sample_range() {
        let x = image4();
        let ops = [
            PrimitiveOp::FlipH,
            PrimitiveOp::Rotate90,
            PrimitiveOp::Translate,
            PrimitiveOp::CropResize,
            PrimitiveOp::Brightness,
            PrimitiveOp::Contrast,
        ];
        let mut rng = SeededRng::new(1);
        for op in ops {
            for severity in [1, 5, 10] {
                for _ in 0..20 {
                    let y = apply_primitive(&x, op, severity, &mut rng).unwrap();
                    assert!(y.min() >= x.min() - 1e-12 && y.max() <= x.max() + 1e-12, "{op:?}");
                    assert_eq!(y.shape(), x.shape());
                }
            }
        }
    }

    #[test]
    fn augmix_skip_weight_zero_returns_input_exactly() {
        let x = image4();
        let policy = AugPolicy::default_image();
        let mut rng = SeededRng::new(2);
        let w = vec![1.0 / 3.0; 3];
        let y = augmix_with_mixing(&x, &policy, &w, 0.0, &mut rng).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn augmix_pure_single_flip_chain_matches_flip_oracle() {
        let x = image4();
        let policy = AugPolicy {
            op_set: vec![PrimitiveOp::FlipH],
            severity: 3,
            chain_count: 1,
            depth_range: (1, 1),
            dirichlet_alpha: 1.0,
            beta_alpha: 1.0,
        };
        let mut rng = SeededRng::new(3);
        let y = augmix_with_mixing(&x, &policy, &[1.0], 1.0, &mut rng).unwrap();
        let mut oracle_rng = SeededRng::new(3);
        let expected = apply_primitive(&x, PrimitiveOp::FlipH, 3, &mut oracle_rng).unwrap();
        assert_eq!(y, expected);
    }

    #[test]
    fn augmix_deterministic_and_in_range() {
        let x = image4();
        let policy = AugPolicy::default_image();
        let a = augmix(&x, &policy, &mut SeededRng::new(7)).unwrap();
        let b = augmix(&x, &policy, &mut SeededRng::new(7)).unwrap();
        assert_eq!(a, b);
        assert!(a.min() >= x.min() - 1e-12 && a.max() <= x.max() + 1e-12);
    }

    #[test]
    fn augmix_rejects_empty_op_set() {
        let x = image4();
        let mut policy = AugPolicy::default_image();
        policy.op_set.clear();
        assert!(augmix(&x, &policy, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn dirichlet_weights_sum_to_one_any_k_alpha() {
        let mut rng = SeededRng::new(5);
        for k in [1usize, 2, 3, 8] {
            for alpha in [0.3, 1.0, 4.0] {
                let w = rng.dirichlet(alpha, k);
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dirichlet_beta_means_match_theory() {
        // Dirichlet(1,...,1) component mean is 1/k; Beta(1,1) mean is 1/2.
        let mut rng = SeededRng::new(6);
        let k = 3;
        let n = 100_000;
        let mut comp_sum = vec![0.0; k];
        let mut beta_sum = 0.0;
        for _ in 0..n {
            let w = rng.dirichlet(1.0, k);
            for (s, v) in comp_sum.iter_mut().zip(&w) {
                *s += v;
            }
            beta_sum += rng.beta(1.0, 1.0);
        }
        for s in &comp_sum {
            let mean = s / n as f64;
            assert!((mean - 1.0 / k as f64).abs() < 0.01 / 3.0, "component mean {mean}");
        }
        let beta_mean = beta_sum / n as f64;
        assert!((beta_mean - 0.5).abs() < 0.005, "beta mean {beta_mean}");
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let x1 = Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let x2 = Tensor::new(vec![3], vec![2.0, 2.0, 2.0]).unwrap();
        let full = mixup(&x1, 0, &x2, 1, 1.0).unwrap();
        assert_eq!(full.x, x1);
        assert_eq!((full.label1, full.label2, full.weight1), (0, 1, 1.0));
        let mid = mixup(&x1, 0, &x2, 1, 0.5).unwrap();
        assert!(mid.x.values().iter().all(|&v| v == 1.0));
        assert!(mixup(&x1, 0, &x2, 1, 1.5).is_err());
        assert!(mixup(&x1, 0, &x2, 1, -0.1).is_err());
    }

    #[test]
    fn cutmix_area_accounting() {
        let x1 = Tensor::zeros(vec![4, 4]);
        let x2 = Tensor::new(vec![4, 4], vec![1.0; 16]).unwrap();
        let mut rng = SeededRng::new(8);
        // lambda = 0.75 on 4x4 gives a 2x2 patch and lambda_adj = 0.75.
        let m = cutmix(&x1, 0, &x2, 1, 0.75, &mut rng).unwrap();
        assert_eq!(m.weight1, 0.75);
        assert_eq!(m.x.values().iter().filter(|&&v| v == 1.0).count(), 4);
        // Whole-image patch.
        let m = cutmix(&x1, 0, &x2, 1, 0.0, &mut rng).unwrap();
        assert_eq!(m.weight1, 0.0);
        assert_eq!(m.x, x2);
        // Zero-area patch.
        let m = cutmix(&x1, 0, &x2, 1, 1.0, &mut rng).unwrap();
        assert_eq!(m.weight1, 1.0);
        assert_eq!(m.x, x1);
    }

    #[test]
    fn cutmix_rejects_vectors() {
        let v = Tensor::zeros(vec![8]);
        let mut rng = SeededRng::new(9);
        assert!(cutmix(&v, 0, &v, 1, 0.5, &mut rng).is_err());
    }

    #[test]
    fn plan_validation() {
        let mut plan = AugmentPlan::none();
        assert!(plan.validate().is_ok());
        assert!(plan.is_noop());
        plan.mixup_alpha = 0.2;
        plan.cutmix_alpha = 0.2;
        assert!(plan.validate().is_err());
    }
}
