//! Classification losses and the mutual-learning pair objective.
//!
//! Every loss returns its batch-mean value together with the exact gradient
//! w.r.t. the logits it was fed, so model backward passes can chain from
//! `dlogits` directly. The AM-Softmax loss additionally differentiates
//! through feature/weight L2 normalization and returns gradients w.r.t. the
//! raw inputs.

use crate::error::{CoreError, Result};
use crate::models::{cosine_logits, cosine_logits_backward, softmax};
use crate::tensor::Tensor;

/// Scale/margin settings of the additive-margin cosine loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AmSoftmaxParams {
    pub scale: f64,
    pub margin: f64,
}

impl AmSoftmaxParams {
    pub fn new(scale: f64, margin: f64) -> Result<Self> {
        if scale < 1.0 || scale.is_nan() {
            return Err(CoreError::invalid(format!("scale {scale} must be >= 1")));
        }
        if !(0.0..1.0).contains(&margin) {
            return Err(CoreError::invalid(format!("margin {margin} outside [0, 1)")));
        }
        Ok(AmSoftmaxParams { scale, margin })
    }

    /// Class-count driven scale with a floor of 3: `max(sqrt(2)*ln(C-1), 3)`.
    pub fn auto_scale(class_count: usize, margin: f64) -> Result<Self> {
        AmSoftmaxParams::new(am_scale(class_count)?, margin)
    }
}

/// Batch-mean loss value and its gradient w.r.t. the logits.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub dlogits: Tensor,
}

/// `max(sqrt(2) * ln(C - 1), 3)` — natural log.
pub fn am_scale(class_count: usize) -> Result<f64> {
    if class_count < 2 {
        return Err(CoreError::invalid(format!("am_scale needs C >= 2, got {class_count}")));
    }
    Ok((std::f64::consts::SQRT_2 * ((class_count - 1) as f64).ln()).max(3.0))
}

fn check_labels(labels: &[usize], batch: usize, c: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(CoreError::shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(CoreError::invalid(format!("label {l} out of range for C={c}")));
    }
    Ok(())
}

/// Row-wise log-softmax; shares the max-subtraction trick with `softmax` but
/// stays in log space so tiny probabilities never underflow.
fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 2 || logits.shape()[1] < 2 {
        return Err(CoreError::shape(format!(
            "log_softmax expects [batch, C>=2], got {:?}",
            logits.shape()
        )));
    }
    if !logits.all_finite() {
        return Err(CoreError::NonFinite("log_softmax input".to_string()));
    }
    let mut out = Tensor::zeros(logits.shape().to_vec());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (d, &v) in out.row_mut(i).iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood of the true class, computed in log space.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossOutput> {
    let logp = log_softmax(logits)?;
    let (batch, c) = (logits.rows(), logits.shape()[1]);
    check_labels(labels, batch, c)?;
    let mut value = 0.0;
    let mut dlogits = Tensor::zeros(vec![batch, c]);
    for i in 0..batch {
        value -= logp.row(i)[labels[i]];
        let d = dlogits.row_mut(i);
        for (j, &lp) in logp.row(i).iter().enumerate() {
            d[j] = lp.exp() / batch as f64;
        }
        d[labels[i]] -= 1.0 / batch as f64;
    }
    Ok(LossOutput { value: value / batch as f64, dlogits })
}

/// Cross-entropy against a per-sample two-label soft target:
/// `w*CE(y1) + (1-w)*CE(y2)`. This is the loss the MixUp/CutMix targets
/// induce.
pub fn cross_entropy_pair(
    logits: &Tensor,
    labels1: &[usize],
    labels2: &[usize],
    weights1: &[f64],
) -> Result<LossOutput> {
    let logp = log_softmax(logits)?;
    let (batch, c) = (logits.rows(), logits.shape()[1]);
    check_labels(labels1, batch, c)?;
    check_labels(labels2, batch, c)?;
    if weights1.len() != batch {
        return Err(CoreError::shape("one mixing weight per sample required".to_string()));
    }
    if let Some(&w) = weights1.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(CoreError::invalid(format!("mixing weight {w} outside [0, 1]")));
    }
    let mut value = 0.0;
    let mut dlogits = Tensor::zeros(vec![batch, c]);
    for i in 0..batch {
        let w = weights1[i];
        value -= w * logp.row(i)[labels1[i]] + (1.0 - w) * logp.row(i)[labels2[i]];
        let d = dlogits.row_mut(i);
        for (j, &lp) in logp.row(i).iter().enumerate() {
            d[j] = lp.exp() / batch as f64;
        }
        d[labels1[i]] -= w / batch as f64;
        d[labels2[i]] -= (1.0 - w) / batch as f64;
    }
    Ok(LossOutput { value: value / batch as f64, dlogits })
}

/// Mean KL divergence between rows of `p` and `q`: `sum p * ln(p/q)` with
/// `0*ln(0) = 0` and `q` clamped at `1e-12`.
pub fn kl_div(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() || p.shape().len() != 2 {
        return Err(CoreError::shape("kl_div expects matching [batch, C] inputs".to_string()));
    }
    for (name, t) in [("p", p), ("q", q)] {
        if t.values().iter().any(|&v| v < 0.0) {
            return Err(CoreError::invalid(format!("negative entries in {name}")));
        }
        for i in 0..t.rows() {
            let s: f64 = t.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(CoreError::invalid(format!("row {i} of {name} sums to {s}, not 1")));
            }
        }
    }
    let mut total = 0.0;
    for i in 0..p.rows() {
        for (&pi, &qi) in p.row(i).iter().zip(q.row(i)) {
            if pi > 0.0 {
                total += pi * (pi / qi.max(1e-12)).ln();
            }
        }
    }
    Ok(total / p.rows() as f64)
}

/// AM-Softmax output: loss value with gradients for the scaled cosine
/// logits, the raw features, and the raw class weights.
#[derive(Debug, Clone)]
pub struct AmSoftmaxOutput {
    pub value: f64,
    /// Scaled cosine logits `s*cos(theta)` the slow student predicts with.
    pub cosine_logits: Tensor,
    /// Gradient w.r.t. `cosine_logits`.
    pub dlogits: Tensor,
    /// Gradient w.r.t. the pre-normalization features.
    pub dfeatures: Tensor,
    /// Gradient w.r.t. the pre-normalization class weights.
    pub dweights: Tensor,
}

/// Margin-shifted cross-entropy on scaled cosine logits. `z` must already be
/// `s*cos(theta)`; the margin subtracts `s*m` from the true-class logit.
pub fn am_softmax_on_logits(
    z: &Tensor,
    labels: &[usize],
    params: &AmSoftmaxParams,
) -> Result<LossOutput> {
    let (batch, c) = (z.rows(), z.shape()[1]);
    check_labels(labels, batch, c)?;
    let mut shifted = z.clone();
    for (i, &y) in labels.iter().enumerate() {
        shifted.row_mut(i)[y] -= params.scale * params.margin;
    }
    // The shift is constant in z, so the CE gradient carries over unchanged.
    cross_entropy(&shifted, labels)
}

/// Full additive-margin softmax over raw features and class weights.
pub fn am_softmax(
    features: &Tensor,
    class_weights: &Tensor,
    labels: &[usize],
    params: &AmSoftmaxParams,
) -> Result<AmSoftmaxOutput> {
    let z = cosine_logits(features, class_weights, params.scale)?;
    let out = am_softmax_on_logits(&z, labels, params)?;
    let (dfeatures, dweights) =
        cosine_logits_backward(features, class_weights, params.scale, &out.dlogits)?;
    Ok(AmSoftmaxOutput {
        value: out.value,
        cosine_logits: z,
        dlogits: out.dlogits,
        dfeatures,
        dweights,
    })
}

/// The fast/slow mutual-learning objectives.
///
/// `L_fast = CE(p1, y) + KL(p2 || p1)` on the fast student's affine logits;
/// `L_slow = AMS(z, y) + KL(p1 || p2)` on the slow student's scaled cosine
/// logits `z`. Each KL term treats the partner's distribution as a constant,
/// so each returned gradient is w.r.t. that student's own logits only.
pub fn dml_losses(
    logits_fast: &Tensor,
    logits_slow_cosine: &Tensor,
    labels: &[usize],
    params: &AmSoftmaxParams,
) -> Result<(LossOutput, LossOutput)> {
    if logits_fast.shape() != logits_slow_cosine.shape() {
        return Err(CoreError::shape(format!(
            "fast logits {:?} vs slow logits {:?}",
            logits_fast.shape(),
            logits_slow_cosine.shape()
        )));
    }
    let batch = logits_fast.rows();
    let p1 = softmax(logits_fast)?;
    let p2 = softmax(logits_slow_cosine)?;

    let ce = cross_entropy(logits_fast, labels)?;
    let kl_fast = kl_div(&p2, &p1)?;
    // d/dz1 of -sum(p2 * log p1) is (p1 - p2); the entropy of p2 is constant.
    let mut dfast = ce.dlogits;
    for i in 0..batch {
        let d = dfast.row_mut(i);
        for ((dj, &p1j), &p2j) in d.iter_mut().zip(p1.row(i)).zip(p2.row(i)) {
            *dj += (p1j - p2j) / batch as f64;
        }
    }
    let fast = LossOutput { value: ce.value + kl_fast, dlogits: dfast };

    let ams = am_softmax_on_logits(logits_slow_cosine, labels, params)?;
    let kl_slow = kl_div(&p1, &p2)?;
    let mut dslow = ams.dlogits;
    for i in 0..batch {
        let d = dslow.row_mut(i);
        for ((dj, &p2j), &p1j) in d.iter_mut().zip(p2.row(i)).zip(p1.row(i)) {
            *dj += (p2j - p1j) / batch as f64;
        }
    }
    let slow = LossOutput { value: ams.value + kl_slow, dlogits: dslow };
    Ok((fast, slow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn randn(rng: &mut SeededRng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Central-difference gradient of a scalar function of a tensor.
    fn fd_grad(f: &dyn Fn(&Tensor) -> f64, at: &Tensor, eps: f64) -> Vec<f64> {
        (0..at.len())
            .map(|i| {
                let mut plus = at.clone();
                plus.values_mut()[i] += eps;
                let mut minus = at.clone();
                minus.values_mut()[i] -= eps;
                (f(&plus) - f(&minus)) / (2.0 * eps)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn ce_uniform_two_classes_is_ln2() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let out = cross_entropy(&logits, &[0]).unwrap();
        assert!((out.value - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn ce_vanishes_as_true_logit_dominates() {
        let logits = Tensor::new(vec![1, 2], vec![200.0, 0.0]).unwrap();
        let out = cross_entropy(&logits, &[0]).unwrap();
        assert!(out.value >= 0.0 && out.value < 1e-12);
    }

    #[test]
    fn ce_matches_softmax_oracle() {
        // -ln(softmax([1,2,3])[2]) from the direct-exponential oracle.
        let logits = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let out = cross_entropy(&logits, &[2]).unwrap();
        let p = softmax(&logits).unwrap();
        assert!((out.value + p.values()[2].ln()).abs() < 1e-15);
        assert!((out.value - 0.4076059644443808).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_invalid_label() {
        let logits = Tensor::zeros(vec![1, 3]);
        assert!(cross_entropy(&logits, &[3]).is_err());
        assert!(cross_entropy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(1);
        let logits = randn(&mut rng, vec![3, 4]);
        let labels = [0usize, 3, 1];
        let out = cross_entropy(&logits, &labels).unwrap();
        let fd = fd_grad(&|t| cross_entropy(t, &labels).unwrap().value, &logits, 1e-6);
        assert_close(out.dlogits.values(), &fd, 1e-9);
    }

    #[test]
    fn ce_pair_reduces_to_weighted_sum() {
        let mut rng = SeededRng::new(2);
        let logits = randn(&mut rng, vec![2, 3]);
        let y1 = [0usize, 1];
        let y2 = [2usize, 2];
        let w = [0.3, 0.8];
        let pair = cross_entropy_pair(&logits, &y1, &y2, &w).unwrap();
        // Oracle: expand the definition sample by sample.
        let mut expected = 0.0;
        for i in 0..2 {
            let row = Tensor::new(vec![1, 3], logits.row(i).to_vec()).unwrap();
            let a = cross_entropy(&row, &[y1[i]]).unwrap().value;
            let b = cross_entropy(&row, &[y2[i]]).unwrap().value;
            expected += w[i] * a + (1.0 - w[i]) * b;
        }
        assert!((pair.value - expected / 2.0).abs() < 1e-12);
        let fd = fd_grad(&|t| cross_entropy_pair(t, &y1, &y2, &w).unwrap().value, &logits, 1e-6);
        assert_close(pair.dlogits.values(), &fd, 1e-9);
    }

    #[test]
    fn kl_zero_on_equal_distributions() {
        let p = Tensor::new(vec![2, 2], vec![0.3, 0.7, 0.5, 0.5]).unwrap();
        assert_eq!(kl_div(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_handles_hard_distribution() {
        let p = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let q = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!((kl_div(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = SeededRng::new(3);
        for _ in 0..10_000 {
            let draw = |rng: &mut SeededRng| {
                let mut v: Vec<f64> = (0..4).map(|_| rng.uniform() + 1e-3).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                Tensor::new(vec![1, 4], v).unwrap()
            };
            let p = draw(&mut rng);
            let q = draw(&mut rng);
            assert!(kl_div(&p, &q).unwrap() >= -1e-15);
        }
    }

    #[test]
    fn kl_rejects_negative_and_unnormalized() {
        let p = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let neg = Tensor::new(vec![1, 2], vec![-0.5, 1.5]).unwrap();
        assert!(kl_div(&neg, &p).is_err());
        let bad = Tensor::new(vec![1, 2], vec![0.6, 0.6]).unwrap();
        assert!(kl_div(&p, &bad).is_err());
    }

    #[test]
    fn am_scale_examples() {
        assert_eq!(am_scale(2).unwrap(), 3.0); // ln(1) = 0, floor active
        let s196 = am_scale(196).unwrap();
        assert!((s196 - std::f64::consts::SQRT_2 * 195f64.ln()).abs() < 1e-15);
        assert!((s196 - 7.457).abs() < 1e-3);
        assert!((am_scale(102).unwrap() - 6.527).abs() < 1e-3);
        assert!(am_scale(1).is_err());
        // Floor holds everywhere.
        for c in 2..100 {
            assert!(am_scale(c).unwrap() >= 3.0);
        }
    }

    #[test]
    fn am_softmax_aligned_feature_scalar_value() {
        // Feature aligned with its class weight, orthogonal to the other:
        // value = -ln(e^{s(1-m)} / (e^{s(1-m)} + e^0)).
        let features = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
        let weights = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let params = AmSoftmaxParams::new(3.0, 0.35).unwrap();
        let out = am_softmax(&features, &weights, &[0], &params).unwrap();
        let expected = -((3.0f64 * 0.65).exp() / ((3.0f64 * 0.65).exp() + 1.0)).ln();
        assert!((out.value - expected).abs() < 1e-12);
        assert!((out.value - 0.133).abs() < 1e-3);
    }

    #[test]
    fn am_softmax_s1_m0_equals_ce_on_cosine_logits() {
        let mut rng = SeededRng::new(4);
        let features = randn(&mut rng, vec![3, 4]);
        let weights = randn(&mut rng, vec![3, 4]);
        let labels = [0usize, 2, 1];
        let params = AmSoftmaxParams::new(1.0, 0.0).unwrap();
        let out = am_softmax(&features, &weights, &labels, &params).unwrap();
        let z = cosine_logits(&features, &weights, 1.0).unwrap();
        let ce = cross_entropy(&z, &labels).unwrap();
        assert!((out.value - ce.value).abs() < 1e-15);
        assert_close(out.dlogits.values(), ce.dlogits.values(), 1e-15);
    }

    #[test]
    fn am_softmax_margin_strictly_increases_value() {
        let mut rng = SeededRng::new(5);
        let features = randn(&mut rng, vec![4, 3]);
        let weights = randn(&mut rng, vec![5, 3]);
        let labels = [0usize, 1, 2, 4];
        let mut prev = f64::NEG_INFINITY;
        for m in [0.0, 0.1, 0.2, 0.35, 0.5] {
            let params = AmSoftmaxParams::new(3.0, m).unwrap();
            let v = am_softmax(&features, &weights, &labels, &params).unwrap().value;
            assert!(v > prev, "margin {m}: {v} <= {prev}");
            prev = v;
        }
    }

    #[test]
    fn am_softmax_feature_rescaling_invariance() {
        let mut rng = SeededRng::new(6);
        let features = randn(&mut rng, vec![2, 3]);
        let weights = randn(&mut rng, vec![4, 3]);
        let labels = [1usize, 3];
        let params = AmSoftmaxParams::new(3.0, 0.35).unwrap();
        let base = am_softmax(&features, &weights, &labels, &params).unwrap().value;
        let mut scaled = features.clone();
        for v in scaled.values_mut() {
            *v *= 123.456;
        }
        let v = am_softmax(&scaled, &weights, &labels, &params).unwrap().value;
        assert!((v - base).abs() < 1e-9);
    }

    #[test]
    fn am_softmax_rejects_zero_norm_feature() {
        let features = Tensor::zeros(vec![1, 3]);
        let weights = Tensor::new(vec![2, 3], vec![1., 0., 0., 0., 1., 0.]).unwrap();
        let params = AmSoftmaxParams::new(1.0, 0.0).unwrap();
        assert!(am_softmax(&features, &weights, &[0], &params).is_err());
    }

    #[test]
    fn am_softmax_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(7);
        let features = randn(&mut rng, vec![3, 4]);
        let weights = randn(&mut rng, vec![3, 4]);
        let labels = [0usize, 1, 2];
        let params = AmSoftmaxParams::new(3.0, 0.35).unwrap();
        let out = am_softmax(&features, &weights, &labels, &params).unwrap();
        let fd_f = fd_grad(
            &|f| am_softmax(f, &weights, &labels, &params).unwrap().value,
            &features,
            1e-6,
        );
        assert_close(out.dfeatures.values(), &fd_f, 1e-8);
        let fd_w = fd_grad(
            &|w| am_softmax(&features, w, &labels, &params).unwrap().value,
            &weights,
            1e-6,
        );
        assert_close(out.dweights.values(), &fd_w, 1e-8);
    }

    #[test]
    fn dml_equal_distributions_reduce_to_plain_losses() {
        let mut rng = SeededRng::new(8);
        let logits = randn(&mut rng, vec![2, 3]);
        let labels = [0usize, 2];
        let params = AmSoftmaxParams::new(1.0, 0.0).unwrap();
        let (fast, slow) = dml_losses(&logits, &logits, &labels, &params).unwrap();
        let ce = cross_entropy(&logits, &labels).unwrap();
        let ams = am_softmax_on_logits(&logits, &labels, &params).unwrap();
        assert!((fast.value - ce.value).abs() < 1e-15);
        assert!((slow.value - ams.value).abs() < 1e-15);
        assert_close(fast.dlogits.values(), ce.dlogits.values(), 1e-15);
        assert_close(slow.dlogits.values(), ams.dlogits.values(), 1e-15);
    }

    #[test]
    fn dml_fast_gradient_matches_fd_with_partner_fixed() {
        let mut rng = SeededRng::new(9);
        let zf = randn(&mut rng, vec![3, 4]);
        let zs = randn(&mut rng, vec![3, 4]);
        let labels = [1usize, 0, 3];
        let params = AmSoftmaxParams::new(1.0, 0.0).unwrap();
        let (fast, slow) = dml_losses(&zf, &zs, &labels, &params).unwrap();
        let fd_fast = fd_grad(
            &|t| dml_losses(t, &zs, &labels, &params).unwrap().0.value,
            &zf,
            1e-6,
        );
        assert_close(fast.dlogits.values(), &fd_fast, 1e-9);
        let fd_slow = fd_grad(
            &|t| dml_losses(&zf, t, &labels, &params).unwrap().1.value,
            &zs,
            1e-6,
        );
        assert_close(slow.dlogits.values(), &fd_slow, 1e-9);
    }

    #[test]
    fn dml_confident_wrong_fast_student_pays_large_kl() {
        // p1 = [0.99, 0.01], p2 = [0.5, 0.5]: KL(p2 || p1) > 1.
        let p1 = Tensor::new(vec![1, 2], vec![0.99, 0.01]).unwrap();
        let p2 = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let kl = kl_div(&p2, &p1).unwrap();
        assert!(kl > 1.0, "kl = {kl}");
        // The same term shows up inside L_fast.
        let zf = Tensor::new(vec![1, 2], vec![0.99f64.ln(), 0.01f64.ln()]).unwrap();
        let zs = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let params = AmSoftmaxParams::new(1.0, 0.0).unwrap();
        let (fast, _) = dml_losses(&zf, &zs, &[0], &params).unwrap();
        let ce = cross_entropy(&zf, &[0]).unwrap();
        assert!((fast.value - ce.value - kl).abs() < 1e-12);
    }

    #[test]
    fn dml_rejects_shape_mismatch() {
        let params = AmSoftmaxParams::new(1.0, 0.0).unwrap();
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 4]);
        assert!(dml_losses(&a, &b, &[0, 1], &params).is_err());
    }
}
