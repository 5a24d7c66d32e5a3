//! SGD with momentum, coupled weight decay, no-bias-decay parameter
//! grouping, and the two-pass sharpness-aware (SAM) step.

use crate::error::{CoreError, Result};
use crate::models::{ClassifierModel, ModelParams};
use crate::tensor::Tensor;

/// Sharpness-aware minimization settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamConfig {
    pub rho: f64,
}

impl SamConfig {
    pub fn new(rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(CoreError::invalid(format!("rho {rho} outside [0, 1)")));
        }
        Ok(SamConfig { rho })
    }
}

/// One optimizer parameter group: members share a learning-rate multiplier,
/// weight decay, momentum, and per-parameter velocity buffers.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub members: Vec<String>,
    pub lr_multiplier: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl ParamGroup {
    fn new(
        name: &str,
        members: Vec<String>,
        lr_multiplier: f64,
        weight_decay: f64,
        momentum: f64,
        params: &ModelParams,
    ) -> Result<Self> {
        let velocity = members
            .iter()
            .map(|m| {
                params
                    .get(m)
                    .map(|t| Tensor::zeros(t.shape().to_vec()))
                    .ok_or_else(|| CoreError::invalid(format!("unknown parameter {m:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamGroup { name: name.to_string(), members, lr_multiplier, weight_decay, momentum, velocity })
    }
}

/// No-bias-decay grouping: biases get zero weight decay and a 2x learning
/// rate, everything else gets the base decay at 1x.
pub fn build_nbd_groups(
    params: &ModelParams,
    base_weight_decay: f64,
    momentum: f64,
) -> Result<Vec<ParamGroup>> {
    if params.is_empty() {
        return Err(CoreError::invalid("cannot group an empty model".to_string()));
    }
    let weights: Vec<String> =
        params.iter().filter(|p| !p.is_bias).map(|p| p.name.clone()).collect();
    let biases: Vec<String> =
        params.iter().filter(|p| p.is_bias).map(|p| p.name.clone()).collect();
    Ok(vec![
        ParamGroup::new("weights", weights, 1.0, base_weight_decay, momentum, params)?,
        ParamGroup::new("biases", biases, 2.0, 0.0, momentum, params)?,
    ])
}

/// Single group holding every parameter at the base decay (NBD disabled).
pub fn build_single_group(
    params: &ModelParams,
    base_weight_decay: f64,
    momentum: f64,
) -> Result<Vec<ParamGroup>> {
    if params.is_empty() {
        return Err(CoreError::invalid("cannot group an empty model".to_string()));
    }
    let all: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    Ok(vec![ParamGroup::new("all", all, 1.0, base_weight_decay, momentum, params)?])
}

/// Momentum SGD with coupled weight decay. Per group and member:
/// `g = grad + wd*param; v = mu*v + g; param -= lr * lr_mult * v`.
///
/// Non-finite gradients abort the step with a divergence diagnostic.
pub fn sgd_step(
    params: &mut ModelParams,
    groups: &mut [ParamGroup],
    grads: &ModelParams,
    lr: f64,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(CoreError::Diverged("non-finite gradient in sgd_step".to_string()));
    }
    for group in groups.iter_mut() {
        for (member, vel) in group.members.iter().zip(group.velocity.iter_mut()) {
            let grad = grads
                .get(member)
                .ok_or_else(|| CoreError::invalid(format!("missing gradient for {member:?}")))?;
            let param = params
                .get_mut(member)
                .ok_or_else(|| CoreError::invalid(format!("missing parameter {member:?}")))?;
            if grad.shape() != param.shape() {
                return Err(CoreError::shape(format!("gradient shape mismatch for {member:?}")));
            }
            let step = lr * group.lr_multiplier;
            for ((p, &g), v) in
                param.values_mut().iter_mut().zip(grad.values()).zip(vel.values_mut())
            {
                let g = g + group.weight_decay * *p;
                *v = group.momentum * *v + g;
                *p -= step * *v;
            }
        }
    }
    Ok(())
}

/// Outcome of one SAM step.
#[derive(Debug, Clone, Copy)]
pub struct SamStepInfo {
    /// Loss at the unperturbed weights (the value worth logging).
    pub loss: f64,
    /// Whether the ascent perturbation was applied (`false` when the
    /// gradient norm was zero or `rho == 0`).
    pub perturbed: bool,
}

/// Two-pass SAM update. `grad_fn` evaluates the batch loss and its gradients
/// at the model's current parameters; it runs once at `w` and once at
/// `w + rho * g1 / |g1|`, after which the weights are restored exactly and
/// the second gradient drives a plain [`sgd_step`].
///
/// The perturbation uses the raw loss gradient; weight decay enters only the
/// final update. A zero first gradient (or `rho == 0`) falls back to plain
/// SGD on the first-pass gradient.
pub fn sam_step<M, F>(
    model: &mut M,
    groups: &mut [ParamGroup],
    sam: SamConfig,
    lr: f64,
    mut grad_fn: F,
) -> Result<SamStepInfo>
where
    M: ClassifierModel,
    F: FnMut(&M) -> Result<(f64, ModelParams)>,
{
    let (loss, g1) = grad_fn(model)?;
    if !loss.is_finite() || !g1.all_finite() {
        return Err(CoreError::Diverged(format!("non-finite loss {loss} in SAM first pass")));
    }
    let norm = g1.l2_norm();
    if sam.rho == 0.0 || norm == 0.0 {
        sgd_step(model.params_mut(), groups, &g1, lr)?;
        return Ok(SamStepInfo { loss, perturbed: false });
    }
    // Climb to the adversarial point, measure, then restore bit-exactly.
    let snapshot = model.params().clone();
    model.params_mut().axpy(sam.rho / norm, &g1)?;
    let second = grad_fn(model);
    *model.params_mut() = snapshot;
    let (loss2, g2) = second?;
    if !loss2.is_finite() {
        return Err(CoreError::Diverged(format!("non-finite loss {loss2} in SAM second pass")));
    }
    sgd_step(model.params_mut(), groups, &g2, lr)?;
    Ok(SamStepInfo { loss, perturbed: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelSpec, SoftmaxRegression};
    use crate::rng::SeededRng;

    fn scalar_params(w: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("w", false, Tensor::scalar(w)).unwrap();
        p
    }

    fn scalar_grads(g: f64) -> ModelParams {
        scalar_params(g)
    }

    #[test]
    fn nbd_groups_split_by_bias_flag() {
        let mut rng = SeededRng::new(1);
        let model = ModelSpec::Mlp { hidden: 4 }.build(&[3], 2, &mut rng).unwrap();
        let groups = build_nbd_groups(model.params(), 5e-4, 0.9).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].members, vec!["layer1.weight", "head.weight"]);
        assert_eq!((groups[0].lr_multiplier, groups[0].weight_decay), (1.0, 5e-4));
        assert_eq!(groups[1].members, vec!["layer1.bias", "head.bias"]);
        assert_eq!((groups[1].lr_multiplier, groups[1].weight_decay), (2.0, 0.0));
    }

    #[test]
    fn nbd_bias_group_empty_without_biases() {
        let mut params = ModelParams::new();
        params.insert("w", false, Tensor::zeros(vec![2, 2])).unwrap();
        let groups = build_nbd_groups(&params, 1e-4, 0.9).unwrap();
        assert_eq!(groups.len(), 2);
        assert!(groups[1].members.is_empty());
    }

    #[test]
    fn single_group_holds_everything() {
        let mut rng = SeededRng::new(1);
        let model = ModelSpec::Mlp { hidden: 4 }.build(&[3], 2, &mut rng).unwrap();
        let groups = build_single_group(model.params(), 5e-4, 0.9).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].members.len(), 4);
        assert_eq!(groups[0].weight_decay, 5e-4);
        assert_eq!(groups[0].lr_multiplier, 1.0);
    }

    #[test]
    fn sgd_hand_derived_single_step() {
        // w=1, g=0.5, lr=0.1, mu=0.9, wd=0: v=0.5, w'=0.95.
        let mut params = scalar_params(1.0);
        let mut groups = build_single_group(&params, 0.0, 0.9).unwrap();
        sgd_step(&mut params, &mut groups, &scalar_grads(0.5), 0.1).unwrap();
        assert_eq!(params.get("w").unwrap().values()[0], 0.95);
    }

    #[test]
    fn sgd_hand_derived_two_steps() {
        // Second step: v = 0.9*0.5 + 0.5 = 0.95, w'' = 0.95 - 0.095 = 0.855.
        let mut params = scalar_params(1.0);
        let mut groups = build_single_group(&params, 0.0, 0.9).unwrap();
        sgd_step(&mut params, &mut groups, &scalar_grads(0.5), 0.1).unwrap();
        sgd_step(&mut params, &mut groups, &scalar_grads(0.5), 0.1).unwrap();
        assert!((params.get("w").unwrap().values()[0] - 0.855).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut params = scalar_params(1.5);
        let mut groups = build_single_group(&params, 0.0, 0.9).unwrap();
        sgd_step(&mut params, &mut groups, &scalar_grads(0.0), 0.1).unwrap();
        assert_eq!(params.get("w").unwrap().values()[0], 1.5);
    }

    #[test]
    fn weight_decay_on_zero_params_is_noop() {
        let mut params = scalar_params(0.0);
        let mut groups = build_single_group(&params, 5e-4, 0.9).unwrap();
        sgd_step(&mut params, &mut groups, &scalar_grads(0.0), 0.1).unwrap();
        assert_eq!(params.get("w").unwrap().values()[0], 0.0);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut params = scalar_params(1.0);
        let mut groups = build_single_group(&params, 0.0, 0.9).unwrap();
        let mut bad = ModelParams::new();
        bad.insert("w", false, Tensor::scalar(1.0)).unwrap();
        bad.get_mut("w").unwrap().values_mut()[0] = f64::NAN;
        let err = sgd_step(&mut params, &mut groups, &bad, 0.1);
        assert!(matches!(err, Err(CoreError::Diverged(_))));
    }

    /// Quadratic scalar model for SAM hand checks: loss = w^2.
    fn quadratic_model(w: f64) -> SoftmaxRegression {
        let mut rng = SeededRng::new(0);
        let mut m = SoftmaxRegression::init(1, 2, &mut rng).unwrap();
        *m.params_mut() = scalar_params(w);
        m
    }

    fn quadratic_grad(m: &SoftmaxRegression) -> Result<(f64, ModelParams)> {
        let w = m.params().get("w").unwrap().values()[0];
        Ok((w * w, scalar_grads(2.0 * w)))
    }

    #[test]
    fn sam_hand_derived_scalar_step() {
        // w=1, L=w^2, rho=0.05, lr=0.1, mu=0:
        // g1=2, eps=0.05, g2=2*(1.05)=2.1, w'=1-0.21=0.79.
        let mut model = quadratic_model(1.0);
        let mut groups = build_single_group(model.params(), 0.0, 0.0).unwrap();
        let info = sam_step(&mut model, &mut groups, SamConfig::new(0.05).unwrap(), 0.1, quadratic_grad)
            .unwrap();
        assert!(info.perturbed);
        assert!((model.params().get("w").unwrap().values()[0] - 0.79).abs() < 1e-12);
        assert_eq!(info.loss, 1.0);
    }

    #[test]
    fn sam_perturbation_norm_equals_rho() {
        // With |g1| != 0 the ascent offset has L2 norm exactly rho; observe it
        // through the second-pass evaluation point.
        let mut model = quadratic_model(3.0);
        let mut groups = build_single_group(model.params(), 0.0, 0.0).unwrap();
        let mut seen = Vec::new();
        sam_step(&mut model, &mut groups, SamConfig::new(0.05).unwrap(), 0.0, |m| {
            seen.push(m.params().get("w").unwrap().values()[0]);
            quadratic_grad(m)
        })
        .unwrap();
        assert_eq!(seen.len(), 2);
        assert!((seen[1] - seen[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn sam_rho_zero_matches_sgd_bitwise() {
        let mut a = quadratic_model(1.0);
        let mut ga = build_single_group(a.params(), 0.0, 0.9).unwrap();
        let mut b = quadratic_model(1.0);
        let mut gb = build_single_group(b.params(), 0.0, 0.9).unwrap();
        for _ in 0..100 {
            sam_step(&mut a, &mut ga, SamConfig::new(0.0).unwrap(), 0.01, quadratic_grad).unwrap();
            let (_, g) = quadratic_grad(&b).unwrap();
            sgd_step(b.params_mut(), &mut gb, &g, 0.01).unwrap();
        }
        let wa = a.params().get("w").unwrap().values()[0];
        let wb = b.params().get("w").unwrap().values()[0];
        assert_eq!(wa.to_bits(), wb.to_bits());
    }

    #[test]
    fn sam_zero_gradient_falls_back_to_sgd() {
        let mut model = quadratic_model(0.0);
        let mut groups = build_single_group(model.params(), 0.0, 0.9).unwrap();
        let info =
            sam_step(&mut model, &mut groups, SamConfig::new(0.05).unwrap(), 0.1, quadratic_grad)
                .unwrap();
        assert!(!info.perturbed);
        assert_eq!(model.params().get("w").unwrap().values()[0], 0.0);
    }

    #[test]
    fn sam_restores_weights_after_perturbation() {
        let mut model = quadratic_model(1.234_567_890_123);
        let before = model.params().clone();
        let mut groups = build_single_group(model.params(), 0.0, 0.0).unwrap();
        // lr = 0 isolates the perturb/restore cycle.
        sam_step(&mut model, &mut groups, SamConfig::new(0.05).unwrap(), 0.0, quadratic_grad)
            .unwrap();
        assert_eq!(
            model.params().get("w").unwrap().values()[0].to_bits(),
            before.get("w").unwrap().values()[0].to_bits()
        );
    }
}
