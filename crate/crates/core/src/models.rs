//! Reference classifiers with hand-written forward/backward passes.
//!
//! Three small models cover the shapes the rest of the pipeline needs:
//! softmax regression (pure linear head), a one-hidden-layer ReLU MLP, and a
//! tiny CNN (3x3 conv, average pooling, dense head) for image-shaped inputs.
//! Every backward pass is the exact vector-Jacobian product of the logits
//! against the parameters and is validated against central finite
//! differences by [`grad_check`].

use crate::error::{CoreError, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// One named parameter tensor. `is_bias` marks rank-1 additive offsets; the
/// optimizer's no-bias-decay grouping keys off it.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub is_bias: bool,
    pub tensor: Tensor,
}

/// Ordered collection of uniquely named parameter tensors. Iteration order
/// is insertion order, which keeps flattened views and optimizer updates
/// deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    entries: Vec<Param>,
}

impl ModelParams {
    pub fn new() -> Self {
        ModelParams { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, is_bias: bool, tensor: Tensor) -> Result<()> {
        if self.entries.iter().any(|p| p.name == name) {
            return Err(CoreError::invalid(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push(Param { name: name.to_string(), is_bias, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Same names/shapes/flags, all values zero. Gradient buffers start here.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    is_bias: p.is_bias,
                    tensor: Tensor::zeros(p.tensor.shape().to_vec()),
                })
                .collect(),
        }
    }

    /// Total element count across all tensors.
    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.len()).sum()
    }

    /// `self += a * other`, matched by name.
    pub fn axpy(&mut self, a: f64, other: &ModelParams) -> Result<()> {
        for p in &mut self.entries {
            let o = other
                .get(&p.name)
                .ok_or_else(|| CoreError::invalid(format!("missing parameter {:?}", p.name)))?;
            if o.shape() != p.tensor.shape() {
                return Err(CoreError::shape(format!("parameter {:?} shape mismatch", p.name)));
            }
            for (v, w) in p.tensor.values_mut().iter_mut().zip(o.values()) {
                *v += a * w;
            }
        }
        Ok(())
    }

    /// Global L2 norm over every element.
    pub fn l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|p| p.tensor.values())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.tensor.all_finite())
    }

    /// Flattened copy of every element, in insertion order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|p| p.tensor.values().iter().copied()).collect()
    }

    /// Adds a flat delta (layout of [`Self::to_flat`]) onto the parameters.
    pub fn add_flat(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.element_count() {
            return Err(CoreError::shape("flat delta length mismatch".to_string()));
        }
        let mut k = 0;
        for p in &mut self.entries {
            for v in p.tensor.values_mut() {
                *v += delta[k];
                k += 1;
            }
        }
        Ok(())
    }
}

/// Row-wise softmax with max-subtraction for stability.
///
/// Rejects non-finite inputs and fewer than two classes; each output row is
/// nonnegative and sums to one.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(CoreError::shape(format!("softmax expects [batch, C], got {:?}", logits.shape())));
    }
    let c = logits.shape()[1];
    if c < 2 {
        return Err(CoreError::invalid(format!("softmax needs C >= 2, got {c}")));
    }
    if !logits.all_finite() {
        return Err(CoreError::NonFinite("softmax input".to_string()));
    }
    let mut out = Tensor::zeros(logits.shape().to_vec());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = out.row_mut(i);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    Ok(out)
}

/// Scaled cosine-similarity logits: `z[b,c] = scale * <f_b, w_c> / (|f_b||w_c|)`.
///
/// This is the slow student's classifier head; the affine head's bias plays
/// no part here. Zero-norm features or class weights are rejected.
pub fn cosine_logits(features: &Tensor, weights: &Tensor, scale: f64) -> Result<Tensor> {
    cosine_logits_impl(features, weights, scale, false)
}

/// [`cosine_logits`] with the singularity defused: a zero-norm feature row
/// yields all-zero logits (a uniform distribution after softmax) instead of
/// an error. The training loop and evaluation use this form so a sample
/// whose ReLU features all die does not abort the run; the matching
/// backward pass gives such rows zero gradient.
pub fn cosine_logits_lenient(features: &Tensor, weights: &Tensor, scale: f64) -> Result<Tensor> {
    cosine_logits_impl(features, weights, scale, true)
}

#[allow(clippy::needless_range_loop)]
fn cosine_logits_impl(
    features: &Tensor,
    weights: &Tensor,
    scale: f64,
    lenient: bool,
) -> Result<Tensor> {
    let (b, f) = (features.rows(), features.row_len());
    let (c, fw) = (weights.rows(), weights.row_len());
    if f != fw {
        return Err(CoreError::shape(format!(
            "features dim {f} vs class weights dim {fw}"
        )));
    }
    let fnorms: Vec<f64> = (0..b).map(|i| norm(features.row(i))).collect();
    let wnorms: Vec<f64> = (0..c).map(|j| norm(weights.row(j))).collect();
    if !lenient && fnorms.contains(&0.0) {
        return Err(CoreError::invalid("zero-norm feature vector".to_string()));
    }
    if wnorms.contains(&0.0) {
        return Err(CoreError::invalid("zero-norm class weight vector".to_string()));
    }
    let mut z = Tensor::zeros(vec![b, c]);
    for i in 0..b {
        if fnorms[i] == 0.0 {
            continue;
        }
        let fr = features.row(i);
        let zr = z.row_mut(i);
        for j in 0..c {
            zr[j] = scale * dot(fr, weights.row(j)) / (fnorms[i] * wnorms[j]);
        }
    }
    Ok(z)
}

/// Backward pass of the cosine head: gradients w.r.t. the raw
/// (pre-normalization) features and class weights. Zero-norm feature rows
/// produced constant (zero) logits, so they contribute zero gradient.
#[allow(clippy::needless_range_loop)]
pub fn cosine_logits_backward(
    features: &Tensor,
    weights: &Tensor,
    scale: f64,
    dz: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (b, f) = (features.rows(), features.row_len());
    let c = weights.rows();
    if dz.shape() != [b, c] {
        return Err(CoreError::shape("dz shape mismatch in cosine head".to_string()));
    }
    let fnorms: Vec<f64> = (0..b).map(|i| norm(features.row(i))).collect();
    let wnorms: Vec<f64> = (0..c).map(|j| norm(weights.row(j))).collect();
    let mut dfeat = Tensor::zeros(vec![b, f]);
    let mut dw = Tensor::zeros(vec![c, f]);
    for i in 0..b {
        if fnorms[i] == 0.0 {
            continue;
        }
        let fr = features.row(i);
        let dzr = dz.row(i);
        for j in 0..c {
            let wr = weights.row(j);
            let cos = dot(fr, wr) / (fnorms[i] * wnorms[j]);
            let g = dzr[j] * scale;
            // d cos / df = (w_hat - cos * f_hat) / |f| ; symmetric for w.
            let dfr = dfeat.row_mut(i);
            for k in 0..f {
                dfr[k] += g * (wr[k] / wnorms[j] - cos * fr[k] / fnorms[i]) / fnorms[i];
            }
            let dwr = dw.row_mut(j);
            for k in 0..f {
                dwr[k] += g * (fr[k] / fnorms[i] - cos * wr[k] / wnorms[j]) / wnorms[j];
            }
        }
    }
    Ok((dfeat, dw))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Everything a backward pass needs from the matching forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Affine head output, `[batch, C]`.
    pub logits: Tensor,
    /// Penultimate features, `[batch, F]`.
    pub features: Tensor,
    cache: Cache,
}

#[derive(Debug, Clone)]
enum Cache {
    Linear,
    Mlp { hidden_pre: Tensor },
    Cnn { conv_pre: Tensor },
}

/// Behavioral contract shared by the reference classifiers.
///
/// `forward` yields logits `[batch, C]` plus penultimate features;
/// `backward` is the exact gradient of `sum(logits * dlogits)` w.r.t. every
/// parameter. `backward_from_features` propagates a feature-space gradient
/// through the feature extractor only, leaving head parameters at zero (the
/// cosine-head losses produce those gradients themselves).
pub trait ClassifierModel {
    fn params(&self) -> &ModelParams;
    fn params_mut(&mut self) -> &mut ModelParams;
    fn class_count(&self) -> usize;
    /// Parameter name of the classifier head's weight matrix `[C, F]`.
    fn head_weight_name(&self) -> &str;
    fn forward(&self, x: &Tensor) -> Result<ForwardPass>;
    fn backward(&self, x: &Tensor, fwd: &ForwardPass, dlogits: &Tensor) -> Result<ModelParams>;
    fn backward_from_features(
        &self,
        x: &Tensor,
        fwd: &ForwardPass,
        dfeatures: &Tensor,
    ) -> Result<ModelParams>;
}

fn check_batch_dims(x: &Tensor, dlogits: &Tensor, c: usize) -> Result<()> {
    if dlogits.shape().len() != 2 || dlogits.shape()[1] != c || dlogits.shape()[0] != x.shape()[0] {
        return Err(CoreError::shape(format!(
            "dlogits shape {:?} does not match batch {} x {c}",
            dlogits.shape(),
            x.shape()[0]
        )));
    }
    Ok(())
}

/// `x[B,D] @ w[C,D]^T + b[C]`.
#[allow(clippy::needless_range_loop)]
fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let n = x.rows();
    let c = w.rows();
    let mut out = Tensor::zeros(vec![n, c]);
    for i in 0..n {
        let xr = x.row(i);
        let or = out.row_mut(i);
        for j in 0..c {
            or[j] = dot(xr, w.row(j)) + b.values()[j];
        }
    }
    out
}

/// Gradients of a linear layer: returns `(dw, db, dx)`.
#[allow(clippy::needless_range_loop)]
fn linear_backward(x: &Tensor, w: &Tensor, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (x.rows(), x.row_len());
    let c = w.rows();
    let mut dw = Tensor::zeros(vec![c, d]);
    let mut db = Tensor::zeros(vec![c]);
    let mut dx = Tensor::zeros(vec![n, d]);
    for i in 0..n {
        let xr = x.row(i);
        let dr = dout.row(i);
        for j in 0..c {
            let g = dr[j];
            if g != 0.0 {
                let dwr = dw.row_mut(j);
                for k in 0..d {
                    dwr[k] += g * xr[k];
                }
            }
            db.values_mut()[j] += g;
            let wr = w.row(j);
            let dxr = dx.row_mut(i);
            for k in 0..d {
                dxr[k] += g * wr[k];
            }
        }
    }
    (dw, db, dx)
}

fn flatten_batch(x: &Tensor, input_dim: usize) -> Result<Tensor> {
    if x.row_len() != input_dim {
        return Err(CoreError::shape(format!(
            "input row length {} does not match model input dim {input_dim}",
            x.row_len()
        )));
    }
    x.reshaped(vec![x.rows(), input_dim])
}

// ---------------------------------------------------------------------------
// Softmax regression
// ---------------------------------------------------------------------------

/// Linear classifier; its penultimate features are the flattened inputs.
#[derive(Debug, Clone)]
pub struct SoftmaxRegression {
    input_dim: usize,
    class_count: usize,
    params: ModelParams,
}

impl SoftmaxRegression {
    pub fn init(input_dim: usize, class_count: usize, rng: &mut SeededRng) -> Result<Self> {
        if class_count < 2 || input_dim == 0 {
            return Err(CoreError::invalid("need input_dim >= 1 and C >= 2".to_string()));
        }
        let scale = 1.0 / (input_dim as f64).sqrt();
        let w: Vec<f64> = (0..class_count * input_dim).map(|_| rng.normal() * scale).collect();
        let mut params = ModelParams::new();
        params.insert("weight", false, Tensor::new(vec![class_count, input_dim], w)?)?;
        params.insert("bias", true, Tensor::zeros(vec![class_count]))?;
        Ok(SoftmaxRegression { input_dim, class_count, params })
    }
}

impl ClassifierModel for SoftmaxRegression {
    fn params(&self) -> &ModelParams {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    fn class_count(&self) -> usize {
        self.class_count
    }

    fn head_weight_name(&self) -> &str {
        "weight"
    }

    fn forward(&self, x: &Tensor) -> Result<ForwardPass> {
        let flat = flatten_batch(x, self.input_dim)?;
        let logits = linear_forward(&flat, self.params.get("weight").unwrap(), self.params.get("bias").unwrap());
        Ok(ForwardPass { logits, features: flat, cache: Cache::Linear })
    }

    fn backward(&self, x: &Tensor, fwd: &ForwardPass, dlogits: &Tensor) -> Result<ModelParams> {
        check_batch_dims(x, dlogits, self.class_count)?;
        let (dw, db, _) = linear_backward(&fwd.features, self.params.get("weight").unwrap(), dlogits);
        let mut grads = self.params.zeros_like();
        *grads.get_mut("weight").unwrap() = dw;
        *grads.get_mut("bias").unwrap() = db;
        Ok(grads)
    }

    fn backward_from_features(
        &self,
        _x: &Tensor,
        _fwd: &ForwardPass,
        _dfeatures: &Tensor,
    ) -> Result<ModelParams> {
        // Features are the raw inputs; there is nothing upstream of them.
        Ok(self.params.zeros_like())
    }
}

// ---------------------------------------------------------------------------
// One-hidden-layer MLP
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Mlp {
    input_dim: usize,
    hidden: usize,
    class_count: usize,
    params: ModelParams,
}

impl Mlp {
    pub fn init(input_dim: usize, hidden: usize, class_count: usize, rng: &mut SeededRng) -> Result<Self> {
        if class_count < 2 || input_dim == 0 || hidden == 0 {
            return Err(CoreError::invalid("need input_dim, hidden >= 1 and C >= 2".to_string()));
        }
        let s1 = 1.0 / (input_dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        let w1: Vec<f64> = (0..hidden * input_dim).map(|_| rng.normal() * s1).collect();
        let w2: Vec<f64> = (0..class_count * hidden).map(|_| rng.normal() * s2).collect();
        let mut params = ModelParams::new();
        params.insert("layer1.weight", false, Tensor::new(vec![hidden, input_dim], w1)?)?;
        params.insert("layer1.bias", true, Tensor::zeros(vec![hidden]))?;
        params.insert("head.weight", false, Tensor::new(vec![class_count, hidden], w2)?)?;
        params.insert("head.bias", true, Tensor::zeros(vec![class_count]))?;
        Ok(Mlp { input_dim, hidden, class_count, params })
    }
}

impl ClassifierModel for Mlp {
    fn params(&self) -> &ModelParams {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    fn class_count(&self) -> usize {
        self.class_count
    }

    fn head_weight_name(&self) -> &str {
        "head.weight"
    }

    fn forward(&self, x: &Tensor) -> Result<ForwardPass> {
        let flat = flatten_batch(x, self.input_dim)?;
        let pre = linear_forward(
            &flat,
            self.params.get("layer1.weight").unwrap(),
            self.params.get("layer1.bias").unwrap(),
        );
        let mut h = pre.clone();
        for v in h.values_mut() {
            *v = v.max(0.0);
        }
        let logits = linear_forward(
            &h,
            self.params.get("head.weight").unwrap(),
            self.params.get("head.bias").unwrap(),
        );
        Ok(ForwardPass { logits, features: h, cache: Cache::Mlp { hidden_pre: pre } })
    }

    fn backward(&self, x: &Tensor, fwd: &ForwardPass, dlogits: &Tensor) -> Result<ModelParams> {
        check_batch_dims(x, dlogits, self.class_count)?;
        let (dw2, db2, dh) =
            linear_backward(&fwd.features, self.params.get("head.weight").unwrap(), dlogits);
        let mut grads = self.hidden_grads(x, fwd, &dh)?;
        *grads.get_mut("head.weight").unwrap() = dw2;
        *grads.get_mut("head.bias").unwrap() = db2;
        Ok(grads)
    }

    fn backward_from_features(
        &self,
        x: &Tensor,
        fwd: &ForwardPass,
        dfeatures: &Tensor,
    ) -> Result<ModelParams> {
        self.hidden_grads(x, fwd, dfeatures)
    }
}

impl Mlp {
    /// Gradients of layer1 given d(loss)/d(post-ReLU hidden).
    fn hidden_grads(&self, x: &Tensor, fwd: &ForwardPass, dh: &Tensor) -> Result<ModelParams> {
        let Cache::Mlp { hidden_pre } = &fwd.cache else {
            return Err(CoreError::invalid("forward cache is not an MLP cache".to_string()));
        };
        if dh.shape() != [x.shape()[0], self.hidden] {
            return Err(CoreError::shape("hidden gradient shape mismatch".to_string()));
        }
        let flat = flatten_batch(x, self.input_dim)?;
        let mut dpre = dh.clone();
        for (g, &p) in dpre.values_mut().iter_mut().zip(hidden_pre.values()) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }
        let (dw1, db1, _) = linear_backward(&flat, self.params.get("layer1.weight").unwrap(), &dpre);
        let mut grads = self.params.zeros_like();
        *grads.get_mut("layer1.weight").unwrap() = dw1;
        *grads.get_mut("layer1.bias").unwrap() = db1;
        Ok(grads)
    }
}

// ---------------------------------------------------------------------------
// Tiny CNN
// ---------------------------------------------------------------------------

/// One valid 3x3 convolution, ReLU, 2x2 average pooling, dense head.
/// Inputs are single-channel images `[batch, H, W]` with `H, W >= 4`.
#[derive(Debug, Clone)]
pub struct TinyCnn {
    height: usize,
    width: usize,
    filters: usize,
    class_count: usize,
    params: ModelParams,
}

impl TinyCnn {
    pub fn init(
        height: usize,
        width: usize,
        filters: usize,
        class_count: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if height < 4 || width < 4 {
            return Err(CoreError::invalid("TinyCnn needs images of at least 4x4".to_string()));
        }
        if class_count < 2 || filters == 0 {
            return Err(CoreError::invalid("need filters >= 1 and C >= 2".to_string()));
        }
        let feat = filters * ((height - 2) / 2) * ((width - 2) / 2);
        let sc = 1.0 / 3.0; // 3x3 kernel fan-in
        let sh = 1.0 / (feat as f64).sqrt();
        let ker: Vec<f64> = (0..filters * 9).map(|_| rng.normal() * sc).collect();
        let hw: Vec<f64> = (0..class_count * feat).map(|_| rng.normal() * sh).collect();
        let mut params = ModelParams::new();
        params.insert("conv.weight", false, Tensor::new(vec![filters, 3, 3], ker)?)?;
        params.insert("conv.bias", true, Tensor::zeros(vec![filters]))?;
        params.insert("head.weight", false, Tensor::new(vec![class_count, feat], hw)?)?;
        params.insert("head.bias", true, Tensor::zeros(vec![class_count]))?;
        Ok(TinyCnn { height, width, filters, class_count, params })
    }

    fn conv_dims(&self) -> (usize, usize, usize, usize) {
        let ch = self.height - 2;
        let cw = self.width - 2;
        (ch, cw, ch / 2, cw / 2)
    }

    pub fn feature_len(&self) -> usize {
        let (_, _, ph, pw) = self.conv_dims();
        self.filters * ph * pw
    }
}

impl ClassifierModel for TinyCnn {
    fn params(&self) -> &ModelParams {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    fn class_count(&self) -> usize {
        self.class_count
    }

    fn head_weight_name(&self) -> &str {
        "head.weight"
    }

    fn forward(&self, x: &Tensor) -> Result<ForwardPass> {
        if x.shape() != [x.shape()[0], self.height, self.width] {
            return Err(CoreError::shape(format!(
                "TinyCnn expects [batch, {}, {}], got {:?}",
                self.height,
                self.width,
                x.shape()
            )));
        }
        let n = x.shape()[0];
        let (ch, cw, ph, pw) = self.conv_dims();
        let ker = self.params.get("conv.weight").unwrap();
        let cb = self.params.get("conv.bias").unwrap();
        let mut pre = Tensor::zeros(vec![n, self.filters, ch, cw]);
        for b in 0..n {
            let img = x.row(b);
            for k in 0..self.filters {
                let kr = ker.row(k);
                let bias = cb.values()[k];
                for i in 0..ch {
                    for j in 0..cw {
                        let mut acc = bias;
                        for u in 0..3 {
                            for v in 0..3 {
                                acc += kr[u * 3 + v] * img[(i + u) * self.width + (j + v)];
                            }
                        }
                        pre.values_mut()[((b * self.filters + k) * ch + i) * cw + j] = acc;
                    }
                }
            }
        }
        // ReLU then 2x2 average pooling (stride 2, trailing row/col dropped).
        let mut features = Tensor::zeros(vec![n, self.filters * ph * pw]);
        for b in 0..n {
            for k in 0..self.filters {
                for i in 0..ph {
                    for j in 0..pw {
                        let mut acc = 0.0;
                        for du in 0..2 {
                            for dv in 0..2 {
                                let v = pre.values()
                                    [((b * self.filters + k) * ch + 2 * i + du) * cw + 2 * j + dv];
                                acc += v.max(0.0);
                            }
                        }
                        features.values_mut()[b * self.filters * ph * pw + (k * ph + i) * pw + j] =
                            acc / 4.0;
                    }
                }
            }
        }
        let logits = linear_forward(
            &features,
            self.params.get("head.weight").unwrap(),
            self.params.get("head.bias").unwrap(),
        );
        Ok(ForwardPass { logits, features, cache: Cache::Cnn { conv_pre: pre } })
    }

    fn backward(&self, x: &Tensor, fwd: &ForwardPass, dlogits: &Tensor) -> Result<ModelParams> {
        check_batch_dims(x, dlogits, self.class_count)?;
        let (dwh, dbh, dfeat) =
            linear_backward(&fwd.features, self.params.get("head.weight").unwrap(), dlogits);
        let mut grads = self.conv_grads(x, fwd, &dfeat)?;
        *grads.get_mut("head.weight").unwrap() = dwh;
        *grads.get_mut("head.bias").unwrap() = dbh;
        Ok(grads)
    }

    fn backward_from_features(
        &self,
        x: &Tensor,
        fwd: &ForwardPass,
        dfeatures: &Tensor,
    ) -> Result<ModelParams> {
        self.conv_grads(x, fwd, dfeatures)
    }
}

impl TinyCnn {
    fn conv_grads(&self, x: &Tensor, fwd: &ForwardPass, dfeat: &Tensor) -> Result<ModelParams> {
        let Cache::Cnn { conv_pre } = &fwd.cache else {
            return Err(CoreError::invalid("forward cache is not a CNN cache".to_string()));
        };
        let n = x.shape()[0];
        let (ch, cw, ph, pw) = self.conv_dims();
        if dfeat.shape() != [n, self.filters * ph * pw] {
            return Err(CoreError::shape("feature gradient shape mismatch".to_string()));
        }
        let mut grads = self.params.zeros_like();
        let mut dker = Tensor::zeros(vec![self.filters, 3, 3]);
        let mut dcb = Tensor::zeros(vec![self.filters]);
        for b in 0..n {
            let img = x.row(b);
            for k in 0..self.filters {
                for i in 0..ph {
                    for j in 0..pw {
                        let g = dfeat.values()[b * self.filters * ph * pw + (k * ph + i) * pw + j]
                            / 4.0;
                        if g == 0.0 {
                            continue;
                        }
                        for du in 0..2 {
                            for dv in 0..2 {
                                let ci = 2 * i + du;
                                let cj = 2 * j + dv;
                                let pre =
                                    conv_pre.values()[((b * self.filters + k) * ch + ci) * cw + cj];
                                if pre <= 0.0 {
                                    continue;
                                }
                                dcb.values_mut()[k] += g;
                                let dkr = dker.row_mut(k);
                                for u in 0..3 {
                                    for v in 0..3 {
                                        dkr[u * 3 + v] +=
                                            g * img[(ci + u) * self.width + (cj + v)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        *grads.get_mut("conv.weight").unwrap() = dker;
        *grads.get_mut("conv.bias").unwrap() = dcb;
        Ok(grads)
    }
}

// ---------------------------------------------------------------------------
// Runtime model dispatch
// ---------------------------------------------------------------------------

/// Runtime-selected reference model.
#[derive(Debug, Clone)]
pub enum ModelKind {
    SoftmaxRegression(SoftmaxRegression),
    Mlp(Mlp),
    TinyCnn(TinyCnn),
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            ModelKind::SoftmaxRegression($m) => $body,
            ModelKind::Mlp($m) => $body,
            ModelKind::TinyCnn($m) => $body,
        }
    };
}

impl ClassifierModel for ModelKind {
    fn params(&self) -> &ModelParams {
        dispatch!(self, m => m.params())
    }

    fn params_mut(&mut self) -> &mut ModelParams {
        dispatch!(self, m => m.params_mut())
    }

    fn class_count(&self) -> usize {
        dispatch!(self, m => m.class_count())
    }

    fn head_weight_name(&self) -> &str {
        dispatch!(self, m => m.head_weight_name())
    }

    fn forward(&self, x: &Tensor) -> Result<ForwardPass> {
        dispatch!(self, m => m.forward(x))
    }

    fn backward(&self, x: &Tensor, fwd: &ForwardPass, dlogits: &Tensor) -> Result<ModelParams> {
        dispatch!(self, m => m.backward(x, fwd, dlogits))
    }

    fn backward_from_features(
        &self,
        x: &Tensor,
        fwd: &ForwardPass,
        dfeatures: &Tensor,
    ) -> Result<ModelParams> {
        dispatch!(self, m => m.backward_from_features(x, fwd, dfeatures))
    }
}

/// Config-level model description, instantiated against a dataset's
/// per-sample feature shape.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    SoftmaxRegression,
    Mlp { hidden: usize },
    TinyCnn { filters: usize },
}

impl ModelSpec {
    /// Builds and initializes the model for samples of shape `sample_shape`.
    pub fn build(&self, sample_shape: &[usize], class_count: usize, rng: &mut SeededRng) -> Result<ModelKind> {
        let flat: usize = sample_shape.iter().product();
        match self {
            ModelSpec::SoftmaxRegression => {
                Ok(ModelKind::SoftmaxRegression(SoftmaxRegression::init(flat, class_count, rng)?))
            }
            ModelSpec::Mlp { hidden } => {
                Ok(ModelKind::Mlp(Mlp::init(flat, *hidden, class_count, rng)?))
            }
            ModelSpec::TinyCnn { filters } => {
                let [h, w] = sample_shape else {
                    return Err(CoreError::shape(format!(
                        "TinyCnn needs [H, W] samples, dataset has {sample_shape:?}"
                    )));
                };
                Ok(ModelKind::TinyCnn(TinyCnn::init(*h, *w, *filters, class_count, rng)?))
            }
        }
    }
}

/// How to turn a forward pass into class probabilities.
#[derive(Debug, Clone, Copy)]
pub enum HeadMode {
    /// Softmax of the affine head logits.
    Affine,
    /// Softmax of scaled cosine logits against the head weight matrix.
    Cosine { scale: f64 },
}

/// Class probabilities for a batch under the chosen head.
pub fn predict_probs(model: &ModelKind, x: &Tensor, head: HeadMode) -> Result<Tensor> {
    let fwd = model.forward(x)?;
    match head {
        HeadMode::Affine => softmax(&fwd.logits),
        HeadMode::Cosine { scale } => {
            let w = model
                .params()
                .get(model.head_weight_name())
                .ok_or_else(|| CoreError::invalid("missing head weight".to_string()))?;
            softmax(&cosine_logits_lenient(&fwd.features, w, scale)?)
        }
    }
}

/// Max over parameter tensors of the relative disagreement between
/// `analytic` gradients and central finite differences of `loss_value`:
/// `|analytic - cd| / max(|analytic|, |cd|, 1e-12)` with `|.|` the L2 norm
/// over the tensor. The norm form keeps the measure meaningful for entries
/// whose true gradient sits at the finite-difference noise floor.
#[allow(clippy::needless_range_loop)]
pub fn grad_check<M, F>(model: &mut M, analytic: &ModelParams, mut loss_value: F, eps: f64) -> Result<f64>
where
    M: ClassifierModel + ?Sized,
    F: FnMut(&M) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(CoreError::invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let mut worst = 0.0f64;
    for name in names {
        let len = model.params().get(&name).unwrap().len();
        let a = analytic
            .get(&name)
            .ok_or_else(|| CoreError::invalid(format!("analytic gradients missing {name:?}")))?
            .values()
            .to_vec();
        if a.len() != len {
            return Err(CoreError::shape(format!("analytic gradient shape mismatch for {name:?}")));
        }
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut cd_sq = 0.0;
        for idx in 0..len {
            let orig = model.params().get(&name).unwrap().values()[idx];
            model.params_mut().get_mut(&name).unwrap().values_mut()[idx] = orig + eps;
            let plus = loss_value(model)?;
            model.params_mut().get_mut(&name).unwrap().values_mut()[idx] = orig - eps;
            let minus = loss_value(model)?;
            model.params_mut().get_mut(&name).unwrap().values_mut()[idx] = orig;
            let cd = (plus - minus) / (2.0 * eps);
            diff_sq += (a[idx] - cd) * (a[idx] - cd);
            a_sq += a[idx] * a[idx];
            cd_sq += cd * cd;
        }
        if len > 0 {
            let err = diff_sq.sqrt() / a_sq.sqrt().max(cd_sq.sqrt()).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rng: &mut SeededRng, n: usize, dims: &[usize]) -> Tensor {
        let mut shape = vec![n];
        shape.extend_from_slice(dims);
        let total: usize = shape.iter().product();
        Tensor::new(shape, (0..total).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let t = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let p = softmax(&t).unwrap();
        assert_eq!(p.values(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_exponentials() {
        // Oracle: exponentiate and normalize directly.
        let logits = [1.0f64, 2.0, 3.0];
        let exps: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
        let total: f64 = exps.iter().sum();
        let expected: Vec<f64> = exps.iter().map(|e| e / total).collect();

        let t = Tensor::new(vec![1, 3], logits.to_vec()).unwrap();
        let p = softmax(&t).unwrap();
        for (a, b) in p.values().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        // Frozen oracle values.
        assert!((p.values()[0] - 0.09003057317038046).abs() < 1e-12);
        assert!((p.values()[1] - 0.24472847105479767).abs() < 1e-12);
        assert!((p.values()[2] - 0.6652409557748219).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = SeededRng::new(5);
        for _ in 0..20 {
            let vals: Vec<f64> = (0..4).map(|_| rng.uniform_in(-50.0, 50.0)).collect();
            let shifted: Vec<f64> = vals.iter().map(|v| v + 17.25).collect();
            let a = softmax(&Tensor::new(vec![1, 4], vals).unwrap()).unwrap();
            let b = softmax(&Tensor::new(vec![1, 4], shifted).unwrap()).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_on_wide_range() {
        let mut rng = SeededRng::new(9);
        for _ in 0..200 {
            let vals: Vec<f64> = (0..6).map(|_| rng.uniform_in(-50.0, 50.0)).collect();
            let p = softmax(&Tensor::new(vec![2, 3], vals).unwrap()).unwrap();
            for i in 0..2 {
                let s: f64 = p.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(p.row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn softmax_rejects_non_finite_and_single_class() {
        assert!(softmax(&Tensor::zeros(vec![1, 1])).is_err());
        let mut t = Tensor::zeros(vec![1, 2]);
        t.values_mut()[0] = f64::NAN;
        assert!(softmax(&t).is_err());
    }

    #[test]
    fn zero_dlogits_gives_zero_gradients() {
        let mut rng = SeededRng::new(1);
        let x = batch(&mut rng, 3, &[4]);
        for model in [
            ModelSpec::SoftmaxRegression.build(&[4], 3, &mut rng).unwrap(),
            ModelSpec::Mlp { hidden: 5 }.build(&[4], 3, &mut rng).unwrap(),
        ] {
            let fwd = model.forward(&x).unwrap();
            let grads = model.backward(&x, &fwd, &Tensor::zeros(vec![3, 3])).unwrap();
            assert_eq!(grads.l2_norm(), 0.0);
        }
    }

    #[test]
    fn softmax_regression_weight_gradient_closed_form() {
        // Single sample: d(sum(logits * dlogits))/dW = dlogits^T x.
        let mut rng = SeededRng::new(2);
        let model = ModelSpec::SoftmaxRegression.build(&[3], 2, &mut rng).unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let dl = Tensor::new(vec![1, 2], vec![0.7, -0.2]).unwrap();
        let fwd = model.forward(&x).unwrap();
        let grads = model.backward(&x, &fwd, &dl).unwrap();
        let dw = grads.get("weight").unwrap();
        for c in 0..2 {
            for d in 0..3 {
                let expected = dl.values()[c] * x.values()[d];
                assert!((dw.row(c)[d] - expected).abs() < 1e-15);
            }
        }
        let db = grads.get("bias").unwrap();
        assert!((db.values()[0] - 0.7).abs() < 1e-15);
        assert!((db.values()[1] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = SeededRng::new(3);
        let model = ModelSpec::Mlp { hidden: 4 }.build(&[4], 3, &mut rng).unwrap();
        let x = batch(&mut rng, 2, &[4]);
        let fwd = model.forward(&x).unwrap();
        assert!(model.backward(&x, &fwd, &Tensor::zeros(vec![3, 3])).is_err());
        assert!(model.backward(&x, &fwd, &Tensor::zeros(vec![2, 4])).is_err());
    }

    /// Every reference model's logits VJP against central differences.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeededRng::new(7);
        let specs: Vec<(ModelSpec, Vec<usize>)> = vec![
            (ModelSpec::SoftmaxRegression, vec![5]),
            (ModelSpec::Mlp { hidden: 6 }, vec![5]),
            (ModelSpec::TinyCnn { filters: 2 }, vec![6, 6]),
        ];
        for (spec, dims) in specs {
            let mut model = spec.build(&dims, 3, &mut rng).unwrap();
            let x = batch(&mut rng, 4, &dims);
            let dl = batch(&mut rng, 4, &[3]);
            let fwd = model.forward(&x).unwrap();
            let analytic = model.backward(&x, &fwd, &dl).unwrap();
            let err = grad_check(
                &mut model,
                &analytic,
                |m| {
                    let f = m.forward(&x)?;
                    Ok(f.logits.values().iter().zip(dl.values()).map(|(a, b)| a * b).sum())
                },
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{spec:?} vjp error {err}");
        }
    }

    #[test]
    fn grad_check_zero_parameter_model_returns_zero() {
        struct Degenerate {
            params: ModelParams,
        }
        impl ClassifierModel for Degenerate {
            fn params(&self) -> &ModelParams {
                &self.params
            }
            fn params_mut(&mut self) -> &mut ModelParams {
                &mut self.params
            }
            fn class_count(&self) -> usize {
                2
            }
            fn head_weight_name(&self) -> &str {
                ""
            }
            fn forward(&self, x: &Tensor) -> Result<ForwardPass> {
                Ok(ForwardPass {
                    logits: Tensor::zeros(vec![x.shape()[0], 2]),
                    features: Tensor::zeros(vec![x.shape()[0], 1]),
                    cache: Cache::Linear,
                })
            }
            fn backward(&self, _: &Tensor, _: &ForwardPass, _: &Tensor) -> Result<ModelParams> {
                Ok(ModelParams::new())
            }
            fn backward_from_features(
                &self,
                _: &Tensor,
                _: &ForwardPass,
                _: &Tensor,
            ) -> Result<ModelParams> {
                Ok(ModelParams::new())
            }
        }
        let mut m = Degenerate { params: ModelParams::new() };
        let err = grad_check(&mut m, &ModelParams::new(), |_| Ok(1.0), 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_rejects_out_of_range_eps() {
        let mut rng = SeededRng::new(1);
        let mut model = ModelSpec::SoftmaxRegression.build(&[2], 2, &mut rng).unwrap();
        let analytic = model.params().zeros_like();
        assert!(grad_check(&mut model, &analytic, |_| Ok(0.0), 1e-2).is_err());
        assert!(grad_check(&mut model, &analytic, |_| Ok(0.0), 1e-8).is_err());
    }

    #[test]
    fn cosine_logits_normalization_invariance() {
        let mut rng = SeededRng::new(4);
        let f = batch(&mut rng, 2, &[3]);
        let w = batch(&mut rng, 4, &[3]);
        let z1 = cosine_logits(&f, &w, 2.0).unwrap();
        let mut f2 = f.clone();
        for v in f2.values_mut() {
            *v *= 7.5;
        }
        let z2 = cosine_logits(&f2, &w, 2.0).unwrap();
        for (a, b) in z1.values().iter().zip(z2.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(z1.values().iter().all(|v| v.abs() <= 2.0 + 1e-12));
    }

    #[test]
    fn cosine_logits_rejects_zero_norm() {
        let f = Tensor::zeros(vec![1, 3]);
        let w = Tensor::new(vec![2, 3], vec![1., 0., 0., 0., 1., 0.]).unwrap();
        assert!(cosine_logits(&f, &w, 1.0).is_err());
    }

    #[test]
    fn cosine_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(12);
        let f = batch(&mut rng, 3, &[4]);
        let w = batch(&mut rng, 2, &[4]);
        let dz = batch(&mut rng, 3, &[2]);
        let scale = 3.0;
        let (df, dw) = cosine_logits_backward(&f, &w, scale, &dz).unwrap();
        let eps = 1e-6;
        let value = |f: &Tensor, w: &Tensor| -> f64 {
            let z = cosine_logits(f, w, scale).unwrap();
            z.values().iter().zip(dz.values()).map(|(a, b)| a * b).sum()
        };
        for idx in 0..f.len() {
            let mut fp = f.clone();
            fp.values_mut()[idx] += eps;
            let mut fm = f.clone();
            fm.values_mut()[idx] -= eps;
            let cd = (value(&fp, &w) - value(&fm, &w)) / (2.0 * eps);
            assert!((df.values()[idx] - cd).abs() < 1e-7);
        }
        for idx in 0..w.len() {
            let mut wp = w.clone();
            wp.values_mut()[idx] += eps;
            let mut wm = w.clone();
            wm.values_mut()[idx] -= eps;
            let cd = (value(&f, &wp) - value(&f, &wm)) / (2.0 * eps);
            assert!((dw.values()[idx] - cd).abs() < 1e-7);
        }
    }
}
