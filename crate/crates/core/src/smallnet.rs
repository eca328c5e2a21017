//! A small fully connected ReLU classifier with manual backpropagation.
//!
//! Parameters live in one flat `f64` vector laid out layer by layer as
//! `[W_0, b_0, W_1, b_1, ...]`, each `W_l` row-major with shape
//! `(outputs, inputs)`. Forward and backward passes take the parameters as a
//! plain slice, so fake-quantized or bit-flipped copies can be evaluated
//! without touching the model.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fixedpoint::GroupRange;

/// Layer sizes of an MLP, input first, e.g. `[784, 256, 128, 10]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    dims: Vec<usize>,
}

impl Architecture {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("an architecture needs an input and an output size"));
        }
        if dims.contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        if dims[dims.len() - 1] < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn inputs(&self) -> usize {
        self.dims[0]
    }

    pub fn classes(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// `(inputs, outputs)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.dims[l], self.dims[l + 1])
    }

    /// Parameter ranges `(weights, biases)` of layer `l`.
    pub fn layer_ranges(&self, l: usize) -> (Range<usize>, Range<usize>) {
        let mut start = 0;
        for k in 0..l {
            let (i, o) = self.layer_shape(k);
            start += i * o + o;
        }
        let (i, o) = self.layer_shape(l);
        (start..start + i * o, start + i * o..start + i * o + o)
    }

    pub fn num_params(&self) -> usize {
        (0..self.num_layers())
            .map(|l| {
                let (i, o) = self.layer_shape(l);
                i * o + o
            })
            .sum()
    }

    /// Quantization groups: every layer's weights and biases separately.
    pub fn groups(&self) -> Vec<GroupRange> {
        (0..self.num_layers())
            .flat_map(|l| {
                let (w, b) = self.layer_ranges(l);
                [w, b]
            })
            .collect()
    }

    fn check(&self, params: &[f64], inputs: &ArrayView2<f64>) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                what: "parameter count",
                expected: self.num_params(),
                found: params.len(),
            });
        }
        if inputs.ncols() != self.inputs() {
            return Err(Error::DimensionMismatch {
                what: "input dimension",
                expected: self.inputs(),
                found: inputs.ncols(),
            });
        }
        Ok(())
    }

    fn layer_views<'a>(&self, params: &'a [f64], l: usize) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let (i, o) = self.layer_shape(l);
        let (wr, br) = self.layer_ranges(l);
        let w = ArrayView2::from_shape((o, i), &params[wr]).expect("layer shape");
        let b = ArrayView1::from(&params[br]);
        (w, b)
    }

    /// Logits for a batch of row-vector inputs.
    pub fn forward(&self, params: &[f64], inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(params, &inputs)?;
        let last = self.num_layers() - 1;
        let mut act: Option<Array2<f64>> = None;
        for l in 0..=last {
            let (w, b) = self.layer_views(params, l);
            let x = act.as_ref().map(|a| a.view()).unwrap_or(inputs);
            let mut z = x.dot(&w.t());
            z += &b;
            if l != last {
                z.mapv_inplace(relu);
            }
            act = Some(z);
        }
        Ok(act.expect("at least one layer"))
    }

    /// Mean loss and its gradient with respect to `params` over a batch.
    pub fn backward(
        &self,
        params: &[f64],
        inputs: ArrayView2<f64>,
        labels: &[u8],
        loss: &LossSpec,
    ) -> Result<(f64, Vec<f64>)> {
        self.check(params, &inputs)?;
        let batch = inputs.nrows();
        if labels.len() != batch {
            return Err(Error::DimensionMismatch {
                what: "label count",
                expected: batch,
                found: labels.len(),
            });
        }
        if batch == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let classes = self.classes();
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= classes) {
            return Err(Error::invalid(format!("label {bad} outside {classes} classes")));
        }
        loss.validate(classes)?;

        let layers = self.num_layers();
        // Post-activation outputs of every layer; the last entry holds logits.
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(layers);
        for l in 0..layers {
            let (w, b) = self.layer_views(params, l);
            let x = if l == 0 { inputs } else { acts[l - 1].view() };
            let mut z = x.dot(&w.t());
            z += &b;
            if l != layers - 1 {
                z.mapv_inplace(relu);
            }
            acts.push(z);
        }

        let logits = acts.pop().expect("logits");
        let (total, mut delta) = softmax_loss_grad(&logits, labels, loss);
        let scale = 1.0 / batch as f64;
        delta.mapv_inplace(|d| d * scale);

        let mut grad = vec![0.0; params.len()];
        for l in (0..layers).rev() {
            let x = if l == 0 { inputs } else { acts[l - 1].view() };
            let (wr, br) = self.layer_ranges(l);
            let (i, o) = self.layer_shape(l);
            {
                let mut gw = ndarray::ArrayViewMut2::from_shape((o, i), &mut grad[wr]).expect("layer shape");
                gw.assign(&delta.t().dot(&x));
            }
            for (g, s) in grad[br].iter_mut().zip(delta.sum_axis(Axis(0)).iter()) {
                *g = *s;
            }
            if l > 0 {
                let (w, _) = self.layer_views(params, l);
                let mut back = delta.dot(&w);
                ndarray::Zip::from(&mut back).and(&acts[l - 1]).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
        }
        Ok((total * scale, grad))
    }
}

#[inline(always)]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Summed loss over the batch and `softmax - target` per row.
///
/// With targets summing to one, `-sum_c t_c log p_c = lse(z) - sum_c t_c z_c`.
fn softmax_loss_grad(logits: &Array2<f64>, labels: &[u8], loss: &LossSpec) -> (f64, Array2<f64>) {
    let (on, off) = loss.targets(logits.ncols());
    let mut delta = logits.clone();
    let mut total = 0.0;
    for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut dot = 0.0;
        let mut sum = 0.0;
        for (c, v) in row.iter_mut().enumerate() {
            let t = if c == y as usize { on } else { off };
            dot += t * *v;
            *v = (*v - max).exp();
            sum += *v;
        }
        total += max + sum.ln() - dot;
        for (c, v) in row.iter_mut().enumerate() {
            let t = if c == y as usize { on } else { off };
            *v = *v / sum - t;
        }
    }
    (total, delta)
}

/// Training loss: plain or label-smoothed cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LossSpec {
    #[default]
    CrossEntropy,
    /// Target probability of the true class; the rest is spread evenly.
    LabelSmoothed { smooth_target: f64 },
}

impl LossSpec {
    pub const DEFAULT_SMOOTH_TARGET: f64 = 0.9;

    pub fn validate(&self, classes: usize) -> Result<()> {
        if let LossSpec::LabelSmoothed { smooth_target } = *self {
            if !(smooth_target > 1.0 / classes as f64 && smooth_target <= 1.0) {
                return Err(Error::invalid(format!(
                    "smoothing target {smooth_target} must lie in (1/{classes}, 1]"
                )));
            }
        }
        Ok(())
    }

    /// `(true class target, other class target)`.
    pub fn targets(&self, classes: usize) -> (f64, f64) {
        match *self {
            LossSpec::CrossEntropy => (1.0, 0.0),
            LossSpec::LabelSmoothed { smooth_target } => (smooth_target, (1.0 - smooth_target) / (classes - 1) as f64),
        }
    }
}

/// Master (float) parameters of an MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    params: Vec<f64>,
}

impl Model {
    /// He-style uniform initialization `U(-sqrt(6/fan_in), sqrt(6/fan_in))`
    /// for weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; arch.num_params()];
        for l in 0..arch.num_layers() {
            let (fan_in, _) = arch.layer_shape(l);
            let bound = (6.0 / fan_in as f64).sqrt();
            let (wr, _) = arch.layer_ranges(l);
            for w in &mut params[wr] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Self { arch, params }
    }

    pub fn zeros(arch: Architecture) -> Self {
        let params = vec![0.0; arch.num_params()];
        Self { arch, params }
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.num_params() {
            return Err(Error::DimensionMismatch {
                what: "parameter count",
                expected: arch.num_params(),
                found: params.len(),
            });
        }
        if params.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("model parameters must be finite"));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    pub fn groups(&self) -> Vec<GroupRange> {
        self.arch.groups()
    }

    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.arch.forward(&self.params, inputs)
    }

    pub fn clip(&mut self, wmax: f64) {
        clip_weights(&mut self.params, wmax);
    }
}

/// Project every parameter onto `[-wmax, wmax]`.
pub fn clip_weights(params: &mut [f64], wmax: f64) {
    debug_assert!(wmax > 0.0);
    for w in params {
        *w = w.clamp(-wmax, wmax);
    }
}

/// SGD with classical momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    buffer: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(num_params: usize, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::invalid(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(Self {
            momentum,
            weight_decay,
            buffer: vec![0.0; num_params],
        })
    }

    /// `g += wd * w; buf = momentum * buf + g; w -= lr * buf`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.buffer.len() || grad.len() != self.buffer.len() {
            return Err(Error::DimensionMismatch {
                what: "optimizer parameter count",
                expected: self.buffer.len(),
                found: if params.len() != self.buffer.len() {
                    params.len()
                } else {
                    grad.len()
                },
            });
        }
        for ((w, &g), b) in params.iter_mut().zip(grad).zip(&mut self.buffer) {
            let g = g + self.weight_decay * *w;
            *b = self.momentum * *b + g;
            *w -= lr * *b;
        }
        Ok(())
    }
}

/// Stack the rows `indices` of a row-major sample matrix into a batch.
pub fn gather_rows(data: ArrayView2<f64>, indices: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), data.ncols()));
    for (mut dst, &i) in out.rows_mut().into_iter().zip(indices) {
        dst.assign(&data.slice(s![i, ..]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn arch(d: &[usize]) -> Architecture {
        Architecture::new(d.to_vec()).unwrap()
    }

    #[test]
    fn layout_and_groups() {
        let a = arch(&[3, 4, 2]);
        assert_eq!(a.num_params(), 3 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(a.groups(), vec![0..12, 12..16, 16..24, 24..26]);
        assert!(Architecture::new(vec![3]).is_err());
        assert!(Architecture::new(vec![3, 0, 2]).is_err());
    }

    #[test]
    fn identity_layer_passes_inputs_through() {
        let a = arch(&[3, 3]);
        let mut p = vec![0.0; a.num_params()];
        for i in 0..3 {
            p[i * 3 + i] = 1.0;
        }
        let x = array![[0.5, -1.0, 2.0], [1.0, 2.0, 3.0]];
        assert_eq!(a.forward(&p, x.view()).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_uniform_loss() {
        let a = arch(&[4, 10]);
        let p = vec![0.0; a.num_params()];
        let x = array![[0.1, 0.2, 0.3, 0.4]];
        let (loss, _) = a.backward(&p, x.view(), &[3], &LossSpec::CrossEntropy).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let a = arch(&[4, 3]);
        let p = vec![0.0; a.num_params()];
        let x = Array2::<f64>::zeros((2, 5));
        assert!(a.forward(&p, x.view()).is_err());
        assert!(a.forward(&p[1..], Array2::<f64>::zeros((2, 4)).view()).is_err());
        let x = Array2::<f64>::zeros((2, 4));
        assert!(a.backward(&p, x.view(), &[0], &LossSpec::CrossEntropy).is_err());
        assert!(a.backward(&p, x.view(), &[0, 3], &LossSpec::CrossEntropy).is_err());
    }

    #[test]
    fn smoothing_of_one_equals_cross_entropy() {
        let a = arch(&[5, 6, 3]);
        let m = Model::init(a.clone(), 3);
        let x = Array2::from_shape_fn((4, 5), |(i, j)| ((i * 5 + j) as f64 * 0.37).sin());
        let y = [0u8, 2, 1, 2];
        let ce = a.backward(m.params(), x.view(), &y, &LossSpec::CrossEntropy).unwrap();
        let ls = a
            .backward(
                m.params(),
                x.view(),
                &y,
                &LossSpec::LabelSmoothed { smooth_target: 1.0 },
            )
            .unwrap();
        assert_eq!(ce.0, ls.0);
        assert_eq!(ce.1, ls.1);
    }

    #[test]
    fn smoothing_target_validation() {
        assert!(LossSpec::LabelSmoothed { smooth_target: 0.05 }.validate(10).is_err());
        assert!(LossSpec::LabelSmoothed { smooth_target: 1.01 }.validate(10).is_err());
        assert!(LossSpec::LabelSmoothed { smooth_target: 0.9 }.validate(10).is_ok());
        let (on, off) = LossSpec::LabelSmoothed { smooth_target: 0.9 }.targets(10);
        assert_eq!(on, 0.9);
        assert!((off - 0.1 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn saturated_optimum_has_vanishing_gradient() {
        // Two separable points, logits pushed far apart in the right direction.
        let a = arch(&[2, 2]);
        let p = vec![50.0, 0.0, 0.0, 50.0, 0.0, 0.0];
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let (loss, g) = a.backward(&p, x.view(), &[0, 1], &LossSpec::CrossEntropy).unwrap();
        assert!(loss < 1e-20);
        assert!(g.iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn clipping() {
        let mut p = vec![0.5, -0.05, -3.0, 0.1];
        clip_weights(&mut p, 0.1);
        assert_eq!(p, vec![0.1, -0.05, -0.1, 0.1]);
        let before = p.clone();
        clip_weights(&mut p, 0.1);
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_recursion() {
        let g = [1.0, -2.0];
        let mut w = vec![0.0, 0.0];
        let mut opt = SgdMomentum::new(2, 0.9, 0.0).unwrap();
        opt.step(&mut w, &g, 0.1).unwrap();
        opt.step(&mut w, &g, 0.1).unwrap();
        assert!((w[0] + 0.1 * 2.9).abs() < 1e-12);
        assert!((w[1] - 0.2 * 2.9).abs() < 1e-12);

        let mut w = vec![1.0, 1.0];
        let mut plain = SgdMomentum::new(2, 0.0, 0.0).unwrap();
        plain.step(&mut w, &g, 0.5).unwrap();
        assert_eq!(w, vec![0.5, 2.0]);

        let mut still = SgdMomentum::new(2, 0.9, 5e-4).unwrap();
        let mut w = vec![0.3, -0.7];
        still.step(&mut w, &g, 0.0).unwrap();
        assert_eq!(w, vec![0.3, -0.7]);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Model::init(arch(&[8, 16, 4]), 11);
        let x = Array2::from_shape_fn((5, 8), |(i, j)| (i as f64 - j as f64) * 0.1);
        assert_eq!(m.forward(x.view()).unwrap(), m.forward(x.view()).unwrap());
    }
}
