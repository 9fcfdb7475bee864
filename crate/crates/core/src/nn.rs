//! Small dense-network toolkit with hand-written backward passes, in f64.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Visits named flat parameter buffers in a fixed order.
///
/// Gradients use the same type as the model they belong to, so the visit order
/// of a model and of its gradient buffer line up one to one.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, p| out.extend_from_slice(p));
        out
    }

    fn fill_zero(&mut self) {
        self.visit_mut(&mut |_, p| p.fill(0.0));
    }
}

/// Affine map `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Weights drawn from `N(0, 1/input)`, zero bias.
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / input as f64).sqrt()).expect("positive std");
        Self {
            weight: Array2::from_shape_simple_fn((output, input), || normal.sample(rng)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.output_dim())
    }

    /// Rows of `x` are inputs: returns `x W^T + b`.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, grad: &mut Linear) -> Array2<f64> {
        general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("weight", self.weight.as_slice().expect("standard layout"));
        f("bias", self.bias.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("weight", self.weight.as_slice_mut().expect("standard layout"));
        f("bias", self.bias.as_slice_mut().expect("standard layout"));
    }
}

/// Stack of affine layers with ReLU between consecutive layers (none after the last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Inputs of every layer from a forward pass, needed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`.
    pub fn init<R: Rng>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        Self {
            layers: widths
                .windows(2)
                .map(|w| Linear::init(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Linear::zeros_like).collect(),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(h.view());
            if i + 1 < self.layers.len() {
                y.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(h);
            h = y;
        }
        (h, MlpCache { inputs })
    }

    /// Gradient with respect to the input only; parameter gradients are skipped.
    pub fn backward_input(&self, cache: &MlpCache, dout: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut d = dout.to_owned();
        for i in (0..self.layers.len()).rev() {
            d = d.dot(&self.layers[i].weight);
            if i > 0 {
                ndarray::Zip::from(&mut d)
                    .and(&cache.inputs[i])
                    .for_each(|g, &a| {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
        }
        d
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward(x).0
    }

    pub fn backward(&self, cache: &MlpCache, dout: ArrayView2<'_, f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = dout.to_owned();
        for i in (0..self.layers.len()).rev() {
            let x = &cache.inputs[i];
            d = self.layers[i].backward(x.view(), d.view(), &mut grad.layers[i]);
            if i > 0 {
                // x is the ReLU output of layer i-1; its derivative is 1 where x > 0.
                ndarray::Zip::from(&mut d).and(x).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
        }
        d
    }
}

impl Params for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for l in &self.layers {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

/// Row-wise softmax.
pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Stochastic gradient descent with momentum.
    #[default]
    Sgd,
    Adam,
}

/// First-order optimizer over any [`Params`] model.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    beta2: f64,
    eps: f64,
    step: u32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config("learning rate must be > 0"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        Ok(Self {
            kind,
            lr,
            momentum,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P) {
        let mut g: Vec<Vec<f64>> = Vec::new();
        grads.visit(&mut |_, p| g.push(p.to_vec()));
        if self.first.is_empty() {
            self.first = g.iter().map(|v| vec![0.0; v.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let (lr, mu, b2, eps, t) = (self.lr, self.momentum, self.beta2, self.eps, self.step);
        let kind = self.kind;
        let mut idx = 0;
        let first = &mut self.first;
        let second = &mut self.second;
        params.visit_mut(&mut |_, p| {
            let (gi, m, v) = (&g[idx], &mut first[idx], &mut second[idx]);
            match kind {
                OptimizerKind::Sgd => {
                    for ((w, gr), m) in p.iter_mut().zip(gi).zip(m.iter_mut()) {
                        *m = mu * *m + gr;
                        *w -= lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let beta1 = if mu > 0.0 { mu } else { 0.9 };
                    let c1 = 1.0 - beta1.powi(t as i32);
                    let c2 = 1.0 - b2.powi(t as i32);
                    for (((w, gr), m), v) in p.iter_mut().zip(gi).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * gr;
                        *v = b2 * *v + (1.0 - b2) * gr * gr;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
            idx += 1;
        });
    }
}

/// Relative error used by gradient checks: `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::substream;
    use ndarray::array;

    #[test]
    fn linear_forward() {
        let l = Linear {
            weight: array![[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]],
            bias: array![0.5, 0.0, -1.0],
        };
        let y = l.forward(array![[1.0, 1.0]].view());
        assert_eq!(y, array![[3.5, -1.0, 2.5]]);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = substream(3, "nn-test");
        let mlp = Mlp::init(&[4, 5, 3], &mut rng);
        let x = Array2::from_shape_fn((2, 4), |(i, j)| (i as f64 - j as f64) * 0.37 + 0.1);
        let target = Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        // L = 0.5 * ||f(x) - target||^2
        let loss = |m: &Mlp| {
            let y = m.predict(x.view());
            0.5 * (&y - &target).mapv(|v| v * v).sum()
        };
        let (y, cache) = mlp.forward(x.view());
        let mut grad = mlp.zeros_like();
        mlp.backward(&cache, (&y - &target).view(), &mut grad);
        let analytic = grad.flatten();
        let mut probe = mlp.clone();
        let n = probe.num_params();
        let h = 1e-6;
        for k in 0..n {
            let at = |delta: f64, m: &mut Mlp| {
                let mut idx = 0;
                m.visit_mut(&mut |_, p| {
                    for v in p.iter_mut() {
                        if idx == k {
                            *v += delta;
                        }
                        idx += 1;
                    }
                });
            };
            at(h, &mut probe);
            let up = loss(&probe);
            at(-2.0 * h, &mut probe);
            let down = loss(&probe);
            at(h, &mut probe);
            let numeric = (up - down) / (2.0 * h);
            assert!(
                relative_error(analytic[k], numeric, 1e-7) < 1e-4,
                "param {k}: {} vs {numeric}",
                analytic[k]
            );
        }
    }

    #[test]
    fn softmax_rows_normalize() {
        let p = softmax_rows(array![[1000.0, 1000.0, 0.0], [-3.0, 2.0, 0.5]].view());
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((p[[0, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sgd_descends_quadratic() {
        let mut l = Linear {
            weight: array![[2.0]],
            bias: array![-1.0],
        };
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.5).unwrap();
        for _ in 0..200 {
            let g = Linear {
                weight: l.weight.clone(),
                bias: l.bias.clone(),
            };
            opt.step(&mut l, &g);
        }
        assert!(l.weight[[0, 0]].abs() < 1e-6 && l.bias[0].abs() < 1e-6);
        assert!(Optimizer::new(OptimizerKind::Adam, 0.0, 0.9).is_err());
    }
}
