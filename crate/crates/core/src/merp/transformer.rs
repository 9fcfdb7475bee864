//! Contextual transformer: learned positions plus a stack of residual
//! multi-head self-attention layers over the video events of one document.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::{softmax_rows, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub output: Array2<f64>,
}

impl AttentionLayer {
    fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        let std = (1.0 / d as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let small = Normal::new(0.0, 0.1 * std).expect("positive std");
        let mut draw = |n: &Normal<f64>| Array2::from_shape_simple_fn((d, d), || n.sample(rng));
        Self {
            query: draw(&normal),
            key: draw(&normal),
            value: draw(&normal),
            output: draw(&small),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            query: Array2::zeros((d, d)),
            key: Array2::zeros((d, d)),
            value: Array2::zeros((d, d)),
            output: Array2::zeros((d, d)),
        }
    }
}

struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    mixed: Array2<f64>,
}

pub struct CtCache {
    len: usize,
    layers: Vec<LayerCache>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextualTransformer {
    pub heads: usize,
    /// `max_len x d` learned positional embeddings, added to the inputs.
    pub positions: Array2<f64>,
    pub layers: Vec<AttentionLayer>,
}

impl ContextualTransformer {
    pub fn init<R: Rng>(d: usize, layers: usize, heads: usize, max_len: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "heads must divide the embedding width");
        let pos = Normal::new(0.0, 0.02).expect("positive std");
        let positions = Array2::from_shape_simple_fn((max_len, d), || pos.sample(rng));
        Self {
            heads,
            positions,
            layers: (0..layers).map(|_| AttentionLayer::init(d, rng)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.dim();
        Self {
            heads: self.heads,
            positions: Array2::zeros(self.positions.raw_dim()),
            layers: self.layers.iter().map(|_| AttentionLayer::zeros(d)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    pub fn max_len(&self) -> usize {
        self.positions.nrows()
    }

    /// Rows of `x` are events in temporal order; `x.nrows()` must not exceed `max_len`.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, CtCache) {
        let n = x.nrows();
        assert!(n <= self.max_len(), "sequence longer than positional table");
        let d = self.dim();
        let dk = d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut h = &x + &self.positions.slice(s![..n, ..]);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let q = h.dot(&layer.query.t());
            let k = h.dot(&layer.key.t());
            let v = h.dot(&layer.value.t());
            let mut mixed = Array2::zeros((n, d));
            let mut attn = Vec::with_capacity(self.heads);
            for head in 0..self.heads {
                let cols = s![.., head * dk..(head + 1) * dk];
                let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                let a = softmax_rows(scores.view());
                mixed.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
                attn.push(a);
            }
            let out = &h + &mixed.dot(&layer.output.t());
            caches.push(LayerCache {
                input: h,
                q,
                k,
                v,
                attn,
                mixed,
            });
            h = out;
        }
        (h, CtCache { len: n, layers: caches })
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, cache: &CtCache, dy: ArrayView2<'_, f64>, grad: &mut ContextualTransformer) -> Array2<f64> {
        let d = self.dim();
        let dk = d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let n = cache.len;
        let mut dh = dy.to_owned();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let c = &cache.layers[li];
            let g = &mut grad.layers[li];
            g.output += &dh.t().dot(&c.mixed);
            let dmixed = dh.dot(&layer.output);
            let mut dq = Array2::zeros((n, d));
            let mut dk_ = Array2::zeros((n, d));
            let mut dv = Array2::zeros((n, d));
            for head in 0..self.heads {
                let cols = s![.., head * dk..(head + 1) * dk];
                let a = &c.attn[head];
                let dm = dmixed.slice(cols);
                let da = dm.dot(&c.v.slice(cols).t());
                dv.slice_mut(cols).assign(&a.t().dot(&dm));
                let row_dot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ds = (a * &(&da - &row_dot)) * scale;
                dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
                dk_.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
            }
            g.query += &dq.t().dot(&c.input);
            g.key += &dk_.t().dot(&c.input);
            g.value += &dv.t().dot(&c.input);
            dh = dh + dq.dot(&layer.query) + dk_.dot(&layer.key) + dv.dot(&layer.value);
        }
        let mut dpos = grad.positions.slice_mut(s![..n, ..]);
        dpos += &dh;
        dh
    }
}

impl Params for ContextualTransformer {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("positions", self.positions.as_slice().expect("standard layout"));
        for l in &self.layers {
            f("query", l.query.as_slice().expect("standard layout"));
            f("key", l.key.as_slice().expect("standard layout"));
            f("value", l.value.as_slice().expect("standard layout"));
            f("output", l.output.as_slice().expect("standard layout"));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("positions", self.positions.as_slice_mut().expect("standard layout"));
        for l in &mut self.layers {
            f("query", l.query.as_slice_mut().expect("standard layout"));
            f("key", l.key.as_slice_mut().expect("standard layout"));
            f("value", l.value.as_slice_mut().expect("standard layout"));
            f("output", l.output.as_slice_mut().expect("standard layout"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::relative_error;
    use crate::seeding::substream;

    #[test]
    fn single_token_takes_value_path() {
        let mut rng = substream(1, "ct");
        let ct = ContextualTransformer::init(4, 1, 2, 77, &mut rng);
        let x = Array2::from_shape_vec((1, 4), vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let (y, _) = ct.forward(x.view());
        let h = &x + &ct.positions.slice(s![..1, ..]);
        let l = &ct.layers[0];
        let expected = &h + &h.dot(&l.value.t()).dot(&l.output.t());
        for (a, b) in y.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = substream(2, "ct-grad");
        let mut ct = ContextualTransformer::init(8, 2, 2, 5, &mut rng);
        // Larger output weights so the attention path is not negligible.
        for l in &mut ct.layers {
            l.output.mapv_inplace(|v| v * 10.0);
        }
        let x = Array2::from_shape_fn((3, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
        let target = Array2::from_shape_fn((3, 8), |(i, j)| ((i + 2 * j) as f64 * 0.11).cos());
        let loss = |m: &ContextualTransformer| {
            let (y, _) = m.forward(x.view());
            0.5 * (&y - &target).mapv(|v| v * v).sum()
        };
        let (y, cache) = ct.forward(x.view());
        let mut grad = ct.zeros_like();
        ct.backward(&cache, (&y - &target).view(), &mut grad);
        let analytic = grad.flatten();
        let mut probe = ct.clone();
        let h = 1e-6;
        for k in 0..probe.num_params() {
            let shift = |m: &mut ContextualTransformer, delta: f64| {
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
            shift(&mut probe, h);
            let up = loss(&probe);
            shift(&mut probe, -2.0 * h);
            let down = loss(&probe);
            shift(&mut probe, h);
            let numeric = (up - down) / (2.0 * h);
            assert!(
                relative_error(analytic[k], numeric, 1e-7) < 1e-4,
                "param {k}: {} vs {numeric}",
                analytic[k]
            );
        }
    }
}
