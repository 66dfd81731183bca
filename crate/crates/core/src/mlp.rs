//! Flat-parameter multilayer perceptron with batched forward and reverse passes.
//!
//! Each layer stores its weight matrix output-major (`fan_out × fan_in`)
//! followed by its bias. All parameters of a network live in one `Vec<f64>`,
//! which lets a hypernetwork emit a complete parameter vector and lets the
//! influence code address any contiguous subset.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::{ensure_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpLayout {
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    total: usize,
}

/// Activations retained for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    pub acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("non-empty cache")
    }

    /// Input to the final layer.
    pub fn penultimate(&self) -> &[f64] {
        &self.acts[self.acts.len() - 2]
    }
}

/// `c = alpha * a·b + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len());
        assert!(last(k, n, rsb, csb) < b.len());
    }
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: every index touched by the kernel is bounded by the asserts
    // above, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

impl MlpLayout {
    pub fn new(layers: Vec<LayerShape>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("layer list"));
        }
        for pair in layers.windows(2) {
            ensure_dim("layer width", pair[0].fan_out, pair[1].fan_in)?;
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.fan_in * l.fan_out + l.fan_out;
        }
        Ok(Self {
            layers,
            offsets,
            total,
        })
    }

    /// Widths `[in, h1, ..., out]`; hidden layers use ReLU, the last is linear.
    pub fn relu_stack(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidInput("need at least input and output width".into()));
        }
        let n = widths.len() - 1;
        Self::new(
            (0..n)
                .map(|i| LayerShape {
                    fan_in: widths[i],
                    fan_out: widths[i + 1],
                    activation: if i + 1 < n {
                        Activation::Relu
                    } else {
                        Activation::Identity
                    },
                })
                .collect(),
        )
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn n_params(&self) -> usize {
        self.total
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn weight_range(&self, l: usize) -> Range<usize> {
        let s = self.offsets[l];
        s..s + self.layers[l].fan_in * self.layers[l].fan_out
    }

    pub fn bias_range(&self, l: usize) -> Range<usize> {
        let w = self.weight_range(l);
        w.end..w.end + self.layers[l].fan_out
    }

    pub fn layer_range(&self, l: usize) -> Range<usize> {
        self.offsets[l]..self.bias_range(l).end
    }

    /// Per-parameter initialization scale `1/sqrt(fan_in)`.
    pub fn init_scales(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        for l in &self.layers {
            let s = 1.0 / (l.fan_in.max(1) as f64).sqrt();
            out.extend(std::iter::repeat_n(s, l.fan_in * l.fan_out + l.fan_out));
        }
        out
    }

    /// Uniform fan-in initialization.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.init_scales()
            .into_iter()
            .map(|s| s * (2.0 * rng.random::<f64>() - 1.0))
            .collect()
    }

    /// Batched forward pass over a row-major `batch × input_dim` block.
    pub fn forward(&self, params: &[f64], input: &[f64], batch: usize) -> Result<ForwardCache> {
        ensure_dim("parameter vector", self.total, params.len())?;
        ensure_dim("input block", batch * self.input_dim(), input.len())?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for (l, shape) in self.layers.iter().enumerate() {
            let (i_dim, o_dim) = (shape.fan_in, shape.fan_out);
            let w = &params[self.weight_range(l)];
            let b = &params[self.bias_range(l)];
            let mut out = vec![0.0; batch * o_dim];
            for row in out.chunks_exact_mut(o_dim) {
                row.copy_from_slice(b);
            }
            gemm(
                batch,
                i_dim,
                o_dim,
                1.0,
                &acts[l],
                i_dim,
                1,
                w,
                1,
                i_dim,
                1.0,
                &mut out,
                o_dim,
                1,
            );
            if shape.activation == Activation::Relu {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("activations"));
            }
            acts.push(out);
        }
        Ok(ForwardCache { batch, acts })
    }

    /// Reverse pass. Accumulates into `grad` (same layout as `params`), and
    /// returns the gradient with respect to the input when `want_input`.
    ///
    /// Only layers `first_layer..` receive parameter gradients; the pass stops
    /// there unless the input gradient is requested.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        grad_output: &[f64],
        grad: &mut [f64],
        first_layer: usize,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let batch = cache.batch;
        let mut upstream = grad_output.to_vec();
        for l in (0..self.layers.len()).rev() {
            let shape = self.layers[l];
            let (i_dim, o_dim) = (shape.fan_in, shape.fan_out);
            if shape.activation == Activation::Relu {
                for (g, a) in upstream.iter_mut().zip(&cache.acts[l + 1]) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            if l >= first_layer {
                let wr = self.weight_range(l);
                gemm(
                    o_dim,
                    batch,
                    i_dim,
                    1.0,
                    &upstream,
                    1,
                    o_dim,
                    &cache.acts[l],
                    i_dim,
                    1,
                    1.0,
                    &mut grad[wr],
                    i_dim,
                    1,
                );
                let br = self.bias_range(l);
                let gb = &mut grad[br];
                for row in upstream.chunks_exact(o_dim) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            if l <= first_layer && !want_input {
                return None;
            }
            let w = &params[self.weight_range(l)];
            let mut down = vec![0.0; batch * i_dim];
            gemm(
                batch, o_dim, i_dim, 1.0, &upstream, o_dim, 1, w, i_dim, 1, 0.0, &mut down, i_dim,
                1,
            );
            upstream = down;
        }
        Some(upstream)
    }

    /// Forward-mode derivative of the outputs along `tangent` (parameter
    /// layout). Entries of layers before `first_layer` are ignored.
    pub fn jvp(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        tangent: &[f64],
        first_layer: usize,
    ) -> Vec<f64> {
        let batch = cache.batch;
        let mut d_act: Option<Vec<f64>> = None;
        for (l, shape) in self.layers.iter().enumerate().skip(first_layer) {
            let (i_dim, o_dim) = (shape.fan_in, shape.fan_out);
            let mut d = vec![0.0; batch * o_dim];
            for row in d.chunks_exact_mut(o_dim) {
                row.copy_from_slice(&tangent[self.bias_range(l)]);
            }
            gemm(
                batch,
                i_dim,
                o_dim,
                1.0,
                &cache.acts[l],
                i_dim,
                1,
                &tangent[self.weight_range(l)],
                1,
                i_dim,
                1.0,
                &mut d,
                o_dim,
                1,
            );
            if let Some(prev) = &d_act {
                gemm(
                    batch,
                    i_dim,
                    o_dim,
                    1.0,
                    prev,
                    i_dim,
                    1,
                    &params[self.weight_range(l)],
                    1,
                    i_dim,
                    1.0,
                    &mut d,
                    o_dim,
                    1,
                );
            }
            if shape.activation == Activation::Relu {
                for (g, a) in d.iter_mut().zip(&cache.acts[l + 1]) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            d_act = Some(d);
        }
        d_act.unwrap_or_else(|| vec![0.0; batch * self.output_dim()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_forward(layout: &MlpLayout, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for (l, s) in layout.layers().iter().enumerate() {
            let w = &params[layout.weight_range(l)];
            let b = &params[layout.bias_range(l)];
            let mut out = vec![0.0; s.fan_out];
            for o in 0..s.fan_out {
                let mut t = b[o];
                for i in 0..s.fan_in {
                    t += w[o * s.fan_in + i] * a[i];
                }
                out[o] = if s.activation == Activation::Relu {
                    t.max(0.0)
                } else {
                    t
                };
            }
            a = out;
        }
        a
    }

    #[test]
    fn batched_forward_matches_naive() {
        let layout = MlpLayout::relu_stack(&[3, 5, 4, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = layout.init(&mut rng);
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let cache = layout.forward(&p, &x, 4).unwrap();
        for b in 0..4 {
            let r = naive_forward(&layout, &p, &x[b * 3..b * 3 + 3]);
            for o in 0..2 {
                assert!((r[o] - cache.output()[b * 2 + o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let layout = MlpLayout::relu_stack(&[3, 6, 6, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = layout.init(&mut rng);
        let x: Vec<f64> = (0..6).map(|i| (i as f64 * 0.71).cos()).collect();
        let wts = [0.3, -1.2, 0.8, 0.5];
        let f = |p: &[f64]| -> f64 {
            let c = layout.forward(p, &x, 2).unwrap();
            c.output().iter().zip(&wts).map(|(a, b)| a * b).sum()
        };
        let cache = layout.forward(&p, &x, 2).unwrap();
        let mut g = vec![0.0; p.len()];
        let gin = layout.backward(&p, &cache, &wts, &mut g, 0, true).unwrap();
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp[i] += 1e-6;
            let mut pm = p.clone();
            pm[i] -= 1e-6;
            let fd = (f(&pp) - f(&pm)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6, "param {i}: {fd} vs {}", g[i]);
        }
        assert_eq!(gin.len(), 6);
    }

    #[test]
    fn restricted_backward_touches_only_tail() {
        let layout = MlpLayout::relu_stack(&[2, 4, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = layout.init(&mut rng);
        let cache = layout.forward(&p, &[0.5, -0.2], 1).unwrap();
        let mut g = vec![0.0; p.len()];
        layout.backward(&p, &cache, &[1.0, 1.0, 1.0], &mut g, 1, false);
        assert!(g[layout.layer_range(0)].iter().all(|v| *v == 0.0));
        assert!(g[layout.layer_range(1)].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn jvp_is_adjoint_of_backward() {
        let layout = MlpLayout::relu_stack(&[3, 5, 4, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = layout.init(&mut rng);
        let x: Vec<f64> = (0..9).map(|i| (i as f64 * 0.53).sin()).collect();
        let cache = layout.forward(&p, &x, 3).unwrap();
        let v: Vec<f64> = (0..p.len()).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let u: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        for first in 0..3 {
            let jv = layout.jvp(&p, &cache, &v, first);
            let mut g = vec![0.0; p.len()];
            layout.backward(&p, &cache, &u, &mut g, first, false);
            let lhs: f64 = jv.iter().zip(&u).map(|(a, b)| a * b).sum();
            let start = layout.layer_range(first).start;
            let rhs: f64 = g[start..].iter().zip(&v[start..]).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "layer {first}: {lhs} vs {rhs}");
        }
    }
}
