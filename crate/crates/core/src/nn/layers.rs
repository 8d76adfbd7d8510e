//! Parameterized building blocks on top of [`Graph`].

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{AttnLayout, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = store.add_uniform(format!("{name}.w"), d_in, d_out, d_in, rng);
        let b = store.add_uniform(format!("{name}.b"), 1, d_out, d_in, rng);
        Self { w, b, d_in, d_out }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(d_in, d_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, d_out));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`. With `zero_last` the output layer starts at zero.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &[usize], zero_last: bool, rng: &mut R) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.{i}");
                if zero_last && i == n - 1 {
                    Linear::zeros(store, &lname, dims[i], dims[i + 1])
                } else {
                    Linear::new(store, &lname, dims[i], dims[i + 1], rng)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Var {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x);
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        x
    }

    /// Applies all layers, with ReLU after every one of them.
    pub fn forward_relu_all(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Var {
        for layer in &self.layers {
            x = layer.forward(g, store, x);
            x = g.relu(x);
        }
        x
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(1, d, 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(1, d));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockDims {
    pub width: usize,
    pub heads: usize,
    pub ff_hidden: usize,
}

/// Pre-norm transformer block: attention from the query stream to a context
/// (the stream itself for self-attention), then a feed-forward layer.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub dims: BlockDims,
    ln_q: LayerNorm,
    ln_kv: Option<LayerNorm>,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_ff: LayerNorm,
    ff: Mlp,
}

/// Runtime options for a forward pass.
pub struct Mode<'a, R: Rng + ?Sized> {
    pub dropout: f64,
    pub rng: Option<&'a mut R>,
}

impl<R: Rng + ?Sized> Mode<'_, R> {
    pub fn eval() -> Self {
        Self { dropout: 0.0, rng: None }
    }
}

pub(crate) fn dropout<R: Rng + ?Sized>(g: &mut Graph, x: Var, mode: &mut Mode<'_, R>) -> Var {
    if mode.dropout <= 0.0 {
        return x;
    }
    let Some(rng) = mode.rng.as_deref_mut() else { return x };
    let (r, c) = g.shape(x);
    let keep = 1.0 - mode.dropout;
    let data = (0..r * c).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    let mask = g.input(Tensor::from_vec(r, c, data));
    g.mul(x, mask)
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: BlockDims, cross: bool, rng: &mut R) -> Self {
        let w = dims.width;
        Self {
            dims,
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), w),
            ln_kv: cross.then(|| LayerNorm::new(store, &format!("{name}.ln_kv"), w)),
            q: Linear::new(store, &format!("{name}.q"), w, w, rng),
            k: Linear::new(store, &format!("{name}.k"), w, w, rng),
            v: Linear::new(store, &format!("{name}.v"), w, w, rng),
            o: Linear::new(store, &format!("{name}.o"), w, w, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), w),
            ff: Mlp::new(store, &format!("{name}.ff"), &[w, dims.ff_hidden, w], false, rng),
        }
    }

    /// `context = None` means self-attention over `x`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        context: Option<Var>,
        layout: &AttnLayout,
        mode: &mut Mode<'_, R>,
    ) -> Var {
        let h = self.ln_q.forward(g, store, x);
        let kv = match (context, &self.ln_kv) {
            (Some(c), Some(ln)) => ln.forward(g, store, c),
            (Some(c), None) => c,
            (None, _) => h,
        };
        let q = self.q.forward(g, store, h);
        let k = self.k.forward(g, store, kv);
        let v = self.v.forward(g, store, kv);
        let a = g.attention(q, k, v, layout.clone());
        let a = self.o.forward(g, store, a);
        let a = dropout(g, a, mode);
        let x = g.add(x, a);
        let h = self.ln_ff.forward(g, store, x);
        let f = self.ff.forward(g, store, h);
        let f = dropout(g, f, mode);
        g.add(x, f)
    }
}

/// Layout where each of `groups` groups owns `per_group` consecutive keys.
pub fn grouped_layout(heads: usize, query_group: Vec<usize>, groups: usize, per_group: usize, key_mask: Vec<bool>) -> AttnLayout {
    AttnLayout {
        heads,
        query_group: Rc::new(query_group),
        group_keys: Rc::new((0..groups).map(|g| g * per_group..(g + 1) * per_group).collect()),
        key_mask: Rc::new(key_mask),
    }
}

/// Sinusoidal embedding of an integer timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}
