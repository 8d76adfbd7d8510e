//! Transformation sampler `T(z, y)`: self-attention over part tokens mapping
//! style latents plus a noise code to per-part shifts and scales, trained
//! with conditional implicit maximum likelihood (best-of-K fitting).

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PartTransform, TransformSet};
use crate::error::{Error, Result};
use crate::nn::{grouped_layout, AttentionBlock, BlockDims, Graph, LayerNorm, Linear, Mode, ParamId, ParamStore, Tensor, Var};
use crate::stylizer::{standard_normal, StyleLatentSet};

pub const DEFAULT_K: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub noise_dim: usize,
    /// Noise amplifier applied to `y` before it enters the tokens.
    pub lambda: f64,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub dropout: f64,
}

/// A noise code `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCode(pub Vec<f64>);

impl NoiseCode {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Self {
        Self(standard_normal(rng, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }
}

#[derive(Clone, Debug)]
pub struct TransformSampler {
    pub cfg: SamplerConfig,
    m: usize,
    latent_dim: usize,
    proj: Linear,
    label_emb: ParamId,
    blocks: Vec<AttentionBlock>,
    ln_out: LayerNorm,
    head: Linear,
}

impl TransformSampler {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, m: usize, latent_dim: usize, cfg: &SamplerConfig, rng: &mut R) -> Result<Self> {
        if !(cfg.lambda > 0.0) {
            return Err(Error::InvalidArgument("sampler lambda must be positive".into()));
        }
        let dims = BlockDims { width: cfg.width, heads: cfg.heads, ff_hidden: cfg.ff_hidden };
        let proj = Linear::new(store, "sampler.proj", latent_dim + cfg.noise_dim, cfg.width, rng);
        let label_emb = store.add_uniform("sampler.label_emb", m, cfg.width, cfg.width, rng);
        let blocks = (0..cfg.layers).map(|l| AttentionBlock::new(store, &format!("sampler.block{l}"), dims, false, rng)).collect();
        let ln_out = LayerNorm::new(store, "sampler.ln_out", cfg.width);
        let head = Linear::new(store, "sampler.head", cfg.width, 6, rng);
        Ok(Self { cfg: cfg.clone(), m, latent_dim, proj, label_emb, blocks, ln_out, head })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn noise_dim(&self) -> usize {
        self.cfg.noise_dim
    }

    /// Batched forward pass. `ys` may be leaves so that gradients w.r.t. the
    /// codes can be read back. Returns a `(B*m) x 6` tensor of
    /// `[shift, log scale]` rows, shape-major.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latents: &[&StyleLatentSet],
        ys: Var,
        mode: &mut Mode<'_, R>,
    ) -> Var {
        let (m, d) = (self.m, self.latent_dim);
        let b = latents.len();
        let mut zrows = Vec::with_capacity(b * m * d);
        let mut mask = Vec::with_capacity(b * m);
        for l in latents {
            for j in 0..m {
                zrows.extend_from_slice(&l.z[j]);
                mask.push(l.present[j]);
            }
        }
        let z = g.input(Tensor::from_vec(b * m, d, zrows));
        // Every token of a shape sees the same amplified code.
        let spread = Rc::new((0..b * m).map(|i| i / m).collect::<Vec<_>>());
        let y = g.gather_rows(ys, spread);
        let y = g.scale(y, self.cfg.lambda);
        let tokens = g.concat_cols(&[z, y]);
        let h = self.proj.forward(g, store, tokens);
        let emb = g.param(store, self.label_emb);
        let emb = g.gather_rows(emb, Rc::new((0..b * m).map(|i| i % m).collect()));
        let mut h = g.add(h, emb);
        let layout = grouped_layout(self.cfg.heads, (0..b * m).map(|i| i / m).collect(), b, m, mask);
        for block in &self.blocks {
            h = block.forward(g, store, h, None, &layout, mode);
        }
        let h = self.ln_out.forward(g, store, h);
        self.head.forward(g, store, h)
    }

    fn codes_tensor(&self, ys: &[&NoiseCode]) -> Result<Tensor> {
        for y in ys {
            if y.0.len() != self.cfg.noise_dim {
                return Err(Error::LengthMismatch(format!("noise code has {} dims, expected {}", y.0.len(), self.cfg.noise_dim)));
            }
        }
        Ok(Tensor::from_rows(&ys.iter().map(|y| y.0.clone()).collect::<Vec<_>>()))
    }

    fn check_latents(&self, l: &StyleLatentSet) -> Result<()> {
        if l.m() != self.m || l.present.len() != self.m {
            return Err(Error::LengthMismatch(format!("expected {} parts, got {}", self.m, l.m())));
        }
        if l.z.iter().any(|z| z.len() != self.latent_dim) {
            return Err(Error::LengthMismatch(format!("latents must have {} dims", self.latent_dim)));
        }
        Ok(())
    }

    /// Transform sets for many `(latents, code)` pairs, evaluation mode.
    pub fn sample_batch(&self, store: &ParamStore, latents: &[&StyleLatentSet], ys: &[&NoiseCode]) -> Result<Vec<TransformSet>> {
        if latents.len() != ys.len() {
            return Err(Error::LengthMismatch("one noise code per latent set".into()));
        }
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        for l in latents {
            self.check_latents(l)?;
        }
        let mut g = Graph::new();
        let yv = g.input(self.codes_tensor(ys)?);
        let out = self.forward_graph(&mut g, store, latents, yv, &mut Mode::<ChaCha8Rng>::eval());
        let t = g.value(out);
        Ok(latents.iter().enumerate().map(|(b, l)| rows_to_transforms(t, b, l.present.clone())).collect())
    }

    pub fn sample_transforms(&self, store: &ParamStore, latents: &StyleLatentSet, y: &NoiseCode) -> Result<TransformSet> {
        Ok(self.sample_batch(store, &[latents], &[y])?.remove(0))
    }
}

/// Reads shape `b`'s block of `[shift, log scale]` rows.
pub fn rows_to_transforms(t: &Tensor, b: usize, present: Vec<bool>) -> TransformSet {
    let m = present.len();
    let transforms = (0..m)
        .map(|j| if present[j] { PartTransform::from_features(t.row(b * m + j)) } else { PartTransform::IDENTITY })
        .collect();
    TransformSet { transforms, present }
}

/// `sum_j present [ |c_j - c_ref|^2 + |log s_j - log s_ref|^2 ]`.
pub fn fit_loss(tau: &TransformSet, tau_ref: &TransformSet) -> Result<f64> {
    if tau.present != tau_ref.present {
        return Err(Error::PresenceMismatch);
    }
    let mut total = 0.0;
    for j in 0..tau.m() {
        if !tau.present[j] {
            continue;
        }
        let (a, b) = (tau.transforms[j].to_features(), tau_ref.transforms[j].to_features());
        total += a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(total)
}

/// Fit loss in the graph for `B` shapes; `pred` is `(B*m) x 6`, `targets`
/// hold the reference features (absent rows are masked out). Returns the sum.
pub fn fit_loss_graph(g: &mut Graph, pred: Var, refs: &[&TransformSet]) -> Var {
    let m = refs.first().map_or(0, |r| r.m());
    let mut target = Tensor::zeros(refs.len() * m, 6);
    let mut weight = Tensor::zeros(refs.len() * m, 1);
    for (b, r) in refs.iter().enumerate() {
        for j in 0..m {
            if r.present[j] {
                target.row_mut(b * m + j).copy_from_slice(&r.transforms[j].to_features());
                weight.data[b * m + j] = 1.0;
            }
        }
    }
    let target = g.input(target);
    let weight = g.input(weight);
    let diff = g.sub(pred, target);
    let sq = g.square(diff);
    let per_row = g.sum_rows(sq);
    let masked = g.mul(per_row, weight);
    g.sum_all(masked)
}

/// Draws `K` codes and returns the one whose transforms best fit `tau_ref`
/// (lowest index on ties), together with its loss.
pub fn cimle_select<R: Rng + ?Sized>(
    sampler: &TransformSampler,
    store: &ParamStore,
    latents: &StyleLatentSet,
    tau_ref: &TransformSet,
    k: usize,
    rng: &mut R,
) -> Result<(NoiseCode, f64)> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let codes: Vec<NoiseCode> = (0..k).map(|_| NoiseCode::sample(rng, sampler.noise_dim())).collect();
    let losses = candidate_losses(sampler, store, latents, tau_ref, &codes)?;
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = i;
        }
    }
    Ok((codes[best].clone(), losses[best]))
}

/// Fit loss of each candidate code.
pub fn candidate_losses(
    sampler: &TransformSampler,
    store: &ParamStore,
    latents: &StyleLatentSet,
    tau_ref: &TransformSet,
    codes: &[NoiseCode],
) -> Result<Vec<f64>> {
    let ls: Vec<&StyleLatentSet> = vec![latents; codes.len()];
    let ys: Vec<&NoiseCode> = codes.iter().collect();
    let taus = sampler.sample_batch(store, &ls, &ys)?;
    taus.iter().map(|t| fit_loss(t, tau_ref)).collect()
}
