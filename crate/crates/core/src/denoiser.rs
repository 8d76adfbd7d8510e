//! Cross-attention noise predictor: every noisy point attends to the part
//! tokens of its own shape and never to other points.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Point, TransformSet};
use crate::error::{Error, Result};
use crate::kernel::{DiffusionSchedule, KernelCondition};
use crate::nn::{timestep_embedding, AttentionBlock, AttnLayout, BlockDims, Graph, LayerNorm, Linear, Mode, ParamStore, Tensor, Var};
use crate::stylizer::{standard_normal, StyleLatentSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub dropout: f64,
    pub time_dim: usize,
}

/// One shape's noisy points and conditioning.
#[derive(Clone, Copy, Debug)]
pub struct DenoiseInput<'a> {
    pub xt: &'a [Point],
    pub labels: &'a [usize],
    pub tau: &'a TransformSet,
    pub t: usize,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    m: usize,
    latent_dim: usize,
    point_proj: Linear,
    ctx_proj: Linear,
    blocks: Vec<AttentionBlock>,
    ln_out: LayerNorm,
    head: Linear,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, m: usize, latent_dim: usize, cfg: &DenoiserConfig, rng: &mut R) -> Self {
        let dims = BlockDims { width: cfg.width, heads: cfg.heads, ff_hidden: cfg.ff_hidden };
        Self {
            cfg: cfg.clone(),
            m,
            latent_dim,
            // noisy position, its canonical-frame coordinates, own transform, label
            point_proj: Linear::new(store, "denoiser.point_proj", 12 + m, cfg.width, rng),
            ctx_proj: Linear::new(store, "denoiser.ctx_proj", latent_dim + 6 + m + cfg.time_dim, cfg.width, rng),
            blocks: (0..cfg.layers)
                .map(|l| AttentionBlock::new(store, &format!("denoiser.block{l}"), dims, true, rng))
                .collect(),
            ln_out: LayerNorm::new(store, "denoiser.ln_out", cfg.width),
            head: Linear::new(store, "denoiser.head", cfg.width, 3, rng),
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    fn validate(&self, inputs: &[DenoiseInput<'_>]) -> Result<()> {
        for inp in inputs {
            if inp.xt.len() != inp.labels.len() {
                return Err(Error::LengthMismatch(format!("{} points but {} labels", inp.xt.len(), inp.labels.len())));
            }
            if inp.tau.m() != self.m || inp.tau.present.len() != self.m {
                return Err(Error::LengthMismatch(format!("expected {} transforms", self.m)));
            }
            for &l in inp.labels {
                if l >= self.m {
                    return Err(Error::LabelOutOfRange { label: l, m: self.m });
                }
                if !inp.tau.present[l] {
                    return Err(Error::AbsentPart { part: l });
                }
            }
            if inp.t == 0 {
                return Err(Error::TimestepOutOfRange { t: 0, max: usize::MAX });
            }
        }
        Ok(())
    }

    /// Noise estimates for all points of all inputs (rows concatenated in
    /// input order). `z` holds `B*m` latent rows, shape-major; absent rows
    /// should carry the dummy latent.
    pub fn forward_graph<R: Rng + ?Sized>(&self, g: &mut Graph, store: &ParamStore, inputs: &[DenoiseInput<'_>], z: Var, mode: &mut Mode<'_, R>) -> Var {
        let m = self.m;
        let b = inputs.len();
        let pcols = 12 + m;
        let n: usize = inputs.iter().map(|i| i.xt.len()).sum();
        let mut pts = Vec::with_capacity(n * pcols);
        let mut group = Vec::with_capacity(n);
        let ccols = 6 + m + self.cfg.time_dim;
        let mut ctx = Vec::with_capacity(b * m * ccols);
        let mut mask = Vec::with_capacity(b * m);
        for (bi, inp) in inputs.iter().enumerate() {
            for (p, &l) in inp.xt.iter().zip(inp.labels) {
                let tr = &inp.tau.transforms[l];
                pts.extend_from_slice(p);
                pts.extend((0..3).map(|a| (p[a] - tr.shift[a]) / tr.scale[a]));
                pts.extend_from_slice(&tr.to_features());
                pts.extend((0..m).map(|k| if k == l { 1.0 } else { 0.0 }));
                group.push(bi);
            }
            let temb = timestep_embedding(inp.t, self.cfg.time_dim);
            for j in 0..m {
                if inp.tau.present[j] {
                    ctx.extend_from_slice(&inp.tau.transforms[j].to_features());
                } else {
                    ctx.extend_from_slice(&[0.0; 6]);
                }
                ctx.extend((0..m).map(|k| if k == j { 1.0 } else { 0.0 }));
                ctx.extend_from_slice(&temb);
                mask.push(inp.tau.present[j]);
            }
        }
        let pts = g.input(Tensor::from_vec(n, pcols, pts));
        let ctx = g.input(Tensor::from_vec(b * m, ccols, ctx));
        let ctx = g.concat_cols(&[z, ctx]);
        let ctx = self.ctx_proj.forward(g, store, ctx);
        let mut h = self.point_proj.forward(g, store, pts);
        let layout = AttnLayout {
            heads: self.cfg.heads,
            query_group: Rc::new(group),
            group_keys: Rc::new((0..b).map(|k| k * m..(k + 1) * m).collect()),
            key_mask: Rc::new(mask),
        };
        for block in &self.blocks {
            h = block.forward(g, store, h, Some(ctx), &layout, mode);
        }
        let h = self.ln_out.forward(g, store, h);
        self.head.forward(g, store, h)
    }

    fn latent_rows(&self, latents: &[&StyleLatentSet]) -> Tensor {
        let d = self.latent_dim;
        let mut rows = Vec::with_capacity(latents.len() * self.m * d);
        for l in latents {
            for j in 0..self.m {
                if l.present[j] {
                    rows.extend_from_slice(&l.z[j]);
                } else {
                    rows.extend(std::iter::repeat_n(0.0, d));
                }
            }
        }
        Tensor::from_vec(latents.len() * self.m, d, rows)
    }

    /// Evaluation-mode noise estimates, one vector per input.
    pub fn predict_batch(&self, store: &ParamStore, inputs: &[DenoiseInput<'_>], latents: &[&StyleLatentSet]) -> Result<Vec<Vec<Point>>> {
        self.validate(inputs)?;
        if latents.len() != inputs.len() {
            return Err(Error::LengthMismatch("one latent set per input".into()));
        }
        for l in latents {
            if l.m() != self.m || l.z.iter().any(|z| z.len() != self.latent_dim) {
                return Err(Error::LengthMismatch(format!("latents must be {} x {}", self.m, self.latent_dim)));
            }
        }
        let mut g = Graph::new();
        let z = g.input(self.latent_rows(latents));
        let out = self.forward_graph(&mut g, store, inputs, z, &mut Mode::<ChaCha8Rng>::eval());
        let t = g.value(out);
        let mut offset = 0;
        Ok(inputs
            .iter()
            .map(|inp| {
                let rows = (offset..offset + inp.xt.len()).map(|r| [t.get(r, 0), t.get(r, 1), t.get(r, 2)]).collect();
                offset += inp.xt.len();
                rows
            })
            .collect())
    }

    pub fn predict_noise(&self, store: &ParamStore, xt: &[Point], labels: &[usize], tau: &TransformSet, latents: &StyleLatentSet, t: usize) -> Result<Vec<Point>> {
        Ok(self.predict_batch(store, &[DenoiseInput { xt, labels, tau, t }], &[latents])?.remove(0))
    }
}

/// Forward-diffused copy of a shape: one `t` per shape, independent noise per point.
#[derive(Clone, Debug)]
pub struct NoisyShape {
    pub t: usize,
    pub xt: Vec<Point>,
    pub eps: Vec<Point>,
}

/// Draws `t ~ U{1..T}` then one standard-normal triple per point, in order.
pub fn diffuse_shape<R: Rng + ?Sized>(points: &[Point], labels: &[usize], tau: &TransformSet, sched: &DiffusionSchedule, rng: &mut R) -> Result<NoisyShape> {
    let t = rng.random_range(1..=sched.steps());
    diffuse_shape_at(points, labels, tau, sched, t, rng)
}

/// [`diffuse_shape`] at a given timestep.
pub fn diffuse_shape_at<R: Rng + ?Sized>(points: &[Point], labels: &[usize], tau: &TransformSet, sched: &DiffusionSchedule, t: usize, rng: &mut R) -> Result<NoisyShape> {
    if t == 0 || t > sched.steps() {
        return Err(Error::TimestepOutOfRange { t, max: sched.steps() });
    }
    let k = sched.marginal_coeffs(t);
    let mut xt = Vec::with_capacity(points.len());
    let mut eps = Vec::with_capacity(points.len());
    for (p, &l) in points.iter().zip(labels) {
        if !tau.present[l] {
            return Err(Error::AbsentPart { part: l });
        }
        let tr = &tau.transforms[l];
        let e = standard_normal(rng, 3);
        xt.push(std::array::from_fn(|a| k.x0 * p[a] + k.mu * tr.shift[a] + k.noise * tr.scale[a] * e[a]));
        eps.push([e[0], e[1], e[2]]);
    }
    Ok(NoisyShape { t, xt, eps })
}

/// One timestep per batch item, each uniform on its own `1/n` slice of
/// `1..=steps`, in shuffled order. Every draw is still marginally uniform,
/// but a batch covers the whole range, which steadies the loss.
pub fn stratified_timesteps<R: Rng + ?Sized>(n: usize, steps: usize, rng: &mut R) -> Vec<usize> {
    let mut ts: Vec<usize> = (0..n)
        .map(|i| {
            let u = (i as f64 + rng.random::<f64>()) / n as f64;
            1 + ((u * steps as f64) as usize).min(steps - 1)
        })
        .collect();
    ts.shuffle(rng);
    ts
}

/// Per-point weights `1 / (m_present * |S_j|)` so each shape's loss is the
/// average over present parts of the per-part mean squared error.
pub fn loss_weights(labels: &[usize], m: usize) -> Vec<f64> {
    let mut counts = vec![0usize; m];
    for &l in labels {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count().max(1) as f64;
    labels.iter().map(|&l| 1.0 / (present * counts[l] as f64)).collect()
}

/// Weighted squared error between predictions (`N x 3`) and the true noise.
pub fn noise_loss_graph(g: &mut Graph, pred: Var, eps: &[Point], weights: &[f64]) -> Var {
    let target = g.input(Tensor::from_vec(eps.len(), 3, eps.iter().flatten().copied().collect()));
    let w = g.input(Tensor::from_vec(weights.len(), 1, weights.to_vec()));
    let diff = g.sub(pred, target);
    let sq = g.square(diff);
    let per_point = g.sum_rows(sq);
    let weighted = g.mul(per_point, w);
    g.sum_all(weighted)
}

/// Single-shape diffusion loss with frozen weights in evaluation mode.
pub fn diffusion_loss<R: Rng + ?Sized>(
    den: &Denoiser,
    store: &ParamStore,
    points: &[Point],
    labels: &[usize],
    latents: &StyleLatentSet,
    tau_ref: &TransformSet,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<f64> {
    diffusion_loss_with(points, labels, den.m(), tau_ref, sched, rng, |inp| den.predict_noise(store, inp.xt, inp.labels, inp.tau, latents, inp.t))
}

/// Diffusion loss for an arbitrary noise predictor.
pub fn diffusion_loss_with<R: Rng + ?Sized>(
    points: &[Point],
    labels: &[usize],
    m: usize,
    tau_ref: &TransformSet,
    sched: &DiffusionSchedule,
    rng: &mut R,
    predict: impl FnOnce(DenoiseInput<'_>) -> Result<Vec<Point>>,
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptySet);
    }
    let noisy = diffuse_shape(points, labels, tau_ref, sched, rng)?;
    let pred = predict(DenoiseInput { xt: &noisy.xt, labels, tau: tau_ref, t: noisy.t })?;
    let w = loss_weights(labels, m);
    Ok(pred
        .iter()
        .zip(&noisy.eps)
        .zip(&w)
        .map(|((p, e), w)| w * (0..3).map(|a| (p[a] - e[a]).powi(2)).sum::<f64>())
        .sum())
}

/// Ancestral sampling of several shapes at once. `predict` maps the current
/// noisy inputs to noise estimates; per-part start points are drawn from
/// `N(c_j, Diag(s_j^2))` in point order, then one triple per point per step.
pub fn ancestral_sample<R: Rng + ?Sized>(
    sched: &DiffusionSchedule,
    labels: &[Vec<usize>],
    taus: &[TransformSet],
    rng: &mut R,
    predict: impl FnMut(&[DenoiseInput<'_>]) -> Result<Vec<Vec<Point>>>,
) -> Result<Vec<Vec<Point>>> {
    ancestral_sample_clipped(sched, labels, taus, None, rng, predict)
}

/// [`ancestral_sample`] with an optional bound on the clean point implied by
/// each noise estimate, in the part's canonical frame. Inside the bound a
/// step is the plain noise-form step; outside, the implied point is clamped
/// and the step takes the posterior mean from it. Late steps amplify noise
/// errors by up to `1/sqrt(alpha_t)`, so without a bound an imperfect model
/// can run away.
pub fn ancestral_sample_clipped<R: Rng + ?Sized>(
    sched: &DiffusionSchedule,
    labels: &[Vec<usize>],
    taus: &[TransformSet],
    clip: Option<f64>,
    rng: &mut R,
    mut predict: impl FnMut(&[DenoiseInput<'_>]) -> Result<Vec<Vec<Point>>>,
) -> Result<Vec<Vec<Point>>> {
    let conds: Vec<Vec<KernelCondition>> = taus
        .iter()
        .map(|tau| {
            tau.transforms
                .iter()
                .map(|tr| KernelCondition { mu: tr.shift.to_vec(), sigma: tr.scale.to_vec() })
                .collect()
        })
        .collect();
    let mut xs: Vec<Vec<Point>> = labels
        .iter()
        .zip(&conds)
        .map(|(ls, cs)| {
            ls.iter()
                .map(|&l| {
                    let e = standard_normal(rng, 3);
                    std::array::from_fn(|a| cs[l].mu[a] + cs[l].sigma[a] * e[a])
                })
                .collect()
        })
        .collect();
    for t in (1..=sched.steps()).rev() {
        let eps = {
            let inputs: Vec<DenoiseInput<'_>> = xs
                .iter()
                .zip(labels)
                .zip(taus)
                .map(|((x, l), tau)| DenoiseInput { xt: x, labels: l, tau, t })
                .collect();
            predict(&inputs)?
        };
        let k = sched.reverse_coeffs(t);
        let (marg, post) = (sched.marginal_coeffs(t), sched.posterior_coeffs(t));
        for ((x, e), (ls, cs)) in xs.iter_mut().zip(&eps).zip(labels.iter().zip(&conds)) {
            for ((p, eh), &l) in x.iter_mut().zip(e).zip(ls) {
                let c = &cs[l];
                let z = if t > 1 { standard_normal(rng, 3) } else { vec![0.0; 3] };
                for a in 0..3 {
                    let mut mean = k.xt * p[a] - k.mu * c.mu[a] - k.noise * c.sigma[a] * eh[a];
                    if let Some(bound) = clip {
                        let u = (p[a] - c.mu[a]) / c.sigma[a];
                        let u0 = (u - marg.noise * eh[a]) / marg.x0;
                        if !(u0.abs() <= bound) {
                            let u0 = if u0.is_nan() { 0.0 } else { u0.clamp(-bound, bound) };
                            mean = c.mu[a] + c.sigma[a] * (post.x0 * u0 + post.xt * u);
                        }
                    }
                    p[a] = mean + k.eta * c.sigma[a] * z[a];
                }
            }
        }
    }
    Ok(xs)
}
