//! Per-part variational encoders and affine-coupling flow priors over part
//! style latents.
//!
//! The flow is built in the normalizing direction `z -> xi` (the direction
//! needed for log-densities during training); sampling runs it backwards.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Point;
use crate::error::{Error, Result};
use crate::nn::{Graph, Mlp, ParamId, ParamStore, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
/// Floor on posterior standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StylizerConfig {
    pub latent_dim: usize,
    /// Hidden widths of the shared per-point network (input 3 is implied).
    pub point_hidden: Vec<usize>,
    /// Hidden widths of the per-part head (output `2 * latent_dim` is implied).
    pub head_hidden: Vec<usize>,
    pub flow_layers: usize,
    pub flow_hidden: Vec<usize>,
}

/// Style latents of one shape. Absent parts carry the zero dummy latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleLatentSet {
    pub z: Vec<Vec<f64>>,
    pub present: Vec<bool>,
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

impl StyleLatentSet {
    pub fn m(&self) -> usize {
        self.z.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.z.first().map_or(0, Vec::len)
    }

    /// Latents with no posterior attached (e.g. prior samples); `sigma` is zero.
    pub fn from_latents(z: Vec<Vec<f64>>, present: Vec<bool>) -> Self {
        let d = z.first().map_or(0, Vec::len);
        let z: Vec<Vec<f64>> = z.into_iter().zip(&present).map(|(z, &p)| if p { z } else { vec![0.0; d] }).collect();
        let sigma = vec![vec![0.0; d]; z.len()];
        Self { mu: z.clone(), z, present, sigma }
    }

    pub fn dummy(m: usize, d: usize) -> Self {
        Self::from_latents(vec![vec![0.0; d]; m], vec![false; m])
    }
}

/// `z = mu + sigma * noise`.
pub fn reparam_sample(mu: &[f64], sigma: &[f64], noise: &[f64]) -> Vec<f64> {
    mu.iter().zip(sigma).zip(noise).map(|((m, s), e)| m + s.max(SIGMA_FLOOR) * e).collect()
}

/// Entropy of `N(mu, Diag(sigma^2))`.
pub fn gaussian_entropy(sigma: &[f64]) -> f64 {
    let d = sigma.len() as f64;
    sigma.iter().map(|s| s.ln()).sum::<f64>() + 0.5 * d * (1.0 + (2.0 * PI).ln())
}

pub fn std_normal_logpdf(x: &[f64]) -> f64 {
    -0.5 * x.iter().map(|v| v * v).sum::<f64>() - 0.5 * x.len() as f64 * (2.0 * PI).ln()
}

#[derive(Clone, Debug)]
struct Coupling {
    mask: Vec<f64>,
    net: Mlp,
}

#[derive(Clone, Debug)]
struct MovingBatchNorm {
    log_gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    /// Running variance with `BN_EPS` already folded in.
    running_var: ParamId,
}

/// Invertible prior `P(Z_j)`: alternating coupling layers, each followed by a
/// moving batch normalization.
#[derive(Clone, Debug)]
pub struct PriorFlow {
    dim: usize,
    couplings: Vec<Coupling>,
    norms: Vec<MovingBatchNorm>,
}

/// Batch statistics gathered during a training-mode pass, applied to the
/// running averages after the optimizer step.
#[derive(Clone, Debug, Default)]
pub struct NormUpdates(Vec<(ParamId, ParamId, Vec<f64>, Vec<f64>)>);

impl NormUpdates {
    pub fn apply(&self, store: &mut ParamStore) {
        for (mean_id, var_id, mean, var) in &self.0 {
            let rm = store.get_mut(*mean_id);
            for (r, b) in rm.data.iter_mut().zip(mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            let rv = store.get_mut(*var_id);
            for (r, b) in rv.data.iter_mut().zip(var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * (b + BN_EPS);
            }
        }
    }

    pub fn extend(&mut self, other: NormUpdates) {
        self.0.extend(other.0);
    }
}

impl PriorFlow {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, layers: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut couplings = Vec::with_capacity(layers);
        let mut norms = Vec::with_capacity(layers);
        for l in 0..layers {
            let mask = (0..dim).map(|i| if i % 2 == l % 2 { 1.0 } else { 0.0 }).collect();
            let mut dims = vec![dim];
            dims.extend_from_slice(hidden);
            dims.push(2 * dim);
            let net = Mlp::new(store, &format!("{name}.{l}.coupling"), &dims, true, rng);
            couplings.push(Coupling { mask, net });
            norms.push(MovingBatchNorm {
                log_gamma: store.add(format!("{name}.{l}.bn.log_gamma"), Tensor::zeros(1, dim)),
                beta: store.add(format!("{name}.{l}.bn.beta"), Tensor::zeros(1, dim)),
                running_mean: store.add(format!("{name}.{l}.bn.running_mean"), Tensor::zeros(1, dim)),
                running_var: store.add(format!("{name}.{l}.bn.running_var"), Tensor::filled(1, dim, 1.0)),
            });
        }
        Self { dim, couplings, norms }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Running statistics: stored alongside the weights but never optimized.
    pub fn buffer_ids(&self) -> Vec<ParamId> {
        self.norms.iter().flat_map(|n| [n.running_mean, n.running_var]).collect()
    }

    fn coupling_terms(&self, g: &mut Graph, store: &ParamStore, l: usize, x: Var) -> (Var, Var) {
        let c = &self.couplings[l];
        let mask = g.input(Tensor::row_vector(c.mask.clone()));
        let inv = g.input(Tensor::row_vector(c.mask.iter().map(|m| 1.0 - m).collect()));
        let kept = g.mul_row(x, mask);
        let h = c.net.forward(g, store, kept);
        let raw_s = g.slice_cols(h, 0, self.dim);
        let raw_t = g.slice_cols(h, self.dim, self.dim);
        // Bounded log-scale keeps the inverse well conditioned.
        let s = g.tanh(raw_s);
        let s = g.mul_row(s, inv);
        let t = g.mul_row(raw_t, inv);
        (s, t)
    }

    /// Normalizing direction `z -> xi`, batched over rows. Returns `xi` and the
    /// per-row log-determinant (`rows x 1`). In training mode the batch
    /// statistics are used (rows > 1) and recorded in `updates`.
    pub fn normalize(&self, g: &mut Graph, store: &ParamStore, z: Var, updates: Option<&mut NormUpdates>) -> (Var, Var) {
        let rows = g.shape(z).0;
        let train = updates.is_some() && rows > 1;
        let mut recorded = Vec::new();
        let mut x = z;
        let mut logdet: Option<Var> = None;
        let mut add_logdet = |g: &mut Graph, ld: Var| {
            logdet = Some(match logdet {
                Some(acc) => g.add(acc, ld),
                None => ld,
            });
        };
        for l in 0..self.couplings.len() {
            let (s, t) = self.coupling_terms(g, store, l, x);
            let es = g.exp(s);
            let y = g.mul(x, es);
            x = g.add(y, t);
            let ld = g.sum_rows(s);
            add_logdet(g, ld);

            let bn = &self.norms[l];
            let (mean, var) = if train {
                let mean = g.mean_rows(x);
                let neg = g.scale(mean, -1.0);
                let centered = g.add_row(x, neg);
                let sq = g.square(centered);
                let var = g.mean_rows(sq);
                recorded.push((bn.running_mean, bn.running_var, g.value(mean).data.clone(), g.value(var).data.clone()));
                (mean, g.add_scalar(var, BN_EPS))
            } else {
                (g.input(store.get(bn.running_mean).clone()), g.input(store.get(bn.running_var).clone()))
            };
            let neg = g.scale(mean, -1.0);
            let centered = g.add_row(x, neg);
            let inv_std = g.powf(var, -0.5);
            let lg = g.param(store, bn.log_gamma);
            let gamma = g.exp(lg);
            let scale = g.mul(inv_std, gamma);
            let normed = g.mul_row(centered, scale);
            let beta = g.param(store, bn.beta);
            x = g.add_row(normed, beta);
            let log_var = g.log(var);
            let half = g.scale(log_var, -0.5);
            let per_dim = g.add(lg, half);
            let bn_ld = g.sum_all(per_dim);
            let zeros = g.input(Tensor::zeros(rows, 1));
            let ld = g.add_row(zeros, bn_ld);
            add_logdet(g, ld);
        }
        let logdet = logdet.unwrap_or_else(|| g.input(Tensor::zeros(rows, 1)));
        if let Some(u) = updates {
            u.0.extend(recorded);
        }
        (x, logdet)
    }

    /// `log P(z)` per row in the graph (`rows x 1`).
    pub fn log_prob_graph(&self, g: &mut Graph, store: &ParamStore, z: Var, updates: Option<&mut NormUpdates>) -> Var {
        let (xi, ld) = self.normalize(g, store, z, updates);
        let sq = g.square(xi);
        let ss = g.sum_rows(sq);
        let base = g.scale(ss, -0.5);
        let base = g.add_scalar(base, -0.5 * self.dim as f64 * (2.0 * PI).ln());
        g.add(base, ld)
    }

    fn check_rows(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        for r in rows {
            if r.len() != self.dim {
                return Err(Error::LengthMismatch(format!("flow expects {} dims, got {}", self.dim, r.len())));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::FlowOverflow);
            }
        }
        Ok(Tensor::from_rows(rows))
    }

    fn finite_rows(t: &Tensor, logdet: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        if !t.is_finite() || !logdet.is_finite() {
            return Err(Error::FlowOverflow);
        }
        Ok(((0..t.rows).map(|r| t.row(r).to_vec()).collect(), logdet.data.clone()))
    }

    /// `z -> (xi, log|det dxi/dz|)` with frozen statistics.
    pub fn inverse(&self, store: &ParamStore, z: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        if z.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let input = self.check_rows(z)?;
        let mut g = Graph::new();
        let zv = g.input(input);
        let (xi, ld) = self.normalize(&mut g, store, zv, None);
        Self::finite_rows(g.value(xi), g.value(ld))
    }

    /// `xi -> (z, log|det dz/dxi|)`: the generative direction.
    pub fn forward(&self, store: &ParamStore, xi: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        if xi.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let input = self.check_rows(xi)?;
        let rows = input.rows;
        let mut g = Graph::new();
        let mut x = g.input(input);
        let mut logdet = vec![0.0; rows];
        for l in (0..self.couplings.len()).rev() {
            let bn = &self.norms[l];
            let lg = store.get(bn.log_gamma);
            let rm = store.get(bn.running_mean);
            let rv = store.get(bn.running_var);
            let beta = store.get(bn.beta);
            let mut t = g.value(x).clone();
            for r in 0..rows {
                for (k, v) in t.row_mut(r).iter_mut().enumerate() {
                    *v = (*v - beta.data[k]) * (-lg.data[k]).exp() * rv.data[k].sqrt() + rm.data[k];
                }
            }
            let bn_ld: f64 = (0..self.dim).map(|k| -lg.data[k] + 0.5 * rv.data[k].ln()).sum();
            logdet.iter_mut().for_each(|v| *v += bn_ld);
            let y = g.input(t);
            // Kept coordinates pass through, so the coupling terms can be
            // recomputed from `y`.
            let (s, tv) = self.coupling_terms(&mut g, store, l, y);
            let (sv, ttv, yv) = (g.value(s).clone(), g.value(tv).clone(), g.value(y).clone());
            let mut out = yv.clone();
            for i in 0..out.data.len() {
                out.data[i] = (yv.data[i] - ttv.data[i]) * (-sv.data[i]).exp();
            }
            for (r, ld) in logdet.iter_mut().enumerate() {
                *ld -= sv.row(r).iter().sum::<f64>();
            }
            x = g.input(out);
        }
        Self::finite_rows(g.value(x), &Tensor::from_vec(rows, 1, logdet))
    }

    /// `log P(z)` per row with frozen statistics.
    pub fn log_prob(&self, store: &ParamStore, z: &[Vec<f64>]) -> Result<Vec<f64>> {
        let (xi, ld) = self.inverse(store, z)?;
        Ok(xi.iter().zip(ld).map(|(x, l)| std_normal_logpdf(x) + l).collect())
    }
}

/// Shared per-point network, per-part max-pool and per-part heads.
#[derive(Clone, Debug)]
pub struct PartEncoder {
    latent_dim: usize,
    point_net: Mlp,
    heads: Vec<Mlp>,
}

/// One canonical part to encode; `item` rows of the outputs follow input order.
pub struct EncodeItem<'a> {
    pub part: usize,
    pub points: &'a [Point],
}

/// Encoder outputs for a list of items, rows in item order.
pub struct EncodedRows {
    pub mu: Var,
    pub logvar: Var,
}

impl PartEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, m: usize, cfg: &StylizerConfig, rng: &mut R) -> Self {
        let mut dims = vec![3];
        dims.extend_from_slice(&cfg.point_hidden);
        let pooled = *dims.last().unwrap();
        let point_net = Mlp::new(store, &format!("{name}.point"), &dims, false, rng);
        let heads = (0..m)
            .map(|j| {
                let mut hd = vec![pooled];
                hd.extend_from_slice(&cfg.head_hidden);
                hd.push(2 * cfg.latent_dim);
                Mlp::new(store, &format!("{name}.head{j}"), &hd, false, rng)
            })
            .collect();
        Self { latent_dim: cfg.latent_dim, point_net, heads }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn m(&self) -> usize {
        self.heads.len()
    }

    /// Encodes non-empty canonical parts in one pass.
    pub fn encode_graph(&self, g: &mut Graph, store: &ParamStore, items: &[EncodeItem<'_>]) -> Result<EncodedRows> {
        let d = self.latent_dim;
        let mut rows = Vec::new();
        let mut segment = Vec::new();
        for (i, item) in items.iter().enumerate() {
            if item.points.is_empty() {
                return Err(Error::EmptyPart);
            }
            if item.part >= self.m() {
                return Err(Error::LabelOutOfRange { label: item.part, m: self.m() });
            }
            rows.extend(item.points.iter().flat_map(|p| p.iter().copied()));
            segment.extend(std::iter::repeat_n(i, item.points.len()));
        }
        let pts = g.input(Tensor::from_vec(segment.len(), 3, rows));
        let feats = self.point_net.forward_relu_all(g, store, pts);
        let pooled = g.segment_max(feats, &segment, items.len());

        // Each head processes the rows of its part; results are scattered back.
        let mut blocks = Vec::new();
        let mut order = Vec::with_capacity(items.len());
        for (j, head) in self.heads.iter().enumerate() {
            let idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].part == j).collect();
            if idx.is_empty() {
                continue;
            }
            order.extend(idx.iter().copied());
            let sel = g.gather_rows(pooled, Rc::new(idx));
            blocks.push(head.forward(g, store, sel));
        }
        let stacked = g.concat_rows(&blocks);
        let mut back = vec![0; items.len()];
        for (pos, &i) in order.iter().enumerate() {
            back[i] = pos;
        }
        let out = g.gather_rows(stacked, Rc::new(back));
        Ok(EncodedRows { mu: g.slice_cols(out, 0, d), logvar: g.slice_cols(out, d, d) })
    }

    /// Posterior mean and standard deviation of one canonical part.
    pub fn encode_part(&self, store: &ParamStore, part: usize, canonical: &[Point]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, store, &[EncodeItem { part, points: canonical }])?;
        let mu = g.value(enc.mu).data.clone();
        let sigma = g.value(enc.logvar).data.iter().map(|v| (0.5 * v).exp().max(SIGMA_FLOOR)).collect();
        Ok((mu, sigma))
    }
}

/// Encoders and priors for every part of a category.
#[derive(Clone, Debug)]
pub struct Stylizer {
    pub encoder: PartEncoder,
    pub flows: Vec<PriorFlow>,
}

impl Stylizer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, m: usize, cfg: &StylizerConfig, rng: &mut R) -> Self {
        let encoder = PartEncoder::new(store, "stylizer.encoder", m, cfg, rng);
        let flows = (0..m)
            .map(|j| PriorFlow::new(store, &format!("stylizer.flow{j}"), cfg.latent_dim, cfg.flow_layers, &cfg.flow_hidden, rng))
            .collect();
        Self { encoder, flows }
    }

    pub fn m(&self) -> usize {
        self.flows.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim()
    }

    pub fn buffer_ids(&self) -> Vec<ParamId> {
        self.flows.iter().flat_map(PriorFlow::buffer_ids).collect()
    }

    /// Deterministic encoding: `z` is the posterior mean.
    pub fn encode(&self, store: &ParamStore, canonical_parts: &[Vec<Point>]) -> Result<StyleLatentSet> {
        let m = self.m();
        let d = self.latent_dim();
        if canonical_parts.len() != m {
            return Err(Error::LengthMismatch(format!("expected {m} parts, got {}", canonical_parts.len())));
        }
        let present: Vec<bool> = canonical_parts.iter().map(|p| !p.is_empty()).collect();
        if !present.iter().any(|&p| p) {
            return Err(Error::EmptySet);
        }
        let items: Vec<EncodeItem<'_>> = canonical_parts
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.is_empty())
            .map(|(part, points)| EncodeItem { part, points })
            .collect();
        let mut g = Graph::new();
        let enc = self.encoder.encode_graph(&mut g, store, &items)?;
        let (mu_t, lv_t) = (g.value(enc.mu), g.value(enc.logvar));
        let mut out = StyleLatentSet::dummy(m, d);
        out.present = present;
        for (row, item) in items.iter().enumerate() {
            out.mu[item.part] = mu_t.row(row).to_vec();
            out.sigma[item.part] = lv_t.row(row).iter().map(|v| (0.5 * v).exp().max(SIGMA_FLOOR)).collect();
            out.z[item.part] = out.mu[item.part].clone();
        }
        Ok(out)
    }

    /// Draws `z_j = F_j(xi)` for every present part, consuming one standard
    /// normal vector per present part in index order.
    pub fn sample_latents<R: Rng + ?Sized>(&self, store: &ParamStore, present: &[bool], rng: &mut R) -> Result<StyleLatentSet> {
        let d = self.latent_dim();
        let mut z = vec![vec![0.0; d]; self.m()];
        for (j, &p) in present.iter().enumerate() {
            if p {
                z[j] = self.sample_part(store, j, rng)?;
            }
        }
        Ok(StyleLatentSet::from_latents(z, present.to_vec()))
    }

    pub fn sample_part<R: Rng + ?Sized>(&self, store: &ParamStore, j: usize, rng: &mut R) -> Result<Vec<f64>> {
        let xi = standard_normal(rng, self.latent_dim());
        let (z, _) = self.flows[j].forward(store, &[xi])?;
        Ok(z.into_iter().next().unwrap())
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

/// `z = mu + exp(logvar / 2) * noise` in the graph.
pub fn reparam_graph(g: &mut Graph, mu: Var, logvar: Var, noise: Tensor) -> Var {
    let eps = g.input(noise);
    let half = g.scale(logvar, 0.5);
    let sigma = g.exp(half);
    let spread = g.mul(sigma, eps);
    g.add(mu, spread)
}

/// One-sample estimate of `sum_j [-E_Q log P_j(z) - H(Q_j)]` in the graph.
///
/// `mu`/`logvar` rows belong to parts `parts[i]`; `noise` supplies the
/// reparameterization draws (same shape as `mu`). Returns the sum over rows.
pub fn kl_graph(
    g: &mut Graph,
    store: &ParamStore,
    flows: &[PriorFlow],
    mu: Var,
    logvar: Var,
    parts: &[usize],
    noise: Tensor,
    updates: Option<&mut NormUpdates>,
) -> Var {
    let z = reparam_graph(g, mu, logvar, noise);
    kl_from_sample(g, store, flows, z, logvar, parts, updates)
}

/// KL estimate given the reparameterized sample `z`.
pub fn kl_from_sample(
    g: &mut Graph,
    store: &ParamStore,
    flows: &[PriorFlow],
    z: Var,
    logvar: Var,
    parts: &[usize],
    mut updates: Option<&mut NormUpdates>,
) -> Var {
    let d = g.shape(z).1;
    let half = g.scale(logvar, 0.5);
    let mut acc = g.input(Tensor::scalar(0.0));
    for (j, flow) in flows.iter().enumerate() {
        let idx: Vec<usize> = (0..parts.len()).filter(|&i| parts[i] == j).collect();
        if idx.is_empty() {
            continue;
        }
        let zj = g.gather_rows(z, Rc::new(idx.clone()));
        let lp = flow.log_prob_graph(g, store, zj, updates.as_deref_mut());
        let hj = g.gather_rows(half, Rc::new(idx));
        let ent = g.sum_rows(hj);
        let ent = g.add_scalar(ent, 0.5 * d as f64 * (1.0 + (2.0 * PI).ln()));
        let total = g.add(lp, ent);
        let s = g.sum_all(total);
        acc = g.sub(acc, s);
    }
    acc
}

/// KL loss of a latent set against frozen priors, with caller-supplied
/// noise (one row per part; absent parts ignored).
pub fn kl_loss(store: &ParamStore, flows: &[PriorFlow], latents: &StyleLatentSet, noise: &[Vec<f64>]) -> Result<f64> {
    let rows: Vec<usize> = (0..latents.m()).filter(|&j| latents.present[j]).collect();
    if rows.is_empty() {
        return Ok(0.0);
    }
    let mu: Vec<Vec<f64>> = rows.iter().map(|&j| latents.mu[j].clone()).collect();
    let lv: Vec<Vec<f64>> = rows.iter().map(|&j| latents.sigma[j].iter().map(|s| 2.0 * s.max(SIGMA_FLOOR).ln()).collect()).collect();
    let eps: Vec<Vec<f64>> = rows.iter().map(|&j| noise[j].clone()).collect();
    let mut g = Graph::new();
    let mu = g.input(Tensor::from_rows(&mu));
    let lv = g.input(Tensor::from_rows(&lv));
    let loss = kl_graph(&mut g, store, flows, mu, lv, &rows, Tensor::from_rows(&eps), None);
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::FlowOverflow);
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg(d: usize) -> StylizerConfig {
        StylizerConfig { latent_dim: d, point_hidden: vec![16, 24], head_hidden: vec![16], flow_layers: 4, flow_hidden: vec![12, 12] }
    }

    fn perturb(store: &mut ParamStore, ids: &[ParamId], rng: &mut ChaCha8Rng, amp: f64) {
        for &id in ids {
            for v in store.get_mut(id).data.iter_mut() {
                *v += amp * rng.random_range(-1.0..1.0);
            }
        }
    }

    fn flow_params(store: &ParamStore, name: &str) -> Vec<ParamId> {
        store.ids_with_prefix(name).into_iter().filter(|&id| !store.name(id).contains("running")).collect()
    }

    fn perturbed_flow(d: usize, layers: usize, seed: u64) -> (ParamStore, PriorFlow) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let flow = PriorFlow::new(&mut store, "f", d, layers, &[8, 8], &mut rng);
        let ids = flow_params(&store, "f");
        perturb(&mut store, &ids, &mut rng, 0.3);
        // Non-trivial running statistics too.
        for id in flow.buffer_ids() {
            let is_var = store.name(id).ends_with("running_var");
            for v in store.get_mut(id).data.iter_mut() {
                *v = if is_var { rng.random_range(0.5..2.0) } else { rng.random_range(-0.5..0.5) };
            }
        }
        (store, flow)
    }

    #[test]
    fn identity_at_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let flow = PriorFlow::new(&mut store, "f", 6, 14, &[8, 8], &mut rng);
        let z: Vec<Vec<f64>> = (0..5).map(|_| standard_normal(&mut rng, 6)).collect();
        let (xi, ld) = flow.inverse(&store, &z).unwrap();
        assert_eq!(xi, z);
        assert!(ld.iter().all(|&l| l == 0.0));
        let lp = flow.log_prob(&store, &z).unwrap();
        for (l, zz) in lp.iter().zip(&z) {
            assert_eq!(*l, std_normal_logpdf(zz));
        }
        let (fz, _) = flow.forward(&store, &[vec![0.0; 6]]).unwrap();
        assert_eq!(fz[0], vec![0.0; 6]);
    }

    #[test]
    fn mode_of_identity_flow_is_forward_of_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let flow = PriorFlow::new(&mut store, "f", 4, 6, &[8], &mut rng);
        let (mode, _) = flow.forward(&store, &[vec![0.0; 4]]).unwrap();
        let best = flow.log_prob(&store, &mode).unwrap()[0];
        for _ in 0..100 {
            let z = standard_normal(&mut rng, 4);
            assert!(flow.log_prob(&store, &[z]).unwrap()[0] <= best);
        }
    }

    #[test]
    fn round_trip_after_perturbation() {
        let (store, flow) = perturbed_flow(8, 14, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xi: Vec<Vec<f64>> = (0..100).map(|_| standard_normal(&mut rng, 8)).collect();
        let (z, ld_f) = flow.forward(&store, &xi).unwrap();
        let (back, ld_i) = flow.inverse(&store, &z).unwrap();
        for i in 0..100 {
            for k in 0..8 {
                assert!((back[i][k] - xi[i][k]).abs() < 1e-5);
            }
            assert!((ld_f[i] + ld_i[i]).abs() < 1e-8);
        }
    }

    fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
        let n = a.len();
        let mut acc = 0.0;
        for c in 0..n {
            let p = (c..n).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
            a.swap(c, p);
            let piv = a[c][c];
            acc += piv.abs().ln();
            for r in c + 1..n {
                let f = a[r][c] / piv;
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
        acc
    }

    #[test]
    fn logdet_matches_finite_difference_jacobian() {
        let (store, flow) = perturbed_flow(4, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let xi = standard_normal(&mut rng, 4);
            let (_, ld) = flow.forward(&store, &[xi.clone()]).unwrap();
            let h = 1e-5;
            let mut jac = vec![vec![0.0; 4]; 4];
            for c in 0..4 {
                let (mut p, mut m) = (xi.clone(), xi.clone());
                p[c] += h;
                m[c] -= h;
                let (zp, _) = flow.forward(&store, &[p]).unwrap();
                let (zm, _) = flow.forward(&store, &[m]).unwrap();
                for r in 0..4 {
                    jac[r][c] = (zp[0][r] - zm[0][r]) / (2.0 * h);
                }
            }
            assert!((log_abs_det(jac) - ld[0]).abs() < 1e-3);
        }
    }

    #[test]
    fn density_integrates_to_one_in_2d() {
        let (store, flow) = perturbed_flow(2, 4, 5);
        let (lo, hi, n) = (-12.0, 12.0, 600);
        let step = (hi - lo) / n as f64;
        let grid: Vec<Vec<f64>> = (0..n)
            .flat_map(|i| (0..n).map(move |k| vec![lo + (i as f64 + 0.5) * step, lo + (k as f64 + 0.5) * step]))
            .collect();
        let lp = flow.log_prob(&store, &grid).unwrap();
        let mass: f64 = lp.iter().map(|l| l.exp()).sum::<f64>() * step * step;
        assert!((mass - 1.0).abs() < 1e-2, "{mass}");
    }

    #[test]
    fn training_mode_updates_running_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let flow = PriorFlow::new(&mut store, "f", 4, 2, &[8], &mut rng);
        let z: Vec<Vec<f64>> = (0..32).map(|_| standard_normal(&mut rng, 4).iter().map(|v| 3.0 + 2.0 * v).collect()).collect();
        let mut g = Graph::new();
        let zv = g.input(Tensor::from_rows(&z));
        let mut updates = NormUpdates::default();
        let (xi, _) = flow.normalize(&mut g, &store, zv, Some(&mut updates));
        // Batch-normalized output of the first layer has zero mean.
        let mean: f64 = g.value(xi).data.iter().sum::<f64>() / (32.0 * 4.0);
        assert!(mean.abs() < 1e-9);
        updates.apply(&mut store);
        let rm = store.get(store.id("f.0.bn.running_mean").unwrap());
        assert!(rm.data.iter().all(|&v| (v - 0.3).abs() < 0.15));
    }

    #[test]
    fn encoder_is_permutation_and_duplication_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let enc = PartEncoder::new(&mut store, "e", 2, &toy_cfg(8), &mut rng);
        let pts: Vec<Point> = (0..40).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let base = enc.encode_part(&store, 1, &pts).unwrap();
        let mut shuffled = pts.clone();
        shuffled.reverse();
        shuffled.swap(3, 17);
        assert_eq!(enc.encode_part(&store, 1, &shuffled).unwrap(), base);
        let doubled: Vec<Point> = pts.iter().chain(&pts).copied().collect();
        assert_eq!(enc.encode_part(&store, 1, &doubled).unwrap(), base);
        // Batched encoding agrees with single-part encoding.
        let other: Vec<Point> = pts.iter().map(|p| [p[0] * 2.0, p[1], -p[2]]).collect();
        let mut g = Graph::new();
        let rows = enc
            .encode_graph(&mut g, &store, &[EncodeItem { part: 0, points: &other }, EncodeItem { part: 1, points: &pts }])
            .unwrap();
        assert_eq!(g.value(rows.mu).row(1), &base.0[..]);
    }

    #[test]
    fn encoder_sigma_is_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let enc = PartEncoder::new(&mut store, "e", 1, &toy_cfg(4), &mut rng);
        for _ in 0..1000 {
            let n = rng.random_range(1..6);
            let pts: Vec<Point> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-5.0..5.0))).collect();
            let (_, s) = enc.encode_part(&store, 0, &pts).unwrap();
            assert!(s.iter().all(|&v| v > 0.0));
        }
        assert!(matches!(enc.encode_part(&store, 0, &[]), Err(Error::EmptyPart)));
    }

    #[test]
    fn reparam_sample_cases() {
        let mu = vec![1.0, -2.0];
        assert_eq!(reparam_sample(&mu, &[0.5, 2.0], &[0.0, 0.0]), mu);
        let z = reparam_sample(&mu, &[0.0, 0.0], &[3.0, -3.0]);
        assert!(z.iter().zip(&mu).all(|(a, b)| (a - b).abs() < 1e-5));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let sigma = [0.5, 2.0];
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let z = reparam_sample(&mu, &sigma, &standard_normal(&mut rng, 2));
            for k in 0..2 {
                sum[k] += z[k];
                sq[k] += z[k] * z[k];
            }
        }
        for k in 0..2 {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            let se_mean = sigma[k] / (n as f64).sqrt();
            let se_var = sigma[k] * sigma[k] * (2.0 / n as f64).sqrt();
            assert!((mean - mu[k]).abs() < 3.0 * se_mean);
            assert!((var - sigma[k] * sigma[k]).abs() < 3.0 * se_var);
        }
    }

    #[test]
    fn entropy_matches_quadrature_in_1d() {
        let sigma = 0.7;
        let (lo, hi, n) = (-10.0, 10.0, 200_000);
        let step = (hi - lo) / n as f64;
        let mut h = 0.0;
        for i in 0..n {
            let x: f64 = lo + (i as f64 + 0.5) * step;
            let lp = -0.5 * (x / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * PI).ln();
            h -= lp.exp() * lp * step;
        }
        assert!((gaussian_entropy(&[sigma]) - h).abs() < 1e-6);
    }

    fn mc_kl(mu0: Vec<f64>) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let d = mu0.len();
        let flows = vec![PriorFlow::new(&mut store, "f", d, 4, &[8], &mut rng)];
        let latents = StyleLatentSet { z: vec![mu0.clone()], present: vec![true], mu: vec![mu0], sigma: vec![vec![1.0; d]] };
        let n = 10_000;
        (0..n).map(|_| kl_loss(&store, &flows, &latents, &[standard_normal(&mut rng, d)]).unwrap()).sum::<f64>() / n as f64
    }

    #[test]
    fn kl_matches_closed_form_for_identity_prior() {
        assert!(mc_kl(vec![0.0; 4]).abs() < 0.05);
        let mu0 = vec![1.0, -0.5, 0.25, 2.0];
        let expect = mu0.iter().map(|v| v * v).sum::<f64>() / 2.0;
        assert!((mc_kl(mu0) - expect).abs() < 0.1);
    }

    #[test]
    fn kl_of_absent_parts_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let flows: Vec<PriorFlow> = (0..3).map(|j| PriorFlow::new(&mut store, &format!("f{j}"), 4, 2, &[8], &mut rng)).collect();
        let latents = StyleLatentSet::dummy(3, 4);
        assert_eq!(kl_loss(&store, &flows, &latents, &vec![vec![1.0; 4]; 3]).unwrap(), 0.0);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let (store, flow) = perturbed_flow(4, 4, 13);
        let flows = vec![flow];
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mu = Tensor::from_rows(&[standard_normal(&mut rng, 4), standard_normal(&mut rng, 4)]);
        let lv = Tensor::from_rows(&[standard_normal(&mut rng, 4), standard_normal(&mut rng, 4)]).map(|v| 0.3 * v);
        let noise = Tensor::from_rows(&[standard_normal(&mut rng, 4), standard_normal(&mut rng, 4)]);
        let err = gradcheck::check(
            &[mu, lv],
            |g, v| kl_graph(g, &store, &flows, v[0], v[1], &[0, 0], noise.clone(), None),
            1e-6,
        );
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn stylizer_encode_masks_absent_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut store = ParamStore::new();
        let sty = Stylizer::new(&mut store, 3, &toy_cfg(4), &mut rng);
        let part: Vec<Point> = (0..10).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let latents = sty.encode(&store, &[part.clone(), Vec::new(), part]).unwrap();
        assert_eq!(latents.present, vec![true, false, true]);
        assert_eq!(latents.z[1], vec![0.0; 4]);
        assert_eq!(latents.z[0], latents.mu[0]);
        assert!(sty.encode(&store, &[Vec::new(), Vec::new(), Vec::new()]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn flow_inverts(seed in 0u64..1000, scale in 0.1f64..3.0) {
            let (store, flow) = perturbed_flow(6, 6, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let xi: Vec<Vec<f64>> = (0..8).map(|_| standard_normal(&mut rng, 6).iter().map(|v| v * scale).collect()).collect();
            let (z, lf) = flow.forward(&store, &xi).unwrap();
            let (back, li) = flow.inverse(&store, &z).unwrap();
            for i in 0..8 {
                for k in 0..6 {
                    prop_assert!((back[i][k] - xi[i][k]).abs() < 1e-5);
                }
                prop_assert!((lf[i] + li[i]).abs() < 1e-6);
            }
        }
    }
}
