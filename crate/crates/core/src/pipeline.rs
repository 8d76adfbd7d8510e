//! Inference on a trained model: unconditional generation, encoding into an
//! editable session, and the part-level edits.
//!
//! Random draws per shape always happen in the same order: a prior sample
//! for each part that needs a fresh latent (ascending part index), then the
//! sampler code `y`, then the diffusion draws (start points, then per-step
//! noise). Anything supplied by the caller is simply skipped.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SegmentedCloud, TransformSet};
use crate::denoiser::ancestral_sample_clipped;
#[cfg(test)]
use crate::denoiser::ancestral_sample;
use crate::error::{Error, Result};
use crate::model::PartGen;
use crate::nn::{Graph, Mode, Tensor};
use crate::sampler::{cimle_select, NoiseCode};
use crate::stylizer::StyleLatentSet;

/// Everything needed to regenerate a shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSession {
    pub latents: StyleLatentSet,
    pub tau: TransformSet,
    /// Sampler code behind `tau`. For an encoded shape `tau` is the observed
    /// one and this is the candidate code that reproduces it best.
    pub y: Option<NoiseCode>,
    /// Points to generate per part (zero for absent parts).
    pub part_sizes: Vec<usize>,
}

impl EditSession {
    pub fn m(&self) -> usize {
        self.part_sizes.len()
    }

    pub fn present(&self) -> &[bool] {
        &self.latents.present
    }
}

/// Caller-fixed pieces of a generation.
#[derive(Clone, Debug, Default)]
pub struct GenerateOptions {
    /// Per-part latents; `None` entries are drawn from the prior.
    pub latents: Option<Vec<Option<Vec<f64>>>>,
    pub y: Option<NoiseCode>,
    /// Overrides the sampler entirely (no `y` is drawn).
    pub transforms: Option<TransformSet>,
}

/// Splits `total` points as evenly as possible over `m` parts.
pub fn even_split(total: usize, m: usize) -> Vec<usize> {
    (0..m).map(|j| total / m + usize::from(j < total % m)).collect()
}

fn labels_for(sizes: &[usize]) -> Vec<usize> {
    sizes.iter().enumerate().flat_map(|(j, &n)| std::iter::repeat_n(j, n)).collect()
}

fn check_sizes(model: &PartGen, sizes: &[usize]) -> Result<Vec<bool>> {
    if sizes.len() != model.m() {
        return Err(Error::LengthMismatch(format!("expected {} part sizes, got {}", model.m(), sizes.len())));
    }
    if sizes.iter().all(|&n| n == 0) {
        return Err(Error::EmptySet);
    }
    Ok(sizes.iter().map(|&n| n > 0).collect())
}

fn check_latent(model: &PartGen, z: &[f64]) -> Result<()> {
    let d = model.config.stylizer.latent_dim;
    if z.len() != d {
        return Err(Error::LengthMismatch(format!("latent has {} dims, expected {d}", z.len())));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite latent".into()));
    }
    Ok(())
}

fn transforms_for<R: Rng + ?Sized>(model: &PartGen, latents: &StyleLatentSet, y: Option<NoiseCode>, rng: &mut R) -> Result<(TransformSet, NoiseCode)> {
    let y = y.unwrap_or_else(|| NoiseCode::sample(rng, model.sampler.noise_dim()));
    let tau = model.sampler.sample_transforms(&model.store, latents, &y)?;
    Ok((tau, y))
}

/// Runs the reverse chain for one session.
pub fn render<R: Rng + ?Sized>(model: &PartGen, session: &EditSession, rng: &mut R) -> Result<SegmentedCloud> {
    let present = check_sizes(model, &session.part_sizes)?;
    if present != session.latents.present || present != session.tau.present {
        return Err(Error::PresenceMismatch);
    }
    let labels = labels_for(&session.part_sizes);
    let latents = &session.latents;
    let points = ancestral_sample_clipped(&model.schedule, std::slice::from_ref(&labels), std::slice::from_ref(&session.tau), model.config.sample_clip, rng, |inputs| {
        model.denoiser.predict_batch(&model.store, inputs, &[latents])
    })?
    .remove(0);
    SegmentedCloud::new(points, labels, model.config.class_id.clone(), model.m())
}

/// One generated shape together with the state that produced it.
pub fn generate_one<R: Rng + ?Sized>(model: &PartGen, part_sizes: &[usize], opts: &GenerateOptions, rng: &mut R) -> Result<(SegmentedCloud, EditSession)> {
    let present = check_sizes(model, part_sizes)?;
    let d = model.config.stylizer.latent_dim;
    let fixed = opts.latents.clone().unwrap_or_else(|| vec![None; model.m()]);
    if fixed.len() != model.m() {
        return Err(Error::LengthMismatch(format!("expected {} latent slots", model.m())));
    }
    let mut z = vec![vec![0.0; d]; model.m()];
    for (j, (&p, f)) in present.iter().zip(&fixed).enumerate() {
        if !p {
            continue;
        }
        z[j] = match f {
            Some(v) => {
                check_latent(model, v)?;
                v.clone()
            }
            None => model.stylizer.sample_part(&model.store, j, rng)?,
        };
    }
    let latents = StyleLatentSet::from_latents(z, present.clone());
    let (tau, y) = match &opts.transforms {
        Some(t) => {
            if t.present != present {
                return Err(Error::PresenceMismatch);
            }
            (t.clone(), None)
        }
        None => {
            let (t, y) = transforms_for(model, &latents, opts.y.clone(), rng)?;
            (t, Some(y))
        }
    };
    let session = EditSession { latents, tau, y, part_sizes: part_sizes.to_vec() };
    let cloud = render(model, &session, rng)?;
    Ok((cloud, session))
}

/// `n` shapes, generated one after another from the same stream.
pub fn generate<R: Rng + ?Sized>(model: &PartGen, n: usize, part_sizes: &[usize], opts: &GenerateOptions, rng: &mut R) -> Result<Vec<SegmentedCloud>> {
    (0..n).map(|_| generate_one(model, part_sizes, opts, rng).map(|(c, _)| c)).collect()
}

/// Candidate codes tried when caching a code for an encoded shape.
pub const ENCODE_CANDIDATES: usize = 64;
const ENCODE_SEED: u64 = 0x00c0_de5e;

/// Deterministic encoding: posterior-mean latents, observed transforms, and
/// the best of a fixed set of candidate codes for them. Edits that go
/// through the sampler start from that code rather than from an arbitrary
/// one.
pub fn encode_shape(model: &PartGen, shape: &SegmentedCloud) -> Result<EditSession> {
    if shape.m() != model.m() {
        return Err(Error::InvalidArgument(format!("shape has m = {}, model expects {}", shape.m(), model.m())));
    }
    let (canonical, tau) = shape.canonical_parts();
    let latents = model.stylizer.encode(&model.store, &canonical)?;
    let part_sizes = shape.part_sizes().iter().zip(&tau.present).map(|(&n, &p)| if p { n } else { 0 }).collect();
    let (y, _) = cimle_select(&model.sampler, &model.store, &latents, &tau, ENCODE_CANDIDATES, &mut ChaCha8Rng::seed_from_u64(ENCODE_SEED))?;
    Ok(EditSession { latents, tau, y: Some(y), part_sizes })
}

fn check_part(session: &EditSession, j: usize) -> Result<()> {
    if j >= session.m() {
        return Err(Error::InvalidArgument(format!("part {j} out of range (m = {})", session.m())));
    }
    if !session.present()[j] {
        return Err(Error::AbsentPart { part: j });
    }
    Ok(())
}

/// Redraws the latents of `parts` from their priors, draws a new code and
/// transforms, and regenerates. An empty subset keeps the transforms and
/// just re-renders.
pub fn resample_parts<R: Rng + ?Sized>(model: &PartGen, session: &EditSession, parts: &[usize], rng: &mut R) -> Result<(SegmentedCloud, EditSession)> {
    let mut subset = parts.to_vec();
    subset.sort_unstable();
    subset.dedup();
    for &j in &subset {
        check_part(session, j)?;
    }
    let mut next = session.clone();
    for &j in &subset {
        let z = model.stylizer.sample_part(&model.store, j, rng)?;
        next.latents.mu[j] = z.clone();
        next.latents.sigma[j] = vec![0.0; z.len()];
        next.latents.z[j] = z;
    }
    if !subset.is_empty() {
        let (tau, y) = transforms_for(model, &next.latents, None, rng)?;
        next.tau = tau;
        next.y = Some(y);
    }
    let cloud = render(model, &next, rng)?;
    Ok((cloud, next))
}

/// Part `j` comes from `donors[assignment[j]]`; transforms are drawn afresh.
pub fn mix_parts<R: Rng + ?Sized>(model: &PartGen, donors: &[&EditSession], assignment: &[usize], rng: &mut R) -> Result<(SegmentedCloud, EditSession)> {
    let m = model.m();
    if assignment.len() != m {
        return Err(Error::LengthMismatch(format!("assignment must name a donor for each of {m} parts")));
    }
    let d = model.config.stylizer.latent_dim;
    let mut z = vec![vec![0.0; d]; m];
    let mut present = vec![false; m];
    let mut sizes = vec![0; m];
    for (j, &a) in assignment.iter().enumerate() {
        let donor = donors.get(a).ok_or_else(|| Error::InvalidArgument(format!("part {j} assigned to unknown donor {a}")))?;
        if donor.m() != m {
            return Err(Error::InvalidArgument(format!("donor {a} has m = {}", donor.m())));
        }
        if donor.present()[j] {
            z[j] = donor.latents.z[j].clone();
            present[j] = true;
            sizes[j] = donor.part_sizes[j];
        }
    }
    if !present.iter().any(|&p| p) {
        return Err(Error::EmptySet);
    }
    let latents = StyleLatentSet::from_latents(z, present);
    let (tau, y) = transforms_for(model, &latents, None, rng)?;
    let session = EditSession { latents, tau, y: Some(y), part_sizes: sizes };
    let cloud = render(model, &session, rng)?;
    Ok((cloud, session))
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub cloud: SegmentedCloud,
    pub session: EditSession,
}

/// `steps + 1` frames moving part `j`'s latent linearly from the session's
/// value to `target`. The code `y` and the diffusion noise are shared by
/// every frame, so only the latent changes along the path.
pub fn interpolate_part<R: Rng + Clone>(model: &PartGen, session: &EditSession, j: usize, target: &[f64], steps: usize, rng: &mut R) -> Result<Vec<Frame>> {
    check_part(session, j)?;
    check_latent(model, target)?;
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be positive".into()));
    }
    let y = session.y.clone().unwrap_or_else(|| NoiseCode::sample(rng, model.sampler.noise_dim()));
    let start = session.latents.z[j].clone();
    let mut frames = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let w = k as f64 / steps as f64;
        let zk: Vec<f64> = start.iter().zip(target).map(|(a, b)| (1.0 - w) * a + w * b).collect();
        let mut next = session.clone();
        next.latents.sigma[j] = vec![0.0; zk.len()];
        next.latents.mu[j] = zk.clone();
        next.latents.z[j] = zk;
        next.tau = model.sampler.sample_transforms(&model.store, &next.latents, &y)?;
        next.y = Some(y.clone());
        let cloud = render(model, &next, &mut rng.clone())?;
        frames.push(Frame { cloud, session: next });
    }
    Ok(frames)
}

/// Targets for some components of one part's transform.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartConstraint {
    #[serde(default)]
    pub shift: [Option<f64>; 3],
    #[serde(default)]
    pub scale: [Option<f64>; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformEditOptions {
    pub max_iters: usize,
    pub lr: f64,
    /// Weight on `|y|^2`.
    pub reg: f64,
    /// Constraint residual below which the edit counts as converged.
    pub tol: f64,
}

impl Default for TransformEditOptions {
    fn default() -> Self {
        Self { max_iters: 300, lr: 0.05, reg: 0.01, tol: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct TransformEdit {
    pub cloud: SegmentedCloud,
    pub session: EditSession,
    /// Sum of squared constraint errors (log space for scales) at the result.
    pub residual: f64,
    pub converged: bool,
    /// Objective after each accepted iteration, starting with the initial value.
    pub objective: Vec<f64>,
}

struct Targets {
    target: Tensor,
    mask: Tensor,
}

fn build_targets(model: &PartGen, session: &EditSession, constraints: &BTreeMap<usize, PartConstraint>) -> Result<Targets> {
    let m = model.m();
    let mut target = Tensor::zeros(m, 6);
    let mut mask = Tensor::zeros(m, 6);
    for (&j, c) in constraints {
        check_part(session, j)?;
        for a in 0..3 {
            if let Some(v) = c.shift[a] {
                if !v.is_finite() {
                    return Err(Error::InvalidArgument(format!("part {j}: non-finite shift target")));
                }
                target.set(j, a, v);
                mask.set(j, a, 1.0);
            }
            if let Some(v) = c.scale[a] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::InvalidArgument(format!("part {j}: scale targets must be positive")));
                }
                target.set(j, 3 + a, v.ln());
                mask.set(j, 3 + a, 1.0);
            }
        }
    }
    Ok(Targets { target, mask })
}

/// (objective, residual, d objective / d y)
fn evaluate(model: &PartGen, latents: &StyleLatentSet, targets: &Targets, y: &[f64], reg: f64) -> (f64, f64, Vec<f64>) {
    let mut g = Graph::new();
    let yv = g.leaf(Tensor::row_vector(y.to_vec()));
    let pred = model.sampler.forward_graph(&mut g, &model.store, &[latents], yv, &mut Mode::<ChaCha8Rng>::eval());
    let tv = g.input(targets.target.clone());
    let mv = g.input(targets.mask.clone());
    let diff = g.sub(pred, tv);
    let diff = g.mul(diff, mv);
    let sq = g.square(diff);
    let residual = g.sum_all(sq);
    let ysq = g.square(yv);
    let ysum = g.sum_all(ysq);
    let penalty = g.scale(ysum, reg);
    let obj = g.add(residual, penalty);
    let grads = g.backward(obj);
    let grad = grads.get(yv).map_or_else(|| vec![0.0; y.len()], |t| t.data.clone());
    (g.value(obj).item(), g.value(residual).item(), grad)
}

/// Optimizes the sampler code `y` so the predicted transforms meet the
/// constraints, then regenerates with those transforms. Steps that would
/// raise the objective are retried with half the step size, so the
/// recorded objective never increases.
pub fn edit_transform<R: Rng + ?Sized>(
    model: &PartGen,
    session: &EditSession,
    constraints: &BTreeMap<usize, PartConstraint>,
    opts: &TransformEditOptions,
    rng: &mut R,
) -> Result<TransformEdit> {
    let targets = build_targets(model, session, constraints)?;
    let dim = model.sampler.noise_dim();
    let mut y = session.y.clone().map_or_else(|| vec![0.0; dim], |c| c.0);
    if y.len() != dim {
        return Err(Error::LengthMismatch(format!("session code has {} dims, expected {dim}", y.len())));
    }
    let latents = &session.latents;
    let (mut obj, mut residual, mut grad) = evaluate(model, latents, &targets, &y, opts.reg);
    let mut history = vec![obj];
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m1 = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    let mut lr = opts.lr;
    for it in 1..=opts.max_iters {
        // Once the constraints hold, the regularizer alone would only drag y away.
        if residual < opts.tol {
            break;
        }
        for i in 0..dim {
            m1[i] = b1 * m1[i] + (1.0 - b1) * grad[i];
            m2[i] = b2 * m2[i] + (1.0 - b2) * grad[i] * grad[i];
        }
        let c1 = 1.0 - b1.powi(it as i32);
        let c2 = 1.0 - b2.powi(it as i32);
        let dir: Vec<f64> = (0..dim).map(|i| (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps)).collect();
        let mut accepted = false;
        for _ in 0..12 {
            let cand: Vec<f64> = y.iter().zip(&dir).map(|(v, d)| v - lr * d).collect();
            let (o, r, g) = evaluate(model, latents, &targets, &cand, opts.reg);
            if o.is_finite() && o <= obj {
                (y, obj, residual, grad) = (cand, o, r, g);
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
        history.push(obj);
    }
    let mut next = session.clone();
    let code = NoiseCode(y);
    next.tau = model.sampler.sample_transforms(&model.store, latents, &code)?;
    next.y = Some(code);
    let cloud = render(model, &next, rng)?;
    Ok(TransformEdit { cloud, session: next, residual, converged: residual < opts.tol, objective: history })
}
