//! Two-stage training.
//!
//! Stage 1 fits the encoders, priors and denoiser with ground-truth
//! transforms as conditioning. Stage 2 freezes them and fits the
//! transformation sampler by best-of-K code matching.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::config::TrainConfig;
use crate::data::{Point, SegmentedCloud, TransformSet};
use crate::denoiser::{diffuse_shape_at, loss_weights, noise_loss_graph, stratified_timesteps, DenoiseInput};
use crate::error::{Error, Result};
use crate::model::PartGen;
use crate::nn::{Adam, Graph, Mode, Tensor};
use crate::sampler::{cimle_select, fit_loss_graph, NoiseCode};
use crate::stylizer::{kl_from_sample, reparam_graph, standard_normal, EncodeItem, NormUpdates, StyleLatentSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
    /// Stage 1: diffusion loss. Stage 2: unused (zero).
    pub recon: f64,
    pub kl: f64,
    /// Stage 2: mean fit loss against the cached codes.
    pub fit: f64,
    pub lr: f64,
}

/// A training shape split into canonical parts and transforms.
#[derive(Clone, Debug)]
pub struct PreparedShape {
    pub cloud: SegmentedCloud,
    pub canonical: Vec<Vec<Point>>,
    pub tau: TransformSet,
}

impl PreparedShape {
    pub fn new(cloud: &SegmentedCloud) -> Self {
        let (canonical, tau) = cloud.canonical_parts();
        Self { cloud: cloud.clone(), canonical, tau }
    }
}

fn check_shapes(model: &PartGen, shapes: &[SegmentedCloud]) -> Result<()> {
    if shapes.is_empty() {
        return Err(Error::EmptySet);
    }
    if let Some(s) = shapes.iter().find(|s| s.m() != model.m()) {
        return Err(Error::InvalidArgument(format!("shape has m = {}, model expects {}", s.m(), model.m())));
    }
    Ok(())
}

fn divergence(epoch: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, what: format!("{what} = {v}") })
    }
}

/// Stage-1 loss terms for one batch; parameters are left untouched.
struct Stage1Step {
    graph: Graph,
    loss: crate::nn::Var,
    recon: f64,
    kl: f64,
    updates: NormUpdates,
}

fn stage1_batch(model: &PartGen, batch: &[&PreparedShape], lambda1: f64, rng: &mut ChaCha8Rng) -> Result<Stage1Step> {
    let (m, d) = (model.m(), model.config.stylizer.latent_dim);
    let store = &model.store;
    let mut g = Graph::new();
    let mut items = Vec::new();
    let mut slot = vec![usize::MAX; batch.len() * m];
    for (b, s) in batch.iter().enumerate() {
        for (j, part) in s.canonical.iter().enumerate() {
            if !part.is_empty() {
                slot[b * m + j] = items.len();
                items.push(EncodeItem { part: j, points: part });
            }
        }
    }
    let parts: Vec<usize> = items.iter().map(|i| i.part).collect();
    let enc = model.stylizer.encoder.encode_graph(&mut g, store, &items)?;
    let noise: Vec<f64> = standard_normal(rng, items.len() * d);
    let z = reparam_graph(&mut g, enc.mu, enc.logvar, Tensor::from_vec(items.len(), d, noise));
    let mut updates = NormUpdates::default();
    let kl = kl_from_sample(&mut g, store, &model.stylizer.flows, z, enc.logvar, &parts, Some(&mut updates));

    let dummy = g.input(Tensor::zeros(1, d));
    let zall = g.concat_rows(&[z, dummy]);
    let rows: Vec<usize> = slot.iter().map(|&s| if s == usize::MAX { items.len() } else { s }).collect();
    let zctx = g.gather_rows(zall, Rc::new(rows));

    let ts = stratified_timesteps(batch.len(), model.schedule.steps(), rng);
    let mut noisy = Vec::with_capacity(batch.len());
    for (s, &t) in batch.iter().zip(&ts) {
        noisy.push(diffuse_shape_at(s.cloud.points(), s.cloud.labels(), &s.tau, &model.schedule, t, rng)?);
    }
    let inputs: Vec<DenoiseInput<'_>> = batch
        .iter()
        .zip(&noisy)
        .map(|(s, n)| DenoiseInput { xt: &n.xt, labels: s.cloud.labels(), tau: &s.tau, t: n.t })
        .collect();
    let mut mode = Mode { dropout: model.config.denoiser.dropout, rng: Some(rng) };
    let pred = model.denoiser.forward_graph(&mut g, store, &inputs, zctx, &mut mode);
    let eps: Vec<Point> = noisy.iter().flat_map(|n| n.eps.iter().copied()).collect();
    let weights: Vec<f64> = batch.iter().flat_map(|s| loss_weights(s.cloud.labels(), m)).collect();
    let recon_sum = noise_loss_graph(&mut g, pred, &eps, &weights);

    let inv_b = 1.0 / batch.len() as f64;
    let recon = g.scale(recon_sum, inv_b);
    let kl_mean = g.scale(kl, inv_b);
    let weighted = g.scale(kl_mean, lambda1);
    let loss = g.add(recon, weighted);
    let (recon, kl) = (g.value(recon).item(), g.value(kl_mean).item());
    Ok(Stage1Step { graph: g, loss, recon, kl, updates })
}

/// Trains encoders, priors and denoiser. `on_epoch` sees every epoch's means.
pub fn train_stage1(model: &mut PartGen, shapes: &[SegmentedCloud], cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    check_shapes(model, shapes)?;
    let prepared: Vec<PreparedShape> = shapes.iter().map(PreparedShape::new).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.beta1, cfg.beta2, cfg.clip_norm);
    let trainable: Vec<_> = model.stylizer_params().into_iter().chain(model.denoiser_params()).collect();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut logs = Vec::with_capacity(cfg.stage1_epochs);
    for epoch in 0..cfg.stage1_epochs {
        order.shuffle(&mut rng);
        let lr = cfg.stage1_lr(epoch);
        let (mut loss_sum, mut recon_sum, mut kl_sum, mut batches) = (0.0, 0.0, 0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedShape> = chunk.iter().map(|&i| &prepared[i]).collect();
            let step = stage1_batch(model, &batch, cfg.lambda1, &mut rng)?;
            let loss = step.graph.value(step.loss).item();
            divergence(epoch, "stage-1 loss", loss)?;
            let grads = step.graph.backward(step.loss);
            opt.step(&mut model.store, &grads, &trainable, lr);
            step.updates.apply(&mut model.store);
            loss_sum += loss;
            recon_sum += step.recon;
            kl_sum += step.kl;
            batches += 1;
        }
        let n = batches as f64;
        let log = EpochLog { stage: 1, epoch, loss: loss_sum / n, recon: recon_sum / n, kl: kl_sum / n, fit: 0.0, lr };
        on_epoch(&log);
        logs.push(log);
    }
    model.provenance.stage = 1;
    model.provenance.epoch = cfg.stage1_epochs;
    model.provenance.seed = cfg.seed;
    model.provenance.config_hash = cfg.hash();
    model.quantize();
    info!(epochs = cfg.stage1_epochs, "stage 1 finished");
    Ok(logs)
}

/// Frozen-encoder inputs for the transformation sampler.
pub fn encode_training_set(model: &PartGen, shapes: &[SegmentedCloud]) -> Result<(Vec<StyleLatentSet>, Vec<TransformSet>)> {
    let mut latents = Vec::with_capacity(shapes.len());
    let mut taus = Vec::with_capacity(shapes.len());
    for s in shapes {
        let (canonical, tau) = s.canonical_parts();
        latents.push(model.stylizer.encode(&model.store, &canonical)?);
        taus.push(tau);
    }
    Ok((latents, taus))
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub logs: Vec<EpochLog>,
    /// Best code per training shape from the last recache.
    pub codes: Vec<NoiseCode>,
}

/// Trains the transformation sampler with everything else frozen.
pub fn train_stage2(model: &mut PartGen, shapes: &[SegmentedCloud], cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Stage2Outcome> {
    cfg.validate()?;
    check_shapes(model, shapes)?;
    let (latents, taus) = encode_training_set(model, shapes)?;
    let noise_dim = model.sampler.noise_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut opt = Adam::new(cfg.beta1, cfg.beta2, cfg.clip_norm);
    let trainable = model.sampler_params();
    let mut codes = vec![NoiseCode::zeros(noise_dim); shapes.len()];
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    let mut logs = Vec::with_capacity(cfg.stage2_epochs);
    for epoch in 0..cfg.stage2_epochs {
        if cfg.direct_regression {
            // No selection: every shape regresses onto its target from a
            // fresh random code, so the sampler learns to ignore the code.
            for c in codes.iter_mut() {
                *c = NoiseCode::sample(&mut rng, noise_dim);
            }
        } else if epoch % cfg.recache_every == 0 {
            for i in 0..shapes.len() {
                codes[i] = cimle_select(&model.sampler, &model.store, &latents[i], &taus[i], cfg.k, &mut rng)?.0;
            }
        }
        order.shuffle(&mut rng);
        let (mut fit_sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let ls: Vec<&StyleLatentSet> = chunk.iter().map(|&i| &latents[i]).collect();
            let refs: Vec<&TransformSet> = chunk.iter().map(|&i| &taus[i]).collect();
            let ys = g.input(Tensor::from_rows(&chunk.iter().map(|&i| codes[i].0.clone()).collect::<Vec<_>>()));
            let mut mode = Mode { dropout: model.config.sampler.dropout, rng: Some(&mut rng) };
            let pred = model.sampler.forward_graph(&mut g, &model.store, &ls, ys, &mut mode);
            let fit = fit_loss_graph(&mut g, pred, &refs);
            let fit = g.scale(fit, 1.0 / chunk.len() as f64);
            let loss = g.scale(fit, cfg.lambda2);
            let fv = g.value(fit).item();
            divergence(epoch, "stage-2 fit loss", fv)?;
            let grads = g.backward(loss);
            opt.step(&mut model.store, &grads, &trainable, cfg.stage2_lr);
            fit_sum += fv;
            batches += 1;
        }
        let fit = fit_sum / batches as f64;
        let log = EpochLog { stage: 2, epoch, loss: cfg.lambda2 * fit, recon: 0.0, kl: 0.0, fit, lr: cfg.stage2_lr };
        on_epoch(&log);
        logs.push(log);
    }
    model.provenance.stage = 2;
    model.provenance.epoch = cfg.stage2_epochs;
    model.provenance.config_hash = cfg.hash();
    model.quantize();
    info!(epochs = cfg.stage2_epochs, direct = cfg.direct_regression, "stage 2 finished");
    Ok(Stage2Outcome { logs, codes })
}
