//! Closed-form forward/reverse diffusion with a shifted and scaled terminal
//! Gaussian `N(mu, Diag(sigma^2))`.
//!
//! Timesteps are 1-based throughout: `t = 1..=T`, with `alpha_bar(0) = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Timestep count used by the reference models.
pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_ALPHA_START: f64 = 0.9999;
pub const DEFAULT_ALPHA_END: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
    eta2: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear schedule of `alpha` from `a_start` at `t = 1` to `a_end` at `t = steps`.
    pub fn linear(steps: usize, a_start: f64, a_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(0.0 < a_end && a_end <= a_start && a_start < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule requires 0 < a_end <= a_start < 1, got {a_start} -> {a_end}"
            )));
        }
        let alpha: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    a_start
                } else {
                    a_start + (a_end - a_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_alphas(alpha))
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_ALPHA_START, DEFAULT_ALPHA_END).expect("valid default schedule")
    }

    fn from_alphas(alpha: Vec<f64>) -> Self {
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let beta: Vec<f64> = alpha.iter().map(|a| 1.0 - a).collect();
        let eta2 = (0..alpha.len())
            .map(|i| if i == 0 { 0.0 } else { beta[i] * (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) })
            .collect();
        Self { alpha, alpha_bar, beta, eta2 }
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn eta2(&self, t: usize) -> f64 {
        self.eta2[t - 1]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    /// `x_t = a*x0 + b*mu + c*sigma*eps`.
    pub fn marginal_coeffs(&self, t: usize) -> MarginalCoeffs {
        let ab = self.alpha_bar(t);
        MarginalCoeffs { x0: ab.sqrt(), mu: 1.0 - ab.sqrt(), noise: (1.0 - ab).sqrt() }
    }

    /// Coefficients of the posterior mean `Xi_t = a*x0 + b*x_t + c*mu`.
    pub fn posterior_coeffs(&self, t: usize) -> PosteriorCoeffs {
        let a = self.alpha(t);
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let b = self.beta(t);
        let denom = 1.0 - ab;
        PosteriorCoeffs {
            x0: b * ab_prev.sqrt() / denom,
            xt: (1.0 - ab_prev) * a.sqrt() / denom,
            mu: 1.0 + (ab.sqrt() - 1.0) * (a.sqrt() + ab_prev.sqrt()) / denom,
        }
    }

    /// Coefficients of the mean recovered from a noise estimate:
    /// `Xi = a*x_t - b*mu - c*sigma*eps_hat`.
    pub fn reverse_coeffs(&self, t: usize) -> ReverseCoeffs {
        let a = self.alpha(t);
        let ab = self.alpha_bar(t);
        ReverseCoeffs {
            xt: 1.0 / a.sqrt(),
            mu: (1.0 - a.sqrt()) / a.sqrt(),
            noise: self.beta(t) / (a * (1.0 - ab)).sqrt(),
            eta: self.eta2(t).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginalCoeffs {
    pub x0: f64,
    pub mu: f64,
    pub noise: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoeffs {
    pub x0: f64,
    pub xt: f64,
    pub mu: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReverseCoeffs {
    pub xt: f64,
    pub mu: f64,
    pub noise: f64,
    pub eta: f64,
}

/// Shift `mu` and per-axis standard deviation `sigma` of the terminal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelCondition {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl KernelCondition {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::LengthMismatch(format!("mu has {} dims, sigma {}", mu.len(), sigma.len())));
        }
        if sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("sigma must be strictly positive".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn standard(d: usize) -> Self {
        Self { mu: vec![0.0; d], sigma: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| s * s).collect()
    }

    fn check(&self, xs: &[&[f64]]) -> Result<()> {
        for x in xs {
            if x.len() != self.dim() {
                return Err(Error::LengthMismatch(format!("expected {} dims, got {}", self.dim(), x.len())));
            }
        }
        Ok(())
    }
}

/// One forward transition `q(x_t | x_{t-1})`.
pub fn forward_step(x_prev: &[f64], t: usize, cond: &KernelCondition, sched: &DiffusionSchedule, noise: &[f64]) -> Result<Vec<f64>> {
    sched.check(t)?;
    cond.check(&[x_prev, noise])?;
    let a = sched.alpha(t);
    Ok((0..cond.dim())
        .map(|i| a.sqrt() * x_prev[i] + (1.0 - a.sqrt()) * cond.mu[i] + (1.0 - a).sqrt() * cond.sigma[i] * noise[i])
        .collect())
}

/// Samples `q(x_t | x_0)` with caller-supplied standard-normal `noise`.
pub fn forward_marginal(x0: &[f64], t: usize, cond: &KernelCondition, sched: &DiffusionSchedule, noise: &[f64]) -> Result<Vec<f64>> {
    sched.check(t)?;
    cond.check(&[x0, noise])?;
    let k = sched.marginal_coeffs(t);
    Ok((0..cond.dim())
        .map(|i| k.x0 * x0[i] + k.mu * cond.mu[i] + k.noise * cond.sigma[i] * noise[i])
        .collect())
}

/// Mean `Xi_t` and variance factor `eta_t^2` of `q(x_{t-1} | x_t, x_0)`; the
/// posterior covariance is `eta_t^2 * Sigma`.
pub fn posterior_params(x0: &[f64], xt: &[f64], t: usize, cond: &KernelCondition, sched: &DiffusionSchedule) -> Result<(Vec<f64>, f64)> {
    sched.check(t)?;
    if t < 2 {
        return Err(Error::InvalidArgument("posterior_params requires t >= 2".into()));
    }
    cond.check(&[x0, xt])?;
    let k = sched.posterior_coeffs(t);
    let xi = (0..cond.dim()).map(|i| k.x0 * x0[i] + k.xt * xt[i] + k.mu * cond.mu[i]).collect();
    Ok((xi, sched.eta2(t)))
}

/// Reverse-kernel mean from a noise estimate.
pub fn noise_to_mean(xt: &[f64], eps_hat: &[f64], t: usize, cond: &KernelCondition, sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    sched.check(t)?;
    cond.check(&[xt, eps_hat])?;
    let k = sched.reverse_coeffs(t);
    Ok((0..cond.dim())
        .map(|i| k.xt * xt[i] - k.mu * cond.mu[i] - k.noise * cond.sigma[i] * eps_hat[i])
        .collect())
}

/// One ancestral step; `t = 1` returns the mean without added noise.
pub fn reverse_step(
    xt: &[f64],
    eps_hat: &[f64],
    t: usize,
    cond: &KernelCondition,
    sched: &DiffusionSchedule,
    noise: &[f64],
) -> Result<Vec<f64>> {
    let mut mean = noise_to_mean(xt, eps_hat, t, cond, sched)?;
    if t >= 2 {
        cond.check(&[noise])?;
        let eta = sched.eta2(t).sqrt();
        for (i, m) in mean.iter_mut().enumerate() {
            *m += eta * cond.sigma[i] * noise[i];
        }
    }
    Ok(mean)
}

/// The noise that maps `x0` to `xt` under the closed-form marginal.
pub fn true_noise(x0: &[f64], xt: &[f64], t: usize, cond: &KernelCondition, sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    sched.check(t)?;
    cond.check(&[x0, xt])?;
    let k = sched.marginal_coeffs(t);
    Ok((0..cond.dim())
        .map(|i| (xt[i] - k.x0 * x0[i] - k.mu * cond.mu[i]) / (k.noise * cond.sigma[i]))
        .collect())
}
