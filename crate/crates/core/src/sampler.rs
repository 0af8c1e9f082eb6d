//! Probability-flow ODE sampling with measurement guidance through a
//! frozen forward operator, and ensemble uncertainty estimates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coarsegrain::SliceSample;
use crate::dataset::{denormalize_field, normalize_field, NormStats, BOUNDARY_VARS, VELOCITY_VARS};
use crate::error::{Error, Result};
use crate::field::Field2;
use crate::nets::{Cache, Conditioning, Real, UNet};

/// A model usable inside the sampler: evaluation plus a vector–Jacobian
/// product with respect to its input.
pub trait Differentiable<T: Real>: Sync {
    type Tape;
    fn eval(&self, x: &[T], h: usize, w: usize, cond: &Conditioning) -> Result<(Vec<T>, Self::Tape)>;
    fn vjp(&self, tape: &Self::Tape, cot: &[T]) -> Vec<T>;
}

/// A network with its parameters.
pub struct Net<'a, T> {
    pub net: &'a UNet,
    pub params: &'a [T],
}

impl<'a, T: Real> Differentiable<T> for Net<'a, T> {
    type Tape = Cache<T>;

    fn eval(&self, x: &[T], h: usize, w: usize, cond: &Conditioning) -> Result<(Vec<T>, Cache<T>)> {
        self.net.forward(self.params, x, h, w, cond)
    }

    fn vjp(&self, tape: &Cache<T>, cot: &[T]) -> Vec<T> {
        self.net.backward(self.params, tape, cot, None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    #[serde(alias = "sparse")]
    SparsityAware,
    #[serde(alias = "baseline")]
    NormalizedBaseline,
}

impl GuidanceMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GuidanceMode::None),
            "sparse" | "sparsity_aware" => Ok(GuidanceMode::SparsityAware),
            "baseline" | "normalized_baseline" => Ok(GuidanceMode::NormalizedBaseline),
            _ => Err(Error::config(format!("unknown guidance mode '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub mode: GuidanceMode,
    pub baseline_eps: f64,
    pub ensemble: usize,
    pub seed: u64,
    /// Treat `f_θ` inside the terminal estimate as constant when
    /// differentiating (cheaper, not the default).
    pub stop_gradient: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 100,
            guidance_scale: 1.0,
            mode: GuidanceMode::SparsityAware,
            baseline_eps: 1e-8,
            ensemble: 25,
            seed: 0,
            stop_gradient: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.ensemble == 0 {
            return Err(Error::config("steps and ensemble size must be at least 1"));
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::config("guidance scale must be finite and non-negative"));
        }
        if !(self.baseline_eps > 0.0) {
            return Err(Error::config("baseline epsilon must be positive"));
        }
        Ok(())
    }
}

/// Boundary measurement in normalized units with its observation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `(v_x, v_z)` at slice 0.
    pub values: Field2,
    pub mask: Vec<bool>,
    pub stride: usize,
    pub coverage: f64,
}

/// Central window of `round(ρ·w) × round(ρ·h)` cells intersected with every
/// `k`-th row and column counted from the window origin.
pub fn window_mask(h: usize, w: usize, coverage: f64, stride: usize) -> Result<Vec<bool>> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::config(format!("coverage ratio {coverage} outside (0, 1]")));
    }
    if stride == 0 {
        return Err(Error::config("stride must be at least 1"));
    }
    let wh = ((coverage * h as f64).round() as usize).clamp(1, h);
    let ww = ((coverage * w as f64).round() as usize).clamp(1, w);
    let (r0, c0) = ((h - wh) / 2, (w - ww) / 2);
    let mut m = vec![false; h * w];
    for r in (r0..r0 + wh).step_by(stride) {
        for c in (c0..c0 + ww).step_by(stride) {
            m[r * w + c] = true;
        }
    }
    Ok(m)
}

impl Observation {
    pub fn new(values: Field2, coverage: f64, stride: usize) -> Result<Self> {
        if values.channels != 2 {
            return Err(Error::shape("observation needs two channels (v_x, v_z)"));
        }
        let mask = window_mask(values.height, values.width, coverage, stride)?;
        Ok(Observation {
            values,
            mask,
            stride,
            coverage,
        })
    }

    /// Observation of a slice-0 sample, normalized with `stats`.
    pub fn from_boundary(boundary: &SliceSample, stats: &NormStats, coverage: f64, stride: usize) -> Result<Self> {
        if boundary.slice_index != 0 {
            return Err(Error::Pairing("observations come from slice 0".into()));
        }
        let v = normalize_field(&boundary.velocity.select(&BOUNDARY_VARS), &BOUNDARY_VARS, stats);
        Self::new(v, coverage, stride)
    }

    pub fn observed_cells(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// `û1 = u_τ + (1 − τ)·f`.
pub fn estimate_terminal<T: Real>(u: &[T], tau: f64, f: &[T]) -> Vec<T> {
    let s = T::lit(1.0 - tau);
    u.iter().zip(f).map(|(&a, &b)| a + s * b).collect()
}

/// Sum of squared residuals over observed cells of both channels, and the
/// cotangent `∂L/∂pred`.
pub fn masked_sse<T: Real>(pred: &[T], obs: &Observation) -> (f64, Vec<T>) {
    let np = obs.mask.len();
    assert_eq!(pred.len(), 2 * np, "prediction must be two channels over the window grid");
    let mut loss = 0.0;
    let mut cot = vec![T::zero(); pred.len()];
    for ch in 0..2 {
        for (i, &m) in obs.mask.iter().enumerate() {
            if m {
                let k = ch * np + i;
                let r = pred[k].to_f64().unwrap() - obs.values.data[k];
                loss += r * r;
                cot[k] = T::lit(2.0 * r);
            }
        }
    }
    (loss, cot)
}

/// `L_guide(û1)` through the forward operator.
pub fn guidance_loss<T: Real, G: Differentiable<T>>(
    forward: &G,
    u_hat: &[T],
    slice: usize,
    obs: &Observation,
) -> Result<f64> {
    let (h, w) = (obs.values.height, obs.values.width);
    let (pred, _) = forward.eval(u_hat, h, w, &Conditioning::slice(slice))?;
    Ok(masked_sse(&pred, obs).0)
}

/// Result of one guided field evaluation.
#[derive(Clone, Debug)]
pub struct GuidedStep<T> {
    pub field: Vec<T>,
    pub f_theta: Vec<T>,
    /// `∇_{u_τ} L_guide`, empty when guidance is skipped.
    pub grad: Vec<T>,
    /// `L_guide(û1)`, NaN without an observation.
    pub loss: f64,
}

/// `f_θ` and `∇_{u_τ} L_guide`, differentiating through both the forward
/// operator and the backbone inside `û1` unless `stop_gradient` is set.
#[allow(clippy::too_many_arguments)]
pub fn guidance_gradient<T: Real, B: Differentiable<T>, G: Differentiable<T>>(
    backbone: &B,
    forward: &G,
    u: &[T],
    tau: f64,
    slice: usize,
    obs: &Observation,
    stop_gradient: bool,
) -> Result<(Vec<T>, Vec<T>, f64)> {
    let (h, w) = (obs.values.height, obs.values.width);
    let (f, tape_f) = backbone.eval(u, h, w, &Conditioning::new(tau, slice))?;
    let u_hat = estimate_terminal(u, tau, &f);
    let (pred, tape_g) = forward.eval(&u_hat, h, w, &Conditioning::slice(slice))?;
    let (loss, cot) = masked_sse(&pred, obs);
    let g_hat = forward.vjp(&tape_g, &cot);
    let mut grad = g_hat.clone();
    if !stop_gradient {
        let s = T::lit(1.0 - tau);
        let through_f = backbone.vjp(&tape_f, &g_hat);
        for (a, b) in grad.iter_mut().zip(&through_f) {
            *a += s * *b;
        }
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("guidance gradient".into()));
    }
    Ok((f, grad, loss))
}

/// Norm-rescaled baseline correction: `ξ·(∇L / (‖∇L‖² + ε))·‖f‖²`.
pub fn normalized_correction<T: Real>(f: &[T], grad: &[T], xi: f64, eps: f64) -> Vec<T> {
    let gn2: f64 = grad.iter().map(|v| v.to_f64().unwrap().powi(2)).sum();
    let fn2: f64 = f.iter().map(|v| v.to_f64().unwrap().powi(2)).sum();
    let k = T::lit(xi * fn2 / (gn2 + eps));
    grad.iter().map(|&g| k * g).collect()
}

/// Guided vector field for the configured mode.
#[allow(clippy::too_many_arguments)]
pub fn guided_field<T: Real, B: Differentiable<T>, G: Differentiable<T>>(
    backbone: &B,
    forward: Option<&G>,
    u: &[T],
    h: usize,
    w: usize,
    tau: f64,
    slice: usize,
    obs: Option<&Observation>,
    cfg: &SamplerConfig,
) -> Result<GuidedStep<T>> {
    let active = cfg.mode != GuidanceMode::None && cfg.guidance_scale > 0.0;
    match (forward, obs) {
        (Some(g), Some(o)) if active => {
            let (f, grad, loss) = guidance_gradient(backbone, g, u, tau, slice, o, cfg.stop_gradient)?;
            let xi = T::lit(cfg.guidance_scale);
            let field = match cfg.mode {
                GuidanceMode::SparsityAware => f.iter().zip(&grad).map(|(&a, &b)| a - xi * b).collect(),
                GuidanceMode::NormalizedBaseline => {
                    let corr = normalized_correction(&f, &grad, cfg.guidance_scale, cfg.baseline_eps);
                    f.iter().zip(&corr).map(|(&a, &b)| a - b).collect()
                }
                GuidanceMode::None => unreachable!(),
            };
            Ok(GuidedStep {
                field,
                f_theta: f,
                grad,
                loss,
            })
        }
        (g, o) => {
            if active && o.is_some() {
                return Err(Error::config("guidance requires a forward operator"));
            }
            let (f, _) = backbone.eval(u, h, w, &Conditioning::new(tau, slice))?;
            let loss = match (g, o) {
                (Some(g), Some(o)) => guidance_loss(g, &estimate_terminal(u, tau, &f), slice, o)?,
                _ => f64::NAN,
            };
            Ok(GuidedStep {
                field: f.clone(),
                f_theta: f,
                grad: Vec::new(),
                loss,
            })
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    pub u1: Vec<T>,
    /// `L_guide` at every step (NaN without an observation).
    pub guide_loss: Vec<f64>,
}

pub fn initial_noise<T: Real>(n: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// Euler integration from `τ = 0` to `1` with `Δτ = 1/N`.
#[allow(clippy::too_many_arguments)]
pub fn integrate<T: Real, B: Differentiable<T>, G: Differentiable<T>>(
    backbone: &B,
    forward: Option<&G>,
    slice: usize,
    obs: Option<&Observation>,
    h: usize,
    w: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Trajectory<T>> {
    cfg.validate()?;
    let mut u: Vec<T> = initial_noise(3 * h * w, seed);
    let n = cfg.steps;
    let dt = T::lit(1.0 / n as f64);
    let mut log = Vec::with_capacity(n);
    for i in 0..n {
        let tau = i as f64 / n as f64;
        let step = guided_field(backbone, forward, &u, h, w, tau, slice, obs, cfg)?;
        for (a, b) in u.iter_mut().zip(&step.field) {
            *a += *b * dt;
        }
        log.push(step.loss);
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampled field".into()));
    }
    Ok(Trajectory { u1: u, guide_loss: log })
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    /// Physical units (m/s).
    pub velocity: Field2,
    pub normalized: Field2,
    pub guide_loss: Vec<f64>,
}

fn to_field<T: Real>(u: &[T], h: usize, w: usize) -> Field2 {
    Field2::from_vec(3, h, w, u.iter().map(|v| v.to_f64().unwrap()).collect()).expect("3-channel field")
}

/// Guided sample for slice `slice`, denormalized to physical units.
pub fn reconstruct<T: Real, B: Differentiable<T>, G: Differentiable<T>>(
    backbone: &B,
    forward: Option<&G>,
    obs: Option<&Observation>,
    slice: usize,
    h: usize,
    w: usize,
    stats: &NormStats,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Reconstruction> {
    let tr = integrate(backbone, forward, slice, obs, h, w, cfg, seed)?;
    let normalized = to_field(&tr.u1, h, w);
    Ok(Reconstruction {
        velocity: denormalize_field(&normalized, &VELOCITY_VARS, stats),
        normalized,
        guide_loss: tr.guide_loss,
    })
}

/// Pixel-wise mean and population standard deviation.
pub fn ensemble_stats(samples: &[Field2]) -> Result<(Field2, Field2)> {
    let first = samples.first().ok_or_else(|| Error::config("empty ensemble"))?;
    if samples.iter().any(|s| !s.same_shape(first)) {
        return Err(Error::shape("ensemble members differ in shape"));
    }
    let k = samples.len() as f64;
    let mut mean = Field2::zeros(first.channels, first.height, first.width);
    for s in samples {
        for (m, v) in mean.data.iter_mut().zip(&s.data) {
            *m += v;
        }
    }
    mean.data.iter_mut().for_each(|m| *m /= k);
    let mut std = Field2::zeros(first.channels, first.height, first.width);
    for s in samples {
        for ((a, v), m) in std.data.iter_mut().zip(&s.data).zip(&mean.data) {
            *a += (v - m) * (v - m);
        }
    }
    std.data.iter_mut().for_each(|a| *a = (*a / k).sqrt());
    Ok((mean, std))
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    pub mean: Field2,
    pub std: Field2,
    pub members: Vec<Reconstruction>,
}

/// Member seeds derived from the sampler seed.
pub fn member_seeds(cfg: &SamplerConfig) -> Vec<u64> {
    (0..cfg.ensemble as u64).map(|k| cfg.seed.wrapping_add(k)).collect()
}

/// Independent reconstructions for each seed, run in parallel and
/// collected in seed order. Statistics are in physical units.
#[allow(clippy::too_many_arguments)]
pub fn ensemble<T: Real, B: Differentiable<T>, G: Differentiable<T>>(
    backbone: &B,
    forward: Option<&G>,
    obs: Option<&Observation>,
    slice: usize,
    h: usize,
    w: usize,
    stats: &NormStats,
    cfg: &SamplerConfig,
    seeds: &[u64],
) -> Result<Ensemble> {
    let members: Vec<Reconstruction> = seeds
        .par_iter()
        .map(|&s| reconstruct(backbone, forward, obs, slice, h, w, stats, cfg, s))
        .collect::<Result<_>>()?;
    let fields: Vec<Field2> = members.iter().map(|m| m.velocity.clone()).collect();
    let (mean, std) = ensemble_stats(&fields)?;
    Ok(Ensemble { mean, std, members })
}

#[allow(clippy::too_many_arguments)]
pub fn uq_ensemble<T: Real, B: Differentiable<T>, G: Differentiable<T>>(
    backbone: &B,
    forward: Option<&G>,
    obs: Option<&Observation>,
    slice: usize,
    h: usize,
    w: usize,
    stats: &NormStats,
    cfg: &SamplerConfig,
) -> Result<Ensemble> {
    ensemble(backbone, forward, obs, slice, h, w, stats, cfg, &member_seeds(cfg))
}
