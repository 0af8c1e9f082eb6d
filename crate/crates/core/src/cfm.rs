//! Flow matching on the optimal-transport path, plus the supervised
//! training loops for the forward operator, physics decoder and baseline.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::write_atomic;
use crate::dataset::{normalize_field, Dataset, SampleKey, BOUNDARY_VARS, PHYSICS_VARS, VELOCITY_VARS};
use crate::error::{Error, Result};
use crate::nets::{cosine_lr, AdamW, AdamWConfig, ArchDescriptor, Conditioning, ModelKind, ModelParams, Real, UNet};

pub const SIGMA_MIN: f64 = 1e-4;

/// `u_τ = (1 − (1 − σ_min)τ)·u0 + τ·u1`.
pub fn ot_interpolate<T: Real>(u0: &[T], u1: &[T], tau: f64, sigma_min: f64) -> Vec<T> {
    assert_eq!(u0.len(), u1.len(), "field shapes differ");
    let a = T::lit(1.0 - (1.0 - sigma_min) * tau);
    let b = T::lit(tau);
    u0.iter().zip(u1).map(|(&x0, &x1)| a * x0 + b * x1).collect()
}

/// `(u1 − (1 − σ_min)·u_τ) / (1 − (1 − σ_min)τ)`.
pub fn target_field<T: Real>(u_tau: &[T], u1: &[T], tau: f64, sigma_min: f64) -> Result<Vec<T>> {
    assert_eq!(u_tau.len(), u1.len(), "field shapes differ");
    let den = 1.0 - (1.0 - sigma_min) * tau;
    if !(den > f64::EPSILON) {
        return Err(Error::DegenerateDenominator(tau));
    }
    let k = T::lit(1.0 - sigma_min);
    let inv = T::lit(1.0 / den);
    Ok(u_tau.iter().zip(u1).map(|(&ut, &x1)| (x1 - k * ut) * inv).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sigma_min: f64,
    pub lr_base: f64,
    pub lr_floor: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::backbone()
    }
}

impl TrainConfig {
    pub fn backbone() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 8,
            sigma_min: SIGMA_MIN,
            lr_base: 1e-3,
            lr_floor: 1e-5,
            optimizer: AdamWConfig::default(),
            seed: 0,
            widths: vec![16, 32, 64],
            blocks_per_stage: 1,
        }
    }

    pub fn surrogate() -> Self {
        TrainConfig {
            epochs: 150,
            lr_base: 2e-4,
            lr_floor: 1e-6,
            ..Self::backbone()
        }
    }

    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Backbone => Self::backbone(),
            _ => Self::surrogate(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min <= 0.01) {
            return Err(Error::config("sigma_min must lie in (0, 0.01]"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        if !(self.lr_base > 0.0 && self.lr_floor >= 0.0 && self.lr_floor <= self.lr_base) {
            return Err(Error::config("need 0 <= lr_floor <= lr_base and lr_base > 0"));
        }
        if !(self.optimizer.clip_norm > 0.0) || self.optimizer.weight_decay < 0.0 {
            return Err(Error::config("clip_norm must be positive and weight_decay non-negative"));
        }
        Ok(())
    }

    pub fn descriptor(&self, kind: ModelKind) -> ArchDescriptor {
        ArchDescriptor::new(kind, self.widths.clone(), self.blocks_per_stage)
    }
}

/// One normalized training pair. For the backbone `input` is the data
/// sample `u1` and `target` is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub key: SampleKey,
    pub slice: usize,
    pub input: Vec<f32>,
    pub target: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSet {
    pub kind: ModelKind,
    pub height: usize,
    pub width: usize,
    pub examples: Vec<Example>,
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Builds normalized examples for `kind` from the given sample keys.
/// Keys whose slice the model does not accept are skipped.
pub fn build_examples(ds: &Dataset, keys: &[SampleKey], kind: ModelKind) -> Result<TrainSet> {
    let mut examples = Vec::new();
    let (mut h, mut w) = (0, 0);
    for key in keys.iter().filter(|k| kind.slices().contains(&k.slice)) {
        let s = ds.try_sample(key)?;
        h = s.nz();
        w = s.nx();
        let vel = || normalize_field(&s.velocity, &VELOCITY_VARS, &ds.stats);
        let boundary = || -> Result<Vec<f32>> {
            let b = ds.try_sample(&SampleKey { slice: 0, ..*key })?;
            let f = normalize_field(&b.velocity.select(&BOUNDARY_VARS), &BOUNDARY_VARS, &ds.stats);
            Ok(to_f32(&f.data))
        };
        let (input, target) = match kind {
            ModelKind::Backbone => (to_f32(&vel().data), Vec::new()),
            ModelKind::Forward => (to_f32(&vel().data), boundary()?),
            ModelKind::Decoder => {
                let p = s
                    .physics
                    .as_ref()
                    .ok_or_else(|| Error::Pairing(format!("no physics fields for {key:?}")))?;
                (to_f32(&vel().data), to_f32(&normalize_field(p, &PHYSICS_VARS, &ds.stats).data))
            }
            ModelKind::Baseline => (boundary()?, to_f32(&vel().data)),
        };
        examples.push(Example {
            key: *key,
            slice: key.slice,
            input,
            target,
        });
    }
    Ok(TrainSet {
        kind,
        height: h,
        width: w,
        examples,
    })
}

/// Per-sample noise and time for the flow-matching objective.
#[derive(Clone, Debug)]
pub struct Draw {
    pub tau: f64,
    pub u0: Vec<f32>,
}

pub fn draw<R: Rng>(rng: &mut R, n: usize) -> Draw {
    let tau = rng.gen_range(0.0..1.0);
    let u0 = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    Draw { tau, u0 }
}

/// Loss of one example and, optionally, its parameter gradient. The loss
/// is the element mean of the squared residual.
fn example_loss(
    net: &UNet,
    params: &[f32],
    set: &TrainSet,
    ex: &Example,
    d: Option<&Draw>,
    sigma_min: f64,
    scale: f32,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f32>>)> {
    let (x, target, cond) = match d {
        Some(d) => {
            let ut = ot_interpolate(&d.u0, &ex.input, d.tau, sigma_min);
            let tgt = target_field(&ut, &ex.input, d.tau, sigma_min)?;
            (ut, tgt, Conditioning::new(d.tau, ex.slice))
        }
        None => (ex.input.clone(), ex.target.clone(), Conditioning::slice(ex.slice)),
    };
    let (y, cache) = net.forward(params, &x, set.height, set.width, &cond)?;
    let n = y.len() as f64;
    let mut loss = 0.0;
    let mut cot = Vec::with_capacity(y.len());
    for (a, b) in y.iter().zip(&target) {
        let r = a - b;
        loss += (r as f64) * (r as f64);
        cot.push(2.0 * r * scale / n as f32);
    }
    let grad = want_grad.then(|| {
        let mut gp = vec![0.0f32; params.len()];
        net.backward(params, &cache, &cot, Some(&mut gp));
        gp
    });
    Ok((loss / n, grad))
}

/// Batch loss (mean over examples) and optionally its gradient. Draws are
/// taken in example order so results do not depend on thread count.
fn batch_loss(
    net: &UNet,
    params: &[f32],
    set: &TrainSet,
    batch: &[&Example],
    draws: Option<&[Draw]>,
    sigma_min: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f32>>)> {
    let b = batch.len() as f32;
    let results: Vec<Result<(f64, Option<Vec<f32>>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            example_loss(net, params, set, ex, draws.map(|d| &d[i]), sigma_min, 1.0 / b, want_grad)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad: Option<Vec<f32>> = None;
    for r in results {
        let (l, g) = r?;
        loss += l;
        if let Some(g) = g {
            match &mut grad {
                None => grad = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            }
        }
    }
    Ok((loss / batch.len() as f64, grad))
}

/// Flow-matching loss of a batch with fresh draws from `rng`.
pub fn cfm_loss<R: Rng>(
    net: &UNet,
    params: &[f32],
    set: &TrainSet,
    batch: &[&Example],
    sigma_min: f64,
    rng: &mut R,
) -> Result<f64> {
    let n = set.examples.first().map_or(0, |e| e.input.len());
    let draws: Vec<Draw> = batch.iter().map(|_| draw(rng, n)).collect();
    Ok(batch_loss(net, params, set, batch, Some(&draws), sigma_min, false)?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.rows {
            let val = r.val_loss.map(|v| format!("{v:.9e}")).unwrap_or_default();
            writeln!(s, "{},{:.9e},{},{:.6e}", r.epoch, r.train_loss, val, r.lr).unwrap();
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

const VAL_SEED_SALT: u64 = 0x5EED_0F_4A11;

/// Trains `kind` on `train`, evaluating `val` after every epoch. `init`
/// resumes from an existing checkpoint of the same architecture.
pub fn train(
    train: &TrainSet,
    val: Option<&TrainSet>,
    cfg: &TrainConfig,
    init: Option<ModelParams>,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let kind = train.kind;
    if train.examples.is_empty() {
        return Err(Error::Pairing(format!("no training examples for {}", kind.name())));
    }
    let desc = cfg.descriptor(kind);
    let mut model = match init {
        Some(m) => {
            if m.desc != desc {
                return Err(Error::ArchMismatch(format!(
                    "checkpoint {:?} does not match configured {:?}",
                    m.desc, desc
                )));
            }
            if m.frozen {
                return Err(Error::config("checkpoint is frozen"));
            }
            m
        }
        None => ModelParams::init(&desc, cfg.seed)?,
    };
    let net = model.network()?;
    let flow = kind == ModelKind::Backbone;
    let n_el = train.examples[0].input.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = AdamW::new(cfg.optimizer.clone(), net.param_count());
    let batches_per_epoch = train.examples.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..train.examples.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut lr = cfg.lr_base;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train.examples[i]).collect();
            let draws: Option<Vec<Draw>> = flow.then(|| batch.iter().map(|_| draw(&mut rng, n_el)).collect());
            let (loss, grad) = batch_loss(&net, &model.values, train, &batch, draws.as_deref(), cfg.sigma_min, true)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            lr = cosine_lr(step, total, cfg.lr_base, cfg.lr_floor);
            let mut grad = grad.expect("gradient requested");
            opt.step(&mut model.values, &mut grad, lr).map_err(|_| Error::Divergence { epoch, loss })?;
            sum += loss * batch.len() as f64;
            step += 1;
        }
        let train_loss = sum / train.examples.len() as f64;
        let val_loss = match val {
            Some(v) if !v.examples.is_empty() => Some(evaluate(&net, &model.values, v, cfg)?),
            _ => None,
        };
        log::debug!("{} epoch {epoch}: train {train_loss:.4e} val {val_loss:?}", kind.name());
        log.rows.push(LogRow {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
    }
    if kind != ModelKind::Backbone {
        model.frozen = true;
    }
    Ok((model, log))
}

/// Mean loss over `set` without touching the parameters. Flow-matching
/// draws come from a fixed stream so values are comparable across epochs.
pub fn evaluate(net: &UNet, params: &[f32], set: &TrainSet, cfg: &TrainConfig) -> Result<f64> {
    let refs: Vec<&Example> = set.examples.iter().collect();
    let draws = (set.kind == ModelKind::Backbone).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VAL_SEED_SALT);
        let n = refs.first().map_or(0, |e| e.input.len());
        refs.iter().map(|_| draw(&mut rng, n)).collect::<Vec<_>>()
    });
    let mut total = 0.0;
    for (i, chunk) in refs.chunks(cfg.batch_size).enumerate() {
        let d = draws.as_ref().map(|d| &d[i * cfg.batch_size..i * cfg.batch_size + chunk.len()]);
        total += batch_loss(net, params, set, chunk, d, cfg.sigma_min, false)?.0 * chunk.len() as f64;
    }
    Ok(total / refs.len() as f64)
}
