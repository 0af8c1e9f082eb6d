//! Configuration-driven pipeline: simulation, gridding, dataset assembly,
//! training, reconstruction, sweeps and evaluation. Every stage reads and
//! writes files under one output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{read_grid, read_run, write_grid, write_run, FieldArchiveWriter};
use crate::binio::{parse_json, read_text, to_json_pretty, write_atomic};
use crate::cfm::{build_examples, train, TrainConfig};
use crate::coarsegrain::{activity_mask, coarse_grain, GridSpec};
use crate::dataset::{denormalize_field, Dataset, DatasetSplit, Instance, NormStats, PHYSICS_VARS, UNITS, VARIABLES, VELOCITY_VARS};
use crate::dem::{run, DemConfig};
use crate::field::Field2;
use crate::metrics::{coverage, ecdf_distance, field_rows, masked_pearson, masked_rmse, rows_to_csv, MaskKind, MetricRow};
use crate::nets::{Conditioning, ModelKind, ModelParams, UNet};
use crate::sampler::{ensemble, member_seeds, reconstruct, GuidanceMode, Net, Observation, SamplerConfig};
use crate::{Error, Result};

/// Which boundary cells are observed and which slices are reconstructed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationSpec {
    pub coverage: f64,
    pub stride: usize,
    pub slices: Vec<usize>,
    /// Test-instance frame; `None` picks the frame with the most active
    /// cells in the reconstructed slices.
    pub frame: Option<usize>,
}

impl Default for ObservationSpec {
    fn default() -> Self {
        ObservationSpec {
            coverage: 1.0,
            stride: 1,
            slices: vec![1, 2, 3],
            frame: None,
        }
    }
}

impl ObservationSpec {
    pub fn validate(&self) -> Result<()> {
        crate::sampler::window_mask(1, 1, self.coverage, self.stride)?;
        if self.slices.is_empty() || self.slices.iter().any(|s| !(1..=3).contains(s)) {
            return Err(Error::config("reconstructed slices must be drawn from 1, 2, 3"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub coverage: Vec<f64>,
    pub stride: Vec<usize>,
    pub slice: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            coverage: vec![1.0, 0.8, 0.6, 0.4, 0.2],
            stride: vec![1, 3, 5, 7],
            slice: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    /// Unguided samples per slice for the prior-fidelity check.
    pub prior_samples: usize,
    /// Ensemble size for calibration.
    pub ensemble: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            prior_samples: 8,
            ensemble: 25,
        }
    }
}

/// Whole-pipeline configuration. Seeds inside the sections are replaced by
/// seeds derived from the global `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Number of simulated instances; the last one is the test instance.
    pub instances: usize,
    pub dem: DemConfig,
    pub grid: GridSpec,
    pub activity_threshold: f64,
    pub backbone: TrainConfig,
    pub forward: TrainConfig,
    pub decoder: TrainConfig,
    pub baseline: TrainConfig,
    pub sampler: SamplerConfig,
    pub observation: ObservationSpec,
    pub sweep: SweepSpec,
    pub eval: EvalSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            output_dir: PathBuf::from("chuteflow-out"),
            seed: 0,
            instances: 6,
            dem: DemConfig::default(),
            grid: GridSpec::default(),
            activity_threshold: 0.01,
            backbone: TrainConfig::backbone(),
            forward: TrainConfig::surrogate(),
            decoder: TrainConfig::surrogate(),
            baseline: TrainConfig::surrogate(),
            sampler: SamplerConfig::default(),
            observation: ObservationSpec::default(),
            sweep: SweepSpec::default(),
            eval: EvalSpec::default(),
        }
    }
}

pub fn parse_pipeline_config(text: &str, path: &Path) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = parse_json(text, path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Mixes `global`, a stage tag and an index into a stage seed.
pub fn stage_seed(global: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = global ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn kind_index(kind: ModelKind) -> u64 {
    ModelKind::ALL.iter().position(|k| *k == kind).unwrap() as u64
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        parse_pipeline_config(&read_text(path)?, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir must be set"));
        }
        if self.instances < 2 {
            return Err(Error::TooFewInstances {
                needed: 2,
                got: self.instances,
            });
        }
        if !(self.activity_threshold >= 0.0) {
            return Err(Error::config("activity threshold must be non-negative"));
        }
        self.dem.validate()?;
        self.grid.validate()?;
        for kind in ModelKind::ALL {
            let t = self.train_config(kind);
            t.validate()?;
            t.descriptor(kind).validate()?;
        }
        self.sampler.validate()?;
        self.observation.validate()?;
        for &c in &self.sweep.coverage {
            crate::sampler::window_mask(1, 1, c, 1)?;
        }
        if self.sweep.stride.contains(&0) {
            return Err(Error::config("sweep strides must be at least 1"));
        }
        if !(1..=3).contains(&self.sweep.slice) {
            return Err(Error::config("sweep slice must be 1, 2 or 3"));
        }
        if self.eval.ensemble == 0 {
            return Err(Error::config("eval ensemble must be at least 1"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.output_dir.clone(),
        }
    }

    pub fn instance_ids(&self) -> Vec<u32> {
        (0..self.instances as u32).collect()
    }

    pub fn dem_for(&self, instance: u32) -> DemConfig {
        DemConfig {
            rng_seed: stage_seed(self.seed, "dem", instance as u64),
            ..self.dem.clone()
        }
    }

    pub fn train_config(&self, kind: ModelKind) -> TrainConfig {
        let base = match kind {
            ModelKind::Backbone => &self.backbone,
            ModelKind::Forward => &self.forward,
            ModelKind::Decoder => &self.decoder,
            ModelKind::Baseline => &self.baseline,
        };
        TrainConfig {
            seed: stage_seed(self.seed, "train", kind_index(kind)),
            ..base.clone()
        }
    }

    pub fn split_seed(&self) -> u64 {
        stage_seed(self.seed, "split", 0)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            seed: stage_seed(self.seed, "sampler", 0),
            ..self.sampler.clone()
        }
    }

    /// The configuration with every derived seed written in.
    pub fn resolved(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("serializable");
        v["sampler"]["seed"] = json!(self.sampler_config().seed);
        for kind in ModelKind::ALL {
            v[kind.name()]["seed"] = json!(self.train_config(kind).seed);
        }
        v["dem"]["rng_seed"] = json!(self.instance_ids().iter().map(|&i| self.dem_for(i).rng_seed).collect::<Vec<_>>());
        v["split_seed"] = json!(self.split_seed());
        v
    }
}

/// File locations under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn run(&self, i: u32) -> PathBuf {
        self.root.join("runs").join(format!("inst_{i:02}"))
    }
    pub fn grid(&self, i: u32) -> PathBuf {
        self.root.join("grid").join(format!("inst_{i:02}"))
    }
    pub fn stats(&self) -> PathBuf {
        self.root.join("dataset").join("stats.json")
    }
    pub fn split(&self) -> PathBuf {
        self.root.join("dataset").join("split.json")
    }
    pub fn checkpoint(&self, kind: ModelKind) -> PathBuf {
        self.root.join("models").join(format!("{}.ckpt", kind.name()))
    }
    pub fn train_log(&self, kind: ModelKind) -> PathBuf {
        self.root.join("models").join(format!("{}_loss.csv", kind.name()))
    }
    pub fn recon(&self, label: &str) -> PathBuf {
        self.root.join("recon").join(label)
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }
    pub fn sweep(&self) -> PathBuf {
        self.root.join("sweep")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

/// Runs the DEM for every instance (or only `only`) and archives the
/// snapshots.
pub fn simulate(cfg: &PipelineConfig, only: Option<&[u32]>) -> Result<()> {
    cfg.validate()?;
    let ids: Vec<u32> = match only {
        Some(ids) => {
            if let Some(bad) = ids.iter().find(|&&i| i as usize >= cfg.instances) {
                return Err(Error::config(format!("instance {bad} out of range")));
            }
            ids.to_vec()
        }
        None => cfg.instance_ids(),
    };
    let layout = cfg.layout();
    ids.par_iter().try_for_each(|&i| {
        let dem = cfg.dem_for(i);
        info!("simulating instance {i} (seed {})", dem.rng_seed);
        let states = run(&dem)?;
        write_run(&layout.run(i), &dem, &states)
    })
}

/// Coarse-grains every archived snapshot onto the grid.
pub fn grid(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let layout = cfg.layout();
    cfg.instance_ids().par_iter().try_for_each(|&i| {
        let (m, states) = read_run(&layout.run(i))?;
        let vols: Vec<_> = states.iter().map(|s| (s.time, coarse_grain(s, &cfg.grid))).collect();
        info!("gridded instance {i}: {} snapshots", vols.len());
        write_grid(&layout.grid(i), i, m.config.mean_diameter, &vols)
    })
}

pub fn load_instances(cfg: &PipelineConfig) -> Result<Vec<Instance>> {
    let layout = cfg.layout();
    cfg.instance_ids()
        .iter()
        .map(|&i| {
            let (meta, vols) = read_grid(&layout.grid(i))?;
            if meta.instance != i {
                return Err(Error::Pairing(format!("grid archive for {i} claims instance {}", meta.instance)));
            }
            Instance::from_volumes(i, &vols, meta.mean_diameter)
        })
        .collect()
}

/// Builds the split and training statistics and writes them out.
pub fn build_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    cfg.validate()?;
    let ds = Dataset::build(load_instances(cfg)?, cfg.split_seed(), cfg.activity_threshold)?;
    let layout = cfg.layout();
    ds.stats.save(&layout.stats())?;
    ds.split.save(&layout.split())?;
    Ok(ds)
}

/// Reloads the dataset with its saved split and statistics.
pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let layout = cfg.layout();
    let split = DatasetSplit::load(&layout.split())?;
    let mut ds = Dataset::with_split(load_instances(cfg)?, split, cfg.activity_threshold)?;
    ds.stats = NormStats::load(&layout.stats())?;
    Ok(ds)
}

/// Trains one model on the saved dataset. With `resume` an existing
/// checkpoint seeds the parameters.
pub fn train_model(cfg: &PipelineConfig, kind: ModelKind, resume: bool) -> Result<crate::cfm::TrainLog> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let layout = cfg.layout();
    let tcfg = cfg.train_config(kind);
    let train_set = build_examples(&ds, &ds.split.train, kind)?;
    let val_set = build_examples(&ds, &ds.split.val, kind)?;
    let init = if resume { Some(ModelParams::load(&layout.checkpoint(kind))?) } else { None };
    info!(
        "training {} on {} examples ({} validation)",
        kind.name(),
        train_set.examples.len(),
        val_set.examples.len()
    );
    let val = (!val_set.examples.is_empty()).then_some(&val_set);
    let (params, log) = train(&train_set, val, &tcfg, init)?;
    params.save(&layout.checkpoint(kind))?;
    log.save(&layout.train_log(kind))?;
    Ok(log)
}

/// A network with loaded parameters.
pub struct Model {
    pub net: UNet,
    pub params: ModelParams,
}

impl Model {
    pub fn load(path: &Path, kind: ModelKind) -> Result<Self> {
        let params = ModelParams::load(path)?;
        if params.desc.kind != kind {
            return Err(Error::ArchMismatch(format!(
                "{} holds a {} model, expected {}",
                path.display(),
                params.desc.kind.name(),
                kind.name()
            )));
        }
        Ok(Model {
            net: params.network()?,
            params,
        })
    }

    pub fn as_net(&self) -> Net<'_, f32> {
        Net {
            net: &self.net,
            params: &self.params.values,
        }
    }

    /// Plain evaluation on a normalized field.
    pub fn apply(&self, x: &Field2, slice: usize, out_channels: usize) -> Result<Field2> {
        let xs: Vec<f32> = x.data.iter().map(|&v| v as f32).collect();
        let (y, _) = self
            .net
            .forward(&self.params.values, &xs, x.height, x.width, &Conditioning::slice(slice))?;
        Field2::from_vec(out_channels, x.height, x.width, y.into_iter().map(f64::from).collect())
    }
}

/// All models the inference stages use. Missing optional checkpoints are
/// `None`.
pub struct Models {
    pub backbone: Model,
    pub forward: Option<Model>,
    pub decoder: Option<Model>,
    pub baseline: Option<Model>,
}

impl Models {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let layout = cfg.layout();
        let optional = |kind| {
            let p = layout.checkpoint(kind);
            if p.exists() {
                Model::load(&p, kind).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(Models {
            backbone: Model::load(&layout.checkpoint(ModelKind::Backbone), ModelKind::Backbone)?,
            forward: optional(ModelKind::Forward)?,
            decoder: optional(ModelKind::Decoder)?,
            baseline: optional(ModelKind::Baseline)?,
        })
    }
}

/// Frame of `inst` with the most active cells over `slices`.
pub fn pick_frame(inst: &Instance, slices: &[usize]) -> usize {
    let mut best = (0, 0);
    for (f, frame) in inst.frames.iter().enumerate() {
        let n: usize = slices
            .iter()
            .filter_map(|&s| frame.slices.get(s))
            .map(|s| s.mask.iter().filter(|&&m| m).count())
            .sum();
        if n > best.1 {
            best = (f, n);
        }
    }
    best.0
}

/// One reconstructed slice with its reference.
#[derive(Clone, Debug)]
pub struct SliceRecon {
    pub slice: usize,
    pub time: f64,
    pub truth: Field2,
    pub active: Vec<bool>,
    /// First ensemble member.
    pub sample: Field2,
    pub mean: Field2,
    /// Present when more than one member was drawn.
    pub std: Option<Field2>,
    pub guide_loss: Vec<f64>,
    /// Decoded `(p, q, T)` of the ensemble mean with its reference.
    pub physics: Option<(Field2, Field2)>,
}

/// Options for one reconstruction request.
#[derive(Clone, Debug)]
pub struct ReconRequest {
    pub obs: ObservationSpec,
    pub mode: GuidanceMode,
    pub members: usize,
    pub decode_physics: bool,
}

pub fn observation_for(ds: &Dataset, frame: usize, coverage: f64, stride: usize) -> Result<Observation> {
    let inst = ds.test_instance();
    let f = inst
        .frames
        .get(frame)
        .ok_or_else(|| Error::config(format!("test instance has no frame {frame}")))?;
    Observation::from_boundary(&f.slices[0], &ds.stats, coverage, stride)
}

pub fn reconstruct_slices(ds: &Dataset, models: &Models, sampler: &SamplerConfig, req: &ReconRequest) -> Result<Vec<SliceRecon>> {
    req.obs.validate()?;
    let inst = ds.test_instance();
    let frame = req.obs.frame.unwrap_or_else(|| pick_frame(inst, &req.obs.slices));
    let obs = observation_for(ds, frame, req.obs.coverage, req.obs.stride)?;
    let scfg = SamplerConfig {
        mode: req.mode,
        ensemble: req.members,
        ..sampler.clone()
    };
    let guided = req.mode != GuidanceMode::None;
    let forward = match (&models.forward, guided) {
        (Some(m), true) => Some(m.as_net()),
        (None, true) => return Err(Error::config("guided reconstruction needs a forward-operator checkpoint")),
        _ => None,
    };
    let backbone = models.backbone.as_net();
    let mut out = Vec::new();
    for &slice in &req.obs.slices {
        let truth_sample = &inst.frames[frame].slices[slice];
        let (h, w) = (truth_sample.nz(), truth_sample.nx());
        let e = ensemble(
            &backbone,
            forward.as_ref(),
            guided.then_some(&obs),
            slice,
            h,
            w,
            &ds.stats,
            &scfg,
            &member_seeds(&scfg),
        )?;
        let physics = match (&models.decoder, req.decode_physics) {
            (Some(d), true) => {
                let truth_p = truth_sample
                    .physics
                    .clone()
                    .ok_or_else(|| Error::Pairing("reference slice has no physics fields".into()))?;
                let mut acc = Field2::zeros(3, h, w);
                for m in &e.members {
                    let p = denormalize_field(&d.apply(&m.normalized, slice, 3)?, &PHYSICS_VARS, &ds.stats);
                    for (a, v) in acc.data.iter_mut().zip(&p.data) {
                        *a += v / e.members.len() as f64;
                    }
                }
                Some((acc, truth_p))
            }
            (None, true) => return Err(Error::config("--decode-physics needs a decoder checkpoint")),
            _ => None,
        };
        out.push(SliceRecon {
            slice,
            time: inst.frames[frame].time,
            truth: truth_sample.velocity.clone(),
            active: truth_sample.mask.clone(),
            sample: e.members[0].velocity.clone(),
            std: (e.members.len() > 1).then(|| e.std.clone()),
            mean: e.mean,
            guide_loss: e.members[0].guide_loss.clone(),
            physics,
        });
    }
    Ok(out)
}

/// Deterministic inverse map from the boundary, for comparison.
pub fn baseline_slices(ds: &Dataset, model: &Model, obs_spec: &ObservationSpec) -> Result<Vec<SliceRecon>> {
    let inst = ds.test_instance();
    let frame = obs_spec.frame.unwrap_or_else(|| pick_frame(inst, &obs_spec.slices));
    let obs = observation_for(ds, frame, obs_spec.coverage, obs_spec.stride)?;
    let mut x = obs.values.clone();
    for c in 0..2 {
        for (v, &m) in x.channel_mut(c).iter_mut().zip(&obs.mask) {
            if !m {
                *v = 0.0;
            }
        }
    }
    obs_spec
        .slices
        .iter()
        .map(|&slice| {
            let t = &inst.frames[frame].slices[slice];
            let y = denormalize_field(&model.apply(&x, slice, 3)?, &VELOCITY_VARS, &ds.stats);
            Ok(SliceRecon {
                slice,
                time: t.time,
                truth: t.velocity.clone(),
                active: t.mask.clone(),
                sample: y.clone(),
                mean: y,
                std: None,
                guide_loss: Vec::new(),
                physics: None,
            })
        })
        .collect()
}

/// Metric rows for velocity (and decoded physics, when present).
pub fn recon_rows(recons: &[SliceRecon]) -> Result<Vec<MetricRow>> {
    let vel_names: Vec<&str> = VELOCITY_VARS.iter().map(|&v| VARIABLES[v]).collect();
    let phys_names: Vec<&str> = PHYSICS_VARS.iter().map(|&v| VARIABLES[v]).collect();
    let kinds = [MaskKind::Active, MaskKind::Empty, MaskKind::All];
    let mut rows = Vec::new();
    for r in recons {
        rows.extend(field_rows(&r.truth, &r.mean, &vel_names, &r.active, r.slice, r.time, &kinds)?);
        if let Some((pred, truth)) = &r.physics {
            rows.extend(field_rows(truth, pred, &phys_names, &r.active, r.slice, r.time, &[MaskKind::Active])?);
        }
    }
    Ok(rows)
}

/// Writes a reconstruction archive, `metrics.csv` and `guide_loss.csv`.
pub fn write_recon(dir: &Path, meta: serde_json::Value, recons: &[SliceRecon], obs_mask: &[bool], h: usize, w: usize) -> Result<()> {
    let mut wr = FieldArchiveWriter::create(dir, meta)?;
    let flag = |m: &[bool]| m.iter().map(|&b| b as u8 as f64).collect::<Vec<_>>();
    wr.add("obs_mask", &[1, h, w], "flag", None, &flag(obs_mask))?;
    let vunits = UNITS[0];
    for r in recons {
        let s = r.slice;
        let t = Some(r.time);
        wr.add_field(&format!("s{s}_truth"), &r.truth, vunits, t)?;
        wr.add(&format!("s{s}_active"), &[1, h, w], "flag", t, &flag(&r.active))?;
        wr.add_field(&format!("s{s}_sample"), &r.sample, vunits, t)?;
        wr.add_field(&format!("s{s}_mean"), &r.mean, vunits, t)?;
        if let Some(sd) = &r.std {
            wr.add_field(&format!("s{s}_std"), sd, vunits, t)?;
        }
        if let Some((p, tp)) = &r.physics {
            let units = PHYSICS_VARS.iter().map(|&v| UNITS[v]).collect::<Vec<_>>().join(",");
            wr.add_field(&format!("s{s}_physics"), p, &units, t)?;
            wr.add_field(&format!("s{s}_physics_truth"), tp, &units, t)?;
        }
    }
    wr.finish()?;
    let mut gl = String::from("slice,step,loss\n");
    for r in recons {
        for (i, l) in r.guide_loss.iter().enumerate() {
            let _ = writeln!(gl, "{},{},{:.9e}", r.slice, i, l);
        }
    }
    write_atomic(&dir.join("guide_loss.csv"), gl.as_bytes())?;
    write_atomic(&dir.join("metrics.csv"), rows_to_csv(&recon_rows(recons)?).as_bytes())
}

/// Reconstructs the configured slices and writes everything under
/// `recon/<label>`.
pub fn cmd_reconstruct(cfg: &PipelineConfig, req: &ReconRequest, label: &str) -> Result<Vec<SliceRecon>> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let models = Models::load(cfg)?;
    let recons = reconstruct_slices(&ds, &models, &cfg.sampler_config(), req)?;
    let first = &recons[0];
    let (h, w) = (first.truth.height, first.truth.width);
    let obs = crate::sampler::window_mask(h, w, req.obs.coverage, req.obs.stride)?;
    let meta = json!({
        "kind": "reconstruction",
        "config": cfg.resolved(),
        "coverage": req.obs.coverage,
        "stride": req.obs.stride,
        "mode": req.mode,
        "members": req.members,
        "test_instance": ds.split.test_instance,
    });
    write_recon(&cfg.layout().recon(label), meta, &recons, &obs, h, w)?;
    Ok(recons)
}

/// Unguided samples for one slice, in physical units.
pub fn cmd_sample(cfg: &PipelineConfig, slice: usize, count: usize) -> Result<Vec<Field2>> {
    cfg.validate()?;
    if !(1..=3).contains(&slice) || count == 0 {
        return Err(Error::config("sample needs a slice in 1..=3 and a positive count"));
    }
    let stats = NormStats::load(&cfg.layout().stats())?;
    let models = Models::load(cfg)?;
    let out = unguided_samples(&models, &stats, &cfg.sampler_config(), slice, count, cfg.grid.dims.2, cfg.grid.dims.0, "sample")?;
    let dir = cfg.layout().samples().join(format!("slice{slice}"));
    let mut w = FieldArchiveWriter::create(&dir, json!({"kind": "samples", "slice": slice, "config": cfg.resolved()}))?;
    for (k, f) in out.iter().enumerate() {
        w.add_field(&format!("sample_{k:03}"), f, UNITS[0], None)?;
    }
    w.finish()?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn unguided_samples(models: &Models, stats: &NormStats, sampler: &SamplerConfig, slice: usize, count: usize, h: usize, w: usize, tag: &str) -> Result<Vec<Field2>> {
    let scfg = SamplerConfig {
        mode: GuidanceMode::None,
        ..sampler.clone()
    };
    let seeds: Vec<u64> = (0..count as u64).map(|k| stage_seed(sampler.seed, tag, 16 * k + slice as u64)).collect();
    let backbone = models.backbone.as_net();
    seeds
        .par_iter()
        .map(|&s| Ok(reconstruct::<f32, _, Net<f32>>(&backbone, None, None, slice, h, w, stats, &scfg, s)?.velocity))
        .collect()
}

/// One point of a robustness sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variable: String,
    pub value: f64,
    pub slice: usize,
    pub observed_cells: usize,
    pub rmse: Option<f64>,
    pub r_x: Option<f64>,
}

pub fn sweep_rows(ds: &Dataset, models: &Models, cfg: &PipelineConfig) -> Result<Vec<SweepRow>> {
    let mut points: Vec<(&str, f64, f64, usize)> = Vec::new();
    for &c in &cfg.sweep.coverage {
        points.push(("coverage", c, c, 1));
    }
    for &k in &cfg.sweep.stride {
        points.push(("stride", k as f64, 1.0, k));
    }
    let frame = cfg.observation.frame.unwrap_or_else(|| pick_frame(ds.test_instance(), &[cfg.sweep.slice]));
    let sampler = SamplerConfig {
        ensemble: 1,
        ..cfg.sampler_config()
    };
    let mut rows: Vec<SweepRow> = points
        .par_iter()
        .map(|&(var, value, coverage, stride)| {
            let req = ReconRequest {
                obs: ObservationSpec {
                    coverage,
                    stride,
                    slices: vec![cfg.sweep.slice],
                    frame: Some(frame),
                },
                mode: cfg.sampler.mode,
                members: 1,
                decode_physics: false,
            };
            let r = &reconstruct_slices(ds, models, &sampler, &req)?[0];
            let obs = observation_for(ds, frame, coverage, stride)?;
            Ok(SweepRow {
                variable: var.to_string(),
                value,
                slice: r.slice,
                observed_cells: obs.observed_cells(),
                rmse: velocity_rmse(&r.truth, &r.mean, &r.active).ok(),
                r_x: masked_pearson(r.truth.channel(0), r.mean.channel(0), &r.active).ok(),
            })
        })
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| a.variable.cmp(&b.variable).then(a.value.total_cmp(&b.value)));
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow], variable: &str) -> String {
    let mut s = format!("{variable},slice,observed_cells,rmse,r_x\n");
    let f = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_else(|| "nan".into());
    for r in rows.iter().filter(|r| r.variable == variable) {
        let _ = writeln!(s, "{},{},{},{},{}", r.value, r.slice, r.observed_cells, f(r.rmse), f(r.r_x));
    }
    s
}

pub fn cmd_sweep(cfg: &PipelineConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let models = Models::load(cfg)?;
    let rows = sweep_rows(&ds, &models, cfg)?;
    let dir = cfg.layout().sweep();
    write_atomic(&dir.join("coverage.csv"), sweep_csv(&rows, "coverage").as_bytes())?;
    write_atomic(&dir.join("stride.csv"), sweep_csv(&rows, "stride").as_bytes())?;
    Ok(rows)
}

/// RMSE over all velocity components of the cells in `mask`.
pub fn velocity_rmse(truth: &Field2, pred: &Field2, mask: &[bool]) -> Result<f64> {
    let m: Vec<bool> = (0..truth.channels).flat_map(|_| mask.iter().copied()).collect();
    masked_rmse(&truth.data, &pred.data, &m)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceEval {
    pub slice: usize,
    pub n_active: usize,
    pub rmse_guided: Option<f64>,
    pub rmse_unguided: Option<f64>,
    pub r_x_guided: Option<f64>,
    pub r_x_unguided: Option<f64>,
    pub empty_rmse_sparse: Option<f64>,
    pub empty_rmse_baseline: Option<f64>,
    pub r_x_baseline_guidance: Option<f64>,
    pub r_x_deterministic: Option<f64>,
    pub rmse_deterministic: Option<f64>,
    pub mean_std: Option<f64>,
    pub coverage_2sigma: Option<f64>,
    pub coverage_3sigma: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_instance: u32,
    pub frame: usize,
    pub time: f64,
    pub slices: Vec<SliceEval>,
    /// KS distance per velocity component, unguided samples vs validation.
    pub ks: Vec<f64>,
    pub coverage_2sigma: Option<f64>,
    pub coverage_3sigma: Option<f64>,
    pub sweep: Vec<SweepRow>,
}

fn active_values(fields: &[(Field2, Vec<bool>)], c: usize) -> Vec<f64> {
    fields
        .iter()
        .flat_map(|(f, m)| f.channel(c).iter().zip(m).filter(|(_, &a)| a).map(|(v, _)| *v).collect::<Vec<_>>())
        .collect()
}

/// All desk-scale experiments on the test instance.
pub fn evaluate(cfg: &PipelineConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let models = Models::load(cfg)?;
    let sampler = cfg.sampler_config();
    let slices = cfg.observation.slices.clone();
    let inst = ds.test_instance();
    let frame = cfg.observation.frame.unwrap_or_else(|| pick_frame(inst, &slices));
    let obs = ObservationSpec {
        frame: Some(frame),
        ..cfg.observation.clone()
    };
    let req = |mode, members| ReconRequest {
        obs: obs.clone(),
        mode,
        members,
        decode_physics: false,
    };
    info!("eval: guided, unguided and baseline-guidance reconstructions");
    let guided = reconstruct_slices(&ds, &models, &sampler, &req(GuidanceMode::SparsityAware, 1))?;
    let unguided = reconstruct_slices(&ds, &models, &sampler, &req(GuidanceMode::None, 1))?;
    let base = reconstruct_slices(&ds, &models, &sampler, &req(GuidanceMode::NormalizedBaseline, 1))?;
    let det = match &models.baseline {
        Some(m) => Some(baseline_slices(&ds, m, &obs)?),
        None => None,
    };
    info!("eval: {}-member ensembles", cfg.eval.ensemble);
    let ens_sampler = SamplerConfig {
        seed: stage_seed(sampler.seed, "ensemble", 0),
        ..sampler.clone()
    };
    let ens = reconstruct_slices(&ds, &models, &ens_sampler, &req(GuidanceMode::SparsityAware, cfg.eval.ensemble))?;

    let mut report = EvalReport {
        test_instance: inst.id,
        frame,
        time: inst.frames[frame].time,
        ..Default::default()
    };
    let (mut t_all, mut m_all, mut s_all, mut a_all) = (vec![], vec![], vec![], vec![]);
    for (i, &slice) in slices.iter().enumerate() {
        let g = &guided[i];
        let empty: Vec<bool> = g.active.iter().map(|a| !a).collect();
        let rx = |r: &SliceRecon| masked_pearson(r.truth.channel(0), r.mean.channel(0), &r.active).ok();
        let mut se = SliceEval {
            slice,
            n_active: g.active.iter().filter(|&&a| a).count(),
            rmse_guided: velocity_rmse(&g.truth, &g.mean, &g.active).ok(),
            rmse_unguided: velocity_rmse(&g.truth, &unguided[i].mean, &g.active).ok(),
            r_x_guided: rx(g),
            r_x_unguided: rx(&unguided[i]),
            empty_rmse_sparse: velocity_rmse(&g.truth, &g.mean, &empty).ok(),
            empty_rmse_baseline: velocity_rmse(&g.truth, &base[i].mean, &empty).ok(),
            r_x_baseline_guidance: rx(&base[i]),
            ..Default::default()
        };
        if let Some(d) = &det {
            se.r_x_deterministic = rx(&d[i]);
            se.rmse_deterministic = velocity_rmse(&d[i].truth, &d[i].mean, &d[i].active).ok();
        }
        let e = &ens[i];
        if let Some(sd) = &e.std {
            let m3: Vec<bool> = (0..3).flat_map(|_| e.active.iter().copied()).collect();
            se.coverage_2sigma = coverage(&e.truth.data, &e.mean.data, &sd.data, &m3, 2.0).ok();
            se.coverage_3sigma = coverage(&e.truth.data, &e.mean.data, &sd.data, &m3, 3.0).ok();
            let vals: Vec<f64> = sd.data.iter().zip(&m3).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
            se.mean_std = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            t_all.extend_from_slice(&e.truth.data);
            m_all.extend_from_slice(&e.mean.data);
            s_all.extend_from_slice(&sd.data);
            a_all.extend(m3);
        }
        report.slices.push(se);
    }
    if !a_all.is_empty() {
        report.coverage_2sigma = coverage(&t_all, &m_all, &s_all, &a_all, 2.0).ok();
        report.coverage_3sigma = coverage(&t_all, &m_all, &s_all, &a_all, 3.0).ok();
    }

    info!("eval: prior samples");
    let (h, w) = (guided[0].truth.height, guided[0].truth.width);
    let mut gen = Vec::new();
    let mut refs = Vec::new();
    for &slice in &slices {
        for f in unguided_samples(&models, &ds.stats, &sampler, slice, cfg.eval.prior_samples, h, w, "prior")? {
            let m = activity_mask(&f, cfg.activity_threshold);
            gen.push((f, m));
        }
        for k in ds.split.val.iter().filter(|k| k.slice == slice) {
            let s = ds.sample(k);
            refs.push((s.velocity.clone(), s.mask.clone()));
        }
    }
    report.ks = (0..3).map(|c| ecdf_distance(&active_values(&gen, c), &active_values(&refs, c))).collect();

    info!("eval: robustness sweeps");
    report.sweep = sweep_rows(&ds, &models, cfg)?;

    let dir = cfg.layout().eval();
    write_atomic(&dir.join("eval.json"), &to_json_pretty(&report))?;
    let meta = json!({"kind": "evaluation", "config": cfg.resolved(), "frame": frame});
    let obs_mask = crate::sampler::window_mask(h, w, obs.coverage, obs.stride)?;
    write_recon(&dir.join("guided"), meta.clone(), &guided, &obs_mask, h, w)?;
    write_recon(&dir.join("ensemble"), meta, &ens, &obs_mask, h, w)?;
    write_atomic(&dir.join("coverage.csv"), sweep_csv(&report.sweep, "coverage").as_bytes())?;
    write_atomic(&dir.join("stride.csv"), sweep_csv(&report.sweep, "stride").as_bytes())?;
    Ok(report)
}

/// Every stage in order, from simulation to evaluation.
pub fn run_all(cfg: &PipelineConfig) -> Result<EvalReport> {
    simulate(cfg, None)?;
    grid(cfg)?;
    build_dataset(cfg)?;
    for kind in ModelKind::ALL {
        train_model(cfg, kind, false)?;
    }
    evaluate(cfg)
}

/// Files under `root`, relative and sorted, for artifact comparisons.
pub fn list_files(root: &Path) -> Result<Vec<PathBuf>> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(base, &p, out)?;
            } else {
                out.push(p.strip_prefix(base).expect("under base").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_are_distinct_and_stable() {
        let a = stage_seed(7, "dem", 0);
        assert_eq!(a, stage_seed(7, "dem", 0));
        assert_ne!(a, stage_seed(7, "dem", 1));
        assert_ne!(a, stage_seed(7, "train", 0));
        assert_ne!(a, stage_seed(8, "dem", 0));
    }

    #[test]
    fn config_parsing_and_validation() {
        let p = Path::new("cfg.json");
        let cfg = parse_pipeline_config("{}", p).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        let cfg = parse_pipeline_config(r#"{"seed": 5, "sampler": {"mode": "baseline"}}"#, p).unwrap();
        assert_eq!(cfg.sampler.mode, GuidanceMode::NormalizedBaseline);
        assert!(matches!(parse_pipeline_config(r#"{"sed": 5}"#, p), Err(Error::Parse { .. })));
        assert!(matches!(parse_pipeline_config(r#"{"instances": 1}"#, p), Err(Error::TooFewInstances { .. })));
        assert!(parse_pipeline_config(r#"{"observation": {"coverage": 0}}"#, p).is_err());
        assert!(parse_pipeline_config(r#"{"observation": {"slices": [0]}}"#, p).is_err());
        assert!(parse_pipeline_config(r#"{"sweep": {"stride": [0]}}"#, p).is_err());
    }

    #[test]
    fn resolved_config_records_derived_seeds() {
        let cfg = PipelineConfig {
            seed: 3,
            ..PipelineConfig::default()
        };
        let v = cfg.resolved();
        assert_eq!(v["backbone"]["seed"], json!(cfg.train_config(ModelKind::Backbone).seed));
        assert_eq!(v["dem"]["rng_seed"].as_array().unwrap().len(), 6);
    }
}
