//! Slice datasets: activity-masked normalization statistics, z-scoring and
//! reproducible per-instance train/validation splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{parse_json, read_text, to_json_pretty, write_atomic};
use crate::coarsegrain::{activity_mask, extract_slices, GridVolume, SliceSample};
use crate::error::{Error, Result};
use crate::field::Field2;

pub const VARIABLES: [&str; 6] = ["v_x", "v_y", "v_z", "p", "q", "T"];
pub const UNITS: [&str; 6] = ["m/s", "m/s", "m/s", "Pa", "Pa", "m^2/s^2"];
pub const VELOCITY_VARS: [usize; 3] = [0, 1, 2];
pub const PHYSICS_VARS: [usize; 3] = [3, 4, 5];
/// Observable boundary channels: v_x and v_z.
pub const BOUNDARY_VARS: [usize; 2] = [0, 2];
pub const VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableStats {
    pub name: String,
    pub units: String,
    pub mean: f64,
    pub std: f64,
    /// Number of active cells the moments were computed from.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub variables: Vec<VariableStats>,
    pub threshold: f64,
    pub source_instances: Vec<u32>,
}

impl NormStats {
    pub fn mean(&self, var: usize) -> f64 {
        self.variables[var].mean
    }

    pub fn std(&self, var: usize) -> f64 {
        self.variables[var].std
    }

    pub fn validate(&self) -> Result<()> {
        if self.variables.len() != VARIABLES.len() {
            return Err(Error::parse(format!(
                "expected {} variables, found {}",
                VARIABLES.len(),
                self.variables.len()
            )));
        }
        for (v, name) in self.variables.iter().zip(VARIABLES) {
            if v.name != name {
                return Err(Error::parse(format!("expected variable {name}, found {}", v.name)));
            }
            if !v.mean.is_finite() || !v.std.is_finite() || v.std <= 0.0 {
                return Err(Error::DegenerateStats(v.name.clone()));
            }
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::parse("threshold must be non-negative"));
        }
        Ok(())
    }

    pub fn identity() -> Self {
        NormStats {
            variables: VARIABLES
                .iter()
                .zip(UNITS)
                .map(|(n, u)| VariableStats {
                    name: n.to_string(),
                    units: u.to_string(),
                    mean: 0.0,
                    std: 1.0,
                    count: 0,
                })
                .collect(),
            threshold: crate::dem::REST_SPEED,
            source_instances: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &to_json_pretty(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        parse_stats(&read_text(path)?).map_err(|e| e.at_path(path))
    }
}

pub fn parse_stats(text: &str) -> Result<NormStats> {
    let s: NormStats = parse_json(text, Path::new(""))?;
    s.validate()?;
    Ok(s)
}

/// Population mean and standard deviation of every variable over cells
/// whose velocity magnitude exceeds `threshold`.
pub fn compute_active_stats(samples: &[&SliceSample], threshold: f64) -> Result<NormStats> {
    let masks: Vec<Vec<bool>> = samples
        .iter()
        .map(|s| activity_mask(&s.velocity, threshold))
        .collect();
    let active: usize = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
    if active == 0 {
        return Err(Error::EmptyActiveSet);
    }
    let field_of = |s: &SliceSample, var: usize| -> Result<(Field2, usize)> {
        if var < 3 {
            Ok((s.velocity.clone(), var))
        } else {
            let p = s
                .physics
                .as_ref()
                .ok_or_else(|| Error::Pairing("physics fields missing from a sample".into()))?;
            Ok((p.clone(), var - 3))
        }
    };
    let mut variables = Vec::with_capacity(6);
    for var in 0..6 {
        let mut sum = 0.0;
        for (s, m) in samples.iter().zip(&masks) {
            let (f, ch) = field_of(s, var)?;
            sum += f.channel(ch).iter().zip(m).filter(|(_, &a)| a).map(|(v, _)| v).sum::<f64>();
        }
        let mean = sum / active as f64;
        let mut ss = 0.0;
        for (s, m) in samples.iter().zip(&masks) {
            let (f, ch) = field_of(s, var)?;
            ss += f
                .channel(ch)
                .iter()
                .zip(m)
                .filter(|(_, &a)| a)
                .map(|(v, _)| (v - mean) * (v - mean))
                .sum::<f64>();
        }
        let std = (ss / active as f64).sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::DegenerateStats(VARIABLES[var].into()));
        }
        variables.push(VariableStats {
            name: VARIABLES[var].into(),
            units: UNITS[var].into(),
            mean,
            std,
            count: active,
        });
    }
    Ok(NormStats {
        variables,
        threshold,
        source_instances: Vec::new(),
    })
}

/// z-scores each channel of `f` with the statistics of `vars[channel]`.
pub fn normalize_field(f: &Field2, vars: &[usize], stats: &NormStats) -> Field2 {
    map_channels(f, vars, |v, var| (v - stats.mean(var)) / stats.std(var))
}

pub fn denormalize_field(f: &Field2, vars: &[usize], stats: &NormStats) -> Field2 {
    map_channels(f, vars, |v, var| v * stats.std(var) + stats.mean(var))
}

fn map_channels(f: &Field2, vars: &[usize], op: impl Fn(f64, usize) -> f64) -> Field2 {
    assert_eq!(f.channels, vars.len(), "one variable per channel");
    let mut out = f.clone();
    for (c, &var) in vars.iter().enumerate() {
        for v in out.channel_mut(c) {
            *v = op(*v, var);
        }
    }
    out
}

/// Normalizes velocity and physics fields; the activity mask keeps its
/// physical meaning.
pub fn normalize(sample: &SliceSample, stats: &NormStats) -> SliceSample {
    SliceSample {
        velocity: normalize_field(&sample.velocity, &VELOCITY_VARS, stats),
        physics: sample
            .physics
            .as_ref()
            .map(|p| normalize_field(p, &PHYSICS_VARS, stats)),
        ..sample.clone()
    }
}

pub fn denormalize(sample: &SliceSample, stats: &NormStats) -> SliceSample {
    SliceSample {
        velocity: denormalize_field(&sample.velocity, &VELOCITY_VARS, stats),
        physics: sample
            .physics
            .as_ref()
            .map(|p| denormalize_field(p, &PHYSICS_VARS, stats)),
        ..sample.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleKey {
    pub instance: u32,
    pub frame: usize,
    pub slice: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSplit {
    pub seed: u64,
    pub dev_instances: Vec<u32>,
    pub test_instance: u32,
    pub train: Vec<SampleKey>,
    pub val: Vec<SampleKey>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        if self.dev_instances.contains(&self.test_instance) {
            return Err(Error::parse("test instance listed as a development instance"));
        }
        for k in self.train.iter().chain(&self.val) {
            if !self.dev_instances.contains(&k.instance) {
                return Err(Error::parse(format!("sample from unknown instance {}", k.instance)));
            }
            if k.slice > 3 {
                return Err(Error::parse(format!("slice index {} out of range", k.slice)));
            }
        }
        let mut all: Vec<_> = self.train.iter().chain(&self.val).collect();
        all.sort();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::parse("sample listed twice"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &to_json_pretty(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        parse_split(&read_text(path)?).map_err(|e| e.at_path(path))
    }
}

pub fn parse_split(text: &str) -> Result<DatasetSplit> {
    let s: DatasetSplit = parse_json(text, Path::new(""))?;
    s.validate()?;
    Ok(s)
}

/// Validation count for an instance with `n` samples: 10% rounded down,
/// at least one whenever a training sample remains.
pub fn val_count(n: usize) -> usize {
    if n < 2 {
        0
    } else {
        ((n as f64 * VAL_FRACTION).floor() as usize).max(1)
    }
}

/// The last instance is held out for testing; every other instance is
/// split 90/10 independently with a seeded shuffle.
pub fn make_splits(instances: &[(u32, Vec<SampleKey>)], seed: u64) -> Result<DatasetSplit> {
    if instances.len() < 2 {
        return Err(Error::TooFewInstances {
            needed: 2,
            got: instances.len(),
        });
    }
    let (test, dev) = instances.split_last().unwrap();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (id, keys) in dev {
        let mut keys = keys.clone();
        keys.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(*id)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        keys.shuffle(&mut rng);
        let nv = val_count(keys.len());
        val.extend_from_slice(&keys[..nv]);
        train.extend_from_slice(&keys[nv..]);
    }
    train.sort();
    val.sort();
    let split = DatasetSplit {
        seed,
        dev_instances: dev.iter().map(|(id, _)| *id).collect(),
        test_instance: test.0,
        train,
        val,
    };
    split.validate().map_err(|e| Error::config(e.to_string()))?;
    Ok(split)
}

/// All four slices at one snapshot time.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub time: f64,
    pub slices: Vec<SliceSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: u32,
    pub frames: Vec<Frame>,
}

impl Instance {
    pub fn from_volumes(id: u32, volumes: &[(f64, GridVolume)], d: f64) -> Result<Self> {
        let frames = volumes
            .iter()
            .map(|(t, v)| {
                Ok(Frame {
                    time: *t,
                    slices: extract_slices(v, d, *t)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Instance { id, frames })
    }

    pub fn keys(&self) -> Vec<SampleKey> {
        (0..self.frames.len())
            .flat_map(|frame| {
                (0..4).map(move |slice| SampleKey {
                    instance: self.id,
                    frame,
                    slice,
                })
            })
            .collect()
    }
}

/// Instances with their split and training-only statistics.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub split: DatasetSplit,
    pub stats: NormStats,
}

impl Dataset {
    pub fn build(instances: Vec<Instance>, seed: u64, threshold: f64) -> Result<Self> {
        let index: Vec<(u32, Vec<SampleKey>)> = instances.iter().map(|i| (i.id, i.keys())).collect();
        let split = make_splits(&index, seed)?;
        Self::with_split(instances, split, threshold)
    }

    pub fn with_split(instances: Vec<Instance>, split: DatasetSplit, threshold: f64) -> Result<Self> {
        let mut ds = Dataset {
            instances,
            split,
            stats: NormStats::identity(),
        };
        for k in ds.split.train.iter().chain(&ds.split.val) {
            ds.try_sample(k)?;
        }
        ds.instance(ds.split.test_instance)?;
        let train: Vec<&SliceSample> = ds.split.train.iter().map(|k| ds.sample(k)).collect();
        let mut stats = compute_active_stats(&train, threshold)?;
        stats.source_instances = ds.split.dev_instances.clone();
        ds.stats = stats;
        Ok(ds)
    }

    pub fn instance(&self, id: u32) -> Result<&Instance> {
        self.instances
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| Error::Pairing(format!("instance {id} not present")))
    }

    pub fn try_sample(&self, key: &SampleKey) -> Result<&SliceSample> {
        self.instance(key.instance)?
            .frames
            .get(key.frame)
            .and_then(|f| f.slices.get(key.slice))
            .ok_or_else(|| Error::Pairing(format!("no sample for {key:?}")))
    }

    pub fn sample(&self, key: &SampleKey) -> &SliceSample {
        self.try_sample(key).expect("key validated at construction")
    }

    pub fn test_instance(&self) -> &Instance {
        self.instance(self.split.test_instance).expect("validated")
    }
}
