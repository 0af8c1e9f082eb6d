//! On-disk formats: DEM run archives and named-array field archives.
//!
//! Both are a directory holding `manifest.json` plus raw little-endian
//! arrays. Values are stored as 32-bit floats; pair indices as 32-bit
//! unsigned ints.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::binio::{decode_f32, decode_u32, f32_bytes, f64_as_f32_bytes, parse_json, read_file, read_text, to_json_pretty, u32_bytes, write_atomic};
use crate::coarsegrain::{GridSpec, GridVolume};
use crate::dem::{Contact, DemConfig, ParticleState};
use crate::field::Field2;
use crate::vec3::Vec3;
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const RUN_FORMAT: &str = "chuteflow-run";
pub const FIELD_FORMAT: &str = "chuteflow-fields";
pub const ARCHIVE_VERSION: u32 = 1;

fn check_header(format: &str, version: u32, want: &str) -> Result<()> {
    if format != want {
        return Err(Error::parse(format!("format is {format:?}, expected {want:?}")));
    }
    if version != ARCHIVE_VERSION {
        return Err(Error::parse(format!("unsupported archive version {version}")));
    }
    Ok(())
}

/// File names inside an archive are plain names, never paths.
fn check_file_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::parse(format!("invalid archive entry name {name:?}")))
    }
}

fn vec3s(values: &[f32]) -> Vec<Vec3> {
    values
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64))
        .collect()
}

fn flat3(values: impl IntoIterator<Item = Vec3>) -> Vec<f64> {
    values.into_iter().flat_map(|v| [v.x, v.y, v.z]).collect()
}

fn read_f32(dir: &Path, file: &str, expect: usize) -> Result<Vec<f32>> {
    let path = dir.join(file);
    let v = decode_f32(&read_file(&path)?).map_err(|e| e.at_path(&path))?;
    if v.len() != expect {
        return Err(Error::parse(format!("expected {expect} values, found {}", v.len())).at_path(&path));
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotEntry {
    pub dir: String,
    pub time: f64,
    pub n_particles: usize,
    pub n_contacts: usize,
    pub plate_active: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub config: DemConfig,
    pub units: BTreeMap<String, String>,
    pub snapshots: Vec<SnapshotEntry>,
}

fn run_units() -> BTreeMap<String, String> {
    [
        ("time", "s"),
        ("positions", "m"),
        ("velocities", "m/s"),
        ("radii", "m"),
        ("fixed", "flag"),
        ("contacts.idx", "particle index pair"),
        ("contacts.f32", "force N, branch m, point m"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// Validates the JSON text of a run manifest.
pub fn parse_run_manifest(text: &str, path: &Path) -> Result<RunManifest> {
    let m: RunManifest = parse_json(text, path)?;
    let check = || -> Result<()> {
        check_header(&m.format, m.version, RUN_FORMAT)?;
        m.config.validate().map_err(|e| Error::parse(e.to_string()))?;
        let mut seen = HashSet::new();
        for s in &m.snapshots {
            check_file_name(&s.dir)?;
            if !seen.insert(&s.dir) {
                return Err(Error::parse(format!("duplicate snapshot {:?}", s.dir)));
            }
            if !s.time.is_finite() {
                return Err(Error::parse("non-finite snapshot time"));
            }
        }
        Ok(())
    };
    check().map_err(|e| e.at_path(path))?;
    Ok(m)
}

pub fn write_run(dir: &Path, cfg: &DemConfig, states: &[ParticleState]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut snapshots = Vec::with_capacity(states.len());
    for (i, s) in states.iter().enumerate() {
        let name = format!("snap_{i:04}");
        let sd = dir.join(&name);
        write_atomic(&sd.join("positions.f32"), &f64_as_f32_bytes(&flat3(s.positions.iter().copied())))?;
        write_atomic(&sd.join("velocities.f32"), &f64_as_f32_bytes(&flat3(s.velocities.iter().copied())))?;
        write_atomic(&sd.join("radii.f32"), &f64_as_f32_bytes(&s.radii))?;
        let fixed: Vec<u8> = s.fixed.iter().map(|&f| f as u8).collect();
        write_atomic(&sd.join("fixed.u8"), &fixed)?;
        let idx: Vec<u32> = s.contacts.iter().flat_map(|c| [c.a, c.b]).collect();
        write_atomic(&sd.join("contacts.idx"), &u32_bytes(&idx))?;
        let data = flat3(s.contacts.iter().flat_map(|c| [c.force, c.branch, c.point]));
        write_atomic(&sd.join("contacts.f32"), &f64_as_f32_bytes(&data))?;
        snapshots.push(SnapshotEntry {
            dir: name,
            time: s.time,
            n_particles: s.len(),
            n_contacts: s.contacts.len(),
            plate_active: s.plate_active,
        });
    }
    let manifest = RunManifest {
        format: RUN_FORMAT.into(),
        version: ARCHIVE_VERSION,
        config: cfg.clone(),
        units: run_units(),
        snapshots,
    };
    write_atomic(&dir.join(MANIFEST), &to_json_pretty(&manifest))
}

pub fn read_run_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST);
    parse_run_manifest(&read_text(&path)?, &path)
}

pub fn read_snapshot(dir: &Path, e: &SnapshotEntry) -> Result<ParticleState> {
    let sd = dir.join(&e.dir);
    let n = e.n_particles;
    let pos = vec3s(&read_f32(&sd, "positions.f32", 3 * n)?);
    let vel = vec3s(&read_f32(&sd, "velocities.f32", 3 * n)?);
    let radii: Vec<f64> = read_f32(&sd, "radii.f32", n)?.into_iter().map(f64::from).collect();
    let fpath = sd.join("fixed.u8");
    let fixed_raw = read_file(&fpath)?;
    if fixed_raw.len() != n || fixed_raw.iter().any(|&b| b > 1) {
        return Err(Error::parse("fixed flags must be one 0/1 byte per particle").at_path(&fpath));
    }
    let ipath = sd.join("contacts.idx");
    let idx = decode_u32(&read_file(&ipath)?).map_err(|er| er.at_path(&ipath))?;
    if idx.len() != 2 * e.n_contacts || idx.iter().any(|&i| i as usize >= n) {
        return Err(Error::parse("contact indices do not match the manifest").at_path(&ipath));
    }
    let cdata = vec3s(&read_f32(&sd, "contacts.f32", 9 * e.n_contacts)?);
    let mut s = ParticleState::new(pos, vel, radii, fixed_raw.iter().map(|&b| b == 1).collect());
    s.time = e.time;
    s.plate_active = e.plate_active;
    s.contacts = idx
        .chunks_exact(2)
        .zip(cdata.chunks_exact(3))
        .map(|(ab, v)| Contact {
            a: ab[0],
            b: ab[1],
            force: v[0],
            branch: v[1],
            point: v[2],
        })
        .collect();
    Ok(s)
}

pub fn read_run(dir: &Path) -> Result<(RunManifest, Vec<ParticleState>)> {
    let m = read_run_manifest(dir)?;
    let states = m.snapshots.iter().map(|e| read_snapshot(dir, e)).collect::<Result<_>>()?;
    Ok((m, states))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
}

impl ArrayEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldManifest {
    pub format: String,
    pub version: u32,
    /// Free-form description of what produced the archive.
    #[serde(default)]
    pub meta: Value,
    pub arrays: Vec<ArrayEntry>,
}

pub fn parse_field_manifest(text: &str, path: &Path) -> Result<FieldManifest> {
    let m: FieldManifest = parse_json(text, path)?;
    let check = || -> Result<()> {
        check_header(&m.format, m.version, FIELD_FORMAT)?;
        let mut names = HashSet::new();
        let mut files = HashSet::new();
        for a in &m.arrays {
            check_file_name(&a.file)?;
            if a.file == MANIFEST {
                return Err(Error::parse("array file may not shadow the manifest"));
            }
            if !names.insert(&a.name) || !files.insert(&a.file) {
                return Err(Error::parse(format!("duplicate array {:?}", a.name)));
            }
            if a.shape.is_empty() {
                return Err(Error::parse(format!("array {:?} has no shape", a.name)));
            }
            a.shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= (1 << 31))
                .ok_or_else(|| Error::parse(format!("array {:?} is too large", a.name)))?;
            if a.time.is_some_and(|t| !t.is_finite()) {
                return Err(Error::parse(format!("array {:?} has a non-finite time", a.name)));
            }
        }
        Ok(())
    };
    check().map_err(|e| e.at_path(path))?;
    Ok(m)
}

/// Builds a field archive; the manifest is written last by `finish`.
pub struct FieldArchiveWriter {
    dir: PathBuf,
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

impl FieldArchiveWriter {
    pub fn create(dir: &Path, meta: Value) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(FieldArchiveWriter {
            dir: dir.to_path_buf(),
            meta,
            arrays: Vec::new(),
        })
    }

    pub fn add(&mut self, name: &str, shape: &[usize], units: &str, time: Option<f64>, data: &[f64]) -> Result<()> {
        let file = format!("{name}.f32");
        check_file_name(&file).map_err(|_| Error::config(format!("invalid array name {name:?}")))?;
        if self.arrays.iter().any(|a| a.name == name) {
            return Err(Error::config(format!("duplicate array {name:?}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("array {name:?}: shape {shape:?} vs {} values", data.len())));
        }
        write_atomic(&self.dir.join(&file), &f64_as_f32_bytes(data))?;
        self.arrays.push(ArrayEntry {
            name: name.into(),
            file,
            shape: shape.to_vec(),
            units: units.into(),
            time,
        });
        Ok(())
    }

    pub fn add_field(&mut self, name: &str, f: &Field2, units: &str, time: Option<f64>) -> Result<()> {
        self.add(name, &[f.channels, f.height, f.width], units, time, &f.data)
    }

    pub fn finish(self) -> Result<()> {
        let m = FieldManifest {
            format: FIELD_FORMAT.into(),
            version: ARCHIVE_VERSION,
            meta: self.meta,
            arrays: self.arrays,
        };
        write_atomic(&self.dir.join(MANIFEST), &to_json_pretty(&m))
    }
}

#[derive(Clone, Debug)]
pub struct FieldArchive {
    pub dir: PathBuf,
    pub manifest: FieldManifest,
}

impl FieldArchive {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let manifest = parse_field_manifest(&read_text(&path)?, &path)?;
        Ok(FieldArchive {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn entry(&self, name: &str) -> Result<&ArrayEntry> {
        self.manifest
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::parse(format!("no array named {name:?}")).at_path(&self.dir.join(MANIFEST)))
    }

    pub fn read(&self, name: &str) -> Result<Vec<f64>> {
        let e = self.entry(name)?;
        Ok(read_f32(&self.dir, &e.file, e.len())?.into_iter().map(f64::from).collect())
    }

    pub fn read_field(&self, name: &str) -> Result<Field2> {
        let e = self.entry(name)?;
        if e.shape.len() != 3 {
            return Err(Error::parse(format!("array {name:?} is not (channels, rows, cols)")).at_path(&self.dir.join(MANIFEST)));
        }
        Field2::from_vec(e.shape[0], e.shape[1], e.shape[2], self.read(name)?)
    }
}

/// Metadata of a grid archive: one instance, all its snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMeta {
    pub kind: String,
    pub instance: u32,
    pub spec: GridSpec,
    pub mean_diameter: f64,
    pub times: Vec<f64>,
}

fn vol_name(frame: usize, what: &str) -> String {
    format!("f{frame:03}_{what}")
}

pub fn write_grid(dir: &Path, instance: u32, mean_diameter: f64, volumes: &[(f64, GridVolume)]) -> Result<()> {
    let spec = volumes
        .first()
        .map(|(_, v)| v.spec.clone())
        .ok_or_else(|| Error::config("no volumes to archive"))?;
    let meta = GridMeta {
        kind: "grid".into(),
        instance,
        spec: spec.clone(),
        mean_diameter,
        times: volumes.iter().map(|(t, _)| *t).collect(),
    };
    let meta = serde_json::to_value(&meta).expect("serializable");
    let mut w = FieldArchiveWriter::create(dir, meta)?;
    let (nx, ny, nz) = spec.dims;
    let cells = [ny, nz, nx];
    for (f, (t, v)) in volumes.iter().enumerate() {
        if v.spec != spec {
            return Err(Error::shape("volumes use different grids"));
        }
        let t = Some(*t);
        let count: Vec<f64> = v.count.iter().map(|&c| c as f64).collect();
        w.add(&vol_name(f, "count"), &cells, "particles", t, &count)?;
        w.add(&vol_name(f, "velocity"), &[ny, nz, nx, 3], "m/s", t, &flat3(v.velocity.iter().copied()))?;
        w.add(&vol_name(f, "temperature"), &cells, "m^2/s^2", t, &v.temperature)?;
        let sigma: Vec<f64> = v.sigma.iter().flat_map(|s| s.iter().flatten().copied()).collect();
        w.add(&vol_name(f, "sigma"), &[ny, nz, nx, 3, 3], "Pa", t, &sigma)?;
        w.add(&vol_name(f, "p"), &cells, "Pa", t, &v.p)?;
        w.add(&vol_name(f, "q"), &cells, "Pa", t, &v.q)?;
        w.add(&vol_name(f, "outside"), &[1], "particles", t, &[v.outside as f64])?;
    }
    w.finish()
}

pub fn read_grid(dir: &Path) -> Result<(GridMeta, Vec<(f64, GridVolume)>)> {
    let a = FieldArchive::open(dir)?;
    let mpath = dir.join(MANIFEST);
    let meta: GridMeta =
        serde_json::from_value(a.manifest.meta.clone()).map_err(|e| Error::parse(format!("grid metadata: {e}")).at_path(&mpath))?;
    if meta.kind != "grid" {
        return Err(Error::parse(format!("archive kind is {:?}, expected \"grid\"", meta.kind)).at_path(&mpath));
    }
    meta.spec.validate().map_err(|e| Error::parse(e.to_string()).at_path(&mpath))?;
    let n = meta.spec.cell_count();
    let sized = |name: String, per: usize| -> Result<Vec<f64>> {
        let v = a.read(&name)?;
        if v.len() != n * per {
            return Err(Error::parse(format!("array {name:?} does not match the grid")).at_path(&mpath));
        }
        Ok(v)
    };
    let mut out = Vec::with_capacity(meta.times.len());
    for (f, &t) in meta.times.iter().enumerate() {
        let count = sized(vol_name(f, "count"), 1)?;
        if count.iter().any(|&c| c < 0.0 || c.fract() != 0.0) {
            return Err(Error::parse("particle counts must be non-negative integers").at_path(&mpath));
        }
        let velocity = sized(vol_name(f, "velocity"), 3)?;
        let sigma = sized(vol_name(f, "sigma"), 9)?;
        let outside = a.read(&vol_name(f, "outside"))?;
        let outside = match outside.as_slice() {
            [o] if *o >= 0.0 && o.fract() == 0.0 => *o as usize,
            _ => return Err(Error::parse("outside count must be one non-negative integer").at_path(&mpath)),
        };
        out.push((
            t,
            GridVolume {
                spec: meta.spec.clone(),
                count: count.iter().map(|&c| c as u32).collect(),
                velocity: velocity.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
                temperature: sized(vol_name(f, "temperature"), 1)?,
                sigma: sigma
                    .chunks_exact(9)
                    .map(|c| [[c[0], c[1], c[2]], [c[3], c[4], c[5]], [c[6], c[7], c[8]]])
                    .collect(),
                p: sized(vol_name(f, "p"), 1)?,
                q: sized(vol_name(f, "q"), 1)?,
                outside,
            },
        ));
    }
    Ok((meta, out))
}

/// Raw f32 block decoder exposed for fuzzing and tools.
pub fn decode_array(bytes: &[u8], shape: &[usize]) -> Result<Vec<f32>> {
    let v = decode_f32(bytes)?;
    if v.len() != shape.iter().product::<usize>() {
        return Err(Error::parse(format!("{} values do not fill shape {shape:?}", v.len())));
    }
    Ok(v)
}

/// Byte encoding of `values` as stored in archives.
pub fn encode_array(values: &[f32]) -> Vec<u8> {
    f32_bytes(values.iter().copied())
}
