use std::fs;

use chuteflow::archive::*;
use chuteflow::coarsegrain::{coarse_grain, GridSpec};
use chuteflow::dem::{run, DemConfig};
use chuteflow::Error;

fn short_run() -> (DemConfig, Vec<chuteflow::dem::ParticleState>) {
    let cfg = DemConfig {
        n_particles: 200,
        total_time: 0.02,
        snapshot_interval: 0.01,
        rng_seed: 3,
        ..DemConfig::default()
    };
    let states = run(&cfg).unwrap();
    (cfg, states)
}

fn r32(x: f64) -> f64 {
    x as f32 as f64
}

#[test]
fn run_archive_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, states) = short_run();
    assert!(states.len() >= 2);
    write_run(dir.path(), &cfg, &states).unwrap();
    let (m, back) = read_run(dir.path()).unwrap();
    assert_eq!(m.config, cfg);
    assert_eq!(back.len(), states.len());
    for (a, b) in states.iter().zip(&back) {
        assert_eq!(a.time, b.time);
        assert_eq!(a.fixed, b.fixed);
        assert_eq!(a.contacts.len(), b.contacts.len());
        for (p, q) in a.positions.iter().zip(&b.positions) {
            assert_eq!((r32(p.x), r32(p.y), r32(p.z)), (q.x, q.y, q.z));
        }
        for (c, d) in a.contacts.iter().zip(&b.contacts) {
            assert_eq!((c.a, c.b), (d.a, d.b));
            assert_eq!(r32(c.force.z), d.force.z);
        }
    }
    let last = states.last().unwrap();
    assert!(!last.contacts.is_empty());

    // Writing the same run twice gives identical bytes.
    let dir2 = tempfile::tempdir().unwrap();
    write_run(dir2.path(), &cfg, &states).unwrap();
    for f in ["manifest.json", "snap_0001/positions.f32", "snap_0001/contacts.idx"] {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(dir2.path().join(f)).unwrap());
    }
}

#[test]
fn corrupt_run_archives_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, states) = short_run();
    write_run(dir.path(), &cfg, &states[..1]).unwrap();
    let mpath = dir.path().join(MANIFEST);
    let text = fs::read_to_string(&mpath).unwrap();

    fs::write(&mpath, text.replacen("\"snapshots\"", "\"snapshots\" oops", 1)).unwrap();
    match read_run(dir.path()) {
        Err(Error::Parse { path, line, .. }) => {
            assert_eq!(path, mpath);
            assert!(line.unwrap() > 1);
        }
        other => panic!("{other:?}"),
    }

    fs::write(&mpath, text.replace("snap_0000", "../snap_0000")).unwrap();
    assert!(matches!(read_run(dir.path()), Err(Error::Parse { .. })));

    fs::write(&mpath, &text).unwrap();
    let pos = dir.path().join("snap_0000/positions.f32");
    let mut bytes = fs::read(&pos).unwrap();
    bytes.truncate(bytes.len() - 4);
    fs::write(&pos, bytes).unwrap();
    match read_run(dir.path()) {
        Err(Error::Parse { path, .. }) => assert_eq!(path, pos),
        other => panic!("{other:?}"),
    }
}

#[test]
fn grid_archive_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, states) = short_run();
    let spec = GridSpec::default();
    let vols: Vec<_> = states.iter().map(|s| (s.time, coarse_grain(s, &spec))).collect();
    write_grid(dir.path(), 4, cfg.mean_diameter, &vols).unwrap();
    let (meta, back) = read_grid(dir.path()).unwrap();
    assert_eq!(meta.instance, 4);
    assert_eq!(meta.spec, spec);
    assert_eq!(back.len(), vols.len());
    for ((t, a), (u, b)) in vols.iter().zip(&back) {
        assert_eq!(t, u);
        assert_eq!(a.count, b.count);
        assert_eq!(a.outside, b.outside);
        for (x, y) in a.p.iter().zip(&b.p) {
            assert_eq!(r32(*x), *y);
        }
        for (x, y) in a.sigma.iter().zip(&b.sigma) {
            assert_eq!(r32(x[0][2]), y[0][2]);
        }
        for (x, y) in a.velocity.iter().zip(&b.velocity) {
            assert_eq!(r32(x.y), y.y);
        }
    }

    let a = FieldArchive::open(dir.path()).unwrap();
    let e = a.entry("f000_velocity").unwrap();
    assert_eq!(e.units, "m/s");
    assert_eq!(e.shape, vec![11, 16, 32, 3]);
    assert!(a.entry("nope").is_err());
}

#[test]
fn field_archive_rejects_bad_arrays() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = FieldArchiveWriter::create(dir.path(), serde_json::json!({"kind": "test"})).unwrap();
    w.add("a", &[2, 3], "m", None, &[0.0; 6]).unwrap();
    assert!(w.add("a", &[1], "m", None, &[0.0]).is_err());
    assert!(w.add("b/c", &[1], "m", None, &[0.0]).is_err());
    assert!(matches!(w.add("b", &[2], "m", None, &[0.0]), Err(Error::Shape(_))));
    w.finish().unwrap();
    let a = FieldArchive::open(dir.path()).unwrap();
    assert_eq!(a.read("a").unwrap(), vec![0.0; 6]);
    assert!(a.read_field("a").is_err());
    fs::write(dir.path().join("a.f32"), [0u8; 8]).unwrap();
    assert!(matches!(a.read("a"), Err(Error::Parse { .. })));
}

#[test]
fn fuzz_seeds_are_accepted() {
    use std::path::Path;
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let text = |t: &str, f: &str| fs::read_to_string(root.join(t).join(f)).unwrap();
    let p = Path::new("seed");
    chuteflow::nets::decode_checkpoint(&fs::read(root.join("checkpoint/forward.ckpt")).unwrap()).unwrap();
    assert!(chuteflow::nets::decode_checkpoint(&fs::read(root.join("checkpoint/truncated")).unwrap()).is_err());
    chuteflow::dataset::parse_stats(&text("stats", "stats.json")).unwrap();
    chuteflow::dataset::parse_split(&text("split", "split.json")).unwrap();
    parse_run_manifest(&text("run_manifest", "manifest.json"), p).unwrap();
    parse_field_manifest(&text("field_manifest", "grid.json"), p).unwrap();
    for f in ["tiny.json", "empty.json", "overrides.json"] {
        chuteflow::pipeline::parse_pipeline_config(&text("pipeline_config", f), p).unwrap();
    }
    let raw = fs::read(root.join("raw_arrays/velocity")).unwrap();
    let n = (raw.len() - 1) / 4;
    decode_array(&raw[1..], &[n / 32, 32]).unwrap();
}
