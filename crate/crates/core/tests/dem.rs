use chuteflow::dem::{
    init_packing, kinetic_energy, mechanical_energy, release_plate, run, step, DemConfig,
    ParticleState, Stepper, MAX_OVERLAP_RATIO, REST_SPEED,
};
use chuteflow::vec3::Vec3;

fn frictionless_zero_g() -> DemConfig {
    DemConfig {
        gravity: 0.0,
        mu_pp: 0.0,
        mu_pw: 0.0,
        ..DemConfig::default()
    }
}

fn single(p: Vec3, v: Vec3, r: f64) -> ParticleState {
    ParticleState::new(vec![p], vec![v], vec![r], vec![false])
}

#[test]
fn empty_packing_has_only_base_spheres() {
    let cfg = DemConfig {
        n_particles: 0,
        ..DemConfig::default()
    };
    let st = init_packing(&cfg).unwrap();
    assert_eq!(st.mobile_count(), 0);
    assert!(!st.is_empty());
    assert!(st.fixed.iter().all(|f| *f));
    let r = 0.5 * cfg.base_roughness_diameter;
    assert!(st.radii.iter().all(|x| (*x - r).abs() < 1e-15));
}

#[test]
fn packing_is_deterministic_and_settled() {
    let cfg = DemConfig {
        n_particles: 2000,
        rng_seed: 7,
        ..DemConfig::default()
    };
    let a = init_packing(&cfg).unwrap();
    let b = init_packing(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.mobile_count(), 2000);
    assert!(a.max_mobile_speed() < REST_SPEED);
    assert!(a.max_overlap_ratio() <= MAX_OVERLAP_RATIO);
    let (lo, hi) = (
        0.5 * cfg.min_diameter() - 1e-15,
        0.5 * cfg.max_diameter() + 1e-15,
    );
    for i in 0..a.len() {
        if a.fixed[i] {
            assert_eq!(a.velocities[i], Vec3::ZERO);
        } else {
            assert!(a.radii[i] >= lo && a.radii[i] <= hi);
            assert!(a.positions[i].x < 0.0, "packed behind the plate");
        }
    }
}

#[test]
fn packing_failure_when_region_too_small() {
    let cfg = DemConfig {
        n_particles: 20000,
        channel_height: 0.01,
        ..DemConfig::default()
    };
    assert!(matches!(init_packing(&cfg), Err(chuteflow::Error::Packing(_))));
}

#[test]
fn frictionless_incline_acceleration() {
    let cfg = DemConfig {
        mu_pw: 0.0,
        mu_pp: 0.0,
        ..DemConfig::default()
    };
    let r = 0.001;
    // Resting on plane #1 with a small overlap, far from every other wall.
    let mut st = single(Vec3::new(0.05, 0.02, r - 1e-6), Vec3::ZERO, r);
    step(&mut st, &cfg).unwrap();
    let a = st.velocities[0].x / cfg.dt;
    assert!((a - 4.905).abs() < 1e-6, "along-plane acceleration {a}");
}

#[test]
fn free_flight_is_exact() {
    let cfg = frictionless_zero_g();
    let v = Vec3::new(0.3, -0.1, 0.2);
    let p = Vec3::new(0.02, 0.02, 0.02);
    let mut st = single(p, v, 0.001);
    step(&mut st, &cfg).unwrap();
    assert_eq!(st.positions[0], p + v * cfg.dt);
    assert_eq!(st.velocities[0], v);
    assert!(st.contacts.is_empty());
}

/// Independent 1D integration of two equal masses on a linear
/// spring–dashpot, same semi-implicit scheme.
fn head_on_oracle(cfg: &DemConfig, r: f64, gap0: f64, v0: f64) -> f64 {
    let m = cfg.mass_of(r);
    let m_eff = 0.5 * m;
    let c = 2.0 * cfg.damping_ratio * (m_eff * cfg.normal_stiffness).sqrt();
    let (mut x1, mut x2) = (0.0, 2.0 * r + gap0);
    let (mut u1, mut u2) = (v0, -v0);
    let mut touched = false;
    for _ in 0..100_000 {
        let overlap = 2.0 * r - (x2 - x1);
        let mut f = 0.0;
        if overlap > 0.0 {
            touched = true;
            // Positive f pushes particle 2 forward.
            f = (cfg.normal_stiffness * overlap - c * (u2 - u1)).max(0.0);
        } else if touched {
            return u2 - u1;
        }
        u1 -= f / m * cfg.dt;
        u2 += f / m * cfg.dt;
        x1 += u1 * cfg.dt;
        x2 += u2 * cfg.dt;
    }
    panic!("oracle never separated");
}

#[test]
fn head_on_collision_loses_energy_and_matches_oracle() {
    let cfg = DemConfig {
        damping_ratio: 0.2,
        ..frictionless_zero_g()
    };
    let r = 0.001;
    let gap = 1e-5;
    let v0 = 0.2;
    let c = Vec3::new(0.02, 0.02, 0.02);
    let mut st = ParticleState::new(
        vec![c, c + Vec3::new(2.0 * r + gap, 0.0, 0.0)],
        vec![Vec3::new(v0, 0.0, 0.0), Vec3::new(-v0, 0.0, 0.0)],
        vec![r, r],
        vec![false, false],
    );
    let mut stepper = Stepper::new(&cfg);
    let mut touched = false;
    for _ in 0..100_000 {
        stepper.step(&mut st, 0.0).unwrap();
        if !st.contacts.is_empty() {
            touched = true;
        } else if touched {
            break;
        }
    }
    assert!(touched);
    let rel_out = st.velocities[1].x - st.velocities[0].x;
    let oracle = head_on_oracle(&cfg, r, gap, v0);
    assert!(rel_out > 0.0);
    assert!(rel_out < 2.0 * v0, "outgoing {rel_out} vs incoming {}", 2.0 * v0);
    assert!((rel_out - oracle).abs() < 1e-12, "{rel_out} vs oracle {oracle}");
}

#[test]
fn elastic_pair_conserves_momentum() {
    let cfg = DemConfig {
        damping_ratio: 0.0,
        ..frictionless_zero_g()
    };
    let r1 = 0.0011;
    let r2 = 0.0009;
    let a = Vec3::new(0.01, 0.02, 0.02);
    let b = a + Vec3::new(0.0019, 0.0005, -0.0003);
    let mut st = ParticleState::new(
        vec![a, b],
        vec![Vec3::new(0.3, 0.1, -0.05), Vec3::new(-0.2, -0.05, 0.1)],
        vec![r1, r2],
        vec![false, false],
    );
    let m = [cfg.mass_of(r1), cfg.mass_of(r2)];
    let momentum = |s: &ParticleState| s.velocities[0] * m[0] + s.velocities[1] * m[1];
    let p0 = momentum(&st);
    let mut stepper = Stepper::new(&cfg);
    let mut saw_contact = false;
    for _ in 0..400 {
        stepper.step(&mut st, 0.0).unwrap();
        saw_contact |= !st.contacts.is_empty();
        let p = momentum(&st);
        assert!((p - p0).norm() <= 1e-10 * p0.norm());
    }
    assert!(saw_contact);
}

#[test]
fn release_is_idempotent_and_removes_the_plate() {
    let cfg = DemConfig {
        gravity: 0.0,
        ..DemConfig::default()
    };
    let r = 0.001;
    let p = Vec3::new(-0.0009, 0.02, 0.02);
    let v = Vec3::new(0.1, 0.0, 0.0);
    let mut with_plate = single(p, v, r);
    with_plate.plate_active = true;
    release_plate(&mut with_plate);
    let snapshot = with_plate.clone();
    release_plate(&mut with_plate);
    assert_eq!(with_plate, snapshot);

    let mut never = single(p, v, r);
    step(&mut with_plate, &cfg).unwrap();
    step(&mut never, &cfg).unwrap();
    assert_eq!(with_plate, never);

    // With the plate still in place the particle is pushed back.
    let mut held = single(p, v, r);
    held.plate_active = true;
    step(&mut held, &cfg).unwrap();
    assert!(held.velocities[0].x < v.x);
}

#[test]
fn released_packing_starts_flowing_downslope() {
    let cfg = DemConfig {
        n_particles: 300,
        rng_seed: 3,
        ..DemConfig::default()
    };
    let mut st = init_packing(&cfg).unwrap();
    release_plate(&mut st);
    let mut stepper = Stepper::new(&cfg);
    for _ in 0..50 {
        stepper.step(&mut st, 0.0).unwrap();
    }
    let px: f64 = (0..st.len())
        .filter(|&i| !st.fixed[i])
        .map(|i| cfg.mass_of(st.radii[i]) * st.velocities[i].x)
        .sum();
    assert!(px > 0.0, "x momentum {px}");
}

#[test]
fn mechanical_energy_never_increases() {
    let cfg = DemConfig {
        n_particles: 150,
        rng_seed: 5,
        ..DemConfig::default()
    };
    let mut st = init_packing(&cfg).unwrap();
    release_plate(&mut st);
    let mut stepper = Stepper::new(&cfg);
    let mut e_prev = mechanical_energy(&st, &cfg).total();
    let e0 = e_prev;
    for k in 0..3000 {
        stepper.step(&mut st, 0.0).unwrap();
        let e = mechanical_energy(&st, &cfg).total();
        assert!(
            e <= e_prev + 1e-3 * e_prev.abs(),
            "energy rose at step {k}: {e_prev} -> {e}"
        );
        e_prev = e;
    }
    assert!(e_prev < e0);
}

#[test]
fn zero_time_run_has_one_snapshot() {
    let cfg = DemConfig {
        n_particles: 50,
        total_time: 0.0,
        ..DemConfig::default()
    };
    let snaps = run(&cfg).unwrap();
    assert_eq!(snaps.len(), 1);
    assert!(!snaps[0].plate_active);
}

#[test]
fn default_run_deposits_and_depends_on_seed() {
    let mut finals = Vec::new();
    for seed in [1, 2] {
        let cfg = DemConfig {
            rng_seed: seed,
            ..DemConfig::default()
        };
        let snaps = run(&cfg).unwrap();
        assert_eq!(snaps.len(), cfg.snapshot_count());
        let ke: Vec<f64> = snaps.iter().map(|s| kinetic_energy(s, &cfg)).collect();
        let peak = ke.iter().cloned().fold(0.0, f64::max);
        let last = *ke.last().unwrap();
        assert!(last < 0.05 * peak, "final KE {last} vs peak {peak}");
        for s in &snaps {
            assert!(s.max_overlap_ratio() <= MAX_OVERLAP_RATIO);
            for c in &s.contacts {
                let (a, b) = (c.a as usize, c.b as usize);
                assert!(c.branch.norm() <= s.radii[a] + s.radii[b]);
                assert!(c.force.is_finite());
            }
        }
        finals.push(snaps.last().unwrap().positions.clone());
    }
    assert_ne!(finals[0], finals[1]);
}
