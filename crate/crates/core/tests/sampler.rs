use chuteflow::dataset::NormStats;
use chuteflow::field::Field2;
use chuteflow::nets::{ArchDescriptor, Conditioning, ModelKind, UNet};
use chuteflow::sampler::*;
use chuteflow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Maps a 3-channel field to its (x, z) channels.
struct PickXZ;

impl Differentiable<f64> for PickXZ {
    type Tape = usize;
    fn eval(&self, x: &[f64], h: usize, w: usize, _: &Conditioning) -> Result<(Vec<f64>, usize)> {
        let n = h * w;
        let mut y = x[..n].to_vec();
        y.extend_from_slice(&x[2 * n..3 * n]);
        Ok((y, n))
    }
    fn vjp(&self, &n: &usize, cot: &[f64]) -> Vec<f64> {
        let mut g = cot[..n].to_vec();
        g.extend(std::iter::repeat(0.0).take(n));
        g.extend_from_slice(&cot[n..]);
        g
    }
}

/// `f(u) = a·u + b` elementwise.
struct Affine(f64, f64);

impl Differentiable<f64> for Affine {
    type Tape = ();
    fn eval(&self, x: &[f64], _: usize, _: usize, _: &Conditioning) -> Result<(Vec<f64>, ())> {
        Ok((x.iter().map(|v| self.0 * v + self.1).collect(), ()))
    }
    fn vjp(&self, _: &(), cot: &[f64]) -> Vec<f64> {
        cot.iter().map(|c| self.0 * c).collect()
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn obs(h: usize, w: usize, rho: f64, k: usize, seed: u64) -> Observation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Observation::new(Field2::from_vec(2, h, w, randn(&mut rng, 2 * h * w, 1.0)).unwrap(), rho, k).unwrap()
}

fn tiny(kind: ModelKind, seed: u64) -> (UNet, Vec<f64>) {
    let net = UNet::new(&ArchDescriptor::new(kind, vec![4, 8], 1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = randn(&mut rng, net.param_count(), 0.4);
    (net, p)
}

#[test]
fn guidance_loss_is_a_masked_sum() {
    let (h, w) = (4, 6);
    let o = obs(h, w, 1.0, 1, 1);
    let mut u = vec![0.0; 3 * h * w];
    let n = h * w;
    u[..n].copy_from_slice(o.values.channel(0));
    u[2 * n..].copy_from_slice(o.values.channel(1));
    assert_eq!(guidance_loss(&PickXZ, &u, 1, &o).unwrap(), 0.0);

    // Constant residual r on every cell: the loss counts cells.
    let r = 0.3;
    let shifted: Vec<f64> = u.iter().enumerate().map(|(i, v)| if i < n || i >= 2 * n { v + r } else { *v }).collect();
    let mut half = o.clone();
    half.mask = (0..n).map(|i| i % w < w / 2).collect();
    let full = guidance_loss(&PickXZ, &shifted, 1, &o).unwrap();
    let halved = guidance_loss(&PickXZ, &shifted, 1, &half).unwrap();
    assert!((full - 2.0 * n as f64 * r * r).abs() < 1e-12);
    assert!((halved - full / 2.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let o = obs(h, w, 0.7, 2, 5);
    let pred = randn(&mut rng, 2 * n, 1.0);
    let (l, _) = masked_sse(&pred, &o);
    let mut oracle = 0.0;
    for c in 0..2 {
        for r in 0..h {
            for col in 0..w {
                if o.mask[r * w + col] {
                    let d = pred[(c * h + r) * w + col] - o.values.get(c, r, col);
                    oracle += d * d;
                }
            }
        }
    }
    assert!((l - oracle).abs() <= 1e-10 * oracle);
}

#[test]
fn composed_gradient_matches_finite_differences() {
    let (h, w) = (4, 4);
    let (fnet, fp) = tiny(ModelKind::Backbone, 1);
    let (gnet, gp) = tiny(ModelKind::Forward, 2);
    let b = Net { net: &fnet, params: &fp };
    let g = Net { net: &gnet, params: &gp };
    let o = obs(h, w, 0.75, 1, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let u = randn(&mut rng, 3 * h * w, 1.0);
    let tau = 0.35;
    let slice = 2;
    let (_, grad, _) = guidance_gradient(&b, &g, &u, tau, slice, &o, false).unwrap();
    let loss_at = |x: &[f64]| {
        let (f, _) = b.eval(x, h, w, &Conditioning::new(tau, slice)).unwrap();
        guidance_loss(&g, &estimate_terminal(x, tau, &f), slice, &o).unwrap()
    };
    let eps = 1e-5;
    let scale = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst: f64 = 0.0;
    let mut x = u.clone();
    for i in 0..u.len() {
        x[i] = u[i] + eps;
        let lp = loss_at(&x);
        x[i] = u[i] - eps;
        let lm = loss_at(&x);
        x[i] = u[i];
        let num = (lp - lm) / (2.0 * eps);
        let err = (grad[i] - num).abs() / grad[i].abs().max(num.abs()).max(1e-4 * scale);
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "max relative error {worst}");

    // The stop-gradient variant differs: the backbone path matters.
    let (_, sg, _) = guidance_gradient(&b, &g, &u, tau, slice, &o, true).unwrap();
    assert!(sg.iter().zip(&grad).any(|(a, b)| (a - b).abs() > 1e-8));
}

#[test]
fn zero_scale_and_zero_residual_leave_the_field_unchanged() {
    let (h, w) = (4, 4);
    let (fnet, fp) = tiny(ModelKind::Backbone, 3);
    let (gnet, gp) = tiny(ModelKind::Forward, 4);
    let b = Net { net: &fnet, params: &fp };
    let g = Net { net: &gnet, params: &gp };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let u = randn(&mut rng, 48, 1.0);
    let o = obs(h, w, 1.0, 1, 2);
    let (f, _) = b.eval(&u, h, w, &Conditioning::new(0.2, 1)).unwrap();
    let cfg0 = SamplerConfig { guidance_scale: 0.0, ..SamplerConfig::default() };
    let s = guided_field(&b, Some(&g), &u, h, w, 0.2, 1, Some(&o), &cfg0).unwrap();
    assert_eq!(s.field, f);

    // Observation equal to the forward prediction of û1.
    let uh = estimate_terminal(&u, 0.2, &f);
    let (pred, _) = g.eval(&uh, h, w, &Conditioning::slice(1)).unwrap();
    let exact = Observation::new(Field2::from_vec(2, h, w, pred).unwrap(), 1.0, 1).unwrap();
    let s = guided_field(&b, Some(&g), &u, h, w, 0.2, 1, Some(&exact), &SamplerConfig::default()).unwrap();
    assert_eq!(s.loss, 0.0);
    assert_eq!(s.field, f);
}

#[test]
fn normalized_baseline_formula() {
    let (h, w) = (4, 4);
    let (fnet, fp) = tiny(ModelKind::Backbone, 5);
    let (gnet, gp) = tiny(ModelKind::Forward, 6);
    let b = Net { net: &fnet, params: &fp };
    let g = Net { net: &gnet, params: &gp };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u = randn(&mut rng, 48, 1.0);
    let o = obs(h, w, 0.5, 1, 3);
    let cfg = SamplerConfig {
        mode: GuidanceMode::NormalizedBaseline,
        guidance_scale: 0.7,
        ..SamplerConfig::default()
    };
    let s = guided_field(&b, Some(&g), &u, h, w, 0.6, 3, Some(&o), &cfg).unwrap();
    let gn2: f64 = s.grad.iter().map(|v| v * v).sum();
    let fn2: f64 = s.f_theta.iter().map(|v| v * v).sum();
    for i in 0..s.field.len() {
        let direct = s.f_theta[i] - 0.7 * (s.grad[i] / (gn2 + 1e-8)) * fn2;
        assert!((s.field[i] - direct).abs() <= 1e-10 * (1.0 + direct.abs()));
    }

    let zero_grad = normalized_correction(&[1.0, 2.0], &[0.0, 0.0], 1.0, 1e-8);
    assert_eq!(zero_grad, vec![0.0, 0.0]);
    let zero_f = normalized_correction(&[0.0, 0.0], &[3.0, -1.0], 1.0, 1e-8);
    assert_eq!(zero_f, vec![0.0, 0.0]);
}

#[test]
fn sparsity_aware_gradient_vanishes_outside_the_window() {
    let (h, w) = (6, 8);
    let o = obs(h, w, 0.5, 1, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let u = randn(&mut rng, 3 * h * w, 1.0);
    let (_, grad, _) = guidance_gradient(&Affine(0.5, 0.1), &PickXZ, &u, 0.3, 1, &o, false).unwrap();
    let n = h * w;
    for c in 0..3 {
        for i in 0..n {
            if !o.mask[i] || c == 1 {
                assert_eq!(grad[c * n + i], 0.0);
            }
        }
    }

    // Adding zero-residual cells to the window leaves the gradient alone.
    let f: Vec<f64> = u.iter().map(|v| 0.5 * v + 0.1).collect();
    let uh = estimate_terminal(&u, 0.3, &f);
    let mut vals = o.values.clone();
    for i in 0..n {
        if !o.mask[i] {
            vals.data[i] = uh[i];
            vals.data[n + i] = uh[2 * n + i];
        }
    }
    let narrow = Observation { values: vals.clone(), ..o.clone() };
    let wide = Observation::new(vals, 1.0, 1).unwrap();
    let (_, g1, l1) = guidance_gradient(&Affine(0.5, 0.1), &PickXZ, &u, 0.3, 1, &narrow, false).unwrap();
    let (_, g2, l2) = guidance_gradient(&Affine(0.5, 0.1), &PickXZ, &u, 0.3, 1, &wide, false).unwrap();
    assert_eq!(g1, g2);
    assert_eq!(l1, l2);
}

#[test]
fn integration_basics() {
    let (h, w) = (4, 4);
    let stub = UNet::new(&ArchDescriptor::new(ModelKind::Backbone, vec![4, 8], 1)).unwrap();
    let p: Vec<f64> = stub.init(0);
    let zero = Net { net: &stub, params: &p };
    let one = SamplerConfig {
        steps: 1,
        mode: GuidanceMode::None,
        ..SamplerConfig::default()
    };
    let tr = integrate::<f64, _, PickXZ>(&zero, None, 1, None, h, w, &one, 5).unwrap();
    assert_eq!(tr.u1, initial_noise::<f64>(48, 5));
    assert!(tr.guide_loss[0].is_nan());

    let v = 0.75;
    for steps in [1, 7, 100] {
        let cfg = SamplerConfig { steps, ..one.clone() };
        let tr = integrate::<f64, _, PickXZ>(&Affine(0.0, v), None, 1, None, h, w, &cfg, 5).unwrap();
        let u0 = initial_noise::<f64>(48, 5);
        for (a, b) in tr.u1.iter().zip(&u0) {
            assert!((a - (b + v)).abs() < 1e-12);
        }
    }

    let (fnet, fp) = tiny(ModelKind::Backbone, 3);
    let (gnet, gp) = tiny(ModelKind::Forward, 4);
    let b = Net { net: &fnet, params: &fp };
    let g = Net { net: &gnet, params: &gp };
    let o = obs(h, w, 1.0, 1, 1);
    let cfg = SamplerConfig { steps: 10, ..SamplerConfig::default() };
    let a1 = integrate(&b, Some(&g), 2, Some(&o), h, w, &cfg, 3).unwrap();
    let a2 = integrate(&b, Some(&g), 2, Some(&o), h, w, &cfg, 3).unwrap();
    assert_eq!(a1.u1, a2.u1);

    let xi0 = SamplerConfig { guidance_scale: 0.0, ..cfg.clone() };
    let none = SamplerConfig { mode: GuidanceMode::None, ..cfg.clone() };
    let t0 = integrate(&b, Some(&g), 2, Some(&o), h, w, &xi0, 3).unwrap();
    let tn = integrate(&b, Some(&g), 2, None, h, w, &none, 3).unwrap();
    assert_eq!(t0.u1, tn.u1);
}

#[test]
fn guided_reconstruction_reduces_the_guidance_loss() {
    let (h, w) = (4, 8);
    let o = obs(h, w, 1.0, 1, 6);
    let cfg = SamplerConfig { steps: 50, ..SamplerConfig::default() };
    let stats = NormStats::identity();
    let r = reconstruct(&Affine(0.0, 0.0), Some(&PickXZ), Some(&o), 1, h, w, &stats, &cfg, 2).unwrap();
    assert!(r.guide_loss.iter().all(|l| l.is_finite()));
    assert!(r.guide_loss.last().unwrap() < &(0.05 * r.guide_loss[0]));

    let mut st = NormStats::identity();
    st.variables[0].mean = 1.0;
    st.variables[0].std = 2.0;
    let r2 = reconstruct(&Affine(0.0, 0.0), Some(&PickXZ), Some(&o), 1, h, w, &st, &cfg, 2).unwrap();
    assert_eq!(r2.normalized, r.normalized);
    assert!((r2.velocity.data[0] - (2.0 * r.normalized.data[0] + 1.0)).abs() < 1e-12);
}

#[test]
fn ensembles() {
    let (h, w) = (4, 4);
    let (fnet, fp) = tiny(ModelKind::Backbone, 3);
    let b = Net { net: &fnet, params: &fp };
    let stats = NormStats::identity();
    let cfg = SamplerConfig {
        steps: 5,
        mode: GuidanceMode::None,
        ensemble: 1,
        ..SamplerConfig::default()
    };
    let e = uq_ensemble::<f64, _, PickXZ>(&b, None, None, 1, h, w, &stats, &cfg).unwrap();
    assert!(e.std.data.iter().all(|&v| v == 0.0));
    let same = ensemble::<f64, _, PickXZ>(&b, None, None, 1, h, w, &stats, &cfg, &[4, 4, 4]).unwrap();
    assert!(same.std.data.iter().all(|&v| v.abs() < 1e-12));
    let cfg5 = SamplerConfig { ensemble: 5, ..cfg };
    let e5 = uq_ensemble::<f64, _, PickXZ>(&b, None, None, 1, h, w, &stats, &cfg5).unwrap();
    assert_eq!(e5.members.len(), 5);
    assert!(e5.std.data.iter().any(|&v| v > 0.0));
    let fields: Vec<Field2> = e5.members.iter().map(|m| m.velocity.clone()).collect();
    let (m, s) = ensemble_stats(&fields).unwrap();
    assert_eq!(m, e5.mean);
    assert_eq!(s, e5.std);
}
