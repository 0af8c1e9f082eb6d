use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::arch::{ArchDescriptor, Conditioning};
use super::layers::{group_count, silu, silu_back, Conv, GnCache, GroupNorm, Linear, Up};
use super::real::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Uniform in ±1/√fan_in.
    Fan(usize),
    Ones,
    Zeros,
    Normal,
}

struct Alloc {
    next: usize,
    plan: Vec<(usize, usize, Init)>,
}

impl Alloc {
    fn take(&mut self, n: usize, init: Init) -> usize {
        let at = self.next;
        self.plan.push((at, n, init));
        self.next += n;
        at
    }

    fn conv(&mut self, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> Conv {
        let fan = cin * k * k;
        let init = if zero { Init::Zeros } else { Init::Fan(fan) };
        let w = self.take(cout * fan, init);
        let b = self.take(cout, init);
        Conv { cin, cout, k, stride, w, b }
    }

    fn linear(&mut self, nin: usize, nout: usize) -> Linear {
        let w = self.take(nin * nout, Init::Fan(nin));
        let b = self.take(nout, Init::Fan(nin));
        Linear { nin, nout, w, b }
    }

    fn norm(&mut self, c: usize) -> GroupNorm {
        let gamma = self.take(c, Init::Ones);
        let beta = self.take(c, Init::Zeros);
        GroupNorm { c, groups: group_count(c), gamma, beta }
    }

    fn up(&mut self, cin: usize, cout: usize) -> Up {
        let w = self.take(4 * cin * cout, Init::Fan(cin * 4));
        let b = self.take(cout, Init::Fan(cin * 4));
        Up { cin, cout, w, b }
    }

    fn block(&mut self, cin: usize, cout: usize, embed: usize) -> ResBlock {
        ResBlock {
            gn1: self.norm(cin),
            conv1: self.conv(cin, cout, 3, 1, false),
            emb: self.linear(embed, cout),
            gn2: self.norm(cout),
            conv2: self.conv(cout, cout, 3, 1, false),
            skip: (cin != cout).then(|| self.conv(cin, cout, 1, 1, false)),
        }
    }
}

/// Residual block: GN → SiLU → conv → (+ embedding) → GN → SiLU → conv,
/// plus an identity or 1×1 skip.
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv,
    emb: Linear,
    gn2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

struct BlockCache<T> {
    gn1: GnCache<T>,
    a1: Vec<T>,
    col1: Vec<T>,
    gn2: GnCache<T>,
    a2: Vec<T>,
    col2: Vec<T>,
    skip_col: Vec<T>,
}

impl ResBlock {
    fn forward<T: Real>(&self, p: &[T], x: &[T], h: usize, w: usize, emb: &[T]) -> (Vec<T>, BlockCache<T>) {
        let np = h * w;
        let (a1, gn1) = self.gn1.forward(p, x, np);
        let (mut h1, col1) = self.conv1.forward(p, &silu(&a1), h, w);
        let e = self.emb.forward(p, emb);
        for (row, &ev) in h1.chunks_mut(np).zip(&e) {
            for v in row {
                *v += ev;
            }
        }
        let (a2, gn2) = self.gn2.forward(p, &h1, np);
        let (mut y, col2) = self.conv2.forward(p, &silu(&a2), h, w);
        let skip_col = match &self.skip {
            Some(s) => {
                let (sy, col) = s.forward(p, x, h, w);
                for (a, b) in y.iter_mut().zip(&sy) {
                    *a += *b;
                }
                col
            }
            None => {
                for (a, b) in y.iter_mut().zip(x) {
                    *a += *b;
                }
                Vec::new()
            }
        };
        (y, BlockCache { gn1, a1, col1, gn2, a2, col2, skip_col })
    }

    #[allow(clippy::too_many_arguments)]
    fn backward<T: Real>(
        &self,
        p: &[T],
        c: &BlockCache<T>,
        h: usize,
        w: usize,
        gy: &[T],
        mut gp: Option<&mut [T]>,
        emb: &[T],
        g_emb: &mut [T],
    ) -> Vec<T> {
        let np = h * w;
        let mut g = self.conv2.backward(p, &c.col2, h, w, gy, gp.as_deref_mut(), true);
        silu_back(&c.a2, &mut g);
        let gh1 = self.gn2.backward(p, &c.gn2, np, &g, gp.as_deref_mut());
        let ge: Vec<T> = gh1.chunks(np).map(|r| r.iter().copied().sum()).collect();
        let ge_in = self.emb.backward(p, emb, &ge, gp.as_deref_mut());
        for (a, b) in g_emb.iter_mut().zip(&ge_in) {
            *a += *b;
        }
        let mut g = self.conv1.backward(p, &c.col1, h, w, &gh1, gp.as_deref_mut(), true);
        silu_back(&c.a1, &mut g);
        let mut gx = self.gn1.backward(p, &c.gn1, np, &g, gp.as_deref_mut());
        match &self.skip {
            Some(s) => {
                let gs = s.backward(p, &c.skip_col, h, w, gy, gp, true);
                for (a, b) in gx.iter_mut().zip(&gs) {
                    *a += *b;
                }
            }
            None => {
                for (a, b) in gx.iter_mut().zip(gy) {
                    *a += *b;
                }
            }
        }
        gx
    }
}

/// Encoder–decoder with skip connections and additive conditioning.
pub struct UNet {
    desc: ArchDescriptor,
    n_params: usize,
    plan: Vec<(usize, usize, Init)>,
    table: usize,
    tau: Option<(Linear, Linear)>,
    conv_in: Conv,
    enc: Vec<Vec<ResBlock>>,
    downs: Vec<Conv>,
    ups: Vec<Up>,
    dec: Vec<Vec<ResBlock>>,
    gn_out: GroupNorm,
    conv_out: Conv,
}

/// Intermediate values retained for the reverse pass.
pub struct Cache<T> {
    h: usize,
    w: usize,
    slice: usize,
    e: Vec<T>,
    emb: Vec<T>,
    tau_in: Vec<T>,
    tau_hidden: Vec<T>,
    conv_in_col: Vec<T>,
    enc: Vec<Vec<BlockCache<T>>>,
    down_cols: Vec<Vec<T>>,
    up_in: Vec<Vec<T>>,
    dec: Vec<Vec<BlockCache<T>>>,
    gn_out: GnCache<T>,
    a_out: Vec<T>,
    out_col: Vec<T>,
}

fn sinusoidal<T: Real>(tau: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut f = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let a = 1000.0 * tau * freq;
        f[i] = T::lit(a.sin());
        f[half + i] = T::lit(a.cos());
    }
    f
}

impl UNet {
    pub fn new(desc: &ArchDescriptor) -> Result<Self> {
        desc.validate()?;
        let e = desc.embed_width;
        let ws = &desc.widths;
        let s = ws.len();
        let mut a = Alloc { next: 0, plan: Vec::new() };
        let table = a.take(desc.vocab * e, Init::Normal);
        let tau = desc.uses_tau.then(|| (a.linear(e, e), a.linear(e, e)));
        let conv_in = a.conv(desc.in_channels, ws[0], 3, 1, false);
        let mut enc = Vec::new();
        let mut downs = Vec::new();
        for i in 0..s {
            enc.push((0..desc.blocks_per_stage).map(|_| a.block(ws[i], ws[i], e)).collect());
            if i + 1 < s {
                downs.push(a.conv(ws[i], ws[i + 1], 3, 2, false));
            }
        }
        let mut ups = Vec::new();
        let mut dec = Vec::new();
        for i in (0..s - 1).rev() {
            ups.push(a.up(ws[i + 1], ws[i]));
            dec.push(
                (0..desc.blocks_per_stage)
                    .map(|b| a.block(if b == 0 { 2 * ws[i] } else { ws[i] }, ws[i], e))
                    .collect(),
            );
        }
        let gn_out = a.norm(ws[0]);
        let conv_out = a.conv(ws[0], desc.out_channels, 3, 1, true);
        Ok(UNet {
            desc: desc.clone(),
            n_params: a.next,
            plan: a.plan,
            table,
            tau,
            conv_in,
            enc,
            downs,
            ups,
            dec,
            gn_out,
            conv_out,
        })
    }

    pub fn descriptor(&self) -> &ArchDescriptor {
        &self.desc
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    /// Deterministic initialization from a seed. The final layer is zero.
    pub fn init<T: Real>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![T::zero(); self.n_params];
        for &(at, n, init) in &self.plan {
            for v in &mut p[at..at + n] {
                *v = match init {
                    Init::Fan(fan) => {
                        let b = 1.0 / (fan as f64).sqrt();
                        T::lit(rng.gen_range(-b..b))
                    }
                    Init::Ones => T::one(),
                    Init::Zeros => T::zero(),
                    Init::Normal => T::lit(rng.sample::<f64, _>(StandardNormal)),
                };
            }
        }
        p
    }

    pub fn check_input(&self, len: usize, h: usize, w: usize, cond: &Conditioning) -> Result<()> {
        let f = self.desc.spatial_factor();
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!(
                "spatial size {h}x{w} must be a positive multiple of {f}"
            )));
        }
        if len != self.desc.in_channels * h * w {
            return Err(Error::shape(format!(
                "input has {len} values, expected {}x{h}x{w}",
                self.desc.in_channels
            )));
        }
        if !self.desc.kind.slices().contains(&cond.slice) {
            return Err(Error::config(format!(
                "slice index {} not valid for {}",
                cond.slice,
                self.desc.kind.name()
            )));
        }
        if self.desc.uses_tau && !(0.0..=1.0).contains(&cond.tau) {
            return Err(Error::config(format!("tau {} outside [0, 1]", cond.tau)));
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        p: &[T],
        x: &[T],
        h: usize,
        w: usize,
        cond: &Conditioning,
    ) -> Result<(Vec<T>, Cache<T>)> {
        if p.len() != self.n_params {
            return Err(Error::shape(format!(
                "parameter vector has {} values, expected {}",
                p.len(),
                self.n_params
            )));
        }
        self.check_input(x.len(), h, w, cond)?;
        let ew = self.desc.embed_width;
        let mut e = p[self.table + cond.slice * ew..][..ew].to_vec();
        let (mut tau_in, mut tau_hidden) = (Vec::new(), Vec::new());
        if let Some((l1, l2)) = &self.tau {
            tau_in = sinusoidal(cond.tau, ew);
            tau_hidden = l1.forward(p, &tau_in);
            let t = l2.forward(p, &silu(&tau_hidden));
            for (a, b) in e.iter_mut().zip(&t) {
                *a += *b;
            }
        }
        let emb = silu(&e);

        let (mut cur, conv_in_col) = self.conv_in.forward(p, x, h, w);
        let (mut ch, mut cw) = (h, w);
        let mut enc_c = Vec::new();
        let mut skips = Vec::new();
        let mut down_cols = Vec::new();
        for (i, blocks) in self.enc.iter().enumerate() {
            let mut bc = Vec::new();
            for b in blocks {
                let (y, c) = b.forward(p, &cur, ch, cw, &emb);
                cur = y;
                bc.push(c);
            }
            enc_c.push(bc);
            if i < self.downs.len() {
                skips.push(cur.clone());
                let (y, col) = self.downs[i].forward(p, &cur, ch, cw);
                down_cols.push(col);
                cur = y;
                ch /= 2;
                cw /= 2;
            }
        }
        let mut up_in = Vec::new();
        let mut dec_c = Vec::new();
        for (up, blocks) in self.ups.iter().zip(&self.dec) {
            let y = up.forward(p, &cur, ch, cw);
            up_in.push(std::mem::replace(&mut cur, y));
            ch *= 2;
            cw *= 2;
            cur.extend_from_slice(&skips.pop().expect("skip per level"));
            let mut bc = Vec::new();
            for b in blocks {
                let (y, c) = b.forward(p, &cur, ch, cw, &emb);
                cur = y;
                bc.push(c);
            }
            dec_c.push(bc);
        }
        let (a_out, gn_out) = self.gn_out.forward(p, &cur, h * w);
        let (y, out_col) = self.conv_out.forward(p, &silu(&a_out), h, w);
        Ok((
            y,
            Cache {
                h,
                w,
                slice: cond.slice,
                e,
                emb,
                tau_in,
                tau_hidden,
                conv_in_col,
                enc: enc_c,
                down_cols,
                up_in,
                dec: dec_c,
                gn_out,
                a_out,
                out_col,
            },
        ))
    }

    /// Reverse pass for the cotangent `gy` of the output. Accumulates the
    /// parameter gradient into `gp` when given and returns the input
    /// gradient.
    pub fn backward<T: Real>(&self, p: &[T], c: &Cache<T>, gy: &[T], mut gp: Option<&mut [T]>) -> Vec<T> {
        let (h, w) = (c.h, c.w);
        assert_eq!(gy.len(), self.desc.out_channels * h * w, "cotangent shape");
        let ew = self.desc.embed_width;
        let mut g_emb = vec![T::zero(); ew];
        let mut g = self.conv_out.backward(p, &c.out_col, h, w, gy, gp.as_deref_mut(), true);
        silu_back(&c.a_out, &mut g);
        let mut g = self.gn_out.backward(p, &c.gn_out, h * w, &g, gp.as_deref_mut());

        let levels = self.ups.len();
        let mut skip_grads = vec![Vec::new(); levels];
        let (mut ch, mut cw) = (h, w);
        for (li, (up, blocks)) in self.ups.iter().zip(&self.dec).enumerate().rev() {
            for (b, bc) in blocks.iter().zip(&c.dec[li]).rev() {
                g = b.backward(p, bc, ch, cw, &g, gp.as_deref_mut(), &c.emb, &mut g_emb);
            }
            // Split the concatenated gradient into the upsampled part and
            // the skip part.
            let half = g.len() / 2;
            let skip_part = g.split_off(half);
            // Skips are pushed from the top level down; decoder level li
            // consumes skip number levels - 1 - li.
            skip_grads[levels - 1 - li] = skip_part;
            g = up.backward(p, &c.up_in[li], ch / 2, cw / 2, &g, gp.as_deref_mut());
            ch /= 2;
            cw /= 2;
        }
        for (i, blocks) in self.enc.iter().enumerate().rev() {
            if i < self.downs.len() {
                g = self.downs[i].backward(p, &c.down_cols[i], ch * 2, cw * 2, &g, gp.as_deref_mut(), true);
                ch *= 2;
                cw *= 2;
                for (a, b) in g.iter_mut().zip(&skip_grads[i]) {
                    *a += *b;
                }
            }
            for (b, bc) in blocks.iter().zip(&c.enc[i]).rev() {
                g = b.backward(p, bc, ch, cw, &g, gp.as_deref_mut(), &c.emb, &mut g_emb);
            }
        }
        let gx = self.conv_in.backward(p, &c.conv_in_col, h, w, &g, gp.as_deref_mut(), true);

        if let Some(gp) = gp {
            silu_back(&c.e, &mut g_emb);
            let row = &mut gp[self.table + c.slice * ew..][..ew];
            for (a, b) in row.iter_mut().zip(&g_emb) {
                *a += *b;
            }
            if let Some((l1, l2)) = &self.tau {
                let mut gt = l2.backward(p, &silu(&c.tau_hidden), &g_emb, Some(&mut *gp));
                silu_back(&c.tau_hidden, &mut gt);
                l1.backward(p, &c.tau_in, &gt, Some(gp));
            }
        }
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ModelKind;

    fn tiny(kind: ModelKind) -> ArchDescriptor {
        ArchDescriptor::new(kind, vec![4, 8], 1)
    }

    fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn cond_for(kind: ModelKind) -> Conditioning {
        Conditioning::new(0.37, if kind == ModelKind::Decoder { 0 } else { 2 })
    }

    /// |a − n| / max(|a|, |n|, 1e-4·max|n|): relative error with a floor so
    /// that components that are zero up to round-off do not dominate.
    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4 * scale))
            .fold(0.0, f64::max)
    }

    fn loss(net: &UNet, p: &[f64], x: &[f64], h: usize, w: usize, c: &Conditioning, cot: &[f64]) -> f64 {
        let (y, _) = net.forward(p, x, h, w, c).unwrap();
        y.iter().zip(cot).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gradients_match_finite_differences_for_every_kind() {
        let (h, w) = (4, 6);
        for kind in ModelKind::ALL {
            let net = UNet::new(&tiny(kind)).unwrap();
            assert!(net.param_count() <= 5000, "{} params", net.param_count());
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let p = randn(&mut rng, net.param_count(), 0.5);
            let x = randn(&mut rng, kind.channels().0 * h * w, 1.0);
            let cot = randn(&mut rng, kind.channels().1 * h * w, 1.0);
            let c = cond_for(kind);
            let (_, cache) = net.forward(&p, &x, h, w, &c).unwrap();
            let mut gp = vec![0.0; p.len()];
            let gx = net.backward(&p, &cache, &cot, Some(&mut gp));

            let eps = 1e-5;
            let mut num_p = vec![0.0; p.len()];
            let mut pp = p.clone();
            for i in 0..p.len() {
                pp[i] = p[i] + eps;
                let lp = loss(&net, &pp, &x, h, w, &c, &cot);
                pp[i] = p[i] - eps;
                let lm = loss(&net, &pp, &x, h, w, &c, &cot);
                pp[i] = p[i];
                num_p[i] = (lp - lm) / (2.0 * eps);
            }
            let mut num_x = vec![0.0; x.len()];
            let mut xx = x.clone();
            for i in 0..x.len() {
                xx[i] = x[i] + eps;
                let lp = loss(&net, &p, &xx, h, w, &c, &cot);
                xx[i] = x[i] - eps;
                let lm = loss(&net, &p, &xx, h, w, &c, &cot);
                xx[i] = x[i];
                num_x[i] = (lp - lm) / (2.0 * eps);
            }
            let ep = max_rel_err(&gp, &num_p);
            let ex = max_rel_err(&gx, &num_x);
            assert!(ep < 1e-5, "{kind:?} parameter gradient error {ep}");
            assert!(ex < 1e-5, "{kind:?} input gradient error {ex}");
        }
    }

    #[test]
    fn fresh_model_outputs_zero_with_expected_shape() {
        for kind in ModelKind::ALL {
            let net = UNet::new(&ArchDescriptor::desk(kind)).unwrap();
            let p: Vec<f32> = net.init(3);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let x: Vec<f32> = randn(&mut rng, kind.channels().0 * 16 * 32, 1.0)
                .iter()
                .map(|&v| v as f32)
                .collect();
            let (y, _) = net.forward(&p, &x, 16, 32, &cond_for(kind)).unwrap();
            assert_eq!(y.len(), kind.channels().1 * 16 * 32);
            assert!(y.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic_and_slice_sensitive() {
        let net = UNet::new(&tiny(ModelKind::Backbone)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = randn(&mut rng, net.param_count(), 0.3);
        let x = randn(&mut rng, 3 * 8 * 8, 1.0);
        let a = net.forward(&p, &x, 8, 8, &Conditioning::new(0.2, 1)).unwrap().0;
        let b = net.forward(&p, &x, 8, 8, &Conditioning::new(0.2, 1)).unwrap().0;
        let c = net.forward(&p, &x, 8, 8, &Conditioning::new(0.2, 3)).unwrap().0;
        assert_eq!(a, b);
        let na: f64 = a.iter().map(|v| v * v).sum();
        let nc: f64 = c.iter().map(|v| v * v).sum();
        assert!(na != nc);
    }

    #[test]
    fn zero_cotangent_and_linearity() {
        let net = UNet::new(&tiny(ModelKind::Forward)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = randn(&mut rng, net.param_count(), 0.3);
        let x = randn(&mut rng, 3 * 4 * 4, 1.0);
        let c = Conditioning::slice(1);
        let (_, cache) = net.forward(&p, &x, 4, 4, &c).unwrap();
        let mut gp = vec![0.0; p.len()];
        let gx = net.backward(&p, &cache, &vec![0.0; 2 * 16], Some(&mut gp));
        assert!(gp.iter().chain(&gx).all(|&v| v == 0.0));

        let c1 = randn(&mut rng, 32, 1.0);
        let c2 = randn(&mut rng, 32, 1.0);
        let (a, b) = (0.7, -1.3);
        let grads = |cot: &[f64]| {
            let mut gp = vec![0.0; p.len()];
            let gx = net.backward(&p, &cache, cot, Some(&mut gp));
            (gp, gx)
        };
        let (p1, x1) = grads(&c1);
        let (p2, x2) = grads(&c2);
        let mix: Vec<f64> = c1.iter().zip(&c2).map(|(u, v)| a * u + b * v).collect();
        let (pm, xm) = grads(&mix);
        for i in 0..pm.len() {
            assert!((pm[i] - (a * p1[i] + b * p2[i])).abs() <= 1e-10 * (1.0 + pm[i].abs()));
        }
        for i in 0..xm.len() {
            assert!((xm[i] - (a * x1[i] + b * x2[i])).abs() <= 1e-10 * (1.0 + xm[i].abs()));
        }
    }

    #[test]
    fn input_gradient_without_parameter_gradient_is_identical() {
        let net = UNet::new(&tiny(ModelKind::Backbone)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = randn(&mut rng, net.param_count(), 0.3);
        let x = randn(&mut rng, 3 * 4 * 4, 1.0);
        let cot = randn(&mut rng, 3 * 4 * 4, 1.0);
        let (_, cache) = net.forward(&p, &x, 4, 4, &Conditioning::new(0.5, 1)).unwrap();
        let mut gp = vec![0.0; p.len()];
        let with = net.backward(&p, &cache, &cot, Some(&mut gp));
        let without = net.backward(&p, &cache, &cot, None);
        assert_eq!(with, without);
    }

    #[test]
    fn rejects_bad_shapes_and_conditioning() {
        let net = UNet::new(&ArchDescriptor::desk(ModelKind::Backbone)).unwrap();
        let p: Vec<f64> = net.init(0);
        let x = vec![0.0; 3 * 16 * 32];
        assert!(net.forward(&p, &x, 16, 30, &Conditioning::new(0.1, 1)).is_err());
        assert!(net.forward(&p, &x[1..], 16, 32, &Conditioning::new(0.1, 1)).is_err());
        assert!(net.forward(&p, &x, 16, 32, &Conditioning::new(0.1, 0)).is_err());
        assert!(net.forward(&p, &x, 16, 32, &Conditioning::new(1.5, 1)).is_err());
        assert!(net.forward(&p[1..], &x, 16, 32, &Conditioning::new(0.1, 1)).is_err());
    }
}
