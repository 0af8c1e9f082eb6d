//! Layer primitives over channel-planar `[channels × (h·w)]` buffers.
//! Each layer references its parameters by offset into a flat vector.

use super::real::{rm, tr, Real};

const GN_EPS: f64 = 1e-5;

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Multiplies `g` in place by the SiLU derivative evaluated at `x`.
pub(crate) fn silu_back<T: Real>(x: &[T], g: &mut [T]) {
    for (gi, &xi) in g.iter_mut().zip(x) {
        let s = sigmoid(xi);
        *gi *= s * (T::one() + xi * (T::one() - s));
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    /// Kernel size, 1 or 3 (3 uses zero padding of 1).
    pub k: usize,
    pub stride: usize,
    pub w: usize,
    pub b: usize,
}

impl Conv {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        if self.k == 1 {
            (h, w)
        } else {
            ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
        }
    }

    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Returns the output and the matrix needed for the backward pass
    /// (the im2col buffer, or the input itself for 1×1 kernels).
    pub fn forward<T: Real>(&self, p: &[T], x: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
        let (ho, wo) = self.out_hw(h, w);
        let np = ho * wo;
        let col = if self.k == 1 {
            x.to_vec()
        } else {
            im2col(x, self.cin, h, w, self.stride)
        };
        let kd = self.kdim();
        let mut y = vec![T::zero(); self.cout * np];
        for (co, row) in y.chunks_mut(np).enumerate() {
            row.fill(p[self.b + co]);
        }
        let wm = &p[self.w..self.w + self.cout * kd];
        T::gemm(self.cout, kd, np, T::one(), wm, rm(kd), &col, rm(np), T::one(), &mut y, rm(np));
        (y, col)
    }

    pub fn backward<T: Real>(
        &self,
        p: &[T],
        col: &[T],
        h: usize,
        w: usize,
        gy: &[T],
        gp: Option<&mut [T]>,
        need_input: bool,
    ) -> Vec<T> {
        let (ho, wo) = self.out_hw(h, w);
        let np = ho * wo;
        let kd = self.kdim();
        if let Some(gp) = gp {
            let gw = &mut gp[self.w..self.w + self.cout * kd];
            T::gemm(self.cout, np, kd, T::one(), gy, rm(np), col, tr(np), T::one(), gw, rm(kd));
            for (co, row) in gy.chunks(np).enumerate() {
                gp[self.b + co] += row.iter().copied().sum();
            }
        }
        if !need_input {
            return Vec::new();
        }
        let wm = &p[self.w..self.w + self.cout * kd];
        let mut gcol = vec![T::zero(); kd * np];
        T::gemm(kd, self.cout, np, T::one(), wm, tr(kd), gy, rm(np), T::zero(), &mut gcol, rm(np));
        if self.k == 1 {
            gcol
        } else {
            col2im(&gcol, self.cin, h, w, self.stride)
        }
    }
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    let (ho, wo) = ((h - 1) / s + 1, (w - 1) / s + 1);
    let np = ho * wo;
    let mut col = vec![T::zero(); c * 9 * np];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 3 + ky) * 3 + kx) * np..][..np];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[oy * wo..][..wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    let (ho, wo) = ((h - 1) / s + 1, (w - 1) / s + 1);
    let np = ho * wo;
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 3 + ky) * 3 + kx) * np..][..np];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    let src = &row[oy * wo..][..wo];
                    for (ox, v) in src.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2×2 transposed convolution with stride 2 (exact doubling, no overlap).
#[derive(Clone, Debug)]
pub(crate) struct Up {
    pub cin: usize,
    pub cout: usize,
    /// Weights laid out `[cout·4 × cin]`.
    pub w: usize,
    pub b: usize,
}

impl Up {
    pub fn forward<T: Real>(&self, p: &[T], x: &[T], h: usize, w: usize) -> Vec<T> {
        let np = h * w;
        let rows = self.cout * 4;
        let mut z = vec![T::zero(); rows * np];
        let wm = &p[self.w..self.w + rows * self.cin];
        T::gemm(rows, self.cin, np, T::one(), wm, rm(self.cin), x, rm(np), T::zero(), &mut z, rm(np));
        let (h2, w2) = (2 * h, 2 * w);
        let mut y = vec![T::zero(); self.cout * h2 * w2];
        for co in 0..self.cout {
            let bias = p[self.b + co];
            for a in 0..2 {
                for b in 0..2 {
                    let zr = &z[(co * 4 + a * 2 + b) * np..][..np];
                    for i in 0..h {
                        for j in 0..w {
                            y[(co * h2 + 2 * i + a) * w2 + 2 * j + b] = zr[i * w + j] + bias;
                        }
                    }
                }
            }
        }
        y
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        p: &[T],
        x: &[T],
        h: usize,
        w: usize,
        gy: &[T],
        gp: Option<&mut [T]>,
    ) -> Vec<T> {
        let np = h * w;
        let rows = self.cout * 4;
        let (h2, w2) = (2 * h, 2 * w);
        let mut gz = vec![T::zero(); rows * np];
        for co in 0..self.cout {
            for a in 0..2 {
                for b in 0..2 {
                    let zr = &mut gz[(co * 4 + a * 2 + b) * np..][..np];
                    for i in 0..h {
                        for j in 0..w {
                            zr[i * w + j] = gy[(co * h2 + 2 * i + a) * w2 + 2 * j + b];
                        }
                    }
                }
            }
        }
        if let Some(gp) = gp {
            let gw = &mut gp[self.w..self.w + rows * self.cin];
            T::gemm(rows, np, self.cin, T::one(), &gz, rm(np), x, tr(np), T::one(), gw, rm(self.cin));
            for co in 0..self.cout {
                gp[self.b + co] += gy[co * h2 * w2..(co + 1) * h2 * w2].iter().copied().sum();
            }
        }
        let wm = &p[self.w..self.w + rows * self.cin];
        let mut gx = vec![T::zero(); self.cin * np];
        T::gemm(self.cin, rows, np, T::one(), wm, tr(self.cin), &gz, rm(np), T::zero(), &mut gx, rm(np));
        gx
    }
}

#[derive(Clone, Debug)]
pub(crate) struct GroupNorm {
    pub c: usize,
    pub groups: usize,
    pub gamma: usize,
    pub beta: usize,
}

pub(crate) struct GnCache<T> {
    xhat: Vec<T>,
    invstd: Vec<T>,
}

/// Group count for a channel width: up to 8 groups of at least 4 channels.
pub(crate) fn group_count(c: usize) -> usize {
    let target = (c / 4).clamp(1, 8);
    (1..=target).rev().find(|g| c % g == 0).unwrap_or(1)
}

impl GroupNorm {
    pub fn forward<T: Real>(&self, p: &[T], x: &[T], np: usize) -> (Vec<T>, GnCache<T>) {
        let cg = self.c / self.groups;
        let n = T::from_usize(cg * np).unwrap();
        let mut xhat = vec![T::zero(); x.len()];
        let mut invstd = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let r = g * cg * np..(g + 1) * cg * np;
            let xs = &x[r.clone()];
            let mean = xs.iter().copied().sum::<T>() / n;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::lit(GN_EPS)).sqrt();
            for (o, &v) in xhat[r].iter_mut().zip(xs) {
                *o = (v - mean) * is;
            }
            invstd.push(is);
        }
        let mut y = xhat.clone();
        for (c, row) in y.chunks_mut(np).enumerate() {
            let (ga, be) = (p[self.gamma + c], p[self.beta + c]);
            for v in row {
                *v = *v * ga + be;
            }
        }
        (y, GnCache { xhat, invstd })
    }

    pub fn backward<T: Real>(
        &self,
        p: &[T],
        cache: &GnCache<T>,
        np: usize,
        gy: &[T],
        gp: Option<&mut [T]>,
    ) -> Vec<T> {
        if let Some(gp) = gp {
            for c in 0..self.c {
                let r = c * np..(c + 1) * np;
                let mut dg = T::zero();
                let mut db = T::zero();
                for (&g, &xh) in gy[r.clone()].iter().zip(&cache.xhat[r]) {
                    dg += g * xh;
                    db += g;
                }
                gp[self.gamma + c] += dg;
                gp[self.beta + c] += db;
            }
        }
        let cg = self.c / self.groups;
        let n = T::from_usize(cg * np).unwrap();
        let mut gx = vec![T::zero(); gy.len()];
        for g in 0..self.groups {
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for c in g * cg..(g + 1) * cg {
                let ga = p[self.gamma + c];
                for i in c * np..(c + 1) * np {
                    let d = gy[i] * ga;
                    s1 += d;
                    s2 += d * cache.xhat[i];
                }
            }
            let is = cache.invstd[g];
            for c in g * cg..(g + 1) * cg {
                let ga = p[self.gamma + c];
                for i in c * np..(c + 1) * np {
                    let d = gy[i] * ga;
                    gx[i] = is * (d - (s1 + cache.xhat[i] * s2) / n);
                }
            }
        }
        gx
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub nin: usize,
    pub nout: usize,
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn forward<T: Real>(&self, p: &[T], x: &[T]) -> Vec<T> {
        (0..self.nout)
            .map(|o| {
                let row = &p[self.w + o * self.nin..][..self.nin];
                p[self.b + o] + row.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>()
            })
            .collect()
    }

    pub fn backward<T: Real>(&self, p: &[T], x: &[T], gy: &[T], gp: Option<&mut [T]>) -> Vec<T> {
        if let Some(gp) = gp {
            for o in 0..self.nout {
                let row = &mut gp[self.w + o * self.nin..][..self.nin];
                for (g, &xi) in row.iter_mut().zip(x) {
                    *g += gy[o] * xi;
                }
                gp[self.b + o] += gy[o];
            }
        }
        let mut gx = vec![T::zero(); self.nin];
        for o in 0..self.nout {
            let row = &p[self.w + o * self.nin..][..self.nin];
            for (g, &wi) in gx.iter_mut().zip(row) {
                *g += gy[o] * wi;
            }
        }
        gx
    }
}
