//! Projection of particle snapshots onto a fixed Eulerian grid: cell velocity,
//! granular temperature, Love–Weber contact stress and its invariants, and
//! the four boundary-parallel slices used for reconstruction.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dem::{ParticleState, REST_SPEED};
use crate::error::{Error, Result};
use crate::field::Field2;
use crate::vec3::Vec3;

/// Slice depths below the observation layer, in mean particle diameters.
pub const SLICE_DEPTHS: [f64; 4] = [0.0, 6.7, 13.3, 20.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Vec3,
    pub cell_size: f64,
    /// `(nx, ny, nz)`: downslope, across the channel, normal to the incline.
    pub dims: (usize, usize, usize),
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            origin: Vec3::new(-0.032, 0.0, 0.0),
            cell_size: 0.004,
            dims: (32, 11, 16),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) || !self.cell_size.is_finite() {
            return Err(Error::config("cell size must be positive"));
        }
        let (nx, ny, nz) = self.dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::config("grid dims must be at least 1"));
        }
        if !self.origin.is_finite() {
            return Err(Error::config("grid origin must be finite"));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_size.powi(3)
    }

    /// Flat index; slices at fixed `y` are contiguous, rows along `z`.
    #[inline]
    pub fn flat(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iy * self.dims.2 + iz) * self.dims.0 + ix
    }

    /// Cell containing `p`, or `None` outside the grid.
    pub fn locate(&self, p: Vec3) -> Option<usize> {
        let h = self.cell_size;
        let fx = ((p.x - self.origin.x) / h).floor();
        let fy = ((p.y - self.origin.y) / h).floor();
        let fz = ((p.z - self.origin.z) / h).floor();
        let (nx, ny, nz) = self.dims;
        if !(fx >= 0.0 && fy >= 0.0 && fz >= 0.0) {
            return None;
        }
        let (ix, iy, iz) = (fx as usize, fy as usize, fz as usize);
        (ix < nx && iy < ny && iz < nz).then(|| self.flat(ix, iy, iz))
    }

    pub fn center_y(&self, iy: usize) -> f64 {
        self.origin.y + (iy as f64 + 0.5) * self.cell_size
    }
}

/// Symmetric tensor stored as a full 3x3 matrix.
pub type Tensor3 = [[f64; 3]; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct GridVolume {
    pub spec: GridSpec,
    pub count: Vec<u32>,
    pub velocity: Vec<Vec3>,
    pub temperature: Vec<f64>,
    pub sigma: Vec<Tensor3>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Mobile particles whose centers fell outside the grid.
    pub outside: usize,
}

impl GridVolume {
    pub fn empty(spec: GridSpec) -> Self {
        let n = spec.cell_count();
        GridVolume {
            spec,
            count: vec![0; n],
            velocity: vec![Vec3::ZERO; n],
            temperature: vec![0.0; n],
            sigma: vec![[[0.0; 3]; 3]; n],
            p: vec![0.0; n],
            q: vec![0.0; n],
            outside: 0,
        }
    }
}

/// Mean velocity of mobile particles per cell.
pub fn grid_average_velocity(state: &ParticleState, spec: &GridSpec) -> GridVolume {
    let mut vol = GridVolume::empty(spec.clone());
    let mut sums = vec![Vec3::ZERO; spec.cell_count()];
    for i in 0..state.len() {
        if state.fixed[i] {
            continue;
        }
        match spec.locate(state.positions[i]) {
            Some(c) => {
                vol.count[c] += 1;
                sums[c] += state.velocities[i];
            }
            None => vol.outside += 1,
        }
    }
    if vol.outside > 0 {
        warn!(
            "{} mobile particles outside the grid at t = {:.4} s",
            vol.outside, state.time
        );
    }
    for (c, s) in sums.into_iter().enumerate() {
        if vol.count[c] > 0 {
            vol.velocity[c] = s / vol.count[c] as f64;
        }
    }
    vol
}

/// Granular temperature: mean squared velocity fluctuation over the three
/// components, divided by three. Cells with fewer than two particles get 0.
pub fn granular_temperature(state: &ParticleState, vol: &mut GridVolume) {
    let mut acc = vec![0.0; vol.count.len()];
    for i in 0..state.len() {
        if state.fixed[i] {
            continue;
        }
        if let Some(c) = vol.spec.locate(state.positions[i]) {
            acc[c] += (state.velocities[i] - vol.velocity[c]).norm_sq();
        }
    }
    for (c, a) in acc.into_iter().enumerate() {
        let n = vol.count[c];
        vol.temperature[c] = if n > 1 { a / (3.0 * n as f64) } else { 0.0 };
    }
}

/// Static Love–Weber stress: each contact is assigned to the cell holding its
/// contact point, summed as `f_i l_j / V` and symmetrized. Cells without
/// particles are forced to zero stress.
pub fn loveweber_stress(state: &ParticleState, vol: &mut GridVolume) {
    let inv_v = 1.0 / vol.spec.cell_volume();
    let mut raw = vec![[[0.0; 3]; 3]; vol.count.len()];
    for c in &state.contacts {
        let Some(cell) = vol.spec.locate(c.point) else {
            continue;
        };
        let f = c.force.to_array();
        let l = c.branch.to_array();
        for i in 0..3 {
            for j in 0..3 {
                raw[cell][i][j] += f[i] * l[j];
            }
        }
    }
    for (cell, s) in raw.into_iter().enumerate() {
        if vol.count[cell] == 0 {
            vol.sigma[cell] = [[0.0; 3]; 3];
            continue;
        }
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = 0.5 * (s[i][j] + s[j][i]) * inv_v;
            }
        }
        vol.sigma[cell] = out;
    }
}

/// Mean stress `p` (compression positive) and deviatoric stress `q`.
pub fn invariants(s: &Tensor3) -> (f64, f64) {
    let p = -(s[0][0] + s[1][1] + s[2][2]) / 3.0;
    let q2 = 0.5
        * ((s[0][0] - s[1][1]).powi(2)
            + (s[1][1] - s[2][2]).powi(2)
            + (s[0][0] - s[2][2]).powi(2)
            + 6.0 * (s[0][1].powi(2) + s[0][2].powi(2) + s[1][2].powi(2)));
    (p, q2.max(0.0).sqrt())
}

pub fn stress_invariants(vol: &mut GridVolume) {
    for c in 0..vol.count.len() {
        if vol.count[c] == 0 {
            vol.p[c] = 0.0;
            vol.q[c] = 0.0;
            continue;
        }
        let (p, q) = invariants(&vol.sigma[c]);
        vol.p[c] = p;
        vol.q[c] = q;
    }
}

/// All coarse-grained fields for one snapshot.
pub fn coarse_grain(state: &ParticleState, spec: &GridSpec) -> GridVolume {
    let mut vol = grid_average_velocity(state, spec);
    granular_temperature(state, &mut vol);
    loveweber_stress(state, &mut vol);
    stress_invariants(&mut vol);
    vol
}

/// One boundary-parallel slice of a grid volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceSample {
    pub slice_index: usize,
    /// Depth below the observation layer in mean diameters.
    pub y_plus: f64,
    pub time: f64,
    /// `(v_x, v_y, v_z)` in m/s.
    pub velocity: Field2,
    /// `|v_cell| > 0.01 m/s`.
    pub mask: Vec<bool>,
    /// `(p, q, T)` in Pa, Pa, m^2/s^2.
    pub physics: Option<Field2>,
}

impl SliceSample {
    pub fn nx(&self) -> usize {
        self.velocity.width
    }

    pub fn nz(&self) -> usize {
        self.velocity.height
    }
}

/// Activity mask of a velocity field in physical units.
pub fn activity_mask(velocity: &Field2, threshold: f64) -> Vec<bool> {
    velocity.magnitude().into_iter().map(|m| m > threshold).collect()
}

/// Grid layer whose center is nearest to each slice depth. Depths are
/// measured from the center of the wall-adjacent layer.
pub fn slice_layers(spec: &GridSpec, d: f64) -> Result<[usize; 4]> {
    let h = spec.cell_size;
    let ny = spec.dims.1;
    let base = spec.center_y(0);
    let deepest = base + SLICE_DEPTHS[3] * d;
    let available = spec.origin.y + ny as f64 * h;
    if deepest > available {
        return Err(Error::Depth {
            needed: deepest - spec.origin.y,
            available: available - spec.origin.y,
        });
    }
    let mut layers = [0usize; 4];
    for (k, depth) in SLICE_DEPTHS.iter().enumerate() {
        let y = base + depth * d;
        let idx = ((y - spec.origin.y) / h - 0.5).round().max(0.0) as usize;
        layers[k] = idx.min(ny - 1);
    }
    Ok(layers)
}

/// The four slices: the observation layer (0) and three interior layers.
pub fn extract_slices(vol: &GridVolume, d: f64, time: f64) -> Result<Vec<SliceSample>> {
    let layers = slice_layers(&vol.spec, d)?;
    let (nx, _, nz) = vol.spec.dims;
    Ok(layers
        .iter()
        .enumerate()
        .map(|(k, &iy)| {
            let mut velocity = Field2::zeros(3, nz, nx);
            let mut physics = Field2::zeros(3, nz, nx);
            for iz in 0..nz {
                for ix in 0..nx {
                    let c = vol.spec.flat(ix, iy, iz);
                    let v = vol.velocity[c];
                    velocity.set(0, iz, ix, v.x);
                    velocity.set(1, iz, ix, v.y);
                    velocity.set(2, iz, ix, v.z);
                    physics.set(0, iz, ix, vol.p[c]);
                    physics.set(1, iz, ix, vol.q[c]);
                    physics.set(2, iz, ix, vol.temperature[c]);
                }
            }
            let mask = activity_mask(&velocity, REST_SPEED);
            SliceSample {
                slice_index: k,
                y_plus: SLICE_DEPTHS[k],
                time,
                velocity,
                mask,
                physics: Some(physics),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dem::Contact;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_spec(n: usize) -> GridSpec {
        GridSpec {
            origin: Vec3::ZERO,
            cell_size: 1.0,
            dims: (n, n, n),
        }
    }

    fn state_of(points: &[(Vec3, Vec3)]) -> ParticleState {
        let n = points.len();
        ParticleState::new(
            points.iter().map(|p| p.0).collect(),
            points.iter().map(|p| p.1).collect(),
            vec![0.1; n],
            vec![false; n],
        )
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> ParticleState {
        let pts: Vec<(Vec3, Vec3)> = (0..n)
            .map(|_| {
                (
                    Vec3::new(
                        rng.gen_range(-0.5..extent),
                        rng.gen_range(-0.5..extent),
                        rng.gen_range(-0.5..extent),
                    ),
                    Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                )
            })
            .collect();
        let mut st = state_of(&pts);
        st.fixed[0] = true;
        st
    }

    #[test]
    fn single_particle_velocity() {
        let st = state_of(&[(Vec3::new(0.5, 0.5, 0.5), Vec3::new(1.0, 2.0, 3.0))]);
        let vol = grid_average_velocity(&st, &unit_spec(2));
        let c = vol.spec.flat(0, 0, 0);
        assert_eq!(vol.count[c], 1);
        assert_eq!(vol.velocity[c], Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn two_particle_average_and_temperature() {
        let st = state_of(&[
            (Vec3::new(0.2, 0.5, 0.5), Vec3::new(1.0, 0.0, 0.0)),
            (Vec3::new(0.7, 0.5, 0.5), Vec3::new(3.0, 0.0, 0.0)),
        ]);
        let vol = grid_average_velocity(&st, &unit_spec(1));
        assert_eq!(vol.velocity[0], Vec3::new(2.0, 0.0, 0.0));

        let st = state_of(&[
            (Vec3::new(0.2, 0.5, 0.5), Vec3::new(1.0, 0.0, 0.0)),
            (Vec3::new(0.7, 0.5, 0.5), Vec3::new(-1.0, 0.0, 0.0)),
        ]);
        let mut vol = grid_average_velocity(&st, &unit_spec(1));
        granular_temperature(&st, &mut vol);
        assert_eq!(vol.velocity[0], Vec3::ZERO);
        assert!((vol.temperature[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identical_velocities_have_zero_temperature() {
        let v = Vec3::new(0.3, -0.2, 0.1);
        let st = state_of(&[
            (Vec3::new(0.2, 0.5, 0.5), v),
            (Vec3::new(0.7, 0.5, 0.5), v),
            (Vec3::new(0.4, 0.1, 0.9), v),
        ]);
        let mut vol = grid_average_velocity(&st, &unit_spec(1));
        granular_temperature(&st, &mut vol);
        assert!(vol.temperature[0].abs() < 1e-15);
    }

    #[test]
    fn single_contact_stress() {
        let mut st = state_of(&[
            (Vec3::new(0.4, 0.5, 0.5), Vec3::ZERO),
            (Vec3::new(0.402, 0.5, 0.5), Vec3::ZERO),
        ]);
        st.contacts.push(Contact {
            a: 0,
            b: 1,
            force: Vec3::new(1.0, 0.0, 0.0),
            branch: Vec3::new(0.002, 0.0, 0.0),
            point: Vec3::new(0.401, 0.5, 0.5),
        });
        let vol = coarse_grain(&st, &unit_spec(1));
        let s = vol.sigma[0];
        assert!((s[0][0] - 0.002).abs() < 1e-15);
        for (i, row) in s.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if (i, j) != (0, 0) {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn invariants_of_simple_tensors() {
        let iso = [[-1e5, 0.0, 0.0], [0.0, -1e5, 0.0], [0.0, 0.0, -1e5]];
        let (p, q) = invariants(&iso);
        assert!((p - 1e5).abs() < 1e-9);
        assert_eq!(q, 0.0);
        let uni = [[-3.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let (p, q) = invariants(&uni);
        assert!((p - 1.0).abs() < 1e-15);
        assert!((q - 3.0).abs() < 1e-15);
    }

    /// q = sqrt(3 J2) with J2 = s:s / 2 from the deviator.
    fn q_from_deviator(s: &Tensor3) -> f64 {
        let mean = (s[0][0] + s[1][1] + s[2][2]) / 3.0;
        let mut j2 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dev = s[i][j] - if i == j { mean } else { 0.0 };
                j2 += 0.5 * dev * dev;
            }
        }
        (3.0 * j2).sqrt()
    }

    #[test]
    fn q_matches_deviator_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let mut s = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in i..3 {
                    let v = rng.gen_range(-1e3..1e3);
                    s[i][j] = v;
                    s[j][i] = v;
                }
            }
            let (_, q) = invariants(&s);
            let oracle = q_from_deviator(&s);
            assert!((q - oracle).abs() <= 1e-10 * oracle.max(1.0));
        }
    }

    /// Double-loop oracle over cells and particles.
    fn naive_fields(st: &ParticleState, spec: &GridSpec) -> GridVolume {
        let mut vol = GridVolume::empty(spec.clone());
        let (nx, ny, nz) = spec.dims;
        for iy in 0..ny {
            for iz in 0..nz {
                for ix in 0..nx {
                    let c = spec.flat(ix, iy, iz);
                    let lo = spec.origin
                        + Vec3::new(ix as f64, iy as f64, iz as f64) * spec.cell_size;
                    let hi = lo + Vec3::new(1.0, 1.0, 1.0) * spec.cell_size;
                    let inside = |p: Vec3| {
                        p.x >= lo.x && p.x < hi.x && p.y >= lo.y && p.y < hi.y && p.z >= lo.z && p.z < hi.z
                    };
                    let members: Vec<usize> = (0..st.len())
                        .filter(|&i| !st.fixed[i] && inside(st.positions[i]))
                        .collect();
                    if members.is_empty() {
                        continue;
                    }
                    let n = members.len() as f64;
                    let mut mean = Vec3::ZERO;
                    for &i in &members {
                        mean += st.velocities[i];
                    }
                    mean = mean / n;
                    vol.count[c] = members.len() as u32;
                    vol.velocity[c] = mean;
                    if members.len() > 1 {
                        let mut t = 0.0;
                        for &i in &members {
                            let d = st.velocities[i] - mean;
                            t += d.x * d.x + d.y * d.y + d.z * d.z;
                        }
                        vol.temperature[c] = t / n / 3.0;
                    }
                    let mut s = [[0.0; 3]; 3];
                    for con in st.contacts.iter().filter(|k| inside(k.point)) {
                        let f = con.force.to_array();
                        let l = con.branch.to_array();
                        for i in 0..3 {
                            for j in 0..3 {
                                s[i][j] += 0.5 * (f[i] * l[j] + f[j] * l[i]) / spec.cell_volume();
                            }
                        }
                    }
                    vol.sigma[c] = s;
                    let (p, q) = invariants(&s);
                    vol.p[c] = p;
                    vol.q[c] = q;
                }
            }
        }
        vol
    }

    #[test]
    fn randomized_snapshot_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..10 {
            let n = if trial == 0 { 50 } else { rng.gen_range(2..100) };
            let mut st = random_state(&mut rng, n, 3.5);
            for _ in 0..n {
                let a = rng.gen_range(0..n) as u32;
                let b = rng.gen_range(0..n) as u32;
                st.contacts.push(Contact {
                    a,
                    b,
                    force: Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                    branch: Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)),
                    point: Vec3::new(rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0)),
                });
            }
            let spec = unit_spec(3);
            let fast = coarse_grain(&st, &spec);
            let slow = naive_fields(&st, &spec);
            assert_eq!(fast.count, slow.count);
            assert_eq!(fast.velocity, slow.velocity);
            for c in 0..spec.cell_count() {
                assert!((fast.temperature[c] - slow.temperature[c]).abs() < 1e-12);
                for i in 0..3 {
                    for j in 0..3 {
                        assert!((fast.sigma[c][i][j] - slow.sigma[c][i][j]).abs() < 1e-12);
                    }
                }
                assert!((fast.p[c] - slow.p[c]).abs() < 1e-12);
                assert!((fast.q[c] - slow.q[c]).abs() < 1e-12);
            }
            // Mass consistency.
            let inside: u32 = fast.count.iter().sum();
            assert_eq!(inside as usize + fast.outside, st.mobile_count());
        }
    }

    #[test]
    fn empty_cells_are_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut st = random_state(&mut rng, 20, 3.0);
        st.contacts.push(Contact {
            a: 0,
            b: 1,
            force: Vec3::new(1.0, 1.0, 1.0),
            branch: Vec3::new(0.1, 0.1, 0.1),
            point: Vec3::new(3.9, 3.9, 3.9),
        });
        let vol = coarse_grain(&st, &unit_spec(4));
        for c in 0..vol.count.len() {
            assert!(vol.temperature[c] >= 0.0 && vol.q[c] >= 0.0);
            if vol.count[c] == 0 {
                assert_eq!(vol.velocity[c], Vec3::ZERO);
                assert_eq!(vol.temperature[c], 0.0);
                assert_eq!(vol.sigma[c], [[0.0; 3]; 3]);
                assert_eq!((vol.p[c], vol.q[c]), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn slice_layers_follow_nearest_center_rule() {
        let spec = GridSpec::default();
        assert_eq!(slice_layers(&spec, 0.002).unwrap(), [0, 3, 7, 10]);
        let shallow = GridSpec {
            dims: (32, 8, 16),
            ..GridSpec::default()
        };
        assert!(matches!(slice_layers(&shallow, 0.002), Err(Error::Depth { .. })));
    }

    #[test]
    fn uniform_volume_gives_identical_slices() {
        let spec = GridSpec {
            dims: (4, 11, 3),
            ..GridSpec::default()
        };
        let mut vol = GridVolume::empty(spec);
        for c in 0..vol.count.len() {
            vol.count[c] = 2;
            vol.velocity[c] = Vec3::new(0.5, 0.0, -0.1);
            vol.temperature[c] = 0.01;
            vol.p[c] = 10.0;
            vol.q[c] = 3.0;
        }
        let slices = extract_slices(&vol, 0.002, 0.3).unwrap();
        assert_eq!(slices.len(), 4);
        for s in &slices[1..] {
            assert_eq!(s.velocity, slices[0].velocity);
            assert_eq!(s.physics, slices[0].physics);
            assert_eq!(s.mask, slices[0].mask);
        }
        for s in &slices {
            assert_eq!(s.mask, activity_mask(&s.velocity, REST_SPEED));
            assert_eq!((s.nx(), s.nz()), (4, 3));
        }
    }
}
