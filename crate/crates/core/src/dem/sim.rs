use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{DemConfig, Plane};
use super::state::{wall_partner, Contact, ParticleState, Springs};
use crate::error::{Error, Result};
use crate::vec3::Vec3;

/// Random close packing fraction used for the packing-volume estimate.
const RCP_FRACTION: f64 = 0.64;
/// Settling and activity threshold, m/s.
pub const REST_SPEED: f64 = 0.01;
/// Accepted runs never exceed this overlap (fraction of the smaller radius).
pub const MAX_OVERLAP_RATIO: f64 = 0.1;

/// Per-contact material response for the linear spring–dashpot law with a
/// Coulomb-capped tangential spring.
#[derive(Clone, Copy, Debug)]
struct ContactLaw {
    kn: f64,
    kt: f64,
    damping_ratio: f64,
    dt: f64,
}

struct ContactResponse {
    /// Total force on the first body.
    force: Vec3,
    tangential: Vec3,
    spring: Vec3,
}

impl ContactLaw {
    fn from_config(cfg: &DemConfig) -> Self {
        ContactLaw {
            kn: cfg.normal_stiffness,
            kt: cfg.tangential_stiffness(),
            damping_ratio: cfg.damping_ratio,
            dt: cfg.dt,
        }
    }

    /// `normal` points from the partner towards the body, `v_rel` is the
    /// body's velocity relative to the partner at the contact point.
    fn respond(
        &self,
        normal: Vec3,
        overlap: f64,
        v_rel: Vec3,
        m_eff: f64,
        mu: f64,
        prev_spring: Vec3,
    ) -> ContactResponse {
        let cn = 2.0 * self.damping_ratio * (m_eff * self.kn).sqrt();
        let ct = 2.0 * self.damping_ratio * (m_eff * self.kt).sqrt();
        let vn = v_rel.dot(normal);
        let vt = v_rel - normal * vn;
        let fn_mag = (self.kn * overlap - cn * vn).max(0.0);

        let mut spring = prev_spring - normal * prev_spring.dot(normal);
        spring += vt * self.dt;
        let mut ft = spring * (-self.kt) - vt * ct;
        let ft_mag = ft.norm();
        let cap = mu * fn_mag;
        if ft_mag > cap {
            ft = if ft_mag > 0.0 { ft * (cap / ft_mag) } else { Vec3::ZERO };
            spring = if self.kt > 0.0 {
                (ft + vt * ct) * (-1.0 / self.kt)
            } else {
                Vec3::ZERO
            };
        }
        ContactResponse {
            force: normal * fn_mag + ft,
            tangential: ft,
            spring,
        }
    }
}

/// Uniform cell list over the chute's bounding box.
struct CellGrid {
    bounds_lo: Vec3,
    bounds_hi: Vec3,
    lo: Vec3,
    size: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
    cells: Vec<usize>,
}

impl CellGrid {
    fn new(cfg: &DemConfig, size: f64) -> Self {
        let top = cfg.channel_height + cfg.packing_length * cfg.relative_angle().tan();
        let lo = Vec3::new(-cfg.packing_length - size, -size, -size);
        let hi = Vec3::new(cfg.channel_length + size, cfg.channel_width + size, top + size);
        let dim = |a: f64, b: f64| (((b - a) / size).ceil() as usize).max(1);
        let dims = [dim(lo.x, hi.x), dim(lo.y, hi.y), dim(lo.z, hi.z)];
        CellGrid {
            bounds_lo: lo,
            bounds_hi: hi,
            lo,
            size,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
            cells: Vec::new(),
        }
    }

    /// Cell coordinates, clamped into the box.
    fn coord(&self, p: Vec3) -> [usize; 3] {
        let c = |v: f64, lo: f64, n: usize| -> usize {
            let i = ((v - lo) / self.size).floor();
            if i.is_nan() || i < 0.0 {
                0
            } else {
                (i as usize).min(n - 1)
            }
        };
        [
            c(p.x, self.lo.x, self.dims[0]),
            c(p.y, self.lo.y, self.dims[1]),
            c(p.z, self.lo.z, self.dims[2]),
        ]
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Fit the grid to the members' bounding box (within the chute box),
    /// then counting-sort them by cell; stable, so deterministic.
    fn rebuild(&mut self, positions: &[Vec3], members: &[usize]) {
        let mut lo = self.bounds_hi;
        let mut hi = self.bounds_lo;
        for &i in members {
            let p = positions[i];
            lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
            hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
        }
        let lo = Vec3::new(
            lo.x.max(self.bounds_lo.x),
            lo.y.max(self.bounds_lo.y),
            lo.z.max(self.bounds_lo.z),
        );
        let hi = Vec3::new(
            hi.x.min(self.bounds_hi.x),
            hi.y.min(self.bounds_hi.y),
            hi.z.min(self.bounds_hi.z),
        );
        let dim = |a: f64, b: f64| {
            if b > a {
                ((b - a) / self.size).floor() as usize + 1
            } else {
                1
            }
        };
        self.lo = lo;
        self.dims = [dim(lo.x, hi.x), dim(lo.y, hi.y), dim(lo.z, hi.z)];
        let ncell = self.dims.iter().product::<usize>();
        self.starts.clear();
        self.starts.resize(ncell + 2, 0);
        self.cells.clear();
        for &i in members {
            let c = self.flat(self.coord(positions[i]));
            self.cells.push(c);
            self.starts[c + 2] += 1;
        }
        for i in 2..ncell + 2 {
            self.starts[i] += self.starts[i - 1];
        }
        self.order.clear();
        self.order.resize(members.len(), 0);
        for (k, &c) in self.cells.iter().enumerate() {
            self.order[self.starts[c + 1]] = members[k];
            self.starts[c + 1] += 1;
        }
    }

    fn cell(&self, flat: usize) -> &[usize] {
        &self.order[self.starts[flat]..self.starts[flat + 1]]
    }

    fn in_box(&self, c: [i64; 3]) -> bool {
        (0..3).all(|k| c[k] >= 0 && c[k] < self.dims[k] as i64)
    }

    /// Calls `f(i, j)` once for every candidate pair, in a fixed order.
    fn for_each_pair(&self, mut f: impl FnMut(usize, usize)) {
        const HALF_SHELL: [[i64; 3]; 13] = [
            [1, 0, 0],
            [-1, 1, 0],
            [0, 1, 0],
            [1, 1, 0],
            [-1, -1, 1],
            [0, -1, 1],
            [1, -1, 1],
            [-1, 0, 1],
            [0, 0, 1],
            [1, 0, 1],
            [-1, 1, 1],
            [0, 1, 1],
            [1, 1, 1],
        ];
        let [nx, ny, nz] = self.dims;
        for iz in 0..nz {
            for iy in 0..ny {
                for ix in 0..nx {
                    let home = self.cell(self.flat([ix, iy, iz]));
                    if home.is_empty() {
                        continue;
                    }
                    for (k, &i) in home.iter().enumerate() {
                        for &j in &home[k + 1..] {
                            f(i, j);
                        }
                    }
                    for off in HALF_SHELL {
                        let c = [ix as i64 + off[0], iy as i64 + off[1], iz as i64 + off[2]];
                        if !self.in_box(c) {
                            continue;
                        }
                        let other = self.cell(self.flat([c[0] as usize, c[1] as usize, c[2] as usize]));
                        for &i in home {
                            for &j in other {
                                f(i, j);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Calls `f(j)` for every member in the 27 cells around `p`.
    fn for_each_near(&self, p: Vec3, mut f: impl FnMut(usize)) {
        let [cx, cy, cz] = self.coord(p);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let c = [cx as i64 + dx, cy as i64 + dy, cz as i64 + dz];
                    if !self.in_box(c) {
                        continue;
                    }
                    for &j in self.cell(self.flat([c[0] as usize, c[1] as usize, c[2] as usize])) {
                        f(j);
                    }
                }
            }
        }
    }
}

/// Reusable integrator; owns scratch buffers so repeated steps do not
/// reallocate the cell list.
pub struct Stepper {
    cfg: DemConfig,
    law: ContactLaw,
    mobile_grid: CellGrid,
    fixed_grid: CellGrid,
    mobile: Vec<usize>,
    fixed: Vec<usize>,
    spare_springs: Springs,
    forces: Vec<Vec3>,
    torques: Vec<Vec3>,
    masses: Vec<f64>,
    planes_with_plate: Vec<Plane>,
    planes_without_plate: Vec<Plane>,
}

impl Stepper {
    pub fn new(cfg: &DemConfig) -> Self {
        Stepper {
            cfg: cfg.clone(),
            law: ContactLaw::from_config(cfg),
            mobile_grid: CellGrid::new(cfg, cfg.max_diameter()),
            fixed_grid: CellGrid::new(cfg, 0.5 * (cfg.max_diameter() + cfg.base_roughness_diameter)),
            mobile: Vec::new(),
            fixed: Vec::new(),
            spare_springs: Springs::default(),
            forces: Vec::new(),
            torques: Vec::new(),
            masses: Vec::new(),
            planes_with_plate: cfg.planes(true),
            planes_without_plate: cfg.planes(false),
        }
    }

    /// Advance one time step. `drag` is an extra linear drag rate (1/s) used
    /// only while settling.
    pub fn step(&mut self, state: &mut ParticleState, drag: f64) -> Result<()> {
        let n = state.len();
        let cfg = &self.cfg;
        let gravity = cfg.gravity_vector();
        self.masses.clear();
        self.masses.extend(state.radii.iter().map(|&r| cfg.mass_of(r)));
        self.forces.clear();
        self.forces.resize(n, Vec3::ZERO);
        self.torques.clear();
        self.torques.resize(n, Vec3::ZERO);
        for i in 0..n {
            if !state.fixed[i] {
                self.forces[i] = gravity * self.masses[i] - state.velocities[i] * (drag * self.masses[i]);
            }
        }

        let mut springs = std::mem::take(&mut self.spare_springs);
        springs.reset(n);
        let mut contacts = Vec::with_capacity(state.contacts.len() + 16);

        self.mobile.clear();
        self.fixed.clear();
        for i in 0..n {
            if state.fixed[i] {
                self.fixed.push(i);
            } else {
                self.mobile.push(i);
            }
        }
        self.mobile_grid.rebuild(&state.positions, &self.mobile);
        self.fixed_grid.rebuild(&state.positions, &self.fixed);
        {
            let law = self.law;
            let (mu_pp, mu_pw) = (cfg.mu_pp, cfg.mu_pw);
            let forces = &mut self.forces;
            let torques = &mut self.torques;
            let masses = &self.masses;
            let st = &*state;
            let mut pair = |i: usize, j: usize| {
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                let (pa, pb) = (st.positions[a], st.positions[b]);
                let (ra, rb) = (st.radii[a], st.radii[b]);
                let d = pa - pb;
                let dist2 = d.norm_sq();
                let reach = ra + rb;
                if dist2 >= reach * reach {
                    return;
                }
                let dist = dist2.sqrt();
                if dist == 0.0 {
                    return;
                }
                let normal = d / dist;
                let overlap = reach - dist;
                let arm_a = ra - 0.5 * overlap;
                let arm_b = rb - 0.5 * overlap;
                let va = st.velocities[a] + st.angular_velocities[a].cross(normal * -arm_a);
                let vb = st.velocities[b] + st.angular_velocities[b].cross(normal * arm_b);
                let m_eff = match (st.fixed[a], st.fixed[b]) {
                    (false, false) => masses[a] * masses[b] / (masses[a] + masses[b]),
                    (false, true) => masses[a],
                    _ => masses[b],
                };
                let mu = if st.fixed[a] || st.fixed[b] { mu_pw } else { mu_pp };
                let prev = st.springs.get(a, b as u32);
                let resp = law.respond(normal, overlap, va - vb, m_eff, mu, prev);
                forces[a] += resp.force;
                forces[b] -= resp.force;
                torques[a] += (normal * -arm_a).cross(resp.tangential);
                torques[b] += (normal * arm_b).cross(-resp.tangential);
                springs.push(a, b as u32, resp.spring);
                contacts.push(Contact {
                    a: a as u32,
                    b: b as u32,
                    force: resp.force,
                    branch: pb - pa,
                    point: pb + normal * (rb - 0.5 * overlap),
                });
            };
            self.mobile_grid.for_each_pair(&mut pair);
            if !self.fixed.is_empty() {
                for &i in &self.mobile {
                    self.fixed_grid.for_each_near(st.positions[i], |j| pair(i, j));
                }
            }
        }

        let planes = if state.plate_active {
            &self.planes_with_plate
        } else {
            &self.planes_without_plate
        };
        for i in 0..n {
            if state.fixed[i] {
                continue;
            }
            let p = state.positions[i];
            let r = state.radii[i];
            for plane in planes {
                let dist = plane.signed_distance(p);
                if dist >= r {
                    continue;
                }
                let overlap = r - dist;
                let arm = r - 0.5 * overlap;
                let normal = plane.normal;
                let v = state.velocities[i] + state.angular_velocities[i].cross(normal * -arm);
                let partner = wall_partner(plane.wall as u32);
                let prev = state.springs.get(i, partner);
                let resp = self
                    .law
                    .respond(normal, overlap, v, self.masses[i], cfg.mu_pw, prev);
                self.forces[i] += resp.force;
                self.torques[i] += (normal * -arm).cross(resp.tangential);
                springs.push(i, partner, resp.spring);
            }
        }

        let dt = cfg.dt;
        let limit = cfg.speed_limit();
        let mut max_speed: f64 = 0.0;
        for i in 0..n {
            if state.fixed[i] {
                continue;
            }
            let m = self.masses[i];
            let inertia = 0.4 * m * state.radii[i] * state.radii[i];
            state.velocities[i] += self.forces[i] * (dt / m);
            state.angular_velocities[i] += self.torques[i] * (dt / inertia);
            // Angular drag keeps settling from spinning forever.
            if drag > 0.0 {
                state.angular_velocities[i] =
                    state.angular_velocities[i] * (1.0 - (drag * dt).min(1.0));
            }
            state.positions[i] += state.velocities[i] * dt;
            let s = state.velocities[i].norm();
            if !s.is_finite() || !state.positions[i].is_finite() {
                return Err(Error::NonFinite(format!("particle {i} state")));
            }
            max_speed = max_speed.max(s);
        }
        state.contacts = contacts;
        self.spare_springs = std::mem::replace(&mut state.springs, springs);
        state.time += dt;
        if max_speed > limit {
            return Err(Error::Instability {
                time: state.time,
                speed: max_speed,
                limit,
            });
        }
        Ok(())
    }
}

/// One semi-implicit Euler step of `state` under `cfg`.
pub fn step(state: &mut ParticleState, cfg: &DemConfig) -> Result<()> {
    Stepper::new(cfg).step(state, 0.0)
}

/// Remove the retaining plate. Releasing twice is a no-op.
pub fn release_plate(state: &mut ParticleState) {
    state.plate_active = false;
}

fn base_layer(cfg: &DemConfig) -> Vec<Vec3> {
    let d = cfg.base_roughness_diameter;
    let r = 0.5 * d;
    let nx = ((cfg.channel_length + 1e-12) / d).floor() as usize;
    let ny = ((cfg.channel_width + 1e-12) / d).floor() as usize;
    let mut out = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            out.push(Vec3::new(r + i as f64 * d, r + j as f64 * d, 0.0));
        }
    }
    out
}

/// Lattice sites inside the packing region, bottom layer first.
fn lattice_sites(cfg: &DemConfig, spacing: f64, want: usize) -> Result<Vec<Vec3>> {
    let half = 0.5 * spacing;
    let planes = cfg.planes(true);
    let inside = |p: Vec3| planes.iter().all(|pl| pl.signed_distance(p) >= half);
    let nx = (cfg.packing_length / spacing).floor() as usize;
    let ny = (cfg.channel_width / spacing).floor() as usize;
    let top = cfg.channel_height + cfg.packing_length * cfg.relative_angle().tan();
    let mut sites = Vec::with_capacity(want);
    let mut k = 0usize;
    while sites.len() < want {
        let z = half + k as f64 * spacing;
        if z + half > top || nx == 0 || ny == 0 {
            return Err(Error::Packing(format!(
                "only {} of {} particles fit below the channel height",
                sites.len(),
                want
            )));
        }
        for i in 0..nx {
            for j in 0..ny {
                let p = Vec3::new(-half - i as f64 * spacing, half + j as f64 * spacing, z);
                if inside(p) && sites.len() < want {
                    sites.push(p);
                }
            }
        }
        k += 1;
    }
    Ok(sites)
}

/// Build the initial packing behind the retaining plate and let it settle.
pub fn init_packing(cfg: &DemConfig) -> Result<ParticleState> {
    cfg.validate()?;
    let n = cfg.n_particles;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    // Analytic budget: the region behind the plate must hold the packing at
    // random close packing within a 10x margin.
    let (lo, hi) = cfg.diameter_span;
    let mean_d3 = cfg.mean_diameter.powi(3) * (hi.powi(4) - lo.powi(4)) / (4.0 * (hi - lo));
    let rcp_volume = n as f64 * PI / 6.0 * mean_d3 / RCP_FRACTION;
    let a = cfg.relative_angle();
    let region_volume = cfg.channel_width
        * cfg.packing_length
        * (cfg.channel_height + 0.5 * cfg.packing_length * a.tan());
    if rcp_volume > region_volume {
        return Err(Error::Packing(format!(
            "{n} particles need {rcp_volume:.3e} m^3 at random close packing, region holds {region_volume:.3e} m^3"
        )));
    }

    let spacing = cfg.max_diameter() * 1.02;
    let sites = lattice_sites(cfg, spacing, n)?;
    let used = sites.len() as f64 * spacing.powi(3);
    if used > 10.0 * rcp_volume.max(f64::MIN_POSITIVE) && n > 0 {
        return Err(Error::Packing(format!(
            "lattice fill {used:.3e} m^3 exceeds 10x the random-close-packing estimate"
        )));
    }

    let jitter = 0.005 * cfg.mean_diameter;
    let mut positions = Vec::with_capacity(n);
    let mut radii = Vec::with_capacity(n);
    for site in sites {
        let dia = cfg.mean_diameter * rng.gen_range(lo..hi);
        let dx = rng.gen_range(-jitter..jitter);
        let dy = rng.gen_range(-jitter..jitter);
        positions.push(site + Vec3::new(dx, dy, 0.0));
        radii.push(0.5 * dia);
    }
    let base = base_layer(cfg);
    let nb = base.len();
    positions.extend(base);
    radii.extend(std::iter::repeat(0.5 * cfg.base_roughness_diameter).take(nb));
    let mut fixed = vec![false; n];
    fixed.extend(std::iter::repeat(true).take(nb));
    let total = positions.len();
    let mut state = ParticleState::new(positions, vec![Vec3::ZERO; total], radii, fixed);
    state.plate_active = true;

    if n > 0 {
        relax(&mut state, cfg)?;
    }
    state.time = 0.0;
    Ok(state)
}

fn relax(state: &mut ParticleState, cfg: &DemConfig) -> Result<()> {
    const MIN_STEPS: usize = 200;
    const CHECK_EVERY: usize = 50;
    let mut stepper = Stepper::new(cfg);
    let max_steps = (cfg.relax_max_time / cfg.dt).ceil() as usize;
    for k in 1..=max_steps.max(MIN_STEPS) {
        stepper.step(state, cfg.relax_drag)?;
        if k >= MIN_STEPS && k % CHECK_EVERY == 0 && state.max_mobile_speed() < REST_SPEED {
            log::debug!("packing settled after {k} steps ({:.3} s)", state.time);
            return Ok(());
        }
    }
    Err(Error::Packing(format!(
        "packing did not settle below {REST_SPEED} m/s within {} s",
        cfg.relax_max_time
    )))
}

/// Full release experiment: settle, release, integrate, collect snapshots.
pub fn run(cfg: &DemConfig) -> Result<Vec<ParticleState>> {
    let mut state = init_packing(cfg)?;
    release_plate(&mut state);
    let steps_per_snapshot = ((cfg.snapshot_interval / cfg.dt).round() as usize).max(1);
    let total_steps = (cfg.total_time / cfg.dt).round() as usize;
    let mut stepper = Stepper::new(cfg);
    let mut snapshots = vec![state.clone()];
    for k in 1..=total_steps {
        stepper.step(&mut state, 0.0)?;
        state.time = k as f64 * cfg.dt;
        if k % steps_per_snapshot == 0 {
            let ratio = state.max_overlap_ratio();
            if ratio > MAX_OVERLAP_RATIO {
                return Err(Error::Instability {
                    time: state.time,
                    speed: state.max_mobile_speed(),
                    limit: cfg.speed_limit(),
                });
            }
            snapshots.push(state.clone());
        }
    }
    Ok(snapshots)
}

/// Energy bookkeeping for a state.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Energy {
    pub kinetic: f64,
    pub potential: f64,
    pub elastic: f64,
}

impl Energy {
    pub fn total(&self) -> f64 {
        self.kinetic + self.potential + self.elastic
    }
}

pub fn kinetic_energy(state: &ParticleState, cfg: &DemConfig) -> f64 {
    (0..state.len())
        .filter(|&i| !state.fixed[i])
        .map(|i| {
            let m = cfg.mass_of(state.radii[i]);
            let inertia = 0.4 * m * state.radii[i] * state.radii[i];
            0.5 * m * state.velocities[i].norm_sq() + 0.5 * inertia * state.angular_velocities[i].norm_sq()
        })
        .sum()
}

/// Kinetic + gravitational + stored spring energy. Brute force over pairs;
/// intended for diagnostics and tests.
pub fn mechanical_energy(state: &ParticleState, cfg: &DemConfig) -> Energy {
    let g = cfg.gravity_vector();
    let reference = cfg.potential_reference();
    let n = state.len();
    let mut potential = 0.0;
    for i in 0..n {
        if !state.fixed[i] {
            potential += cfg.mass_of(state.radii[i]) * g.dot(reference - state.positions[i]);
        }
    }
    let kn = cfg.normal_stiffness;
    let mut elastic = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            if state.fixed[i] && state.fixed[j] {
                continue;
            }
            let gap = state.radii[i] + state.radii[j] - (state.positions[i] - state.positions[j]).norm();
            if gap > 0.0 {
                elastic += 0.5 * kn * gap * gap;
            }
        }
    }
    for plane in cfg.planes(state.plate_active) {
        for i in 0..n {
            if state.fixed[i] {
                continue;
            }
            let gap = state.radii[i] - plane.signed_distance(state.positions[i]);
            if gap > 0.0 {
                elastic += 0.5 * kn * gap * gap;
            }
        }
    }
    let kt = cfg.tangential_stiffness();
    elastic += state.springs.stored_energy(kt);
    Energy {
        kinetic: kinetic_energy(state, cfg),
        potential,
        elastic,
    }
}
