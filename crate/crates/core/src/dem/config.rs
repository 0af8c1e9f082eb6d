use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vec3::Vec3;

/// Parameters of the chute model and the contact law.
///
/// Coordinates are attached to inclined plane #1: `x` runs downslope along
/// the plane, `y` across the channel (the observation wall is `y = 0`) and
/// `z` normal to the plane. The retaining plate sits at `x = 0`, the
/// material is packed behind it (`x < 0`) on top of the steeper plane #2.
pub const STANDARD_GRAVITY: f64 = 9.81;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemConfig {
    /// Inclination of plane #1 from horizontal, degrees.
    pub incline1_angle: f64,
    /// Inclination of plane #2 from horizontal, degrees.
    pub incline2_angle: f64,
    /// Distance from the plate line to the end wall along plane #1, m.
    pub channel_length: f64,
    /// Distance between the lateral walls, m.
    pub channel_width: f64,
    /// Extent of the packing region behind the plate, m.
    pub packing_length: f64,
    /// Upper bound on the packing region, normal to plane #1, m.
    pub channel_height: f64,
    pub n_particles: usize,
    /// Mean particle diameter `d`, m.
    pub mean_diameter: f64,
    /// Diameters are uniform in `[lo * d, hi * d]`.
    pub diameter_span: (f64, f64),
    /// Grain density, kg/m^3.
    pub particle_density: f64,
    pub mu_pp: f64,
    pub mu_pw: f64,
    /// Diameter of the fixed spheres roughening plane #1, m.
    pub base_roughness_diameter: f64,
    /// Normal spring stiffness, N/m.
    pub normal_stiffness: f64,
    /// Tangential stiffness as a fraction of the normal stiffness.
    pub tangential_stiffness_ratio: f64,
    pub damping_ratio: f64,
    /// Gravitational acceleration magnitude, m/s^2.
    pub gravity: f64,
    pub dt: f64,
    pub total_time: f64,
    pub snapshot_interval: f64,
    /// Background drag applied only while settling the initial packing, 1/s.
    pub relax_drag: f64,
    /// Settling gives up after this much simulated time, s.
    pub relax_max_time: f64,
    pub rng_seed: u64,
}

impl Default for DemConfig {
    fn default() -> Self {
        DemConfig {
            incline1_angle: 30.0,
            incline2_angle: 75.0,
            channel_length: 0.096,
            channel_width: 0.044,
            packing_length: 0.032,
            channel_height: 0.06,
            n_particles: 2000,
            mean_diameter: 0.002,
            diameter_span: (0.8, 1.2),
            particle_density: 2500.0,
            mu_pp: 0.2,
            mu_pw: 0.5,
            base_roughness_diameter: 0.004,
            normal_stiffness: 500.0,
            tangential_stiffness_ratio: 2.0 / 7.0,
            damping_ratio: 0.2,
            gravity: STANDARD_GRAVITY,
            dt: 5e-5,
            total_time: 0.6,
            snapshot_interval: 0.05,
            relax_drag: 100.0,
            relax_max_time: 2.0,
            rng_seed: 0,
        }
    }
}

/// Stable ordering of surfaces used as contact partners and spring keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wall {
    Plane1 = 0,
    Plane2 = 1,
    LateralNear = 2,
    LateralFar = 3,
    EndWall = 4,
    Plate = 5,
}

/// Half-space `normal . p >= offset`, normal pointing into the material.
#[derive(Clone, Copy, Debug)]
pub struct Plane {
    pub wall: Wall,
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    #[inline]
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

impl DemConfig {
    pub fn validate(&self) -> Result<()> {
        let angle_ok = |a: f64| a > 0.0 && a < 90.0;
        if !angle_ok(self.incline1_angle) || !angle_ok(self.incline2_angle) {
            return Err(Error::config("incline angles must lie in (0, 90) degrees"));
        }
        if self.incline2_angle <= self.incline1_angle {
            return Err(Error::config("plane #2 must be steeper than plane #1"));
        }
        if !(self.mean_diameter > 0.0) {
            return Err(Error::config("mean diameter must be positive"));
        }
        let (lo, hi) = self.diameter_span;
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::config("diameter span must satisfy 0 < low < high"));
        }
        for (name, v) in [
            ("channel_length", self.channel_length),
            ("channel_width", self.channel_width),
            ("packing_length", self.packing_length),
            ("channel_height", self.channel_height),
            ("particle_density", self.particle_density),
            ("normal_stiffness", self.normal_stiffness),
            ("base_roughness_diameter", self.base_roughness_diameter),
            ("snapshot_interval", self.snapshot_interval),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("mu_pp", self.mu_pp),
            ("mu_pw", self.mu_pw),
            ("damping_ratio", self.damping_ratio),
            ("tangential_stiffness_ratio", self.tangential_stiffness_ratio),
            ("gravity", self.gravity),
            ("total_time", self.total_time),
            ("relax_drag", self.relax_drag),
            ("relax_max_time", self.relax_max_time),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be non-negative")));
            }
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("dt must be positive"));
        }
        let limit = self.contact_period() / 5.0;
        if self.dt >= limit {
            return Err(Error::config(format!(
                "dt = {:.3e} s is not below a fifth of the contact period ({:.3e} s)",
                self.dt, limit
            )));
        }
        Ok(())
    }

    pub fn min_diameter(&self) -> f64 {
        self.diameter_span.0 * self.mean_diameter
    }

    pub fn max_diameter(&self) -> f64 {
        self.diameter_span.1 * self.mean_diameter
    }

    pub fn mass_of(&self, radius: f64) -> f64 {
        self.particle_density * 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3)
    }

    /// Linear contact oscillation period of the lightest grain.
    pub fn contact_period(&self) -> f64 {
        let m = self.mass_of(0.5 * self.min_diameter());
        2.0 * std::f64::consts::PI * (m / self.normal_stiffness).sqrt()
    }

    pub fn gravity_vector(&self) -> Vec3 {
        let a = self.incline1_angle.to_radians();
        Vec3::new(self.gravity * a.sin(), 0.0, -self.gravity * a.cos())
    }

    /// Speed above which a step is declared unstable.
    /// Instability threshold. Uses standard gravity so that zero-gravity
    /// test setups keep a meaningful limit.
    pub fn speed_limit(&self) -> f64 {
        100.0 * (STANDARD_GRAVITY.max(self.gravity) * self.channel_length).sqrt()
    }

    /// Angle between plane #2 and plane #1.
    pub fn relative_angle(&self) -> f64 {
        (self.incline2_angle - self.incline1_angle).to_radians()
    }

    pub fn tangential_stiffness(&self) -> f64 {
        self.normal_stiffness * self.tangential_stiffness_ratio
    }

    /// All bounding surfaces, with or without the retaining plate.
    pub fn planes(&self, plate_active: bool) -> Vec<Plane> {
        let a = self.relative_angle();
        let mut planes = vec![
            Plane {
                wall: Wall::Plane1,
                normal: Vec3::new(0.0, 0.0, 1.0),
                offset: 0.0,
            },
            Plane {
                wall: Wall::Plane2,
                normal: Vec3::new(a.sin(), 0.0, a.cos()),
                offset: 0.0,
            },
            Plane {
                wall: Wall::LateralNear,
                normal: Vec3::new(0.0, 1.0, 0.0),
                offset: 0.0,
            },
            Plane {
                wall: Wall::LateralFar,
                normal: Vec3::new(0.0, -1.0, 0.0),
                offset: -self.channel_width,
            },
            Plane {
                wall: Wall::EndWall,
                normal: Vec3::new(-1.0, 0.0, 0.0),
                offset: -self.channel_length,
            },
        ];
        if plate_active {
            planes.push(Plane {
                wall: Wall::Plate,
                normal: Vec3::new(-1.0, 0.0, 0.0),
                offset: 0.0,
            });
        }
        planes
    }

    /// Lowest point of the domain in the world frame: foot of the end wall.
    pub fn potential_reference(&self) -> Vec3 {
        Vec3::new(self.channel_length, 0.0, 0.0)
    }

    /// Number of snapshots `run` emits, the initial one included.
    pub fn snapshot_count(&self) -> usize {
        (self.total_time / self.snapshot_interval + 1e-9).floor() as usize + 1
    }
}
