use serde::{Deserialize, Serialize};

use crate::vec3::Vec3;

/// Tangential spring elongations, listed per owning particle (the lower
/// index of a pair, or the particle itself for wall contacts).
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct Springs {
    lists: Vec<Vec<(u32, Vec3)>>,
}

impl Springs {
    #[inline]
    pub(crate) fn get(&self, owner: usize, partner: u32) -> Vec3 {
        self.lists
            .get(owner)
            .and_then(|l| l.iter().find(|(p, _)| *p == partner))
            .map(|(_, s)| *s)
            .unwrap_or(Vec3::ZERO)
    }

    /// Empty every list, keeping allocations.
    pub(crate) fn reset(&mut self, n: usize) {
        self.lists.resize_with(n, Vec::new);
        for l in &mut self.lists {
            l.clear();
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, owner: usize, partner: u32, spring: Vec3) {
        self.lists[owner].push((partner, spring));
    }

    pub(crate) fn stored_energy(&self, kt: f64) -> f64 {
        self.lists
            .iter()
            .flat_map(|l| l.iter())
            .map(|(_, s)| 0.5 * kt * s.norm_sq())
            .sum()
    }
}

/// Spring partner id for a wall contact.
pub(crate) fn wall_partner(wall: u32) -> u32 {
    u32::MAX - wall
}

/// One particle–particle contact. `force` acts on `a` and is exerted by `b`;
/// `branch` points from the center of `a` to the center of `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub a: u32,
    pub b: u32,
    pub force: Vec3,
    pub branch: Vec3,
    pub point: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleState {
    pub time: f64,
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub angular_velocities: Vec<Vec3>,
    pub radii: Vec<f64>,
    /// Base-roughness spheres; never move.
    pub fixed: Vec<bool>,
    pub contacts: Vec<Contact>,
    pub plate_active: bool,
    pub(crate) springs: Springs,
}

impl ParticleState {
    pub fn new(
        positions: Vec<Vec3>,
        velocities: Vec<Vec3>,
        radii: Vec<f64>,
        fixed: Vec<bool>,
    ) -> Self {
        let n = positions.len();
        assert_eq!(velocities.len(), n);
        assert_eq!(radii.len(), n);
        assert_eq!(fixed.len(), n);
        ParticleState {
            time: 0.0,
            positions,
            velocities,
            angular_velocities: vec![Vec3::ZERO; n],
            radii,
            fixed,
            contacts: Vec::new(),
            plate_active: false,
            springs: Springs::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn mobile_count(&self) -> usize {
        self.fixed.iter().filter(|f| !**f).count()
    }

    pub fn max_mobile_speed(&self) -> f64 {
        self.velocities
            .iter()
            .zip(&self.fixed)
            .filter(|(_, f)| !**f)
            .map(|(v, _)| v.norm())
            .fold(0.0, f64::max)
    }

    /// Largest pair overlap as a fraction of the smaller radius.
    pub fn max_overlap_ratio(&self) -> f64 {
        self.contacts
            .iter()
            .map(|c| {
                let (a, b) = (c.a as usize, c.b as usize);
                let gap = self.radii[a] + self.radii[b] - c.branch.norm();
                gap.max(0.0) / self.radii[a].min(self.radii[b])
            })
            .fold(0.0, f64::max)
    }
}
