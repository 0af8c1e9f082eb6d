//! Desk-scale discrete-element model of a granular release down a two-plane
//! chute: linear spring–dashpot normal contacts, Coulomb-capped tangential
//! springs, semi-implicit Euler integration.

mod config;
mod sim;
mod state;

pub use config::{DemConfig, Plane, Wall};
pub use sim::{
    init_packing, kinetic_energy, mechanical_energy, release_plate, run, step, Energy, Stepper,
    MAX_OVERLAP_RATIO, REST_SPEED,
};
pub use state::{Contact, ParticleState};
