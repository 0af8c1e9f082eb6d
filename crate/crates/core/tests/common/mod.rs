#![allow(dead_code)]

use chuteflow::coarsegrain::{activity_mask, SliceSample, SLICE_DEPTHS};
use chuteflow::dataset::{Dataset, Frame, Instance};
use chuteflow::field::Field2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth layered flow: a sheared downslope profile over a free surface
/// that varies along x, decaying with slice depth.
pub fn synthetic_slice(id: u32, frame: usize, slice: usize, h: usize, w: usize) -> SliceSample {
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(id) * 1000 + (frame * 10 + slice) as u64);
    let t = 0.1 + 0.05 * frame as f64;
    let amp = (1.5 - 2.0 * (t - 0.25).abs()) * (-(slice as f64) / 4.0).exp();
    let phase = 0.7 * id as f64 + 0.4 * frame as f64;
    let mut v = Field2::zeros(3, h, w);
    let mut ph = Field2::zeros(3, h, w);
    for z in 0..h {
        for x in 0..w {
            let xs = x as f64 / w as f64;
            let surface = 0.3 + 0.5 * (0.5 + 0.5 * (std::f64::consts::TAU * xs + phase).sin());
            let zs = (z as f64 + 0.5) / h as f64;
            if zs > surface {
                continue;
            }
            let prof = amp * zs / surface;
            let n = 0.02 * rng.gen_range(-1.0..1.0);
            v.set(0, z, x, prof + n);
            v.set(1, z, x, 0.1 * prof * (xs - 0.5) + 0.5 * n);
            v.set(2, z, x, -0.2 * prof * xs + n);
            let depth = surface - zs;
            ph.set(0, z, x, 50.0 + 400.0 * depth);
            ph.set(1, z, x, 20.0 + 100.0 * depth * (1.0 + prof));
            ph.set(2, z, x, 1e-3 * prof * prof + 1e-4);
        }
    }
    SliceSample {
        slice_index: slice,
        y_plus: SLICE_DEPTHS[slice],
        time: t,
        mask: activity_mask(&v, 0.01),
        velocity: v,
        physics: Some(ph),
    }
}

pub fn synthetic_instances(n: u32, frames: usize, h: usize, w: usize) -> Vec<Instance> {
    (0..n)
        .map(|id| Instance {
            id,
            frames: (0..frames)
                .map(|f| Frame {
                    time: 0.1 + 0.05 * f as f64,
                    slices: (0..4).map(|c| synthetic_slice(id, f, c, h, w)).collect(),
                })
                .collect(),
        })
        .collect()
}

pub fn synthetic_dataset(n: u32, frames: usize, h: usize, w: usize) -> Dataset {
    Dataset::build(synthetic_instances(n, frames, h, w), 17, 0.01).unwrap()
}
