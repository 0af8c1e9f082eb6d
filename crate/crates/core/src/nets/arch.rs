use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Flow-matching vector field over interior velocity slices.
    Backbone,
    /// Forward operator: interior velocity slice to boundary (v_x, v_z).
    #[serde(alias = "surrogate")]
    Forward,
    /// Physics decoder: velocity slice to (p, q, T).
    Decoder,
    /// Deterministic inverse map: boundary (v_x, v_z) to interior velocity.
    Baseline,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Backbone,
        ModelKind::Forward,
        ModelKind::Decoder,
        ModelKind::Baseline,
    ];

    pub fn channels(self) -> (usize, usize) {
        match self {
            ModelKind::Backbone => (3, 3),
            ModelKind::Forward => (3, 2),
            ModelKind::Decoder => (3, 3),
            ModelKind::Baseline => (2, 3),
        }
    }

    pub fn uses_tau(self) -> bool {
        self == ModelKind::Backbone
    }

    /// Slice indices the model may be conditioned on.
    pub fn slices(self) -> &'static [usize] {
        match self {
            ModelKind::Decoder => &[0, 1, 2, 3],
            _ => &[1, 2, 3],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Backbone => "backbone",
            ModelKind::Forward => "forward",
            ModelKind::Decoder => "decoder",
            ModelKind::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(ModelKind::Backbone),
            "forward" | "surrogate" => Ok(ModelKind::Forward),
            "decoder" => Ok(ModelKind::Decoder),
            "baseline" => Ok(ModelKind::Baseline),
            _ => Err(Error::config(format!("unknown model kind '{s}'"))),
        }
    }
}

pub const SLICE_VOCAB: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub kind: ModelKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub embed_width: usize,
    pub uses_tau: bool,
    pub vocab: usize,
}

impl ArchDescriptor {
    pub fn new(kind: ModelKind, widths: Vec<usize>, blocks_per_stage: usize) -> Self {
        let (i, o) = kind.channels();
        let embed_width = widths.first().copied().unwrap_or(0);
        ArchDescriptor {
            kind,
            in_channels: i,
            out_channels: o,
            widths,
            blocks_per_stage,
            embed_width,
            uses_tau: kind.uses_tau(),
            vocab: SLICE_VOCAB,
        }
    }

    pub fn desk(kind: ModelKind) -> Self {
        Self::new(kind, vec![16, 32, 64], 1)
    }

    pub fn validate(&self) -> Result<()> {
        if (self.in_channels, self.out_channels) != self.kind.channels() {
            return Err(Error::ArchMismatch(format!(
                "{} expects {:?} channels, got ({}, {})",
                self.kind.name(),
                self.kind.channels(),
                self.in_channels,
                self.out_channels
            )));
        }
        if self.uses_tau != self.kind.uses_tau() {
            return Err(Error::ArchMismatch("tau embedding flag does not match model kind".into()));
        }
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::config("stage widths must be positive"));
        }
        if self.widths.windows(2).any(|p| p[1] < p[0]) {
            return Err(Error::config("stage widths must be non-decreasing"));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::config("blocks_per_stage must be at least 1"));
        }
        if self.embed_width < 2 || self.embed_width % 2 != 0 {
            return Err(Error::config("embed_width must be even and at least 2"));
        }
        if self.vocab < SLICE_VOCAB {
            return Err(Error::config("slice vocabulary must cover indices 0..4"));
        }
        Ok(())
    }

    /// Spatial dims must survive `stages − 1` halvings.
    pub fn spatial_factor(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conditioning {
    pub tau: f64,
    pub slice: usize,
}

impl Conditioning {
    pub fn new(tau: f64, slice: usize) -> Self {
        Conditioning { tau, slice }
    }

    pub fn slice(slice: usize) -> Self {
        Conditioning { tau: 0.0, slice }
    }
}
