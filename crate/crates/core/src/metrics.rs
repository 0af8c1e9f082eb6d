//! Masked error metrics, eCDF comparison and ensemble coverage.

use std::fmt::Write as _;
use std::path::Path;

use crate::binio::write_atomic;
use crate::field::Field2;
use crate::{Error, Result};

/// Truth and prediction restricted to an activity mask.
#[derive(Clone, Copy, Debug)]
pub struct MaskedPair<'a> {
    pub truth: &'a [f64],
    pub pred: &'a [f64],
    pub mask: &'a [bool],
}

impl<'a> MaskedPair<'a> {
    pub fn new(truth: &'a [f64], pred: &'a [f64], mask: &'a [bool]) -> Result<Self> {
        if truth.len() != pred.len() || truth.len() != mask.len() {
            return Err(Error::shape(format!(
                "truth {}, prediction {}, mask {}",
                truth.len(),
                pred.len(),
                mask.len()
            )));
        }
        Ok(MaskedPair { truth, pred, mask })
    }

    pub fn n_active(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn active(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.truth
            .iter()
            .zip(self.pred)
            .zip(self.mask)
            .filter(|(_, &m)| m)
            .map(|((&y, &p), _)| (y, p))
    }

    pub fn rmse(&self) -> Result<f64> {
        let n = self.n_active();
        if n == 0 {
            return Err(Error::EmptyMask);
        }
        let sse: f64 = self.active().map(|(y, p)| (y - p) * (y - p)).sum();
        Ok((sse / n as f64).sqrt())
    }

    pub fn pearson(&self) -> Result<f64> {
        let n = self.n_active();
        if n == 0 {
            return Err(Error::EmptyMask);
        }
        let (sy, sp) = self.active().fold((0.0, 0.0), |(a, b), (y, p)| (a + y, b + p));
        let (my, mp) = (sy / n as f64, sp / n as f64);
        let (mut num, mut vy, mut vp) = (0.0, 0.0, 0.0);
        for (y, p) in self.active() {
            num += (y - my) * (p - mp);
            vy += (y - my) * (y - my);
            vp += (p - mp) * (p - mp);
        }
        if vy <= 0.0 || vp <= 0.0 {
            return Err(Error::ZeroVariance);
        }
        Ok((num / (vy.sqrt() * vp.sqrt())).clamp(-1.0, 1.0))
    }
}

pub fn masked_rmse(truth: &[f64], pred: &[f64], mask: &[bool]) -> Result<f64> {
    MaskedPair::new(truth, pred, mask)?.rmse()
}

pub fn masked_pearson(truth: &[f64], pred: &[f64], mask: &[bool]) -> Result<f64> {
    MaskedPair::new(truth, pred, mask)?.pearson()
}

/// Kolmogorov-Smirnov distance between two empirical distributions.
/// Returns 0 when either side is empty.
pub fn ecdf_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Fraction of active cells whose truth lies within `m` standard deviations
/// of the ensemble mean.
pub fn coverage(truth: &[f64], mean: &[f64], std: &[f64], mask: &[bool], m: f64) -> Result<f64> {
    if truth.len() != mean.len() || truth.len() != std.len() || truth.len() != mask.len() {
        return Err(Error::shape("coverage inputs differ in length"));
    }
    let mut n = 0usize;
    let mut hit = 0usize;
    for i in 0..truth.len() {
        if !mask[i] {
            continue;
        }
        if std[i] < 0.0 || !std[i].is_finite() {
            return Err(Error::NonFinite(format!("ensemble std at cell {i}")));
        }
        n += 1;
        let d = (truth[i] - mean[i]).abs();
        if (std[i] == 0.0 && d == 0.0) || (std[i] > 0.0 && d <= m * std[i]) {
            hit += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(hit as f64 / n as f64)
}

/// Which cells a metric row is evaluated over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Active,
    Empty,
    All,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Active => "active",
            MaskKind::Empty => "empty",
            MaskKind::All => "all",
        }
    }

    pub fn apply(self, active: &[bool]) -> Vec<bool> {
        match self {
            MaskKind::Active => active.to_vec(),
            MaskKind::Empty => active.iter().map(|m| !m).collect(),
            MaskKind::All => vec![true; active.len()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub quantity: String,
    pub slice: usize,
    pub time: f64,
    pub mask: MaskKind,
    pub rmse: Option<f64>,
    /// `None` when either masked series is constant.
    pub r: Option<f64>,
    pub n_active: usize,
}

/// One row per channel and mask kind. `names` labels the channels of both
/// fields; the mask comes from the truth.
pub fn field_rows(
    truth: &Field2,
    pred: &Field2,
    names: &[&str],
    active: &[bool],
    slice: usize,
    time: f64,
    kinds: &[MaskKind],
) -> Result<Vec<MetricRow>> {
    if !truth.same_shape(pred) || names.len() != truth.channels {
        return Err(Error::shape("metric fields disagree in shape"));
    }
    let mut rows = Vec::new();
    for (c, name) in names.iter().enumerate() {
        for &kind in kinds {
            let mask = kind.apply(active);
            let pair = MaskedPair::new(truth.channel(c), pred.channel(c), &mask)?;
            rows.push(MetricRow {
                quantity: name.to_string(),
                slice,
                time,
                mask: kind,
                rmse: pair.rmse().ok(),
                r: pair.pearson().ok(),
                n_active: pair.n_active(),
            });
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9e}")).unwrap_or_else(|| "nan".into())
}

pub fn rows_to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("quantity,slice,time,mask,rmse,r,n_act\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{},{},{},{}",
            r.quantity,
            r.slice,
            r.time,
            r.mask.name(),
            opt(r.rmse),
            opt(r.r),
            r.n_active
        );
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_atomic(path, rows_to_csv(rows).as_bytes())
}
