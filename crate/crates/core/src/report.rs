//! SVG heatmaps of reconstructions and a summary table.

use std::fmt::Write as _;
use std::path::Path;

use crate::archive::FieldArchive;
use crate::binio::write_atomic;
use crate::metrics::{masked_pearson, masked_rmse};
use crate::{Error, Result};

const CELL: f64 = 10.0;
const PAD: f64 = 30.0;
const BAR: f64 = 12.0;

/// Viridis anchor colors, evenly spaced.
const RAMP: [(u8, u8, u8); 6] = [
    (68, 1, 84),
    (65, 68, 135),
    (42, 120, 142),
    (34, 168, 132),
    (122, 209, 81),
    (253, 231, 37),
];

fn color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    let mix = |p: u8, q: u8| (p as f64 + f * (q as f64 - p as f64)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// One heatmap panel. Row 0 of `values` is drawn at the bottom.
pub struct Panel<'a> {
    pub title: String,
    pub values: &'a [f64],
    pub height: usize,
    pub width: usize,
    pub range: (f64, f64),
    pub units: String,
}

fn range_of<'a>(fields: impl IntoIterator<Item = &'a [f64]>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for f in fields {
        for &v in f.iter().filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi <= lo {
        hi = lo + 1e-12;
    }
    (lo, hi)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grid of panels, `cols` per row, each with its own colorbar.
pub fn panels_svg(title: &str, panels: &[Panel], cols: usize) -> String {
    let cols = cols.max(1);
    let pw = panels.iter().map(|p| p.width).max().unwrap_or(1) as f64 * CELL;
    let ph = panels.iter().map(|p| p.height).max().unwrap_or(1) as f64 * CELL;
    let cw = pw + BAR + 4.0 * PAD;
    let rh = ph + 2.5 * PAD;
    let rows = panels.len().div_ceil(cols);
    let (w, h) = (cols as f64 * cw + PAD, rows as f64 * rh + 1.5 * PAD);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="14">{}</text>"#, PAD, PAD * 0.8, esc(title));
    for (k, p) in panels.iter().enumerate() {
        let x0 = PAD + (k % cols) as f64 * cw;
        let y0 = 1.5 * PAD + (k / cols) as f64 * rh;
        let _ = writeln!(s, r#"<text x="{x0}" y="{}">{}</text>"#, y0 + 12.0, esc(&p.title));
        let top = y0 + 20.0;
        let (lo, hi) = p.range;
        for r in 0..p.height {
            for c in 0..p.width {
                let v = p.values[r * p.width + c];
                let y = top + (p.height - 1 - r) as f64 * CELL;
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{}"/>"#,
                    x0 + c as f64 * CELL,
                    y,
                    color((v - lo) / (hi - lo))
                );
            }
        }
        let bx = x0 + p.width as f64 * CELL + 6.0;
        let steps = 16;
        let sh = p.height as f64 * CELL / steps as f64;
        for i in 0..steps {
            let t = 1.0 - (i as f64 + 0.5) / steps as f64;
            let _ = writeln!(s, r#"<rect x="{bx}" y="{}" width="{BAR}" height="{sh}" fill="{}"/>"#, top + i as f64 * sh, color(t));
        }
        let tx = bx + BAR + 3.0;
        let _ = writeln!(s, r#"<text x="{tx}" y="{}">{:.3e}</text>"#, top + 8.0, hi);
        let _ = writeln!(s, r#"<text x="{tx}" y="{}">{:.3e}</text>"#, top + p.height as f64 * CELL, lo);
        let _ = writeln!(s, r#"<text x="{tx}" y="{}">[{}]</text>"#, top + p.height as f64 * CELL * 0.5 + 4.0, esc(&p.units));
    }
    s.push_str("</svg>\n");
    s
}

/// Velocity components shown in reports.
const COMPONENTS: [(usize, &str); 3] = [(0, "v_x"), (1, "v_y"), (2, "v_z")];

/// Renders one SVG per slice of a reconstruction archive plus
/// `summary.csv`. Returns the written file names.
pub fn report_archive(archive_dir: &Path, out_dir: &Path) -> Result<Vec<String>> {
    let a = FieldArchive::open(archive_dir)?;
    let mut slices: Vec<usize> = a
        .manifest
        .arrays
        .iter()
        .filter_map(|e| e.name.strip_prefix('s')?.strip_suffix("_truth")?.parse().ok())
        .collect();
    slices.sort_unstable();
    if slices.is_empty() {
        return Err(Error::parse("archive holds no reconstructed slices").at_path(&archive_dir.join("manifest.json")));
    }
    let mut written = Vec::new();
    let mut summary = String::from("slice,component,rmse,r,n_act,mean_std\n");
    for s in slices {
        let truth = a.read_field(&format!("s{s}_truth"))?;
        let mean = a.read_field(&format!("s{s}_mean"))?;
        let active: Vec<bool> = a.read(&format!("s{s}_active"))?.iter().map(|&v| v != 0.0).collect();
        let std = a.manifest.arrays.iter().any(|e| e.name == format!("s{s}_std")).then(|| a.read_field(&format!("s{s}_std"))).transpose()?;
        let units = a.entry(&format!("s{s}_truth"))?.units.clone();
        if !truth.same_shape(&mean) || active.len() != truth.plane_len() {
            return Err(Error::shape(format!("slice {s} arrays disagree in shape")));
        }
        let (h, w) = (truth.height, truth.width);
        let mut errs = Vec::new();
        let mut panels = Vec::new();
        for &(c, _) in &COMPONENTS {
            errs.push(truth.channel(c).iter().zip(mean.channel(c)).map(|(t, m)| (t - m).abs()).collect::<Vec<f64>>());
        }
        for (k, &(c, name)) in COMPONENTS.iter().enumerate() {
            let range = range_of([truth.channel(c), mean.channel(c)]);
            panels.push(Panel {
                title: format!("{name} truth"),
                values: truth.channel(c),
                height: h,
                width: w,
                range,
                units: units.clone(),
            });
            panels.push(Panel {
                title: format!("{name} reconstruction"),
                values: mean.channel(c),
                height: h,
                width: w,
                range,
                units: units.clone(),
            });
            panels.push(Panel {
                title: format!("|{name} error|"),
                values: &errs[k],
                height: h,
                width: w,
                range: range_of([errs[k].as_slice()]),
                units: units.clone(),
            });
            if let Some(sd) = &std {
                panels.push(Panel {
                    title: format!("{name} ensemble std"),
                    values: sd.channel(c),
                    height: h,
                    width: w,
                    range: range_of([sd.channel(c)]),
                    units: units.clone(),
                });
            }
            let fmt = |v: Result<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_else(|_| "nan".into());
            let n_act = active.iter().filter(|&&m| m).count();
            let mstd = match &std {
                Some(sd) if n_act > 0 => {
                    let sum: f64 = sd.channel(c).iter().zip(&active).filter(|(_, &m)| m).map(|(v, _)| v).sum();
                    format!("{:.6e}", sum / n_act as f64)
                }
                _ => "nan".into(),
            };
            let _ = writeln!(
                summary,
                "{s},{name},{},{},{n_act},{mstd}",
                fmt(masked_rmse(truth.channel(c), mean.channel(c), &active)),
                fmt(masked_pearson(truth.channel(c), mean.channel(c), &active)),
            );
        }
        let cols = if std.is_some() { 4 } else { 3 };
        let svg = panels_svg(&format!("Slice {s}"), &panels, cols);
        let name = format!("slice{s}.svg");
        write_atomic(&out_dir.join(&name), svg.as_bytes())?;
        written.push(name);
    }
    write_atomic(&out_dir.join("summary.csv"), summary.as_bytes())?;
    written.push("summary.csv".into());
    Ok(written)
}
