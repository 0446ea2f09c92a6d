//! Small hand-rolled SVG plots for eyeballing runs. Diagnostic output only,
//! nothing downstream parses these files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dynamics::ParticleEnsemble;
use crate::error::Result;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn from_values(values: impl Iterator<Item = f64>) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Axis { lo: 0.0, hi: 1.0 };
        }
        let pad = 0.05 * (hi - lo).max(1e-9);
        Axis {
            lo: lo - pad,
            hi: hi + pad,
        }
    }

    fn to_px(&self, v: f64, extent: f64) -> f64 {
        MARGIN + (v - self.lo) / (self.hi - self.lo) * (extent - 2.0 * MARGIN)
    }
}

fn open(out: &mut String, title: &str) {
    write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{title}</text>
"#,
        W / 2.0
    )
    .unwrap();
}

/// 2D scatter over the first two coordinates, one color per labeled group.
pub fn scatter(path: &Path, title: &str, groups: &[(&str, &ParticleEnsemble)]) -> Result<()> {
    let xs = Axis::from_values(
        groups
            .iter()
            .flat_map(|(_, e)| e.particles().iter().map(|p| p[0])),
    );
    let ys = Axis::from_values(
        groups
            .iter()
            .flat_map(|(_, e)| e.particles().iter().map(|p| if p.len() > 1 { p[1] } else { 0.0 })),
    );
    let mut out = String::new();
    open(&mut out, title);
    for (k, (label, ens)) in groups.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for p in ens.particles() {
            let y = if p.len() > 1 { p[1] } else { 0.0 };
            write!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="1.5" fill="{color}" fill-opacity="0.5"/>"#,
                xs.to_px(p[0], W),
                H - ys.to_px(y, H)
            )
            .unwrap();
        }
        write!(
            out,
            "\n<text x=\"{:.0}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            W - MARGIN - 120.0,
            MARGIN + 16.0 * k as f64
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    fs::write(path, out)?;
    Ok(())
}

/// Overlaid output histograms on a shared grid, one polyline per group.
pub fn histograms(path: &Path, title: &str, groups: &[(&str, &[f64])], bins: usize) -> Result<()> {
    let bins = bins.max(1);
    let axis = Axis::from_values(groups.iter().flat_map(|(_, v)| v.iter().copied()));
    let width = (axis.hi - axis.lo) / bins as f64;
    let counts: Vec<Vec<f64>> = groups
        .iter()
        .map(|(_, values)| {
            let mut c = vec![0.0; bins];
            for &v in *values {
                let b = (((v - axis.lo) / width) as usize).min(bins - 1);
                c[b] += 1.0 / values.len() as f64;
            }
            c
        })
        .collect();
    let peak = counts
        .iter()
        .flatten()
        .copied()
        .fold(1e-12, f64::max);
    let mut out = String::new();
    open(&mut out, title);
    for (k, ((label, _), c)) in groups.iter().zip(&counts).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = c
            .iter()
            .enumerate()
            .map(|(b, &m)| {
                let x = axis.to_px(axis.lo + (b as f64 + 0.5) * width, W);
                let y = H - MARGIN - m / peak * (H - 2.0 * MARGIN);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        write!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        )
        .unwrap();
        write!(
            out,
            "<text x=\"{:.0}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            W - MARGIN - 120.0,
            MARGIN + 16.0 * k as f64
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    fs::write(path, out)?;
    Ok(())
}
