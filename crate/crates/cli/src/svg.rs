//! Standalone SVG 1.1 output for phase grids and sparsity/error scatters.

use std::fmt::Write;

use sparse_pursuit::experiments::{Algorithm, KernelPoint, PhaseCell};

const CELL: f64 = 28.0;
const MARGIN: f64 = 56.0;
const GAP: f64 = 40.0;

fn header(out: &mut String, width: f64, height: f64) {
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">
<rect width="100%" height="100%" fill="white"/>"#
    );
}

fn gray(v: f64) -> String {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    format!("rgb({g},{g},{g})")
}

fn unique_sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// One panel per algorithm: `n/m` on the horizontal axis, `k/n` rising
/// upwards, frequency 0 as black and 1 as white. Skipped cells are hatched
/// in a neutral tone.
pub fn phase_heatmap(cells: &[PhaseCell], algorithms: &[Algorithm]) -> String {
    let nr = unique_sorted(cells.iter().map(|c| c.n_ratio));
    let kr = unique_sorted(cells.iter().map(|c| c.k_ratio));
    let panel_w = nr.len() as f64 * CELL;
    let panel_h = kr.len() as f64 * CELL;
    let width = MARGIN + algorithms.len() as f64 * (panel_w + GAP) + 20.0;
    let height = panel_h + 2.0 * MARGIN;
    let mut out = String::new();
    header(&mut out, width, height);
    for (p, alg) in algorithms.iter().enumerate() {
        let x0 = MARGIN + p as f64 * (panel_w + GAP);
        let y0 = MARGIN * 0.6;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{}</text>"#,
            x0 + panel_w / 2.0,
            y0 - 6.0,
            alg.id()
        );
        for c in cells.iter().filter(|c| c.algorithm == *alg) {
            let i = nr.iter().position(|v| *v == c.n_ratio).unwrap_or(0);
            let j = kr.iter().position(|v| *v == c.k_ratio).unwrap_or(0);
            let x = x0 + i as f64 * CELL;
            let y = y0 + (kr.len() - 1 - j) as f64 * CELL;
            let fill = if c.trials == 0 {
                "rgb(200,160,160)".to_string()
            } else {
                gray(c.frequency)
            };
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{CELL}" height="{CELL}" fill="{fill}"><title>n/m={} k/n={} n={} k={} frequency={:.3} trials={}</title></rect>"#,
                c.n_ratio, c.k_ratio, c.n, c.k, c.frequency, c.trials
            );
        }
        let _ = writeln!(
            out,
            r#"<rect x="{x0:.1}" y="{y0:.1}" width="{panel_w:.1}" height="{panel_h:.1}" fill="none" stroke="black"/>"#
        );
        for (i, v) in nr.iter().enumerate() {
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v}</text>"#,
                x0 + (i as f64 + 0.5) * CELL,
                y0 + panel_h + 14.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">n/m</text>"#,
            x0 + panel_w / 2.0,
            y0 + panel_h + 30.0
        );
        if p == 0 {
            for (j, v) in kr.iter().enumerate() {
                let _ = writeln!(
                    out,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v}</text>"#,
                    x0 - 4.0,
                    y0 + (kr.len() as f64 - j as f64 - 0.5) * CELL + 4.0
                );
            }
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">k/n</text>"#,
                x0 - 38.0,
                y0 + panel_h / 2.0,
                x0 - 38.0,
                y0 + panel_h / 2.0
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Test RMSE against sparsity, one colour per algorithm.
pub fn sparsity_scatter(points: &[KernelPoint], algorithms: &[Algorithm]) -> String {
    let (w, h) = (520.0, 360.0);
    let (left, right, top, bottom) = (60.0, 130.0, 20.0, 45.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let max_s = points.iter().map(|p| p.sparsity).max().unwrap_or(1).max(1) as f64;
    let finite: Vec<f64> = points
        .iter()
        .map(|p| p.rmse)
        .filter(|v| v.is_finite())
        .collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else {
        (0.0, lo.max(0.0) + 1.0)
    };
    let mut out = String::new();
    header(&mut out, w, h);
    let _ = writeln!(
        out,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for t in 0..=4 {
        let f = t as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.0}</text>"#,
            left + f * pw,
            top + ph + 14.0,
            f * max_s
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            left - 4.0,
            top + (1.0 - f) * ph + 4.0,
            lo + f * (hi - lo)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">sparsity</text>"#,
        left + pw / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">test RMSE</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (a, alg) in algorithms.iter().enumerate() {
        let color = PALETTE[a % PALETTE.len()];
        for p in points
            .iter()
            .filter(|p| p.algorithm == *alg && p.rmse.is_finite())
        {
            let x = left + p.sparsity as f64 / max_s * pw;
            let y = top + (1.0 - (p.rmse - lo) / (hi - lo)) * ph;
            let _ = writeln!(
                out,
                r#"<circle cx="{x:.1}" cy="{y:.1}" r="2.5" fill="{color}" fill-opacity="0.7"/>"#
            );
        }
        let ly = top + 10.0 + a as f64 * 16.0;
        let _ = writeln!(
            out,
            r#"<circle cx="{:.1}" cy="{ly:.1}" r="4" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            left + pw + 14.0,
            left + pw + 22.0,
            ly + 4.0,
            alg.id()
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_heatmap_is_well_formed() {
        let cell = PhaseCell {
            n_ratio: 0.5,
            k_ratio: 0.25,
            algorithm: Algorithm::Rmp0,
            n: 64,
            k: 16,
            frequency: 1.0,
            half_width: 0.0,
            trials: 4,
        };
        let svg = phase_heatmap(&[cell], &[Algorithm::Rmp0]);
        assert!(svg.starts_with("<?xml") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("fill=\"rgb(255,255,255)\""));
        assert_eq!(svg.matches("<svg").count(), 1);
    }

    #[test]
    fn gray_scale_endpoints() {
        assert_eq!(gray(0.0), "rgb(0,0,0)");
        assert_eq!(gray(1.0), "rgb(255,255,255)");
    }

    #[test]
    fn scatter_handles_constant_rmse() {
        let p = KernelPoint {
            algorithm: Algorithm::Fr,
            split: 0,
            delta: 1.0,
            sparsity: 0,
            rmse: 0.5,
        };
        let svg = sparsity_scatter(&[p], &[Algorithm::Fr]);
        assert!(svg.contains("<circle") && !svg.contains("NaN"));
    }
}
