//! Hand-written SVG line plot of the benchmark table.

use std::fmt::Write;

use crate::commands::{BenchRecord, Solver};

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
/// Values below this are drawn at the floor of the log axis.
const FLOOR: f64 = 1e-6;

fn color(solver: Solver) -> &'static str {
    match solver {
        Solver::EpnpRansac => "#d62728",
        Solver::PatchPnp => "#1f77b4",
        Solver::Oracle => "#7f7f7f",
    }
}

const DASHES: [&str; 4] = ["", "6,3", "2,3", "8,3,2,3"];

/// Mean relative ADD against noise level, one line per solver and outlier
/// ratio, on a log-scale y axis.
pub fn bench_plot(records: &[BenchRecord]) -> String {
    let mut sigmas: Vec<f64> = records.iter().map(|r| r.sigma).collect();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    let mut ratios: Vec<f64> = records.iter().map(|r| r.outlier_ratio).collect();
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();

    let val = |r: &BenchRecord| if r.mean_rel_add.is_finite() { r.mean_rel_add.max(FLOOR) } else { FLOOR };
    let (lo, hi) = records.iter().map(val).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() {
        (lo.log10().floor(), hi.log10().ceil().max(lo.log10().floor() + 1.0))
    } else {
        (-3.0, 0.0)
    };
    let (x0, x1) = (sigmas.first().copied().unwrap_or(0.0), sigmas.last().copied().unwrap_or(1.0));
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |s: f64| LEFT + (s - x0) / span * (W - LEFT - RIGHT);
    let py = |v: f64| TOP + (hi - v.log10()) / (hi - lo) * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (bx, by) = (W - RIGHT, H - BOTTOM);
    let _ = writeln!(s, r#"<polyline points="{LEFT},{TOP} {LEFT},{by} {bx},{by}" fill="none" stroke="black"/>"#);
    for e in (lo as i32)..=(hi as i32) {
        let y = py(10f64.powi(e));
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{bx}" y2="{y:.2}" stroke="#ddd"/>"##);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">1e{e}</text>"#, LEFT - 6.0, y + 4.0);
    }
    for &sg in &sigmas {
        let x = px(sg);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{by}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, by + 4.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{sg}</text>"#, by + 18.0);
    }
    let _ =
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">noise sigma</text>"#, (LEFT + bx) / 2.0, H - 8.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">mean relative ADD</text>"#,
        (TOP + by) / 2.0,
        (TOP + by) / 2.0
    );

    let mut legend = 0;
    for solver in [Solver::EpnpRansac, Solver::PatchPnp, Solver::Oracle] {
        for (k, &ratio) in ratios.iter().enumerate() {
            let mut pts: Vec<&BenchRecord> =
                records.iter().filter(|r| r.solver == solver && r.outlier_ratio == ratio).collect();
            if pts.is_empty() {
                continue;
            }
            pts.sort_by(|a, b| a.sigma.total_cmp(&b.sigma));
            let line: Vec<String> = pts.iter().map(|r| format!("{:.2},{:.2}", px(r.sigma), py(val(r)))).collect();
            let dash = DASHES[k % DASHES.len()];
            let c = color(solver);
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2" stroke-dasharray="{dash}"/>"#,
                line.join(" ")
            );
            for r in &pts {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#, px(r.sigma), py(val(r)));
            }
            let ly = TOP + 10.0 + 18.0 * legend as f64;
            let lx = W - RIGHT + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{:.2}" y2="{ly}" stroke="{c}" stroke-width="2" stroke-dasharray="{dash}"/>"#,
                lx + 24.0
            );
            let _ =
                writeln!(s, r#"<text x="{:.2}" y="{:.2}">{solver} {:.0}%</text>"#, lx + 30.0, ly + 4.0, ratio * 100.0);
            legend += 1;
        }
    }
    s.push_str("</svg>\n");
    s
}
