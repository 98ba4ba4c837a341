//! Arm-vs-arm comparison: metric matrix, pairwise relative improvements,
//! and a bar-chart rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// Percentage change of `new` over `baseline`. Higher-is-better metrics use
/// `100*(new-baseline)/baseline`; lower-is-better flips the sign so an
/// improvement is always positive. The baseline must be positive.
pub fn relative_improvement(baseline: f64, new: f64, lower_is_better: bool) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::Validation(format!(
            "relative improvement needs baseline > 0, got {baseline}"
        )));
    }
    Ok(if lower_is_better {
        100.0 * (baseline - new) / baseline
    } else {
        100.0 * (new - baseline) / baseline
    })
}

/// Deterministic comparison artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonOutputs {
    pub csv: String,
    pub svg: String,
}

/// Compare named arms over reports sharing the same case keys per role.
/// The CSV holds one `mean` row per (arm, role) and one `improvement` row
/// per ordered arm pair and role (iou/dsc/nsd higher-better, assd
/// lower-better; cells are empty when the baseline mean is not positive).
/// Rows are ordered by sorted arm and role names.
pub fn compare_models(reports: &BTreeMap<String, MetricReport>) -> Result<ComparisonOutputs> {
    if reports.is_empty() {
        return Err(Error::Validation("compare_models: no reports".into()));
    }
    let key_set = |r: &MetricReport| -> BTreeSet<(String, String)> {
        r.per_case
            .iter()
            .map(|c| (c.case_id.clone(), c.role.clone()))
            .collect()
    };
    let mut iter = reports.iter();
    let (first_name, first) = iter.next().unwrap();
    let keys = key_set(first);
    for (name, r) in iter {
        if key_set(r) != keys {
            return Err(Error::KeyMismatch(format!(
                "report '{name}' covers different cases than '{first_name}'"
            )));
        }
    }
    let mut roles: Vec<String> = first.aggregates.iter().map(|a| a.role.clone()).collect();
    roles.sort();

    let mean = |arm: &str, role: &str| -> [f64; 4] {
        reports[arm]
            .aggregates
            .iter()
            .find(|a| a.role == role)
            .map(|a| a.mean)
            .expect("role present by key check")
    };

    let mut csv = String::from("kind,arm,role,iou,dsc,nsd,assd\n");
    for arm in reports.keys() {
        for role in &roles {
            let m = mean(arm, role);
            let _ = writeln!(
                csv,
                "mean,{arm},{role},{:.6},{:.6},{:.6},{:.6}",
                m[0], m[1], m[2], m[3]
            );
        }
    }
    for new_arm in reports.keys() {
        for base_arm in reports.keys() {
            if new_arm == base_arm {
                continue;
            }
            for role in &roles {
                let n = mean(new_arm, role);
                let b = mean(base_arm, role);
                let cell = |idx: usize, lower_better: bool| -> String {
                    relative_improvement(b[idx], n[idx], lower_better)
                        .map(|v| format!("{v:.6}"))
                        .unwrap_or_default()
                };
                let _ = writeln!(
                    csv,
                    "improvement,{new_arm}_vs_{base_arm},{role},{},{},{},{}",
                    cell(0, false),
                    cell(1, false),
                    cell(2, false),
                    cell(3, true)
                );
            }
        }
    }

    let svg = render_dsc_bars(reports, &roles, &mean);
    Ok(ComparisonOutputs { csv, svg })
}

/// Grouped bars of mean DSC per role and arm; fixed-palette deterministic
/// markup.
fn render_dsc_bars(
    reports: &BTreeMap<String, MetricReport>,
    roles: &[String],
    mean: &dyn Fn(&str, &str) -> [f64; 4],
) -> String {
    const PALETTE: [&str; 6] = [
        "#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4", "#8c613c",
    ];
    let arms: Vec<&String> = reports.keys().collect();
    let (width, height) = (760.0, 420.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 80.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"##
    );
    let _ = writeln!(
        s,
        r##"<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>"##
    );
    let _ = writeln!(
        s,
        r##"<text x="{:.2}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">Mean test DSC by role and arm</text>"##,
        width / 2.0
    );
    // axes
    let _ = writeln!(
        s,
        r##"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.2}" stroke="#333333"/>"##,
        top + plot_h
    );
    let _ = writeln!(
        s,
        r##"<line x1="{left}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#333333"/>"##,
        top + plot_h,
        left + plot_w,
        top + plot_h
    );
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="#333333"/>"##,
            left - 5.0
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.1}</text>"##,
            left - 9.0,
            y + 4.0
        );
    }

    let group_w = plot_w / roles.len() as f64;
    let bar_w = (group_w * 0.8) / arms.len() as f64;
    for (ri, role) in roles.iter().enumerate() {
        let gx = left + ri as f64 * group_w + group_w * 0.1;
        for (ai, arm) in arms.iter().enumerate() {
            let v = mean(arm, role)[1].clamp(0.0, 1.0);
            let h = plot_h * v;
            let x = gx + ai as f64 * bar_w;
            let y = top + plot_h - h;
            let color = PALETTE[ai % PALETTE.len()];
            let _ = writeln!(
                s,
                r##"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{h:.2}" fill="{color}"/>"##,
                bar_w * 0.92
            );
            let _ = writeln!(
                s,
                r##"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="middle">{:.2}</text>"##,
                x + bar_w * 0.46,
                y - 4.0,
                mean(arm, role)[1]
            );
        }
        let _ = writeln!(
            s,
            r##"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="13" text-anchor="middle">{role}</text>"##,
            gx + group_w * 0.4,
            top + plot_h + 24.0
        );
    }
    // legend
    for (ai, arm) in arms.iter().enumerate() {
        let x = left + ai as f64 * (plot_w / arms.len() as f64);
        let y = height - 30.0;
        let color = PALETTE[ai % PALETTE.len()];
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{:.2}" width="12" height="12" fill="{color}"/>"##,
            y - 10.0
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.2}" y="{y:.2}" font-family="sans-serif" font-size="12">{arm}</text>"##,
            x + 16.0
        );
    }
    s.push_str("</svg>\n");
    s
}
