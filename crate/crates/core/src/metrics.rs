//! Overlap and surface-distance metrics: IoU, DSC, NSD, ASSD.
//!
//! Boundaries use 4-connectivity with out-of-image pixels counting as
//! background. Surface distances are Euclidean between pixel centers; the
//! fast path computes an exact squared distance transform (Felzenszwalb &
//! Huttenlocher lower-envelope, per axis) so distances agree with the
//! all-pairs definition, not an approximation of it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Mask2D;

/// Pixel counts underlying IoU and DSC. Exposed so the algebraic identity
/// `dsc = 2*iou/(1+iou)` can be verified in exact integer arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverlapCounts {
    pub intersection: u64,
    pub union: u64,
    pub size_a: u64,
    pub size_b: u64,
}

fn check_shapes(a: &Mask2D, b: &Mask2D, context: &str) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(
            context,
            format!("{}x{}", a.height(), a.width()),
            format!("{}x{}", b.height(), b.width()),
        ));
    }
    Ok(())
}

/// Count intersection/union/sizes in one pass.
pub fn overlap_counts(a: &Mask2D, b: &Mask2D) -> Result<OverlapCounts> {
    check_shapes(a, b, "overlap_counts")?;
    let mut c = OverlapCounts {
        intersection: 0,
        union: 0,
        size_a: 0,
        size_b: 0,
    };
    for (&va, &vb) in a.values().iter().zip(b.values()) {
        c.size_a += va as u64;
        c.size_b += vb as u64;
        c.intersection += (va & vb) as u64;
        c.union += (va | vb) as u64;
    }
    Ok(c)
}

/// Intersection over union; 1.0 when both masks are empty.
pub fn iou(a: &Mask2D, b: &Mask2D) -> Result<f64> {
    let c = overlap_counts(a, b)?;
    if c.union == 0 {
        return Ok(1.0);
    }
    Ok(c.intersection as f64 / c.union as f64)
}

/// Dice similarity coefficient `2|A∩B| / (|A|+|B|)`; 1.0 when both empty.
pub fn dsc(a: &Mask2D, b: &Mask2D) -> Result<f64> {
    let c = overlap_counts(a, b)?;
    if c.size_a + c.size_b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * c.intersection as f64 / (c.size_a + c.size_b) as f64)
}

/// Foreground pixels with at least one background 4-neighbor; pixels beyond
/// the image border count as background. Returned in row-major order.
pub fn extract_boundary(mask: &Mask2D) -> Vec<(u32, u32)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) == 0 {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x == w - 1
                || y == h - 1
                || mask.get(x - 1, y) == 0
                || mask.get(x + 1, y) == 0
                || mask.get(x, y - 1) == 0
                || mask.get(x, y + 1) == 0;
            if edge {
                out.push((x as u32, y as u32));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance transform to a seed set over an `h x w`
/// grid (Felzenszwalb-Huttenlocher per-axis lower envelope). Cells with no
/// seed anywhere are `f64::INFINITY`.
fn squared_distance_transform(seeds: &[(u32, u32)], h: usize, w: usize) -> Vec<f64> {
    const INF: f64 = f64::INFINITY;
    let mut grid = vec![INF; h * w];
    for &(x, y) in seeds {
        grid[y as usize * w + x as usize] = 0.0;
    }
    if seeds.is_empty() {
        return grid;
    }

    // 1-D squared-distance lower envelope.
    fn envelope(f: &[f64], out: &mut Vec<f64>) {
        let n = f.len();
        out.clear();
        out.resize(n, f64::INFINITY);
        let mut v = vec![0usize; n]; // parabola sites
        let mut z = vec![0.0f64; n + 1]; // envelope breakpoints
        let mut k = 0usize;
        let mut started = false;
        for q in 0..n {
            if f[q].is_infinite() {
                continue;
            }
            if !started {
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                started = true;
                continue;
            }
            loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                    / (2.0 * q as f64 - 2.0 * p as f64);
                if s <= z[k] {
                    if k == 0 {
                        v[0] = q;
                        z[0] = f64::NEG_INFINITY;
                        z[1] = f64::INFINITY;
                        break;
                    }
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
            }
        }
        if !started {
            return;
        }
        let mut k2 = 0usize;
        for q in 0..n {
            while z[k2 + 1] < q as f64 {
                k2 += 1;
            }
            let p = v[k2];
            let d = q as f64 - p as f64;
            out[q] = d * d + f[p];
        }
    }

    // columns then rows
    let mut col = vec![0.0f64; h];
    let mut env = Vec::with_capacity(h.max(w));
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        envelope(&col, &mut env);
        for y in 0..h {
            grid[y * w + x] = env[y];
        }
    }
    let mut row = vec![0.0f64; w];
    for y in 0..h {
        row.copy_from_slice(&grid[y * w..(y + 1) * w]);
        envelope(&row, &mut env);
        grid[y * w..(y + 1) * w].copy_from_slice(&env);
    }
    grid
}

/// Normalized surface distance at tolerance `tau`: the fraction of boundary
/// pixels of each mask lying within `tau` of the other mask's boundary.
/// Both masks empty -> 1.0; exactly one empty -> 0.0.
pub fn nsd(a: &Mask2D, b: &Mask2D, tau: f64) -> Result<f64> {
    check_shapes(a, b, "nsd")?;
    if tau < 0.0 {
        return Err(Error::Validation(format!(
            "nsd tolerance must be >= 0, got {tau}"
        )));
    }
    let ba = extract_boundary(a);
    let bb = extract_boundary(b);
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let (h, w) = (a.height(), a.width());
    let dist2_to_b = squared_distance_transform(&bb, h, w);
    let dist2_to_a = squared_distance_transform(&ba, h, w);
    let tau2 = tau * tau;
    let near_a = ba
        .iter()
        .filter(|&&(x, y)| dist2_to_b[y as usize * w + x as usize] <= tau2)
        .count();
    let near_b = bb
        .iter()
        .filter(|&&(x, y)| dist2_to_a[y as usize * w + x as usize] <= tau2)
        .count();
    Ok((near_a + near_b) as f64 / (ba.len() + bb.len()) as f64)
}

/// Average symmetric surface distance in pixels. Errors if either mask is
/// empty (the average is undefined without a boundary).
pub fn assd(a: &Mask2D, b: &Mask2D) -> Result<f64> {
    check_shapes(a, b, "assd")?;
    let ba = extract_boundary(a);
    let bb = extract_boundary(b);
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::EmptyMask("assd requires two non-empty masks"));
    }
    let (h, w) = (a.height(), a.width());
    let dist2_to_b = squared_distance_transform(&bb, h, w);
    let dist2_to_a = squared_distance_transform(&ba, h, w);
    // the directed sums are combined with a single commutative add so
    // assd(a, b) == assd(b, a) bit-for-bit
    let mut sum_a = 0.0;
    for &(x, y) in &ba {
        sum_a += dist2_to_b[y as usize * w + x as usize].sqrt();
    }
    let mut sum_b = 0.0;
    for &(x, y) in &bb {
        sum_b += dist2_to_a[y as usize * w + x as usize].sqrt();
    }
    Ok((sum_a + sum_b) / (ba.len() + bb.len()) as f64)
}

/// One evaluated case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    pub role: String,
    pub iou: f64,
    pub dsc: f64,
    pub nsd: f64,
    pub assd: f64,
}

/// Per-role mean and standard deviation of each metric, ordered
/// [iou, dsc, nsd, assd].
#[derive(Debug, Clone, PartialEq)]
pub struct RoleAggregate {
    pub role: String,
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

/// Per-case metrics plus per-role aggregates, ordered by (case_id, role).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_case: Vec<CaseMetrics>,
    pub aggregates: Vec<RoleAggregate>,
}

impl MetricReport {
    /// Mean of one metric for a role; `metric` indexes [iou, dsc, nsd, assd].
    pub fn role_mean(&self, role: &str, metric: usize) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.role == role)
            .map(|a| a.mean[metric])
    }

    /// CSV with fixed 6-decimal formatting; aggregate rows use the pseudo
    /// case ids `__mean__` and `__std__`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case_id,role,iou,dsc,nsd,assd\n");
        for c in &self.per_case {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                c.case_id, c.role, c.iou, c.dsc, c.nsd, c.assd
            );
        }
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "__mean__,{},{:.6},{:.6},{:.6},{:.6}",
                a.role, a.mean[0], a.mean[1], a.mean[2], a.mean[3]
            );
            let _ = writeln!(
                out,
                "__std__,{},{:.6},{:.6},{:.6},{:.6}",
                a.role, a.std[0], a.std[1], a.std[2], a.std[3]
            );
        }
        out
    }

    /// Parse a report CSV produced by [`MetricReport::to_csv`].
    pub fn from_csv(text: &str) -> Result<MetricReport> {
        let mut per_case = Vec::new();
        let mut means: BTreeMap<String, [f64; 4]> = BTreeMap::new();
        let mut stds: BTreeMap<String, [f64; 4]> = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            if ln == 0 {
                if line != "case_id,role,iou,dsc,nsd,assd" {
                    return Err(Error::parse("metrics csv header", line.to_string()));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(Error::parse(
                    format!("metrics csv line {}", ln + 1),
                    format!("expected 6 fields, got {}", fields.len()),
                ));
            }
            let mut vals = [0.0f64; 4];
            for (i, v) in vals.iter_mut().enumerate() {
                *v = fields[i + 2].parse().map_err(|e| {
                    Error::parse(
                        format!("metrics csv line {} field {}", ln + 1, i + 3),
                        format!("{e}"),
                    )
                })?;
            }
            match fields[0] {
                "__mean__" => {
                    means.insert(fields[1].to_string(), vals);
                }
                "__std__" => {
                    stds.insert(fields[1].to_string(), vals);
                }
                id => per_case.push(CaseMetrics {
                    case_id: id.to_string(),
                    role: fields[1].to_string(),
                    iou: vals[0],
                    dsc: vals[1],
                    nsd: vals[2],
                    assd: vals[3],
                }),
            }
        }
        let aggregates = means
            .into_iter()
            .map(|(role, mean)| {
                let std = stds.get(&role).copied().unwrap_or([0.0; 4]);
                RoleAggregate { role, mean, std }
            })
            .collect();
        Ok(MetricReport {
            per_case,
            aggregates,
        })
    }
}

/// Worst-case ASSD substitute when exactly one mask is empty: the image
/// diagonal. Keeps dataset evaluation total on degenerate predictions.
fn assd_or_worst(a: &Mask2D, b: &Mask2D) -> Result<f64> {
    match assd(a, b) {
        Ok(v) => Ok(v),
        Err(Error::EmptyMask(_)) => {
            if a.is_empty() && b.is_empty() {
                Ok(0.0)
            } else {
                let h = a.height() as f64;
                let w = a.width() as f64;
                Ok((h * h + w * w).sqrt())
            }
        }
        Err(e) => Err(e),
    }
}

/// Evaluate keyed prediction/reference pairs. Key sets must match exactly;
/// per-case rows are ordered by (case_id, role) and aggregates by role, so
/// the report (and its CSV form) is deterministic. Per-case work fans out
/// across threads with an ordered reduction.
pub fn evaluate_dataset(
    predictions: &[(String, String, Mask2D)],
    references: &[(String, String, Mask2D)],
    tau: f64,
) -> Result<MetricReport> {
    if predictions.is_empty() {
        return Err(Error::Validation("evaluate_dataset: empty input".into()));
    }
    let mut pred: BTreeMap<(String, String), &Mask2D> = BTreeMap::new();
    for (id, role, m) in predictions {
        if pred.insert((id.clone(), role.clone()), m).is_some() {
            return Err(Error::KeyMismatch(format!(
                "duplicate prediction key ({id}, {role})"
            )));
        }
    }
    let mut refs: BTreeMap<(String, String), &Mask2D> = BTreeMap::new();
    for (id, role, m) in references {
        if refs.insert((id.clone(), role.clone()), m).is_some() {
            return Err(Error::KeyMismatch(format!(
                "duplicate reference key ({id}, {role})"
            )));
        }
    }
    if pred.len() != refs.len() || !pred.keys().eq(refs.keys()) {
        return Err(Error::KeyMismatch(
            "prediction and reference key sets differ".into(),
        ));
    }

    let keyed: Vec<(&(String, String), &&Mask2D)> = pred.iter().collect();
    let per_case: Vec<CaseMetrics> = keyed
        .par_iter()
        .map(|((id, role), p)| {
            let r = refs[&(id.clone(), role.clone())];
            Ok(CaseMetrics {
                case_id: id.clone(),
                role: role.clone(),
                iou: iou(p, r)?,
                dsc: dsc(p, r)?,
                nsd: nsd(p, r, tau)?,
                assd: assd_or_worst(p, r)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut roles: Vec<String> = per_case.iter().map(|c| c.role.clone()).collect();
    roles.sort();
    roles.dedup();
    let aggregates = roles
        .into_iter()
        .map(|role| {
            let vals: Vec<[f64; 4]> = per_case
                .iter()
                .filter(|c| c.role == role)
                .map(|c| [c.iou, c.dsc, c.nsd, c.assd])
                .collect();
            let n = vals.len() as f64;
            let mut mean = [0.0; 4];
            for v in &vals {
                for k in 0..4 {
                    mean[k] += v[k];
                }
            }
            for m in &mut mean {
                *m /= n;
            }
            // population standard deviation so a single case reports 0
            let mut std = [0.0; 4];
            for v in &vals {
                for k in 0..4 {
                    let d = v[k] - mean[k];
                    std[k] += d * d;
                }
            }
            for s in &mut std {
                *s = (*s / n).sqrt();
            }
            RoleAggregate { role, mean, std }
        })
        .collect();

    Ok(MetricReport {
        per_case,
        aggregates,
    })
}
