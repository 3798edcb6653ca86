//! Overlap, surface-distance and target-ratio metrics on binary masks.

use serde::{Deserialize, Serialize};

use crate::clinical::{NStage, RiskGroup};
use crate::error::Result;
use crate::volume::MaskVolume;

/// `(dice, iou)`; both masks empty counts as a perfect match.
pub fn dice_iou(pred: &MaskVolume, y: &MaskVolume) -> Result<(f64, f64)> {
    let inter = pred.intersection_count(y)? as f64;
    let (p, t) = (pred.count() as f64, y.count() as f64);
    if p + t == 0.0 {
        return Ok((1.0, 1.0));
    }
    let union = p + t - inter;
    Ok((2.0 * inter / (p + t), inter / union))
}

/// Directed-distance pooling for HD-95.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HdPooling {
    /// One percentile over both directed distance sets.
    #[default]
    Pooled,
    /// Larger of the two per-direction percentiles.
    MaxOfDirected,
}

/// Mask voxels with at least one 6-neighbor outside the mask or the grid.
pub fn surface_voxels(m: &MaskVolume) -> Vec<[usize; 3]> {
    let [h, w, s] = m.dims();
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            for k in 0..s {
                if !m.get(i, j, k) {
                    continue;
                }
                let border = i == 0 || j == 0 || k == 0 || i + 1 == h || j + 1 == w || k + 1 == s;
                if border
                    || !m.get(i - 1, j, k)
                    || !m.get(i + 1, j, k)
                    || !m.get(i, j - 1, k)
                    || !m.get(i, j + 1, k)
                    || !m.get(i, j, k - 1)
                    || !m.get(i, j, k + 1)
                {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// 1-D squared distance transform along a line with sample spacing `sp`
/// (lower envelope of parabolas).
fn edt_1d(f: &mut [f64], sp: f64, v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * sp;
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for q in 0..n {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        out[q] = d * d + f[v[k]];
    }
    f.copy_from_slice(out);
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// seed voxel, separable over the three axes.
pub fn squared_distance_map(dims: [usize; 3], spacing: [f64; 3], seeds: &[[usize; 3]]) -> Vec<f64> {
    let [h, w, s] = dims;
    let idx = |i: usize, j: usize, k: usize| (i * w + j) * s + k;
    let mut d = vec![f64::INFINITY; h * w * s];
    for &[i, j, k] in seeds {
        d[idx(i, j, k)] = 0.0;
    }
    let n = h.max(w).max(s);
    let (mut line, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for (axis, len) in [(2usize, s), (1, w), (0, h)] {
        let (outer_a, outer_b) = match axis {
            2 => (h, w),
            1 => (h, s),
            _ => (w, s),
        };
        for a in 0..outer_a {
            for b in 0..outer_b {
                let at = |t: usize| match axis {
                    2 => idx(a, b, t),
                    1 => idx(a, t, b),
                    _ => idx(t, a, b),
                };
                for t in 0..len {
                    line[t] = d[at(t)];
                }
                edt_1d(&mut line[..len], spacing[axis], &mut v, &mut z, &mut out[..len]);
                for t in 0..len {
                    d[at(t)] = line[t];
                }
            }
        }
    }
    d
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = (values.len() - 1) as f64 * q / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

fn directed(from: &[[usize; 3]], to_map: &[f64], dims: [usize; 3]) -> Vec<f64> {
    from.iter().map(|&[i, j, k]| to_map[(i * dims[1] + j) * dims[2] + k].sqrt()).collect()
}

/// 95th-percentile symmetric surface distance in cm; `None` when either mask
/// is empty.
pub fn hd95(pred: &MaskVolume, y: &MaskVolume) -> Result<Option<f64>> {
    hd95_with(pred, y, HdPooling::Pooled)
}

pub fn hd95_with(pred: &MaskVolume, y: &MaskVolume, pooling: HdPooling) -> Result<Option<f64>> {
    pred.check_grid(y)?;
    if pred.is_empty() || y.is_empty() {
        return Ok(None);
    }
    let dims = pred.dims();
    let sp = pred.spacing();
    let (sp_pred, sp_y) = (surface_voxels(pred), surface_voxels(y));
    let mut a = directed(&sp_pred, &squared_distance_map(dims, sp, &sp_y), dims);
    let mut b = directed(&sp_y, &squared_distance_map(dims, sp, &sp_pred), dims);
    let mm = match pooling {
        HdPooling::Pooled => {
            a.append(&mut b);
            percentile(&mut a, 95.0)
        }
        HdPooling::MaxOfDirected => percentile(&mut a, 95.0).max(percentile(&mut b, 95.0)),
    };
    Ok(Some(mm / 10.0))
}

/// `100·|GTV|/|PTV|` by physical volume; `None` for an empty PTV.
pub fn gpr(gtv: &MaskVolume, ptv: &MaskVolume) -> Result<Option<f64>> {
    gtv.check_grid(ptv)?;
    if ptv.is_empty() {
        return Ok(None);
    }
    let vg = gtv.count() as f64 * gtv.voxel_volume();
    let vp = ptv.count() as f64 * ptv.voxel_volume();
    Ok(Some(100.0 * vg / vp))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub center: String,
    pub risk_group: RiskGroup,
    pub n_stage: NStage,
    pub dice: f64,
    pub iou: f64,
    /// cm; `None` when undefined.
    pub hd95: Option<f64>,
    /// Percent; `None` when undefined.
    pub gpr: Option<f64>,
}

/// All metrics for one prediction against its label and GTV.
pub fn case_metrics(
    case_id: &str,
    center: &str,
    risk_group: RiskGroup,
    n_stage: NStage,
    pred: &MaskVolume,
    y: &MaskVolume,
    gtv: &MaskVolume,
) -> Result<CaseMetrics> {
    let (dice, iou) = dice_iou(pred, y)?;
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        center: center.to_string(),
        risk_group,
        n_stage,
        dice,
        iou,
        hd95: hd95(pred, y)?,
        gpr: gpr(gtv, pred)?,
    })
}
