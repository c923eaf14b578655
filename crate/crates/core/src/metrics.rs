//! Evaluation: Dice coefficient, surface Hausdorff distance in millimeters,
//! and per-disc matching with mean ± sd aggregates.

use crate::error::{Error, Result};
use crate::pipeline::{connected_components, Connectivity};
use crate::util::fmt_sig;
use crate::volume::{Volume, VolumeKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Dice coefficient in percent: `2|X ∩ Y| / (|X| + |Y|) × 100`.
///
/// Two empty masks agree perfectly and score 100.
pub fn dice(x: &Volume, y: &Volume) -> Result<f64> {
    if x.dims() != y.dims() {
        return Err(Error::Dims(format!(
            "dice dims mismatch: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    let mut inter = 0usize;
    let mut nx = 0usize;
    let mut ny = 0usize;
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let (a, b) = (a != 0.0, b != 0.0);
        inter += (a && b) as usize;
        nx += a as usize;
        ny += b as usize;
    }
    if nx + ny == 0 {
        return Ok(100.0);
    }
    Ok(2.0 * inter as f64 / (nx + ny) as f64 * 100.0)
}

/// Centers of foreground voxels that have at least one six-neighbor that is
/// background or outside the grid, scaled to millimeters by the spacing.
pub fn surface_points(mask: &Volume) -> Vec<[f64; 3]> {
    let [_, nz, ny, nx] = mask.dims();
    let [sz, sy, sx] = mask.spacing();
    let (sz, sy, sx) = (sz as f64, sy as f64, sx as f64);
    let mut pts = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.at(0, z, y, x) == 0.0 {
                    continue;
                }
                let (zi, yi, xi) = (z as i64, y as i64, x as i64);
                let exposed = [
                    (zi - 1, yi, xi),
                    (zi + 1, yi, xi),
                    (zi, yi - 1, xi),
                    (zi, yi + 1, xi),
                    (zi, yi, xi - 1),
                    (zi, yi, xi + 1),
                ]
                .iter()
                .any(|&(a, b, c)| mask.at_or_zero(0, a, b, c) == 0.0);
                if exposed {
                    pts.push([z as f64 * sz, y as f64 * sy, x as f64 * sx]);
                }
            }
        }
    }
    pts
}

fn directed_hd_sq(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let point_min = |a: &[f64; 3]| {
        let mut best = f64::INFINITY;
        for b in to {
            let dz = a[0] - b[0];
            let dy = a[1] - b[1];
            let dx = a[2] - b[2];
            let d2 = dz * dz + dy * dy + dx * dx;
            if d2 < best {
                best = d2;
            }
        }
        best
    };
    // Max-reduction is order independent, so sharding across workers keeps
    // the result identical to the serial loop.
    if from.len() >= 512 {
        from.par_iter().map(point_min).reduce(|| 0.0, f64::max)
    } else {
        from.iter().map(point_min).fold(0.0, f64::max)
    }
}

/// Symmetric surface Hausdorff distance in millimeters.
pub fn hausdorff(a: &Volume, b: &Volume) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Dims(format!(
            "hausdorff dims mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if a.spacing() != b.spacing() {
        return Err(Error::Dims("hausdorff spacing mismatch".into()));
    }
    let sa = surface_points(a);
    let sb = surface_points(b);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::Eval(format!(
            "hausdorff undefined for empty mask (|A| surface = {}, |B| surface = {})",
            sa.len(),
            sb.len()
        )));
    }
    let d2 = directed_hd_sq(&sa, &sb).max(directed_hd_sq(&sb, &sa));
    Ok(d2.sqrt())
}

/// One evaluated ground-truth disc.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscEval {
    pub disc_index: usize,
    /// Ground-truth component centroid rounded to the nearest voxel (z, y, x).
    pub center: [i64; 3],
    pub dice_pct: f64,
    /// Absent when the disc went unmatched.
    pub hd_mm: Option<f64>,
    pub matched: bool,
}

/// Per-disc rows plus aggregates for one sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub sample_id: String,
    pub rows: Vec<DiscEval>,
    pub mean_dice: f64,
    pub sd_dice: f64,
    /// Aggregates over discs that carry an HD value; None when no disc does.
    pub mean_hd: Option<f64>,
    pub sd_hd: Option<f64>,
    /// Whole-volume Dice, reported alongside the per-disc average.
    pub global_dice: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    (mean, (ss / n).sqrt())
}

/// Match ground-truth discs to predicted components by nearest centroid and
/// score each pair within its dilated union bounding box.
///
/// Matching is greedy one-to-one in order of increasing centroid distance;
/// ground-truth discs left without a partner score Dice 0 with HD omitted.
pub fn evaluate_sample(pred: &Volume, gt: &Volume, sample_id: &str) -> Result<EvalReport> {
    if pred.dims() != gt.dims() {
        return Err(Error::Dims(format!(
            "evaluate dims mismatch: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let gt_cc = connected_components(gt, Connectivity::TwentySix)?;
    if gt_cc.count() == 0 {
        return Err(Error::Eval("ground truth has no foreground".into()));
    }
    let pred_cc = connected_components(pred, Connectivity::TwentySix)?;

    let [sz, sy, sx] = gt.spacing();
    let mm = [sz as f64, sy as f64, sx as f64];
    let cdist = |a: &[f64; 3], b: &[f64; 3]| {
        let dz = (a[0] - b[0]) * mm[0];
        let dy = (a[1] - b[1]) * mm[1];
        let dx = (a[2] - b[2]) * mm[2];
        (dz * dz + dy * dy + dx * dx).sqrt()
    };

    // Greedy one-to-one assignment by increasing centroid distance.
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for gi in 0..gt_cc.count() {
        for pi in 0..pred_cc.count() {
            pairs.push((cdist(&gt_cc.centroids[gi], &pred_cc.centroids[pi]), gi, pi));
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_match: Vec<Option<usize>> = vec![None; gt_cc.count()];
    let mut pred_used = vec![false; pred_cc.count()];
    for (_, gi, pi) in pairs {
        if gt_match[gi].is_none() && !pred_used[pi] {
            gt_match[gi] = Some(pi);
            pred_used[pi] = true;
        }
    }

    let [_, nz, ny, nx] = gt.dims();
    let mut rows = Vec::with_capacity(gt_cc.count());
    for gi in 0..gt_cc.count() {
        let c = gt_cc.centroids[gi];
        let center = [c[0].round() as i64, c[1].round() as i64, c[2].round() as i64];
        match gt_match[gi] {
            None => rows.push(DiscEval {
                disc_index: gi,
                center,
                dice_pct: 0.0,
                hd_mm: None,
                matched: false,
            }),
            Some(pi) => {
                // Union bounding box of both components, dilated by 2 voxels.
                let mut lo = [i64::MAX; 3];
                let mut hi = [i64::MIN; 3];
                let mut extend = |vox: &[[usize; 3]]| {
                    for p in vox {
                        for a in 0..3 {
                            lo[a] = lo[a].min(p[a] as i64);
                            hi[a] = hi[a].max(p[a] as i64);
                        }
                    }
                };
                extend(&gt_cc.voxels[gi]);
                extend(&pred_cc.voxels[pi]);
                let full = [nz as i64, ny as i64, nx as i64];
                let mut lo_c = [0usize; 3];
                let mut ext = [0usize; 3];
                for a in 0..3 {
                    let l = (lo[a] - 2).max(0);
                    let h = (hi[a] + 2).min(full[a] - 1);
                    lo_c[a] = l as usize;
                    ext[a] = (h - l + 1) as usize;
                }
                let sub = |vox: &[[usize; 3]]| -> Volume {
                    let mut data = vec![0.0f32; ext[0] * ext[1] * ext[2]];
                    for p in vox {
                        let z = p[0] - lo_c[0];
                        let y = p[1] - lo_c[1];
                        let x = p[2] - lo_c[2];
                        data[(z * ext[1] + y) * ext[2] + x] = 1.0;
                    }
                    Volume::new([1, ext[0], ext[1], ext[2]], gt.spacing(), VolumeKind::Label, data)
                        .expect("submask is binary")
                };
                let gt_sub = sub(&gt_cc.voxels[gi]);
                let pred_sub = sub(&pred_cc.voxels[pi]);
                let d = dice(&gt_sub, &pred_sub)?;
                let hd = hausdorff(&gt_sub, &pred_sub)?;
                rows.push(DiscEval {
                    disc_index: gi,
                    center,
                    dice_pct: d,
                    hd_mm: Some(hd),
                    matched: true,
                });
            }
        }
    }

    let dices: Vec<f64> = rows.iter().map(|r| r.dice_pct).collect();
    let (mean_dice, sd_dice) = mean_sd(&dices);
    let hds: Vec<f64> = rows.iter().filter_map(|r| r.hd_mm).collect();
    let (mean_hd, sd_hd) = if hds.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_sd(&hds);
        (Some(m), Some(s))
    };
    Ok(EvalReport {
        sample_id: sample_id.to_string(),
        rows,
        mean_dice,
        sd_dice,
        mean_hd,
        sd_hd,
        global_dice: dice(pred, gt)?,
    })
}

impl EvalReport {
    /// CSV rows `sample_id,disc_index,dice_pct,hd_mm`; HD empty when omitted.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,disc_index,dice_pct,hd_mm\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.sample_id,
                r.disc_index,
                fmt_sig(r.dice_pct, 6),
                r.hd_mm.map(|h| fmt_sig(h, 6)).unwrap_or_default(),
            ));
        }
        out
    }

    /// Parse rows written by [`EvalReport::to_csv`] (aggregates recomputed).
    pub fn rows_from_csv(text: &str) -> Result<Vec<(String, usize, f64, Option<f64>)>> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty csv".into()))?;
        if header != "sample_id,disc_index,dice_pct,hd_mm" {
            return Err(Error::Format(format!("unexpected csv header: {header}")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::Format(format!("csv row {i} has {} fields", parts.len())));
            }
            let idx: usize = parts[1]
                .parse()
                .map_err(|_| Error::Format(format!("bad disc_index in row {i}")))?;
            let d: f64 = parts[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad dice_pct in row {i}")))?;
            let hd = if parts[3].is_empty() {
                None
            } else {
                Some(
                    parts[3]
                        .parse()
                        .map_err(|_| Error::Format(format!("bad hd_mm in row {i}")))?,
                )
            };
            rows.push((parts[0].to_string(), idx, d, hd));
        }
        Ok(rows)
    }

    /// Aggregate block as pretty JSON.
    pub fn aggregate_json(&self) -> String {
        #[derive(Serialize)]
        struct Agg<'a> {
            sample_id: &'a str,
            n_discs: usize,
            n_unmatched: usize,
            mean_dice: f64,
            sd_dice: f64,
            mean_hd: Option<f64>,
            sd_hd: Option<f64>,
            global_dice: f64,
        }
        let agg = Agg {
            sample_id: &self.sample_id,
            n_discs: self.rows.len(),
            n_unmatched: self.rows.iter().filter(|r| !r.matched).count(),
            mean_dice: self.mean_dice,
            sd_dice: self.sd_dice,
            mean_hd: self.mean_hd,
            sd_hd: self.sd_hd,
            global_dice: self.global_dice,
        };
        serde_json::to_string_pretty(&agg).expect("aggregate serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], fg: &[[usize; 3]]) -> Volume {
        mask_sp(dims, fg, [1.0, 1.0, 1.0])
    }

    fn mask_sp(dims: [usize; 3], fg: &[[usize; 3]], spacing: [f32; 3]) -> Volume {
        let mut data = vec![0.0f32; dims[0] * dims[1] * dims[2]];
        for p in fg {
            data[(p[0] * dims[1] + p[1]) * dims[2] + p[2]] = 1.0;
        }
        Volume::new([1, dims[0], dims[1], dims[2]], spacing, VolumeKind::Label, data).unwrap()
    }

    #[test]
    fn dice_identity_disjoint_and_half() {
        let a = mask([2, 2, 2], &[[0, 0, 0], [0, 0, 1]]);
        let b = mask([2, 2, 2], &[[1, 1, 0], [1, 1, 1]]);
        assert_eq!(dice(&a, &a).unwrap(), 100.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        // |X| = |Y| = 8, overlap 4 -> 50.0
        let x = mask([4, 4, 4], &(0..8).map(|i| [0, i / 4, i % 4]).collect::<Vec<_>>());
        let y = mask([4, 4, 4], &(4..12).map(|i| [0, i / 4, i % 4]).collect::<Vec<_>>());
        assert_eq!(dice(&x, &y).unwrap(), 50.0);
        // Both empty agree fully.
        let e = mask([2, 2, 2], &[]);
        assert_eq!(dice(&e, &e).unwrap(), 100.0);
    }

    #[test]
    fn dice_is_symmetric() {
        let a = mask([3, 3, 3], &[[0, 0, 0], [1, 1, 1], [2, 2, 2]]);
        let b = mask([3, 3, 3], &[[1, 1, 1], [1, 1, 2]]);
        assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
    }

    #[test]
    fn surface_point_counts() {
        // Single voxel: one point.
        assert_eq!(surface_points(&mask([3, 3, 3], &[[1, 1, 1]])).len(), 1);
        // 3^3 cube: all but the center voxel, 26 points.
        let cube: Vec<[usize; 3]> = (0..27).map(|i| [i / 9, (i / 3) % 3, i % 3]).collect();
        assert_eq!(surface_points(&mask([3, 3, 3], &cube)).len(), 26);
        // Solid 5^3 cube inside a larger grid: 5^3 - 3^3 = 98 points.
        let mut fg = Vec::new();
        for z in 1..6 {
            for y in 1..6 {
                for x in 1..6 {
                    fg.push([z, y, x]);
                }
            }
        }
        assert_eq!(surface_points(&mask([7, 7, 7], &fg)).len(), 98);
    }

    #[test]
    fn hausdorff_hand_geometry() {
        let a = mask_sp([3, 3, 3], &[[1, 1, 1]], [2.0, 1.25, 1.25]);
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        // Two single voxels one x-step apart under spacing (2, 1.25, 1.25).
        let b = mask_sp([3, 3, 3], &[[1, 1, 2]], [2.0, 1.25, 1.25]);
        assert_eq!(hausdorff(&a, &b).unwrap(), 1.25);
    }

    #[test]
    fn hausdorff_cube_shift_matches_brute_force() {
        let mut fg = Vec::new();
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    fg.push([z, y, x]);
                }
            }
        }
        let shifted: Vec<[usize; 3]> = fg.iter().map(|p| [p[0], p[1] + 2, p[2]]).collect();
        let a = mask_sp([6, 7, 6], &fg, [1.25, 1.25, 1.25]);
        let b = mask_sp([6, 7, 6], &shifted, [1.25, 1.25, 1.25]);
        let hd = hausdorff(&a, &b).unwrap();
        assert_eq!(hd, 2.5);
        // Brute force over all surface point pairs.
        let sa = surface_points(&a);
        let sb = surface_points(&b);
        let directed = |from: &Vec<[f64; 3]>, to: &Vec<[f64; 3]>| {
            from.iter()
                .map(|p| {
                    to.iter()
                        .map(|q| {
                            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                                .sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        assert_eq!(hd, directed(&sa, &sb).max(directed(&sb, &sa)));
    }

    #[test]
    fn hausdorff_empty_mask_is_an_error() {
        let a = mask([2, 2, 2], &[[0, 0, 0]]);
        let e = mask([2, 2, 2], &[]);
        assert!(matches!(hausdorff(&a, &e), Err(Error::Eval(_))));
    }

    #[test]
    fn evaluate_perfect_prediction() {
        let mut fg = Vec::new();
        for k in 0..3 {
            let y = 1 + k * 4;
            for dz in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        fg.push([2 + dz, y + dy, 2 + dx]);
                    }
                }
            }
        }
        let gt = mask([6, 12, 6], &fg);
        let rep = evaluate_sample(&gt, &gt, "s").unwrap();
        assert_eq!(rep.rows.len(), 3);
        for r in &rep.rows {
            assert_eq!(r.dice_pct, 100.0);
            assert_eq!(r.hd_mm, Some(0.0));
            assert!(r.matched);
        }
        assert_eq!(rep.mean_dice, 100.0);
        assert_eq!(rep.sd_dice, 0.0);
        assert_eq!(rep.mean_hd, Some(0.0));
        assert_eq!(rep.global_dice, 100.0);
    }

    #[test]
    fn one_missing_disc_pulls_the_mean_down() {
        // Three gt blobs, prediction misses the last one entirely.
        let blob = |y0: usize| -> Vec<[usize; 3]> {
            (0..4).map(|i| [2, y0 + i / 2, 2 + i % 2]).collect()
        };
        let mut gt_fg = blob(1);
        gt_fg.extend(blob(5));
        gt_fg.extend(blob(9));
        let mut pred_fg = blob(1);
        pred_fg.extend(blob(5));
        let gt = mask([5, 12, 5], &gt_fg);
        let pred = mask([5, 12, 5], &pred_fg);
        let rep = evaluate_sample(&pred, &gt, "s").unwrap();
        assert_eq!(rep.rows.len(), 3);
        assert!(!rep.rows[2].matched);
        assert_eq!(rep.rows[2].dice_pct, 0.0);
        assert_eq!(rep.rows[2].hd_mm, None);
        // Means: (100 + 100 + 0) / 3.
        assert!((rep.mean_dice - 200.0 / 3.0).abs() < 1e-12);
        // HD aggregates only cover matched discs.
        assert_eq!(rep.mean_hd, Some(0.0));
    }

    #[test]
    fn empty_gt_is_an_eval_error() {
        let e = mask([2, 2, 2], &[]);
        assert!(matches!(evaluate_sample(&e, &e, "s"), Err(Error::Eval(_))));
    }

    #[test]
    fn csv_roundtrip() {
        let blob = |y0: usize| -> Vec<[usize; 3]> {
            (0..4).map(|i| [2, y0 + i / 2, 2 + i % 2]).collect()
        };
        let mut gt_fg = blob(1);
        gt_fg.extend(blob(6));
        let gt = mask([5, 12, 5], &gt_fg);
        let pred = mask([5, 12, 5], &blob(1));
        let rep = evaluate_sample(&pred, &gt, "sample7").unwrap();
        let rows = EvalReport::rows_from_csv(&rep.to_csv()).unwrap();
        assert_eq!(rows.len(), rep.rows.len());
        for (row, orig) in rows.iter().zip(&rep.rows) {
            assert_eq!(row.0, "sample7");
            assert_eq!(row.1, orig.disc_index);
            assert!((row.2 - orig.dice_pct).abs() < 1e-3);
            assert_eq!(row.3.is_some(), orig.hd_mm.is_some());
        }
    }

    #[test]
    fn translation_shifts_hausdorff_exactly() {
        // hd(A, A+t) == |t| * spacing for axis-aligned shifts, exactly.
        let blob: Vec<[usize; 3]> = vec![[2, 2, 2], [2, 2, 3], [2, 3, 2], [3, 2, 2]];
        for (t, axis) in [(1usize, 1usize), (2, 1), (3, 2), (2, 0)] {
            let shifted: Vec<[usize; 3]> = blob
                .iter()
                .map(|p| {
                    let mut q = *p;
                    q[axis] += t;
                    q
                })
                .collect();
            let spacing = [2.0f32, 1.25, 0.5];
            let a = mask_sp([8, 8, 8], &blob, spacing);
            let b = mask_sp([8, 8, 8], &shifted, spacing);
            let expect = t as f64 * spacing[axis] as f64;
            assert_eq!(hausdorff(&a, &b).unwrap(), expect, "t={t} axis={axis}");
        }
    }
}
