//! Foreground/background intensity statistics and absolute Weber contrast
//! per modality.

use crate::error::{Error, Result};
use crate::util::fmt_sig;
use crate::volume::{MultiModalSample, Volume, VolumeKind};
use serde::{Deserialize, Serialize};

/// Mean and population sd of a volume over foreground and background voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub fg_mean: f64,
    pub fg_sd: f64,
    pub bg_mean: f64,
    pub bg_sd: f64,
}

/// Intensity statistics over a binary mask: foreground is mask == 1,
/// background is mask == 0. Standard deviations are population sds.
pub fn region_stats(v: &Volume, mask: &Volume) -> Result<RegionStats> {
    if v.dims() != mask.dims() {
        return Err(Error::Dims(format!(
            "volume dims {:?} != mask dims {:?}",
            v.dims(),
            mask.dims()
        )));
    }
    if mask.kind() != VolumeKind::Label {
        return Err(Error::Contract("mask must be a label-binary volume".into()));
    }
    let mut acc = [(0usize, 0f64); 2]; // (count, sum) for bg, fg
    for (&x, &m) in v.data().iter().zip(mask.data()) {
        let side = &mut acc[m as usize];
        side.0 += 1;
        side.1 += x as f64;
    }
    let (bg_n, bg_sum) = acc[0];
    let (fg_n, fg_sum) = acc[1];
    if fg_n == 0 {
        return Err(Error::Stats("empty foreground".into()));
    }
    if bg_n == 0 {
        return Err(Error::Stats("empty background".into()));
    }
    let fg_mean = fg_sum / fg_n as f64;
    let bg_mean = bg_sum / bg_n as f64;
    let mut ss = [0f64; 2];
    for (&x, &m) in v.data().iter().zip(mask.data()) {
        let mean = if m == 0.0 { bg_mean } else { fg_mean };
        let d = x as f64 - mean;
        ss[m as usize] += d * d;
    }
    Ok(RegionStats {
        fg_mean,
        fg_sd: (ss[1] / fg_n as f64).sqrt(),
        bg_mean,
        bg_sd: (ss[0] / bg_n as f64).sqrt(),
    })
}

/// Absolute Weber contrast `C = |I - Ib| / Ib` of a foreground mean against
/// a background mean. `Ib` must be positive.
pub fn weber_contrast(fg_mean: f64, bg_mean: f64) -> Result<f64> {
    if bg_mean <= 0.0 {
        return Err(Error::Domain(format!(
            "weber contrast needs background mean > 0, got {bg_mean}"
        )));
    }
    Ok((fg_mean - bg_mean).abs() / bg_mean)
}

/// One report row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastRow {
    pub modality: String,
    pub fg_mean: f64,
    pub fg_sd: f64,
    pub bg_mean: f64,
    pub bg_sd: f64,
    pub weber: f64,
}

/// Per-modality contrast report in canonical modality order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastReport {
    pub sample_id: String,
    pub rows: Vec<ContrastRow>,
}

/// Compute region statistics and Weber contrast for every present modality,
/// ordered fat, inn, opp, wat.
pub fn contrast_report(s: &MultiModalSample) -> Result<ContrastReport> {
    let mut rows = Vec::new();
    for (m, v) in s.modalities() {
        let st = region_stats(v, s.label())?;
        let weber = weber_contrast(st.fg_mean, st.bg_mean)?;
        rows.push(ContrastRow {
            modality: m.to_string(),
            fg_mean: st.fg_mean,
            fg_sd: st.fg_sd,
            bg_mean: st.bg_mean,
            bg_sd: st.bg_sd,
            weber,
        });
    }
    Ok(ContrastReport { sample_id: s.sample_id.clone(), rows })
}

impl ContrastReport {
    /// CSV with the fixed header and 6-significant-digit values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("modality,fg_mean,fg_sd,bg_mean,bg_sd,weber\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.modality,
                fmt_sig(r.fg_mean, 6),
                fmt_sig(r.fg_sd, 6),
                fmt_sig(r.bg_mean, 6),
                fmt_sig(r.bg_sd, 6),
                fmt_sig(r.weber, 6),
            ));
        }
        out
    }

    pub fn weber_of(&self, modality: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.modality == modality).map(|r| r.weber)
    }
}
