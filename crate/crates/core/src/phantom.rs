//! Deterministic synthetic Dixon spine phantom: labeled multimodal samples
//! with realistic contrast ordering, so every training and evaluation path
//! runs at desk scale.
//!
//! Discs are ellipsoids centered on a sinusoidal sagittal curve whose phase
//! locks consecutive discs to opposite extremes, keeping pairwise center
//! separation at or above the crop-box diagonal even inside small grids.
//! Water and fat fields are region means plus Gaussian noise; the in-phase
//! channel is exactly `wat + fat` and the opposed-phase channel exactly
//! `|wat - fat|`, evaluated in f32 so the Dixon identities hold voxelwise.

use crate::error::{Error, Result};
use crate::util::derive_seed;
use crate::volume::{Modality, MultiModalSample, Volume, VolumeKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Minimum pairwise center separation the generator enforces, in voxels.
pub const MIN_CENTER_SEPARATION: f64 = 36.0;

/// Phantom design. Intensity means mirror the published per-modality
/// foreground/background statistics for water and fat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// Volume spatial dims (nz, ny, nx).
    pub dims: [usize; 3],
    /// Voxel spacing in millimeters (sz, sy, sx).
    pub spacing: [f32; 3],
    pub disc_count: usize,
    /// Ellipsoid semi-axes in voxels (z, y, x).
    pub semi_axes: [f64; 3],
    /// Sagittal curve amplitude in voxels.
    pub curve_amplitude: f64,
    pub wat_fg: f64,
    pub wat_bg: f64,
    pub fat_fg: f64,
    pub fat_bg: f64,
    /// Gaussian noise sd as a fraction of each region mean.
    pub noise_frac: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [36, 128, 128],
            spacing: [1.25, 1.25, 1.25],
            disc_count: 7,
            semi_axes: [8.0, 5.0, 12.0],
            curve_amplitude: 16.0,
            wat_fg: 163.4,
            wat_bg: 67.9,
            fat_fg: 15.9,
            fat_bg: 35.2,
            noise_frac: 0.2,
            seed: 0,
        }
    }
}

/// Disc centers along the spine: evenly spaced in y, zig-zagging in x with
/// the curve phase locked so consecutive discs sit at opposite extremes.
fn disc_centers(cfg: &PhantomConfig) -> Result<Vec<[f64; 3]>> {
    let [nz, ny, nx] = cfg.dims;
    let n = cfg.disc_count;
    if n == 0 {
        return Err(Error::Config("disc count must be positive".into()));
    }
    let margin_y = cfg.semi_axes[1] + 4.0;
    let span = ny as f64 - 1.0 - 2.0 * margin_y;
    let dy = if n > 1 { span / (n as f64 - 1.0) } else { 0.0 };
    let cx = (nx as f64 - 1.0) / 2.0;
    let cz = (nz as f64 - 1.0) / 2.0;
    let mut centers = Vec::with_capacity(n);
    for k in 0..n {
        let y = margin_y + k as f64 * dy;
        // Phase chosen so sin(...) = +-1 exactly at each disc.
        let x = cx + cfg.curve_amplitude * (std::f64::consts::PI * (k as f64 + 0.5)).sin();
        centers.push([cz, y, x]);
    }
    // Fit check: every disc inside the grid.
    for (k, c) in centers.iter().enumerate() {
        for a in 0..3 {
            let lo = c[a] - cfg.semi_axes[a];
            let hi = c[a] + cfg.semi_axes[a];
            if lo < 0.0 || hi > cfg.dims[a] as f64 - 1.0 {
                return Err(Error::Config(format!(
                    "disc {k} with semi-axes {:?} does not fit dims {:?} on axis {a}",
                    cfg.semi_axes, cfg.dims
                )));
            }
        }
    }
    // Separation check.
    for i in 0..n {
        for j in i + 1..n {
            let d = ((centers[i][0] - centers[j][0]).powi(2)
                + (centers[i][1] - centers[j][1]).powi(2)
                + (centers[i][2] - centers[j][2]).powi(2))
            .sqrt();
            if d < MIN_CENTER_SEPARATION {
                return Err(Error::Config(format!(
                    "discs {i} and {j} are {d:.1} voxels apart, need >= {MIN_CENTER_SEPARATION}"
                )));
            }
        }
    }
    Ok(centers)
}

/// Generate one labeled multimodal sample. Deterministic per config seed.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<MultiModalSample> {
    if cfg.wat_fg < 0.0 || cfg.wat_bg < 0.0 || cfg.fat_fg < 0.0 || cfg.fat_bg < 0.0 {
        return Err(Error::Config("intensity means must be nonnegative".into()));
    }
    let centers = disc_centers(cfg)?;
    let [nz, ny, nx] = cfg.dims;
    let n = nz * ny * nx;
    let dims4 = [1usize, nz, ny, nx];

    let mut label = vec![0.0f32; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [z as f64, y as f64, x as f64];
                let inside = centers.iter().any(|c| {
                    let dz = (p[0] - c[0]) / cfg.semi_axes[0];
                    let dy = (p[1] - c[1]) / cfg.semi_axes[1];
                    let dx = (p[2] - c[2]) / cfg.semi_axes[2];
                    dz * dz + dy * dy + dx * dx <= 1.0
                });
                if inside {
                    label[(z * ny + y) * nx + x] = 1.0;
                }
            }
        }
    }

    let noisy_field = |fg: f64, bg: f64, stream: u64| -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        label
            .iter()
            .map(|&l| {
                let mean = if l != 0.0 { fg } else { bg };
                let v = mean + cfg.noise_frac * mean * normal.sample(&mut rng);
                v.max(0.0) as f32
            })
            .collect()
    };
    let wat = noisy_field(cfg.wat_fg, cfg.wat_bg, 1);
    let fat = noisy_field(cfg.fat_fg, cfg.fat_bg, 2);
    // Dixon identities in f32 arithmetic, exact by construction.
    let inn: Vec<f32> = wat.iter().zip(&fat).map(|(&w, &f)| w + f).collect();
    let opp: Vec<f32> = wat.iter().zip(&fat).map(|(&w, &f)| (w - f).abs()).collect();

    let vol = |data: Vec<f32>| Volume::new(dims4, cfg.spacing, VolumeKind::Intensity, data);
    let mut modalities = BTreeMap::new();
    modalities.insert(Modality::Wat, vol(wat)?);
    modalities.insert(Modality::Fat, vol(fat)?);
    modalities.insert(Modality::Inn, vol(inn)?);
    modalities.insert(Modality::Opp, vol(opp)?);
    let label = Volume::new(dims4, cfg.spacing, VolumeKind::Label, label)?;
    MultiModalSample::new(format!("phantom-{:04x}", cfg.seed & 0xffff), modalities, label)
}

/// Generate a dataset of `n` samples with per-sample seeds and small jitter
/// of intensities and curve amplitude (jitter never shrinks separations).
pub fn generate_dataset(n: usize, base: &PhantomConfig, seed: u64) -> Result<Vec<MultiModalSample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let s = derive_seed(seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, 0x717));
        let jitter = |v: f64, frac: f64, rng: &mut ChaCha8Rng| v * (1.0 + rng.gen_range(-frac..frac));
        let cfg = PhantomConfig {
            seed: s,
            curve_amplitude: base.curve_amplitude * (1.0 + rng.gen_range(0.0..0.06)),
            wat_fg: jitter(base.wat_fg, 0.05, &mut rng),
            wat_bg: jitter(base.wat_bg, 0.05, &mut rng),
            fat_fg: jitter(base.fat_fg, 0.05, &mut rng),
            fat_bg: jitter(base.fat_bg, 0.05, &mut rng),
            ..base.clone()
        };
        let mut sample = generate_phantom(&cfg)?;
        sample.sample_id = format!("phantom-{i:02}");
        out.push(sample);
    }
    Ok(out)
}

/// Deterministic train/validation split: the last two samples validate,
/// mirroring the 6-train / 2-validation protocol.
pub fn default_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    if n <= 2 {
        return ((0..n.saturating_sub(1)).collect(), (n.saturating_sub(1)..n).collect());
    }
    ((0..n - 2).collect(), (n - 2..n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrast::contrast_report;
    use crate::pipeline::{connected_components, Connectivity};

    #[test]
    fn default_phantom_has_exactly_seven_components() {
        let s = generate_phantom(&PhantomConfig::default()).unwrap();
        let cc = connected_components(s.label(), Connectivity::TwentySix).unwrap();
        assert_eq!(cc.count(), 7);
        // Every disc fits inside the crop box extent (25, 35, 35).
        for vox in &cc.voxels {
            let mut lo = [usize::MAX; 3];
            let mut hi = [0usize; 3];
            for p in vox {
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
            assert!(hi[0] - lo[0] < 25 && hi[1] - lo[1] < 35 && hi[2] - lo[2] < 35);
        }
    }

    #[test]
    fn dixon_identities_hold_exactly() {
        let s = generate_phantom(&PhantomConfig::default()).unwrap();
        let wat = s.modality(Modality::Wat).unwrap().data();
        let fat = s.modality(Modality::Fat).unwrap().data();
        let inn = s.modality(Modality::Inn).unwrap().data();
        let opp = s.modality(Modality::Opp).unwrap().data();
        for i in 0..wat.len() {
            assert_eq!(inn[i], wat[i] + fat[i]);
            assert_eq!(opp[i], (wat[i] - fat[i]).abs());
        }
    }

    #[test]
    fn weber_ranking_matches_published_ordering() {
        let s = generate_phantom(&PhantomConfig::default()).unwrap();
        let rep = contrast_report(&s).unwrap();
        let w = |m: &str| rep.weber_of(m).unwrap();
        assert!(w("opp") > w("wat"), "opp {} vs wat {}", w("opp"), w("wat"));
        assert!(w("wat") > w("inn"), "wat {} vs inn {}", w("wat"), w("inn"));
        assert!(w("inn") > w("fat"), "inn {} vs fat {}", w("inn"), w("fat"));
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let cfg = PhantomConfig::default();
        let a = generate_phantom(&cfg).unwrap();
        let b = generate_phantom(&cfg).unwrap();
        assert_eq!(a.modality(Modality::Wat).unwrap().data(), b.modality(Modality::Wat).unwrap().data());
        let c = generate_phantom(&PhantomConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.modality(Modality::Wat).unwrap().data(), c.modality(Modality::Wat).unwrap().data());
    }

    #[test]
    fn impossible_configs_are_rejected() {
        // Too many discs for the grid: separation collapses.
        let cfg = PhantomConfig { disc_count: 12, ..PhantomConfig::default() };
        assert!(matches!(generate_phantom(&cfg), Err(Error::Config(_))));
        // Discs too large for the z extent.
        let cfg = PhantomConfig { semi_axes: [20.0, 5.0, 12.0], ..PhantomConfig::default() };
        assert!(matches!(generate_phantom(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_yields_distinct_reproducible_samples() {
        let base = PhantomConfig::default();
        let a = generate_dataset(8, &base, 11).unwrap();
        assert_eq!(a.len(), 8);
        let b = generate_dataset(8, &base, 11).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.modality(Modality::Wat).unwrap().data(), y.modality(Modality::Wat).unwrap().data());
        }
        assert_ne!(
            a[0].modality(Modality::Wat).unwrap().data(),
            a[1].modality(Modality::Wat).unwrap().data()
        );
        let (train, val) = default_split(8);
        assert_eq!(train, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(val, vec![6, 7]);
    }
}
