//! Affine and elastic data augmentation, applied with identical parameters
//! to every modality (cubic interpolation) and the label (nearest neighbor).
//!
//! Conventions: geometric parameters describe the forward motion of the
//! image content; sampling is inverse-mapped. Samples outside the grid read
//! zero. Rotation is about the volume center `(n - 1) / 2` per axis.

use crate::error::{Error, Result};
use crate::util::derive_seed;
use crate::volume::{MultiModalSample, Volume, VolumeKind};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Interpolation used when resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    /// Separable Catmull-Rom cubic (tricubic in 3D, bicubic in 2D).
    Cubic,
    /// Nearest neighbor; the only choice valid for label volumes.
    Nearest,
}

/// A per-axis voxel displacement field on the target grid.
#[derive(Debug, Clone)]
pub struct DisplacementField {
    pub dims: [usize; 3],
    /// Displacement components in voxel units, indexed like the grid.
    pub dz: Vec<f64>,
    pub dy: Vec<f64>,
    pub dx: Vec<f64>,
    pub delta: f64,
    pub alpha: f64,
}

/// Separable Gaussian blur along one axis, kernel truncated at three
/// standard deviations and renormalized to unit sum; the grid reads zero
/// outside its bounds.
fn blur_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let [nz, ny, nx] = dims;
    let radius = (kernel.len() - 1) / 2;
    let mut out = vec![0.0f64; data.len()];
    let idx = |z: usize, y: usize, x: usize| (z * ny + y) * nx + x;
    let n_axis = dims[axis] as i64;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let pos = [z as i64, y as i64, x as i64];
                let mut acc = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let o = pos[axis] + k as i64 - radius as i64;
                    if o < 0 || o >= n_axis {
                        continue;
                    }
                    let mut q = pos;
                    q[axis] = o;
                    acc += w * data[idx(q[0] as usize, q[1] as usize, q[2] as usize)];
                }
                out[idx(z, y, x)] = acc;
            }
        }
    }
    out
}

fn gaussian_kernel(sd: f64) -> Vec<f64> {
    let radius = (3.0 * sd).floor() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sd * sd)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Build a random smooth displacement field: i.i.d. uniform(-1, 1) raw
/// values per axis, blurred by a Gaussian of standard deviation `delta`
/// voxels, then scaled by `alpha`. Deterministic per seed.
pub fn elastic_field(dims: [usize; 3], delta: f64, alpha: f64, seed: u64) -> Result<DisplacementField> {
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("elastic delta must be positive, got {delta}")));
    }
    if alpha < 0.0 {
        return Err(Error::Domain(format!("elastic alpha must be nonnegative, got {alpha}")));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Dims("elastic field dims must be positive".into()));
    }
    let n = dims[0] * dims[1] * dims[2];
    let kernel = gaussian_kernel(delta);
    let mut components = Vec::with_capacity(3);
    for axis in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, axis));
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut f = raw;
        for blur_dim in 0..3 {
            f = blur_axis(&f, dims, blur_dim, &kernel);
        }
        for v in &mut f {
            *v *= alpha;
        }
        components.push(f);
    }
    let dx = components.pop().unwrap();
    let dy = components.pop().unwrap();
    let dz = components.pop().unwrap();
    Ok(DisplacementField { dims, dz, dy, dx, delta, alpha })
}

fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ]
}

fn sample_cubic(v: &Volume, z: f64, y: f64, x: f64) -> f64 {
    let (bz, by, bx) = (z.floor(), y.floor(), x.floor());
    let wz = catmull_rom_weights(z - bz);
    let wy = catmull_rom_weights(y - by);
    let wx = catmull_rom_weights(x - bx);
    let (bz, by, bx) = (bz as i64, by as i64, bx as i64);
    let mut acc = 0.0;
    for (iz, wzv) in wz.iter().enumerate() {
        if *wzv == 0.0 {
            continue;
        }
        for (iy, wyv) in wy.iter().enumerate() {
            if *wyv == 0.0 {
                continue;
            }
            let wzy = wzv * wyv;
            for (ix, wxv) in wx.iter().enumerate() {
                if *wxv == 0.0 {
                    continue;
                }
                let s = v.at_or_zero(0, bz + iz as i64 - 1, by + iy as i64 - 1, bx + ix as i64 - 1);
                acc += wzy * wxv * s as f64;
            }
        }
    }
    acc
}

fn sample_nearest(v: &Volume, z: f64, y: f64, x: f64) -> f64 {
    v.at_or_zero(0, z.round() as i64, y.round() as i64, x.round() as i64) as f64
}

fn check_interpolation(v: &Volume, interpolation: Interpolation) -> Result<()> {
    if v.kind() == VolumeKind::Label && interpolation == Interpolation::Cubic {
        return Err(Error::Contract(
            "label-binary volumes must be resampled with nearest interpolation".into(),
        ));
    }
    if v.dims()[0] != 1 {
        return Err(Error::Contract("resampling expects single-channel volumes".into()));
    }
    Ok(())
}

fn resample<F>(v: &Volume, interpolation: Interpolation, src_of: F) -> Result<Volume>
where
    F: Fn(usize, usize, usize) -> [f64; 3] + Sync,
{
    check_interpolation(v, interpolation)?;
    let [_, nz, ny, nx] = v.dims();
    let rows: Vec<Vec<f32>> = (0..nz * ny)
        .into_par_iter()
        .map(|zy| {
            let z = zy / ny;
            let y = zy % ny;
            (0..nx)
                .map(|x| {
                    let s = src_of(z, y, x);
                    let val = match interpolation {
                        Interpolation::Cubic => sample_cubic(v, s[0], s[1], s[2]),
                        Interpolation::Nearest => sample_nearest(v, s[0], s[1], s[2]),
                    };
                    val as f32
                })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(v.len());
    for row in rows {
        data.extend_from_slice(&row);
    }
    Volume::new(v.dims(), v.spacing(), v.kind(), data)
}

/// Warp a volume by a displacement field: `out(p) = in(p + d(p))`.
pub fn apply_deformation(
    v: &Volume,
    field: &DisplacementField,
    interpolation: Interpolation,
) -> Result<Volume> {
    let [_, nz, ny, nx] = v.dims();
    if field.dims != [nz, ny, nx] {
        return Err(Error::Dims(format!(
            "field dims {:?} != volume spatial dims {:?}",
            field.dims,
            [nz, ny, nx]
        )));
    }
    let idx = |z: usize, y: usize, x: usize| (z * ny + y) * nx + x;
    resample(v, interpolation, |z, y, x| {
        let i = idx(z, y, x);
        [z as f64 + field.dz[i], y as f64 + field.dy[i], x as f64 + field.dx[i]]
    })
}

/// Affine parameters: the forward motion of the content.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    /// Voxel translation (z, y, x).
    pub translate: [f64; 3],
    /// Rotation angles in degrees about the z, y, and x axes.
    pub rotate_deg: [f64; 3],
    /// Axis flips, applied as exact reversals without interpolation.
    pub flip: [bool; 3],
    /// Isotropic scale factor about the volume center.
    pub scale: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self { translate: [0.0; 3], rotate_deg: [0.0; 3], flip: [false; 3], scale: 1.0 }
    }

    pub fn translate(t: [f64; 3]) -> Self {
        Self { translate: t, ..Self::identity() }
    }

    pub fn rotate(deg: [f64; 3]) -> Self {
        Self { rotate_deg: deg, ..Self::identity() }
    }

    pub fn flip(axes: [bool; 3]) -> Self {
        Self { flip: axes, ..Self::identity() }
    }

    pub fn scale(s: f64) -> Self {
        Self { scale: s, ..Self::identity() }
    }
}

fn flip_volume(v: &Volume, axes: [bool; 3]) -> Volume {
    let [_, nz, ny, nx] = v.dims();
    let mut data = Vec::with_capacity(v.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let sz = if axes[0] { nz - 1 - z } else { z };
                let sy = if axes[1] { ny - 1 - y } else { y };
                let sx = if axes[2] { nx - 1 - x } else { x };
                data.push(v.at(0, sz, sy, sx));
            }
        }
    }
    Volume::new(v.dims(), v.spacing(), v.kind(), data).expect("permutation preserves invariants")
}

/// 3x3 matrix times (z, y, x) column vector.
fn mat_mul(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_product(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                out[i][j] += a[i][k] * bk[j];
            }
        }
    }
    out
}

/// Inverse rotation matrix for forward rotation Rz(tz) * Ry(ty) * Rx(tx),
/// in (z, y, x) coordinates.
fn inverse_rotation(rotate_deg: [f64; 3]) -> [[f64; 3]; 3] {
    let rad: Vec<f64> = rotate_deg.iter().map(|d| d.to_radians()).collect();
    let (cz, sz) = (rad[0].cos(), rad[0].sin());
    let (cy, sy) = (rad[1].cos(), rad[1].sin());
    let (cx, sx) = (rad[2].cos(), rad[2].sin());
    // Inverse = Rx(-tx) * Ry(-ty) * Rz(-tz).
    let rz = [[1.0, 0.0, 0.0], [0.0, cz, sz], [0.0, -sz, cz]]; // rotates (y, x)
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]]; // rotates (z, x)
    let rx = [[cx, sx, 0.0], [-sx, cx, 0.0], [0.0, 0.0, 1.0]]; // rotates (z, y)
    mat_product(&rx, &mat_product(&ry, &rz))
}

/// Apply an affine transform: flips as exact axis reversals, then one
/// inverse-mapped resampling pass for scale, rotation (about the volume
/// center), and translation. Identity parameters reproduce the input
/// bit-exactly.
pub fn apply_affine(v: &Volume, params: &AffineParams, interpolation: Interpolation) -> Result<Volume> {
    check_interpolation(v, interpolation)?;
    if !(params.scale > 0.0) {
        return Err(Error::Domain(format!("scale must be positive, got {}", params.scale)));
    }
    let flipped = if params.flip.iter().any(|&f| f) { flip_volume(v, params.flip) } else { v.clone() };
    let [_, nz, ny, nx] = v.dims();
    let center = [(nz as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0, (nx as f64 - 1.0) / 2.0];
    let rot = inverse_rotation(params.rotate_deg);
    let inv_scale = 1.0 / params.scale;
    let t = params.translate;
    resample(&flipped, interpolation, move |z, y, x| {
        let rel = [
            z as f64 - center[0] - t[0],
            y as f64 - center[1] - t[1],
            x as f64 - center[2] - t[2],
        ];
        let r = mat_mul(&rot, rel);
        [
            r[0] * inv_scale + center[0],
            r[1] * inv_scale + center[1],
            r[2] * inv_scale + center[2],
        ]
    })
}

/// One parameterized augmentation operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    Translate { voxels: [f64; 3] },
    Rotate { degrees: [f64; 3] },
    Flip { axes: [bool; 3] },
    Scale { factor: f64 },
    Elastic { delta: f64, alpha: f64, seed: u64 },
}

/// A seeded, ordered list of operations applied identically to every member
/// volume of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub seed: u64,
    pub ops: Vec<AugmentOp>,
}

/// Sampling bounds for random augmentation specs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentBounds {
    /// Per-axis translation bound in voxels.
    pub max_translate: f64,
    /// Per-axis rotation bound in degrees.
    pub max_rotate_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Elastic field Gaussian sd in voxels.
    pub delta: f64,
    /// Elastic field scaling factor.
    pub alpha: f64,
}

impl Default for AugmentBounds {
    fn default() -> Self {
        Self {
            max_translate: 5.0,
            max_rotate_deg: 10.0,
            scale_min: 0.9,
            scale_max: 1.1,
            delta: 4.0,
            alpha: 8.0,
        }
    }
}

/// Draw a random combination of operations in arbitrary order, with
/// parameters inside the bounds. Deterministic per seed.
pub fn sample_augment_spec(bounds: &AugmentBounds, seed: u64) -> AugmentSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds: Vec<usize> = (0..5).filter(|_| rng.gen_bool(0.5)).collect();
    if kinds.is_empty() {
        kinds.push(rng.gen_range(0..5));
    }
    kinds.shuffle(&mut rng);
    let ops = kinds
        .into_iter()
        .map(|kind| match kind {
            0 => AugmentOp::Translate {
                voxels: [
                    rng.gen_range(-bounds.max_translate..=bounds.max_translate),
                    rng.gen_range(-bounds.max_translate..=bounds.max_translate),
                    rng.gen_range(-bounds.max_translate..=bounds.max_translate),
                ],
            },
            1 => AugmentOp::Rotate {
                degrees: [
                    rng.gen_range(-bounds.max_rotate_deg..=bounds.max_rotate_deg),
                    rng.gen_range(-bounds.max_rotate_deg..=bounds.max_rotate_deg),
                    rng.gen_range(-bounds.max_rotate_deg..=bounds.max_rotate_deg),
                ],
            },
            2 => AugmentOp::Flip {
                axes: [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)],
            },
            3 => AugmentOp::Scale { factor: rng.gen_range(bounds.scale_min..=bounds.scale_max) },
            _ => AugmentOp::Elastic { delta: bounds.delta, alpha: bounds.alpha, seed: rng.gen() },
        })
        .collect();
    AugmentSpec { seed, ops }
}

fn apply_op_volume(v: &Volume, op: &AugmentOp, interpolation: Interpolation) -> Result<Volume> {
    match op {
        AugmentOp::Translate { voxels } => {
            apply_affine(v, &AffineParams::translate(*voxels), interpolation)
        }
        AugmentOp::Rotate { degrees } => {
            apply_affine(v, &AffineParams::rotate(*degrees), interpolation)
        }
        AugmentOp::Flip { axes } => apply_affine(v, &AffineParams::flip(*axes), interpolation),
        AugmentOp::Scale { factor } => {
            apply_affine(v, &AffineParams::scale(*factor), interpolation)
        }
        AugmentOp::Elastic { delta, alpha, seed } => {
            let dims = [v.dims()[1], v.dims()[2], v.dims()[3]];
            let field = elastic_field(dims, *delta, *alpha, *seed)?;
            apply_deformation(v, &field, interpolation)
        }
    }
}

/// Apply a spec to a whole sample: cubic for modalities, nearest for the
/// label, identical parameters throughout.
pub fn apply_augment_spec(sample: &MultiModalSample, spec: &AugmentSpec) -> Result<MultiModalSample> {
    if spec.ops.is_empty() {
        return Err(Error::Contract("augment spec has no operations".into()));
    }
    let mut modalities: BTreeMap<_, _> =
        sample.modalities().iter().map(|(m, v)| (*m, v.clone())).collect();
    let mut label = sample.label().clone();
    for op in &spec.ops {
        for v in modalities.values_mut() {
            *v = apply_op_volume(v, op, Interpolation::Cubic)?;
        }
        label = apply_op_volume(&label, op, Interpolation::Nearest)?;
    }
    sample.with_volumes(modalities, label)
}

/// Expand a dataset: originals first, then `copies_per_sample` augmented
/// copies of each sample, each driven by a seed derived from the global
/// seed and the copy index so parallel order never changes results.
pub fn augment_dataset(
    samples: &[MultiModalSample],
    copies_per_sample: usize,
    bounds: &AugmentBounds,
    seed: u64,
) -> Result<Vec<MultiModalSample>> {
    let mut out: Vec<MultiModalSample> = samples.to_vec();
    let jobs: Vec<(usize, usize)> = (0..samples.len())
        .flat_map(|i| (0..copies_per_sample).map(move |c| (i, c)))
        .collect();
    let copies: Vec<MultiModalSample> = jobs
        .par_iter()
        .map(|&(i, c)| {
            let copy_index = (i * copies_per_sample + c) as u64;
            let spec = sample_augment_spec(bounds, derive_seed(seed, copy_index));
            let mut aug = apply_augment_spec(&samples[i], &spec)?;
            aug.sample_id = format!("{}+aug{}", samples[i].sample_id, c);
            Ok(aug)
        })
        .collect::<Result<_>>()?;
    out.extend(copies);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;

    fn vol(dims: [usize; 3], data: Vec<f32>) -> Volume {
        Volume::new([1, dims[0], dims[1], dims[2]], [1.0, 1.0, 1.0], VolumeKind::Intensity, data)
            .unwrap()
    }

    fn pattern(dims: [usize; 3]) -> Volume {
        let n = dims[0] * dims[1] * dims[2];
        vol(dims, (0..n).map(|i| ((i * 31 % 97) as f32) - 48.0).collect())
    }

    #[test]
    fn alpha_zero_field_is_all_zero() {
        let f = elastic_field([4, 4, 4], 2.0, 0.0, 7).unwrap();
        assert!(f.dz.iter().chain(&f.dy).chain(&f.dx).all(|&v| v == 0.0));
    }

    #[test]
    fn elastic_field_is_deterministic() {
        let a = elastic_field([6, 6, 6], 2.0, 4.0, 42).unwrap();
        let b = elastic_field([6, 6, 6], 2.0, 4.0, 42).unwrap();
        assert_eq!(a.dz, b.dz);
        assert_eq!(a.dy, b.dy);
        assert_eq!(a.dx, b.dx);
        let c = elastic_field([6, 6, 6], 2.0, 4.0, 43).unwrap();
        assert_ne!(a.dz, c.dz);
    }

    #[test]
    fn blur_reduces_second_differences() {
        // The blurred field is smoother than the raw field: its largest
        // second finite difference is strictly below the raw field's.
        let dims = [32, 32, 32];
        let n: usize = dims.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(5, 0));
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let field = elastic_field(dims, 4.0, 1.0, 5).unwrap();
        let second_diff_max = |f: &[f64]| {
            let mut worst = 0.0f64;
            for z in 0..32 {
                for y in 0..32 {
                    for x in 1..31 {
                        let i = (z * 32 + y) * 32 + x;
                        worst = worst.max((f[i - 1] - 2.0 * f[i] + f[i + 1]).abs());
                    }
                }
            }
            worst
        };
        assert!(second_diff_max(&field.dz) < second_diff_max(&raw));
    }

    #[test]
    fn invalid_delta_is_a_domain_error() {
        assert!(matches!(elastic_field([2, 2, 2], 0.0, 1.0, 0), Err(Error::Domain(_))));
        assert!(matches!(elastic_field([2, 2, 2], -1.0, 1.0, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_field_is_identity_for_both_interpolations() {
        let v = pattern([4, 5, 6]);
        let field = DisplacementField {
            dims: [4, 5, 6],
            dz: vec![0.0; 120],
            dy: vec![0.0; 120],
            dx: vec![0.0; 120],
            delta: 1.0,
            alpha: 0.0,
        };
        assert_eq!(apply_deformation(&v, &field, Interpolation::Cubic).unwrap(), v);
        assert_eq!(apply_deformation(&v, &field, Interpolation::Nearest).unwrap(), v);
    }

    #[test]
    fn integer_shift_field_matches_index_oracle() {
        let v = pattern([3, 4, 5]);
        let n = 60;
        let field = DisplacementField {
            dims: [3, 4, 5],
            dz: vec![0.0; n],
            dy: vec![0.0; n],
            dx: vec![1.0; n],
            delta: 1.0,
            alpha: 1.0,
        };
        let out = apply_deformation(&v, &field, Interpolation::Cubic).unwrap();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5i64 {
                    let expect = v.at_or_zero(0, z as i64, y as i64, x + 1);
                    assert_eq!(out.at(0, z, y, x as usize), expect, "({z},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn label_deformation_requires_nearest_and_stays_binary() {
        let data: Vec<f32> = (0..64).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let label =
            Volume::new([1, 4, 4, 4], [1.0, 1.0, 1.0], VolumeKind::Label, data).unwrap();
        let field = elastic_field([4, 4, 4], 1.5, 2.0, 3).unwrap();
        assert!(matches!(
            apply_deformation(&label, &field, Interpolation::Cubic),
            Err(Error::Contract(_))
        ));
        let out = apply_deformation(&label, &field, Interpolation::Nearest).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn double_flip_is_bit_exact_identity() {
        let v = pattern([3, 4, 5]);
        let p = AffineParams::flip([false, false, true]);
        let once = apply_affine(&v, &p, Interpolation::Cubic).unwrap();
        assert_ne!(once, v);
        let twice = apply_affine(&once, &p, Interpolation::Cubic).unwrap();
        assert_eq!(twice, v);
    }

    #[test]
    fn identity_affine_is_bit_exact() {
        let v = pattern([4, 4, 4]);
        for interp in [Interpolation::Cubic, Interpolation::Nearest] {
            assert_eq!(apply_affine(&v, &AffineParams::identity(), interp).unwrap(), v);
        }
    }

    #[test]
    fn rotate_90_about_z_is_an_axis_permutation() {
        let v = pattern([5, 5, 5]);
        let out =
            apply_affine(&v, &AffineParams::rotate([90.0, 0.0, 0.0]), Interpolation::Nearest)
                .unwrap();
        // With inverse-mapped sampling the output voxel (z, y, x) reads the
        // source voxel (z, x, n-1-y); cos(90 deg) rounds to ~6e-17, which
        // nearest-neighbor rounding absorbs, leaving an exact permutation.
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    let expect = v.at(0, z, x, 4 - y);
                    assert_eq!(out.at(0, z, y, x), expect, "({z},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn sampled_specs_are_deterministic_and_in_bounds() {
        let bounds = AugmentBounds::default();
        let a = sample_augment_spec(&bounds, 99);
        let b = sample_augment_spec(&bounds, 99);
        assert_eq!(a, b);
        assert!(!a.ops.is_empty());
        for op in &a.ops {
            match op {
                AugmentOp::Translate { voxels } => {
                    assert!(voxels.iter().all(|t| t.abs() <= bounds.max_translate));
                }
                AugmentOp::Rotate { degrees } => {
                    assert!(degrees.iter().all(|d| d.abs() <= bounds.max_rotate_deg));
                }
                AugmentOp::Scale { factor } => {
                    assert!(*factor >= bounds.scale_min && *factor <= bounds.scale_max);
                }
                _ => {}
            }
        }
    }

    fn tiny_sample() -> MultiModalSample {
        let dims = [1usize, 8, 10, 10];
        let n = 800;
        let mut wat = vec![5.0f32; n];
        let mut label = vec![0.0f32; n];
        for z in 2..6 {
            for y in 3..7 {
                for x in 3..7 {
                    let i = (z * 10 + y) * 10 + x;
                    wat[i] = 50.0;
                    label[i] = 1.0;
                }
            }
        }
        let mut mods = BTreeMap::new();
        mods.insert(
            Modality::Wat,
            Volume::new(dims, [1.0, 1.0, 1.0], VolumeKind::Intensity, wat).unwrap(),
        );
        MultiModalSample::new(
            "t",
            mods,
            Volume::new(dims, [1.0, 1.0, 1.0], VolumeKind::Label, label).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn dataset_expansion_counts_and_determinism() {
        let samples = vec![tiny_sample(); 6];
        let bounds = AugmentBounds::default();
        let out = augment_dataset(&samples, 3, &bounds, 7).unwrap();
        assert_eq!(out.len(), 24);
        // Originals first, bit-identical.
        for k in 0..6 {
            assert_eq!(out[k].label().data(), samples[k].label().data());
        }
        let out2 = augment_dataset(&samples, 3, &bounds, 7).unwrap();
        for (a, b) in out.iter().zip(&out2) {
            assert_eq!(a.label().data(), b.label().data());
            assert_eq!(
                a.modality(Modality::Wat).unwrap().data(),
                b.modality(Modality::Wat).unwrap().data()
            );
        }
        // Zero copies is the identity.
        assert_eq!(augment_dataset(&samples, 0, &bounds, 7).unwrap().len(), 6);
    }
}
