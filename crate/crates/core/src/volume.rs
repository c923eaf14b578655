//! Volumetric data model, the MVL1 binary format, and the geometric
//! primitives (pad, crop, slice, normalize) every other module consumes.
//!
//! A [`Volume`] is a channelized 3D scalar grid stored channel-major, then
//! z, y, x with x fastest. Values live in f32, which is also the payload
//! precision of the MVL1 file format, so a save/load round trip is
//! bit-identical.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

/// What the scalar values of a volume mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VolumeKind {
    /// Real-valued image intensities.
    Intensity,
    /// Binary segmentation labels; voxels are exactly 0 or 1.
    Label,
    /// Real-valued probabilities in [0, 1].
    Probability,
}

impl VolumeKind {
    fn code(self) -> u8 {
        match self {
            VolumeKind::Intensity => 0,
            VolumeKind::Label => 1,
            VolumeKind::Probability => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(VolumeKind::Intensity),
            1 => Ok(VolumeKind::Label),
            2 => Ok(VolumeKind::Probability),
            other => Err(Error::Format(format!("unknown kind code {other}"))),
        }
    }
}

/// A channelized 3D scalar grid with voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 4],    // (nc, nz, ny, nx)
    spacing: [f32; 3],   // (sz, sy, sx) millimeters per voxel
    kind: VolumeKind,
    data: Vec<f32>,      // channel-major, then z, y, x with x fastest
}

impl Volume {
    /// Build a volume, checking every type invariant.
    pub fn new(dims: [usize; 4], spacing: [f32; 3], kind: VolumeKind, data: Vec<f32>) -> Result<Self> {
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Dims(format!("dims {dims:?} overflow")))?;
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Dims(format!("dims {dims:?} must be positive")));
        }
        if data.len() != n {
            return Err(Error::Dims(format!(
                "data length {} != nc*nz*ny*nx = {n}",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Dims(format!("spacing {spacing:?} must be positive")));
        }
        match kind {
            VolumeKind::Label => {
                if data.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Contract(
                        "label-binary volume contains values other than 0 and 1".into(),
                    ));
                }
            }
            VolumeKind::Probability => {
                if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::Contract(
                        "probability volume contains values outside [0, 1]".into(),
                    ));
                }
            }
            VolumeKind::Intensity => {}
        }
        Ok(Self { dims, spacing, kind, data })
    }

    /// Zero-filled volume.
    pub fn zeros(dims: [usize; 4], spacing: [f32; 3], kind: VolumeKind) -> Result<Self> {
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Dims(format!("dims {dims:?} overflow")))?;
        Self::new(dims, spacing, kind, vec![0.0; n])
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    /// Spatial dims (nz, ny, nx) without the channel axis.
    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.dims[1], self.dims[2], self.dims[3]]
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.dims[1] + z) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, z, y, x)]
    }

    /// Signed-index accessor used by crop and interpolation; out of grid reads 0.
    #[inline]
    pub fn at_or_zero(&self, c: usize, z: i64, y: i64, x: i64) -> f32 {
        let [_, nz, ny, nx] = self.dims;
        if z < 0 || y < 0 || x < 0 || z >= nz as i64 || y >= ny as i64 || x >= nx as i64 {
            0.0
        } else {
            self.at(c, z as usize, y as usize, x as usize)
        }
    }

    /// Count of foreground voxels (value != 0).
    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Same grid and spacing, different payload; kind supplied by the caller.
    pub fn with_data(&self, kind: VolumeKind, data: Vec<f32>) -> Result<Self> {
        Self::new(self.dims, self.spacing, kind, data)
    }
}

// ---------------------------------------------------------------------------
// MVL1 binary format
// ---------------------------------------------------------------------------

const MVL_MAGIC: &[u8; 4] = b"MVL1";
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// Write a volume to the MVL1 binary format.
///
/// Layout: magic `MVL1`; little-endian u32 nc, nz, ny, nx; f32 sz, sy, sx;
/// u8 dtype (0 = f32, 1 = u8); u8 kind (0 = intensity, 1 = label,
/// 2 = probability); two reserved zero bytes; raw payload in the declared
/// order. Labels are stored as u8, everything else as f32.
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MVL_MAGIC)?;
    for d in v.dims {
        let d32 = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        w.write_all(&d32.to_le_bytes())?;
    }
    for s in v.spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    let dtype = match v.kind {
        VolumeKind::Label => DTYPE_U8,
        _ => DTYPE_F32,
    };
    w.write_all(&[dtype, v.kind.code(), 0, 0])?;
    match dtype {
        DTYPE_U8 => {
            let bytes: Vec<u8> = v.data.iter().map(|&x| x as u8).collect();
            w.write_all(&bytes)?;
        }
        _ => {
            for &x in &v.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a volume from the MVL1 binary format, validating every header field.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated header: magic".into()))?;
    if &magic != MVL_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"MVL1\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::Format(format!("truncated header: dim {i}")))?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let mut spacing = [0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::Format(format!("truncated header: spacing {i}")))?;
        *s = f32::from_le_bytes(b);
    }
    let mut tail = [0u8; 4];
    r.read_exact(&mut tail)
        .map_err(|_| Error::Format("truncated header: dtype/kind".into()))?;
    let [dtype, kind_code, r0, r1] = tail;
    if r0 != 0 || r1 != 0 {
        return Err(Error::Format("reserved bytes must be zero".into()));
    }
    let kind = VolumeKind::from_code(kind_code)?;
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
    let data = match dtype {
        DTYPE_U8 => {
            let mut bytes = vec![0u8; n];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Format("truncated payload".into()))?;
            bytes.into_iter().map(f32::from).collect()
        }
        DTYPE_F32 => {
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Format("truncated payload".into()))?;
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        }
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Volume::new(dims, spacing, kind, data)
}

// ---------------------------------------------------------------------------
// Geometric primitives
// ---------------------------------------------------------------------------

/// Zero-pad a volume to `target` spatial dims, centering the original data.
///
/// When the padding along an axis is odd the extra voxel goes to the
/// high-index side, so `center_crop` with the original dims is an exact
/// inverse.
pub fn pad_to(v: &Volume, target: [usize; 3], fill: f32) -> Result<Volume> {
    let [nc, nz, ny, nx] = v.dims;
    let cur = [nz, ny, nx];
    for a in 0..3 {
        if target[a] < cur[a] {
            return Err(Error::Dims(format!(
                "pad target {target:?} smaller than source {cur:?} on axis {a}"
            )));
        }
    }
    let lo = [
        (target[0] - nz) / 2,
        (target[1] - ny) / 2,
        (target[2] - nx) / 2,
    ];
    let out_dims = [nc, target[0], target[1], target[2]];
    let mut data = vec![fill; nc * target[0] * target[1] * target[2]];
    for c in 0..nc {
        for z in 0..nz {
            for y in 0..ny {
                let src = v.index(c, z, y, 0);
                let dst = ((c * target[0] + z + lo[0]) * target[1] + y + lo[1]) * target[2] + lo[2];
                data[dst..dst + nx].copy_from_slice(&v.data[src..src + nx]);
            }
        }
    }
    Volume::new(out_dims, v.spacing, v.kind, data)
}

/// Exact inverse of [`pad_to`]: take the centered `target` region.
pub fn center_crop(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    let [nc, nz, ny, nx] = v.dims;
    let cur = [nz, ny, nx];
    for a in 0..3 {
        if target[a] > cur[a] {
            return Err(Error::Dims(format!(
                "crop target {target:?} larger than source {cur:?} on axis {a}"
            )));
        }
    }
    let lo = [
        (nz - target[0]) / 2,
        (ny - target[1]) / 2,
        (nx - target[2]) / 2,
    ];
    let mut data = Vec::with_capacity(nc * target[0] * target[1] * target[2]);
    for c in 0..nc {
        for z in 0..target[0] {
            for y in 0..target[1] {
                let src = v.index(c, z + lo[0], y + lo[1], lo[2]);
                data.extend_from_slice(&v.data[src..src + target[2]]);
            }
        }
    }
    Volume::new([nc, target[0], target[1], target[2]], v.spacing, v.kind, data)
}

/// An axis-aligned box described by an integer center voxel and an extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRegion {
    /// Center voxel (z, y, x); may point outside the volume.
    pub center: [i64; 3],
    /// Extent (dz, dy, dx) in voxels, all positive.
    pub extent: [usize; 3],
}

impl BoxRegion {
    pub fn new(center: [i64; 3], extent: [usize; 3]) -> Result<Self> {
        if extent.iter().any(|&e| e == 0) {
            return Err(Error::Dims(format!("box extent {extent:?} must be positive")));
        }
        Ok(Self { center, extent })
    }

    /// First voxel of the box: `center - (extent - 1) / 2` per axis.
    pub fn start(&self) -> [i64; 3] {
        [
            self.center[0] - (self.extent[0] as i64 - 1) / 2,
            self.center[1] - (self.extent[1] as i64 - 1) / 2,
            self.center[2] - (self.extent[2] as i64 - 1) / 2,
        ]
    }

    pub fn voxel_count(&self) -> usize {
        self.extent[0] * self.extent[1] * self.extent[2]
    }
}

/// Crop a box out of a volume; regions outside the grid are zero-filled.
pub fn crop_box(v: &Volume, bx: &BoxRegion) -> Volume {
    let [nc, ..] = v.dims;
    let [dz, dy, dx] = bx.extent;
    let start = bx.start();
    let mut data = Vec::with_capacity(nc * dz * dy * dx);
    for c in 0..nc {
        for z in 0..dz {
            for y in 0..dy {
                for x in 0..dx {
                    data.push(v.at_or_zero(
                        c,
                        start[0] + z as i64,
                        start[1] + y as i64,
                        start[2] + x as i64,
                    ));
                }
            }
        }
    }
    // Zero-fill cannot violate any kind invariant, so this cannot fail.
    Volume::new([nc, dz, dy, dx], v.spacing, v.kind, data).expect("crop preserves invariants")
}

/// Axis of a 3D grid in (z, y, x) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    Z,
    Y,
    X,
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z" | "Z" => Ok(Axis::Z),
            "y" | "Y" => Ok(Axis::Y),
            "x" | "X" => Ok(Axis::X),
            other => Err(Error::Config(format!("unknown axis \"{other}\""))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Z => "z",
            Axis::Y => "y",
            Axis::X => "x",
        })
    }
}

/// Slice a single-channel volume along an axis into 2D volumes.
///
/// A slice keeps the remaining two axes in their original (z, y, x) order and
/// is represented as a volume with the leading spatial dim equal to 1, e.g.
/// slicing (36, 256, 256) along x yields 256 volumes of dims (1, 1, 36, 256).
pub fn slice_along_axis(v: &Volume, axis: Axis) -> Result<Vec<Volume>> {
    let [nc, nz, ny, nx] = v.dims;
    if nc != 1 {
        return Err(Error::Contract(format!(
            "slice_along_axis requires a single-channel volume, got nc = {nc}"
        )));
    }
    let count = match axis {
        Axis::Z => nz,
        Axis::Y => ny,
        Axis::X => nx,
    };
    let mut slices = Vec::with_capacity(count);
    for k in 0..count {
        let (a, b) = match axis {
            Axis::Z => (ny, nx),
            Axis::Y => (nz, nx),
            Axis::X => (nz, ny),
        };
        let mut data = Vec::with_capacity(a * b);
        for i in 0..a {
            for j in 0..b {
                let val = match axis {
                    Axis::Z => v.at(0, k, i, j),
                    Axis::Y => v.at(0, i, k, j),
                    Axis::X => v.at(0, i, j, k),
                };
                data.push(val);
            }
        }
        slices.push(Volume::new([1, 1, a, b], v.spacing, v.kind, data)?);
    }
    Ok(slices)
}

/// Rebuild a volume from the slices produced by [`slice_along_axis`].
pub fn stack_slices(slices: &[Volume], axis: Axis) -> Result<Volume> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Dims("cannot stack zero slices".into()))?;
    let [nc, one, a, b] = first.dims();
    if nc != 1 || one != 1 {
        return Err(Error::Contract("slices must be single-channel 2D volumes".into()));
    }
    for s in slices {
        if s.dims() != first.dims() {
            return Err(Error::Dims("slices have inconsistent dims".into()));
        }
    }
    let k = slices.len();
    let dims = match axis {
        Axis::Z => [1, k, a, b],
        Axis::Y => [1, a, k, b],
        Axis::X => [1, a, b, k],
    };
    let mut out = Volume::zeros(dims, first.spacing(), first.kind())?;
    let mut data = std::mem::take(&mut out.data);
    for (ki, s) in slices.iter().enumerate() {
        for i in 0..a {
            for j in 0..b {
                let (z, y, x) = match axis {
                    Axis::Z => (ki, i, j),
                    Axis::Y => (i, ki, j),
                    Axis::X => (i, j, ki),
                };
                data[(z * dims[2] + y) * dims[3] + x] = s.at(0, 0, i, j);
            }
        }
    }
    out.data = data;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Multimodal samples
// ---------------------------------------------------------------------------

/// One Dixon channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Fat,
    Inn,
    Opp,
    Wat,
}

/// Canonical modality ordering used everywhere (reports, network channels).
pub const ALL_MODALITIES: [Modality; 4] = [Modality::Fat, Modality::Inn, Modality::Opp, Modality::Wat];

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fat" => Ok(Modality::Fat),
            "inn" => Ok(Modality::Inn),
            "opp" => Ok(Modality::Opp),
            "wat" => Ok(Modality::Wat),
            other => Err(Error::Config(format!("unknown modality \"{other}\""))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Fat => "fat",
            Modality::Inn => "inn",
            Modality::Opp => "opp",
            Modality::Wat => "wat",
        })
    }
}

/// Named Dixon modality volumes plus a binary ground-truth label.
#[derive(Debug, Clone)]
pub struct MultiModalSample {
    pub sample_id: String,
    modalities: BTreeMap<Modality, Volume>,
    label: Volume,
}

impl MultiModalSample {
    pub fn new(
        sample_id: impl Into<String>,
        modalities: BTreeMap<Modality, Volume>,
        label: Volume,
    ) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::Contract("sample needs at least one modality".into()));
        }
        if label.kind() != VolumeKind::Label {
            return Err(Error::Contract("sample label must be a label-binary volume".into()));
        }
        let dims = label.dims();
        let spacing = label.spacing();
        if dims[0] != 1 {
            return Err(Error::Contract("member volumes must be single-channel".into()));
        }
        for (m, v) in &modalities {
            if v.dims() != dims {
                return Err(Error::Dims(format!(
                    "modality {m} dims {:?} differ from label dims {dims:?}",
                    v.dims()
                )));
            }
            if v.spacing() != spacing {
                return Err(Error::Dims(format!("modality {m} spacing differs from label")));
            }
        }
        Ok(Self { sample_id: sample_id.into(), modalities, label })
    }

    pub fn modalities(&self) -> &BTreeMap<Modality, Volume> {
        &self.modalities
    }

    pub fn modality(&self, m: Modality) -> Option<&Volume> {
        self.modalities.get(&m)
    }

    pub fn label(&self) -> &Volume {
        &self.label
    }

    pub fn dims(&self) -> [usize; 4] {
        self.label.dims()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.label.spacing()
    }

    /// Keep only the given modalities (canonical order preserved).
    pub fn select_modalities(&self, keep: &[Modality]) -> Result<Self> {
        let mut selected = BTreeMap::new();
        for m in keep {
            let v = self
                .modalities
                .get(m)
                .ok_or_else(|| Error::Contract(format!("modality {m} absent from sample")))?;
            selected.insert(*m, v.clone());
        }
        Self::new(self.sample_id.clone(), selected, self.label.clone())
    }

    /// Replace all member volumes at once; used by augmentation.
    pub fn with_volumes(&self, modalities: BTreeMap<Modality, Volume>, label: Volume) -> Result<Self> {
        Self::new(self.sample_id.clone(), modalities, label)
    }
}

/// Result of [`normalize_sample`]: the sample plus a degenerate-input flag.
#[derive(Debug, Clone)]
pub struct NormalizedSample {
    pub sample: MultiModalSample,
    /// True when the pooled standard deviation was zero and all modality
    /// volumes were replaced by zeros.
    pub degenerate: bool,
}

/// Z-score normalize using mean and population sd pooled across the voxels of
/// all modalities jointly. The label is untouched.
pub fn normalize_sample(s: &MultiModalSample) -> NormalizedSample {
    let mut n = 0usize;
    let mut sum = 0f64;
    for v in s.modalities.values() {
        for &x in v.data() {
            sum += x as f64;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let mut ss = 0f64;
    for v in s.modalities.values() {
        for &x in v.data() {
            let d = x as f64 - mean;
            ss += d * d;
        }
    }
    let sd = (ss / n as f64).sqrt();
    let degenerate = sd == 0.0;
    let mut out = BTreeMap::new();
    for (m, v) in &s.modalities {
        let data: Vec<f32> = if degenerate {
            vec![0.0; v.len()]
        } else {
            v.data().iter().map(|&x| (((x as f64) - mean) / sd) as f32).collect()
        };
        out.insert(*m, v.with_data(VolumeKind::Intensity, data).expect("same grid"));
    }
    let sample = s.with_volumes(out, s.label.clone()).expect("same grid");
    NormalizedSample { sample, degenerate }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn vol(dims: [usize; 4], kind: VolumeKind, data: Vec<f32>) -> Volume {
        Volume::new(dims, [2.0, 1.25, 1.25], kind, data).unwrap()
    }

    #[test]
    fn roundtrip_zero_volume_has_expected_size() {
        let v = vol([1, 2, 2, 2], VolumeKind::Intensity, vec![0.0; 8]);
        let dir = tempdir().unwrap();
        let p = dir.path().join("v.mvl");
        save_volume(&v, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 36 + 32); // header + 8 f32 voxels
        let back = load_volume(&p).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn label_roundtrips_as_u8() {
        let v = vol([1, 1, 2, 2], VolumeKind::Label, vec![0.0, 1.0, 1.0, 0.0]);
        let dir = tempdir().unwrap();
        let p = dir.path().join("l.mvl");
        save_volume(&v, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes[32], 1, "dtype code should be u8");
        assert_eq!(bytes.len(), 36 + 4);
        assert_eq!(load_volume(&p).unwrap(), v);
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let v = vol([1, 1, 1, 1], VolumeKind::Intensity, vec![3.0]);
        let dir = tempdir().unwrap();
        let p = dir.path().join("v.mvl");
        save_volume(&v, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        let err = load_volume(&p).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("magic")), "{err}");
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let v = vol([1, 2, 2, 2], VolumeKind::Intensity, vec![1.0; 8]);
        let dir = tempdir().unwrap();
        let p = dir.path().join("v.mvl");
        save_volume(&v, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_volume(&p).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("truncated")), "{err}");
    }

    #[test]
    fn pad_splits_are_floor_biased() {
        // 25x35x35 patch padded to 28x36x36: splits (1,2),(0,1),(0,1).
        let mut data = vec![0.0f32; 25 * 35 * 35];
        for (i, d) in data.iter_mut().enumerate() {
            *d = (i % 97) as f32;
        }
        let v = vol([1, 25, 35, 35], VolumeKind::Intensity, data);
        let p = pad_to(&v, [28, 36, 36], 0.0).unwrap();
        assert_eq!(p.spatial_dims(), [28, 36, 36]);
        // Exhaustive voxel comparison against the declared split.
        for z in 0..28 {
            for y in 0..36 {
                for x in 0..36 {
                    let inside = (1..26).contains(&z) && y < 35 && x < 35;
                    let expect = if inside { v.at(0, z - 1, y, x) } else { 0.0 };
                    assert_eq!(p.at(0, z, y, x), expect, "at ({z},{y},{x})");
                }
            }
        }
        let back = center_crop(&p, [25, 35, 35]).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn pad_equal_dims_is_identity() {
        let v = vol([1, 3, 4, 5], VolumeKind::Intensity, (0..60).map(|i| i as f32).collect());
        assert_eq!(pad_to(&v, [3, 4, 5], 0.0).unwrap(), v);
    }

    #[test]
    fn pad_shrinking_is_an_error() {
        let v = vol([1, 3, 4, 5], VolumeKind::Intensity, vec![0.0; 60]);
        assert!(matches!(pad_to(&v, [3, 4, 4], 0.0), Err(Error::Dims(_))));
    }

    #[test]
    fn pad_slice_to_square_adds_symmetric_zero_columns() {
        // A 36x256 slice padded to 256x256 gets 110 zero columns each side.
        let v = Volume::new([1, 1, 36, 256], [1.0, 1.0, 1.0], VolumeKind::Intensity, vec![1.0; 36 * 256]).unwrap();
        let p = pad_to(&v, [1, 256, 256], 0.0).unwrap();
        for y in 0..256 {
            let filled = (110..146).contains(&y);
            assert_eq!(p.at(0, 0, y, 7) != 0.0, filled, "row {y}");
        }
    }

    #[test]
    fn crop_box_interior_and_corner() {
        let data: Vec<f32> = (0..4 * 4 * 4).map(|i| i as f32).collect();
        let v = vol([1, 4, 4, 4], VolumeKind::Intensity, data);
        // Fully interior box is an exact sub-array starting at the box start
        // (center minus (extent - 1) / 2).
        let b = BoxRegion::new([1, 1, 1], [2, 2, 2]).unwrap();
        assert_eq!(b.start(), [1, 1, 1]);
        let c = crop_box(&v, &b);
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(c.at(0, z, y, x), v.at(0, z + 1, y + 1, x + 1));
                }
            }
        }
        // Box centered on the origin corner: per-voxel oracle with zero fill.
        let b = BoxRegion::new([0, 0, 0], [3, 3, 3]).unwrap();
        let c = crop_box(&v, &b);
        for z in 0..3i64 {
            for y in 0..3i64 {
                for x in 0..3i64 {
                    let expect = v.at_or_zero(0, z - 1, y - 1, x - 1);
                    assert_eq!(c.at(0, z as usize, y as usize, x as usize), expect);
                }
            }
        }
        // Extent equal to the volume, centered: whole volume back.
        let b = BoxRegion::new([1, 1, 1], [4, 4, 4]).unwrap();
        assert_eq!(crop_box(&v, &b).data(), v.data());
    }

    #[test]
    fn slices_match_paper_shapes() {
        let v = Volume::zeros([1, 36, 256, 256], [1.0, 1.0, 1.0], VolumeKind::Intensity).unwrap();
        let sx = slice_along_axis(&v, Axis::X).unwrap();
        assert_eq!(sx.len(), 256);
        assert_eq!(sx[0].dims(), [1, 1, 36, 256]);
        let sy = slice_along_axis(&v, Axis::Y).unwrap();
        assert_eq!(sy.len(), 256);
        assert_eq!(sy[0].dims(), [1, 1, 36, 256]);
        let sz = slice_along_axis(&v, Axis::Z).unwrap();
        assert_eq!(sz.len(), 36);
        assert_eq!(sz[0].dims(), [1, 1, 256, 256]);
    }

    #[test]
    fn single_voxel_slices() {
        let v = vol([1, 1, 1, 1], VolumeKind::Intensity, vec![7.0]);
        for axis in [Axis::Z, Axis::Y, Axis::X] {
            let s = slice_along_axis(&v, axis).unwrap();
            assert_eq!(s.len(), 1);
            assert_eq!(s[0].dims(), [1, 1, 1, 1]);
            assert_eq!(s[0].data(), &[7.0]);
        }
    }

    #[test]
    fn multichannel_slice_is_contract_error() {
        let v = vol([2, 1, 2, 2], VolumeKind::Intensity, vec![0.0; 8]);
        assert!(matches!(slice_along_axis(&v, Axis::Z), Err(Error::Contract(_))));
    }

    fn sample_from(mods: &[(Modality, Vec<f32>)], label: Vec<f32>, dims: [usize; 4]) -> MultiModalSample {
        let mut m = BTreeMap::new();
        for (k, d) in mods {
            m.insert(*k, vol(dims, VolumeKind::Intensity, d.clone()));
        }
        MultiModalSample::new("s0", m, vol(dims, VolumeKind::Label, label)).unwrap()
    }

    #[test]
    fn normalize_two_modalities_hand_oracle() {
        // Values {0,2} and {0,2}: pooled mean 1, sd 1, so values map to -1/+1.
        let s = sample_from(
            &[
                (Modality::Opp, vec![0.0, 2.0, 0.0, 2.0]),
                (Modality::Wat, vec![2.0, 0.0, 2.0, 0.0]),
            ],
            vec![0.0, 1.0, 0.0, 1.0],
            [1, 1, 2, 2],
        );
        let n = normalize_sample(&s);
        assert!(!n.degenerate);
        assert_eq!(n.sample.modality(Modality::Opp).unwrap().data(), &[-1.0, 1.0, -1.0, 1.0]);
        assert_eq!(n.sample.modality(Modality::Wat).unwrap().data(), &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn normalize_constant_volumes_is_degenerate() {
        let s = sample_from(
            &[(Modality::Wat, vec![5.0; 4])],
            vec![0.0, 1.0, 0.0, 1.0],
            [1, 1, 2, 2],
        );
        let n = normalize_sample(&s);
        assert!(n.degenerate);
        assert!(n.sample.modality(Modality::Wat).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_is_idempotent_within_tolerance() {
        let vals: Vec<f32> = (0..64).map(|i| ((i * 37 % 13) as f32) - 6.0).collect();
        let s = sample_from(&[(Modality::Opp, vals)], vec![0.0; 64], [1, 4, 4, 4]);
        let n1 = normalize_sample(&s);
        let n2 = normalize_sample(&n1.sample);
        let a = n1.sample.modality(Modality::Opp).unwrap().data();
        let b = n2.sample.modality(Modality::Opp).unwrap().data();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn normalized_pooled_stats_hit_zero_one() {
        let vals: Vec<f32> = (0..1000).map(|i| (i as f32 * 0.37).sin() * 40.0 + 90.0).collect();
        let vals2: Vec<f32> = (0..1000).map(|i| (i as f32 * 0.11).cos() * 25.0 + 30.0).collect();
        let s = sample_from(
            &[(Modality::Fat, vals), (Modality::Wat, vals2)],
            vec![0.0; 1000],
            [1, 10, 10, 10],
        );
        let n = normalize_sample(&s);
        let mut sum = 0f64;
        let mut cnt = 0usize;
        for v in n.sample.modalities().values() {
            for &x in v.data() {
                sum += x as f64;
                cnt += 1;
            }
        }
        let mean = sum / cnt as f64;
        let mut ss = 0f64;
        for v in n.sample.modalities().values() {
            for &x in v.data() {
                ss += (x as f64 - mean) * (x as f64 - mean);
            }
        }
        let sd = (ss / cnt as f64).sqrt();
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((sd - 1.0).abs() < 1e-6, "sd {sd}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn roundtrip_random_volumes(
            nz in 1usize..5, ny in 1usize..5, nx in 1usize..5, nc in 1usize..3,
            kind_sel in 0u8..3,
            seed in any::<u64>(),
        ) {
            let n = nc * nz * ny * nx;
            let mut state = seed;
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 33) as f32 / (1u64 << 31) as f32
            };
            let (kind, data): (VolumeKind, Vec<f32>) = match kind_sel {
                0 => (VolumeKind::Intensity, (0..n).map(|_| next() * 200.0 - 100.0).collect()),
                1 => (VolumeKind::Label, (0..n).map(|_| if next() > 0.5 { 1.0 } else { 0.0 }).collect()),
                _ => (VolumeKind::Probability, (0..n).map(|_| next().clamp(0.0, 1.0)).collect()),
            };
            let v = Volume::new([nc, nz, ny, nx], [0.5, 1.25, 2.0], kind, data).unwrap();
            let dir = tempdir().unwrap();
            let p = dir.path().join("v.mvl");
            save_volume(&v, &p).unwrap();
            prop_assert_eq!(load_volume(&p).unwrap(), v);
        }

        #[test]
        fn pad_then_center_crop_is_identity(
            nz in 1usize..6, ny in 1usize..6, nx in 1usize..6,
            pz in 0usize..4, py in 0usize..4, px in 0usize..4,
        ) {
            let n = nz * ny * nx;
            let data: Vec<f32> = (0..n).map(|i| (i as f32 * 0.7).sin()).collect();
            let v = vol([1, nz, ny, nx], VolumeKind::Intensity, data);
            let padded = pad_to(&v, [nz + pz, ny + py, nx + px], 0.0).unwrap();
            prop_assert_eq!(center_crop(&padded, [nz, ny, nx]).unwrap(), v);
        }

        #[test]
        fn slice_then_stack_is_identity(
            nz in 1usize..5, ny in 1usize..5, nx in 1usize..5,
            axis_sel in 0u8..3,
        ) {
            let n = nz * ny * nx;
            let data: Vec<f32> = (0..n).map(|i| i as f32).collect();
            let v = vol([1, nz, ny, nx], VolumeKind::Intensity, data);
            let axis = match axis_sel { 0 => Axis::Z, 1 => Axis::Y, _ => Axis::X };
            let slices = slice_along_axis(&v, axis).unwrap();
            prop_assert_eq!(stack_slices(&slices, axis).unwrap(), v);
        }

        #[test]
        fn crop_box_matches_index_oracle(
            nz in 1usize..8, ny in 1usize..8, nx in 1usize..8,
            cz in -2i64..10, cy in -2i64..10, cx in -2i64..10,
            ez in 1usize..6, ey in 1usize..6, ex in 1usize..6,
        ) {
            let n = nz * ny * nx;
            let data: Vec<f32> = (0..n).map(|i| (i as f32) + 1.0).collect();
            let v = vol([1, nz, ny, nx], VolumeKind::Intensity, data);
            let b = BoxRegion::new([cz, cy, cx], [ez, ey, ex]).unwrap();
            let c = crop_box(&v, &b);
            let start = b.start();
            for z in 0..ez {
                for y in 0..ey {
                    for x in 0..ex {
                        let expect = v.at_or_zero(0, start[0] + z as i64, start[1] + y as i64, start[2] + x as i64);
                        prop_assert_eq!(c.at(0, z, y, x), expect);
                    }
                }
            }
        }
    }
}
