//! The two-stage coarse-to-fine pipeline: localization network, connected
//! component center extraction, patch cropping, per-patch segmentation,
//! thresholding, and volume reassembly.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::unet::Network;
use crate::volume::{
    crop_box, normalize_sample, pad_to, BoxRegion, Modality, MultiModalSample, Volume, VolumeKind,
};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Crop box placed around each localized disc center (z, y, x).
pub const DISC_CROP_EXTENT: [usize; 3] = [25, 35, 35];
/// Patch size after zero-padding, matched to the segmentation network.
pub const DISC_PATCH_DIMS: [usize; 3] = [28, 36, 36];
/// Probability threshold for binarization.
pub const PROB_THRESHOLD: f32 = 0.5;

/// Voxel neighborhood used for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[i64; 3]> {
        match self {
            Connectivity::Six => vec![
                [-1, 0, 0],
                [1, 0, 0],
                [0, -1, 0],
                [0, 1, 0],
                [0, 0, -1],
                [0, 0, 1],
            ],
            Connectivity::TwentySix => {
                let mut offs = Vec::with_capacity(26);
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if (dz, dy, dx) != (0, 0, 0) {
                                offs.push([dz, dy, dx]);
                            }
                        }
                    }
                }
                offs
            }
        }
    }
}

/// Flood-fill labeling of a binary mask. Component ids are contiguous from 1
/// in first-voxel scan order; 0 is background.
#[derive(Debug, Clone)]
pub struct ComponentLabeling {
    pub dims: [usize; 3],
    /// Per-voxel component id, 0 for background.
    pub labels: Vec<u32>,
    pub sizes: Vec<usize>,
    /// Real-valued centroids in voxel coordinates (z, y, x).
    pub centroids: Vec<[f64; 3]>,
    /// Voxels of each component in scan order.
    pub voxels: Vec<Vec<[usize; 3]>>,
}

impl ComponentLabeling {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

/// Label connected components of a binary mask by breadth-first flood fill.
pub fn connected_components(mask: &Volume, connectivity: Connectivity) -> Result<ComponentLabeling> {
    if mask.kind() != VolumeKind::Label {
        return Err(Error::Contract("connected_components needs a label-binary volume".into()));
    }
    let [nc, nz, ny, nx] = mask.dims();
    if nc != 1 {
        return Err(Error::Contract("connected_components needs a single-channel mask".into()));
    }
    let offsets = connectivity.offsets();
    let data = mask.data();
    let mut labels = vec![0u32; data.len()];
    let mut sizes = Vec::new();
    let mut centroids = Vec::new();
    let mut voxels: Vec<Vec<[usize; 3]>> = Vec::new();
    let idx = |z: usize, y: usize, x: usize| (z * ny + y) * nx + x;
    let mut queue = VecDeque::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = idx(z, y, x);
                if data[i] == 0.0 || labels[i] != 0 {
                    continue;
                }
                let id = sizes.len() as u32 + 1;
                labels[i] = id;
                queue.push_back([z, y, x]);
                let mut members = Vec::new();
                let mut sum = [0f64; 3];
                while let Some(p) = queue.pop_front() {
                    members.push(p);
                    sum[0] += p[0] as f64;
                    sum[1] += p[1] as f64;
                    sum[2] += p[2] as f64;
                    for off in &offsets {
                        let q = [
                            p[0] as i64 + off[0],
                            p[1] as i64 + off[1],
                            p[2] as i64 + off[2],
                        ];
                        if q[0] < 0 || q[1] < 0 || q[2] < 0 {
                            continue;
                        }
                        let (qz, qy, qx) = (q[0] as usize, q[1] as usize, q[2] as usize);
                        if qz >= nz || qy >= ny || qx >= nx {
                            continue;
                        }
                        let j = idx(qz, qy, qx);
                        if data[j] != 0.0 && labels[j] == 0 {
                            labels[j] = id;
                            queue.push_back([qz, qy, qx]);
                        }
                    }
                }
                let n = members.len() as f64;
                sizes.push(members.len());
                centroids.push([sum[0] / n, sum[1] / n, sum[2] / n]);
                voxels.push(members);
            }
        }
    }
    Ok(ComponentLabeling { dims: [nz, ny, nx], labels, sizes, centroids, voxels })
}

/// One localized intervertebral disc.
#[derive(Debug, Clone)]
pub struct DiscInstance {
    /// Localized center voxel (z, y, x) in the full volume.
    pub center: [i64; 3],
    /// Cropped multimodal patch padded to [`DISC_PATCH_DIMS`].
    pub patch: MultiModalSample,
    /// Predicted probability patch, filled by [`segment_patches`].
    pub prob: Option<Volume>,
    /// Probability patch thresholded at 0.5.
    pub mask: Option<Volume>,
}

/// Localization settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizeConfig {
    /// Components smaller than this many voxels are discarded.
    pub min_region_voxels: usize,
    /// Integer factor the volume is downsampled by (average pooling) before
    /// the network runs; predictions are upsampled back with nearest
    /// neighbor. 1 disables downsampling.
    pub downsample: usize,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self { min_region_voxels: 100, downsample: 2 }
    }
}

/// Average-pool a single-channel volume by an integer factor per axis
/// (partial blocks at the high edge are averaged over their actual voxels).
pub fn downsample_mean(v: &Volume, factor: usize) -> Result<Volume> {
    if factor == 0 {
        return Err(Error::Contract("downsample factor must be positive".into()));
    }
    let [nc, nz, ny, nx] = v.dims();
    if nc != 1 {
        return Err(Error::Contract("downsample needs a single-channel volume".into()));
    }
    if factor == 1 {
        return Ok(v.clone());
    }
    let (oz, oy, ox) = (nz.div_ceil(factor), ny.div_ceil(factor), nx.div_ceil(factor));
    let mut data = Vec::with_capacity(oz * oy * ox);
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let mut sum = 0f64;
                let mut cnt = 0usize;
                for dz in 0..factor {
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let (sz, sy, sx) = (z * factor + dz, y * factor + dy, x * factor + dx);
                            if sz < nz && sy < ny && sx < nx {
                                sum += v.at(0, sz, sy, sx) as f64;
                                cnt += 1;
                            }
                        }
                    }
                }
                data.push((sum / cnt as f64) as f32);
            }
        }
    }
    let sp = v.spacing();
    let spacing = [sp[0] * factor as f32, sp[1] * factor as f32, sp[2] * factor as f32];
    Volume::new([1, oz, oy, ox], spacing, VolumeKind::Intensity, data)
}

/// Max-pool a label volume by an integer factor per axis: a block is
/// foreground when any of its voxels is. Used to downsample localizer
/// training targets so small discs survive.
pub fn downsample_max(v: &Volume, factor: usize) -> Result<Volume> {
    if factor == 0 {
        return Err(Error::Contract("downsample factor must be positive".into()));
    }
    let [nc, nz, ny, nx] = v.dims();
    if nc != 1 {
        return Err(Error::Contract("downsample needs a single-channel volume".into()));
    }
    if factor == 1 {
        return Ok(v.clone());
    }
    let (oz, oy, ox) = (nz.div_ceil(factor), ny.div_ceil(factor), nx.div_ceil(factor));
    let mut data = Vec::with_capacity(oz * oy * ox);
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let mut best = 0.0f32;
                for dz in 0..factor {
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let (sz, sy, sx) = (z * factor + dz, y * factor + dy, x * factor + dx);
                            if sz < nz && sy < ny && sx < nx {
                                best = best.max(v.at(0, sz, sy, sx));
                            }
                        }
                    }
                }
                data.push(best);
            }
        }
    }
    let sp = v.spacing();
    let spacing = [sp[0] * factor as f32, sp[1] * factor as f32, sp[2] * factor as f32];
    Volume::new([1, oz, oy, ox], spacing, v.kind(), data)
}

/// Nearest-neighbor upsample of a mask by an integer factor, cropped to
/// `target` spatial dims.
fn upsample_mask(v: &Volume, factor: usize, target: [usize; 3]) -> Result<Volume> {
    let [_, nz, ny, nx] = v.dims();
    let mut data = Vec::with_capacity(target[0] * target[1] * target[2]);
    for z in 0..target[0] {
        for y in 0..target[1] {
            for x in 0..target[2] {
                let (sz, sy, sx) = ((z / factor).min(nz - 1), (y / factor).min(ny - 1), (x / factor).min(nx - 1));
                data.push(v.at(0, sz, sy, sx));
            }
        }
    }
    Volume::new([1, target[0], target[1], target[2]], v.spacing(), v.kind(), data)
}

/// Stack single-channel volumes (canonical modality order) into a network
/// input tensor `[1, C, z, y, x]`.
pub fn volumes_to_tensor(vols: &[&Volume]) -> Result<Tensor> {
    let first = vols.first().ok_or_else(|| Error::Contract("no volumes".into()))?;
    let [_, nz, ny, nx] = first.dims();
    let mut vals = Vec::with_capacity(vols.len() * nz * ny * nx);
    for v in vols {
        if v.dims() != first.dims() {
            return Err(Error::Dims("stacked volumes must share dims".into()));
        }
        vals.extend(v.data().iter().map(|&x| x as f64));
    }
    Tensor::new(vec![1, vols.len(), nz, ny, nx], vals)
}

/// Input tensor for a sample restricted to the given modalities.
pub fn sample_to_tensor(sample: &MultiModalSample, modalities: &[Modality]) -> Result<Tensor> {
    let mut vols = Vec::with_capacity(modalities.len());
    for m in modalities {
        vols.push(
            sample
                .modality(*m)
                .ok_or_else(|| Error::Contract(format!("modality {m} absent from sample")))?,
        );
    }
    volumes_to_tensor(&vols)
}

/// Single-sample `[1, 1, z, y, x]` tensor of a label volume.
pub fn label_to_tensor(label: &Volume) -> Result<Tensor> {
    volumes_to_tensor(&[label])
}

/// Convert a `[1, 1, z, y, x]` network output into a probability volume.
pub fn tensor_to_prob_volume(t: &Tensor, spacing: [f32; 3]) -> Result<Volume> {
    let [nb, c, nz, ny, nx] = t.shape5()?;
    if nb != 1 || c != 1 {
        return Err(Error::Dims(format!("expected [1,1,z,y,x] output, got {:?}", t.dims())));
    }
    let data: Vec<f32> = t.values().iter().map(|&v| v as f32).collect();
    Volume::new([1, nz, ny, nx], spacing, VolumeKind::Probability, data)
}

/// Threshold a probability volume into a binary mask (`p >= 0.5`).
pub fn threshold_mask(prob: &Volume) -> Volume {
    let data: Vec<f32> =
        prob.data().iter().map(|&p| if p >= PROB_THRESHOLD { 1.0 } else { 0.0 }).collect();
    Volume::new(prob.dims(), prob.spacing(), VolumeKind::Label, data).expect("binary by construction")
}

fn pad_target_multiple(dims: [usize; 3], div: [usize; 3]) -> [usize; 3] {
    [
        dims[0].div_ceil(div[0]) * div[0],
        dims[1].div_ceil(div[1]) * div[1],
        dims[2].div_ceil(div[2]) * div[2],
    ]
}

/// Localize disc centers: forward the localizer, threshold at 0.5, label
/// components, drop the small ones, round the surviving centroids to voxels,
/// and sort them craniocaudally (by y, then z, then x).
///
/// The volume is optionally average-pool downsampled before the network and
/// the prediction is upsampled back with nearest neighbor; inputs are
/// zero-padded up to the network's pooling divisor and the prediction is
/// center-cropped back, so callers may pass any dims.
pub fn localize(
    sample: &MultiModalSample,
    modalities: &[Modality],
    net: &Network,
    cfg: &LocalizeConfig,
) -> Result<Vec<[i64; 3]>> {
    let full_dims = [sample.dims()[1], sample.dims()[2], sample.dims()[3]];
    let mut vols = Vec::with_capacity(modalities.len());
    for m in modalities {
        let v = sample
            .modality(*m)
            .ok_or_else(|| Error::Contract(format!("modality {m} absent from sample")))?;
        vols.push(downsample_mean(v, cfg.downsample)?);
    }
    let small_dims = [vols[0].dims()[1], vols[0].dims()[2], vols[0].dims()[3]];
    let target = pad_target_multiple(small_dims, net.spec().pool_divisor());
    let padded: Vec<Volume> =
        vols.iter().map(|v| pad_to(v, target, 0.0)).collect::<Result<_>>()?;
    let x = volumes_to_tensor(&padded.iter().collect::<Vec<_>>())?;
    let out = net.forward_infer(&x)?;
    let prob = tensor_to_prob_volume(&out, padded[0].spacing())?;
    let mask_padded = threshold_mask(&prob);
    let mask_small = crate::volume::center_crop(&mask_padded, small_dims)?;
    let mask = if cfg.downsample > 1 {
        upsample_mask(&mask_small, cfg.downsample, full_dims)?
    } else {
        mask_small
    };
    let cc = connected_components(&mask, Connectivity::TwentySix)?;
    let mut centers: Vec<[i64; 3]> = (0..cc.count())
        .filter(|&i| cc.sizes[i] >= cfg.min_region_voxels)
        .map(|i| {
            let c = cc.centroids[i];
            [c[0].round() as i64, c[1].round() as i64, c[2].round() as i64]
        })
        .collect();
    centers.sort_by_key(|c| (c[1], c[0], c[2]));
    Ok(centers)
}

/// Crop a fixed-extent box around each center from every modality and the
/// label, then zero-pad to the segmentation patch size.
pub fn crop_disc_patches(
    sample: &MultiModalSample,
    centers: &[[i64; 3]],
) -> Result<Vec<DiscInstance>> {
    let mut out = Vec::with_capacity(centers.len());
    for &center in centers {
        let bx = BoxRegion::new(center, DISC_CROP_EXTENT)?;
        let mut modalities = std::collections::BTreeMap::new();
        for (m, v) in sample.modalities() {
            let cropped = crop_box(v, &bx);
            modalities.insert(*m, pad_to(&cropped, DISC_PATCH_DIMS, 0.0)?);
        }
        let label = pad_to(&crop_box(sample.label(), &bx), DISC_PATCH_DIMS, 0.0)?;
        let patch = MultiModalSample::new(
            format!("{}/disc@{},{},{}", sample.sample_id, center[0], center[1], center[2]),
            modalities,
            label,
        )?;
        out.push(DiscInstance { center, patch, prob: None, mask: None });
    }
    Ok(out)
}

/// Run the segmentation network on every patch, filling the probability and
/// thresholded mask fields.
pub fn segment_patches(
    instances: &mut [DiscInstance],
    modalities: &[Modality],
    net: &Network,
) -> Result<()> {
    if net.spec().in_channels != modalities.len() {
        return Err(Error::Dims(format!(
            "segmentation network takes {} channels but {} modalities selected",
            net.spec().in_channels,
            modalities.len()
        )));
    }
    for inst in instances.iter_mut() {
        let x = sample_to_tensor(&inst.patch, modalities)?;
        let out = net.forward_infer(&x)?;
        let prob = tensor_to_prob_volume(&out, inst.patch.spacing())?;
        let mask = threshold_mask(&prob);
        inst.prob = Some(prob);
        inst.mask = Some(mask);
    }
    Ok(())
}

/// Place every thresholded patch back at its source box (undoing the pad)
/// and combine overlaps by logical OR.
pub fn threshold_and_assemble(
    instances: &[DiscInstance],
    full_dims: [usize; 3],
    spacing: [f32; 3],
) -> Result<Volume> {
    let mut data = vec![0.0f32; full_dims[0] * full_dims[1] * full_dims[2]];
    for inst in instances {
        let mask = inst
            .mask
            .as_ref()
            .ok_or_else(|| Error::State("instance has no mask; run segment_patches first".into()))?;
        let unpadded = crate::volume::center_crop(mask, DISC_CROP_EXTENT)?;
        let bx = BoxRegion::new(inst.center, DISC_CROP_EXTENT)?;
        let start = bx.start();
        for z in 0..DISC_CROP_EXTENT[0] {
            for y in 0..DISC_CROP_EXTENT[1] {
                for x in 0..DISC_CROP_EXTENT[2] {
                    if unpadded.at(0, z, y, x) == 0.0 {
                        continue;
                    }
                    let (gz, gy, gx) =
                        (start[0] + z as i64, start[1] + y as i64, start[2] + x as i64);
                    if gz < 0 || gy < 0 || gx < 0 {
                        continue;
                    }
                    let (gz, gy, gx) = (gz as usize, gy as usize, gx as usize);
                    if gz >= full_dims[0] || gy >= full_dims[1] || gx >= full_dims[2] {
                        continue;
                    }
                    data[(gz * full_dims[1] + gy) * full_dims[2] + gx] = 1.0;
                }
            }
        }
    }
    Volume::new([1, full_dims[0], full_dims[1], full_dims[2]], spacing, VolumeKind::Label, data)
}

/// Pipeline configuration shared by both stages.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub modalities: Vec<Modality>,
    pub localize: LocalizeConfig,
}

/// Full two-stage inference for one sample: normalize, localize, crop,
/// segment, threshold, and reassemble. Returns the predicted label volume
/// and the per-disc instances for provenance.
pub fn run_end_to_end(
    sample: &MultiModalSample,
    localizer: &Network,
    segmenter: &Network,
    cfg: &PipelineConfig,
) -> Result<(Volume, Vec<DiscInstance>)> {
    let normalized = normalize_sample(&sample.select_modalities(&cfg.modalities)?).sample;
    let centers = localize(&normalized, &cfg.modalities, localizer, &cfg.localize)?;
    let mut instances = crop_disc_patches(&normalized, &centers)?;
    segment_patches(&mut instances, &cfg.modalities, segmenter)?;
    let full_dims = [sample.dims()[1], sample.dims()[2], sample.dims()[3]];
    let pred = threshold_and_assemble(&instances, full_dims, sample.spacing())?;
    Ok((pred, instances))
}
