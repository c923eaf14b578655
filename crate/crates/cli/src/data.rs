//! Building training items from datasets: whole-volume localizer inputs,
//! ground-truth-centered segmentation patches, and 2D slice stacks.

use crate::manifest::DatasetManifest;
use anyhow::{bail, Context, Result};
use discseg_core::nn::Tensor;
use discseg_core::pipeline::{
    connected_components, crop_disc_patches, downsample_max, downsample_mean, label_to_tensor,
    sample_to_tensor, Connectivity,
};
use discseg_core::volume::{
    load_volume, normalize_sample, pad_to, Modality, MultiModalSample, Volume,
};
use std::path::Path;

/// Load and normalize the samples of one split, restricted to `modalities`.
/// Normalization is the pooled z-score over the selected modalities, the
/// same preprocessing inference applies.
pub fn load_normalized_split(
    manifest: &DatasetManifest,
    base: &Path,
    split: &str,
    modalities: &[Modality],
) -> Result<Vec<MultiModalSample>> {
    let mut out = Vec::new();
    for entry in manifest.split_entries(split) {
        let s = manifest.load_sample(entry, base, modalities)?;
        out.push(normalize_sample(&s).sample);
    }
    Ok(out)
}

/// Raw (unnormalized) samples of one split.
pub fn load_raw_split(
    manifest: &DatasetManifest,
    base: &Path,
    split: &str,
    modalities: &[Modality],
) -> Result<Vec<MultiModalSample>> {
    manifest
        .split_entries(split)
        .iter()
        .map(|e| manifest.load_sample(e, base, modalities))
        .collect()
}

fn pad_multiple(dims: [usize; 3], div: [usize; 3]) -> [usize; 3] {
    [
        dims[0].div_ceil(div[0]) * div[0],
        dims[1].div_ceil(div[1]) * div[1],
        dims[2].div_ceil(div[2]) * div[2],
    ]
}

fn squeeze_batch(t: Tensor) -> Result<Tensor> {
    let [_, c, z, y, x] = t.shape5()?;
    Ok(Tensor::new(vec![c, z, y, x], t.values().to_vec())?)
}

/// Whole-volume localizer items: inputs mean-downsampled, targets
/// max-downsampled, both zero-padded up to the network's pooling divisor.
pub fn loc_items(
    samples: &[MultiModalSample],
    modalities: &[Modality],
    downsample: usize,
    pool_div: [usize; 3],
) -> Result<Vec<(Tensor, Tensor)>> {
    let mut items = Vec::with_capacity(samples.len());
    for s in samples {
        let mut vols = Vec::with_capacity(modalities.len());
        for m in modalities {
            let v = s
                .modality(*m)
                .with_context(|| format!("modality {m} absent from {}", s.sample_id))?;
            vols.push(downsample_mean(v, downsample)?);
        }
        let small = [vols[0].dims()[1], vols[0].dims()[2], vols[0].dims()[3]];
        let target = pad_multiple(small, pool_div);
        let padded: Vec<Volume> = vols
            .iter()
            .map(|v| pad_to(v, target, 0.0))
            .collect::<std::result::Result<_, _>>()?;
        let label = pad_to(&downsample_max(s.label(), downsample)?, target, 0.0)?;
        let x = discseg_core::pipeline::volumes_to_tensor(&padded.iter().collect::<Vec<_>>())?;
        let t = label_to_tensor(&label)?;
        items.push((squeeze_batch(x)?, squeeze_batch(t)?));
    }
    Ok(items)
}

/// Ground-truth-centered segmentation patches: one item per labeled disc.
pub fn seg_items(
    samples: &[MultiModalSample],
    modalities: &[Modality],
) -> Result<Vec<(Tensor, Tensor)>> {
    let mut items = Vec::new();
    for s in samples {
        let cc = connected_components(s.label(), Connectivity::TwentySix)?;
        let mut centers: Vec<[i64; 3]> = cc
            .centroids
            .iter()
            .map(|c| [c[0].round() as i64, c[1].round() as i64, c[2].round() as i64])
            .collect();
        centers.sort_by_key(|c| (c[1], c[0], c[2]));
        if centers.is_empty() {
            bail!("sample {} has an empty label; cannot build patches", s.sample_id);
        }
        let instances = crop_disc_patches(s, &centers)?;
        for inst in instances {
            let x = sample_to_tensor(&inst.patch, modalities)?;
            let t = label_to_tensor(inst.patch.label())?;
            items.push((squeeze_batch(x)?, squeeze_batch(t)?));
        }
    }
    Ok(items)
}

/// Items from a `slices2d` dataset: each channel of the stored stacks is one
/// 2D sample `([C, 1, a, b], [1, 1, a, b])`.
pub fn slice_items(
    manifest: &DatasetManifest,
    base: &Path,
    split: &str,
    modalities: &[Modality],
) -> Result<Vec<(Tensor, Tensor)>> {
    let mut items = Vec::new();
    for entry in manifest.split_entries(split) {
        let label = load_volume(&base.join(&entry.label))?;
        let [n_slices, _, a, b] = label.dims();
        let mut stacks = Vec::with_capacity(modalities.len());
        for m in modalities {
            let rel = entry
                .modalities
                .get(&m.to_string())
                .with_context(|| format!("sample {} lacks modality {m}", entry.id))?;
            let v = load_volume(&base.join(rel))?;
            if v.dims() != label.dims() {
                bail!("slice stack dims mismatch in sample {}", entry.id);
            }
            stacks.push(v);
        }
        for k in 0..n_slices {
            let plane = a * b;
            let mut x = Vec::with_capacity(modalities.len() * plane);
            for v in &stacks {
                let basei = v.index(k, 0, 0, 0);
                x.extend(v.data()[basei..basei + plane].iter().map(|&f| f as f64));
            }
            let basei = label.index(k, 0, 0, 0);
            let t: Vec<f64> = label.data()[basei..basei + plane].iter().map(|&f| f as f64).collect();
            items.push((
                Tensor::new(vec![modalities.len(), 1, a, b], x)?,
                Tensor::new(vec![1, 1, a, b], t)?,
            ));
        }
    }
    Ok(items)
}
