//! Line-oriented `key = value` run configuration.
//!
//! Every key has a documented default, unknown keys are rejected, and the
//! parsed config echoes back canonically (fixed key order), so a config is
//! fully captured by its canonical text and its hash.

use anyhow::{bail, Context, Result};
use discseg_core::augment::AugmentBounds;
use discseg_core::phantom::PhantomConfig;
use discseg_core::unet::TrainConfig;
use discseg_core::volume::{Axis, Modality};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// `reproducible` or `fast`; both run the same deterministic kernels,
    /// the flag is recorded for provenance.
    pub mode: String,
    pub out_dir: PathBuf,
    /// Path to a dataset manifest produced by `phantom`, `augment`, or
    /// `slice2d`. Empty until one exists.
    pub dataset: String,
    pub modalities: Vec<Modality>,

    pub phantom_samples: usize,
    pub phantom_dims: [usize; 3],
    pub phantom_spacing: [f32; 3],
    pub phantom_discs: usize,
    pub phantom_semi_axes: [f64; 3],
    pub phantom_curve_amplitude: f64,
    pub phantom_wat_fg: f64,
    pub phantom_wat_bg: f64,
    pub phantom_fat_fg: f64,
    pub phantom_fat_bg: f64,
    pub phantom_noise_frac: f64,

    pub augment_copies: usize,
    pub augment_max_translate: f64,
    pub augment_max_rotate_deg: f64,
    pub augment_scale_min: f64,
    pub augment_scale_max: f64,
    pub augment_delta: f64,
    pub augment_alpha: f64,

    pub train_network: String,
    pub train_base_channels: usize,
    pub train_lr: f64,
    pub train_batch_size: usize,
    pub train_max_epochs: usize,
    pub train_patience: usize,
    pub train_dropout: f64,
    pub train_smooth: f64,

    pub pipeline_min_region_voxels: usize,
    pub pipeline_loc_downsample: usize,

    pub checkpoint_loc: String,
    pub checkpoint_seg: String,

    pub slice_axis: Axis,
    /// 0 means pad slices automatically to the next multiple of 16.
    pub slice_pad_to: usize,

    pub eval_pred: String,
    pub experiment_kind: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ph = PhantomConfig::default();
        let au = AugmentBounds::default();
        let tr = TrainConfig::default();
        Self {
            seed: 42,
            mode: "reproducible".into(),
            out_dir: PathBuf::from("runs"),
            dataset: String::new(),
            modalities: vec![Modality::Opp, Modality::Wat, Modality::Fat],
            phantom_samples: 8,
            phantom_dims: ph.dims,
            phantom_spacing: ph.spacing,
            phantom_discs: ph.disc_count,
            phantom_semi_axes: ph.semi_axes,
            phantom_curve_amplitude: ph.curve_amplitude,
            phantom_wat_fg: ph.wat_fg,
            phantom_wat_bg: ph.wat_bg,
            phantom_fat_fg: ph.fat_fg,
            phantom_fat_bg: ph.fat_bg,
            phantom_noise_frac: ph.noise_frac,
            augment_copies: 3,
            augment_max_translate: au.max_translate,
            augment_max_rotate_deg: au.max_rotate_deg,
            augment_scale_min: au.scale_min,
            augment_scale_max: au.scale_max,
            augment_delta: au.delta,
            augment_alpha: au.alpha,
            train_network: "unet3d".into(),
            train_base_channels: 8,
            train_lr: tr.lr,
            train_batch_size: tr.batch_size,
            train_max_epochs: 30,
            train_patience: 5,
            train_dropout: tr.dropout,
            train_smooth: tr.smooth,
            pipeline_min_region_voxels: 100,
            pipeline_loc_downsample: 2,
            checkpoint_loc: String::new(),
            checkpoint_seg: String::new(),
            slice_axis: Axis::Y,
            slice_pad_to: 0,
            eval_pred: String::new(),
            experiment_kind: "modalities".into(),
        }
    }
}

fn parse_list<T: FromStr>(v: &str, n: usize, key: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != n {
        bail!("key {key}: expected {n} comma-separated values, got {}", parts.len());
    }
    parts
        .iter()
        .map(|p| p.parse::<T>().map_err(|e| anyhow::anyhow!("key {key}: {e}")))
        .collect()
}

impl RunConfig {
    /// Parse `key = value` lines over the defaults. `#` starts a comment;
    /// blank lines are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected `key = value`", lineno + 1))?;
            cfg.set(key.trim(), value.trim())
                .with_context(|| format!("line {}", lineno + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = value.parse()?,
            "mode" => {
                if value != "reproducible" && value != "fast" {
                    bail!("mode must be `reproducible` or `fast`, got `{value}`");
                }
                self.mode = value.into();
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "dataset" => self.dataset = value.into(),
            "modalities" => {
                let mods: Result<Vec<Modality>> = value
                    .split(',')
                    .map(|m| Modality::from_str(m.trim()).map_err(Into::into))
                    .collect();
                self.modalities = mods?;
                if self.modalities.is_empty() {
                    bail!("modalities must be nonempty");
                }
            }
            "phantom.samples" => self.phantom_samples = value.parse()?,
            "phantom.dims" => {
                let v: Vec<usize> = parse_list(value, 3, key)?;
                self.phantom_dims = [v[0], v[1], v[2]];
            }
            "phantom.spacing" => {
                let v: Vec<f32> = parse_list(value, 3, key)?;
                self.phantom_spacing = [v[0], v[1], v[2]];
            }
            "phantom.discs" => self.phantom_discs = value.parse()?,
            "phantom.semi_axes" => {
                let v: Vec<f64> = parse_list(value, 3, key)?;
                self.phantom_semi_axes = [v[0], v[1], v[2]];
            }
            "phantom.curve_amplitude" => self.phantom_curve_amplitude = value.parse()?,
            "phantom.wat_fg" => self.phantom_wat_fg = value.parse()?,
            "phantom.wat_bg" => self.phantom_wat_bg = value.parse()?,
            "phantom.fat_fg" => self.phantom_fat_fg = value.parse()?,
            "phantom.fat_bg" => self.phantom_fat_bg = value.parse()?,
            "phantom.noise_frac" => self.phantom_noise_frac = value.parse()?,
            "augment.copies" => self.augment_copies = value.parse()?,
            "augment.max_translate" => self.augment_max_translate = value.parse()?,
            "augment.max_rotate_deg" => self.augment_max_rotate_deg = value.parse()?,
            "augment.scale_min" => self.augment_scale_min = value.parse()?,
            "augment.scale_max" => self.augment_scale_max = value.parse()?,
            "augment.delta" => self.augment_delta = value.parse()?,
            "augment.alpha" => self.augment_alpha = value.parse()?,
            "train.network" => {
                if value != "unet3d" && value != "unet2d" {
                    bail!("train.network must be `unet3d` or `unet2d`, got `{value}`");
                }
                self.train_network = value.into();
            }
            "train.base_channels" => self.train_base_channels = value.parse()?,
            "train.lr" => self.train_lr = value.parse()?,
            "train.batch_size" => self.train_batch_size = value.parse()?,
            "train.max_epochs" => self.train_max_epochs = value.parse()?,
            "train.patience" => self.train_patience = value.parse()?,
            "train.dropout" => self.train_dropout = value.parse()?,
            "train.smooth" => self.train_smooth = value.parse()?,
            "pipeline.min_region_voxels" => self.pipeline_min_region_voxels = value.parse()?,
            "pipeline.loc_downsample" => self.pipeline_loc_downsample = value.parse()?,
            "checkpoint.loc" => self.checkpoint_loc = value.into(),
            "checkpoint.seg" => self.checkpoint_seg = value.into(),
            "slice.axis" => self.slice_axis = Axis::from_str(value)?,
            "slice.pad_to" => self.slice_pad_to = value.parse()?,
            "eval.pred" => self.eval_pred = value.into(),
            "experiment.kind" => {
                if !["modalities", "augmentation", "axes2d"].contains(&value) {
                    bail!(
                        "experiment.kind must be one of modalities|augmentation|axes2d, got `{value}`"
                    );
                }
                self.experiment_kind = value.into();
            }
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.train_lr <= 0.0 {
            bail!("train.lr must be positive");
        }
        if self.train_batch_size == 0 {
            bail!("train.batch_size must be at least 1");
        }
        if self.pipeline_loc_downsample == 0 {
            bail!("pipeline.loc_downsample must be at least 1");
        }
        if self.augment_scale_min > self.augment_scale_max || self.augment_scale_min <= 0.0 {
            bail!("augment scale range invalid");
        }
        Ok(())
    }

    /// Canonical echo: every key in documented order.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mods: Vec<String> = self.modalities.iter().map(|m| m.to_string()).collect();
        let kv: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("mode", self.mode.clone()),
            ("out_dir", self.out_dir.display().to_string()),
            ("dataset", self.dataset.clone()),
            ("modalities", mods.join(",")),
            ("phantom.samples", self.phantom_samples.to_string()),
            (
                "phantom.dims",
                format!("{},{},{}", self.phantom_dims[0], self.phantom_dims[1], self.phantom_dims[2]),
            ),
            (
                "phantom.spacing",
                format!(
                    "{},{},{}",
                    self.phantom_spacing[0], self.phantom_spacing[1], self.phantom_spacing[2]
                ),
            ),
            ("phantom.discs", self.phantom_discs.to_string()),
            (
                "phantom.semi_axes",
                format!(
                    "{},{},{}",
                    self.phantom_semi_axes[0], self.phantom_semi_axes[1], self.phantom_semi_axes[2]
                ),
            ),
            ("phantom.curve_amplitude", self.phantom_curve_amplitude.to_string()),
            ("phantom.wat_fg", self.phantom_wat_fg.to_string()),
            ("phantom.wat_bg", self.phantom_wat_bg.to_string()),
            ("phantom.fat_fg", self.phantom_fat_fg.to_string()),
            ("phantom.fat_bg", self.phantom_fat_bg.to_string()),
            ("phantom.noise_frac", self.phantom_noise_frac.to_string()),
            ("augment.copies", self.augment_copies.to_string()),
            ("augment.max_translate", self.augment_max_translate.to_string()),
            ("augment.max_rotate_deg", self.augment_max_rotate_deg.to_string()),
            ("augment.scale_min", self.augment_scale_min.to_string()),
            ("augment.scale_max", self.augment_scale_max.to_string()),
            ("augment.delta", self.augment_delta.to_string()),
            ("augment.alpha", self.augment_alpha.to_string()),
            ("train.network", self.train_network.clone()),
            ("train.base_channels", self.train_base_channels.to_string()),
            ("train.lr", self.train_lr.to_string()),
            ("train.batch_size", self.train_batch_size.to_string()),
            ("train.max_epochs", self.train_max_epochs.to_string()),
            ("train.patience", self.train_patience.to_string()),
            ("train.dropout", self.train_dropout.to_string()),
            ("train.smooth", self.train_smooth.to_string()),
            ("pipeline.min_region_voxels", self.pipeline_min_region_voxels.to_string()),
            ("pipeline.loc_downsample", self.pipeline_loc_downsample.to_string()),
            ("checkpoint.loc", self.checkpoint_loc.clone()),
            ("checkpoint.seg", self.checkpoint_seg.clone()),
            ("slice.axis", self.slice_axis.to_string()),
            ("slice.pad_to", self.slice_pad_to.to_string()),
            ("eval.pred", self.eval_pred.clone()),
            ("experiment.kind", self.experiment_kind.clone()),
        ];
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// First 12 hex chars of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        let digest = h.finalize();
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn phantom_config(&self, seed: u64) -> PhantomConfig {
        PhantomConfig {
            dims: self.phantom_dims,
            spacing: self.phantom_spacing,
            disc_count: self.phantom_discs,
            semi_axes: self.phantom_semi_axes,
            curve_amplitude: self.phantom_curve_amplitude,
            wat_fg: self.phantom_wat_fg,
            wat_bg: self.phantom_wat_bg,
            fat_fg: self.phantom_fat_fg,
            fat_bg: self.phantom_fat_bg,
            noise_frac: self.phantom_noise_frac,
            seed,
        }
    }

    pub fn augment_bounds(&self) -> AugmentBounds {
        AugmentBounds {
            max_translate: self.augment_max_translate,
            max_rotate_deg: self.augment_max_rotate_deg,
            scale_min: self.augment_scale_min,
            scale_max: self.augment_scale_max,
            delta: self.augment_delta,
            alpha: self.augment_alpha,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train_lr,
            batch_size: self.train_batch_size,
            max_epochs: self.train_max_epochs,
            patience: self.train_patience,
            dropout: self.train_dropout,
            smooth: self.train_smooth,
            seed: self.seed,
            reproducible: self.mode == "reproducible",
        }
    }
}
