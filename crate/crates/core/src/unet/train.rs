//! The training loop: batched Dice-loss optimization with Adam, early
//! stopping on validation loss, and best-checkpoint saving.

use super::checkpoint::save_checkpoint;
use super::network::{AdamBundle, GradStore, LayerState, Network};
use crate::error::{Error, Result};
use crate::nn::{adam_step, dice_loss, AdamHyper, Mode, Tensor};
use crate::util::{derive_seed, quantize_f32_slice};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

const SHUFFLE_STREAM: u64 = 0x5348;
const DROPOUT_STREAM: u64 = 0xD0;

/// Training hyperparameters. Defaults follow the published setup: learning
/// rate 1e-5, Dice smoothing 1, dropout 0.2, batch size 1 for the 3D
/// network (16 for the 2D one).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Number of consecutive non-improving validation epochs tolerated
    /// before stopping; 0 stops at the first non-improving epoch.
    pub patience: usize,
    pub dropout: f64,
    pub smooth: f64,
    pub seed: u64,
    /// Reproducible mode is the default; the fast mode currently runs the
    /// identical deterministic kernels (parallel reductions already use a
    /// fixed order), so both modes produce byte-identical results.
    pub reproducible: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 1,
            max_epochs: 100,
            patience: 10,
            dropout: 0.2,
            smooth: 1.0,
            seed: 0,
            reproducible: true,
        }
    }
}

/// Continuation point for resuming an interrupted run.
#[derive(Debug, Clone)]
pub struct ResumePoint {
    pub adam: AdamBundle,
    pub epochs_done: usize,
}

/// Per-fit options beyond the hyperparameters.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Fraction of the dataset held out for validation: the LAST
    /// `ceil(n * val_split)` items. Callers order their dataset accordingly.
    pub val_split: f64,
    /// Where to save the best-validation checkpoint (params + Adam state).
    pub best_checkpoint: Option<PathBuf>,
    pub resume: Option<ResumePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    pub adam: AdamBundle,
}

/// Loss history CSV: `epoch,train_loss,val_loss`.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for h in history {
        out.push_str(&format!("{},{},{}\n", h.epoch, h.train_loss, h.val_loss));
    }
    out
}

fn stack_batch(items: &[(Tensor, Tensor)], idxs: &[usize]) -> Result<(Tensor, Tensor)> {
    let stack = |pick: &dyn for<'a> Fn(&'a [(Tensor, Tensor)], usize) -> &'a Tensor| -> Result<Tensor> {
        let pick = |i: usize| pick(items, i);
        let first = pick(idxs[0]);
        if first.dims().len() != 4 {
            return Err(Error::Dims("training items must be 4D [c,z,y,x] tensors".into()));
        }
        let mut dims = vec![idxs.len()];
        dims.extend_from_slice(first.dims());
        let mut vals = Vec::with_capacity(idxs.len() * first.len());
        for &i in idxs {
            let t = pick(i);
            if t.dims() != first.dims() {
                return Err(Error::Dims("training items have inconsistent dims".into()));
            }
            vals.extend_from_slice(t.values());
        }
        Tensor::new(dims, vals)
    };
    Ok((stack(&|it, i| &it[i].0)?, stack(&|it, i| &it[i].1)?))
}

fn batch_loss(
    net: &Network,
    items: &[(Tensor, Tensor)],
    idxs: &[usize],
    smooth: f64,
) -> Result<f64> {
    let (x, t) = stack_batch(items, idxs)?;
    let p = net.forward_infer(&x)?;
    let (e, _) = dice_loss(&p, &t, smooth)?;
    Ok(1.0 - e)
}

/// Quantize all trainable parameters and optimizer state through f32 so the
/// f32 checkpoint format captures the exact in-memory state.
fn quantize_training_state(net: &mut Network, adam: &mut AdamBundle) {
    for state in net.state_mut() {
        if let LayerState::Weights { w, b } = state {
            quantize_f32_slice(w);
            quantize_f32_slice(b);
        }
    }
    for slot in adam.per_layer.iter_mut().flatten() {
        quantize_f32_slice(&mut slot.0.m);
        quantize_f32_slice(&mut slot.0.v);
        quantize_f32_slice(&mut slot.1.m);
        quantize_f32_slice(&mut slot.1.v);
    }
}

/// Train a network on `(input, target)` pairs, minimizing one minus the
/// smoothed Dice coefficient.
///
/// The last `ceil(n * val_split)` items are the validation set; the rest
/// train. Per-epoch losses are recorded, the best-validation parameters are
/// checkpointed, and training stops early after `patience` non-improving
/// validation epochs. Fully deterministic for a fixed config and seed.
pub fn fit(
    net: &mut Network,
    items: &[(Tensor, Tensor)],
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<FitOutcome> {
    if items.is_empty() {
        return Err(Error::Train("dataset is empty".into()));
    }
    if !(0.0 < opts.val_split && opts.val_split < 1.0) {
        return Err(Error::Train(format!("validation split {} not in (0, 1)", opts.val_split)));
    }
    if cfg.batch_size == 0 || cfg.lr <= 0.0 {
        return Err(Error::Train("batch_size must be >= 1 and lr > 0".into()));
    }
    let n_val = ((items.len() as f64 * opts.val_split).ceil() as usize).max(1);
    if n_val >= items.len() {
        return Err(Error::Train(format!(
            "validation split {} leaves no training items (n = {})",
            opts.val_split,
            items.len()
        )));
    }
    let n_train = items.len() - n_val;
    let val_idxs: Vec<usize> = (n_train..items.len()).collect();

    let hyper = AdamHyper { lr: cfg.lr, ..AdamHyper::default() };
    let (mut adam, start_epoch) = match &opts.resume {
        Some(r) => (r.adam.clone(), r.epochs_done),
        None => (AdamBundle::zeros_like(net), 0),
    };
    let mut grads = GradStore::zeros_like(net);
    let shuffle_base = derive_seed(cfg.seed, SHUFFLE_STREAM);
    let dropout_base = derive_seed(cfg.seed, DROPOUT_STREAM);

    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut bad_epochs = 0usize;
    let mut stopped_early = false;

    for epoch in start_epoch..cfg.max_epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(shuffle_base, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut train_loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (x, t) = stack_batch(items, batch)?;
            let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                derive_seed(dropout_base, epoch as u64),
                bi as u64,
            ));
            let (p, trace) = net.forward(&x, Mode::Train, Some(cfg.dropout), &mut drop_rng)?;
            let (e, grad_e) = dice_loss(&p, &t, cfg.smooth)?;
            let loss = 1.0 - e;
            if !loss.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {bi}"
                )));
            }
            train_loss_sum += loss;
            n_batches += 1;
            let neg = Tensor::new(
                grad_e.dims().to_vec(),
                grad_e.values().iter().map(|v| -v).collect(),
            )?;
            grads.zero();
            net.backward(&trace, neg, &mut grads)?;
            net.commit_bn(&trace);
            for (li, state) in net.state_mut().iter_mut().enumerate() {
                if let LayerState::Weights { w, b } = state {
                    let (gw, gb) = grads.layer(li).expect("trainable layer has grads").clone();
                    let slot = adam.per_layer[li].as_mut().expect("trainable layer has adam");
                    adam_step(w, &gw, &mut slot.0, &hyper)?;
                    adam_step(b, &gb, &mut slot.1, &hyper)?;
                }
            }
            quantize_training_state(net, &mut adam);
        }
        let train_loss = train_loss_sum / n_batches as f64;

        let mut val_loss_sum = 0.0;
        let mut n_val_batches = 0usize;
        for batch in val_idxs.chunks(cfg.batch_size) {
            val_loss_sum += batch_loss(net, items, batch, cfg.smooth)?;
            n_val_batches += 1;
        }
        let val_loss = val_loss_sum / n_val_batches as f64;
        history.push(EpochStats { epoch, train_loss, val_loss });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            bad_epochs = 0;
            if let Some(path) = &opts.best_checkpoint {
                save_checkpoint(net, Some(&adam), path)?;
            }
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(FitOutcome { history, best_epoch, best_val, stopped_early, adam })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::checkpoint::load_checkpoint;
    use crate::unet::{build_unet3d, save_checkpoint};
    use rand::Rng;
    use tempfile::tempdir;

    /// A blob-vs-background patch the small net can overfit quickly.
    fn toy_items(n: usize, seed: u64) -> Vec<(Tensor, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut x = vec![0.0f64; 2 * 4 * 8 * 8];
                let mut t = vec![0.0f64; 4 * 8 * 8];
                for z in 0..4 {
                    for y in 0..8 {
                        for xx in 0..8 {
                            let idx = (z * 8 + y) * 8 + xx;
                            let inside = (2..6).contains(&y) && (2..6).contains(&xx) && z >= 1;
                            let v = if inside { 1.0 } else { -1.0 };
                            x[idx] = v + rng.gen_range(-0.2..0.2);
                            x[4 * 8 * 8 + idx] = -v + rng.gen_range(-0.2..0.2);
                            t[idx] = if inside { 1.0 } else { 0.0 };
                        }
                    }
                }
                (
                    Tensor::new(vec![2, 4, 8, 8], x).unwrap(),
                    Tensor::new(vec![1, 4, 8, 8], t).unwrap(),
                )
            })
            .collect()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 3e-3,
            batch_size: 2,
            max_epochs: epochs,
            patience: epochs,
            dropout: 0.1,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_improves_best_so_far_loss() {
        let items = toy_items(5, 1);
        let mut net = Network::init(build_unet3d(2, 2).unwrap(), 3).unwrap();
        let out = fit(&mut net, &items, &quick_cfg(10), &FitOptions {
            val_split: 0.2,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(out.history.len(), 10);
        // Best-so-far train loss improves across the early epochs.
        let mut best = f64::INFINITY;
        let mut improvements = 0;
        for h in &out.history {
            if h.train_loss < best {
                best = h.train_loss;
                improvements += 1;
            }
        }
        assert!(improvements >= 5, "only {improvements} improving epochs");
        assert!(out.history.last().unwrap().train_loss < out.history[0].train_loss);
    }

    #[test]
    fn patience_zero_stops_at_first_non_improving_epoch() {
        let items = toy_items(4, 2);
        let mut net = Network::init(build_unet3d(2, 2).unwrap(), 5).unwrap();
        // A huge learning rate makes validation loss bounce around.
        let cfg = TrainConfig { lr: 0.5, patience: 0, max_epochs: 50, ..quick_cfg(50) };
        let out = fit(&mut net, &items, &cfg, &FitOptions { val_split: 0.25, ..Default::default() })
            .unwrap();
        assert!(out.stopped_early, "expected an early stop within 50 epochs");
        let h = &out.history;
        // Every epoch before the stop strictly improved the best val loss;
        // the stopping epoch did not.
        let mut best = f64::INFINITY;
        for stats in &h[..h.len() - 1] {
            assert!(stats.val_loss < best);
            best = stats.val_loss;
        }
        assert!(h.last().unwrap().val_loss >= best);
    }

    #[test]
    fn identical_configs_give_bit_identical_runs() {
        let items = toy_items(5, 3);
        let run = || {
            let mut net = Network::init(build_unet3d(2, 2).unwrap(), 9).unwrap();
            let out = fit(&mut net, &items, &quick_cfg(4), &FitOptions {
                val_split: 0.2,
                ..Default::default()
            })
            .unwrap();
            (net, out.history)
        };
        let (net_a, hist_a) = run();
        let (net_b, hist_b) = run();
        assert_eq!(net_a, net_b);
        assert_eq!(hist_a, hist_b);
    }

    #[test]
    fn resume_from_checkpoint_reproduces_next_epoch_exactly() {
        let items = toy_items(5, 4);
        let cfg = quick_cfg(4);
        // Straight run of 4 epochs.
        let mut net_a = Network::init(build_unet3d(2, 2).unwrap(), 21).unwrap();
        let out_a = fit(&mut net_a, &items, &cfg, &FitOptions {
            val_split: 0.2,
            ..Default::default()
        })
        .unwrap();

        // Run 3 epochs, checkpoint, reload, resume for the final epoch.
        let cfg3 = TrainConfig { max_epochs: 3, ..cfg.clone() };
        let mut net_b = Network::init(build_unet3d(2, 2).unwrap(), 21).unwrap();
        let out_b3 = fit(&mut net_b, &items, &cfg3, &FitOptions {
            val_split: 0.2,
            ..Default::default()
        })
        .unwrap();
        let dir = tempdir().unwrap();
        let ck = dir.path().join("mid.mck");
        save_checkpoint(&net_b, Some(&out_b3.adam), &ck).unwrap();
        let (mut net_c, adam_c) = load_checkpoint(&ck).unwrap();
        let out_c = fit(&mut net_c, &items, &cfg, &FitOptions {
            val_split: 0.2,
            resume: Some(ResumePoint { adam: adam_c.unwrap(), epochs_done: 3 }),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(out_c.history.len(), 1);
        assert_eq!(out_c.history[0], out_a.history[3]);
        assert_eq!(net_c, net_a);
    }

    #[test]
    fn history_csv_format() {
        let h = vec![
            EpochStats { epoch: 0, train_loss: 0.5, val_loss: 0.25 },
            EpochStats { epoch: 1, train_loss: 0.375, val_loss: 0.125 },
        ];
        assert_eq!(history_csv(&h), "epoch,train_loss,val_loss\n0,0.5,0.25\n1,0.375,0.125\n");
    }

    #[test]
    fn small_lr_bounds_parameter_movement() {
        // One Adam step moves no parameter by more than lr * (1 + eps).
        let items = toy_items(2, 5);
        let cfg = TrainConfig { lr: 1e-5, batch_size: 1, max_epochs: 1, ..quick_cfg(1) };
        let mut net = Network::init(build_unet3d(2, 2).unwrap(), 2).unwrap();
        let before: Vec<Vec<f64>> = net
            .state()
            .iter()
            .filter_map(|s| match s {
                LayerState::Weights { w, .. } => Some(w.clone()),
                _ => None,
            })
            .collect();
        fit(&mut net, &items, &cfg, &FitOptions { val_split: 0.5, ..Default::default() }).unwrap();
        let after: Vec<Vec<f64>> = net
            .state()
            .iter()
            .filter_map(|s| match s {
                LayerState::Weights { w, .. } => Some(w.clone()),
                _ => None,
            })
            .collect();
        // Adam's first step is bounded by lr; the f32 quantization of the
        // updated parameter adds at most half an ulp on top.
        let bound = cfg.lr * (1.0 + 1e-6) + 1e-7;
        for (wb, wa) in before.iter().zip(&after) {
            for (b, a) in wb.iter().zip(wa) {
                assert!((a - b).abs() <= bound, "step {} exceeds bound", (a - b).abs());
            }
        }
    }
}
