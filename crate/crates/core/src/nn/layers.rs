//! Pointwise and pooling layers: ReLU, sigmoid, dropout, max pooling,
//! nearest-neighbor upsampling, and affine-free batch normalization.

use super::{Mode, Tensor};
use crate::error::{Error, Result};
use crate::util::quantize_f32;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn relu_forward(x: &Tensor) -> Tensor {
    let vals = x.values().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.dims().to_vec(), vals).expect("same shape")
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward(grad_out: &Tensor, x: &Tensor) -> Result<Tensor> {
    if grad_out.dims() != x.dims() {
        return Err(Error::Dims("relu_backward shape mismatch".into()));
    }
    let vals = grad_out
        .values()
        .iter()
        .zip(x.values())
        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.dims().to_vec(), vals)
}

/// Logistic sigmoid, clamped into the open interval (0, 1) so saturated
/// activations never round to an exact 0 or 1.
pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    const HI: f64 = 1.0 - f64::EPSILON / 2.0;
    let vals = x
        .values()
        .iter()
        .map(|&v| (1.0 / (1.0 + (-v).exp())).clamp(f64::MIN_POSITIVE, HI))
        .collect();
    Tensor::new(x.dims().to_vec(), vals).expect("same shape")
}

/// Backward from the cached forward output `y`: `g * y * (1 - y)`.
pub fn sigmoid_backward(grad_out: &Tensor, y: &Tensor) -> Result<Tensor> {
    if grad_out.dims() != y.dims() {
        return Err(Error::Dims("sigmoid_backward shape mismatch".into()));
    }
    let vals = grad_out
        .values()
        .iter()
        .zip(y.values())
        .map(|(&g, &s)| g * s * (1.0 - s))
        .collect();
    Tensor::new(y.dims().to_vec(), vals)
}

/// Inverted dropout. In train mode each element survives with probability
/// `1 - rate` and survivors are scaled by `1 / (1 - rate)`, so inference is
/// the identity. Returns the output and the mask of survivor scales used by
/// the backward pass; the mask is empty in infer mode or at rate 0.
pub fn dropout_forward(
    x: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<f64>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Contract(format!("dropout rate {rate} must be in [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), Vec::new()));
    }
    let scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
        .collect();
    let vals = x.values().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::new(x.dims().to_vec(), vals)?, mask))
}

pub fn dropout_backward(grad_out: &Tensor, mask: &[f64]) -> Result<Tensor> {
    if mask.is_empty() {
        return Ok(grad_out.clone());
    }
    if mask.len() != grad_out.len() {
        return Err(Error::Dims("dropout mask length mismatch".into()));
    }
    let vals = grad_out.values().iter().zip(mask).map(|(&g, &m)| g * m).collect();
    Tensor::new(grad_out.dims().to_vec(), vals)
}

/// Non-overlapping max pooling with stride equal to the window. Returns the
/// pooled tensor and the flat input index of each window's maximum
/// (first-found tie break in z, y, x scan order).
pub fn maxpool_forward(x: &Tensor, window: [usize; 3]) -> Result<(Tensor, Vec<usize>)> {
    let [nb, nc, iz, iy, ix] = x.shape5()?;
    for (a, (&d, &w)) in [iz, iy, ix].iter().zip(&window).enumerate() {
        if w == 0 || d % w != 0 {
            return Err(Error::Contract(format!(
                "spatial dim {d} on axis {a} not divisible by pooling window {w}; pad upstream"
            )));
        }
    }
    let (oz, oy, ox) = (iz / window[0], iy / window[1], ix / window[2]);
    let mut out = Vec::with_capacity(nb * nc * oz * oy * ox);
    let mut argmax = Vec::with_capacity(out.capacity());
    let xv = x.values();
    for bi in 0..nb {
        for c in 0..nc {
            for zo in 0..oz {
                for yo in 0..oy {
                    for xo in 0..ox {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dz in 0..window[0] {
                            for dy in 0..window[1] {
                                for dx in 0..window[2] {
                                    let zi = zo * window[0] + dz;
                                    let yi = yo * window[1] + dy;
                                    let xi = xo * window[2] + dx;
                                    let idx = (((bi * nc + c) * iz + zi) * iy + yi) * ix + xi;
                                    if xv[idx] > best {
                                        best = xv[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![nb, nc, oz, oy, ox], out)?, argmax))
}

/// Routes each output gradient to its argmax input voxel.
pub fn maxpool_backward(grad_out: &Tensor, argmax: &[usize], in_dims: &[usize]) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::State("maxpool argmax cache missing or stale".into()));
    }
    let mut gx = Tensor::zeros(in_dims.to_vec())?;
    let gvals = gx.values_mut();
    for (&g, &idx) in grad_out.values().iter().zip(argmax) {
        gvals[idx] += g;
    }
    Ok(gx)
}

/// Repeat each voxel `factor` times along each spatial axis.
pub fn upsample_nearest_forward(x: &Tensor, factor: [usize; 3]) -> Result<Tensor> {
    let [nb, nc, iz, iy, ix] = x.shape5()?;
    if factor.iter().any(|&f| f == 0) {
        return Err(Error::Contract("upsample factor must be positive".into()));
    }
    let (oz, oy, ox) = (iz * factor[0], iy * factor[1], ix * factor[2]);
    let mut out = vec![0.0f64; nb * nc * oz * oy * ox];
    let xv = x.values();
    for bi in 0..nb {
        for c in 0..nc {
            for zo in 0..oz {
                for yo in 0..oy {
                    let src = (((bi * nc + c) * iz + zo / factor[0]) * iy + yo / factor[1]) * ix;
                    let dst = (((bi * nc + c) * oz + zo) * oy + yo) * ox;
                    for xo in 0..ox {
                        out[dst + xo] = xv[src + xo / factor[2]];
                    }
                }
            }
        }
    }
    Tensor::new(vec![nb, nc, oz, oy, ox], out)
}

/// Sum gradients over each repeated block.
pub fn upsample_nearest_backward(
    grad_out: &Tensor,
    factor: [usize; 3],
    in_dims: &[usize],
) -> Result<Tensor> {
    let mut gx = Tensor::zeros(in_dims.to_vec())?;
    let [nb, nc, iz, iy, ix] = gx.shape5()?;
    let (oz, oy, ox) = (iz * factor[0], iy * factor[1], ix * factor[2]);
    if grad_out.shape5()? != [nb, nc, oz, oy, ox] {
        return Err(Error::Dims("upsample_backward shape mismatch".into()));
    }
    let gv = grad_out.values();
    let gvals = gx.values_mut();
    for bi in 0..nb {
        for c in 0..nc {
            for zo in 0..oz {
                for yo in 0..oy {
                    let src = (((bi * nc + c) * oz + zo) * oy + yo) * ox;
                    let dst = (((bi * nc + c) * iz + zo / factor[0]) * iy + yo / factor[1]) * ix;
                    for xo in 0..ox {
                        gvals[dst + xo / factor[2]] += gv[src + xo];
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Running statistics of a batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self { running_mean: vec![0.0; channels], running_var: vec![1.0; channels] }
    }
}

/// Per-call cache needed by the batchnorm backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub inv_sd: Vec<f64>,
}

/// Affine-free batch normalization.
///
/// Train mode normalizes with batch statistics (mean and population variance
/// per channel over batch and space) and updates the running statistics with
/// `r = momentum * r + (1 - momentum) * batch`; running values are quantized
/// through f32 so checkpoints round-trip losslessly. Infer mode normalizes
/// with the running statistics.
pub fn batchnorm_forward(
    x: &Tensor,
    stats: &mut BnStats,
    epsilon: f64,
    momentum: f64,
    mode: Mode,
) -> Result<(Tensor, BnCache)> {
    let [nb, nc, nz, ny, nx] = x.shape5()?;
    if stats.running_mean.len() != nc {
        return Err(Error::Dims(format!(
            "batchnorm has {} channels, input has {nc}",
            stats.running_mean.len()
        )));
    }
    let spatial = nz * ny * nx;
    let count = (nb * spatial) as f64;
    let xv = x.values();
    let mut mean = vec![0.0f64; nc];
    let mut var = vec![0.0f64; nc];
    match mode {
        Mode::Train => {
            for c in 0..nc {
                let mut s = 0.0;
                for bi in 0..nb {
                    let base = (bi * nc + c) * spatial;
                    s += xv[base..base + spatial].iter().sum::<f64>();
                }
                mean[c] = s / count;
                let mut ss = 0.0;
                for bi in 0..nb {
                    let base = (bi * nc + c) * spatial;
                    for &v in &xv[base..base + spatial] {
                        let d = v - mean[c];
                        ss += d * d;
                    }
                }
                var[c] = ss / count;
                stats.running_mean[c] =
                    quantize_f32(momentum * stats.running_mean[c] + (1.0 - momentum) * mean[c]);
                stats.running_var[c] =
                    quantize_f32(momentum * stats.running_var[c] + (1.0 - momentum) * var[c]);
            }
        }
        Mode::Infer => {
            mean.copy_from_slice(&stats.running_mean);
            var.copy_from_slice(&stats.running_var);
        }
    }
    let inv_sd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut out = vec![0.0f64; xv.len()];
    for bi in 0..nb {
        for c in 0..nc {
            let base = (bi * nc + c) * spatial;
            let (m, inv) = (mean[c], inv_sd[c]);
            for i in 0..spatial {
                out[base + i] = (xv[base + i] - m) * inv;
            }
        }
    }
    Ok((Tensor::new(x.dims().to_vec(), out)?, BnCache { mean, inv_sd }))
}

/// Backward through train-mode batch normalization.
pub fn batchnorm_backward(grad_out: &Tensor, x: &Tensor, cache: &BnCache) -> Result<Tensor> {
    let [nb, nc, nz, ny, nx] = x.shape5()?;
    if grad_out.dims() != x.dims() {
        return Err(Error::Dims("batchnorm_backward shape mismatch".into()));
    }
    let spatial = nz * ny * nx;
    let count = (nb * spatial) as f64;
    let xv = x.values();
    let gv = grad_out.values();
    let mut out = vec![0.0f64; xv.len()];
    for c in 0..nc {
        let (m, inv) = (cache.mean[c], cache.inv_sd[c]);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for bi in 0..nb {
            let base = (bi * nc + c) * spatial;
            for i in 0..spatial {
                let g = gv[base + i];
                sum_g += g;
                sum_gx += g * (xv[base + i] - m) * inv;
            }
        }
        // dx = inv/N * (N*g - sum(g) - xhat * sum(g*xhat))
        for bi in 0..nb {
            let base = (bi * nc + c) * spatial;
            for i in 0..spatial {
                let xhat = (xv[base + i] - m) * inv;
                out[base + i] = inv / count * (count * gv[base + i] - sum_g - xhat * sum_gx);
            }
        }
    }
    Tensor::new(x.dims().to_vec(), out)
}
