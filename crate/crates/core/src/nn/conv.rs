//! Convolution and transposed convolution, forward and backward.
//!
//! Cross-correlation convention (no kernel flip). Weight layouts:
//! conv `[out_ch, in_ch, kz, ky, kx]`, transposed conv
//! `[in_ch, out_ch, kz, ky, kx]`. Inner loops are blocked so one input row
//! feeds every output channel while the accumulator row stays in cache, and
//! parallel tasks own disjoint output slabs, which keeps results identical
//! across thread counts.

use super::Tensor;
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Shape of a convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub same_pad: bool,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel[0] * self.kernel[1] * self.kernel[2]
    }

    fn validate(&self) -> Result<()> {
        if self.kernel.iter().any(|&k| k == 0) || self.stride.iter().any(|&s| s == 0) {
            return Err(Error::Contract("kernel and stride must be positive".into()));
        }
        if self.same_pad && self.stride != [1, 1, 1] {
            return Err(Error::Contract("same-padding convolution requires stride 1".into()));
        }
        Ok(())
    }

    fn pad_lo(&self) -> [i64; 3] {
        if self.same_pad {
            [
                (self.kernel[0] as i64 - 1) / 2,
                (self.kernel[1] as i64 - 1) / 2,
                (self.kernel[2] as i64 - 1) / 2,
            ]
        } else {
            [0, 0, 0]
        }
    }

    fn out_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            if self.same_pad {
                out[a] = input[a];
            } else {
                if input[a] < self.kernel[a] {
                    return Err(Error::Dims(format!(
                        "input spatial dims {input:?} smaller than kernel {:?}",
                        self.kernel
                    )));
                }
                out[a] = (input[a] - self.kernel[a]) / self.stride[a] + 1;
            }
        }
        Ok(out)
    }
}

fn check_conv_inputs(x: &Tensor, w: &[f64], b: &[f64], spec: &ConvSpec) -> Result<[usize; 5]> {
    spec.validate()?;
    let shape = x.shape5()?;
    if shape[1] != spec.in_ch {
        return Err(Error::Dims(format!(
            "input has {} channels, layer expects {} (input shape {shape:?})",
            shape[1], spec.in_ch
        )));
    }
    if w.len() != spec.weight_len() {
        return Err(Error::Dims(format!(
            "weight length {} != expected {}",
            w.len(),
            spec.weight_len()
        )));
    }
    if b.len() != spec.out_ch {
        return Err(Error::Dims(format!("bias length {} != out_ch {}", b.len(), spec.out_ch)));
    }
    Ok(shape)
}

/// Permute a `[b, z, y, c, x]` scratch buffer into `[b, c, z, y, x]`.
fn scatter_rows(tmp: &[f64], nb: usize, nc: usize, nz: usize, ny: usize, nx: usize) -> Vec<f64> {
    let mut out = vec![0.0; tmp.len()];
    for bi in 0..nb {
        for z in 0..nz {
            for y in 0..ny {
                let src = (((bi * nz + z) * ny + y) * nc) * nx;
                for c in 0..nc {
                    let dst = (((bi * nc + c) * nz + z) * ny + y) * nx;
                    out[dst..dst + nx].copy_from_slice(&tmp[src + c * nx..src + c * nx + nx]);
                }
            }
        }
    }
    out
}

/// Forward convolution. With same-padding and stride 1 the output spatial
/// dims equal the input dims.
pub fn conv_forward(x: &Tensor, w: &[f64], b: &[f64], spec: &ConvSpec) -> Result<Tensor> {
    let [nb, _, iz, iy, ix] = check_conv_inputs(x, w, b, spec)?;
    let [oz, oy, ox] = spec.out_dims([iz, iy, ix])?;
    let pad = spec.pad_lo();
    let (kz, ky, kx) = (spec.kernel[0], spec.kernel[1], spec.kernel[2]);
    let (sz, sy, sx) = (spec.stride[0], spec.stride[1], spec.stride[2]);
    let (ci, co) = (spec.in_ch, spec.out_ch);
    let xv = x.values();

    // Scratch laid out [b, zo, yo, oc, xo] so each (b, zo) task owns a
    // contiguous slab and accumulator rows are cache resident.
    let mut tmp = vec![0.0f64; nb * oz * oy * co * ox];
    let slab = oy * co * ox;
    tmp.par_chunks_mut(slab).enumerate().for_each(|(t, slab_out)| {
        let bi = t / oz;
        let zo = t % oz;
        for yo in 0..oy {
            let acc = &mut slab_out[yo * co * ox..(yo + 1) * co * ox];
            for icc in 0..ci {
                for dz in 0..kz {
                    let zi = (zo * sz) as i64 + dz as i64 - pad[0];
                    if zi < 0 || zi >= iz as i64 {
                        continue;
                    }
                    for dy in 0..ky {
                        let yi = (yo * sy) as i64 + dy as i64 - pad[1];
                        if yi < 0 || yi >= iy as i64 {
                            continue;
                        }
                        let row_base = (((bi * ci + icc) * iz + zi as usize) * iy + yi as usize) * ix;
                        let row = &xv[row_base..row_base + ix];
                        for dx in 0..kx {
                            let off = dx as i64 - pad[2];
                            if sx == 1 {
                                let lo = (-off).max(0) as usize;
                                let hi = ((ix as i64 - off).min(ox as i64)).max(0) as usize;
                                if lo >= hi {
                                    continue;
                                }
                                let src = &row[(lo as i64 + off) as usize..(hi as i64 + off) as usize];
                                for oc in 0..co {
                                    let wv = w[(((oc * ci + icc) * kz + dz) * ky + dy) * kx + dx];
                                    let dst = &mut acc[oc * ox + lo..oc * ox + hi];
                                    for (d, s) in dst.iter_mut().zip(src) {
                                        *d += wv * s;
                                    }
                                }
                            } else {
                                for oc in 0..co {
                                    let wv = w[(((oc * ci + icc) * kz + dz) * ky + dy) * kx + dx];
                                    for xo in 0..ox {
                                        let xi = (xo * sx) as i64 + off;
                                        if xi >= 0 && xi < ix as i64 {
                                            acc[oc * ox + xo] += wv * row[xi as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for oc in 0..co {
                let bv = b[oc];
                for v in &mut acc[oc * ox..(oc + 1) * ox] {
                    *v += bv;
                }
            }
        }
    });

    Tensor::new(vec![nb, co, oz, oy, ox], scatter_rows(&tmp, nb, co, oz, oy, ox))
}

/// Backward convolution: gradients with respect to input, weights, and bias.
///
/// Implemented for stride 1 (the only stride the architectures use).
pub fn conv_backward(
    grad_out: &Tensor,
    x: &Tensor,
    w: &[f64],
    spec: &ConvSpec,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let [nb, _, iz, iy, ix] = check_conv_inputs(x, w, &vec![0.0; spec.out_ch], spec)?;
    if spec.stride != [1, 1, 1] {
        return Err(Error::Contract("conv_backward supports stride 1 only".into()));
    }
    let [oz, oy, ox] = spec.out_dims([iz, iy, ix])?;
    let gshape = grad_out.shape5()?;
    if gshape != [nb, spec.out_ch, oz, oy, ox] {
        return Err(Error::Dims(format!(
            "grad_out shape {gshape:?} != expected {:?}",
            [nb, spec.out_ch, oz, oy, ox]
        )));
    }
    let pad = spec.pad_lo();
    let (kz, ky, kx) = (spec.kernel[0], spec.kernel[1], spec.kernel[2]);
    let (ci, co) = (spec.in_ch, spec.out_ch);
    let gv = grad_out.values();
    let xv = x.values();

    // Bias gradient: per-channel sum of grad_out.
    let mut gb = vec![0.0f64; co];
    for bi in 0..nb {
        for oc in 0..co {
            let base = ((bi * co + oc) * oz * oy) * ox;
            gb[oc] += gv[base..base + oz * oy * ox].iter().sum::<f64>();
        }
    }

    // Weight gradient: parallel over zo chunks, partials reduced in order.
    let wlen = spec.weight_len();
    let chunk = ((oz + 7) / 8).max(1);
    let partials: Vec<Vec<f64>> = (0..oz)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|zs| {
            let mut gw = vec![0.0f64; wlen];
            for &zo in zs {
                for bi in 0..nb {
                    for yo in 0..oy {
                        for icc in 0..ci {
                            for dz in 0..kz {
                                let zi = zo as i64 + dz as i64 - pad[0];
                                if zi < 0 || zi >= iz as i64 {
                                    continue;
                                }
                                for dy in 0..ky {
                                    let yi = yo as i64 + dy as i64 - pad[1];
                                    if yi < 0 || yi >= iy as i64 {
                                        continue;
                                    }
                                    let xb = (((bi * ci + icc) * iz + zi as usize) * iy + yi as usize) * ix;
                                    let xrow = &xv[xb..xb + ix];
                                    for dx in 0..kx {
                                        let off = dx as i64 - pad[2];
                                        let lo = (-off).max(0) as usize;
                                        let hi = ((ix as i64 - off).min(ox as i64)).max(0) as usize;
                                        if lo >= hi {
                                            continue;
                                        }
                                        let src = &xrow[(lo as i64 + off) as usize..(hi as i64 + off) as usize];
                                        for oc in 0..co {
                                            let gb_ = (((bi * co + oc) * oz + zo) * oy + yo) * ox;
                                            let grow = &gv[gb_ + lo..gb_ + hi];
                                            let mut acc = 0.0;
                                            for (g, s) in grow.iter().zip(src) {
                                                acc += g * s;
                                            }
                                            gw[(((oc * ci + icc) * kz + dz) * ky + dy) * kx + dx] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            gw
        })
        .collect();
    let mut gw = vec![0.0f64; wlen];
    for p in partials {
        for (a, b) in gw.iter_mut().zip(&p) {
            *a += b;
        }
    }

    // Input gradient: like the forward pass with flipped offsets.
    let mut tmp = vec![0.0f64; nb * iz * iy * ci * ix];
    let slab = iy * ci * ix;
    tmp.par_chunks_mut(slab).enumerate().for_each(|(t, slab_out)| {
        let bi = t / iz;
        let zi = t % iz;
        for yi in 0..iy {
            let acc = &mut slab_out[yi * ci * ix..(yi + 1) * ci * ix];
            for oc in 0..co {
                for dz in 0..kz {
                    let zo = zi as i64 + pad[0] - dz as i64;
                    if zo < 0 || zo >= oz as i64 {
                        continue;
                    }
                    for dy in 0..ky {
                        let yo = yi as i64 + pad[1] - dy as i64;
                        if yo < 0 || yo >= oy as i64 {
                            continue;
                        }
                        let gb_ = (((bi * co + oc) * oz + zo as usize) * oy + yo as usize) * ox;
                        let grow = &gv[gb_..gb_ + ox];
                        for dx in 0..kx {
                            let off = pad[2] - dx as i64; // xi + off = xo
                            let lo = (-off).max(0) as usize;
                            let hi = ((ox as i64 - off).min(ix as i64)).max(0) as usize;
                            if lo >= hi {
                                continue;
                            }
                            let src = &grow[(lo as i64 + off) as usize..(hi as i64 + off) as usize];
                            for icc in 0..ci {
                                let wv = w[(((oc * ci + icc) * kz + dz) * ky + dy) * kx + dx];
                                let dst = &mut acc[icc * ix + lo..icc * ix + hi];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    let gx = Tensor::new(x.dims().to_vec(), scatter_rows(&tmp, nb, ci, iz, iy, ix))?;
    Ok((gx, gw, gb))
}

/// Shape of a transposed convolution layer.
///
/// Output spatial dims are exactly `input * stride` per axis; when the kernel
/// is larger than the stride the full scatter is cropped by
/// `(kernel - stride) / 2` at the low side, matching the framework
/// convention the architectures were designed around.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TconvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl TconvSpec {
    pub fn weight_len(&self) -> usize {
        self.in_ch * self.out_ch * self.kernel[0] * self.kernel[1] * self.kernel[2]
    }

    fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.kernel[a] == 0 || self.stride[a] == 0 {
                return Err(Error::Contract("kernel and stride must be positive".into()));
            }
            if self.kernel[a] < self.stride[a] {
                return Err(Error::Contract(format!(
                    "transposed conv kernel {:?} must cover stride {:?}",
                    self.kernel, self.stride
                )));
            }
        }
        Ok(())
    }

    fn crop_lo(&self) -> [i64; 3] {
        [
            (self.kernel[0] as i64 - self.stride[0] as i64) / 2,
            (self.kernel[1] as i64 - self.stride[1] as i64) / 2,
            (self.kernel[2] as i64 - self.stride[2] as i64) / 2,
        ]
    }
}

fn check_tconv_inputs(x: &Tensor, w: &[f64], b: &[f64], spec: &TconvSpec) -> Result<[usize; 5]> {
    spec.validate()?;
    let shape = x.shape5()?;
    if shape[1] != spec.in_ch {
        return Err(Error::Dims(format!(
            "input has {} channels, transposed conv expects {}",
            shape[1], spec.in_ch
        )));
    }
    if w.len() != spec.weight_len() {
        return Err(Error::Dims(format!(
            "weight length {} != expected {}",
            w.len(),
            spec.weight_len()
        )));
    }
    if b.len() != spec.out_ch {
        return Err(Error::Dims(format!("bias length {} != out_ch {}", b.len(), spec.out_ch)));
    }
    Ok(shape)
}

/// Pairs (kernel offset, input index) feeding one output index.
fn tap_pairs(o: usize, crop: i64, k: usize, s: usize, n_in: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for dk in 0..k {
        let num = o as i64 + crop - dk as i64;
        if num >= 0 && num % s as i64 == 0 {
            let i = (num / s as i64) as usize;
            if i < n_in {
                pairs.push((dk, i));
            }
        }
    }
    pairs
}

/// Forward transposed convolution; upsamples by the stride.
pub fn tconv_forward(x: &Tensor, w: &[f64], b: &[f64], spec: &TconvSpec) -> Result<Tensor> {
    let [nb, _, iz, iy, ix] = check_tconv_inputs(x, w, b, spec)?;
    let (oz, oy, ox) = (iz * spec.stride[0], iy * spec.stride[1], ix * spec.stride[2]);
    let crop = spec.crop_lo();
    let (kz, ky, kx) = (spec.kernel[0], spec.kernel[1], spec.kernel[2]);
    let (ci, co) = (spec.in_ch, spec.out_ch);
    let xv = x.values();

    let mut tmp = vec![0.0f64; nb * oz * oy * co * ox];
    let slab = oy * co * ox;
    tmp.par_chunks_mut(slab).enumerate().for_each(|(t, slab_out)| {
        let bi = t / oz;
        let zo = t % oz;
        let zpairs = tap_pairs(zo, crop[0], kz, spec.stride[0], iz);
        for yo in 0..oy {
            let ypairs = tap_pairs(yo, crop[1], ky, spec.stride[1], iy);
            let acc = &mut slab_out[yo * co * ox..(yo + 1) * co * ox];
            for &(dz, zi) in &zpairs {
                for &(dy, yi) in &ypairs {
                    for icc in 0..ci {
                        let rb = (((bi * ci + icc) * iz + zi) * iy + yi) * ix;
                        let row = &xv[rb..rb + ix];
                        for dk in 0..kx {
                            let off = dk as i64 - crop[2]; // xo = xi * s + off
                            let sx = spec.stride[2] as i64;
                            // xi range with xo in [0, ox)
                            let lo = if off >= 0 { 0 } else { ((-off) + sx - 1) / sx };
                            let hi = ((ox as i64 - off + sx - 1) / sx).min(ix as i64);
                            if lo >= hi {
                                continue;
                            }
                            for oc in 0..co {
                                let wv = w[(((icc * co + oc) * kz + dz) * ky + dy) * kx + dk];
                                let a = &mut acc[oc * ox..(oc + 1) * ox];
                                for xi in lo..hi {
                                    a[(xi * sx + off) as usize] += wv * row[xi as usize];
                                }
                            }
                        }
                    }
                }
            }
            for oc in 0..co {
                let bv = b[oc];
                for v in &mut acc[oc * ox..(oc + 1) * ox] {
                    *v += bv;
                }
            }
        }
    });

    Tensor::new(vec![nb, co, oz, oy, ox], scatter_rows(&tmp, nb, co, oz, oy, ox))
}

/// Backward transposed convolution.
pub fn tconv_backward(
    grad_out: &Tensor,
    x: &Tensor,
    w: &[f64],
    spec: &TconvSpec,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let [nb, _, iz, iy, ix] = check_tconv_inputs(x, w, &vec![0.0; spec.out_ch], spec)?;
    let (oz, oy, ox) = (iz * spec.stride[0], iy * spec.stride[1], ix * spec.stride[2]);
    let gshape = grad_out.shape5()?;
    if gshape != [nb, spec.out_ch, oz, oy, ox] {
        return Err(Error::Dims(format!(
            "grad_out shape {gshape:?} != expected {:?}",
            [nb, spec.out_ch, oz, oy, ox]
        )));
    }
    let crop = spec.crop_lo();
    let (kz, ky, kx) = (spec.kernel[0], spec.kernel[1], spec.kernel[2]);
    let (ci, co) = (spec.in_ch, spec.out_ch);
    let gv = grad_out.values();
    let xv = x.values();

    let mut gb = vec![0.0f64; co];
    for bi in 0..nb {
        for oc in 0..co {
            let base = ((bi * co + oc) * oz * oy) * ox;
            gb[oc] += gv[base..base + oz * oy * ox].iter().sum::<f64>();
        }
    }

    // grad_x[b, ic, i] = sum over (oc, k) of w[ic, oc, k] * gout[b, oc, i*s + k - crop]
    let mut tmp = vec![0.0f64; nb * iz * iy * ci * ix];
    let slab = iy * ci * ix;
    tmp.par_chunks_mut(slab).enumerate().for_each(|(t, slab_out)| {
        let bi = t / iz;
        let zi = t % iz;
        for yi in 0..iy {
            let acc = &mut slab_out[yi * ci * ix..(yi + 1) * ci * ix];
            for dz in 0..kz {
                let zo = (zi * spec.stride[0]) as i64 + dz as i64 - crop[0];
                if zo < 0 || zo >= oz as i64 {
                    continue;
                }
                for dy in 0..ky {
                    let yo = (yi * spec.stride[1]) as i64 + dy as i64 - crop[1];
                    if yo < 0 || yo >= oy as i64 {
                        continue;
                    }
                    for oc in 0..co {
                        let gb_ = (((bi * co + oc) * oz + zo as usize) * oy + yo as usize) * ox;
                        let grow = &gv[gb_..gb_ + ox];
                        for dk in 0..kx {
                            let off = dk as i64 - crop[2];
                            let sx = spec.stride[2] as i64;
                            let lo = if off >= 0 { 0 } else { ((-off) + sx - 1) / sx };
                            let hi = ((ox as i64 - off + sx - 1) / sx).min(ix as i64);
                            if lo >= hi {
                                continue;
                            }
                            for icc in 0..ci {
                                let wv = w[(((icc * co + oc) * kz + dz) * ky + dy) * kx + dk];
                                let a = &mut acc[icc * ix..(icc + 1) * ix];
                                for xi in lo..hi {
                                    a[xi as usize] += wv * grow[(xi * sx + off) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    let gx = Tensor::new(x.dims().to_vec(), scatter_rows(&tmp, nb, ci, iz, iy, ix))?;

    // grad_w[ic, oc, k] = sum over (b, i) of x[b, ic, i] * gout[b, oc, i*s + k - crop]
    let wlen = spec.weight_len();
    let chunk = ((iz + 7) / 8).max(1);
    let partials: Vec<Vec<f64>> = (0..iz)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|zs| {
            let mut gw = vec![0.0f64; wlen];
            for &zi in zs {
                for bi in 0..nb {
                    for yi in 0..iy {
                        for dz in 0..kz {
                            let zo = (zi * spec.stride[0]) as i64 + dz as i64 - crop[0];
                            if zo < 0 || zo >= oz as i64 {
                                continue;
                            }
                            for dy in 0..ky {
                                let yo = (yi * spec.stride[1]) as i64 + dy as i64 - crop[1];
                                if yo < 0 || yo >= oy as i64 {
                                    continue;
                                }
                                for icc in 0..ci {
                                    let xb = (((bi * ci + icc) * iz + zi) * iy + yi) * ix;
                                    let xrow = &xv[xb..xb + ix];
                                    for dk in 0..kx {
                                        let off = dk as i64 - crop[2];
                                        let sx = spec.stride[2] as i64;
                                        let lo = if off >= 0 { 0 } else { ((-off) + sx - 1) / sx };
                                        let hi = ((ox as i64 - off + sx - 1) / sx).min(ix as i64);
                                        if lo >= hi {
                                            continue;
                                        }
                                        for oc in 0..co {
                                            let gb_ = (((bi * co + oc) * oz + zo as usize) * oy
                                                + yo as usize)
                                                * ox;
                                            let grow = &gv[gb_..gb_ + ox];
                                            let mut acc = 0.0;
                                            for xi in lo..hi {
                                                acc += xrow[xi as usize] * grow[(xi * sx + off) as usize];
                                            }
                                            gw[(((icc * co + oc) * kz + dz) * ky + dy) * kx + dk] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            gw
        })
        .collect();
    let mut gw = vec![0.0f64; wlen];
    for p in partials {
        for (a, b) in gw.iter_mut().zip(&p) {
            *a += b;
        }
    }

    Ok((gx, gw, gb))
}
