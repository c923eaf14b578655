//! Model checkpoints.
//!
//! Format: magic `MCK1`, little-endian u32 length of the JSON-serialized
//! network spec, the spec text, then per layer in spec order the parameter
//! arrays as little-endian f32 (convolutions: weights then bias; batch
//! normalization: running mean then running variance), then a u8 flag and,
//! when set, the Adam state (u64 step count plus first/second moments per
//! parameter array).
//!
//! Training state is quantized through f32 after every optimizer step, so
//! saving and reloading a checkpoint reproduces the in-memory state exactly.

use super::network::{AdamBundle, LayerState, Network};
use super::NetworkSpec;
use crate::error::{Error, Result};
use crate::nn::AdamState;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MCK_MAGIC: &[u8; 4] = b"MCK1";

fn write_f32s(w: &mut impl Write, vals: &[f64]) -> Result<()> {
    for &v in vals {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format("truncated checkpoint payload".into()))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Save a checkpoint atomically (write to a temp file, then rename).
pub fn save_checkpoint(net: &Network, adam: Option<&AdamBundle>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("mck.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MCK_MAGIC)?;
        let spec_json = serde_json::to_vec(net.spec())
            .map_err(|e| Error::Format(format!("spec serialization failed: {e}")))?;
        w.write_all(&(spec_json.len() as u32).to_le_bytes())?;
        w.write_all(&spec_json)?;
        for state in net.state() {
            match state {
                LayerState::Weights { w: wt, b } => {
                    write_f32s(&mut w, wt)?;
                    write_f32s(&mut w, b)?;
                }
                LayerState::Bn(stats) => {
                    write_f32s(&mut w, &stats.running_mean)?;
                    write_f32s(&mut w, &stats.running_var)?;
                }
                LayerState::Stateless => {}
            }
        }
        match adam {
            None => w.write_all(&[0u8])?,
            Some(bundle) => {
                w.write_all(&[1u8])?;
                for slot in bundle.per_layer.iter().flatten() {
                    for st in [&slot.0, &slot.1] {
                        w.write_all(&st.t.to_le_bytes())?;
                        write_f32s(&mut w, &st.m)?;
                        write_f32s(&mut w, &st.v)?;
                    }
                }
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint saved by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(Network, Option<AdamBundle>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated checkpoint: magic".into()))?;
    if &magic != MCK_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected \"MCK1\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)
        .map_err(|_| Error::Format("truncated checkpoint: spec length".into()))?;
    let spec_len = u32::from_le_bytes(len4) as usize;
    let mut spec_bytes = vec![0u8; spec_len];
    r.read_exact(&mut spec_bytes)
        .map_err(|_| Error::Format("truncated checkpoint: spec".into()))?;
    let spec: NetworkSpec = serde_json::from_slice(&spec_bytes)
        .map_err(|e| Error::Format(format!("invalid network spec in checkpoint: {e}")))?;

    let mut state = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        use crate::nn::LayerSpec;
        let s = match layer {
            LayerSpec::Conv { in_ch, out_ch, kernel, .. } => LayerState::Weights {
                w: read_f32s(&mut r, out_ch * in_ch * kernel[0] * kernel[1] * kernel[2])?,
                b: read_f32s(&mut r, *out_ch)?,
            },
            LayerSpec::TransposedConv { in_ch, out_ch, kernel, .. } => LayerState::Weights {
                w: read_f32s(&mut r, in_ch * out_ch * kernel[0] * kernel[1] * kernel[2])?,
                b: read_f32s(&mut r, *out_ch)?,
            },
            LayerSpec::BatchNorm { channels, .. } => {
                LayerState::Bn(crate::nn::BnStats {
                    running_mean: read_f32s(&mut r, *channels)?,
                    running_var: read_f32s(&mut r, *channels)?,
                })
            }
            _ => LayerState::Stateless,
        };
        state.push(s);
    }
    let net = Network::from_state(spec, state)?;

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)
        .map_err(|_| Error::Format("truncated checkpoint: adam flag".into()))?;
    let adam = match flag[0] {
        0 => None,
        1 => {
            let mut bundle = AdamBundle::zeros_like(&net);
            for slot in bundle.per_layer.iter_mut().flatten() {
                for st in [&mut slot.0, &mut slot.1] {
                    let mut t8 = [0u8; 8];
                    r.read_exact(&mut t8)
                        .map_err(|_| Error::Format("truncated checkpoint: adam state".into()))?;
                    let n = st.m.len();
                    *st = AdamState {
                        t: u64::from_le_bytes(t8),
                        m: read_f32s(&mut r, n)?,
                        v: read_f32s(&mut r, n)?,
                    };
                }
            }
            Some(bundle)
        }
        other => return Err(Error::Format(format!("unknown adam flag {other}"))),
    };
    Ok((net, adam))
}
