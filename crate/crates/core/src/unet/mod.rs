//! Network builders for the 3D and 2D U-Net architectures, the executor,
//! checkpoints, and the training loop.

mod checkpoint;
mod network;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use network::{AdamBundle, ForwardTrace, GradStore, LayerState, Network};
pub use train::{fit, history_csv, EpochStats, FitOptions, FitOutcome, ResumePoint, TrainConfig};

use crate::error::{Error, Result};
use crate::nn::LayerSpec;
use serde::{Deserialize, Serialize};

/// Dropout rate used between paired convolutions.
pub const DROPOUT_RATE: f64 = 0.2;
/// Batch-normalization epsilon and running-average momentum.
pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

/// An ordered layer chain with skip wiring, buildable in 2D or 3D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Spatial dimensionality, 2 or 3. 2D networks run with a singleton z
    /// axis and 1×k×k kernels.
    pub dims: u8,
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of pooling steps in the encoder.
    pub depth: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Validate channel arithmetic along the chain, skip ordering, and the
    /// sigmoid single-channel output contract; returns the spec on success.
    pub fn new(
        dims: u8,
        in_channels: usize,
        base_channels: usize,
        depth: usize,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        let spec = Self { dims, in_channels, base_channels, depth, layers };
        spec.channel_chain()?;
        if !matches!(spec.layers.last(), Some(LayerSpec::Sigmoid)) {
            return Err(Error::Contract("network must end with a sigmoid activation".into()));
        }
        let chain = spec.channel_chain()?;
        if *chain.last().unwrap() != 1 {
            return Err(Error::Contract(format!(
                "network must output 1 channel, got {}",
                chain.last().unwrap()
            )));
        }
        Ok(spec)
    }

    /// Output channel count after every layer; errors on inconsistent wiring.
    pub fn channel_chain(&self) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut cur = self.in_channels;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Conv { in_ch, out_ch, .. } => {
                    if *in_ch != cur {
                        return Err(Error::Contract(format!(
                            "layer {i}: conv expects {in_ch} channels, chain carries {cur}"
                        )));
                    }
                    *out_ch
                }
                LayerSpec::TransposedConv { in_ch, out_ch, .. } => {
                    if *in_ch != cur {
                        return Err(Error::Contract(format!(
                            "layer {i}: transposed conv expects {in_ch} channels, chain carries {cur}"
                        )));
                    }
                    *out_ch
                }
                LayerSpec::Concat { source } => {
                    if *source >= i {
                        return Err(Error::Contract(format!(
                            "layer {i}: concat source {source} must come earlier"
                        )));
                    }
                    cur + out[*source]
                }
                LayerSpec::BatchNorm { channels, .. } => {
                    if *channels != cur {
                        return Err(Error::Contract(format!(
                            "layer {i}: batchnorm over {channels} channels, chain carries {cur}"
                        )));
                    }
                    cur
                }
                _ => cur,
            };
            out.push(cur);
        }
        if out.is_empty() {
            return Err(Error::Contract("network has no layers".into()));
        }
        Ok(out)
    }

    /// Product of all pooling windows: input spatial dims must divide this.
    pub fn pool_divisor(&self) -> [usize; 3] {
        let mut d = [1usize; 3];
        for layer in &self.layers {
            if let LayerSpec::MaxPool { window } = layer {
                for a in 0..3 {
                    d[a] *= window[a];
                }
            }
        }
        d
    }
}

/// Exact number of trainable parameters in a network.
pub fn param_count(spec: &NetworkSpec) -> usize {
    spec.layers.iter().map(|l| l.param_count()).sum()
}

fn conv3(in_ch: usize, out_ch: usize, k: [usize; 3]) -> LayerSpec {
    LayerSpec::Conv { in_ch, out_ch, kernel: k, stride: [1, 1, 1], same_pad: true }
}

/// Build the two-stage paper's 3D segmentation architecture.
///
/// Three encoder levels of paired same-padded 3×3×3 convolutions (dropout
/// between the pair, ReLU after each), 2×2×2 max pooling between levels,
/// a decoder of 2×2×2 stride-2 transposed convolutions that halve the
/// channels followed by skip concatenation and paired convolutions, one
/// affine-free batch normalization, and a 1×1×1 sigmoid output convolution.
/// Accepts any input whose spatial dims are divisible by 4.
pub fn build_unet3d(in_channels: usize, base: usize) -> Result<NetworkSpec> {
    if !(1..=4).contains(&in_channels) {
        return Err(Error::Contract(format!(
            "3D network takes 1..=4 input channels, got {in_channels}"
        )));
    }
    if base == 0 {
        return Err(Error::Contract("base channel count must be positive".into()));
    }
    let k = [3, 3, 3];
    let (b1, b2, b4) = (base, base * 2, base * 4);
    let mut layers = Vec::new();
    let mut skips = Vec::new();

    // Encoder.
    for (cin, cout) in [(in_channels, b1), (b1, b2), (b2, b4)] {
        if cout != b1 {
            layers.push(LayerSpec::MaxPool { window: [2, 2, 2] });
        }
        layers.push(conv3(cin, cout, k));
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dropout { rate: DROPOUT_RATE });
        layers.push(conv3(cout, cout, k));
        layers.push(LayerSpec::Relu);
        skips.push(layers.len() - 1);
    }

    // Decoder.
    for (level, (cin, cout)) in [(b4, b2), (b2, b1)].into_iter().enumerate() {
        layers.push(LayerSpec::TransposedConv {
            in_ch: cin,
            out_ch: cout,
            kernel: [2, 2, 2],
            stride: [2, 2, 2],
        });
        layers.push(LayerSpec::Concat { source: skips[1 - level] });
        layers.push(conv3(cout * 2, cout, k));
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dropout { rate: DROPOUT_RATE });
        layers.push(conv3(cout, cout, k));
        layers.push(LayerSpec::Relu);
    }

    layers.push(LayerSpec::BatchNorm { channels: b1, epsilon: BN_EPSILON, momentum: BN_MOMENTUM });
    layers.push(conv3(b1, 1, [1, 1, 1]));
    layers.push(LayerSpec::Sigmoid);

    NetworkSpec::new(3, in_channels, base, 2, layers)
}

/// Build the 2D architecture: four encoder blocks of paired same-padded 3×3
/// convolutions with ReLU (channels base to 8·base), 2×2 pooling, a 16·base
/// bottleneck, a mirrored decoder of 3×3 stride-2 transposed convolutions
/// with skip concatenation, and a 1×1 sigmoid output. At base 64 the channel
/// ladder runs 64, 128, 256, 512, 1024. Inputs need spatial dims divisible
/// by 16.
pub fn build_unet2d(in_channels: usize, base: usize) -> Result<NetworkSpec> {
    if in_channels == 0 || base == 0 {
        return Err(Error::Contract("channel counts must be positive".into()));
    }
    let k = [1, 3, 3];
    let mut layers = Vec::new();
    let mut skips = Vec::new();
    let mut cur = in_channels;

    for level in 0..4 {
        let cout = base << level;
        layers.push(conv3(cur, cout, k));
        layers.push(LayerSpec::Relu);
        layers.push(conv3(cout, cout, k));
        layers.push(LayerSpec::Relu);
        skips.push(layers.len() - 1);
        layers.push(LayerSpec::MaxPool { window: [1, 2, 2] });
        cur = cout;
    }

    let bott = base * 16;
    layers.push(conv3(cur, bott, k));
    layers.push(LayerSpec::Relu);
    layers.push(conv3(bott, bott, k));
    layers.push(LayerSpec::Relu);
    cur = bott;

    for level in (0..4).rev() {
        let cout = base << level;
        layers.push(LayerSpec::TransposedConv {
            in_ch: cur,
            out_ch: cout,
            kernel: [1, 3, 3],
            stride: [1, 2, 2],
        });
        layers.push(LayerSpec::Concat { source: skips[level] });
        layers.push(conv3(cout * 2, cout, k));
        layers.push(LayerSpec::Relu);
        layers.push(conv3(cout, cout, k));
        layers.push(LayerSpec::Relu);
        cur = cout;
    }

    layers.push(conv3(base, 1, [1, 1, 1]));
    layers.push(LayerSpec::Sigmoid);

    NetworkSpec::new(2, in_channels, base, 4, layers)
}
