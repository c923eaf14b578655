//! Network executor: parameter storage, forward passes (with and without a
//! backward trace), reverse-mode backpropagation, and optimizer state.

use super::NetworkSpec;
use crate::error::{Error, Result};
use crate::nn::{
    batchnorm_backward, batchnorm_forward, conv_backward, conv_forward, dropout_backward,
    dropout_forward, he_init, maxpool_backward, maxpool_forward, relu_backward, relu_forward,
    sigmoid_backward, sigmoid_forward, tconv_backward, tconv_forward, upsample_nearest_backward,
    upsample_nearest_forward, AdamState, BnCache, BnStats, ConvSpec, LayerSpec, Mode, TconvSpec,
};
use crate::util::{derive_seed, quantize_f32_slice};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Per-layer parameter storage.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerState {
    Weights { w: Vec<f64>, b: Vec<f64> },
    Bn(BnStats),
    Stateless,
}

/// A network: an immutable spec plus mutable parameters and statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    state: Vec<LayerState>,
    out_channels: Vec<usize>,
}

/// Per-layer auxiliary data captured by a traced forward pass.
enum Aux {
    None,
    Pool(Vec<usize>),
    Dropout(Vec<f64>),
    Bn { cache: BnCache, updated: BnStats },
}

/// Everything backward needs: the input, every layer output, and aux data.
pub struct ForwardTrace {
    input: crate::nn::Tensor,
    outputs: Vec<crate::nn::Tensor>,
    aux: Vec<Aux>,
}

/// Accumulated parameter gradients, one slot per layer.
pub struct GradStore {
    grads: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl GradStore {
    pub fn zeros_like(net: &Network) -> Self {
        let grads = net
            .state
            .iter()
            .map(|s| match s {
                LayerState::Weights { w, b } => Some((vec![0.0; w.len()], vec![0.0; b.len()])),
                _ => None,
            })
            .collect();
        Self { grads }
    }

    pub fn zero(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.0.iter_mut().for_each(|v| *v = 0.0);
            g.1.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn layer(&self, i: usize) -> Option<&(Vec<f64>, Vec<f64>)> {
        self.grads[i].as_ref()
    }
}

/// Adam moments for every trainable layer (weights and bias separately).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamBundle {
    pub per_layer: Vec<Option<(AdamState, AdamState)>>,
}

impl AdamBundle {
    pub fn zeros_like(net: &Network) -> Self {
        let per_layer = net
            .state
            .iter()
            .map(|s| match s {
                LayerState::Weights { w, b } => {
                    Some((AdamState::new(w.len()), AdamState::new(b.len())))
                }
                _ => None,
            })
            .collect();
        Self { per_layer }
    }
}

use crate::nn::Tensor;

impl Network {
    /// HE-initialize a network; weights are quantized through f32 so the
    /// checkpoint format is lossless from the first step.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let out_channels = spec.channel_chain()?;
        let mut state = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let s = match layer {
                LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
                    let fan_in = in_ch * kernel[0] * kernel[1] * kernel[2];
                    let n = out_ch * fan_in;
                    let mut w = he_init(n, fan_in, derive_seed(seed, i as u64));
                    quantize_f32_slice(&mut w);
                    LayerState::Weights { w, b: vec![0.0; *out_ch] }
                }
                LayerSpec::TransposedConv { in_ch, out_ch, kernel, .. } => {
                    let fan_in = in_ch * kernel[0] * kernel[1] * kernel[2];
                    let n = out_ch * fan_in;
                    let mut w = he_init(n, fan_in, derive_seed(seed, i as u64));
                    quantize_f32_slice(&mut w);
                    LayerState::Weights { w, b: vec![0.0; *out_ch] }
                }
                LayerSpec::BatchNorm { channels, .. } => LayerState::Bn(BnStats::new(*channels)),
                _ => LayerState::Stateless,
            };
            state.push(s);
        }
        Ok(Self { spec, state, out_channels })
    }

    /// Rebuild a network from externally supplied state (checkpoint loading).
    pub(crate) fn from_state(spec: NetworkSpec, state: Vec<LayerState>) -> Result<Self> {
        let out_channels = spec.channel_chain()?;
        if state.len() != spec.layers.len() {
            return Err(Error::Format("layer state count mismatch".into()));
        }
        Ok(Self { spec, state, out_channels })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub(crate) fn state(&self) -> &[LayerState] {
        &self.state
    }

    pub(crate) fn state_mut(&mut self) -> &mut [LayerState] {
        &mut self.state
    }

    /// Total trainable parameter count (matches `param_count` on the spec).
    pub fn num_params(&self) -> usize {
        self.state
            .iter()
            .map(|s| match s {
                LayerState::Weights { w, b } => w.len() + b.len(),
                _ => 0,
            })
            .sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, nz, ny, nx] = x.shape5()?;
        if c != self.spec.in_channels {
            return Err(Error::Dims(format!(
                "network expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let div = self.spec.pool_divisor();
        let dims = [nz, ny, nx];
        for a in 0..3 {
            if dims[a] % div[a] != 0 {
                return Err(Error::Dims(format!(
                    "input spatial dims {dims:?} must be divisible by {div:?}"
                )));
            }
        }
        Ok(())
    }

    fn conv_spec(layer: &LayerSpec) -> Option<ConvSpec> {
        match layer {
            LayerSpec::Conv { in_ch, out_ch, kernel, stride, same_pad } => Some(ConvSpec {
                in_ch: *in_ch,
                out_ch: *out_ch,
                kernel: *kernel,
                stride: *stride,
                same_pad: *same_pad,
            }),
            _ => None,
        }
    }

    fn tconv_spec(layer: &LayerSpec) -> Option<TconvSpec> {
        match layer {
            LayerSpec::TransposedConv { in_ch, out_ch, kernel, stride } => Some(TconvSpec {
                in_ch: *in_ch,
                out_ch: *out_ch,
                kernel: *kernel,
                stride: *stride,
            }),
            _ => None,
        }
    }

    fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let [nb, ca, z, y, x] = a.shape5()?;
        let [nb2, cb, z2, y2, x2] = b.shape5()?;
        if nb != nb2 || [z, y, x] != [z2, y2, x2] {
            return Err(Error::Dims(format!(
                "concat spatial mismatch: {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
        let spatial = z * y * x;
        let mut out = Vec::with_capacity((ca + cb) * nb * spatial);
        for bi in 0..nb {
            out.extend_from_slice(&a.values()[bi * ca * spatial..(bi + 1) * ca * spatial]);
            out.extend_from_slice(&b.values()[bi * cb * spatial..(bi + 1) * cb * spatial]);
        }
        Tensor::new(vec![nb, ca + cb, z, y, x], out)
    }

    fn split_channels(g: &Tensor, ca: usize, cb: usize) -> Result<(Tensor, Tensor)> {
        let [nb, c, z, y, x] = g.shape5()?;
        if c != ca + cb {
            return Err(Error::Dims("split channel mismatch".into()));
        }
        let spatial = z * y * x;
        let mut va = Vec::with_capacity(nb * ca * spatial);
        let mut vb = Vec::with_capacity(nb * cb * spatial);
        for bi in 0..nb {
            let base = bi * c * spatial;
            va.extend_from_slice(&g.values()[base..base + ca * spatial]);
            vb.extend_from_slice(&g.values()[base + ca * spatial..base + c * spatial]);
        }
        Ok((
            Tensor::new(vec![nb, ca, z, y, x], va)?,
            Tensor::new(vec![nb, cb, z, y, x], vb)?,
        ))
    }

    /// Traced forward pass; the trace retains every intermediate output.
    ///
    /// Dropout draws from `rng`; `dropout_override` replaces the spec rate
    /// when the training configuration asks for a different one. Train-mode
    /// batch-normalization statistics are recorded in the trace and applied
    /// by [`Network::commit_bn`], so the pass itself never mutates the net.
    pub fn forward(
        &self,
        x: &Tensor,
        mode: Mode,
        dropout_override: Option<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, ForwardTrace)> {
        self.check_input(x)?;
        let n = self.spec.layers.len();
        let mut outputs: Vec<Tensor> = Vec::with_capacity(n);
        let mut aux: Vec<Aux> = Vec::with_capacity(n);
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let input = if i == 0 { x } else { &outputs[i - 1] };
            let (out, a) = self.apply_layer(i, layer, input, &outputs, mode, dropout_override, rng)?;
            outputs.push(out);
            aux.push(a);
        }
        let final_out = outputs.last().unwrap().clone();
        Ok((final_out, ForwardTrace { input: x.clone(), outputs, aux }))
    }

    /// Memory-lean inference: intermediate outputs are dropped as soon as no
    /// later layer (including skip concatenations) needs them.
    pub fn forward_infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let n = self.spec.layers.len();
        // Last consumer of each layer output.
        let mut last_use: Vec<usize> = (0..n).map(|i| if i + 1 < n { i + 1 } else { i }).collect();
        for (j, layer) in self.spec.layers.iter().enumerate() {
            if let LayerSpec::Concat { source } = layer {
                last_use[*source] = last_use[*source].max(j);
            }
        }
        let mut slots: Vec<Option<Tensor>> = vec![None; n];
        let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in infer mode
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let out = {
                let input = if i == 0 {
                    x
                } else {
                    slots[i - 1].as_ref().expect("previous output alive")
                };
                let (out, _) = self.apply_layer_ref(
                    i,
                    layer,
                    input,
                    |s| slots[s].as_ref().expect("skip output alive"),
                    Mode::Infer,
                    None,
                    &mut rng,
                )?;
                out
            };
            slots[i] = Some(out);
            for (k, slot) in slots.iter_mut().enumerate().take(i + 1) {
                if last_use[k] <= i && k != i {
                    *slot = None;
                }
            }
        }
        Ok(slots[n - 1].take().expect("final output"))
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_layer(
        &self,
        i: usize,
        layer: &LayerSpec,
        input: &Tensor,
        outputs: &[Tensor],
        mode: Mode,
        dropout_override: Option<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Aux)> {
        self.apply_layer_ref(i, layer, input, |s| &outputs[s], mode, dropout_override, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_layer_ref<'a, F>(
        &self,
        i: usize,
        layer: &LayerSpec,
        input: &Tensor,
        skip: F,
        mode: Mode,
        dropout_override: Option<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Aux)>
    where
        F: Fn(usize) -> &'a Tensor,
    {
        match layer {
            LayerSpec::Conv { .. } => {
                let spec = Self::conv_spec(layer).unwrap();
                let LayerState::Weights { w, b } = &self.state[i] else {
                    return Err(Error::State(format!("layer {i} missing weights")));
                };
                Ok((conv_forward(input, w, b, &spec)?, Aux::None))
            }
            LayerSpec::TransposedConv { .. } => {
                let spec = Self::tconv_spec(layer).unwrap();
                let LayerState::Weights { w, b } = &self.state[i] else {
                    return Err(Error::State(format!("layer {i} missing weights")));
                };
                Ok((tconv_forward(input, w, b, &spec)?, Aux::None))
            }
            LayerSpec::Relu => Ok((relu_forward(input), Aux::None)),
            LayerSpec::Sigmoid => Ok((sigmoid_forward(input), Aux::None)),
            LayerSpec::Dropout { rate } => {
                let rate = dropout_override.unwrap_or(*rate);
                let (out, mask) = dropout_forward(input, rate, mode, rng)?;
                Ok((out, Aux::Dropout(mask)))
            }
            LayerSpec::MaxPool { window } => {
                let (out, argmax) = maxpool_forward(input, *window)?;
                Ok((out, Aux::Pool(argmax)))
            }
            LayerSpec::UpsampleNearest { factor } => {
                Ok((upsample_nearest_forward(input, *factor)?, Aux::None))
            }
            LayerSpec::Concat { source } => {
                Ok((Self::concat_channels(input, skip(*source))?, Aux::None))
            }
            LayerSpec::BatchNorm { epsilon, momentum, .. } => {
                let LayerState::Bn(stats) = &self.state[i] else {
                    return Err(Error::State(format!("layer {i} missing batchnorm stats")));
                };
                let mut updated = stats.clone();
                let (out, cache) = batchnorm_forward(input, &mut updated, *epsilon, *momentum, mode)?;
                Ok((out, Aux::Bn { cache, updated }))
            }
        }
    }

    /// Apply the running-statistics updates recorded by a train-mode forward.
    pub fn commit_bn(&mut self, trace: &ForwardTrace) {
        for (i, a) in trace.aux.iter().enumerate() {
            if let Aux::Bn { updated, .. } = a {
                if let LayerState::Bn(stats) = &mut self.state[i] {
                    *stats = updated.clone();
                }
            }
        }
    }

    /// Reverse-mode backpropagation. Accumulates parameter gradients into
    /// `grads` and returns the gradient with respect to the network input.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_out: Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let n = self.spec.layers.len();
        let mut pending: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let mut cur = grad_out;
        for i in (0..n).rev() {
            if let Some(p) = pending[i].take() {
                let vals = cur.values_mut();
                if vals.len() != p.len() {
                    return Err(Error::Dims("pending skip gradient shape mismatch".into()));
                }
                for (a, b) in vals.iter_mut().zip(&p) {
                    *a += b;
                }
            }
            let input = if i == 0 { &trace.input } else { &trace.outputs[i - 1] };
            cur = match &self.spec.layers[i] {
                LayerSpec::Conv { .. } => {
                    let spec = Self::conv_spec(&self.spec.layers[i]).unwrap();
                    let LayerState::Weights { w, .. } = &self.state[i] else {
                        return Err(Error::State(format!("layer {i} missing weights")));
                    };
                    let (gx, gw, gb) = conv_backward(&cur, input, w, &spec)?;
                    let slot = grads.grads[i].as_mut().expect("conv has grad slot");
                    for (a, b) in slot.0.iter_mut().zip(&gw) {
                        *a += b;
                    }
                    for (a, b) in slot.1.iter_mut().zip(&gb) {
                        *a += b;
                    }
                    gx
                }
                LayerSpec::TransposedConv { .. } => {
                    let spec = Self::tconv_spec(&self.spec.layers[i]).unwrap();
                    let LayerState::Weights { w, .. } = &self.state[i] else {
                        return Err(Error::State(format!("layer {i} missing weights")));
                    };
                    let (gx, gw, gb) = tconv_backward(&cur, input, w, &spec)?;
                    let slot = grads.grads[i].as_mut().expect("tconv has grad slot");
                    for (a, b) in slot.0.iter_mut().zip(&gw) {
                        *a += b;
                    }
                    for (a, b) in slot.1.iter_mut().zip(&gb) {
                        *a += b;
                    }
                    gx
                }
                LayerSpec::Relu => relu_backward(&cur, input)?,
                LayerSpec::Sigmoid => sigmoid_backward(&cur, &trace.outputs[i])?,
                LayerSpec::Dropout { .. } => {
                    let Aux::Dropout(mask) = &trace.aux[i] else {
                        return Err(Error::State("dropout mask missing from trace".into()));
                    };
                    dropout_backward(&cur, mask)?
                }
                LayerSpec::MaxPool { .. } => {
                    let Aux::Pool(argmax) = &trace.aux[i] else {
                        return Err(Error::State("maxpool argmax missing from trace".into()));
                    };
                    maxpool_backward(&cur, argmax, input.dims())?
                }
                LayerSpec::UpsampleNearest { factor } => {
                    upsample_nearest_backward(&cur, *factor, input.dims())?
                }
                LayerSpec::Concat { source } => {
                    let ca = if i == 0 { self.spec.in_channels } else { self.out_channels[i - 1] };
                    let cb = self.out_channels[*source];
                    let (ga, gb) = Self::split_channels(&cur, ca, cb)?;
                    match &mut pending[*source] {
                        Some(p) => {
                            for (a, b) in p.iter_mut().zip(gb.values()) {
                                *a += b;
                            }
                        }
                        slot @ None => *slot = Some(gb.values().to_vec()),
                    }
                    ga
                }
                LayerSpec::BatchNorm { .. } => {
                    let Aux::Bn { cache, .. } = &trace.aux[i] else {
                        return Err(Error::State("batchnorm cache missing from trace".into()));
                    };
                    batchnorm_backward(&cur, input, cache)?
                }
            };
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_diff, max_rel_error};
    use crate::nn::{dice_loss, LayerSpec};
    use crate::unet::{build_unet3d, NetworkSpec};
    use rand::Rng;

    fn tiny_spec() -> NetworkSpec {
        // Exercises every layer kind in one chain.
        NetworkSpec::new(
            3,
            2,
            2,
            1,
            vec![
                LayerSpec::Conv {
                    in_ch: 2,
                    out_ch: 2,
                    kernel: [3, 3, 3],
                    stride: [1, 1, 1],
                    same_pad: true,
                },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: 0.2 },
                LayerSpec::MaxPool { window: [2, 2, 2] },
                LayerSpec::Conv {
                    in_ch: 2,
                    out_ch: 4,
                    kernel: [3, 3, 3],
                    stride: [1, 1, 1],
                    same_pad: true,
                },
                LayerSpec::Relu,
                LayerSpec::TransposedConv {
                    in_ch: 4,
                    out_ch: 2,
                    kernel: [2, 2, 2],
                    stride: [2, 2, 2],
                },
                LayerSpec::Concat { source: 1 },
                LayerSpec::BatchNorm { channels: 4, epsilon: 1e-3, momentum: 0.9 },
                LayerSpec::Conv {
                    in_ch: 4,
                    out_ch: 1,
                    kernel: [1, 1, 1],
                    stride: [1, 1, 1],
                    same_pad: true,
                },
                LayerSpec::Sigmoid,
            ],
        )
        .unwrap()
    }

    #[test]
    fn forward_and_infer_agree() {
        let net = Network::init(tiny_spec(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(
            vec![1, 2, 4, 4, 4],
            (0..128).map(|i| ((i * 31 % 17) as f64 - 8.0) / 8.0).collect(),
        )
        .unwrap();
        let (y, _) = net.forward(&x, Mode::Infer, None, &mut rng).unwrap();
        let y2 = net.forward_infer(&x).unwrap();
        assert_eq!(y.values(), y2.values());
        assert_eq!(y.shape5().unwrap(), [1, 1, 4, 4, 4]);
        assert!(y.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn whole_network_gradient_matches_finite_differences() {
        // End-to-end check through every layer kind against the dice loss,
        // with dropout frozen by reseeding the rng per evaluation.
        let mut net = Network::init(tiny_spec(), 5).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::new(vec![2, 2, 4, 4, 4], (0..256).map(|_| r.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let t = Tensor::new(
            vec![2, 1, 4, 4, 4],
            (0..128).map(|_| if r.gen_bool(0.3) { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();

        let loss_with = |net: &Network| {
            let mut rng = ChaCha8Rng::seed_from_u64(99); // frozen dropout mask
            let (p, _) = net.forward(&x, Mode::Train, None, &mut rng).unwrap();
            let (e, _) = dice_loss(&p, &t, 1.0).unwrap();
            1.0 - e
        };

        // Analytic gradients.
        let mut grads = GradStore::zeros_like(&net);
        {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let (p, trace) = net.forward(&x, Mode::Train, None, &mut rng).unwrap();
            let (_, ge) = dice_loss(&p, &t, 1.0).unwrap();
            let neg =
                Tensor::new(ge.dims().to_vec(), ge.values().iter().map(|v| -v).collect()).unwrap();
            net.backward(&trace, neg, &mut grads).unwrap();
        }

        // Check a sample of parameters in every trainable layer.
        for li in [0usize, 4, 6, 9] {
            let (gw, gb) = grads.layer(li).unwrap().clone();
            let n_params = gw.len();
            let picks: Vec<usize> =
                (0..n_params).step_by((n_params / 5).max(1)).take(5).collect();
            for &pi in &picks {
                let orig = match &net.state()[li] {
                    LayerState::Weights { w, .. } => w[pi],
                    _ => unreachable!(),
                };
                let h = 1e-5;
                let mut f = |delta: f64| {
                    if let LayerState::Weights { w, .. } = &mut net.state_mut()[li] {
                        w[pi] = orig + delta;
                    }
                    let v = loss_with(&net);
                    if let LayerState::Weights { w, .. } = &mut net.state_mut()[li] {
                        w[pi] = orig;
                    }
                    v
                };
                let num = (f(h) - f(-h)) / (2.0 * h);
                let err = max_rel_error(&[gw[pi]], &[num]);
                assert!(err < 1e-4, "layer {li} w[{pi}]: analytic {} vs fd {num}", gw[pi]);
            }
            // Bias gradients.
            let orig = match &net.state()[li] {
                LayerState::Weights { b, .. } => b[0],
                _ => unreachable!(),
            };
            let h = 1e-5;
            let mut f = |delta: f64| {
                if let LayerState::Weights { b, .. } = &mut net.state_mut()[li] {
                    b[0] = orig + delta;
                }
                let v = loss_with(&net);
                if let LayerState::Weights { b, .. } = &mut net.state_mut()[li] {
                    b[0] = orig;
                }
                v
            };
            let num = (f(h) - f(-h)) / (2.0 * h);
            assert!(max_rel_error(&[gb[0]], &[num]) < 1e-4, "layer {li} bias: {} vs {num}", gb[0]);
        }

        // Input gradient against finite differences on a few voxels.
        let mut grads = GradStore::zeros_like(&net);
        let gx = {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let (p, trace) = net.forward(&x, Mode::Train, None, &mut rng).unwrap();
            let (_, ge) = dice_loss(&p, &t, 1.0).unwrap();
            let neg =
                Tensor::new(ge.dims().to_vec(), ge.values().iter().map(|v| -v).collect()).unwrap();
            net.backward(&trace, neg, &mut grads).unwrap()
        };
        let f_in = |vals: &[f64]| {
            let xt = Tensor::new(x.dims().to_vec(), vals.to_vec()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let (p, _) = net.forward(&xt, Mode::Train, None, &mut rng).unwrap();
            let (e, _) = dice_loss(&p, &t, 1.0).unwrap();
            1.0 - e
        };
        let num = central_diff(f_in, x.values(), 1e-5);
        let picks: Vec<usize> = (0..x.len()).step_by(41).collect();
        for &i in &picks {
            assert!(
                max_rel_error(&[gx.values()[i]], &[num[i]]) < 1e-4,
                "input grad [{i}]: {} vs {}",
                gx.values()[i],
                num[i]
            );
        }
    }

    #[test]
    fn canonical_3d_forward_shape_contract() {
        // Desk-scale base keeps the same in/out contract as the full net.
        let net = Network::init(build_unet3d(3, 4).unwrap(), 1).unwrap();
        let x = Tensor::zeros(vec![1, 3, 28, 36, 36]).unwrap();
        let y = net.forward_infer(&x).unwrap();
        assert_eq!(y.shape5().unwrap(), [1, 1, 28, 36, 36]);
        assert!(y.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn indivisible_dims_are_a_shape_error() {
        let net = Network::init(build_unet3d(3, 4).unwrap(), 1).unwrap();
        let x = Tensor::zeros(vec![1, 3, 27, 36, 36]).unwrap();
        assert!(matches!(net.forward_infer(&x), Err(Error::Dims(_))));
    }

    #[test]
    fn num_params_matches_spec_count() {
        let spec = build_unet3d(3, 8).unwrap();
        let count = crate::unet::param_count(&spec);
        let net = Network::init(spec, 0).unwrap();
        assert_eq!(net.num_params(), count);
        assert_eq!(count, 85_449);
    }
}
