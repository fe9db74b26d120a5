//! Strided temporal convolution stack in the style of the wav2vec 2.0 feature
//! encoder: valid 1-D convolutions, per-channel group normalization on the
//! first layer, GELU activations.
//!
//! Activations are time-major (`frames × channels`). Each layer runs as one
//! GEMM over an im2col view of its input.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, ShapeBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    /// One group per channel, statistics over time, first layer only.
    GroupNormFirstLayer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStackConfig {
    pub layers: Vec<ConvLayerSpec>,
    pub activation: Activation,
    pub normalization: Normalization,
}

impl Default for ConvStackConfig {
    fn default() -> Self {
        Self::wav2vec2_base()
    }
}

impl ConvStackConfig {
    /// Seven layers, 512 channels, kernels 10,3,3,3,3,2,2 and strides
    /// 5,2,2,2,2,2,2 (320× downsampling, 400-sample receptive field).
    pub fn wav2vec2_base() -> Self {
        let kernels = [10, 3, 3, 3, 3, 2, 2];
        let strides = [5, 2, 2, 2, 2, 2, 2];
        let layers = kernels
            .iter()
            .zip(strides)
            .enumerate()
            .map(|(i, (&kernel, stride))| ConvLayerSpec {
                in_channels: if i == 0 { 1 } else { 512 },
                out_channels: 512,
                kernel,
                stride,
            })
            .collect();
        Self {
            layers,
            activation: Activation::Gelu,
            normalization: Normalization::GroupNormFirstLayer,
        }
    }

    /// Builds a stack from (kernel, stride) pairs with uniform width.
    pub fn uniform(channels: usize, shape: &[(usize, usize)]) -> Self {
        let layers = shape
            .iter()
            .enumerate()
            .map(|(i, &(kernel, stride))| ConvLayerSpec {
                in_channels: if i == 0 { 1 } else { channels },
                out_channels: channels,
                kernel,
                stride,
            })
            .collect();
        Self {
            layers,
            activation: Activation::Gelu,
            normalization: Normalization::GroupNormFirstLayer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::InvalidConfig("conv stack has no layers".into()))?;
        if first.in_channels != 1 {
            return Err(Error::ShapeMismatch {
                layer: 0,
                detail: format!("first layer must take 1 channel, takes {}", first.in_channels),
            });
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.stride < 1 || l.kernel < l.stride || l.out_channels == 0 {
                return Err(Error::InvalidConfig(format!(
                    "layer {i}: need kernel >= stride >= 1 and out_channels > 0"
                )));
            }
            if let Some(next) = self.layers.get(i + 1) {
                if next.in_channels != l.out_channels {
                    return Err(Error::ShapeMismatch {
                        layer: i + 1,
                        detail: format!(
                            "takes {} channels but layer {i} emits {}",
                            next.in_channels, l.out_channels
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    /// Input samples per output frame.
    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    /// Shortest input that yields one output frame.
    pub fn receptive_field(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .fold(1, |len, l| (len - 1) * l.stride + l.kernel)
    }

    /// Frame count after every layer, `None` if the input is too short.
    pub fn output_frames(&self, input_len: usize) -> Option<usize> {
        self.layers.iter().try_fold(input_len, |len, l| {
            (len >= l.kernel).then(|| (len - l.kernel) / l.stride + 1)
        })
    }

    fn has_norm(&self, layer: usize) -> bool {
        layer == 0 && self.normalization == Normalization::GroupNormFirstLayer
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerParams {
    /// `out × in × kernel`
    pub weight: Array3<f64>,
    pub bias: Array1<f64>,
    pub norm: Option<GroupNormParams>,
}

impl ConvLayerParams {
    fn zeros(spec: &ConvLayerSpec, norm: bool) -> Self {
        Self {
            weight: Array3::zeros((spec.out_channels, spec.in_channels, spec.kernel)),
            bias: Array1::zeros(spec.out_channels),
            norm: norm.then(|| GroupNormParams {
                gamma: Array1::zeros(spec.out_channels),
                beta: Array1::zeros(spec.out_channels),
            }),
        }
    }

    /// `(kernel·in) × out` matrix matching the im2col column order.
    fn weight_matrix(&self) -> Array2<f64> {
        let (out, inp, k) = self.weight.dim();
        let mut m = Array2::zeros((k * inp, out));
        for o in 0..out {
            for c in 0..inp {
                for j in 0..k {
                    m[[j * inp + c, o]] = self.weight[[o, c, j]];
                }
            }
        }
        m
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ];
        if let Some(n) = &self.norm {
            v.push(n.gamma.as_slice().expect("standard layout"));
            v.push(n.beta.as_slice().expect("standard layout"));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ];
        if let Some(n) = &mut self.norm {
            v.push(n.gamma.as_slice_mut().expect("standard layout"));
            v.push(n.beta.as_slice_mut().expect("standard layout"));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStackParams {
    pub layers: Vec<ConvLayerParams>,
    pub frozen: bool,
}

/// Parameter-shaped gradients of a conv stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStackGrads {
    pub layers: Vec<ConvLayerParams>,
}

impl ConvStackParams {
    /// Kaiming-uniform weights (bound √(6 / fan_in)), zero biases, unit
    /// gain and zero shift in the normalization.
    pub fn kaiming_uniform(config: &ConvStackConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layers
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let mut p = ConvLayerParams::zeros(spec, config.has_norm(i));
                let bound = (6.0 / (spec.in_channels * spec.kernel) as f64).sqrt();
                p.weight.mapv_inplace(|_| rng.random_range(-bound..bound));
                if let Some(n) = &mut p.norm {
                    n.gamma.fill(1.0);
                }
                p
            })
            .collect();
        Ok(Self { layers, frozen: false })
    }

    pub fn zeros(config: &ConvStackConfig) -> Self {
        Self {
            layers: config
                .layers
                .iter()
                .enumerate()
                .map(|(i, spec)| ConvLayerParams::zeros(spec, config.has_norm(i)))
                .collect(),
            frozen: false,
        }
    }

    /// Checks that every tensor has the shape `config` prescribes.
    pub fn check_shapes(&self, config: &ConvStackConfig) -> Result<()> {
        if self.layers.len() != config.layers.len() {
            return Err(Error::ShapeMismatch {
                layer: self.layers.len().min(config.layers.len()),
                detail: format!(
                    "{} layers present, configuration has {}",
                    self.layers.len(),
                    config.layers.len()
                ),
            });
        }
        for (i, (p, spec)) in self.layers.iter().zip(&config.layers).enumerate() {
            let want = (spec.out_channels, spec.in_channels, spec.kernel);
            if p.weight.dim() != want {
                return Err(Error::ShapeMismatch {
                    layer: i,
                    detail: format!("weight is {:?}, expected {want:?}", p.weight.dim()),
                });
            }
            if p.bias.len() != spec.out_channels {
                return Err(Error::ShapeMismatch {
                    layer: i,
                    detail: format!("bias has {} entries, expected {}", p.bias.len(), spec.out_channels),
                });
            }
            match (&p.norm, config.has_norm(i)) {
                (Some(n), true) if n.gamma.len() == spec.out_channels && n.beta.len() == spec.out_channels => {}
                (None, false) => {}
                _ => {
                    return Err(Error::ShapeMismatch {
                        layer: i,
                        detail: "normalization parameters do not match configuration".into(),
                    })
                }
            }
        }
        if self.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("conv stack parameter".into()));
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(ConvLayerParams::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(ConvLayerParams::tensors_mut).collect()
    }
}

impl ConvStackGrads {
    pub fn zeros(config: &ConvStackConfig) -> Self {
        Self {
            layers: ConvStackParams::zeros(config).layers,
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(ConvLayerParams::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(ConvLayerParams::tensors_mut).collect()
    }

    pub fn add_assign(&mut self, other: &ConvStackGrads) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// `frames × features` output of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array2<f64>,
    /// Frames per second.
    pub frame_rate: f64,
}

impl FeatureMap {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Per-layer values kept by a training forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    /// Layer inputs; entry 0 is the waveform as a one-column matrix.
    inputs: Vec<Array2<f64>>,
    /// Post-normalization, pre-activation values.
    pre_activations: Vec<Array2<f64>>,
    norms: Vec<Option<NormCache>>,
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

fn activate(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Gelu => 0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2)),
        Activation::Relu => x.max(0.0),
    }
}

fn activate_grad(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Gelu => {
            let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            cdf + x * pdf
        }
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// im2col of a time-major input as an overlapping strided view: row `t`
/// is the contiguous slab of `kernel` frames starting at `t·stride`.
fn im2col<'a>(input: &'a Array2<f64>, kernel: usize, stride: usize, frames: usize) -> ArrayView2<'a, f64> {
    let channels = input.ncols();
    let data = input.as_slice().expect("layer inputs are contiguous");
    ArrayView2::from_shape((frames, kernel * channels).strides((stride * channels, 1)), data)
        .expect("im2col view stays within the input buffer")
}

fn layer_forward(input: &Array2<f64>, spec: &ConvLayerSpec, params: &ConvLayerParams) -> Array2<f64> {
    let frames = (input.nrows() - spec.kernel) / spec.stride + 1;
    let cols = im2col(input, spec.kernel, spec.stride, frames);
    let mut y = cols.dot(&params.weight_matrix());
    y += &params.bias;
    y
}

fn group_norm(y: &Array2<f64>, p: &GroupNormParams) -> (Array2<f64>, NormCache) {
    let frames = y.nrows() as f64;
    let mean = y.sum_axis(Axis(0)) / frames;
    let centered = y - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / frames;
    let inv_std = var.mapv(|v| 1.0 / (v + GROUP_NORM_EPS).sqrt());
    let xhat = centered * &inv_std;
    let out = &xhat * &p.gamma + &p.beta;
    (out, NormCache { xhat, inv_std })
}

fn check_input(waveform: &[f64], config: &ConvStackConfig) -> Result<()> {
    config.validate()?;
    let needed = config.receptive_field();
    if waveform.len() < needed {
        return Err(Error::InvalidInput(format!(
            "waveform has {} samples, the conv stack needs at least {needed}",
            waveform.len()
        )));
    }
    if waveform.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("waveform sample".into()));
    }
    Ok(())
}

fn run_forward(
    waveform: &[f64],
    sample_rate: u32,
    params: &ConvStackParams,
    config: &ConvStackConfig,
    keep_cache: bool,
) -> Result<(FeatureMap, Option<ConvCache>)> {
    check_input(waveform, config)?;
    params.check_shapes(config)?;
    let mut x = Array2::from_shape_vec((waveform.len(), 1), waveform.to_vec()).expect("column vector shape");
    let mut cache = keep_cache.then(|| ConvCache {
        inputs: Vec::with_capacity(config.layers.len()),
        pre_activations: Vec::with_capacity(config.layers.len()),
        norms: Vec::with_capacity(config.layers.len()),
    });
    for (spec, p) in config.layers.iter().zip(&params.layers) {
        let y = layer_forward(&x, spec, p);
        let (z, norm) = match &p.norm {
            Some(n) => {
                let (z, c) = group_norm(&y, n);
                (z, Some(c))
            }
            None => (y, None),
        };
        let a = z.mapv(|v| activate(config.activation, v));
        if let Some(c) = &mut cache {
            c.inputs.push(x);
            c.pre_activations.push(z);
            c.norms.push(norm);
        }
        x = a;
    }
    let map = FeatureMap {
        data: x,
        frame_rate: f64::from(sample_rate) / config.total_stride() as f64,
    };
    Ok((map, cache))
}

/// Inference pass.
pub fn conv_forward(
    waveform: &[f64],
    sample_rate: u32,
    params: &ConvStackParams,
    config: &ConvStackConfig,
) -> Result<FeatureMap> {
    run_forward(waveform, sample_rate, params, config, false).map(|(m, _)| m)
}

/// Forward pass that also returns the cache needed by [`conv_backward`].
pub fn conv_forward_train(
    waveform: &[f64],
    sample_rate: u32,
    params: &ConvStackParams,
    config: &ConvStackConfig,
) -> Result<(FeatureMap, ConvCache)> {
    run_forward(waveform, sample_rate, params, config, true).map(|(m, c)| (m, c.expect("cache requested")))
}

/// Backpropagates `grad_out` (`frames × features`) through the stack.
///
/// Returns the waveform gradient and, unless the stack is frozen, the
/// parameter gradients.
pub fn conv_backward(
    grad_out: &Array2<f64>,
    cache: &ConvCache,
    params: &ConvStackParams,
    config: &ConvStackConfig,
) -> Result<(Vec<f64>, Option<ConvStackGrads>)> {
    let last = cache.pre_activations.last().ok_or(Error::MissingCache)?;
    if grad_out.dim() != last.dim() {
        return Err(Error::ShapeMismatch {
            layer: config.layers.len() - 1,
            detail: format!("gradient is {:?}, output is {:?}", grad_out.dim(), last.dim()),
        });
    }
    let mut grads = (!params.frozen).then(|| ConvStackGrads::zeros(config));
    let mut upstream = grad_out.clone();
    for i in (0..config.layers.len()).rev() {
        let spec = &config.layers[i];
        let p = &params.layers[i];
        let z = &cache.pre_activations[i];
        let mut dz = upstream;
        dz.zip_mut_with(z, |g, &v| *g *= activate_grad(config.activation, v));

        let dy = match (&p.norm, &cache.norms[i]) {
            (Some(n), Some(nc)) => {
                let frames = dz.nrows() as f64;
                if let Some(g) = &mut grads {
                    let gn = g.layers[i].norm.as_mut().expect("norm grads allocated");
                    gn.gamma = (&dz * &nc.xhat).sum_axis(Axis(0));
                    gn.beta = dz.sum_axis(Axis(0));
                }
                let dxhat = &dz * &n.gamma;
                let sum_d = dxhat.sum_axis(Axis(0));
                let sum_dx = (&dxhat * &nc.xhat).sum_axis(Axis(0));
                let mut dy = dxhat * frames - &sum_d - &(&nc.xhat * &sum_dx);
                dy *= &(&nc.inv_std / frames);
                dy
            }
            _ => dz,
        };

        let input = &cache.inputs[i];
        let frames = dy.nrows();
        if let Some(g) = &mut grads {
            let cols = im2col(input, spec.kernel, spec.stride, frames);
            let dw = cols.t().dot(&dy);
            let layer = &mut g.layers[i];
            let inp = spec.in_channels;
            for o in 0..spec.out_channels {
                for c in 0..inp {
                    for j in 0..spec.kernel {
                        layer.weight[[o, c, j]] = dw[[j * inp + c, o]];
                    }
                }
            }
            layer.bias = dy.sum_axis(Axis(0));
        }

        let dcols = dy.dot(&p.weight_matrix().t());
        let mut dx = Array2::<f64>::zeros(input.dim());
        let width = spec.kernel * spec.in_channels;
        {
            let flat = dx.as_slice_mut().expect("fresh array is contiguous");
            for (t, row) in dcols.outer_iter().enumerate() {
                let start = t * spec.stride * spec.in_channels;
                flat[start..start + width]
                    .iter_mut()
                    .zip(row.iter())
                    .for_each(|(a, b)| *a += b);
            }
        }
        upstream = dx;
    }
    let input_grad = upstream.slice(s![.., 0]).to_vec();
    Ok((input_grad, grads))
}
