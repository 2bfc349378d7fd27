//! Two-view (Siamese) encoder with mid/high feature fusion, the contrastive
//! loss, hand-written backpropagation, and Adam training.
//!
//! Each view has its own encoder (same architecture, independent weights).
//! An encoder is a stack of `conv → ReLU → optional 2×2 max-pool` layers.
//! The output of the last layer is the high-level feature map; the output of
//! `mid_tap_layer` is average-pooled down to the same spatial size. Each is
//! projected to `embed_dim` by its own dense map and the two projections are
//! summed to form the embedding.

mod layers;
mod train;

pub use train::{
    compute_view_stats, mean_loss, mine_pairs, train, Adam, LabeledPair, MineReport, PairDataset,
    PairRecord, TrainConfig, TrainOutcome, TrainReport,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::ViewTensor;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewDims {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl ViewDims {
    pub fn len(&self) -> usize {
        self.rows * self.cols * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    /// 2×2 max-pool (stride 2, floor) after the activation.
    #[serde(default)]
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub ground_input: ViewDims,
    pub sat_input: ViewDims,
    pub conv_layers: Vec<ConvLayerSpec>,
    pub mid_tap_layer: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            ground_input: ViewDims {
                rows: 16,
                cols: 24,
                channels: 3,
            },
            sat_input: ViewDims {
                rows: 27,
                cols: 40,
                channels: 3,
            },
            conv_layers: vec![
                ConvLayerSpec {
                    filters: 8,
                    kernel: 3,
                    stride: 2,
                    pool: false,
                },
                ConvLayerSpec {
                    filters: 12,
                    kernel: 3,
                    stride: 1,
                    pool: false,
                },
                ConvLayerSpec {
                    filters: 12,
                    kernel: 3,
                    stride: 1,
                    pool: true,
                },
            ],
            mid_tap_layer: 1,
            embed_dim: 64,
            seed: 0,
        }
    }
}

/// Shapes of one layer for one view: input, conv output and layer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerShape {
    pub spec: ConvLayerSpec,
    pub input: (usize, usize, usize),
    pub conv: (usize, usize, usize),
    pub output: (usize, usize, usize),
}

/// Resolved layer shapes for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderArch {
    pub(crate) layers: Vec<LayerShape>,
    pub(crate) mid_tap: usize,
    pub(crate) mid_pooled: (usize, usize, usize),
    pub(crate) embed_dim: usize,
}

impl EncoderArch {
    fn new(config: &EncoderConfig, input: ViewDims) -> Result<Self> {
        if config.conv_layers.len() < 2 {
            return Err(Error::config("encoder needs at least two conv layers"));
        }
        if config.mid_tap_layer + 1 >= config.conv_layers.len() {
            return Err(Error::config("mid_tap_layer must come strictly before the final layer"));
        }
        if config.embed_dim < 8 {
            return Err(Error::config("embed_dim must be >= 8"));
        }
        if input.is_empty() {
            return Err(Error::config("view dimensions must be nonzero"));
        }
        let mut layers = Vec::with_capacity(config.conv_layers.len());
        let mut shape = (input.channels, input.rows, input.cols);
        for (i, spec) in config.conv_layers.iter().enumerate() {
            if spec.filters == 0 || spec.kernel == 0 || spec.stride == 0 {
                return Err(Error::config(format!("layer {i}: filters, kernel, stride must be > 0")));
            }
            let (c, h, w) = shape;
            if h < spec.kernel || w < spec.kernel {
                return Err(Error::config(format!(
                    "layer {i}: {h}x{w} input smaller than kernel {}",
                    spec.kernel
                )));
            }
            let conv = (
                spec.filters,
                (h - spec.kernel) / spec.stride + 1,
                (w - spec.kernel) / spec.stride + 1,
            );
            let output = if spec.pool {
                (conv.0, conv.1 / 2, conv.2 / 2)
            } else {
                conv
            };
            if output.1 == 0 || output.2 == 0 {
                return Err(Error::config(format!("layer {i}: pooling leaves an empty feature map")));
            }
            layers.push(LayerShape {
                spec: *spec,
                input: (c, h, w),
                conv,
                output,
            });
            shape = output;
        }
        let mid = layers[config.mid_tap_layer].output;
        let last = shape;
        if mid.0 != last.0 || mid.1 < last.1 || mid.2 < last.2 {
            return Err(Error::config(format!(
                "mid tap {:?} cannot be average-pooled to the final feature shape {:?}",
                mid, last
            )));
        }
        Ok(Self {
            layers,
            mid_tap: config.mid_tap_layer,
            mid_pooled: last,
            embed_dim: config.embed_dim,
        })
    }

    pub fn high_features(&self) -> usize {
        let (c, h, w) = self.layers.last().expect("non-empty").output;
        c * h * w
    }

    pub fn mid_features(&self) -> usize {
        let (c, h, w) = self.mid_pooled;
        c * h * w
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.layers[0].input;
        c * h * w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `[filters][channels][kernel][kernel]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// `[out][in]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// All weights of one view's encoder. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub convs: Vec<ConvParams>,
    pub high: DenseParams,
    pub mid: DenseParams,
}

impl EncoderParams {
    pub fn zeros(arch: &EncoderArch) -> Self {
        let convs = arch
            .layers
            .iter()
            .map(|l| ConvParams {
                weight: vec![0.0; l.spec.filters * l.input.0 * l.spec.kernel * l.spec.kernel],
                bias: vec![0.0; l.spec.filters],
            })
            .collect();
        let dense = |n: usize| DenseParams {
            weight: vec![0.0; arch.embed_dim * n],
            bias: vec![0.0; arch.embed_dim],
        };
        Self {
            convs,
            high: dense(arch.high_features()),
            mid: dense(arch.mid_features()),
        }
    }

    /// Uniform(±√(6/fan_in)) weights, zero biases.
    pub fn init(arch: &EncoderArch, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(arch);
        for (conv, l) in p.convs.iter_mut().zip(&arch.layers) {
            let fan_in = (l.input.0 * l.spec.kernel * l.spec.kernel) as f64;
            fill_uniform(&mut conv.weight, (6.0 / fan_in).sqrt(), rng);
        }
        fill_uniform(&mut p.high.weight, (6.0 / arch.high_features() as f64).sqrt(), rng);
        fill_uniform(&mut p.mid.weight, (6.0 / arch.mid_features() as f64).sqrt(), rng);
        p.quantize_f32();
        p
    }

    /// Tensors in declaration order: per conv layer (weight, bias), then high
    /// (weight, bias), then mid (weight, bias).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.convs.len() + 4);
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.extend([
            self.high.weight.as_slice(),
            &self.high.bias,
            &self.mid.weight,
            &self.mid.bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.convs.len() + 4);
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.high.weight);
        out.push(&mut self.high.bias);
        out.push(&mut self.mid.weight);
        out.push(&mut self.mid.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= k);
        }
    }

    /// Round every parameter to the nearest f32 (checkpoint precision).
    pub fn quantize_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = f64::from(*x as f32));
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn fill_uniform(v: &mut [f64], bound: f64, rng: &mut impl Rng) {
    for x in v.iter_mut() {
        *x = bound * (2.0 * rng.random::<f64>() - 1.0);
    }
}

/// Activations kept by [`Encoder::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer, CHW.
    inputs: Vec<Vec<f64>>,
    /// Post-ReLU conv output of each layer.
    activations: Vec<Vec<f64>>,
    /// Max-pool argmax (index into the activation plane) per pooled layer.
    pool_argmax: Vec<Vec<u32>>,
    high_in: Vec<f64>,
    mid_in: Vec<f64>,
}

impl ForwardCache {
    /// The piecewise-linear region the forward pass landed in: ReLU signs
    /// and max-pool winners. Two evaluations with equal patterns lie on the
    /// same smooth piece of the network.
    pub fn activation_pattern(&self) -> (Vec<bool>, Vec<u32>) {
        let signs = self
            .activations
            .iter()
            .flat_map(|a| a.iter().map(|v| *v > 0.0))
            .collect();
        let winners = self.pool_argmax.iter().flatten().copied().collect();
        (signs, winners)
    }
}

/// The two separately computed branch outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    pub high: Vec<f64>,
    pub mid: Vec<f64>,
}

/// Stateless encoder evaluation for one view's architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub arch: EncoderArch,
}

impl Encoder {
    /// Forward pass on a CHW input. Returns the embedding and the cache.
    pub fn forward(&self, params: &EncoderParams, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let (emb, _, cache) = self.forward_branches(params, input)?;
        Ok((emb, cache))
    }

    pub fn forward_branches(
        &self,
        params: &EncoderParams,
        input: &[f64],
    ) -> Result<(Vec<f64>, BranchOutputs, ForwardCache)> {
        if input.len() != self.arch.input_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.arch.layers[0].input),
                found: format!("{} values", input.len()),
            });
        }
        let n_layers = self.arch.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut activations = Vec::with_capacity(n_layers);
        let mut pool_argmax = Vec::with_capacity(n_layers);
        let mut x = input.to_vec();
        let mut mid_out = Vec::new();
        for (i, (shape, p)) in self.arch.layers.iter().zip(&params.convs).enumerate() {
            let mut act = layers::conv_forward(&x, shape, &p.weight, &p.bias);
            act.iter_mut().for_each(|v| *v = v.max(0.0));
            let out = if shape.spec.pool {
                let (pooled, arg) = layers::maxpool_forward(&act, shape.conv);
                pool_argmax.push(arg);
                pooled
            } else {
                pool_argmax.push(Vec::new());
                act.clone()
            };
            inputs.push(std::mem::replace(&mut x, out));
            activations.push(act);
            if i == self.arch.mid_tap {
                mid_out = x.clone();
            }
        }
        let mid_shape = self.arch.layers[self.arch.mid_tap].output;
        let mid_in = layers::adaptive_avgpool_forward(&mid_out, mid_shape, self.arch.mid_pooled);
        let high = layers::dense_forward(&params.high, &x);
        let mid = layers::dense_forward(&params.mid, &mid_in);
        let emb = high.iter().zip(&mid).map(|(a, b)| a + b).collect();
        let cache = ForwardCache {
            inputs,
            activations,
            pool_argmax,
            high_in: x,
            mid_in,
        };
        Ok((emb, BranchOutputs { high, mid }, cache))
    }

    /// Accumulate parameter gradients of a scalar loss into `grads`, given
    /// its gradient with respect to the embedding.
    pub fn backward(&self, params: &EncoderParams, cache: &ForwardCache, d_emb: &[f64], grads: &mut EncoderParams) {
        let d_high = layers::dense_backward(&params.high, &cache.high_in, d_emb, &mut grads.high);
        let d_mid_pooled = layers::dense_backward(&params.mid, &cache.mid_in, d_emb, &mut grads.mid);
        let mid_shape = self.arch.layers[self.arch.mid_tap].output;
        let d_mid = layers::adaptive_avgpool_backward(&d_mid_pooled, mid_shape, self.arch.mid_pooled);

        let mut d_out = d_high;
        for i in (0..self.arch.layers.len()).rev() {
            let shape = &self.arch.layers[i];
            if i == self.arch.mid_tap {
                for (a, b) in d_out.iter_mut().zip(&d_mid) {
                    *a += b;
                }
            }
            let mut d_act = if shape.spec.pool {
                layers::maxpool_backward(&d_out, &cache.pool_argmax[i], shape.conv)
            } else {
                d_out
            };
            for (g, a) in d_act.iter_mut().zip(&cache.activations[i]) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            let need_input_grad = i > 0;
            let conv = &mut grads.convs[i];
            d_out = layers::conv_backward(
                &cache.inputs[i],
                shape,
                &params.convs[i].weight,
                &d_act,
                &mut conv.weight,
                &mut conv.bias,
                need_input_grad,
            );
        }
    }
}

/// Per-channel standardization statistics for one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ViewStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Standardize an HWC view and transpose it to CHW.
    pub fn prepare(&self, view: &ViewTensor, dims: ViewDims) -> Result<Vec<f64>> {
        let found = ViewDims {
            rows: view.rows,
            cols: view.cols,
            channels: view.channels,
        };
        if found != dims || view.data.len() != dims.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{dims:?}"),
                found: format!("{found:?}"),
            });
        }
        let (h, w, c) = (dims.rows, dims.cols, dims.channels);
        let mut out = vec![0.0; dims.len()];
        for y in 0..h {
            for x in 0..w {
                for k in 0..c {
                    out[(k * h + y) * w + x] = (view.data[(y * w + x) * c + k] - self.mean[k]) / self.std[k];
                }
            }
        }
        Ok(out)
    }
}

/// Which of the two encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViewKind {
    Ground,
    Sat,
}

/// Ground and satellite encoders: one architecture, two parameter sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseModel {
    pub config: EncoderConfig,
    pub ground: EncoderParams,
    pub sat: EncoderParams,
    pub ground_stats: ViewStats,
    pub sat_stats: ViewStats,
    ground_encoder: Encoder,
    sat_encoder: Encoder,
}

/// Model metadata stored alongside the weights in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub config: EncoderConfig,
    pub ground_stats: ViewStats,
    pub sat_stats: ViewStats,
}

impl SiameseModel {
    /// Fresh model with seeded weights and identity standardization.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let (ge, se) = Self::encoders(&config)?;
        let mut rng = seeds::substream(seeds::derive(config.seed, "encoder-init"), 0);
        let ground = EncoderParams::init(&ge.arch, &mut rng);
        let mut rng = seeds::substream(seeds::derive(config.seed, "encoder-init"), 1);
        let sat = EncoderParams::init(&se.arch, &mut rng);
        Ok(Self {
            ground_stats: ViewStats::identity(config.ground_input.channels),
            sat_stats: ViewStats::identity(config.sat_input.channels),
            config,
            ground,
            sat,
            ground_encoder: ge,
            sat_encoder: se,
        })
    }

    /// Assemble a model from stored parts, validating shapes.
    pub fn from_parts(meta: ModelMeta, ground: EncoderParams, sat: EncoderParams) -> Result<Self> {
        let (ge, se) = Self::encoders(&meta.config)?;
        for (params, enc, stats, dims) in [
            (&ground, &ge, &meta.ground_stats, meta.config.ground_input),
            (&sat, &se, &meta.sat_stats, meta.config.sat_input),
        ] {
            let expected = EncoderParams::zeros(&enc.arch);
            let shapes_match = expected
                .tensors()
                .iter()
                .zip(params.tensors())
                .all(|(a, b)| a.len() == b.len())
                && expected.convs.len() == params.convs.len();
            if !shapes_match {
                return Err(Error::ShapeMismatch {
                    expected: "parameter shapes from config".into(),
                    found: "different tensor sizes".into(),
                });
            }
            if stats.mean.len() != dims.channels || stats.std.len() != dims.channels {
                return Err(Error::input("standardization stats do not match view channels"));
            }
            if !params.all_finite() {
                return Err(Error::input("non-finite parameters"));
            }
        }
        Ok(Self {
            config: meta.config,
            ground,
            sat,
            ground_stats: meta.ground_stats,
            sat_stats: meta.sat_stats,
            ground_encoder: ge,
            sat_encoder: se,
        })
    }

    /// Zeroed parameter sets with this config's shapes.
    pub fn zero_params(config: &EncoderConfig) -> Result<(EncoderParams, EncoderParams)> {
        let (ge, se) = Self::encoders(config)?;
        Ok((EncoderParams::zeros(&ge.arch), EncoderParams::zeros(&se.arch)))
    }

    fn encoders(config: &EncoderConfig) -> Result<(Encoder, Encoder)> {
        Ok((
            Encoder {
                arch: EncoderArch::new(config, config.ground_input)?,
            },
            Encoder {
                arch: EncoderArch::new(config, config.sat_input)?,
            },
        ))
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            config: self.config.clone(),
            ground_stats: self.ground_stats.clone(),
            sat_stats: self.sat_stats.clone(),
        }
    }

    pub fn encoder(&self, kind: ViewKind) -> &Encoder {
        match kind {
            ViewKind::Ground => &self.ground_encoder,
            ViewKind::Sat => &self.sat_encoder,
        }
    }

    pub fn params(&self, kind: ViewKind) -> &EncoderParams {
        match kind {
            ViewKind::Ground => &self.ground,
            ViewKind::Sat => &self.sat,
        }
    }

    pub fn params_mut(&mut self, kind: ViewKind) -> &mut EncoderParams {
        match kind {
            ViewKind::Ground => &mut self.ground,
            ViewKind::Sat => &mut self.sat,
        }
    }

    /// Standardized CHW input for a view.
    pub fn prepare(&self, kind: ViewKind, view: &ViewTensor) -> Result<Vec<f64>> {
        match kind {
            ViewKind::Ground => self.ground_stats.prepare(view, self.config.ground_input),
            ViewKind::Sat => self.sat_stats.prepare(view, self.config.sat_input),
        }
    }

    pub fn embed(&self, kind: ViewKind, view: &ViewTensor) -> Result<Vec<f64>> {
        let x = self.prepare(kind, view)?;
        Ok(self.encoder(kind).forward(self.params(kind), &x)?.0)
    }

    pub fn embed_ground(&self, view: &ViewTensor) -> Result<Vec<f64>> {
        self.embed(ViewKind::Ground, view)
    }

    pub fn embed_sat(&self, view: &ViewTensor) -> Result<Vec<f64>> {
        self.embed(ViewKind::Sat, view)
    }

    pub fn quantize_f32(&mut self) {
        self.ground.quantize_f32();
        self.sat.quantize_f32();
    }

    /// Loss and gradients for one pair given prepared (standardized CHW)
    /// inputs. `label` is true for a matching pair.
    pub fn loss_and_grads(
        &self,
        ground_input: &[f64],
        sat_input: &[f64],
        label: bool,
        margin: f64,
    ) -> Result<(f64, PairGrads)> {
        let (eg, gcache) = self.ground_encoder.forward(&self.ground, ground_input)?;
        let (es, scache) = self.sat_encoder.forward(&self.sat, sat_input)?;
        let (loss, d_eg, d_es) = contrastive_grad(&eg, &es, label, margin);
        let mut grads = PairGrads {
            ground: EncoderParams::zeros(&self.ground_encoder.arch),
            sat: EncoderParams::zeros(&self.sat_encoder.arch),
        };
        if d_eg.iter().any(|v| *v != 0.0) {
            self.ground_encoder.backward(&self.ground, &gcache, &d_eg, &mut grads.ground);
            self.sat_encoder.backward(&self.sat, &scache, &d_es, &mut grads.sat);
        }
        Ok((loss, grads))
    }

    /// Loss of one pair given prepared inputs (no gradients).
    pub fn pair_loss(&self, ground_input: &[f64], sat_input: &[f64], label: bool, margin: f64) -> Result<f64> {
        let (eg, _) = self.ground_encoder.forward(&self.ground, ground_input)?;
        let (es, _) = self.sat_encoder.forward(&self.sat, sat_input)?;
        Ok(contrastive_loss(&eg, &es, label, margin))
    }
}

/// Gradients for both encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrads {
    pub ground: EncoderParams,
    pub sat: EncoderParams,
}

impl PairGrads {
    pub fn add_assign(&mut self, other: &PairGrads) {
        self.ground.add_assign(&other.ground);
        self.sat.add_assign(&other.sat);
    }

    pub fn scale(&mut self, k: f64) {
        self.ground.scale(k);
        self.sat.scale(k);
    }
}

/// Gradients of the contrastive loss for one labeled pair of views.
pub fn backward(
    model: &SiameseModel,
    ground: &ViewTensor,
    sat: &ViewTensor,
    label: bool,
    margin: f64,
) -> Result<(f64, PairGrads)> {
    let g = model.prepare(ViewKind::Ground, ground)?;
    let s = model.prepare(ViewKind::Sat, sat)?;
    model.loss_and_grads(&g, &s, label, margin)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `ℓ·d² + (1 − ℓ)·max(m − d, 0)²` with `d` the Euclidean distance.
pub fn contrastive_loss(e_g: &[f64], e_s: &[f64], label: bool, margin: f64) -> f64 {
    let d = euclidean(e_g, e_s);
    if label {
        d * d
    } else {
        let h = (margin - d).max(0.0);
        h * h
    }
}

/// Contrastive loss and its gradient with respect to both embeddings.
/// The hinge uses subgradient 0 at `d = m`, and the negative term uses 0 at
/// `d = 0` where the distance is not differentiable.
pub fn contrastive_grad(e_g: &[f64], e_s: &[f64], label: bool, margin: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let diff: Vec<f64> = e_g.iter().zip(e_s).map(|(a, b)| a - b).collect();
    let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (loss, coeff) = if label {
        // d(d²)/d(e_g) = 2·diff
        (d * d, 2.0)
    } else if d < margin && d > 0.0 {
        let h = margin - d;
        // d((m−d)²)/d(e_g) = −2(m−d)·diff/d
        (h * h, -2.0 * h / d)
    } else {
        let h = (margin - d).max(0.0);
        (h * h, 0.0)
    };
    let g: Vec<f64> = diff.iter().map(|v| coeff * v).collect();
    let s: Vec<f64> = g.iter().map(|v| -v).collect();
    (loss, g, s)
}

#[cfg(test)]
mod tests;
