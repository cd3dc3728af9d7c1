//! Encoder, binarizer, gain and decoder networks.
//!
//! The encoder downsamples the residual by `tile_size` through strided
//! stages and emits `code_depth` sigmoid activations per tile. The decoder
//! takes the binarized codes plus one mask channel (1.0 = stopped tile),
//! upsamples with depth-to-space shuffles and predicts an additive delta
//! that is scaled by a per-iteration gain.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::code::CodeTensor;
use crate::error::{Error, Result, TensorError};
use crate::layers::{conv_lstm_step, ConvLstmState, ConvLstmWeights, ConvSpec, LstmVars};
use crate::mask::{apply_mask, update_mask, TileMask, TileQualityMap};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Convolution followed by tanh.
    Conv,
    ConvLstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderStage {
    pub kind: StageKind,
    pub spec: ConvSpec,
}

/// A decoder layer at the current resolution, followed by a depth-to-space
/// shuffle with block `upsample` (1 = none).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecoderStage {
    pub kind: StageKind,
    pub spec: ConvSpec,
    pub upsample: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainMode {
    /// Every iteration's delta is added unscaled.
    Constant,
    /// One trainable scalar per iteration, initialized to 1.
    LearnedPerIteration,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodecConfig {
    pub tile_size: usize,
    /// Bits per tile per iteration.
    pub code_depth: usize,
    pub max_iterations: usize,
    pub encoder: Vec<EncoderStage>,
    /// Pointwise convolution applied to codes ⊕ mask channel.
    pub decoder_input: ConvSpec,
    pub decoder: Vec<DecoderStage>,
    pub gain_mode: GainMode,
}

const fn enc(kind: StageKind, kh: usize, d: usize, s: usize) -> EncoderStage {
    EncoderStage {
        kind,
        spec: ConvSpec::new(kh, kh, d, s),
    }
}

const fn dec(kind: StageKind, kh: usize, d: usize, upsample: usize) -> DecoderStage {
    DecoderStage {
        kind,
        spec: ConvSpec::new(kh, kh, d, 1),
        upsample,
    }
}

impl Default for CodecConfig {
    /// Four stride-2 encoder stages into 32-bit codes per 16x16 tile, and a
    /// four-stage ConvLSTM + depth-to-space decoder.
    fn default() -> Self {
        use StageKind::*;
        CodecConfig {
            tile_size: 16,
            code_depth: 32,
            max_iterations: 8,
            encoder: vec![
                enc(Conv, 3, 32, 2),
                enc(ConvLstm, 3, 64, 2),
                enc(ConvLstm, 3, 64, 2),
                enc(ConvLstm, 3, 64, 2),
            ],
            decoder_input: ConvSpec::new(1, 1, 128, 1),
            decoder: vec![dec(ConvLstm, 3, 64, 2); 4],
            gain_mode: GainMode::LearnedPerIteration,
        }
    }
}

impl CodecConfig {
    /// Small network with the same 16x geometry, sized for CPU training in
    /// seconds to minutes. Recurrence lives at the two coarsest scales.
    pub fn toy() -> Self {
        use StageKind::*;
        CodecConfig {
            tile_size: 16,
            code_depth: 16,
            max_iterations: 4,
            encoder: vec![
                enc(Conv, 3, 8, 2),
                enc(Conv, 3, 16, 2),
                enc(ConvLstm, 3, 16, 2),
                enc(ConvLstm, 3, 24, 2),
            ],
            decoder_input: ConvSpec::new(1, 1, 32, 1),
            decoder: vec![
                dec(ConvLstm, 3, 32, 2),
                dec(ConvLstm, 3, 16, 2),
                dec(Conv, 3, 16, 2),
                dec(Conv, 3, 12, 2),
            ],
            gain_mode: GainMode::LearnedPerIteration,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.tile_size == 0 || self.tile_size > 255 {
            return err(format!("tile_size {} outside 1..=255", self.tile_size));
        }
        if self.code_depth == 0 || self.code_depth > 255 {
            return err(format!("code_depth {} outside 1..=255", self.code_depth));
        }
        if self.max_iterations == 0 || self.max_iterations > 255 {
            return err(format!(
                "max_iterations {} outside 1..=255",
                self.max_iterations
            ));
        }
        for s in &self.encoder {
            s.spec.validate()?;
        }
        let enc_stride: usize = self.encoder.iter().map(|s| s.spec.stride).product();
        if enc_stride != self.tile_size {
            return err(format!(
                "encoder strides multiply to {enc_stride}, tile_size is {}",
                self.tile_size
            ));
        }
        self.decoder_input.validate()?;
        if self.decoder_input.stride != 1 {
            return err("decoder_input must have stride 1".into());
        }
        let mut up = 1;
        for (i, s) in self.decoder.iter().enumerate() {
            s.spec.validate()?;
            if s.spec.stride != 1 {
                return err(format!("decoder stage {i} must have stride 1"));
            }
            if s.upsample == 0 || s.spec.out_channels % (s.upsample * s.upsample) != 0 {
                return err(format!(
                    "decoder stage {i}: {} channels cannot be shuffled by block {}",
                    s.spec.out_channels, s.upsample
                ));
            }
            up *= s.upsample;
        }
        if up != self.tile_size {
            return err(format!(
                "decoder upsampling multiplies to {up}, tile_size is {}",
                self.tile_size
            ));
        }
        Ok(())
    }

    /// Stable 64-bit digest of the configuration, echoed in bitstream headers.
    pub fn hash(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Parameter count: `kh*kw*cin*cout + cout` per convolution,
    /// `kh*kw*(cin + h)*4h + 4h` per ConvLSTM, plus `K` gains when learned.
    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    fn param_shapes(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        let mut push_layer =
            |prefix: String, kind: StageKind, spec: &ConvSpec, cin: usize| match kind {
                StageKind::Conv => {
                    out.push(ParamDecl::new(
                        format!("{prefix}.weight"),
                        spec.weight_shape(cin).to_vec(),
                        ParamRole::Weight,
                    ));
                    out.push(ParamDecl::new(
                        format!("{prefix}.bias"),
                        vec![spec.out_channels],
                        ParamRole::Bias,
                    ));
                }
                StageKind::ConvLstm => {
                    let h = spec.out_channels;
                    out.push(ParamDecl::new(
                        format!("{prefix}.input_weight"),
                        vec![spec.kernel_h, spec.kernel_w, cin, 4 * h],
                        ParamRole::Weight,
                    ));
                    out.push(ParamDecl::new(
                        format!("{prefix}.bias"),
                        vec![4 * h],
                        ParamRole::LstmBias,
                    ));
                    out.push(ParamDecl::new(
                        format!("{prefix}.hidden_weight"),
                        vec![spec.kernel_h, spec.kernel_w, h, 4 * h],
                        ParamRole::Weight,
                    ));
                }
            };
        let mut cin = 3;
        for (i, s) in self.encoder.iter().enumerate() {
            push_layer(format!("encoder.{i}"), s.kind, &s.spec, cin);
            cin = s.spec.out_channels;
        }
        push_layer(
            "binarizer".into(),
            StageKind::Conv,
            &ConvSpec::new(1, 1, self.code_depth, 1),
            cin,
        );
        push_layer(
            "decoder.input".into(),
            StageKind::Conv,
            &self.decoder_input,
            self.code_depth + 1,
        );
        let mut cin = self.decoder_input.out_channels;
        for (i, s) in self.decoder.iter().enumerate() {
            push_layer(format!("decoder.{i}"), s.kind, &s.spec, cin);
            cin = s.spec.out_channels / (s.upsample * s.upsample);
        }
        push_layer(
            "output".into(),
            StageKind::Conv,
            &ConvSpec::new(1, 1, 3, 1),
            cin,
        );
        if self.gain_mode == GainMode::LearnedPerIteration {
            out.push(ParamDecl::new(
                "gain".into(),
                vec![self.max_iterations],
                ParamRole::Gain,
            ));
        }
        out
    }
}

impl fmt::Display for CodecConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tile {} B={} K={} enc[",
            self.tile_size, self.code_depth, self.max_iterations
        )?;
        for s in &self.encoder {
            write!(f, " {:?}:{}", s.kind, s.spec)?;
        }
        write!(f, " ] dec[ {}", self.decoder_input)?;
        for s in &self.decoder {
            write!(f, " {:?}:{}^{}", s.kind, s.spec, s.upsample)?;
        }
        write!(f, " ]")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ParamRole {
    Weight,
    Bias,
    LstmBias,
    Gain,
}

struct ParamDecl {
    name: String,
    shape: Vec<usize>,
    role: ParamRole,
}

impl ParamDecl {
    fn new(name: String, shape: Vec<usize>, role: ParamRole) -> Self {
        ParamDecl { name, shape, role }
    }
}

#[derive(Clone, Copy, Debug)]
enum LayerParams {
    Conv {
        weight: usize,
        bias: usize,
        stride: usize,
    },
    Lstm {
        input_weight: usize,
        bias: usize,
        hidden_weight: usize,
        stride: usize,
    },
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<LayerParams>,
    binarizer: LayerParams,
    decoder_input: LayerParams,
    decoder: Vec<(LayerParams, usize)>,
    output: LayerParams,
    gain: Option<usize>,
}

impl Layout {
    fn new(config: &CodecConfig, names: &[String]) -> Self {
        let find = |n: String| {
            names
                .iter()
                .position(|x| *x == n)
                .expect("param registered")
        };
        let layer = |prefix: &str, kind: StageKind, stride: usize| match kind {
            StageKind::Conv => LayerParams::Conv {
                weight: find(format!("{prefix}.weight")),
                bias: find(format!("{prefix}.bias")),
                stride,
            },
            StageKind::ConvLstm => LayerParams::Lstm {
                input_weight: find(format!("{prefix}.input_weight")),
                bias: find(format!("{prefix}.bias")),
                hidden_weight: find(format!("{prefix}.hidden_weight")),
                stride,
            },
        };
        Layout {
            encoder: config
                .encoder
                .iter()
                .enumerate()
                .map(|(i, s)| layer(&format!("encoder.{i}"), s.kind, s.spec.stride))
                .collect(),
            binarizer: layer("binarizer", StageKind::Conv, 1),
            decoder_input: layer("decoder.input", StageKind::Conv, 1),
            decoder: config
                .decoder
                .iter()
                .enumerate()
                .map(|(i, s)| (layer(&format!("decoder.{i}"), s.kind, 1), s.upsample))
                .collect(),
            output: layer("output", StageKind::Conv, 1),
            gain: names.iter().position(|n| n == "gain"),
        }
    }
}

/// Graph handles for every model parameter, in [`Model::param_names`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Recurrent state of one network: one entry per ConvLSTM stage.
pub type RecurrentState<T> = Vec<ConvLstmState<T>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinarizeMode {
    /// Bit is 1 with probability equal to the activation.
    Stochastic,
    /// Bit is 1 iff the activation is at least 0.5.
    Deterministic,
}

/// Binarizes activations in `[0, 1]` to exact 0/1 values of the same shape.
pub fn binarize<T: Scalar, R: Rng + ?Sized>(
    analog: &Tensor<T>,
    mode: BinarizeMode,
    rng: &mut R,
) -> Result<Tensor<T>, TensorError> {
    let half = T::from_f64(0.5);
    let mut out = Vec::with_capacity(analog.len());
    for &p in analog.data() {
        if !(p >= T::zero() && p <= T::one()) {
            return Err(TensorError::OutOfRange {
                op: "binarize",
                value: p.as_f64(),
            });
        }
        let bit = match mode {
            BinarizeMode::Deterministic => p >= half,
            BinarizeMode::Stochastic => rng.random::<f64>() < p.as_f64(),
        };
        out.push(if bit { T::one() } else { T::zero() });
    }
    Tensor::new(analog.shape(), out)
}

/// Replicates the last row and column until both extents are multiples of
/// `tile`. `image` is `(H, W, C)`.
pub fn pad_to_tiles<T: Scalar>(image: &Tensor<T>, tile: usize) -> Result<Tensor<T>, TensorError> {
    let [n, h, w, c] = image.nhwc()?;
    if n != 1 || image.rank() != 3 || h == 0 || w == 0 {
        return Err(TensorError::Rank {
            op: "pad_to_tiles",
            expected: "3 (H, W, C)",
            shape: image.shape().to_vec(),
        });
    }
    let (ph, pw) = (h.div_ceil(tile) * tile, w.div_ceil(tile) * tile);
    let src = image.data();
    let mut out = Vec::with_capacity(ph * pw * c);
    for y in 0..ph {
        let sy = y.min(h - 1);
        for x in 0..pw {
            let sx = x.min(w - 1);
            let p = (sy * w + sx) * c;
            out.extend_from_slice(&src[p..p + c]);
        }
    }
    Tensor::new(&[ph, pw, c], out)
}

/// Top-left `h x w` region of an `(H, W, C)` tensor.
pub fn crop<T: Scalar>(image: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>, TensorError> {
    let [_, ih, iw, c] = image.nhwc()?;
    if h > ih || w > iw || image.rank() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "crop",
            left: image.shape().to_vec(),
            right: vec![h, w],
        });
    }
    let src = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        out.extend_from_slice(&src[y * iw * c..(y * iw + w) * c]);
    }
    Tensor::new(&[h, w, c], out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncodeOptions {
    /// Natural stop threshold on per-tile L1 error, 8-bit units.
    pub threshold: f64,
    pub iterations: usize,
    /// `false` disables masking entirely (fixed-rate baseline).
    pub sct: bool,
}

/// Running state of an encode: reconstruction, next residual, and both
/// networks' recurrent states.
#[derive(Clone, Debug)]
pub struct ReconstructionState<T> {
    pub image: Tensor<T>,
    pub residual: Tensor<T>,
    pub encoder_state: RecurrentState<T>,
    pub decoder_state: RecurrentState<T>,
}

/// Everything produced by [`Model::full_encode`]. Reconstructions are padded
/// and unclamped.
#[derive(Clone, Debug)]
pub struct EncodeResult<T> {
    pub codes: Vec<CodeTensor>,
    pub masks: Vec<TileMask>,
    pub reconstructions: Vec<Tensor<T>>,
    pub true_h: usize,
    pub true_w: usize,
    pub sct: bool,
}

impl<T: Scalar> EncodeResult<T> {
    /// Reconstruction after iteration `k` (1-based), cropped and clamped to
    /// `[0, 1]`.
    pub fn output(&self, k: usize) -> Result<Tensor<T>, TensorError> {
        finish_output(&self.reconstructions[k - 1], self.true_h, self.true_w)
    }
}

pub(crate) fn finish_output<T: Scalar>(
    recon: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<Tensor<T>, TensorError> {
    Ok(crop(recon, h, w)?.map(|v| v.max(T::zero()).min(T::one())))
}

/// Codec network parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: CodecConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

impl<T: Scalar> Model<T> {
    /// Glorot-uniform weights, zero biases, forget-gate bias 1, unit gains.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, |decl| {
            let shape = &decl.shape;
            let n: usize = shape.iter().product();
            match decl.role {
                ParamRole::Gain => vec![T::one(); n],
                ParamRole::Weight => {
                    let fan_in = shape[0] * shape[1] * shape[2];
                    let fan_out = shape[0] * shape[1] * shape[3];
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n)
                        .map(|_| T::from_f64(rng.random_range(-a..a)))
                        .collect()
                }
                ParamRole::Bias => vec![T::zero(); n],
                ParamRole::LstmBias => {
                    // gate blocks: input, forget, candidate, output
                    let mut b = vec![T::zero(); n];
                    b[n / 4..n / 2].fill(T::one());
                    b
                }
            }
        })
    }

    /// All weights and biases zero; gains stay at 1.
    pub fn zeros(config: CodecConfig) -> Result<Self> {
        Self::build(config, |decl| {
            let n: usize = decl.shape.iter().product();
            let v = if decl.role == ParamRole::Gain {
                T::one()
            } else {
                T::zero()
            };
            vec![v; n]
        })
    }

    fn build(config: CodecConfig, mut init: impl FnMut(&ParamDecl) -> Vec<T>) -> Result<Self> {
        config.validate()?;
        let decls = config.param_shapes();
        let mut names = Vec::with_capacity(decls.len());
        let mut params = Vec::with_capacity(decls.len());
        for decl in &decls {
            params.push(Tensor::new(&decl.shape, init(decl))?);
            names.push(decl.name.clone());
        }
        let layout = Layout::new(&config, &names);
        Ok(Model {
            config,
            names,
            params,
            layout,
        })
    }

    /// Rebuilds a model from named tensors, checking every shape.
    pub fn from_params(config: CodecConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut by_name: std::collections::HashMap<String, Tensor<T>> = named.into_iter().collect();
        for (i, name) in model.names.iter().enumerate() {
            let t = by_name
                .remove(name)
                .ok_or_else(|| crate::error::CheckpointError::MissingParam(name.clone()))?;
            if t.shape() != model.params[i].shape() {
                return Err(crate::error::CheckpointError::ParamShape {
                    name: name.clone(),
                    expected: model.params[i].shape().to_vec(),
                    found: t.shape().to_vec(),
                }
                .into());
            }
            model.params[i] = t;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(crate::error::CheckpointError::Corrupt(format!(
                "unknown parameter {extra}"
            ))
            .into());
        }
        Ok(model)
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Inserts every parameter into `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.leaf(p.clone(), trainable))
                .collect(),
        }
    }

    pub fn initial_encoder_state(&self, n: usize, h: usize, w: usize) -> RecurrentState<T> {
        let (mut ch, mut cw) = (h, w);
        let mut out = Vec::new();
        for s in &self.config.encoder {
            ch = ch.div_ceil(s.spec.stride);
            cw = cw.div_ceil(s.spec.stride);
            if s.kind == StageKind::ConvLstm {
                out.push(ConvLstmState::zeros(&[n, ch, cw, s.spec.out_channels]));
            }
        }
        out
    }

    pub fn initial_decoder_state(
        &self,
        n: usize,
        tiles_h: usize,
        tiles_w: usize,
    ) -> RecurrentState<T> {
        let (mut ch, mut cw) = (tiles_h, tiles_w);
        let mut out = Vec::new();
        for s in &self.config.decoder {
            if s.kind == StageKind::ConvLstm {
                out.push(ConvLstmState::zeros(&[n, ch, cw, s.spec.out_channels]));
            }
            ch *= s.upsample;
            cw *= s.upsample;
        }
        out
    }

    fn apply_layer(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        layer: &LayerParams,
        x: Var,
        states: &mut std::slice::Iter<'_, LstmVars>,
        next: &mut Vec<LstmVars>,
        activation: bool,
    ) -> Result<Var> {
        match *layer {
            LayerParams::Conv {
                weight,
                bias,
                stride,
            } => {
                let y = g.conv2d(x, b.vars[weight], Some(b.vars[bias]), stride)?;
                Ok(if activation { g.tanh(y) } else { y })
            }
            LayerParams::Lstm {
                input_weight,
                bias,
                hidden_weight,
                stride,
            } => {
                let state = *states.next().ok_or_else(|| {
                    Error::Config("recurrent state has fewer entries than LSTM stages".into())
                })?;
                let w = ConvLstmWeights {
                    input_weight: b.vars[input_weight],
                    bias: b.vars[bias],
                    hidden_weight: b.vars[hidden_weight],
                    stride,
                };
                let (h, s) = conv_lstm_step(g, x, state, &w)?;
                next.push(s);
                Ok(h)
            }
        }
    }

    /// Residual `(n, H, W, 3)` to sigmoid code activations
    /// `(n, H/tile, W/tile, B)`.
    pub fn encoder_forward(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        residual: Var,
        states: &[LstmVars],
    ) -> Result<(Var, Vec<LstmVars>)> {
        let [_, h, w, c] = crate::tensor::nhwc(g.shape(residual))?;
        let tile = self.config.tile_size;
        if c != 3 || h % tile != 0 || w % tile != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "encoder input (pad to tile multiple)",
                left: g.shape(residual).to_vec(),
                right: vec![tile, tile, 3],
            }
            .into());
        }
        let mut it = states.iter();
        let mut next = Vec::with_capacity(states.len());
        let mut x = residual;
        for (i, layer) in self.layout.encoder.iter().enumerate() {
            g.set_scope(format!("encoder.{i}"));
            x = self.apply_layer(g, b, layer, x, &mut it, &mut next, true)?;
        }
        let LayerParams::Conv { weight, bias, .. } = self.layout.binarizer else {
            unreachable!("binarizer is a convolution")
        };
        g.set_scope("binarizer");
        let logits = g.conv2d(x, b.vars[weight], Some(b.vars[bias]), 1)?;
        Ok((g.sigmoid(logits), next))
    }

    /// Codes `(n, th, tw, B)` and mask channel `(n, th, tw, 1)` to the
    /// unscaled delta `(n, th*tile, tw*tile, 3)` in `[-1, 1]`.
    pub fn decoder_forward(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        codes: Var,
        mask_channel: Var,
        states: &[LstmVars],
    ) -> Result<(Var, Vec<LstmVars>)> {
        g.set_scope("decoder.input");
        let x = g.concat_channels(codes, mask_channel)?;
        let mut it = states.iter();
        let mut next = Vec::with_capacity(states.len());
        let mut x = self.apply_layer(
            g,
            b,
            &self.layout.decoder_input,
            x,
            &mut it,
            &mut next,
            false,
        )?;
        for (i, (layer, up)) in self.layout.decoder.iter().enumerate() {
            g.set_scope(format!("decoder.{i}"));
            x = self.apply_layer(g, b, layer, x, &mut it, &mut next, true)?;
            if *up > 1 {
                x = g.depth_to_space(x, *up)?;
            }
        }
        let LayerParams::Conv { weight, bias, .. } = self.layout.output else {
            unreachable!("output is a convolution")
        };
        g.set_scope("output");
        let y = g.conv2d(x, b.vars[weight], Some(b.vars[bias]), 1)?;
        Ok((g.tanh(y), next))
    }

    /// `gain_k * delta` (identity under [`GainMode::Constant`]).
    pub fn apply_gain(&self, g: &mut Graph<T>, b: &Bound, delta: Var, k: usize) -> Result<Var> {
        match self.layout.gain {
            Some(idx) => {
                g.set_scope("gain");
                Ok(g.scale_by(delta, b.vars[idx], k - 1)?)
            }
            None => Ok(delta),
        }
    }

    pub fn gain(&self, k: usize) -> T {
        match self.layout.gain {
            Some(idx) => self.params[idx].data()[k - 1],
            None => T::one(),
        }
    }

    /// One encoder step on a single `(H, W, 3)` or batched residual.
    pub fn encode_iteration(
        &self,
        residual: &Tensor<T>,
        state: &[ConvLstmState<T>],
    ) -> Result<(Tensor<T>, RecurrentState<T>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let rank3 = residual.rank() == 3;
        let shape = residual.nhwc()?;
        let r = g.constant(residual.clone().reshape(&shape)?);
        let sv: Vec<LstmVars> = state.iter().map(|s| s.to_vars(&mut g)).collect();
        let (analog, next) = self.encoder_forward(&mut g, &b, r, &sv)?;
        let mut out = g.value(analog).clone();
        if rank3 {
            let [_, h, w, c] = out.nhwc()?;
            out = out.reshape(&[h, w, c])?;
        }
        let next = next
            .into_iter()
            .map(|v| ConvLstmState::from_vars(&g, v))
            .collect();
        Ok((out, next))
    }

    /// One decoder step for a single image. `codes` must already be masked.
    pub fn decode_iteration(
        &self,
        codes: &CodeTensor,
        mask: &TileMask,
        state: &[ConvLstmState<T>],
        k: usize,
    ) -> Result<(Tensor<T>, RecurrentState<T>)> {
        if codes.grid() != mask.grid() {
            return Err(crate::error::MaskError::GridMismatch {
                left: codes.grid(),
                right: mask.grid(),
            }
            .into());
        }
        if codes.depth() != self.config.code_depth {
            return Err(Error::Config(format!(
                "codes carry {} bits per tile, model expects {}",
                codes.depth(),
                self.config.code_depth
            )));
        }
        if k == 0 || k > self.config.max_iterations {
            return Err(crate::error::MaskError::Iteration {
                k,
                max: self.config.max_iterations,
            }
            .into());
        }
        let (th, tw) = codes.grid();
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let c = g.constant(
            codes
                .to_tensor::<T>()
                .reshape(&[1, th, tw, codes.depth()])?,
        );
        let m = g.constant(Tensor::new(&[1, th, tw, 1], mask.stopped_channel())?);
        let sv: Vec<LstmVars> = state.iter().map(|s| s.to_vars(&mut g)).collect();
        let (delta, next) = self.decoder_forward(&mut g, &b, c, m, &sv)?;
        let [_, h, w, ch] = crate::tensor::nhwc(g.shape(delta))?;
        let out = g.value(delta).clone().reshape(&[h, w, ch])?;
        let next = next
            .into_iter()
            .map(|v| ConvLstmState::from_vars(&g, v))
            .collect();
        Ok((out, next))
    }

    /// Decodes iteration `k` and adds `gain_k * delta` to `state.image`.
    pub fn decode_step(
        &self,
        codes: &CodeTensor,
        mask: &TileMask,
        k: usize,
        image: &mut Tensor<T>,
        decoder_state: &mut RecurrentState<T>,
    ) -> Result<()> {
        let (delta, next) = self.decode_iteration(codes, mask, decoder_state, k)?;
        let gain = self.gain(k);
        for (r, d) in image.data_mut().iter_mut().zip(delta.data()) {
            *r += gain * *d;
        }
        *decoder_state = next;
        Ok(())
    }

    /// Runs `opts.iterations` rounds of encode, deterministic binarize, mask
    /// update and decode on an `(H, W, 3)` image in `[0, 1]`. The image is
    /// replicate-padded to the tile grid; quality is measured on the true
    /// region against the previous iteration's reconstruction.
    pub fn full_encode(&self, image: &Tensor<T>, opts: &EncodeOptions) -> Result<EncodeResult<T>> {
        let tile = self.config.tile_size;
        if opts.iterations == 0 || opts.iterations > self.config.max_iterations {
            return Err(Error::Config(format!(
                "iterations {} outside 1..={}",
                opts.iterations, self.config.max_iterations
            )));
        }
        let (true_h, true_w) = match *image.shape() {
            [h, w, 3] => (h, w),
            _ => {
                return Err(TensorError::Rank {
                    op: "full_encode",
                    expected: "(H, W, 3)",
                    shape: image.shape().to_vec(),
                }
                .into())
            }
        };
        let padded = pad_to_tiles(image, tile)?;
        let [_, ph, pw, _] = padded.nhwc()?;
        let (th, tw) = (ph / tile, pw / tile);
        let mut state = ReconstructionState {
            image: Tensor::zeros(padded.shape()),
            residual: padded.clone(),
            encoder_state: self.initial_encoder_state(1, ph, pw),
            decoder_state: self.initial_decoder_state(1, th, tw),
        };
        let mut mask = TileMask::empty(th, tw);
        let mut result = EncodeResult {
            codes: Vec::with_capacity(opts.iterations),
            masks: Vec::with_capacity(opts.iterations),
            reconstructions: Vec::with_capacity(opts.iterations),
            true_h,
            true_w,
            sct: opts.sct,
        };
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        for k in 1..=opts.iterations {
            let residual = state.residual.clone().reshape(&[1, ph, pw, 3])?;
            let (analog, enc_next) = self.encode_iteration(&residual, &state.encoder_state)?;
            state.encoder_state = enc_next;
            let bits = binarize(&analog, BinarizeMode::Deterministic, &mut unused)?;
            let mut codes =
                CodeTensor::from_tensor(&bits.reshape(&[th, tw, self.config.code_depth])?, k)?;
            if opts.sct {
                let quality = TileQualityMap::compute(&padded, &state.image, true_h, true_w, tile)?;
                mask = update_mask(&mask, &codes, &quality, opts.threshold, k)?;
                codes = apply_mask(&codes, &mask)?;
            }
            self.decode_step(&codes, &mask, k, &mut state.image, &mut state.decoder_state)?;
            state.residual = residual_update(&padded, &state.image)?;
            result.codes.push(codes);
            result.masks.push(mask.clone());
            result.reconstructions.push(state.image.clone());
        }
        Ok(result)
    }

    /// Decoder-only reconstruction from transmitted codes and masks; returns
    /// the padded, unclamped reconstruction after every iteration.
    pub fn reconstruct(&self, codes: &[CodeTensor], masks: &[TileMask]) -> Result<Vec<Tensor<T>>> {
        let Some(first) = codes.first() else {
            return Ok(Vec::new());
        };
        let (th, tw) = first.grid();
        let tile = self.config.tile_size;
        let mut image = Tensor::zeros(&[th * tile, tw * tile, 3]);
        let mut dec = self.initial_decoder_state(1, th, tw);
        let mut out = Vec::with_capacity(codes.len());
        for (i, (c, m)) in codes.iter().zip(masks).enumerate() {
            self.decode_step(c, m, i + 1, &mut image, &mut dec)?;
            out.push(image.clone());
        }
        Ok(out)
    }
}

/// `image - reconstruction`: the next iteration's encoder input.
pub fn residual_update<T: Scalar>(
    image: &Tensor<T>,
    reconstruction: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    if image.shape() != reconstruction.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "residual_update",
            left: image.shape().to_vec(),
            right: reconstruction.shape().to_vec(),
        });
    }
    let data = image
        .data()
        .iter()
        .zip(reconstruction.data())
        .map(|(&a, &b)| a - b)
        .collect();
    Tensor::new(image.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(depth: usize) -> CodecConfig {
        CodecConfig {
            code_depth: depth,
            ..CodecConfig::toy()
        }
    }

    fn test_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w, 3], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn encoder_output_is_one_code_stack_per_tile() {
        let model = Model::<f32>::new(small(8), 0).unwrap();
        let state = model.initial_encoder_state(1, 32, 32);
        let (analog, _) = model
            .encode_iteration(&test_image(32, 32, 1), &state)
            .unwrap();
        assert_eq!(analog.shape(), &[2, 2, 8]);
        assert!(analog.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let unpadded = model.encode_iteration(&test_image(30, 32, 1), &state);
        assert!(unpadded.is_err());
    }

    #[test]
    fn zero_model_emits_half_and_zero_delta() {
        let model = Model::<f32>::zeros(small(8)).unwrap();
        let state = model.initial_encoder_state(1, 32, 32);
        let (analog, _) = model
            .encode_iteration(&test_image(32, 32, 2), &state)
            .unwrap();
        assert!(analog.data().iter().all(|&v| v == 0.5));
        let codes = CodeTensor::from_bits(2, 2, 8, vec![1; 32], 1).unwrap();
        let mut image = test_image(32, 32, 3);
        let before = image.clone();
        let mut dec = model.initial_decoder_state(1, 2, 2);
        let (delta, _) = model
            .decode_iteration(&codes, &TileMask::empty(2, 2), &dec, 1)
            .unwrap();
        assert_eq!(delta.shape(), &[32, 32, 3]);
        assert!(delta.data().iter().all(|&v| v == 0.0));
        model
            .decode_step(&codes, &TileMask::empty(2, 2), 1, &mut image, &mut dec)
            .unwrap();
        assert_eq!(image, before);
    }

    #[test]
    fn encoder_and_decoder_are_deterministic() {
        let model = Model::<f32>::new(small(8), 4).unwrap();
        let state = model.initial_encoder_state(1, 32, 32);
        let img = test_image(32, 32, 5);
        assert_eq!(
            model.encode_iteration(&img, &state).unwrap().0,
            model.encode_iteration(&img, &state).unwrap().0
        );
        let codes =
            CodeTensor::from_bits(2, 2, 8, (0..32).map(|i| (i % 3 == 0) as u8).collect(), 1)
                .unwrap();
        let mask = TileMask::from_first_stops(2, 2, vec![None, Some(1), None, None]);
        let dec = model.initial_decoder_state(1, 2, 2);
        let a = model.decode_iteration(&codes, &mask, &dec, 1).unwrap();
        let b = model.decode_iteration(&codes, &mask, &dec, 1).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn decode_rejects_grid_mismatch() {
        let model = Model::<f32>::zeros(small(8)).unwrap();
        let codes = CodeTensor::zeros(2, 2, 8, 1);
        let dec = model.initial_decoder_state(1, 2, 2);
        assert!(model
            .decode_iteration(&codes, &TileMask::empty(2, 3), &dec, 1)
            .is_err());
    }

    #[test]
    fn binarize_extremes_and_bernoulli_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [BinarizeMode::Stochastic, BinarizeMode::Deterministic] {
            let zeros = binarize(&Tensor::<f64>::zeros(&[100]), mode, &mut rng).unwrap();
            assert!(zeros.data().iter().all(|&b| b == 0.0));
            let ones = binarize(&Tensor::<f64>::ones(&[100]), mode, &mut rng).unwrap();
            assert!(ones.data().iter().all(|&b| b == 1.0));
        }
        let half = Tensor::<f64>::full(&[10_000], 0.5);
        let bits = binarize(&half, BinarizeMode::Stochastic, &mut rng).unwrap();
        let mean = bits.sum() / 10_000.0;
        assert!((0.45..=0.55).contains(&mean), "mean {mean}");
        let det = binarize(&half, BinarizeMode::Deterministic, &mut rng).unwrap();
        assert!(det.data().iter().all(|&b| b == 1.0));
        let out_of_range = Tensor::<f64>::full(&[1], 1.5);
        assert!(binarize(&out_of_range, BinarizeMode::Deterministic, &mut rng).is_err());
    }

    #[test]
    fn infinite_threshold_stops_every_tile_at_first_iteration() {
        let model = Model::<f32>::new(small(8), 1).unwrap();
        let opts = EncodeOptions {
            threshold: f64::INFINITY,
            iterations: 4,
            sct: true,
        };
        let r = model.full_encode(&test_image(32, 48, 6), &opts).unwrap();
        for (i, m) in r.masks.iter().enumerate() {
            assert_eq!(m.count_stopped(), 6, "iteration {}", i + 1);
            assert!(m.first_stops().iter().all(|&s| s == Some(1)));
        }
        assert!(r.codes.iter().all(|c| c.count_ones() == 0));
    }

    #[test]
    fn unreachable_threshold_matches_fixed_rate_pipeline() {
        let model = Model::<f32>::new(small(16), 2).unwrap();
        let img = test_image(40, 33, 7);
        let sct = model
            .full_encode(
                &img,
                &EncodeOptions {
                    threshold: -1.0,
                    iterations: 4,
                    sct: true,
                },
            )
            .unwrap();
        let base = model
            .full_encode(
                &img,
                &EncodeOptions {
                    threshold: -1.0,
                    iterations: 4,
                    sct: false,
                },
            )
            .unwrap();
        assert!(sct.masks.iter().all(|m| m.count_stopped() == 0));
        assert_eq!((sct.true_h, sct.true_w), (40, 33));
        assert_eq!(sct.reconstructions[0].shape(), &[48, 48, 3]);
        assert_eq!(sct.codes, base.codes);
        assert_eq!(sct.reconstructions, base.reconstructions);
        assert_eq!(sct.output(4).unwrap().shape(), &[40, 33, 3]);
    }

    #[test]
    fn masking_happens_after_the_binarizer() {
        let model = Model::<f32>::new(small(8), 3).unwrap();
        let img = test_image(32, 32, 8);
        let stop_all = model
            .full_encode(
                &img,
                &EncodeOptions {
                    threshold: f64::INFINITY,
                    iterations: 1,
                    sct: true,
                },
            )
            .unwrap();
        let base = model
            .full_encode(
                &img,
                &EncodeOptions {
                    threshold: 0.0,
                    iterations: 1,
                    sct: false,
                },
            )
            .unwrap();
        let state = model.initial_encoder_state(1, 32, 32);
        let (analog, _) = model.encode_iteration(&img, &state).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bits = binarize(&analog, BinarizeMode::Deterministic, &mut rng).unwrap();
        assert_eq!(CodeTensor::from_tensor(&bits, 1).unwrap(), base.codes[0]);
        assert_eq!(
            apply_mask(&base.codes[0], &stop_all.masks[0]).unwrap(),
            stop_all.codes[0]
        );
    }

    #[test]
    fn reconstruct_replays_the_encoder_side_decoder() {
        let model = Model::<f32>::new(small(8), 5).unwrap();
        let r = model
            .full_encode(
                &test_image(32, 32, 9),
                &EncodeOptions {
                    threshold: 40.0,
                    iterations: 4,
                    sct: true,
                },
            )
            .unwrap();
        assert_eq!(
            model.reconstruct(&r.codes, &r.masks).unwrap(),
            r.reconstructions
        );
    }

    #[test]
    fn parameter_count_formula() {
        let c = CodecConfig::default();
        let conv = |kh: usize, cin: usize, cout: usize| kh * kh * cin * cout + cout;
        let lstm = |kh: usize, cin: usize, h: usize| kh * kh * (cin + h) * 4 * h + 4 * h;
        let b = c.code_depth;
        let expected = conv(3, 3, 32)
            + lstm(3, 32, 64)
            + lstm(3, 64, 64)
            + lstm(3, 64, 64)
            + conv(1, 64, b)
            + conv(1, b + 1, 128)
            + lstm(3, 128, 64)
            + 3 * lstm(3, 16, 64)
            + conv(1, 16, 3)
            + c.max_iterations;
        assert_eq!(c.param_count(), expected);
        assert_eq!(
            Model::<f32>::zeros(c.clone()).unwrap().param_count(),
            expected
        );
    }

    #[test]
    fn config_validation() {
        let mut c = CodecConfig::toy();
        c.encoder.pop();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = CodecConfig::toy();
        c.decoder[0].upsample = 3;
        assert!(c.validate().is_err());
        assert_ne!(CodecConfig::toy().hash(), CodecConfig::default().hash());
        assert_eq!(CodecConfig::toy().hash(), CodecConfig::toy().hash());
    }
}
