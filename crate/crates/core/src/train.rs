//! Two-pass stop-code tolerant training.
//!
//! Each iteration `k` of the unroll runs the encoder once and binarizes
//! stochastically once. The same bits are then decoded twice from the
//! decoder state left by iteration `k - 1`:
//!
//! 1. a forced pass, where every tile whose error is at or below
//!    `k/K * (e_max - e_min) + e_min` is masked in addition to the natural
//!    mask. Its reconstruction only contributes a loss term.
//! 2. the natural pass, whose reconstruction and decoder state carry on to
//!    iteration `k + 1`.
//!
//! The loss is `natural L1 + forced_pass_weight * forced L1 +
//! bit_penalty_weight * mean analog code value over transmitted tiles`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::code::CodeTensor;
use crate::error::{Error, Result};
use crate::layers::{ConvLstmState, LstmVars};
use crate::mask::{apply_mask, forced_mask, update_mask, TileMask, TileQualityMap};
use crate::net::{binarize, BinarizeMode, Bound, CodecConfig, Model, RecurrentState};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// λ: weight of the mean analog code value.
    pub bit_penalty_weight: f64,
    pub forced_pass_weight: f64,
    /// Natural stop threshold on per-tile L1 error, 8-bit units.
    pub quality_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            bit_penalty_weight: 0.01,
            forced_pass_weight: 1.0,
            quality_threshold: 4.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bit_penalty_weight >= 0.0 && self.bit_penalty_weight.is_finite()) {
            return Err(Error::Config(format!(
                "bit_penalty_weight must be a finite value >= 0, got {}",
                self.bit_penalty_weight
            )));
        }
        if !self.forced_pass_weight.is_finite() {
            return Err(Error::Config("forced_pass_weight must be finite".into()));
        }
        if self.quality_threshold.is_nan() {
            return Err(Error::Config("quality_threshold is NaN".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Unroll length; defaults to the codec's `max_iterations`.
    pub iterations: Option<usize>,
    pub batch_size: usize,
    pub crop_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient norm limit; 0 disables clipping.
    pub clip_norm: f64,
    /// `false` trains the fixed-rate baseline: no masks, no forced pass.
    pub sct: bool,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: None,
            batch_size: 4,
            crop_size: 64,
            steps: 500,
            learning_rate: 2e-4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
            sct: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, codec: &CodecConfig) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let tile = codec.tile_size;
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(tile) {
            return err(format!(
                "crop_size {} is not a multiple of tile_size {tile}",
                self.crop_size
            ));
        }
        if self.crop_size < 4 * tile {
            return err(format!(
                "crop_size {} is smaller than 4 tiles ({})",
                self.crop_size,
                4 * tile
            ));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if let Some(k) = self.iterations {
            if k == 0 || k > codec.max_iterations {
                return err(format!(
                    "iterations {k} outside 1..={}",
                    codec.max_iterations
                ));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("Adam betas must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) || !(self.clip_norm >= 0.0) {
            return err("epsilon must be positive and clip_norm nonnegative".into());
        }
        Ok(())
    }

    pub fn unroll_length(&self, codec: &CodecConfig) -> usize {
        self.iterations.unwrap_or(codec.max_iterations)
    }
}

/// Decoder state and batch error extrema recorded before iteration `k`.
#[derive(Clone, Debug)]
pub struct IterationSnapshot {
    pub decoder_state: Vec<LstmVars>,
    pub e_max: f64,
    pub e_min: f64,
}

/// Adam moments for every model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        Adam {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    /// One bias-corrected update. Gradients are clipped to `clip_norm`
    /// jointly; returns the pre-clip global norm.
    pub fn update(
        &mut self,
        params: &mut [Tensor<f32>],
        grads: &[Tensor<f32>],
        cfg: &TrainConfig,
    ) -> f64 {
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let lr_t = cfg.learning_rate * (1.0 - b2.powf(t)).sqrt() / (1.0 - b1.powf(t));
        let eps_t = cfg.epsilon * (1.0 - b2.powf(t)).sqrt();
        let (b1, b2, lr_t, eps_t, clip) =
            (b1 as f32, b2 as f32, lr_t as f32, eps_t as f32, clip as f32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i].data()[j] * clip;
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                *w -= lr_t * m[j] / (v[j].sqrt() + eps_t);
            }
        }
        norm
    }
}

/// What to build in [`unroll`].
#[derive(Clone, Copy, Debug)]
pub struct UnrollOptions<'a> {
    pub iterations: usize,
    pub loss: &'a LossConfig,
    pub sct: bool,
    /// Whether the forced pass is built at all.
    pub forced_pass: bool,
}

/// Graph handles and host-side bookkeeping of one unrolled batch.
pub struct Unroll {
    pub loss: Var,
    pub natural_l1: Var,
    pub forced_l1: Option<Var>,
    pub bit_penalty: Var,
    /// Natural reconstruction after each iteration.
    pub reconstructions: Vec<Var>,
    /// Natural decoder state after each iteration.
    pub decoder_states: Vec<Vec<LstmVars>>,
    /// Transmitted natural codes per iteration, per image.
    pub codes: Vec<Vec<CodeTensor>>,
    /// Natural masks per iteration, per image.
    pub masks: Vec<Vec<TileMask>>,
    pub zero_bits: usize,
    pub transmitted_bits: usize,
    /// `(first node, iteration, pass)` for non-finite diagnostics.
    regions: Vec<(usize, usize, &'static str)>,
}

impl Unroll {
    /// First node built by the unroll itself, after parameters and inputs.
    fn computed_from(&self) -> usize {
        self.regions.first().map_or(0, |r| r.0)
    }

    fn region_of(&self, node: usize) -> (usize, &'static str) {
        self.regions
            .iter()
            .rev()
            .find(|r| r.0 <= node)
            .map(|r| (r.1, r.2))
            .unwrap_or((0, "setup"))
    }
}

fn split_codes<T: Scalar>(bits: &Tensor<T>, k: usize) -> Result<Vec<CodeTensor>> {
    let [n, th, tw, b] = bits.nhwc()?;
    let per = th * tw * b;
    bits.data()
        .chunks_exact(per)
        .take(n)
        .map(|chunk| {
            let t = Tensor::new(&[th, tw, b], chunk.to_vec())?;
            Ok(CodeTensor::from_tensor(&t, k)?)
        })
        .collect()
}

fn batch_mask_channel<T: Scalar>(masks: &[TileMask]) -> Result<Tensor<T>> {
    let (th, tw) = masks[0].grid();
    let data = masks
        .iter()
        .flat_map(|m| m.stopped_channel::<T>())
        .collect();
    Ok(Tensor::new(&[masks.len(), th, tw, 1], data)?)
}

fn batch_keep<T: Scalar>(masks: &[TileMask]) -> Vec<T> {
    masks.iter().flat_map(|m| m.keep_weights::<T>()).collect()
}

/// Tiles that transmit bits at iteration `k`: not stopped before `k`.
fn transmit_weights<T: Scalar>(masks: &[TileMask], k: usize) -> Vec<T> {
    masks
        .iter()
        .flat_map(|m| {
            (0..m.num_tiles()).map(move |t| {
                if m.stopped_before(t, k) {
                    T::zero()
                } else {
                    T::one()
                }
            })
        })
        .collect()
}

/// Builds the full `K`-iteration unroll of a batch `(n, H, W, 3)` into `g`.
pub fn unroll<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    bound: &Bound,
    images: &Tensor<T>,
    opts: &UnrollOptions<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<Unroll> {
    let cfg = model.config();
    let [n, h, w, _] = images.nhwc()?;
    let tile = cfg.tile_size;
    let (th, tw) = (h / tile, w / tile);
    let k_max = opts.iterations;
    if k_max == 0 || k_max > cfg.max_iterations {
        return Err(Error::Config(format!(
            "unroll length {k_max} outside 1..={}",
            cfg.max_iterations
        )));
    }
    let images = images.clone().reshape(&[n, h, w, 3])?;
    g.set_scope("input");
    let image = g.constant(images.clone());
    let mut recon = g.constant(Tensor::zeros(&[n, h, w, 3]));
    let mut enc_state: Vec<LstmVars> = model
        .initial_encoder_state(n, h, w)
        .iter()
        .map(|s| s.to_vars(g))
        .collect();
    let mut dec_state: Vec<LstmVars> = model
        .initial_decoder_state(n, th, tw)
        .iter()
        .map(|s| s.to_vars(g))
        .collect();
    let mut masks: Vec<TileMask> = vec![TileMask::empty(th, tw); n];
    let mut quality = TileQualityMap::compute_batch(&images, g.value(recon), h, w, tile)?;

    let mut out = Unroll {
        loss: recon,
        natural_l1: recon,
        forced_l1: None,
        bit_penalty: recon,
        reconstructions: Vec::with_capacity(k_max),
        decoder_states: Vec::with_capacity(k_max),
        codes: Vec::with_capacity(k_max),
        masks: Vec::with_capacity(k_max),
        zero_bits: 0,
        transmitted_bits: 0,
        regions: Vec::new(),
    };
    let mut natural_terms = Vec::with_capacity(k_max);
    let mut forced_terms = Vec::with_capacity(k_max);
    let mut penalty_terms = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let snapshot = IterationSnapshot {
            decoder_state: dec_state.clone(),
            e_max: quality
                .iter()
                .map(TileQualityMap::max)
                .fold(f64::NEG_INFINITY, f64::max),
            e_min: quality
                .iter()
                .map(TileQualityMap::min)
                .fold(f64::INFINITY, f64::min),
        };

        out.regions.push((g.len(), k, "encoder"));
        g.set_scope("residual");
        let residual = g.sub(image, recon)?;
        let (analog, next_enc) = model.encoder_forward(g, bound, residual, &enc_state)?;
        enc_state = next_enc;
        if !g.value(analog).all_finite() {
            let (node, scope, op) = g.first_non_finite_from(out.computed_from()).unwrap_or((
                analog.index(),
                "encoder".into(),
                "unknown",
            ));
            let (iteration, pass) = out.region_of(node);
            return Err(Error::NonFinite {
                iteration,
                pass,
                layer: format!("{scope} ({op})"),
            });
        }
        let hard = binarize(g.value(analog), BinarizeMode::Stochastic, rng)?;
        let raw_codes = split_codes(&hard, k)?;
        g.set_scope("binarizer");
        let codes = g.straight_through(analog, hard)?;
        let prev_masks = masks.clone();
        if opts.sct {
            for (i, m) in masks.iter_mut().enumerate() {
                *m = update_mask(
                    m,
                    &raw_codes[i],
                    &quality[i],
                    opts.loss.quality_threshold,
                    k,
                )?;
            }
        }

        if opts.sct && opts.forced_pass {
            out.regions.push((g.len(), k, "forced"));
            let forced: Vec<TileMask> = quality
                .iter()
                .zip(&masks)
                .map(|(q, nat)| {
                    Ok(forced_mask(q, snapshot.e_min, snapshot.e_max, k, k_max)?.union(nat)?)
                })
                .collect::<Result<_>>()?;
            g.set_scope("forced mask");
            let masked = g.mask_spatial(codes, batch_keep(&forced))?;
            let channel = g.constant(batch_mask_channel(&forced)?);
            let (delta, _) =
                model.decoder_forward(g, bound, masked, channel, &snapshot.decoder_state)?;
            let delta = model.apply_gain(g, bound, delta, k)?;
            g.set_scope("forced loss");
            let forced_recon = g.add(recon, delta)?;
            forced_terms.push(g.l1_mean(forced_recon, image)?);
        }

        out.regions.push((g.len(), k, "natural"));
        let natural_codes = if opts.sct {
            g.set_scope("natural mask");
            g.mask_spatial(codes, batch_keep(&masks))?
        } else {
            codes
        };
        let channel = g.constant(batch_mask_channel(&masks)?);
        let (delta, next_dec) =
            model.decoder_forward(g, bound, natural_codes, channel, &snapshot.decoder_state)?;
        dec_state = next_dec;
        let delta = model.apply_gain(g, bound, delta, k)?;
        g.set_scope("natural loss");
        recon = g.add(recon, delta)?;
        natural_terms.push(g.l1_mean(recon, image)?);

        let weights = transmit_weights::<T>(&prev_masks, k);
        let active = weights.iter().filter(|&&w| w > T::zero()).count();
        let pm = g.weighted_mean(analog, weights)?;
        penalty_terms.push((pm, active));

        let sent: Vec<CodeTensor> = raw_codes
            .iter()
            .zip(&masks)
            .map(|(c, m)| Ok(apply_mask(c, m)?))
            .collect::<Result<_>>()?;
        for (c, m) in sent.iter().zip(&prev_masks) {
            for t in 0..c.num_tiles() {
                if !m.stopped_before(t, k) {
                    let ones: usize = c.tile(t).iter().map(|&b| b as usize).sum();
                    out.transmitted_bits += c.depth();
                    out.zero_bits += c.depth() - ones;
                }
            }
        }
        quality = TileQualityMap::compute_batch(&images, g.value(recon), h, w, tile)?;
        out.reconstructions.push(recon);
        out.decoder_states.push(dec_state.clone());
        out.codes.push(sent);
        out.masks.push(masks.clone());
    }

    out.regions.push((g.len(), k_max, "loss"));
    g.set_scope("loss");
    let inv_k = T::from_f64(1.0 / k_max as f64);
    let natural = mean_of(g, &natural_terms, inv_k)?;
    out.natural_l1 = natural;
    let total_active: usize = penalty_terms.iter().map(|p| p.1).sum();
    let mut penalty = g.constant(Tensor::scalar(T::zero()));
    if total_active > 0 {
        for &(pm, active) in &penalty_terms {
            let term = g.scale(pm, T::from_f64(active as f64 / total_active as f64));
            penalty = g.add(penalty, term)?;
        }
    }
    out.bit_penalty = penalty;
    let mut loss = natural;
    if !forced_terms.is_empty() {
        let forced = mean_of(g, &forced_terms, inv_k)?;
        out.forced_l1 = Some(forced);
        let term = g.scale(forced, T::from_f64(opts.loss.forced_pass_weight));
        loss = g.add(loss, term)?;
    }
    let term = g.scale(penalty, T::from_f64(opts.loss.bit_penalty_weight));
    out.loss = g.add(loss, term)?;
    Ok(out)
}

fn mean_of<T: Scalar>(g: &mut Graph<T>, terms: &[Var], factor: T) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, factor))
}

/// Host copies of the natural pass of an unroll.
#[derive(Clone, Debug, PartialEq)]
pub struct NaturalTrace<T> {
    pub reconstructions: Vec<Tensor<T>>,
    pub decoder_states: Vec<RecurrentState<T>>,
    pub codes: Vec<Vec<CodeTensor>>,
    pub masks: Vec<Vec<TileMask>>,
    pub natural_l1: T,
}

/// Forward-only unroll with frozen parameters; `forced_pass` decides
/// whether the forced pass is built alongside the natural one.
pub fn natural_trace<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    loss: &LossConfig,
    iterations: usize,
    forced_pass: bool,
    seed: u64,
) -> Result<NaturalTrace<T>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = UnrollOptions {
        iterations,
        loss,
        sct: true,
        forced_pass,
    };
    let u = unroll(&mut g, model, &bound, images, &opts, &mut rng)?;
    Ok(NaturalTrace {
        reconstructions: u
            .reconstructions
            .iter()
            .map(|&v| g.value(v).clone())
            .collect(),
        decoder_states: u
            .decoder_states
            .iter()
            .map(|s| s.iter().map(|&v| ConvLstmState::from_vars(&g, v)).collect())
            .collect(),
        codes: u.codes,
        masks: u.masks,
        natural_l1: g.value(u.natural_l1).item().unwrap_or_else(T::zero),
    })
}

/// Loss breakdown of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// 1-based index of the step just taken.
    pub step: u64,
    pub total: f64,
    pub natural_l1: f64,
    pub forced_l1: f64,
    pub bit_penalty: f64,
    pub zero_bit_fraction: f64,
    pub grad_norm: f64,
}

impl StepStats {
    pub const CSV_HEADER: &'static str = "step,natural_l1,forced_l1,bit_penalty,zero_bit_fraction";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.natural_l1, self.forced_l1, self.bit_penalty, self.zero_bit_fraction
        )
    }
}

/// Model, optimizer and configuration of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: Adam,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl Trainer {
    pub fn new(model: Model<f32>, train: TrainConfig, loss: LossConfig) -> Result<Self> {
        train.validate(model.config())?;
        loss.validate()?;
        let optimizer = Adam::new(model.params());
        Ok(Trainer {
            model,
            optimizer,
            train,
            loss,
        })
    }

    /// Number of optimizer steps taken so far.
    pub fn steps_done(&self) -> u64 {
        self.optimizer.step
    }

    /// RNG for the next step, a pure function of the seed and step index so
    /// that resumed runs replay exactly.
    pub fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        rng.set_stream(self.optimizer.step);
        rng
    }

    /// One step on a batch drawn from `data` with the step RNG.
    pub fn step(&mut self, data: &crate::dataset::Dataset) -> Result<StepStats> {
        let mut rng = self.step_rng();
        let batch = data.sample_batch(self.train.batch_size, self.train.crop_size, &mut rng)?;
        self.step_on(&batch, &mut rng)
    }

    /// One step on an explicit `(n, H, W, 3)` batch.
    pub fn step_on(&mut self, batch: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Result<StepStats> {
        let iterations = self.train.unroll_length(self.model.config());
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, true);
        let opts = UnrollOptions {
            iterations,
            loss: &self.loss,
            sct: self.train.sct,
            forced_pass: self.train.sct,
        };
        let u = unroll(&mut g, &self.model, &bound, batch, &opts, rng)?;
        let scalar = |v: Var| g.value(v).item().map_or(f64::NAN, |x| x.as_f64());
        let total = scalar(u.loss);
        if !total.is_finite() {
            let (node, scope, op) =
                g.first_non_finite_from(u.computed_from())
                    .unwrap_or((0, "loss".into(), "unknown"));
            let (iteration, pass) = u.region_of(node);
            return Err(Error::NonFinite {
                iteration,
                pass,
                layer: format!("{scope} ({op})"),
            });
        }
        let mut stats = StepStats {
            step: self.optimizer.step + 1,
            total,
            natural_l1: scalar(u.natural_l1),
            forced_l1: u.forced_l1.map_or(0.0, scalar),
            bit_penalty: scalar(u.bit_penalty),
            zero_bit_fraction: u.zero_bits as f64 / u.transmitted_bits.max(1) as f64,
            grad_norm: 0.0,
        };
        let mut grads = g.backward(u.loss)?;
        let grads: Vec<Tensor<f32>> = bound
            .vars
            .iter()
            .zip(self.model.params())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        if let Some(i) = grads.iter().position(|t| !t.all_finite()) {
            return Err(Error::NonFinite {
                iteration: iterations,
                pass: "backward",
                layer: self.model.param_names()[i].clone(),
            });
        }
        stats.grad_norm = self
            .optimizer
            .update(self.model.params_mut(), &grads, &self.train);
        Ok(stats)
    }
}
