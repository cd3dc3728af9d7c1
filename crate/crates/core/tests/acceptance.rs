//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --test acceptance`; pass criterion numbers
//! (`cargo test --test acceptance -- 3 6`) to run a subset.

use std::error::Error;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sct_codec::autograd::{Graph, Var};
use sct_codec::bitstream::{
    bitrate_report, compress, decompress, read, write, SctBitstream, SctHeader,
};
use sct_codec::cli::{cmd_encode, cmd_train, CodingArgs, EncodeArgs, TrainArgs};
use sct_codec::dataset::{half_flat_half_noise, Dataset, DatasetSpec};
use sct_codec::error::TensorError;
use sct_codec::eval::{bit_histogram, evaluate_image, psnr, tile_variance_report, BitHistogram};
use sct_codec::gradcheck::{check, project, random_tensor};
use sct_codec::image::{save_image, ImageFile};
use sct_codec::layers::{conv_lstm_step, ConvLstmWeights, LstmVars};
use sct_codec::mask::{decoder_mask_from_codes, forced_mask, forced_threshold, TileQualityMap};
use sct_codec::train::{natural_trace, LossConfig, TrainConfig, Trainer};
use sct_codec::{CodeTensor, CodecConfig, EncodeOptions, Model, Tensor, TileMask};

type Outcome = Result<(bool, String), Box<dyn Error>>;

// Gradient suite.
const GRAD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 5;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
// Synchronization and round trip.
const SYNC_CASES: u64 = 100;
const SYNC_BUDGET: Duration = Duration::from_secs(60);
const ROUND_TRIP_CASES: u64 = 200;
// Two-pass isolation.
const ISOLATION_ITERATIONS: usize = 8;
const ISOLATION_SEEDS: u64 = 10;
/// High enough that untrained models stop some tiles naturally.
const ISOLATION_THRESHOLD: f64 = 90.0;
// Threshold formula.
const THRESHOLD_TUPLES: usize = 1000;
// Toy training.
const DESCENT_STEPS: usize = 500;
const DESCENT_MIN_DROP: f64 = 0.30;
const DESCENT_BUDGET: Duration = Duration::from_secs(15 * 60);
const BIAS_STEPS: usize = 2000;
const BIAS_LAMBDA: f64 = 0.01;
const BIAS_MIN_GAP: f64 = 0.05;
const TOY_SEED: u64 = 3;
const TOY_LEARNING_RATE: f64 = 1e-3;
/// Encode threshold for the probe set of the bit-bias check (the CLI default).
const PROBE_THRESHOLD: f64 = 4.0;
/// Encode threshold for the half-flat image: between the toy checkpoint's
/// flat-tile error (about 10) and textured-tile error (above 20).
const ADAPTIVE_THRESHOLD: f64 = 16.0;
// Metric oracles.
const METRIC_TOL: f64 = 1e-9;
const UNIFORM_PSNR_DB: f64 = 48.13;
const UNIFORM_PSNR_TOL: f64 = 0.01;
// Determinism.
const DETERMINISM_STEPS: usize = 20;

fn toy_train_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        learning_rate: TOY_LEARNING_RATE,
        seed: TOY_SEED,
        ..TrainConfig::default()
    }
}

fn train_toy(lambda: f64, steps: usize) -> Result<Trainer, Box<dyn Error>> {
    let data = Dataset::load(&DatasetSpec::default())?;
    let loss = LossConfig {
        bit_penalty_weight: lambda,
        ..LossConfig::default()
    };
    let mut t = Trainer::new(
        Model::new(CodecConfig::toy(), TOY_SEED)?,
        toy_train_config(steps),
        loss,
    )?;
    for _ in 0..steps {
        t.step(&data)?;
    }
    Ok(t)
}

/// Toy checkpoints trained for [`BIAS_STEPS`], shared by criteria 8 and 9.
fn bias_model(lambda: f64) -> &'static Model<f32> {
    static ZERO: OnceLock<Model<f32>> = OnceLock::new();
    static BIASED: OnceLock<Model<f32>> = OnceLock::new();
    let cell = if lambda == 0.0 { &ZERO } else { &BIASED };
    cell.get_or_init(|| {
        train_toy(lambda, BIAS_STEPS)
            .expect("toy training run")
            .model
    })
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    // smooth base plus noise of random strength
    let a = rng.random_range(0.0..1.0f32);
    let (gy, gx) = (
        rng.random_range(-0.5..0.5f32),
        rng.random_range(-0.5..0.5f32),
    );
    let noise = rng.random_range(0.0..0.5f32);
    Tensor::from_fn(&[h, w, 3], |i| {
        let (y, x, c) = (i / (w * 3), (i / 3) % w, i % 3);
        let base = a + gy * y as f32 / h as f32 + gx * x as f32 / w as f32 + 0.05 * c as f32;
        (base + noise * rng.random_range(-1.0..1.0f32)).clamp(0.0, 1.0)
    })
}

fn random_threshold(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..10) {
        0 => -1.0,
        1 => f64::INFINITY,
        _ => rng.random_range(0.0..80.0),
    }
}

// 1 -----------------------------------------------------------------------

fn grad_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, GradBuild)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let mut r = |shape: &[usize], lo: f64, hi: f64| random_tensor(shape, lo, hi, &mut rng);
    let a = r(&[2, 3, 4], -1.0, 1.0);
    let b = r(&[2, 3, 4], -1.0, 1.0);
    // magnitudes kept away from the kink of abs
    let away = r(&[2, 3, 4], 0.1, 1.0).map(|v| if (v * 1e4) as i64 % 2 == 0 { v } else { -v });
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, GradBuild)> = vec![
        (
            "add",
            vec![a.clone(), b.clone()],
            Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, seed)
            }),
        ),
        (
            "sub",
            vec![a.clone(), b.clone()],
            Box::new(move |g, v| {
                let y = g.sub(v[0], v[1])?;
                project(g, y, seed)
            }),
        ),
        (
            "mul",
            vec![a.clone(), b.clone()],
            Box::new(move |g, v| {
                let y = g.mul(v[0], v[1])?;
                project(g, y, seed)
            }),
        ),
        (
            "scale",
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.scale(v[0], -0.7);
                project(g, y, seed)
            }),
        ),
        (
            "scale_by",
            vec![a.clone(), r(&[3], 0.5, 1.5)],
            Box::new(move |g, v| {
                let y = g.scale_by(v[0], v[1], 1)?;
                project(g, y, seed)
            }),
        ),
        (
            "sigmoid",
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.sigmoid(v[0]);
                project(g, y, seed)
            }),
        ),
        (
            "tanh",
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.tanh(v[0]);
                project(g, y, seed)
            }),
        ),
        (
            "abs",
            vec![away.clone()],
            Box::new(move |g, v| {
                let y = g.abs(v[0]);
                project(g, y, seed)
            }),
        ),
        ("sum", vec![a.clone()], Box::new(|g, v| Ok(g.sum(v[0])))),
        ("mean", vec![a.clone()], Box::new(|g, v| Ok(g.mean(v[0])))),
        (
            "l1_mean",
            vec![a.clone(), {
                let d = away.clone();
                let mut s = a.clone();
                for (x, y) in s.data_mut().iter_mut().zip(d.data()) {
                    *x -= y;
                }
                s
            }],
            Box::new(|g, v| g.l1_mean(v[0], v[1])),
        ),
        (
            "concat_channels+slice_channels",
            vec![a.clone(), b.clone()],
            Box::new(move |g, v| {
                let c = g.concat_channels(v[0], v[1])?;
                let s = g.slice_channels(c, 1, 6)?;
                project(g, s, seed)
            }),
        ),
        (
            "mask_spatial",
            vec![a.clone()],
            Box::new(move |g, v| {
                let keep: Vec<f64> = (0..6).map(|i| ((i + seed as usize) % 2) as f64).collect();
                let y = g.mask_spatial(v[0], keep)?;
                project(g, y, seed)
            }),
        ),
        (
            "weighted_mean",
            vec![a.clone()],
            Box::new(move |g, v| {
                let w: Vec<f64> = (0..6).map(|i| ((i + seed as usize) % 3) as f64).collect();
                g.weighted_mean(v[0], w)
            }),
        ),
        (
            "depth_to_space",
            vec![r(&[1, 2, 3, 8], -1.0, 1.0)],
            Box::new(move |g, v| {
                let y = g.depth_to_space(v[0], 2)?;
                project(g, y, seed)
            }),
        ),
        (
            "space_to_depth",
            vec![r(&[1, 4, 6, 2], -1.0, 1.0)],
            Box::new(move |g, v| {
                let y = g.space_to_depth(v[0], 2)?;
                project(g, y, seed)
            }),
        ),
        (
            "lstm_cell",
            vec![r(&[1, 2, 3, 12], -2.0, 2.0), r(&[1, 2, 3, 3], -1.0, 1.0)],
            Box::new(move |g, v| {
                let y = g.lstm_cell(v[0], v[1])?;
                project(g, y, seed)
            }),
        ),
    ];
    for (name, k, stride, bias) in [
        ("conv2d 3x3/1", 3, 1, true),
        ("conv2d 3x3/2", 3, 2, true),
        ("conv2d 1x1/1", 1, 1, false),
    ] {
        let mut inputs = vec![r(&[2, 5, 6, 3], -1.0, 1.0), r(&[k, k, 3, 4], -0.5, 0.5)];
        if bias {
            inputs.push(r(&[4], -0.5, 0.5));
        }
        cases.push((
            name,
            inputs,
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], v.get(2).copied(), stride)?;
                project(g, y, seed)
            }),
        ));
    }
    cases.push((
        "conv_lstm_step/2",
        vec![
            r(&[1, 4, 4, 2], -1.0, 1.0),
            r(&[1, 2, 2, 3], -1.0, 1.0),
            r(&[1, 2, 2, 3], -1.0, 1.0),
            r(&[3, 3, 2, 12], -0.5, 0.5),
            r(&[12], -0.5, 0.5),
            r(&[3, 3, 3, 12], -0.5, 0.5),
        ],
        Box::new(move |g, v| {
            let w = ConvLstmWeights {
                input_weight: v[3],
                bias: v[4],
                hidden_weight: v[5],
                stride: 2,
            };
            let (h, s) = conv_lstm_step(
                g,
                v[0],
                LstmVars {
                    hidden: v[1],
                    cell: v[2],
                },
                &w,
            )?;
            let a = project(g, h, seed)?;
            let b = project(g, s.cell, seed + 1)?;
            g.add(a, b)
        }),
    ));
    cases
}

type GradBuild = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>;

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut checked = 0;
    for seed in 0..GRAD_SEEDS {
        for (name, inputs, build) in grad_cases(seed) {
            let r = check(&inputs, GRAD_H, build)?;
            checked += r.checked;
            if r.max_relative_error > worst.0 {
                worst = (r.max_relative_error, name);
            }
        }
        // the straight-through estimator is an identity by definition
        let mut g = Graph::<f64>::new();
        let soft = g.param(Tensor::new(&[3], vec![0.2, 0.7, 0.4])?);
        let hard = Tensor::new(&[3], vec![0.0, 1.0, 1.0])?;
        let y = g.straight_through(soft, hard)?;
        let loss = project(&mut g, y, seed)?;
        let grads = g.backward(loss)?;
        let mut g2 = Graph::<f64>::new();
        let s2 = g2.param(Tensor::new(&[3], vec![0.2, 0.7, 0.4])?);
        let l2 = project(&mut g2, s2, seed)?;
        let expected = g2.backward(l2)?;
        if grads.get(soft) != expected.get(s2) {
            return Ok((
                false,
                "straight_through gradient is not the identity".into(),
            ));
        }
    }
    let elapsed = start.elapsed();
    Ok((
        worst.0 < GRAD_TOL && elapsed < GRAD_BUDGET,
        format!(
            "{checked} partials over {GRAD_SEEDS} seeds, max rel err {:.2e} ({}) < {GRAD_TOL:.0e}, {:.1} s < {} s",
            worst.0,
            worst.1,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    ))
}

// 2 -----------------------------------------------------------------------

fn models(count: u64) -> Result<Vec<Model<f32>>, Box<dyn Error>> {
    (0..count)
        .map(|s| Ok(Model::new(CodecConfig::toy(), 500 + s)?))
        .collect()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let models = models(4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut stops, mut tiles) = (0, 0);
    for case in 0..SYNC_CASES {
        let model = &models[case as usize % models.len()];
        let (h, w) = (rng.random_range(16..=80), rng.random_range(16..=80));
        let image = random_image(h, w, &mut rng);
        let opts = EncodeOptions {
            threshold: random_threshold(&mut rng),
            iterations: 4,
            sct: true,
        };
        let enc = model.full_encode(&image, &opts)?;
        if decoder_mask_from_codes(&enc.codes) != enc.masks {
            return Ok((
                false,
                format!("case {case}: decoder masks differ from encoder masks"),
            ));
        }
        let last = enc.masks.last().expect("K >= 1");
        stops += last.count_stopped();
        tiles += last.num_tiles();
    }
    let elapsed = start.elapsed();
    Ok((
        elapsed < SYNC_BUDGET,
        format!(
            "{SYNC_CASES} encodes identical, {stops}/{tiles} tiles stopped by K, {:.1} s < {} s",
            elapsed.as_secs_f64(),
            SYNC_BUDGET.as_secs()
        ),
    ))
}

// 3 -----------------------------------------------------------------------

/// Hand-packed 2x2-tile stream: B = 8, K = 2, tile (0, 1) stops at k = 1.
fn golden_fixture() -> (Vec<CodeTensor>, Vec<TileMask>, SctHeader, Vec<u8>) {
    let bits = |bytes: &[u8]| -> Vec<u8> {
        bytes
            .iter()
            .flat_map(|b| (0..8).rev().map(move |i| (b >> i) & 1))
            .collect()
    };
    let codes = vec![
        CodeTensor::from_bits(2, 2, 8, bits(&[0xB1, 0x00, 0xFF, 0x01]), 1).unwrap(),
        CodeTensor::from_bits(2, 2, 8, bits(&[0x55, 0x00, 0x80, 0x0F]), 2).unwrap(),
    ];
    let masks = decoder_mask_from_codes(&codes);
    let header = SctHeader::new(8, 8, 2, 8, 4, true, 0x0102_0304_0506_0708).unwrap();
    let mut expected = b"SCT1".to_vec();
    expected.extend_from_slice(&[1, 8, 0, 8, 0, 2, 8, 4, 1, 8, 7, 6, 5, 4, 3, 2, 1]);
    expected.extend_from_slice(&[0xB1, 0x00, 0xFF, 0x01]);
    expected.extend_from_slice(&[0x55, 0x80, 0x0F]);
    (codes, masks, header, expected)
}

fn check_golden() -> Result<Option<String>, Box<dyn Error>> {
    let (codes, masks, header, expected) = golden_fixture();
    let stream = write(&codes, &masks, header)?;
    if stream.to_bytes() != expected {
        return Ok(Some(format!(
            "golden bytes differ: {:02x?}",
            stream.to_bytes()
        )));
    }
    let from_file =
        std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_2x2.sct"))?;
    if from_file != expected {
        return Ok(Some(
            "tests/fixtures/golden_2x2.sct differs from hand packing".into(),
        ));
    }
    let (c2, m2) = read(&SctBitstream::from_bytes(&expected)?)?;
    if c2 != codes || m2 != masks {
        return Ok(Some("golden fixture does not parse back".into()));
    }
    Ok(None)
}

fn active_bits(masks: &[TileMask], depth: usize, sct: bool) -> Vec<usize> {
    masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let k = i + 1;
            let active = if sct {
                (0..m.num_tiles())
                    .filter(|&t| m.first_stop(t).is_none_or(|s| s >= k))
                    .count()
            } else {
                m.num_tiles()
            };
            depth * active
        })
        .collect()
}

fn criterion_3() -> Outcome {
    if let Some(why) = check_golden()? {
        return Ok((false, why));
    }
    let models = models(4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut total_bits = 0;
    for case in 0..ROUND_TRIP_CASES {
        let model = &models[case as usize % models.len()];
        let cfg = model.config();
        let (h, w) = (rng.random_range(8..=72), rng.random_range(8..=72));
        let image = random_image(h, w, &mut rng);
        let opts = EncodeOptions {
            threshold: random_threshold(&mut rng),
            iterations: rng.random_range(1..=cfg.max_iterations),
            sct: rng.random_bool(0.85),
        };
        let enc = model.full_encode(&image, &opts)?;
        let header = SctHeader::new(
            h,
            w,
            opts.iterations,
            cfg.code_depth,
            cfg.tile_size,
            opts.sct,
            cfg.hash(),
        )?;
        let stream = write(&enc.codes, &enc.masks, header)?;
        let fail = |what: &str| Ok((false, format!("case {case}: {what}")));
        let raw = SctBitstream::from_bytes(&stream.to_bytes())?;
        let dz = decompress(&compress(&stream))?;
        for (path, parsed) in [("raw", &raw), ("compressed", &dz)] {
            let (codes, masks) = read(parsed)?;
            if codes != enc.codes {
                return fail(&format!("{path} codes differ"));
            }
            let expected_masks = if opts.sct {
                enc.masks.clone()
            } else {
                enc.masks
                    .iter()
                    .map(|m| TileMask::empty(m.grid().0, m.grid().1))
                    .collect()
            };
            if masks != expected_masks {
                return fail(&format!("{path} masks differ"));
            }
            let recon = model.reconstruct(&codes, &masks)?;
            if recon != enc.reconstructions {
                return fail(&format!("{path} reconstructions differ"));
            }
        }
        let bits = active_bits(&enc.masks, cfg.code_depth, opts.sct);
        for (k, (p, &b)) in stream.payloads.iter().zip(&bits).enumerate() {
            if p.len() != b.div_ceil(8) {
                return fail(&format!(
                    "payload {} is {} bytes for {b} bits",
                    k + 1,
                    p.len()
                ));
            }
        }
        let report = bitrate_report(&stream);
        if report.code_bits != bits.iter().sum::<usize>() {
            return fail("code_bits differs from B * |active(k)|");
        }
        total_bits += report.code_bits;
    }
    Ok((
        true,
        format!("{ROUND_TRIP_CASES} cases + golden fixture bitwise, {total_bits} code bits, payload sizes exact"),
    ))
}

// 4 -----------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let (b, k_max, side) = (32usize, 8usize, 64usize);
    let grid = side / 16;
    let codes: Vec<CodeTensor> = (1..=k_max)
        .map(|k| CodeTensor::zeros(grid, grid, b, k))
        .collect();
    let masks = vec![TileMask::full(grid, grid, 1); k_max];
    let header = SctHeader::new(side, side, k_max, b, 16, true, 0)?;
    let stream = write(&codes, &masks, header)?;
    let r = bitrate_report(&stream);
    let hand = r.trimmed_bpp == b as f64 / 256.0 && r.nominal_bpp == (k_max * b) as f64 / 256.0;
    let hand_exact = r.trimmed_bpp == 0.125 && r.nominal_bpp == 1.0;

    // the same case produced by a codec that stops every tile at once
    let model = Model::<f32>::new(CodecConfig::default(), 4)?;
    let image = Tensor::from_fn(&[side, side, 3], |i| (i % 7) as f32 / 7.0);
    let opts = EncodeOptions {
        threshold: f64::INFINITY,
        iterations: k_max,
        sct: true,
    };
    let enc = model.full_encode(&image, &opts)?;
    let cfg = model.config();
    let header = SctHeader::new(
        side,
        side,
        k_max,
        cfg.code_depth,
        cfg.tile_size,
        true,
        cfg.hash(),
    )?;
    let coded = bitrate_report(&write(&enc.codes, &enc.masks, header)?);
    let coded_exact = coded.trimmed_bpp == 0.125 && coded.nominal_bpp == 1.0;
    let k1 = bitrate_report(&stream.truncated(1)?).nominal_bpp;
    Ok((
        hand && hand_exact && coded_exact && k1 == 0.125,
        format!(
            "trimmed {} vs nominal {} (hand), {} vs {} (codec), nominal at k=1 {}",
            r.trimmed_bpp, r.nominal_bpp, coded.trimmed_bpp, coded.nominal_bpp, k1
        ),
    ))
}

// 5 -----------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let config = CodecConfig {
        max_iterations: ISOLATION_ITERATIONS,
        ..CodecConfig::toy()
    };
    let data = Dataset::load(&DatasetSpec::default())?;
    let loss = LossConfig {
        quality_threshold: ISOLATION_THRESHOLD,
        ..LossConfig::default()
    };
    let mut stopped = 0;
    for seed in 0..ISOLATION_SEEDS {
        let model = Model::<f32>::new(config.clone(), 50 + seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = data.sample_batch(2, 64, &mut rng)?;
        let with = natural_trace(&model, &images, &loss, ISOLATION_ITERATIONS, true, seed)?;
        let without = natural_trace(&model, &images, &loss, ISOLATION_ITERATIONS, false, seed)?;
        for k in 0..ISOLATION_ITERATIONS {
            let same = with.reconstructions[k] == without.reconstructions[k]
                && with.decoder_states[k] == without.decoder_states[k]
                && with.codes[k] == without.codes[k]
                && with.masks[k] == without.masks[k];
            if !same {
                return Ok((
                    false,
                    format!("seed {seed}: natural pass differs at k={}", k + 1),
                ));
            }
        }
        if with.natural_l1 != without.natural_l1 {
            return Ok((false, format!("seed {seed}: natural L1 differs")));
        }
        stopped += with
            .masks
            .last()
            .map_or(0, |ms| ms.iter().map(|m| m.count_stopped()).sum());
    }
    Ok((
        true,
        format!("{ISOLATION_SEEDS} seeds x K={ISOLATION_ITERATIONS} bitwise identical ({stopped} natural stops at K)"),
    ))
}

// 6 -----------------------------------------------------------------------

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..THRESHOLD_TUPLES {
        let a: f64 = rng.random_range(0.0..255.0);
        let b: f64 = rng.random_range(0.0..255.0);
        let (e_min, e_max) = (a.min(b), a.max(b));
        let kk = rng.random_range(1..=16usize);
        let k = rng.random_range(1..=kk);
        let oracle = (k as f64 / kk as f64) * (e_max - e_min) + e_min;
        if forced_threshold(e_min, e_max, k, kk)? != oracle {
            return Ok((false, format!("tuple {case}: threshold mismatch")));
        }
        let (th, tw) = (rng.random_range(1..5), rng.random_range(1..5));
        let mut values: Vec<f64> = (0..th * tw)
            .map(|_| rng.random_range(e_min..=e_max))
            .collect();
        values[0] = oracle;
        let q = TileQualityMap::from_values(th, tw, values.clone());
        let m = forced_mask(&q, e_min, e_max, k, kk)?;
        for (t, &e) in values.iter().enumerate() {
            let expected = if e <= oracle { Some(k) } else { None };
            if m.first_stop(t) != expected {
                return Ok((false, format!("tuple {case}: tile {t} masked wrongly")));
            }
        }
    }
    Ok((
        true,
        format!("{THRESHOLD_TUPLES} tuples exact, boundary tiles included"),
    ))
}

// 7 -----------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let data = Dataset::load(&DatasetSpec::default())?;
    let loss = LossConfig::default();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(77);
    let probe = data.sample_batch(8, 64, &mut probe_rng)?;
    let mut t = Trainer::new(
        Model::new(CodecConfig::toy(), TOY_SEED)?,
        toy_train_config(DESCENT_STEPS),
        loss.clone(),
    )?;
    let k = t.model.config().max_iterations;
    let before = natural_trace(&t.model, &probe, &loss, k, false, 0)?.natural_l1 as f64;
    let first = t.step(&data)?.natural_l1;
    let mut tail = Vec::new();
    for _ in 1..DESCENT_STEPS {
        tail.push(t.step(&data)?.natural_l1);
    }
    let after = natural_trace(&t.model, &probe, &loss, k, false, 0)?.natural_l1 as f64;
    let drop = 1.0 - after / before;
    let last50 = tail[tail.len() - 50..].iter().sum::<f64>() / 50.0;
    let elapsed = start.elapsed();
    Ok((
        drop >= DESCENT_MIN_DROP && elapsed < DESCENT_BUDGET,
        format!(
            "probe natural L1 {before:.4} -> {after:.4} ({:.1}% drop, need {:.0}%); step 1 {first:.4}, last-50 mean {last50:.4}; {:.0} s",
            100.0 * drop,
            100.0 * DESCENT_MIN_DROP,
            elapsed.as_secs_f64()
        ),
    ))
}

// 8 -----------------------------------------------------------------------

struct ProbeStats {
    zero_fraction: f64,
    lz_ratio: f64,
}

fn probe_stats(model: &Model<f32>) -> Result<ProbeStats, Box<dyn Error>> {
    let probe = Dataset::synthetic(8, 64, 99)?;
    let opts = EncodeOptions {
        threshold: PROBE_THRESHOLD,
        iterations: model.config().max_iterations,
        sct: true,
    };
    let mut hist = BitHistogram::default();
    let (mut raw, mut dz) = (0, 0);
    for i in 0..probe.len() {
        let ev = evaluate_image(model, "probe", probe.tensor(i), &opts)?;
        hist.merge(&ev.histogram);
        raw += ev.stream.to_bytes().len();
        dz += compress(&ev.stream).len();
    }
    Ok(ProbeStats {
        zero_fraction: hist.zero_fraction(),
        lz_ratio: raw as f64 / dz as f64,
    })
}

fn criterion_8() -> Outcome {
    let base = probe_stats(bias_model(0.0))?;
    let biased = probe_stats(bias_model(BIAS_LAMBDA))?;
    let gap = biased.zero_fraction - base.zero_fraction;
    Ok((
        gap >= BIAS_MIN_GAP && biased.lz_ratio > base.lz_ratio,
        format!(
            "zero bits {:.4} (lambda {BIAS_LAMBDA}) vs {:.4} (lambda 0), gap {:.1} pp >= {:.0}; .sct/.sct.dz {:.4} vs {:.4}",
            biased.zero_fraction,
            base.zero_fraction,
            100.0 * gap,
            100.0 * BIAS_MIN_GAP,
            biased.lz_ratio,
            base.lz_ratio
        ),
    ))
}

// 9 -----------------------------------------------------------------------

fn median(mut v: Vec<usize>) -> f64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

fn criterion_9() -> Outcome {
    let model = bias_model(BIAS_LAMBDA);
    let k_max = model.config().max_iterations;
    let tile = model.config().tile_size;
    let (w, h) = (128, 64);
    let image = half_flat_half_noise(w, h, 5).to_tensor::<f32>();
    let opts = EncodeOptions {
        threshold: ADAPTIVE_THRESHOLD,
        iterations: k_max,
        sct: true,
    };
    let ev = evaluate_image(model, "half", &image, &opts)?;
    let mask = ev.encode.masks.last().expect("K >= 1");
    let tw = w / tile;
    let (mut flat, mut textured) = (Vec::new(), Vec::new());
    for t in 0..mask.num_tiles() {
        // never-stopped tiles count as K + 1
        let stop = mask.first_stop(t).unwrap_or(k_max + 1);
        if (t % tw) * tile < w / 2 {
            flat.push(stop);
        } else {
            textured.push(stop);
        }
    }
    let (mf, mt) = (median(flat), median(textured));
    let last = ev.points.last().expect("K >= 1");
    Ok((
        mf < mt && last.trimmed_bpp < last.nominal_bpp,
        format!(
            "median first stop flat {mf} vs textured {mt} (K+1 = never), trimmed {:.4} < nominal {:.4} bpp at threshold {ADAPTIVE_THRESHOLD}",
            last.trimmed_bpp, last.nominal_bpp
        ),
    ))
}

// 10 ----------------------------------------------------------------------

fn psnr_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let mut se = 0.0;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let i = (y * w + x) * 3 + c;
                let d = a.data()[i] - b.data()[i];
                se += d * d;
            }
        }
    }
    10.0 * (1.0 / (se / (h * w * 3) as f64)).log10()
}

fn block_oracle(a: &Tensor<f64>, b: &Tensor<f64>, block: usize) -> Vec<f64> {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let mut out = Vec::new();
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (mut s, mut n) = (0.0, 0.0);
            for y in by..(by + block).min(h) {
                for x in bx..(bx + block).min(w) {
                    for c in 0..3 {
                        let i = (y * w + x) * 3 + c;
                        s += (a.data()[i] - b.data()[i]).abs() * 255.0;
                        n += 1.0;
                    }
                }
            }
            out.push(s / n);
        }
    }
    out
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let (h, w) = (rng.random_range(32..100), rng.random_range(32..100));
        let a = random_tensor(&[h, w, 3], 0.0, 1.0, &mut rng);
        let b = random_tensor(&[h, w, 3], 0.0, 1.0, &mut rng);
        worst = worst.max((psnr(&a, &b)? - psnr_oracle(&a, &b)).abs());
        let r = tile_variance_report(&a, &b, 32)?;
        let oracle = block_oracle(&a, &b, 32);
        if r.per_block.len() != oracle.len() {
            return Ok((false, format!("case {case}: block count")));
        }
        for (x, y) in r.per_block.iter().zip(&oracle) {
            worst = worst.max((x - y).abs());
        }
        let n = oracle.len() as f64;
        let mean = oracle.iter().sum::<f64>() / n;
        let var = oracle.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        worst = worst
            .max((r.mean_l1 - mean).abs())
            .max((r.std_l1 - var.sqrt()).abs());
    }
    // histogram counts against a scalar loop
    for case in 0..20 {
        let (th, tw, depth, kk) = (
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(1..40),
            rng.random_range(1..6),
        );
        let stops: Vec<Option<usize>> = (0..th * tw)
            .map(|_| rng.random_bool(0.5).then(|| rng.random_range(1..=kk)))
            .collect();
        let mut codes = Vec::new();
        for k in 1..=kk {
            let bits = (0..th * tw)
                .flat_map(|t| {
                    let live = stops[t].is_none_or(|s| s > k);
                    (0..depth)
                        .map(|_| u8::from(live && rng.random_bool(0.5)))
                        .collect::<Vec<_>>()
                })
                .collect();
            codes.push(CodeTensor::from_bits(th, tw, depth, bits, k)?);
        }
        let masks = decoder_mask_from_codes(&codes);
        let hist = bit_histogram(&codes, &masks);
        for k in 1..=kk {
            let (mut zeros, mut ones) = (0, 0);
            for t in 0..th * tw {
                let sent = masks[k - 1].first_stop(t).is_none_or(|s| s >= k);
                if sent {
                    for &bit in codes[k - 1].tile(t) {
                        if bit == 1 {
                            ones += 1;
                        } else {
                            zeros += 1;
                        }
                    }
                }
            }
            if hist.zeros[k - 1] != zeros || hist.ones[k - 1] != ones {
                return Ok((false, format!("histogram case {case} differs at k={k}")));
            }
        }
    }
    let a = random_tensor(&[48, 40, 3], 0.0, 254.0 / 255.0, &mut rng);
    let mut b = a.clone();
    for v in b.data_mut() {
        *v += 1.0 / 255.0;
    }
    let uniform = psnr(&a, &b)?;
    Ok((
        worst <= METRIC_TOL && (uniform - UNIFORM_PSNR_DB).abs() <= UNIFORM_PSNR_TOL,
        format!(
            "float max abs diff {worst:.1e} <= {METRIC_TOL:.0e}, histogram counts exact, uniform 1/255 error {uniform:.4} dB = {UNIFORM_PSNR_DB} +- {UNIFORM_PSNR_TOL}"
        ),
    ))
}

// 11 ----------------------------------------------------------------------

fn criterion_11() -> Outcome {
    let tmp = tempfile::tempdir()?;
    let config = "[train]\nseed = 11\n\n[dataset]\nsynthetic_count = 4\nsynthetic_size = 64\n\n[output]\ndir = \"run\"\n";
    let mut logs = Vec::new();
    let mut checkpoints = Vec::new();
    for run in 0..2 {
        let dir = tmp.path().join(format!("run{run}"));
        std::fs::create_dir_all(&dir)?;
        let cfg = dir.join("train.toml");
        std::fs::write(&cfg, config)?;
        let args = TrainArgs {
            config: cfg,
            steps: Some(DETERMINISM_STEPS),
            resume: None,
        };
        let ck = cmd_train(&args, &mut std::io::sink())?;
        logs.push(std::fs::read(ck.with_file_name("train_log.csv"))?);
        checkpoints.push(std::fs::read(&ck)?);
    }
    let ck_path = tmp.path().join("model.sctc");
    std::fs::write(&ck_path, &checkpoints[0])?;
    let image = tmp.path().join("image.ppm");
    save_image(
        &image,
        &ImageFile::from_tensor(&random_image(40, 56, &mut ChaCha8Rng::seed_from_u64(11)))?,
    )?;
    let mut streams = Vec::new();
    for run in 0..4 {
        let args = EncodeArgs {
            image: image.clone(),
            checkpoint: ck_path.clone(),
            coding: CodingArgs {
                threshold: 20.0,
                iterations: None,
                no_sct: false,
            },
            raw: false,
            compressed: run >= 2,
            output: Some(tmp.path().join(format!("out{run}.sct"))),
        };
        streams.push(std::fs::read(cmd_encode(&args, &mut std::io::sink())?)?);
    }
    let lines = String::from_utf8_lossy(&logs[0]).lines().count();
    Ok((
        logs[0] == logs[1]
            && lines == DETERMINISM_STEPS + 1
            && checkpoints[0] == checkpoints[1]
            && streams[0] == streams[1]
            && streams[2] == streams[3],
        format!(
            "{DETERMINISM_STEPS}-step logs {}, checkpoints {}, .sct {}, .sct.dz {}",
            same(&logs),
            same(&checkpoints),
            same(&streams[..2]),
            same(&streams[2..])
        ),
    ))
}

fn same(v: &[Vec<u8>]) -> &'static str {
    if v[0] == v[1] {
        "identical"
    } else {
        "DIFFER"
    }
}

// -------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient suite", criterion_1),
        ("mask synchronization", criterion_2),
        ("bitstream round trip", criterion_3),
        ("trimming arithmetic", criterion_4),
        ("two-pass isolation", criterion_5),
        ("threshold formula", criterion_6),
        ("toy training descent", criterion_7),
        ("bit-bias direction", criterion_8),
        ("adaptive-rate direction", criterion_9),
        ("metric oracles", criterion_10),
        ("determinism", criterion_11),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(run)) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".into()),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} {id:>2} {name}: {detail} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
