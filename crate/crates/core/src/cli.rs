//! The `sct` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bitstream::{self, bitrate_report, parse_any, SctBitstream, SctHeader};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{Dataset, DatasetSpec, Split};
use crate::error::{BitstreamError, CheckpointError, Error, Result};
use crate::eval::{
    self, bit_histogram, evaluate_image, mask_evolution_render, savings_decomposition,
};
use crate::image::{load_image, save_image, ImageFile};
use crate::net::{finish_output, EncodeOptions, Model};
use crate::train::{StepStats, Trainer};

#[derive(Debug, Parser)]
#[command(name = "sct", version, about = "Stop-code tolerant neural image codec")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a TOML config.
    Train(TrainArgs),
    /// Compress an image into a .sct or .sct.dz stream.
    Encode(EncodeArgs),
    /// Reconstruct an image from a stream.
    Decode(DecodeArgs),
    /// Rate-distortion evaluation over an image set.
    Eval(EvalArgs),
    /// Print header, payload sizes, bit histogram and mask fractions.
    Inspect(InspectArgs),
    /// Write the built-in synthetic image set to a directory.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Continue from a checkpoint holding optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CodingArgs {
    /// Natural stop threshold on per-tile L1 error, 8-bit units (`inf` stops
    /// every tile at the first iteration).
    #[arg(long, default_value_t = 4.0)]
    pub threshold: f64,
    /// Iterations to encode; defaults to the model's maximum.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Fixed-rate baseline: no masking, no stop codes.
    #[arg(long)]
    pub no_sct: bool,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    pub image: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub coding: CodingArgs,
    /// Write the uncompressed `.sct` form (default).
    #[arg(long, conflicts_with = "compressed")]
    pub raw: bool,
    /// Write the gzip-wrapped `.sct.dz` form.
    #[arg(long)]
    pub compressed: bool,
    /// Output path; a `.json` bitrate report is written next to it.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    pub stream: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Reconstruct after this many iterations (default: all in the stream).
    #[arg(long)]
    pub iterations: Option<usize>,
    /// `.ppm` or `.png` output.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of evaluation images; overrides the config's dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Run config supplying the dataset when `--dataset` is absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub coding: CodingArgs,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub stream: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn path_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Path {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(path_err(parent))?;
    }
    fs::write(path, bytes).map_err(path_err(path))
}

fn encode_options(model: &Model<f32>, c: &CodingArgs) -> Result<EncodeOptions> {
    if c.threshold.is_nan() {
        return Err(Error::Config("threshold is NaN".into()));
    }
    let max = model.config().max_iterations;
    let iterations = c.iterations.unwrap_or(max);
    if iterations == 0 || iterations > max {
        return Err(Error::Config(format!(
            "--iterations {iterations} outside 1..={max}"
        )));
    }
    Ok(EncodeOptions {
        threshold: c.threshold,
        iterations,
        sct: !c.no_sct,
    })
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<PathBuf> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    let data = Dataset::load(&cfg.dataset)?;
    let mut trainer = match &args.resume {
        None => Trainer::new(
            Model::new(cfg.codec.clone(), cfg.train.seed)?,
            cfg.train.clone(),
            cfg.loss.clone(),
        )?,
        Some(path) => {
            let ck = checkpoint::load(path, Some(cfg.codec.hash()))?;
            let mut t = Trainer::new(ck.model, cfg.train.clone(), cfg.loss.clone())?;
            if let Some(adam) = ck.optimizer {
                t.optimizer = adam;
            }
            t
        }
    };
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(path_err(dir))?;
    let log_path = dir.join("train_log.csv");
    let mut log = String::new();
    if args.resume.is_some() && log_path.exists() {
        log = fs::read_to_string(&log_path).map_err(path_err(&log_path))?;
    } else {
        log.push_str(StepStats::CSV_HEADER);
        log.push('\n');
    }
    writeln!(
        out,
        "training {} ({} params) for {} steps",
        cfg.codec,
        trainer.model.param_count(),
        cfg.train.steps
    )?;
    let start = trainer.steps_done() as usize;
    for _ in start..cfg.train.steps {
        let s = trainer.step(&data)?;
        log.push_str(&s.csv_row());
        log.push('\n');
        let step = s.step as usize;
        if step.is_multiple_of(50) || step == cfg.train.steps {
            writeln!(
                out,
                "step {step}: natural L1 {:.5}, forced L1 {:.5}, bit penalty {:.4}, zero bits {:.3}",
                s.natural_l1, s.forced_l1, s.bit_penalty, s.zero_bit_fraction
            )?;
        }
        if cfg.train.checkpoint_every > 0 && step.is_multiple_of(cfg.train.checkpoint_every) {
            checkpoint::save(
                &dir.join(format!("checkpoint-{step:06}.sctc")),
                &trainer.model,
                Some(&trainer.optimizer),
            )?;
        }
    }
    write_file(&log_path, &log)?;
    let final_path = dir.join("checkpoint.sctc");
    checkpoint::save(&final_path, &trainer.model, Some(&trainer.optimizer))?;
    writeln!(out, "wrote {}", final_path.display())?;
    Ok(final_path)
}

#[derive(Serialize)]
struct EncodeReport {
    image: String,
    true_h: usize,
    true_w: usize,
    iterations: usize,
    code_depth: usize,
    sct: bool,
    threshold: f64,
    nominal_bpp: f64,
    trimmed_bpp: f64,
    compressed_bpp: f64,
    payload_bytes: usize,
    compressed_bytes: usize,
    file_bytes: usize,
    code_bits: usize,
}

pub fn cmd_encode(args: &EncodeArgs, out: &mut dyn Write) -> Result<PathBuf> {
    let model = checkpoint::load(&args.checkpoint, None)?.model;
    let opts = encode_options(&model, &args.coding)?;
    let image = load_image(&args.image)?;
    let result = model.full_encode(&image.to_tensor::<f32>(), &opts)?;
    let cfg = model.config();
    let header = SctHeader::new(
        result.true_h,
        result.true_w,
        opts.iterations,
        cfg.code_depth,
        cfg.tile_size,
        opts.sct,
        cfg.hash(),
    )?;
    let stream = bitstream::write(&result.codes, &result.masks, header)?;
    let bytes = if args.compressed {
        bitstream::compress(&stream)
    } else {
        stream.to_bytes()
    };
    let path = args.output.clone().unwrap_or_else(|| {
        let ext = if args.compressed { "sct.dz" } else { "sct" };
        args.image.with_extension(ext)
    });
    write_file(&path, &bytes)?;
    let r = bitrate_report(&stream);
    let report = EncodeReport {
        image: args.image.display().to_string(),
        true_h: result.true_h,
        true_w: result.true_w,
        iterations: opts.iterations,
        code_depth: cfg.code_depth,
        sct: opts.sct,
        threshold: opts.threshold,
        nominal_bpp: r.nominal_bpp,
        trimmed_bpp: r.trimmed_bpp,
        compressed_bpp: r.compressed_bpp,
        payload_bytes: r.payload_bytes,
        compressed_bytes: r.compressed_bytes,
        file_bytes: bytes.len(),
        code_bits: r.code_bits,
    };
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    let mut sidecar = path.clone().into_os_string();
    sidecar.push(".json");
    write_file(Path::new(&sidecar), json)?;
    writeln!(
        out,
        "{}: {} bytes, nominal {:.4} bpp, trimmed {:.4} bpp, compressed {:.4} bpp",
        path.display(),
        bytes.len(),
        r.nominal_bpp,
        r.trimmed_bpp,
        r.compressed_bpp
    )?;
    Ok(path)
}

fn read_stream(path: &Path) -> Result<SctBitstream> {
    let bytes = fs::read(path).map_err(path_err(path))?;
    Ok(parse_any(&bytes)?)
}

/// Decoder-side reconstruction after `k` iterations, cropped and clamped.
pub fn decode_stream(
    model: &Model<f32>,
    stream: &SctBitstream,
    k: Option<usize>,
) -> Result<ImageFile> {
    let h = &stream.header;
    let cfg = model.config();
    if h.config_hash != cfg.hash() {
        return Err(CheckpointError::HashMismatch {
            expected: h.config_hash,
            found: cfg.hash(),
        }
        .into());
    }
    if h.depth as usize != cfg.code_depth || h.tile_size as usize != cfg.tile_size {
        return Err(
            BitstreamError::Header("stream geometry does not match the model".into()).into(),
        );
    }
    let available = h.iterations as usize;
    let k = k.unwrap_or(available);
    if k == 0 || k > available {
        return Err(Error::Config(format!(
            "--iterations {k} outside 1..={available}"
        )));
    }
    let (codes, masks) = bitstream::read(&stream.truncated(k)?)?;
    let recon = model.reconstruct(&codes, &masks)?;
    let last = recon.last().expect("at least one iteration");
    ImageFile::from_tensor(&finish_output(last, h.true_h as usize, h.true_w as usize)?)
}

pub fn cmd_decode(args: &DecodeArgs, out: &mut dyn Write) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint, None)?.model;
    let stream = read_stream(&args.stream)?;
    let img = decode_stream(&model, &stream, args.iterations)?;
    if let Some(parent) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(path_err(parent))?;
    }
    save_image(&args.output, &img)?;
    writeln!(
        out,
        "wrote {} ({}x{})",
        args.output.display(),
        img.width,
        img.height
    )?;
    Ok(())
}

fn image_name(img: &ImageFile, index: usize) -> String {
    img.source
        .as_ref()
        .and_then(|p| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("synthetic-{index:03}"))
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint, None)?.model;
    let opts = encode_options(&model, &args.coding)?;
    let data = match (&args.dataset, &args.config) {
        (Some(dir), _) => Dataset::load(&DatasetSpec {
            root: Some(dir.clone()),
            split: Split::Eval,
            ..DatasetSpec::default()
        })?,
        (None, Some(cfg)) => {
            let mut spec = RunConfig::load(cfg)?.dataset;
            spec.split = Split::Eval;
            Dataset::load(&spec)?
        }
        (None, None) => Dataset::load(&DatasetSpec::default())?,
    };
    let mut points = Vec::new();
    let mut savings = Vec::new();
    let mut hists = Vec::new();
    for i in 0..data.len() {
        let name = image_name(&data.images[i], i);
        let ev = evaluate_image(&model, &name, data.tensor(i), &opts)?;
        if i == 0 {
            let frames = mask_evolution_render(
                &ev.encode.masks,
                &ev.encode.reconstructions,
                model.config().tile_size,
                ev.encode.true_h,
                ev.encode.true_w,
                eval::MASK_COLOR,
            )?;
            let dir = args.output.join("renders");
            fs::create_dir_all(&dir).map_err(path_err(&dir))?;
            for (k, f) in frames.iter().enumerate() {
                save_image(&dir.join(format!("{name}_k{:02}.ppm", k + 1)), f)?;
                #[cfg(feature = "png")]
                save_image(&dir.join(format!("{name}_k{:02}.png", k + 1)), f)?;
            }
            write_file(
                &args.output.join("mask_fraction.csv"),
                eval::mask_fraction_csv(&ev.encode.masks),
            )?;
        }
        savings.push((name.clone(), savings_decomposition(&ev.stream)));
        hists.push((name, ev.histogram));
        points.extend(ev.points);
    }
    write_file(
        &args.output.join("rd_points.csv"),
        eval::rd_points_csv(&points),
    )?;
    write_file(
        &args.output.join("savings.csv"),
        eval::savings_csv(&savings),
    )?;
    write_file(
        &args.output.join("bit_hist.csv"),
        eval::bit_hist_csv(&hists),
    )?;
    let k = opts.iterations;
    let last: Vec<_> = points.iter().filter(|p| p.iteration == k).collect();
    let n = last.len().max(1) as f64;
    writeln!(
        out,
        "{} images, K={k}: mean PSNR {:.3} dB, trimmed {:.4} bpp, compressed {:.4} bpp (nominal {:.4})",
        data.len(),
        last.iter().map(|p| p.psnr_db).sum::<f64>() / n,
        last.iter().map(|p| p.trimmed_bpp).sum::<f64>() / n,
        last.iter().map(|p| p.compressed_bpp).sum::<f64>() / n,
        last.first().map_or(0.0, |p| p.nominal_bpp),
    )?;
    Ok(())
}

pub fn cmd_inspect(args: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let stream = read_stream(&args.stream)?;
    let h = stream.header;
    let (codes, masks) = bitstream::read(&stream)?;
    let (th, tw) = h.grid();
    writeln!(out, "format version {}", h.version)?;
    writeln!(
        out,
        "image {}x{} (tiles {th}x{tw} of {} px)",
        h.true_w, h.true_h, h.tile_size
    )?;
    writeln!(
        out,
        "iterations {}, bits per tile {}",
        h.iterations, h.depth
    )?;
    writeln!(
        out,
        "stop-code masking {}",
        if h.sct() { "on" } else { "off" }
    )?;
    writeln!(out, "config hash {:016x}", h.config_hash)?;
    let r = bitrate_report(&stream);
    writeln!(
        out,
        "nominal {:.4} bpp, trimmed {:.4} bpp, compressed {:.4} bpp",
        r.nominal_bpp, r.trimmed_bpp, r.compressed_bpp
    )?;
    let hist = bit_histogram(&codes, &masks);
    writeln!(out, "iteration,payload_bytes,zeros,ones,stopped_fraction")?;
    for (i, p) in stream.payloads.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{}",
            i + 1,
            p.len(),
            hist.zeros[i],
            hist.ones[i],
            masks[i].stopped_fraction()
        )?;
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    fs::create_dir_all(&args.output).map_err(path_err(&args.output))?;
    for (i, img) in crate::dataset::synthetic_images(args.count, args.size, args.seed)
        .iter()
        .enumerate()
    {
        save_image(&args.output.join(format!("synthetic-{i:03}.ppm")), img)?;
    }
    writeln!(
        out,
        "wrote {} images to {}",
        args.count,
        args.output.display()
    )?;
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, out).map(|_| ()),
        Command::Encode(a) => cmd_encode(a, out).map(|_| ()),
        Command::Decode(a) => cmd_decode(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Inspect(a) => cmd_inspect(a, out),
        Command::Synth(a) => cmd_synth(a, out),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}
