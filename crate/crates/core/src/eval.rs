//! Rate-distortion measurement: PSNR, block L1 statistics, bitrate savings,
//! bit histograms and mask-evolution renders, with CSV output.

use std::fmt::Write as _;

use crate::bitstream::{bitrate_report, compress, write, BitrateReport, SctBitstream, SctHeader};
use crate::code::CodeTensor;
use crate::error::{Result, TensorError};
use crate::image::ImageFile;
use crate::mask::{TileMask, PIXEL_SCALE};
use crate::net::{EncodeOptions, EncodeResult, Model};
use crate::tensor::{Scalar, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Side of the square blocks used by [`tile_variance_report`] by default.
pub const VARIANCE_BLOCK: usize = 32;
/// Two block errors closer than this (unit range) compare as equal.
pub const EQUAL_BAND: f64 = 0.5 / 256.0;

fn same_hw3<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(usize, usize), TensorError> {
    match (a.shape(), b.shape()) {
        ([h, w, 3], [h2, w2, 3]) if h == h2 && w == w2 => Ok((*h, *w)),
        _ => Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        }),
    }
}

/// `10 log10(1 / MSE)` over all pixels and channels of two `(H, W, 3)`
/// images in `[0, 1]`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(
    reference: &Tensor<T>,
    reconstruction: &Tensor<T>,
) -> Result<f64, TensorError> {
    same_hw3("psnr", reference, reconstruction)?;
    let n = reference.len() as f64;
    let mse = reference
        .data()
        .iter()
        .zip(reconstruction.data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileVarianceReport {
    pub block: usize,
    pub blocks_h: usize,
    pub blocks_w: usize,
    /// Mean absolute error per block, 8-bit units, raster order.
    pub per_block: Vec<f64>,
    pub mean_l1: f64,
    /// Population standard deviation of `per_block`.
    pub std_l1: f64,
}

fn block_l1<T: Scalar>(
    reference: &Tensor<T>,
    reconstruction: &Tensor<T>,
    block: usize,
) -> Result<(usize, usize, Vec<f64>), TensorError> {
    let (h, w) = same_hw3("tile_variance_report", reference, reconstruction)?;
    if block == 0 || block > h || block > w {
        return Err(TensorError::ShapeMismatch {
            op: "tile_variance_report: block larger than image",
            left: vec![h, w],
            right: vec![block],
        });
    }
    let (bh, bw) = (h.div_ceil(block), w.div_ceil(block));
    let mut sums = vec![0.0; bh * bw];
    let mut counts = vec![0usize; bh * bw];
    let (a, b) = (reference.data(), reconstruction.data());
    for y in 0..h {
        for x in 0..w {
            let t = (y / block) * bw + x / block;
            for c in 0..3 {
                let p = (y * w + x) * 3 + c;
                sums[t] += (a[p].as_f64() - b[p].as_f64()).abs();
            }
            counts[t] += 3;
        }
    }
    let per = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| s / n as f64 * PIXEL_SCALE)
        .collect();
    Ok((bh, bw, per))
}

/// Block-wise L1 error map with its mean and spread. Edge blocks smaller
/// than `block` average over the pixels they contain.
pub fn tile_variance_report<T: Scalar>(
    reference: &Tensor<T>,
    reconstruction: &Tensor<T>,
    block: usize,
) -> Result<TileVarianceReport, TensorError> {
    let (blocks_h, blocks_w, per_block) = block_l1(reference, reconstruction, block)?;
    let n = per_block.len() as f64;
    let mean_l1 = per_block.iter().sum::<f64>() / n;
    let std_l1 = (per_block.iter().map(|v| (v - mean_l1).powi(2)).sum::<f64>() / n).sqrt();
    Ok(TileVarianceReport {
        block,
        blocks_h,
        blocks_w,
        per_block,
        mean_l1,
        std_l1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Comparison {
    /// The first reconstruction has lower block error.
    Better,
    Worse,
    Equal,
}

/// Per-block verdict of reconstruction `a` against `b`.
pub fn compare_reconstructions<T: Scalar>(
    reference: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    block: usize,
) -> Result<Vec<Comparison>, TensorError> {
    let (_, _, la) = block_l1(reference, a, block)?;
    let (_, _, lb) = block_l1(reference, b, block)?;
    Ok(la
        .iter()
        .zip(&lb)
        .map(|(&x, &y)| {
            let d = (x - y) / PIXEL_SCALE;
            if d.abs() <= EQUAL_BAND {
                Comparison::Equal
            } else if d < 0.0 {
                Comparison::Better
            } else {
                Comparison::Worse
            }
        })
        .collect())
}

/// Savings relative to the nominal rate, in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Savings {
    pub trim_pct: f64,
    pub lz_pct: f64,
    pub total_pct: f64,
}

pub fn savings_from_report(r: &BitrateReport) -> Savings {
    let trim = 100.0 * (1.0 - r.trimmed_bpp / r.nominal_bpp);
    let total = 100.0 * (1.0 - r.compressed_bpp / r.nominal_bpp);
    Savings {
        trim_pct: trim,
        lz_pct: total - trim,
        total_pct: total,
    }
}

pub fn savings_decomposition(stream: &SctBitstream) -> Savings {
    savings_from_report(&bitrate_report(stream))
}

/// Zero and one counts of transmitted bits, per iteration.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct BitHistogram {
    pub zeros: Vec<usize>,
    pub ones: Vec<usize>,
}

impl BitHistogram {
    pub fn total_zeros(&self) -> usize {
        self.zeros.iter().sum()
    }

    pub fn total_ones(&self) -> usize {
        self.ones.iter().sum()
    }

    pub fn zero_fraction(&self) -> f64 {
        let n = self.total_zeros() + self.total_ones();
        self.total_zeros() as f64 / n.max(1) as f64
    }

    /// Adds another histogram iteration by iteration.
    pub fn merge(&mut self, other: &BitHistogram) {
        let n = self.zeros.len().max(other.zeros.len());
        self.zeros.resize(n, 0);
        self.ones.resize(n, 0);
        for i in 0..other.zeros.len() {
            self.zeros[i] += other.zeros[i];
            self.ones[i] += other.ones[i];
        }
    }
}

/// Counts bits of tiles not stopped before each iteration; trimmed bits
/// are excluded. `masks[k-1]` is the mask in force at iteration `k`.
pub fn bit_histogram(codes: &[CodeTensor], masks: &[TileMask]) -> BitHistogram {
    let mut h = BitHistogram::default();
    for (i, c) in codes.iter().enumerate() {
        let k = i + 1;
        let (mut zeros, mut ones) = (0, 0);
        for t in 0..c.num_tiles() {
            if masks.get(i).is_some_and(|m| m.stopped_before(t, k)) {
                continue;
            }
            let o = c.tile(t).iter().filter(|&&b| b != 0).count();
            ones += o;
            zeros += c.depth() - o;
        }
        h.zeros.push(zeros);
        h.ones.push(ones);
    }
    h
}

/// Default overdraw color for stopped tiles.
pub const MASK_COLOR: [u8; 3] = [255, 0, 255];

/// One frame per iteration: the clamped reconstruction, cropped to
/// `true_h x true_w`, with every stopped tile painted `color`.
pub fn mask_evolution_render<T: Scalar>(
    masks: &[TileMask],
    reconstructions: &[Tensor<T>],
    tile: usize,
    true_h: usize,
    true_w: usize,
    color: [u8; 3],
) -> Result<Vec<ImageFile>> {
    let mut frames = Vec::with_capacity(masks.len());
    for (m, r) in masks.iter().zip(reconstructions) {
        let cropped = crate::net::crop(r, true_h, true_w)?;
        let mut img = ImageFile::from_tensor(&cropped)?;
        let (_, tw) = m.grid();
        for y in 0..true_h {
            for x in 0..true_w {
                if m.is_stopped((y / tile) * tw + x / tile) {
                    let p = (y * true_w + x) * 3;
                    img.pixels[p..p + 3].copy_from_slice(&color);
                }
            }
        }
        frames.push(img);
    }
    Ok(frames)
}

/// One RD sample: a single image after `iteration` iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct RdPoint {
    pub image: String,
    pub iteration: usize,
    pub nominal_bpp: f64,
    pub trimmed_bpp: f64,
    pub compressed_bpp: f64,
    pub psnr_db: f64,
    pub mean_tile_l1: f64,
    pub std_tile_l1: f64,
}

/// Everything measured for one encoded image.
#[derive(Clone, Debug)]
pub struct ImageEvaluation {
    pub stream: SctBitstream,
    pub encode: EncodeResult<f32>,
    pub points: Vec<RdPoint>,
    pub histogram: BitHistogram,
}

/// Encodes `image` and measures every iteration prefix of its stream.
pub fn evaluate_image(
    model: &Model<f32>,
    name: &str,
    image: &Tensor<f32>,
    opts: &EncodeOptions,
) -> Result<ImageEvaluation> {
    let encode = model.full_encode(image, opts)?;
    let cfg = model.config();
    let header = SctHeader::new(
        encode.true_h,
        encode.true_w,
        opts.iterations,
        cfg.code_depth,
        cfg.tile_size,
        opts.sct,
        cfg.hash(),
    )?;
    let stream = write(&encode.codes, &encode.masks, header)?;
    let mut points = Vec::with_capacity(opts.iterations);
    for k in 1..=opts.iterations {
        let r = bitrate_report(&stream.truncated(k)?);
        let out = encode.output(k)?;
        let tv = tile_variance_report(
            image,
            &out,
            VARIANCE_BLOCK.min(encode.true_h).min(encode.true_w),
        )?;
        points.push(RdPoint {
            image: name.to_string(),
            iteration: k,
            nominal_bpp: r.nominal_bpp,
            trimmed_bpp: r.trimmed_bpp,
            compressed_bpp: r.compressed_bpp,
            psnr_db: psnr(image, &out)?,
            mean_tile_l1: tv.mean_l1,
            std_tile_l1: tv.std_l1,
        });
    }
    let histogram = bit_histogram(&encode.codes, &encode.masks);
    Ok(ImageEvaluation {
        stream,
        encode,
        points,
        histogram,
    })
}

/// Ratio of `.sct` bytes to `.sct.dz` bytes.
pub fn lz_ratio(stream: &SctBitstream) -> f64 {
    stream.to_bytes().len() as f64 / compress(stream).len() as f64
}

pub fn rd_points_csv(points: &[RdPoint]) -> String {
    let mut s = String::from(
        "image,iteration,nominal_bpp,trimmed_bpp,compressed_bpp,psnr_db,mean_tile_l1,std_tile_l1\n",
    );
    for p in points {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            p.image,
            p.iteration,
            p.nominal_bpp,
            p.trimmed_bpp,
            p.compressed_bpp,
            p.psnr_db,
            p.mean_tile_l1,
            p.std_tile_l1
        )
        .expect("string write");
    }
    s
}

pub fn savings_csv(rows: &[(String, Savings)]) -> String {
    let mut s = String::from("image,trim_savings_pct,lz_savings_pct,total_savings_pct\n");
    for (name, v) in rows {
        writeln!(s, "{name},{},{},{}", v.trim_pct, v.lz_pct, v.total_pct).expect("string write");
    }
    s
}

pub fn bit_hist_csv(rows: &[(String, BitHistogram)]) -> String {
    let mut s = String::from("image,iteration,zeros,ones\n");
    for (name, h) in rows {
        for (i, (z, o)) in h.zeros.iter().zip(&h.ones).enumerate() {
            writeln!(s, "{name},{},{z},{o}", i + 1).expect("string write");
        }
    }
    s
}

pub fn mask_fraction_csv(masks: &[TileMask]) -> String {
    let mut s = String::from("iteration,stopped_fraction\n");
    for (i, m) in masks.iter().enumerate() {
        writeln!(s, "{},{}", i + 1, m.stopped_fraction()).expect("string write");
    }
    s
}
