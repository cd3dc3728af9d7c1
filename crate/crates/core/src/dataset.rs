//! Training and evaluation image sets: a built-in synthetic generator and
//! directory ingestion, plus random crop sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{is_supported, load_image, ImageFile};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// Where images come from. With no `root`, the synthetic generator is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Directory of `.ppm`/`.png` files. A `train/` or `eval/` subdirectory
    /// matching the split is preferred when present.
    pub root: Option<PathBuf>,
    pub split: Split,
    /// Synthetic images to generate when `root` is unset.
    pub synthetic_count: usize,
    pub synthetic_size: usize,
    pub shuffle_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            root: None,
            split: Split::Train,
            synthetic_count: 8,
            synthetic_size: 128,
            shuffle_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Gradient,
    Checkerboard,
    Noise,
    Flat,
    /// One pattern per quadrant.
    Quadrants,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [
        Pattern::Gradient,
        Pattern::Checkerboard,
        Pattern::Noise,
        Pattern::Flat,
        Pattern::Quadrants,
    ];
}

type Rgb = [f64; 3];

fn random_color(rng: &mut impl Rng) -> Rgb {
    [rng.random(), rng.random(), rng.random()]
}

/// Smooth noise: a coarse random lattice, bilinearly interpolated, one
/// octave per `cell` size, normalized to `[0, 1]`.
fn band_limited_noise(w: usize, h: usize, rng: &mut impl Rng) -> Vec<Rgb> {
    let cells = [4usize, 8, 16];
    let mut out = vec![[0.0; 3]; w * h];
    let mut amp = 1.0;
    let mut total = 0.0;
    for &cell in &cells {
        let (gw, gh) = (w / cell + 2, h / cell + 2);
        let lattice: Vec<Rgb> = (0..gw * gh).map(|_| random_color(rng)).collect();
        for y in 0..h {
            let fy = y as f64 / cell as f64;
            let (y0, ty) = (fy.floor() as usize, fy.fract());
            for x in 0..w {
                let fx = x as f64 / cell as f64;
                let (x0, tx) = (fx.floor() as usize, fx.fract());
                let at = |gx: usize, gy: usize| lattice[gy * gw + gx];
                let (a, b, c, d) = (
                    at(x0, y0),
                    at(x0 + 1, y0),
                    at(x0, y0 + 1),
                    at(x0 + 1, y0 + 1),
                );
                for ch in 0..3 {
                    let top = a[ch] * (1.0 - tx) + b[ch] * tx;
                    let bot = c[ch] * (1.0 - tx) + d[ch] * tx;
                    out[y * w + x][ch] += amp * (top * (1.0 - ty) + bot * ty);
                }
            }
        }
        total += amp;
        amp *= 0.5;
    }
    for p in &mut out {
        for v in p.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn render(pattern: Pattern, w: usize, h: usize, rng: &mut impl Rng) -> Vec<Rgb> {
    match pattern {
        Pattern::Flat => vec![random_color(rng); w * h],
        Pattern::Gradient => {
            let (a, b) = (random_color(rng), random_color(rng));
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let span = dx.abs() * w as f64 + dy.abs() * h as f64;
            let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
            (0..w * h)
                .map(|i| {
                    let (x, y) = ((i % w) as f64, (i / w) as f64);
                    let t = (((x - cx) * dx + (y - cy) * dy) / span + 0.5).clamp(0.0, 1.0);
                    [0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t)
                })
                .collect()
        }
        Pattern::Checkerboard => {
            let (a, b) = (random_color(rng), random_color(rng));
            let cell = [4usize, 8, 16][rng.random_range(0..3)];
            (0..w * h)
                .map(|i| {
                    if ((i % w) / cell + (i / w) / cell).is_multiple_of(2) {
                        a
                    } else {
                        b
                    }
                })
                .collect()
        }
        Pattern::Noise => band_limited_noise(w, h, rng),
        Pattern::Quadrants => {
            let (hw, hh) = (w / 2, h / 2);
            let mut out = vec![[0.0; 3]; w * h];
            for q in 0..4 {
                let kind = Pattern::ALL[rng.random_range(0..4)];
                let (qw, qh) = (
                    if q % 2 == 0 { hw } else { w - hw },
                    if q < 2 { hh } else { h - hh },
                );
                let part = render(kind, qw, qh, rng);
                let (ox, oy) = ((q % 2) * hw, (q / 2) * hh);
                for y in 0..qh {
                    for x in 0..qw {
                        out[(oy + y) * w + ox + x] = part[y * qw + x];
                    }
                }
            }
            out
        }
    }
}

fn to_image(w: usize, h: usize, rgb: &[Rgb]) -> ImageFile {
    let pixels = rgb
        .iter()
        .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    ImageFile::new(w, h, pixels).expect("synthetic geometry")
}

/// One procedurally generated square image.
pub fn synthetic_image(pattern: Pattern, size: usize, seed: u64) -> ImageFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    to_image(size, size, &render(pattern, size, size, &mut rng))
}

/// `count` synthetic images cycling through every [`Pattern`].
pub fn synthetic_images(count: usize, size: usize, seed: u64) -> Vec<ImageFile> {
    (0..count)
        .map(|i| {
            let pattern = Pattern::ALL[i % Pattern::ALL.len()];
            synthetic_image(
                pattern,
                size,
                seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            )
        })
        .collect()
}

/// Left half flat mid-gray, right half band-limited noise.
pub fn half_flat_half_noise(width: usize, height: usize, seed: u64) -> ImageFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = width / 2;
    let noise = band_limited_noise(width - half, height, &mut rng);
    let mut rgb = vec![[0.5; 3]; width * height];
    for y in 0..height {
        for x in half..width {
            rgb[y * width + x] = noise[y * (width - half) + x - half];
        }
    }
    to_image(width, height, &rgb)
}

/// A loaded image set.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<ImageFile>,
    tensors: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn from_images(images: Vec<ImageFile>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("no images".into()));
        }
        let tensors = images.iter().map(ImageFile::to_tensor).collect();
        Ok(Dataset { images, tensors })
    }

    pub fn synthetic(count: usize, size: usize, seed: u64) -> Result<Self> {
        Self::from_images(synthetic_images(count, size, seed))
    }

    /// Every supported image file in `dir`, sorted by file name.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let entries = fs::read_dir(dir).map_err(|e| {
            Error::Dataset(format!(
                "cannot read dataset directory {}: {e}",
                dir.display()
            ))
        })?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_supported(p))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Dataset(format!(
                "no .ppm or .png images in {}",
                dir.display()
            )));
        }
        let images = paths.iter().map(|p| load_image(p)).collect::<Result<_>>()?;
        Self::from_images(images)
    }

    pub fn load(spec: &DatasetSpec) -> Result<Self> {
        match &spec.root {
            None => Self::synthetic(spec.synthetic_count, spec.synthetic_size, spec.shuffle_seed),
            Some(root) => {
                if !root.is_dir() {
                    return Err(Error::Dataset(format!(
                        "dataset directory {} does not exist",
                        root.display()
                    )));
                }
                let sub = root.join(spec.split.dir_name());
                Self::from_dir(if sub.is_dir() { &sub } else { root })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn tensor(&self, i: usize) -> &Tensor<f32> {
        &self.tensors[i]
    }

    /// `(n, crop, crop, 3)` batch of random crops, each fully inside its
    /// source image, with random horizontal flips.
    pub fn sample_batch(&self, n: usize, crop: usize, rng: &mut impl Rng) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(n * crop * crop * 3);
        for _ in 0..n {
            let i = rng.random_range(0..self.images.len());
            let img = &self.images[i];
            if img.width < crop || img.height < crop {
                return Err(Error::Dataset(format!(
                    "image {} is {}x{}, smaller than crop {crop}",
                    img.source
                        .as_ref()
                        .map_or_else(|| format!("#{i}"), |p| p.display().to_string()),
                    img.width,
                    img.height
                )));
            }
            let x0 = rng.random_range(0..=img.width - crop);
            let y0 = rng.random_range(0..=img.height - crop);
            let flip = rng.random::<bool>();
            let src = self.tensors[i].data();
            for y in 0..crop {
                for x in 0..crop {
                    let sx = if flip { x0 + crop - 1 - x } else { x0 + x };
                    let p = ((y0 + y) * img.width + sx) * 3;
                    data.extend_from_slice(&src[p..p + 3]);
                }
            }
        }
        Ok(Tensor::new(&[n, crop, crop, 3], data)?)
    }
}
