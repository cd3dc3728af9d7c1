//! Stop-code state machine.
//!
//! A tile stops at iteration `k` when its reconstruction error is already at
//! or below the quality threshold, when the encoder happens to emit the
//! all-zero code, or when it stopped earlier. The stopping iteration still
//! transmits the (possibly forced) all-zero code; every later iteration is
//! trimmed. Because the stop code itself is in the stream, a decoder can
//! derive the same mask sequence from the codes alone.

use crate::code::CodeTensor;
use crate::error::{MaskError, TensorError};
use crate::tensor::{Scalar, Tensor};

/// Values of 8-bit pixel units per unit image range.
pub const PIXEL_SCALE: f64 = 255.0;

/// Stopped-tile grid. `first_stop[t] = Some(k)` means tile `t` sent its stop
/// code at iteration `k` (1-based) and is stopped from `k` on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileMask {
    tiles_h: usize,
    tiles_w: usize,
    first_stop: Vec<Option<usize>>,
}

impl TileMask {
    pub fn empty(tiles_h: usize, tiles_w: usize) -> Self {
        TileMask {
            tiles_h,
            tiles_w,
            first_stop: vec![None; tiles_h * tiles_w],
        }
    }

    pub fn full(tiles_h: usize, tiles_w: usize, k: usize) -> Self {
        TileMask {
            tiles_h,
            tiles_w,
            first_stop: vec![Some(k); tiles_h * tiles_w],
        }
    }

    pub fn from_first_stops(
        tiles_h: usize,
        tiles_w: usize,
        first_stop: Vec<Option<usize>>,
    ) -> Self {
        assert_eq!(first_stop.len(), tiles_h * tiles_w, "first-stop grid size");
        TileMask {
            tiles_h,
            tiles_w,
            first_stop,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.tiles_h, self.tiles_w)
    }

    pub fn num_tiles(&self) -> usize {
        self.first_stop.len()
    }

    pub fn is_stopped(&self, index: usize) -> bool {
        self.first_stop[index].is_some()
    }

    /// Stopped strictly before iteration `k`, i.e. trimmed from payload `k`.
    pub fn stopped_before(&self, index: usize, k: usize) -> bool {
        self.first_stop[index].is_some_and(|s| s < k)
    }

    pub fn first_stop(&self, index: usize) -> Option<usize> {
        self.first_stop[index]
    }

    pub fn first_stops(&self) -> &[Option<usize>] {
        &self.first_stop
    }

    pub fn count_stopped(&self) -> usize {
        self.first_stop.iter().filter(|s| s.is_some()).count()
    }

    pub fn stopped_fraction(&self) -> f64 {
        self.count_stopped() as f64 / self.num_tiles().max(1) as f64
    }

    /// Every tile stopped here is also stopped (at the same iteration or
    /// earlier) in `later`.
    pub fn is_subset_of(&self, later: &TileMask) -> bool {
        self.grid() == later.grid()
            && self
                .first_stop
                .iter()
                .zip(&later.first_stop)
                .all(|(a, b)| match (a, b) {
                    (Some(x), Some(y)) => y <= x,
                    (Some(_), None) => false,
                    _ => true,
                })
    }

    /// Union; the earlier stop iteration wins.
    pub fn union(&self, other: &TileMask) -> Result<TileMask, MaskError> {
        check_grid(self.grid(), other.grid())?;
        let first_stop = self
            .first_stop
            .iter()
            .zip(&other.first_stop)
            .map(|(a, b)| match (a, b) {
                (Some(x), Some(y)) => Some(*x.min(y)),
                (x, y) => x.or(*y),
            })
            .collect();
        Ok(TileMask {
            tiles_h: self.tiles_h,
            tiles_w: self.tiles_w,
            first_stop,
        })
    }

    /// Decoder mask channel: 1 for stopped tiles, 0 for active ones.
    pub fn stopped_channel<T: Scalar>(&self) -> Vec<T> {
        self.first_stop
            .iter()
            .map(|s| if s.is_some() { T::one() } else { T::zero() })
            .collect()
    }

    /// Complement of [`TileMask::stopped_channel`].
    pub fn keep_weights<T: Scalar>(&self) -> Vec<T> {
        self.first_stop
            .iter()
            .map(|s| if s.is_some() { T::zero() } else { T::one() })
            .collect()
    }
}

fn check_grid(a: (usize, usize), b: (usize, usize)) -> Result<(), MaskError> {
    if a != b {
        return Err(MaskError::GridMismatch { left: a, right: b });
    }
    Ok(())
}

/// Per-tile mean absolute reconstruction error in 8-bit units, over the
/// tile's pixels inside the true (unpadded) image region.
#[derive(Clone, Debug, PartialEq)]
pub struct TileQualityMap {
    tiles_h: usize,
    tiles_w: usize,
    l1: Vec<f64>,
}

impl TileQualityMap {
    pub fn from_values(tiles_h: usize, tiles_w: usize, l1: Vec<f64>) -> Self {
        assert_eq!(l1.len(), tiles_h * tiles_w, "quality grid size");
        TileQualityMap {
            tiles_h,
            tiles_w,
            l1,
        }
    }

    /// `image` and `reconstruction` are `(H, W, C)` with `H`, `W` multiples
    /// of `tile`; only pixels with `y < true_h` and `x < true_w` count.
    pub fn compute<T: Scalar>(
        image: &Tensor<T>,
        reconstruction: &Tensor<T>,
        true_h: usize,
        true_w: usize,
        tile: usize,
    ) -> Result<Self, TensorError> {
        let mut maps = Self::compute_batch(image, reconstruction, true_h, true_w, tile)?;
        if maps.len() != 1 {
            return Err(TensorError::Rank {
                op: "TileQualityMap::compute",
                expected: "single image",
                shape: image.shape().to_vec(),
            });
        }
        Ok(maps.remove(0))
    }

    pub fn compute_batch<T: Scalar>(
        image: &Tensor<T>,
        reconstruction: &Tensor<T>,
        true_h: usize,
        true_w: usize,
        tile: usize,
    ) -> Result<Vec<Self>, TensorError> {
        if image.shape() != reconstruction.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "tile quality",
                left: image.shape().to_vec(),
                right: reconstruction.shape().to_vec(),
            });
        }
        let [n, h, w, c] = image.nhwc()?;
        if h % tile != 0 || w % tile != 0 || true_h > h || true_w > w {
            return Err(TensorError::ShapeMismatch {
                op: "tile quality",
                left: vec![h, w],
                right: vec![true_h, true_w, tile],
            });
        }
        let (th, tw) = (h / tile, w / tile);
        let (a, b) = (image.data(), reconstruction.data());
        let mut out = Vec::with_capacity(n);
        for img in 0..n {
            let mut sums = vec![0.0f64; th * tw];
            let mut counts = vec![0usize; th * tw];
            for y in 0..true_h {
                for x in 0..true_w {
                    let t = (y / tile) * tw + x / tile;
                    let p = ((img * h + y) * w + x) * c;
                    for ch in 0..c {
                        sums[t] += (a[p + ch].as_f64() - b[p + ch].as_f64()).abs();
                    }
                    counts[t] += c;
                }
            }
            let l1 = sums
                .iter()
                .zip(&counts)
                .map(|(&s, &n)| {
                    if n == 0 {
                        0.0
                    } else {
                        s / n as f64 * PIXEL_SCALE
                    }
                })
                .collect();
            out.push(TileQualityMap {
                tiles_h: th,
                tiles_w: tw,
                l1,
            });
        }
        Ok(out)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.tiles_h, self.tiles_w)
    }

    pub fn values(&self) -> &[f64] {
        &self.l1
    }

    pub fn min(&self) -> f64 {
        self.l1.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.l1.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Natural mask update for iteration `k`.
pub fn update_mask(
    prev: &TileMask,
    codes: &CodeTensor,
    quality: &TileQualityMap,
    threshold: f64,
    k: usize,
) -> Result<TileMask, MaskError> {
    check_grid(prev.grid(), codes.grid())?;
    check_grid(prev.grid(), quality.grid())?;
    let first_stop = (0..prev.num_tiles())
        .map(|t| {
            prev.first_stop[t]
                .or_else(|| (quality.l1[t] <= threshold || codes.is_stop_code(t)).then_some(k))
        })
        .collect();
    Ok(TileMask {
        tiles_h: prev.tiles_h,
        tiles_w: prev.tiles_w,
        first_stop,
    })
}

/// Zeroes the codes of every tile stopped in `mask`.
pub fn apply_mask(codes: &CodeTensor, mask: &TileMask) -> Result<CodeTensor, MaskError> {
    check_grid(codes.grid(), mask.grid())?;
    let mut out = codes.clone();
    for t in 0..mask.num_tiles() {
        if mask.is_stopped(t) {
            out.tile_mut(t).fill(0);
        }
    }
    Ok(out)
}

/// Rebuilds the mask sequence from transmitted codes: a tile stops at the
/// first iteration whose code is all zero.
pub fn decoder_mask_from_codes(received: &[CodeTensor]) -> Vec<TileMask> {
    let mut masks: Vec<TileMask> = Vec::with_capacity(received.len());
    for (i, codes) in received.iter().enumerate() {
        let k = i + 1;
        let (th, tw) = codes.grid();
        let prev = masks
            .last()
            .cloned()
            .unwrap_or_else(|| TileMask::empty(th, tw));
        let first_stop = (0..codes.num_tiles())
            .map(|t| prev.first_stop[t].or_else(|| codes.is_stop_code(t).then_some(k)))
            .collect();
        masks.push(TileMask {
            tiles_h: th,
            tiles_w: tw,
            first_stop,
        });
    }
    masks
}

/// Training-pass masking threshold `k/K * (e_max - e_min) + e_min`.
pub fn forced_threshold(e_min: f64, e_max: f64, k: usize, max_k: usize) -> Result<f64, MaskError> {
    if e_min > e_max {
        return Err(MaskError::InvertedExtrema { e_min, e_max });
    }
    if k == 0 || k > max_k {
        return Err(MaskError::Iteration { k, max: max_k });
    }
    Ok(k as f64 / max_k as f64 * (e_max - e_min) + e_min)
}

/// Forced mask: every tile whose error is at or below [`forced_threshold`]
/// stops at `k`.
pub fn forced_mask(
    quality: &TileQualityMap,
    e_min: f64,
    e_max: f64,
    k: usize,
    max_k: usize,
) -> Result<TileMask, MaskError> {
    let threshold = forced_threshold(e_min, e_max, k, max_k)?;
    Ok(TileMask {
        tiles_h: quality.tiles_h,
        tiles_w: quality.tiles_w,
        first_stop: quality
            .l1
            .iter()
            .map(|&e| (e <= threshold).then_some(k))
            .collect(),
    })
}
