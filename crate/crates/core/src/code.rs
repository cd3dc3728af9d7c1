use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Binarized codes of one iteration: `depth` bits for every tile of a
/// `tiles_h x tiles_w` grid, stored tile-major (`(row * tiles_w + col) * depth + bit`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeTensor {
    tiles_h: usize,
    tiles_w: usize,
    depth: usize,
    bits: Vec<u8>,
    pub iteration: usize,
}

impl CodeTensor {
    pub fn zeros(tiles_h: usize, tiles_w: usize, depth: usize, iteration: usize) -> Self {
        CodeTensor {
            tiles_h,
            tiles_w,
            depth,
            bits: vec![0; tiles_h * tiles_w * depth],
            iteration,
        }
    }

    pub fn from_bits(
        tiles_h: usize,
        tiles_w: usize,
        depth: usize,
        bits: Vec<u8>,
        iteration: usize,
    ) -> Result<Self, TensorError> {
        if bits.len() != tiles_h * tiles_w * depth {
            return Err(TensorError::DataLength {
                shape: vec![tiles_h, tiles_w, depth],
                len: bits.len(),
            });
        }
        if let Some(&b) = bits.iter().find(|&&b| b > 1) {
            return Err(TensorError::OutOfRange {
                op: "code bit",
                value: b as f64,
            });
        }
        Ok(CodeTensor {
            tiles_h,
            tiles_w,
            depth,
            bits,
            iteration,
        })
    }

    /// Converts a `(tiles_h, tiles_w, depth)` tensor of exact 0/1 values.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, iteration: usize) -> Result<Self, TensorError> {
        let [n, h, w, c] = t.nhwc()?;
        if n != 1 {
            return Err(TensorError::Rank {
                op: "CodeTensor::from_tensor",
                expected: "single image",
                shape: t.shape().to_vec(),
            });
        }
        let mut bits = Vec::with_capacity(t.len());
        for &v in t.data() {
            if v == T::zero() {
                bits.push(0);
            } else if v == T::one() {
                bits.push(1);
            } else {
                return Err(TensorError::OutOfRange {
                    op: "code bit",
                    value: v.as_f64(),
                });
            }
        }
        Self::from_bits(h, w, c, bits, iteration)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.tiles_h, self.tiles_w, self.depth],
            self.bits.iter().map(|&b| T::from_f64(b as f64)).collect(),
        )
        .expect("code shape")
    }

    pub fn tiles_h(&self) -> usize {
        self.tiles_h
    }

    pub fn tiles_w(&self) -> usize {
        self.tiles_w
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.tiles_h, self.tiles_w)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_tiles(&self) -> usize {
        self.tiles_h * self.tiles_w
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn tile(&self, index: usize) -> &[u8] {
        &self.bits[index * self.depth..(index + 1) * self.depth]
    }

    pub fn tile_mut(&mut self, index: usize) -> &mut [u8] {
        &mut self.bits[index * self.depth..(index + 1) * self.depth]
    }

    /// True when the tile carries the all-zero stop code.
    pub fn is_stop_code(&self, index: usize) -> bool {
        self.tile(index).iter().all(|&b| b == 0)
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }
}
