//! im2col convolution kernels (NHWC activations, HWIO weights).
//!
//! Padding is zero "same" padding: the output extent is `ceil(in / stride)`
//! and the window for output `o` starts at `o * stride - (k - 1) / 2`.

use crate::error::TensorError;
use crate::tensor::{nhwc, with_nhwc, Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_t: usize,
    pub pad_l: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: Option<&[usize]>,
        stride: usize,
    ) -> Result<Self, TensorError> {
        let [n, h, w, cin] = nhwc(input)?;
        let (kh, kw, wcin, cout) = match *weight {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(TensorError::Rank {
                    op: "conv2d weight",
                    expected: "4",
                    shape: weight.to_vec(),
                })
            }
        };
        if stride == 0 || kh == 0 || kw == 0 || cout == 0 {
            return Err(TensorError::InvalidSpec(format!(
                "kernel {kh}x{kw}x{cout}/{stride}"
            )));
        }
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: weight.to_vec(),
            });
        }
        if let Some(b) = bias {
            if b != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    left: weight.to_vec(),
                    right: b.to_vec(),
                });
            }
        }
        Ok(ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            oh: h.div_ceil(stride),
            ow: w.div_ceil(stride),
            pad_t: (kh - 1) / 2,
            pad_l: (kw - 1) / 2,
        })
    }

    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// 1x1 stride-1 convolutions read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    pub fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        with_nhwc(input, self.n, self.oh, self.ow, self.cout)
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, input: &[T]) -> Vec<T> {
    let patch = g.patch();
    let mut col = vec![T::zero(); g.rows() * patch];
    let mut row = 0;
    for b in 0..g.n {
        let base = b * g.h * g.w * g.cin;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut col[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_t as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_l as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = base + (iy as usize * g.w + ix as usize) * g.cin;
                        let off = (ky * g.kw + kx) * g.cin;
                        dst[off..off + g.cin].copy_from_slice(&input[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    col
}

fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], out: &mut [T]) {
    let patch = g.patch();
    let mut row = 0;
    for b in 0..g.n {
        let base = b * g.h * g.w * g.cin;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &col[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_t as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_l as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = base + (iy as usize * g.w + ix as usize) * g.cin;
                        let off = (ky * g.kw + kx) * g.cin;
                        for (d, s) in out[dst..dst + g.cin].iter_mut().zip(&src[off..off + g.cin]) {
                            *d += *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(
    g: &ConvGeom,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let rows = g.rows();
    let patch = g.patch();
    let mut out = vec![T::zero(); rows * g.cout];
    if let Some(b) = bias {
        for r in out.chunks_exact_mut(g.cout) {
            r.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    let owned;
    let col: &[T] = if g.is_pointwise() {
        input.data()
    } else {
        owned = im2col(g, input.data());
        &owned
    };
    T::gemm(
        rows,
        patch,
        g.cout,
        T::one(),
        col,
        patch as isize,
        1,
        weight.data(),
        g.cout as isize,
        1,
        beta,
        &mut out,
        g.cout as isize,
        1,
    );
    Tensor::new(&g.output_shape(input.shape()), out).expect("conv output shape")
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn backward<T: Scalar>(
    g: &ConvGeom,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let rows = g.rows();
    let patch = g.patch();
    let dy = dout.data();

    let weight_grad = need[1].then(|| {
        let owned;
        let col: &[T] = if g.is_pointwise() {
            input.data()
        } else {
            owned = im2col(g, input.data());
            &owned
        };
        let mut dw = vec![T::zero(); patch * g.cout];
        // dW = colᵀ · dY
        T::gemm(
            patch,
            rows,
            g.cout,
            T::one(),
            col,
            1,
            patch as isize,
            dy,
            g.cout as isize,
            1,
            T::zero(),
            &mut dw,
            g.cout as isize,
            1,
        );
        Tensor::new(weight.shape(), dw).expect("weight grad shape")
    });

    let bias_grad = need[2].then(|| {
        let mut db = vec![T::zero(); g.cout];
        for r in dy.chunks_exact(g.cout) {
            for (d, v) in db.iter_mut().zip(r) {
                *d += *v;
            }
        }
        Tensor::new(&[g.cout], db).expect("bias grad shape")
    });

    let input_grad = need[0].then(|| {
        let mut dcol = vec![T::zero(); rows * patch];
        // dcol = dY · Wᵀ
        T::gemm(
            rows,
            g.cout,
            patch,
            T::one(),
            dy,
            g.cout as isize,
            1,
            weight.data(),
            1,
            g.cout as isize,
            T::zero(),
            &mut dcol,
            patch as isize,
            1,
        );
        if g.is_pointwise() {
            Tensor::new(input.shape(), dcol).expect("input grad shape")
        } else {
            let mut dx = vec![T::zero(); input.len()];
            col2im(g, &dcol, &mut dx);
            Tensor::new(input.shape(), dx).expect("input grad shape")
        }
    });

    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}
