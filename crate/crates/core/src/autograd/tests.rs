use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check, project, random_tensor};

/// Direct quadruple loop over output pixels, kernel taps, and channels.
fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
) -> (Vec<usize>, Vec<f64>) {
    let [h, wd, cin] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let [kh, kw, _, cout] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = h.div_ceil(stride);
    let ow = wd.div_ceil(stride);
    let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = b[co];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as i64 - pt as i64;
                        let ix = (ox * stride + kx) as i64 - pl as i64;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = x.data()[((iy as usize) * wd + ix as usize) * cin + ci];
                            let wv = w.data()[((ky * kw + kx) * cin + ci) * cout + co];
                            acc += xv * wv;
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = acc;
            }
        }
    }
    (vec![oh, ow, cout], out)
}

fn conv_value(x: Tensor<f64>, w: Tensor<f64>, b: Option<Tensor<f64>>, s: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let wv = g.constant(w);
    let bv = b.map(|b| g.constant(b));
    let y = g.conv2d(xv, wv, bv, s).unwrap();
    g.value(y).clone()
}

#[test]
fn identity_kernel_copies_input() {
    let x = Tensor::new(&[1, 1, 1], vec![0.75]).unwrap();
    let w = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let y = conv_value(x, w, Some(Tensor::zeros(&[1])), 1);
    assert_eq!(y.data(), &[0.75]);
}

#[test]
fn strided_ones_kernel_corner_sums_valid_overlap() {
    let x = Tensor::ones(&[4, 4, 1]);
    let w = Tensor::ones(&[3, 3, 1, 1]);
    let y = conv_value(x, w, None, 2);
    assert_eq!(y.shape(), &[2, 2, 1]);
    // top-left window covers rows/cols -1..=1, of which 2x2 are inside
    assert_eq!(y.data()[0], 4.0);
    assert_eq!(y.data(), &[4.0, 6.0, 6.0, 9.0]);
}

#[test]
fn conv_matches_direct_oracle() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for stride in [1, 2] {
            for (kh, kw) in [(1, 1), (3, 3), (2, 3)] {
                let x = random_tensor(&[8, 8, 2], -1.0, 1.0, &mut rng);
                let w = random_tensor(&[kh, kw, 2, 3], -1.0, 1.0, &mut rng);
                let b = random_tensor(&[3], -1.0, 1.0, &mut rng);
                let (shape, expected) = naive_conv(&x, &w, b.data(), stride);
                let y = conv_value(x, w, Some(b), stride);
                assert_eq!(y.shape(), shape.as_slice());
                for (a, e) in y.data().iter().zip(&expected) {
                    assert!((a - e).abs() < 1e-12, "{a} vs {e}");
                }
            }
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[4, 4, 2]));
    let w = g.constant(Tensor::zeros(&[3, 3, 3, 1]));
    assert!(matches!(
        g.conv2d(x, w, None, 1),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn depth_to_space_row_major_blocks() {
    let x = Tensor::new(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = depth_to_space(&x, 2).unwrap();
    assert_eq!(y.shape(), &[2, 2, 1]);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = random_tensor(&[3, 5, 7], -1.0, 1.0, &mut rng);
    assert_eq!(depth_to_space(&t, 1).unwrap(), t);
    assert!(matches!(
        depth_to_space(&t, 2),
        Err(TensorError::IndivisibleChannels {
            channels: 7,
            block: 2
        })
    ));
}

#[test]
fn depth_to_space_matches_index_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, h, w, c, b) = (2, 3, 2, 8, 2);
    let x = random_tensor(&[n, h, w, c], -1.0, 1.0, &mut rng);
    let y = depth_to_space(&x, b).unwrap();
    let oc = c / (b * b);
    for bi in 0..n {
        for oy in 0..h * b {
            for ox in 0..w * b {
                for ch in 0..oc {
                    let src = x.data()
                        [((bi * h + oy / b) * w + ox / b) * c + ((oy % b) * b + ox % b) * oc + ch];
                    let dst = y.data()[((bi * h * b + oy) * w * b + ox) * oc + ch];
                    assert_eq!(src, dst);
                }
            }
        }
    }
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn l1_subgradient_is_sign() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
    let y = g.constant(Tensor::new(&[4], vec![0.0, 0.0, 1.0, 2.0]).unwrap());
    let d = g.sub(x, y).unwrap();
    let a = g.abs(d);
    let loss = g.sum(a);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, -1.0, -1.0, 1.0]);
}

#[test]
fn abs_subgradient_at_zero_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(&[2], vec![0.0, -1.0]).unwrap());
    let a = g.abs(x);
    let loss = g.sum(a);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, -1.0]);
}

#[test]
fn backward_requires_scalar_and_single_use() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::ones(&[3]));
    assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(TensorError::GraphConsumed)));

    let mut g = Graph::<f64>::new().retain_graph();
    let x = g.param(Tensor::ones(&[3]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.backward(s).is_ok());
}

#[test]
fn straight_through_passes_gradient_unchanged() {
    let mut g = Graph::<f64>::new();
    let soft = g.param(Tensor::new(&[3], vec![0.2, 0.7, 0.5]).unwrap());
    let hard = g
        .straight_through(soft, Tensor::new(&[3], vec![0.0, 1.0, 1.0]).unwrap())
        .unwrap();
    let loss = project(&mut g, hard, 9).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(soft).unwrap(), grads.get(hard).unwrap());
}

#[test]
fn non_finite_node_is_reported_with_scope() {
    let mut g = Graph::<f64>::new();
    g.set_scope("decoder.lstm0");
    let x = g.constant(Tensor::new(&[1], vec![f64::NAN]).unwrap());
    let _ = g.tanh(x);
    let (index, scope, op) = g.first_non_finite().unwrap();
    assert_eq!(index, x.index());
    assert_eq!(scope, "decoder.lstm0");
    assert_eq!(op, "leaf");
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn assert_grad(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
) {
    let r = check(inputs, H, build).unwrap();
    assert!(r.max_relative_error < TOL, "{r:?}");
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = random_tensor(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let b = random_tensor(&[2, 3, 4], -1.0, 1.0, &mut rng);
        assert_grad(&[a.clone(), b.clone()], |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let m = g.mul(d, v[1])?;
            let m = g.scale(m, 0.3);
            project(g, m, seed)
        });
        assert_grad(std::slice::from_ref(&a), |g, v| {
            let s = g.sigmoid(v[0]);
            let t = g.tanh(s);
            let m = g.mean(t);
            let y = g.sum(v[0]);
            let y = g.scale(y, 0.1);
            g.add(m, y)
        });
        assert_grad(&[a.clone(), b.clone()], |g, v| g.l1_mean(v[0], v[1]));
        let gains = random_tensor(&[3], 0.5, 1.5, &mut rng);
        assert_grad(&[a.clone(), gains], |g, v| {
            let y = g.scale_by(v[0], v[1], 2)?;
            project(g, y, seed)
        });
        assert_grad(&[a.clone(), b.clone()], |g, v| {
            let c = g.concat_channels(v[0], v[1])?;
            let s = g.slice_channels(c, 2, 5)?;
            project(g, s, seed)
        });
        let keep: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
        assert_grad(std::slice::from_ref(&a), |g, v| {
            let m = g.mask_spatial(v[0], keep.clone())?;
            project(g, m, seed)
        });
        let weights: Vec<f64> = (0..6).map(|i| (i % 3) as f64).collect();
        assert_grad(std::slice::from_ref(&a), |g, v| g.weighted_mean(v[0], weights.clone()));

        let x8 = random_tensor(&[1, 2, 2, 8], -1.0, 1.0, &mut rng);
        assert_grad(&[x8], |g, v| {
            let y = g.depth_to_space(v[0], 2)?;
            project(g, y, seed)
        });
        let x4 = random_tensor(&[4, 4, 2], -1.0, 1.0, &mut rng);
        assert_grad(&[x4], |g, v| {
            let y = g.space_to_depth(v[0], 2)?;
            project(g, y, seed)
        });

        for stride in [1, 2] {
            let x = random_tensor(&[2, 5, 6, 3], -1.0, 1.0, &mut rng);
            let w = random_tensor(&[3, 3, 3, 4], -0.5, 0.5, &mut rng);
            let bias = random_tensor(&[4], -0.5, 0.5, &mut rng);
            assert_grad(&[x, w, bias], |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride)?;
                project(g, y, seed)
            });
        }
        let x = random_tensor(&[1, 3, 3, 5], -1.0, 1.0, &mut rng);
        let w = random_tensor(&[1, 1, 5, 2], -0.5, 0.5, &mut rng);
        assert_grad(&[x, w], |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1)?;
            project(g, y, seed)
        });

        let gates = random_tensor(&[1, 2, 3, 12], -2.0, 2.0, &mut rng);
        let cell = random_tensor(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
        assert_grad(&[gates, cell], |g, v| {
            let y = g.lstm_cell(v[0], v[1])?;
            project(g, y, seed)
        });
    }
}
