//! Randomized properties of the autodiff primitives and the BM layer, each
//! checked against an oracle written independently of the library kernels.

use bmnet::bm::{bm_forward, bm_layer, convert_weights, k_factor, maxplus_correlate, sign_path_decompose, Geometry};
use bmnet::tensor::{grad_check, ConvGeometry, MaxPlusGeometry};
use bmnet::{Graph, Result, Tensor, Var, NEG_INF};
use proptest::prelude::*;
use proptest::test_runner::FileFailurePersistence;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Values with `|v|` in `[margin, hi)` and random sign.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], margin: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.gen_range(margin..hi);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Distinct values at least 0.05 apart, in random order.
fn spaced(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 + r.gen_range(0.0..0.05) - n as f64 * 0.05).collect();
    data.shuffle(r);
    Tensor::new(shape, data).unwrap()
}

/// `Σ c ⊙ y`, making every output coordinate matter to the gradient.
fn weighted_sum(g: &mut Graph, y: Var, c: &Tensor) -> Result<Var> {
    let cv = g.input(c.clone());
    let m = g.mul(y, cv)?;
    Ok(g.sum(m))
}

fn coeffs(seed: u64, shape: &[usize]) -> Tensor {
    uniform(&mut rng(seed ^ 0xc0ef), shape, -1.0, 1.0)
}

/// Brute-force max-plus correlation for `x: b×c×h×w`, `v: o×c×kh×kw`.
/// Also returns the smallest gap between the best and second-best finite
/// candidate over all outputs.
fn conv_oracle(x: &Tensor, v: &Tensor, stride: usize, pad: usize) -> (Vec<f64>, f64) {
    let (xs, vs) = (x.shape(), v.shape());
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (vs[0], vs[2], vs[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    let mut gap = f64::INFINITY;
    for bi in 0..b {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = NEG_INF;
                    let mut second = NEG_INF;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                let xv = if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    NEG_INF
                                } else {
                                    x.data()[((bi * c + ic) * h + y as usize) * w + xx as usize]
                                };
                                let s = xv + v.data()[((oc * c + ic) * kh + ky) * kw + kx];
                                if s > best {
                                    second = best;
                                    best = s;
                                } else if s > second {
                                    second = s;
                                }
                            }
                        }
                    }
                    if best > NEG_INF {
                        gap = gap.min(best - second);
                    }
                    out.push(best);
                }
            }
        }
    }
    (out, gap)
}

fn dense_oracle(x: &[f64], v: &Tensor) -> (Vec<f64>, f64) {
    let (m, n) = (v.shape()[0], v.shape()[1]);
    let xt = Tensor::new(&[1, 1, 1, n], x.to_vec()).unwrap();
    let vt = Tensor::new(&[m, 1, 1, n], v.data().to_vec()).unwrap();
    conv_oracle(&xt, &vt, 1, 0)
}

fn ln_relu(x: &[f64], sign: f64) -> Vec<f64> {
    x.iter()
        .map(|&v| if sign * v > 0.0 { (sign * v).ln() } else { NEG_INF })
        .collect()
}

/// Smallest top-two gap over the four paths of a dense BM layer at `x`.
fn bm_dense_gap(x: &[f64], v0: &Tensor, v1: &Tensor) -> f64 {
    let mut gap = f64::INFINITY;
    for xs in [ln_relu(x, 1.0), ln_relu(x, -1.0)] {
        for v in [v0, v1] {
            gap = gap.min(dense_oracle(&xs, v).1);
        }
    }
    gap
}

fn dense_bm(w: &Tensor) -> bmnet::bm::BmWeights {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    convert_weights(w, &Tensor::zeros(&[m]), Geometry::Dense { inputs: n, outputs: m }).unwrap()
}

fn dot(x: &[f64], w: &[f64]) -> f64 {
    x.iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Shrunk failures are saved next to this file.
fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        failure_persistence: Some(Box::new(FileFailurePersistence::WithSource("regressions"))),
        ..ProptestConfig::with_cases(n)
    }
}

proptest! {
    #![proptest_config(cases(100))]

    #[test]
    fn grad_elementwise_arithmetic(seed in any::<u64>(), n in 1usize..8) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[2, n], -2.0, 2.0);
        let k = uniform(&mut r, &[2, n], -2.0, 2.0);
        let c = coeffs(seed, &[2, n]);
        let add = grad_check(|g, x| { let k = g.input(k.clone()); let y = g.add(x, k)?; weighted_sum(g, y, &c) }, &x, EPS).unwrap();
        let sub = grad_check(|g, x| { let k = g.input(k.clone()); let y = g.sub(k, x)?; weighted_sum(g, y, &c) }, &x, EPS).unwrap();
        let mul = grad_check(|g, x| { let k = g.input(k.clone()); let y = g.mul(x, k)?; weighted_sum(g, y, &c) }, &x, EPS).unwrap();
        let neg = grad_check(|g, x| { let y = g.neg(x); weighted_sum(g, y, &c) }, &x, EPS).unwrap();
        let sq = grad_check(|g, x| { let y = g.mul(x, x)?; weighted_sum(g, y, &c) }, &x, EPS).unwrap();
        for e in [add, sub, mul, neg, sq] {
            prop_assert!(e < TOL, "{e}");
        }
    }

    #[test]
    fn grad_relu_ln_exp(seed in any::<u64>(), n in 1usize..10) {
        let mut r = rng(seed);
        let c = coeffs(seed, &[n]);
        let x = away_from_zero(&mut r, &[n], 0.1, 2.0);
        let relu = grad_check(|g, x| { let y = g.relu(x); weighted_sum(g, y, &c) }, &x, EPS).unwrap();
        let pos = uniform(&mut r, &[n], 0.1, 5.0);
        let ln = grad_check(|g, x| { let y = g.ln(x)?; weighted_sum(g, y, &c) }, &pos, EPS).unwrap();
        let z = uniform(&mut r, &[n], -3.0, 3.0);
        let exp = grad_check(|g, x| { let y = g.exp(x); weighted_sum(g, y, &c) }, &z, EPS).unwrap();
        for e in [relu, ln, exp] {
            prop_assert!(e < TOL, "{e}");
        }
    }

    #[test]
    fn grad_sum_reshape_max(seed in any::<u64>(), rows in 1usize..4, cols in 2usize..6) {
        let mut r = rng(seed);
        let x = spaced(&mut r, &[rows, cols]);
        let c = coeffs(seed, &[cols * rows]);
        let reshape = grad_check(|g, x| { let y = g.reshape(x, &[rows * cols])?; weighted_sum(g, y, &c) }, &x, EPS).unwrap();
        let sum = grad_check(|g, x| Ok(g.sum(x)), &x, EPS).unwrap();
        let c1 = coeffs(seed, &[rows]);
        let max1 = grad_check(|g, x| { let y = g.max_axis(x, 1)?; weighted_sum(g, y, &c1) }, &x, EPS).unwrap();
        let c0 = coeffs(seed, &[cols]);
        let max0 = grad_check(|g, x| { let y = g.max_axis(x, 0)?; weighted_sum(g, y, &c0) }, &x, EPS).unwrap();
        for e in [reshape, sum, max1, max0] {
            prop_assert!(e < TOL, "{e}");
        }
    }

    #[test]
    fn grad_products(seed in any::<u64>(), m in 1usize..4, k in 1usize..5, n in 1usize..4) {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[m, k], -1.0, 1.0);
        let b = uniform(&mut r, &[k, n], -1.0, 1.0);
        let c = coeffs(seed, &[m, n]);
        let da = grad_check(|g, a| { let b = g.input(b.clone()); let y = g.matmul(a, b)?; weighted_sum(g, y, &c) }, &a, EPS).unwrap();
        let db = grad_check(|g, b| { let a = g.input(a.clone()); let y = g.matmul(a, b)?; weighted_sum(g, y, &c) }, &b, EPS).unwrap();
        // linear: x[m×k] · w[n×k]ᵀ
        let w = uniform(&mut r, &[n, k], -1.0, 1.0);
        let dx = grad_check(|g, x| { let w = g.input(w.clone()); let y = g.linear(x, w)?; weighted_sum(g, y, &c) }, &a, EPS).unwrap();
        let dw = grad_check(|g, w| { let x = g.input(a.clone()); let y = g.linear(x, w)?; weighted_sum(g, y, &c) }, &w, EPS).unwrap();
        let bias = uniform(&mut r, &[n], -1.0, 1.0);
        let xb = uniform(&mut r, &[m, n], -1.0, 1.0);
        let dbias = grad_check(|g, b| { let x = g.input(xb.clone()); let y = g.add_bias(x, b)?; weighted_sum(g, y, &c) }, &bias, EPS).unwrap();
        let dxb = grad_check(|g, x| { let b = g.input(bias.clone()); let y = g.add_bias(x, b)?; weighted_sum(g, y, &c) }, &xb, EPS).unwrap();
        for e in [da, db, dx, dw, dbias, dxb] {
            prop_assert!(e < TOL, "{e}");
        }
    }

    #[test]
    fn grad_conv2d(seed in any::<u64>(), c_in in 1usize..3, c_out in 1usize..3, k in 1usize..4, stride in 1usize..3, pad in 0usize..2) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[2, c_in, 5, 6], -1.0, 1.0);
        let w = uniform(&mut r, &[c_out, c_in, k, k], -1.0, 1.0);
        let geom = ConvGeometry { stride, pad };
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let y = g.conv2d(xv, wv, geom).unwrap();
        let out_shape = g.value(y).shape().to_vec();
        let c = coeffs(seed, &out_shape);
        let dx = grad_check(|g, x| { let w = g.input(w.clone()); let y = g.conv2d(x, w, geom)?; weighted_sum(g, y, &c) }, &x, EPS).unwrap();
        let dw = grad_check(|g, w| { let x = g.input(x.clone()); let y = g.conv2d(x, w, geom)?; weighted_sum(g, y, &c) }, &w, EPS).unwrap();
        prop_assert!(dx < TOL && dw < TOL, "{dx} {dw}");
    }

    #[test]
    fn grad_conv_relu_composite(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[1, 1, 5, 5], -1.0, 1.0);
        let w = uniform(&mut r, &[2, 1, 3, 3], -1.0, 1.0);
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let pre = g.conv2d(xv, wv, ConvGeometry::default()).unwrap();
        prop_assume!(g.value(pre).data().iter().all(|v| v.abs() > 0.1));
        let c = coeffs(seed, &[2, 3, 3]);
        let c = c.reshape(&[1, 2, 3, 3]).unwrap();
        let e = grad_check(|g, x| {
            let w = g.input(w.clone());
            let y = g.conv2d(x, w, ConvGeometry::default())?;
            let y = g.relu(y);
            weighted_sum(g, y, &c)
        }, &x, EPS).unwrap();
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn grad_pool_dropout_softmax(seed in any::<u64>(), classes in 2usize..6) {
        let mut r = rng(seed);
        let x = spaced(&mut r, &[2, 2, 4, 6]);
        let c = coeffs(seed, &[2, 2, 2, 3]);
        let pool = grad_check(|g, x| { let y = g.max_pool(x, 2, 2)?; weighted_sum(g, y, &c) }, &x, EPS).unwrap();
        let cd = coeffs(seed, &[2, 2, 4, 6]);
        let drop = grad_check(|g, x| {
            let y = g.dropout(x, 0.3, &mut rng(seed))?;
            weighted_sum(g, y, &cd)
        }, &x, EPS).unwrap();
        let logits = uniform(&mut r, &[3, classes], -3.0, 3.0);
        let cs = coeffs(seed, &[3, classes]);
        let softmax = grad_check(|g, x| { let y = g.softmax(x)?; weighted_sum(g, y, &cs) }, &logits, EPS).unwrap();
        let labels: Vec<usize> = (0..3).map(|_| r.gen_range(0..classes)).collect();
        let ce = grad_check(|g, x| g.softmax_cross_entropy(x, &labels), &logits, EPS).unwrap();
        for e in [pool, drop, softmax, ce] {
            prop_assert!(e < TOL, "{e}");
        }
    }

    #[test]
    fn grad_maxplus_dense(seed in any::<u64>(), n in 1usize..7, m in 1usize..4) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[1, n], -2.0, 2.0);
        // Sums x_l + v_kl equal a tie-free table by construction.
        let base = spaced(&mut r, &[m, n]);
        let v = Tensor::new(&[m, n], (0..m * n).map(|i| base.data()[i] - x.data()[i % n]).collect()).unwrap();
        let c = coeffs(seed, &[1, m]);
        let dx = grad_check(|g, x| { let v = g.input(v.clone()); let y = g.maxplus(x, v, MaxPlusGeometry::Dense)?; weighted_sum(g, y, &c) }, &x, EPS).unwrap();
        let dv = grad_check(|g, v| { let x = g.input(x.clone()); let y = g.maxplus(x, v, MaxPlusGeometry::Dense)?; weighted_sum(g, y, &c) }, &v, EPS).unwrap();
        prop_assert!(dx < TOL && dv < TOL, "{dx} {dv}");
    }

    #[test]
    fn grad_maxplus_conv(seed in any::<u64>(), stride in 1usize..3, pad in 0usize..2) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[1, 2, 4, 5], -2.0, 2.0);
        let v = uniform(&mut r, &[2, 2, 2, 2], -2.0, 2.0);
        let (_, gap) = conv_oracle(&x, &v, stride, pad);
        prop_assume!(gap > 1e-3);
        let geom = MaxPlusGeometry::Conv(ConvGeometry { stride, pad });
        let (out, _) = conv_oracle(&x, &v, stride, pad);
        let c = coeffs(seed, &[out.len()]);
        let flat = |g: &mut Graph, y: Var| -> Result<Var> { let y = g.flatten(y)?; let y = g.reshape(y, &[out.len()])?; weighted_sum(g, y, &c) };
        let dx = grad_check(|g, x| { let v = g.input(v.clone()); let y = g.maxplus(x, v, geom)?; flat(g, y) }, &x, EPS).unwrap();
        let dv = grad_check(|g, v| { let x = g.input(x.clone()); let y = g.maxplus(x, v, geom)?; flat(g, y) }, &v, EPS).unwrap();
        prop_assert!(dx < TOL && dv < TOL, "{dx} {dv}");
    }

    #[test]
    fn grad_bm_dense(seed in any::<u64>(), n in 1usize..8, m in 1usize..4) {
        let mut r = rng(seed);
        let x = away_from_zero(&mut r, &[1, n], 0.1, 2.0);
        let w = away_from_zero(&mut r, &[m, n], 0.05, 1.5);
        let bw = dense_bm(&w);
        prop_assume!(bm_dense_gap(x.data(), &bw.v0, &bw.v1) > 1e-3);
        let bias = uniform(&mut r, &[m], -1.0, 1.0);
        let c = coeffs(seed, &[1, m]);
        let layer = |g: &mut Graph, x: Var, v0: Var, v1: Var| -> Result<Var> {
            let b = g.input(bias.clone());
            let y = bm_layer(g, x, v0, v1, b, MaxPlusGeometry::Dense)?;
            weighted_sum(g, y, &c)
        };
        let dx = grad_check(|g, x| { let v0 = g.input(bw.v0.clone()); let v1 = g.input(bw.v1.clone()); layer(g, x, v0, v1) }, &x, EPS).unwrap();
        let dv0 = grad_check(|g, v0| { let x = g.input(x.clone()); let v1 = g.input(bw.v1.clone()); layer(g, x, v0, v1) }, &bw.v0, EPS).unwrap();
        let dv1 = grad_check(|g, v1| { let x = g.input(x.clone()); let v0 = g.input(bw.v0.clone()); layer(g, x, v0, v1) }, &bw.v1, EPS).unwrap();
        let db = grad_check(|g, b| {
            let (x, v0, v1) = (g.input(x.clone()), g.input(bw.v0.clone()), g.input(bw.v1.clone()));
            let y = bm_layer(g, x, v0, v1, b, MaxPlusGeometry::Dense)?;
            weighted_sum(g, y, &c)
        }, &bias, EPS).unwrap();
        for e in [dx, dv0, dv1, db] {
            prop_assert!(e < TOL, "{e}");
        }
    }

    #[test]
    fn grad_bm_conv(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = away_from_zero(&mut r, &[1, 1, 4, 4], 0.1, 2.0);
        let w = away_from_zero(&mut r, &[2, 1, 2, 2], 0.05, 1.5);
        let geometry = Geometry::Conv { in_ch: 1, out_ch: 2, kh: 2, kw: 2, stride: 1, pad: 0 };
        let bw = convert_weights(&w, &Tensor::zeros(&[2]), geometry).unwrap();
        let mut gap = f64::INFINITY;
        for sign in [1.0, -1.0] {
            let xl = Tensor::new(&[1, 1, 4, 4], ln_relu(x.data(), sign)).unwrap();
            for v in [&bw.v0, &bw.v1] {
                gap = gap.min(conv_oracle(&xl, v, 1, 0).1);
            }
        }
        prop_assume!(gap > 1e-3);
        let c = coeffs(seed, &[1, 2, 3, 3]);
        let e = grad_check(|g, x| {
            let (v0, v1, b) = (g.input(bw.v0.clone()), g.input(bw.v1.clone()), g.input(bw.bias.clone()));
            let y = bm_layer(g, x, v0, v1, b, geometry.maxplus())?;
            weighted_sum(g, y, &c)
        }, &x, EPS).unwrap();
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn maxplus_matches_loop_oracle(seed in any::<u64>(), b in 1usize..3, c in 1usize..3, o in 1usize..4,
                                   h in 1usize..7, w in 1usize..7, kh in 1usize..4, kw in 1usize..4,
                                   stride in 1usize..3, pad in 0usize..2) {
        prop_assume!(h + 2 * pad >= kh && w + 2 * pad >= kw);
        let mut r = rng(seed);
        let mut x = uniform(&mut r, &[b, c, h, w], -5.0, 5.0);
        let mut v = uniform(&mut r, &[o, c, kh, kw], -5.0, 5.0);
        for t in [&mut x, &mut v] {
            for e in t.data_mut() {
                if r.gen_bool(0.2) {
                    *e = NEG_INF;
                }
            }
        }
        let got = maxplus_correlate(&x, &v, MaxPlusGeometry::Conv(ConvGeometry { stride, pad })).unwrap();
        let (want, _) = conv_oracle(&x, &v, stride, pad);
        prop_assert_eq!(got.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>(), want.iter().map(|f| f.to_bits()).collect::<Vec<_>>());

        let xd = Tensor::new(&[b, c * h * w], x.data().to_vec()).unwrap();
        let vd = uniform(&mut r, &[o, c * h * w], -5.0, 5.0);
        let got = maxplus_correlate(&xd, &vd, MaxPlusGeometry::Dense).unwrap();
        for bi in 0..b {
            let (want, _) = dense_oracle(&xd.data()[bi * c * h * w..(bi + 1) * c * h * w], &vd);
            prop_assert_eq!(&got.data()[bi * o..(bi + 1) * o], want.as_slice());
        }
    }

    #[test]
    fn bm_positive_homogeneity(seed in any::<u64>(), n in 1usize..16, m in 1usize..4, alpha in 0.05f64..20.0) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[2, n], -3.0, 3.0);
        let w = uniform(&mut r, &[m, n], -2.0, 2.0);
        let bw = dense_bm(&w);
        let base = bm_forward(&x, &bw).unwrap();
        let scaled_x = bm_forward(&x.map(|v| alpha * v), &bw).unwrap();
        let scaled_w = bm_forward(&x, &dense_bm(&w.map(|v| alpha * v))).unwrap();
        for ((b, sx), sw) in base.data().iter().zip(scaled_x.data()).zip(scaled_w.data()) {
            let want = alpha * b;
            let tol = 1e-9 * want.abs().max(1e-300);
            prop_assert!((sx - want).abs() <= tol.max(1e-12), "{sx} vs {want}");
            prop_assert!((sw - want).abs() <= tol.max(1e-12), "{sw} vs {want}");
        }
    }

    #[test]
    fn bm_permutation_invariance(seed in any::<u64>(), n in 1usize..16) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[n], -3.0, 3.0);
        let w = uniform(&mut r, &[1, n], -2.0, 2.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let xp = Tensor::from_vec(perm.iter().map(|&i| x.data()[i]).collect());
        let wp = Tensor::new(&[1, n], perm.iter().map(|&i| w.data()[i]).collect()).unwrap();
        let a = bm_forward(&x, &dense_bm(&w)).unwrap();
        let b = bm_forward(&xp, &dense_bm(&wp)).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }
}

proptest! {
    #![proptest_config(cases(1000))]

    #[test]
    fn bm_single_term_exactness(seed in any::<u64>(), n in 4usize..24) {
        let mut r = rng(seed);
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut r);
        // One index per sign path (some paths left empty), the rest have a zero factor.
        let patterns = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];
        for (slot, &i) in idx.iter().enumerate() {
            if slot < 4 && r.gen_bool(0.8) {
                let (sx, sw) = patterns[slot];
                x[i] = sx * r.gen_range(0.01..10.0);
                w[i] = sw * r.gen_range(0.01..10.0);
            } else if r.gen_bool(0.5) {
                x[i] = r.gen_range(-10.0..10.0);
            } else {
                w[i] = r.gen_range(-10.0..10.0);
            }
        }
        let wt = Tensor::new(&[1, n], w.clone()).unwrap();
        let got = bm_forward(&Tensor::from_vec(x.clone()), &dense_bm(&wt)).unwrap().item();
        let scale: f64 = x.iter().zip(&w).map(|(a, b)| (a * b).abs()).sum();
        prop_assert!((got - dot(&x, &w)).abs() <= 1e-9 * scale.max(1e-300), "{got} vs {}", dot(&x, &w));
    }

    #[test]
    fn bm_worst_case_ratio_is_n(a in 0.01f64..10.0, b in 0.01f64..10.0, n in 1usize..64) {
        let x = vec![a; n];
        let w = Tensor::new(&[1, n], vec![b; n]).unwrap();
        let approx = bm_forward(&Tensor::from_vec(x.clone()), &dense_bm(&w)).unwrap().item();
        let exact = dot(&x, w.data());
        prop_assert!((exact / approx - n as f64).abs() <= 1e-9 * n as f64, "{}", exact / approx);
    }

    #[test]
    fn bm_path_bound(seed in any::<u64>(), n in 1usize..32) {
        let mut r = rng(seed);
        let x: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.3) { 0.0 } else { r.gen_range(0.0..5.0) }).collect();
        let w: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..5.0)).collect();
        let exact = dot(&x, &w);
        prop_assume!(exact > 0.0);
        let wt = Tensor::new(&[1, n], w).unwrap();
        let p = bm_forward(&Tensor::from_vec(x), &dense_bm(&wt)).unwrap().item();
        let tol = 1e-12 * exact;
        prop_assert!(p <= exact + tol && exact <= n as f64 * p + tol, "{p} {exact}");
    }

    #[test]
    fn sign_path_oracle_identity(seed in any::<u64>(), n in 0usize..64) {
        let mut r = rng(seed);
        let x: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.1) { 0.0 } else { r.gen_range(-10.0..10.0) }).collect();
        let w: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.1) { 0.0 } else { r.gen_range(-10.0..10.0) }).collect();
        let s = sign_path_decompose(&x, &w);
        prop_assert!(s.s00 >= 0.0 && s.s01 >= 0.0 && s.s10 >= 0.0 && s.s11 >= 0.0);
        let scale: f64 = x.iter().zip(&w).map(|(a, b)| (a * b).abs()).sum();
        prop_assert!((s.recombine() - dot(&x, &w)).abs() <= 1e-12 * scale.max(1.0));
    }

    #[test]
    fn k_factor_bounds(seed in any::<u64>(), n in 1usize..40) {
        let mut r = rng(seed);
        let x: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.2) { 0.0 } else { r.gen_range(0.0..3.0) }).collect();
        let w: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..3.0)).collect();
        let exact = dot(&x, &w);
        prop_assume!(exact > 0.0);
        let k = k_factor(&x, &w).unwrap();
        let m = x.iter().zip(&w).map(|(a, b)| a * b).fold(0.0, f64::max);
        prop_assert_eq!(k.m, m);
        prop_assert!(k.k >= -1e-12 && k.k <= (n - 1) as f64 + 1e-12, "{}", k.k);
        prop_assert!(((1.0 + k.k) * k.m - exact).abs() <= 1e-12 * exact);
    }

    #[test]
    fn convert_round_trip(seed in any::<u64>(), n in 1usize..32) {
        let mut r = rng(seed);
        let w: Vec<f64> = (0..n)
            .map(|_| match r.gen_range(0..4) {
                0 => 0.0,
                1 => r.gen_range(-1e3..1e3),
                2 => r.gen_range(-1e-3..1e-3),
                _ => r.gen_range(-1.0..1.0),
            })
            .collect();
        let bw = dense_bm(&Tensor::new(&[1, n], w.clone()).unwrap());
        prop_assert!(bw.sign_exclusive());
        for (got, want) in bw.reconstruct().data().iter().zip(&w) {
            prop_assert!((got - want).abs() <= 1e-12 * want.abs(), "{got} vs {want}");
        }
    }
}

#[test]
fn exp_ln_round_trip_on_positives() {
    let xs: Vec<f64> = (0..=1200).map(|i| 10f64.powf(-6.0 + i as f64 * 0.01)).collect();
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(xs.clone()));
    let l = g.ln(x).unwrap();
    let e = g.exp(l);
    for (got, want) in g.value(e).data().iter().zip(&xs) {
        assert!((got - want).abs() <= 1e-12 * want, "{got} vs {want}");
    }
}

/// The suites above grouped by the property they establish, for the acceptance run.
#[allow(dead_code)]
pub fn suites() -> Vec<(char, &'static str, fn())> {
    vec![
        ('a', "grad_elementwise_arithmetic", grad_elementwise_arithmetic),
        ('a', "grad_relu_ln_exp", grad_relu_ln_exp),
        ('a', "grad_sum_reshape_max", grad_sum_reshape_max),
        ('a', "grad_products", grad_products),
        ('a', "grad_conv2d", grad_conv2d),
        ('a', "grad_conv_relu_composite", grad_conv_relu_composite),
        ('a', "grad_pool_dropout_softmax", grad_pool_dropout_softmax),
        ('a', "grad_maxplus_dense", grad_maxplus_dense),
        ('a', "grad_maxplus_conv", grad_maxplus_conv),
        ('a', "grad_bm_dense", grad_bm_dense),
        ('a', "grad_bm_conv", grad_bm_conv),
        ('b', "bm_single_term_exactness", bm_single_term_exactness),
        ('b', "bm_worst_case_ratio_is_n", bm_worst_case_ratio_is_n),
        ('b', "bm_path_bound", bm_path_bound),
        ('c', "sign_path_oracle_identity", sign_path_oracle_identity),
        ('d', "k_factor_bounds", k_factor_bounds),
        ('e', "convert_round_trip", convert_round_trip),
        ('f', "maxplus_matches_loop_oracle", maxplus_matches_loop_oracle),
        ('g', "bm_positive_homogeneity", bm_positive_homogeneity),
        ('g', "bm_permutation_invariance", bm_permutation_invariance),
    ]
}
