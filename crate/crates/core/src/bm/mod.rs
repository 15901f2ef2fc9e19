//! Bipolar morphological (BM) layers.
//!
//! A dot product `Σ x_i w_i` is split into four sign paths so that every
//! term inside a path is a non-negative product `|x_i||w_i|`. Each path sum
//! is then replaced by its largest term, computed in the log domain:
//!
//! ```text
//! Σ |x_i||w_i|  ≈  exp max_i (ln|x_i| + ln|w_i|)
//! ```
//!
//! The layer output is
//!
//! ```text
//! Y = (Y⁰⁰ − Y⁰¹) − (Y¹⁰ − Y¹¹) + bias,   Yᵏʲ = exp(Xᵏ ⊛ Vʲ)
//! ```
//!
//! with `X⁰ = ln ReLU(x)`, `X¹ = ln ReLU(−x)`, `V⁰ = ln w` on positive
//! weights and `V¹ = ln(−w)` on negative weights (`NEG_INF` elsewhere), and
//! `(X ⊛ V)_k = max_l (X_l + V_kl)`. Only additions and maxima happen inside
//! the paths; `ln`/`exp` act on activations.

mod lut;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use lut::ExpLnLut;

use crate::error::{Error, Result};
use crate::tensor::kernels::saturation_limit;
use crate::tensor::{Activations, ConvGeometry, Graph, MaxPlusGeometry, Tensor, Var, NEG_INF};

/// Connectivity of a BM (or classical) layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Geometry {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
}

impl Geometry {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            Geometry::Dense { inputs, outputs } => vec![outputs, inputs],
            Geometry::Conv {
                in_ch,
                out_ch,
                kh,
                kw,
                ..
            } => vec![out_ch, in_ch, kh, kw],
        }
    }

    pub fn outputs(&self) -> usize {
        match *self {
            Geometry::Dense { outputs, .. } => outputs,
            Geometry::Conv { out_ch, .. } => out_ch,
        }
    }

    pub fn maxplus(&self) -> MaxPlusGeometry {
        match *self {
            Geometry::Dense { .. } => MaxPlusGeometry::Dense,
            Geometry::Conv { stride, pad, .. } => {
                MaxPlusGeometry::Conv(ConvGeometry { stride, pad })
            }
        }
    }
}

/// Log-domain weight pair of a BM layer plus its additive bias.
#[derive(Clone, Debug, PartialEq)]
pub struct BmWeights {
    /// `ln w` where `w > 0`, else `NEG_INF`.
    pub v0: Tensor,
    /// `ln(-w)` where `w < 0`, else `NEG_INF`.
    pub v1: Tensor,
    pub bias: Tensor,
    pub geometry: Geometry,
}

impl BmWeights {
    /// `exp(V0) - exp(V1)`: the classical weights this layer approximates.
    pub fn reconstruct(&self) -> Tensor {
        let data = self
            .v0
            .data()
            .iter()
            .zip(self.v1.data())
            .map(|(&a, &b)| exp_sentinel(a) - exp_sentinel(b))
            .collect();
        Tensor::from_parts(self.v0.shape().to_vec(), data)
    }

    /// At most one of `V0`, `V1` is finite at every coordinate.
    pub fn sign_exclusive(&self) -> bool {
        self.v0
            .data()
            .iter()
            .zip(self.v1.data())
            .all(|(a, b)| !(a.is_finite() && b.is_finite()))
    }
}

fn exp_sentinel(v: f64) -> f64 {
    if v == NEG_INF {
        0.0
    } else {
        v.exp()
    }
}

/// Converts classical weights `w` (shaped per `geometry`) and bias into BM form.
pub fn convert_weights(w: &Tensor, bias: &Tensor, geometry: Geometry) -> Result<BmWeights> {
    let expected = geometry.weight_shape();
    if w.shape() != expected.as_slice() {
        return Err(Error::shape(
            "convert_weights",
            format!("weights {:?}, geometry wants {expected:?}", w.shape()),
        ));
    }
    if bias.shape() != [geometry.outputs()] {
        return Err(Error::shape(
            "convert_weights",
            format!("bias {:?}, geometry wants [{}]", bias.shape(), geometry.outputs()),
        ));
    }
    for (index, &value) in w.data().iter().chain(bias.data()).enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFiniteWeight { index, value });
        }
    }
    let v0 = w.map(|x| if x > 0.0 { x.ln() } else { NEG_INF });
    let v1 = w.map(|x| if x < 0.0 { (-x).ln() } else { NEG_INF });
    Ok(BmWeights {
        v0,
        v1,
        bias: bias.clone(),
        geometry,
    })
}

/// Standalone max-plus correlation `out_k = max_l (xlog_l + v_kl)`.
///
/// Dense: `xlog` is `batch × n` (or a vector) and `v` is `m × n`.
/// Conv: `xlog` is `batch × c × h × w`, `v` is `o × c × kh × kw`; padding reads `NEG_INF`.
pub fn maxplus_correlate(xlog: &Tensor, v: &Tensor, geometry: MaxPlusGeometry) -> Result<Tensor> {
    let vector = xlog.rank() == 1;
    let x = if vector {
        xlog.reshape(&[1, xlog.numel()])?
    } else {
        xlog.clone()
    };
    let mut g = Graph::new();
    let xv = g.input(x);
    let vv = g.input(v.clone());
    let out = g.maxplus(xv, vv, geometry)?;
    let out = g.value(out);
    if vector {
        out.reshape(&[out.numel()])
    } else {
        Ok(out.clone())
    }
}

/// Records the four max-plus paths `[X⁰⊛V⁰, X⁰⊛V¹, X¹⊛V⁰, X¹⊛V¹]` on `g`.
pub fn bm_paths(
    g: &mut Graph,
    x: Var,
    v0: Var,
    v1: Var,
    geometry: MaxPlusGeometry,
) -> Result<[Var; 4]> {
    let pos = g.relu(x);
    let neg_x = g.neg(x);
    let neg = g.relu(neg_x);
    let x0 = g.ln(pos)?;
    let x1 = g.ln(neg)?;
    Ok([
        g.maxplus(x0, v0, geometry)?,
        g.maxplus(x0, v1, geometry)?,
        g.maxplus(x1, v0, geometry)?,
        g.maxplus(x1, v1, geometry)?,
    ])
}

/// Combines path outputs: `(exp P00 − exp P01) − (exp P10 − exp P11) + bias`.
pub fn bm_combine(g: &mut Graph, paths: [Var; 4], bias: Var) -> Result<Var> {
    let [p00, p01, p10, p11] = paths.map(|p| g.exp(p));
    let y0 = g.sub(p00, p01)?;
    let y1 = g.sub(p10, p11)?;
    let y = g.sub(y0, y1)?;
    g.add_bias(y, bias)
}

/// Differentiable BM layer on a graph.
pub fn bm_layer(
    g: &mut Graph,
    x: Var,
    v0: Var,
    v1: Var,
    bias: Var,
    geometry: MaxPlusGeometry,
) -> Result<Var> {
    let paths = bm_paths(g, x, v0, v1, geometry)?;
    bm_combine(g, paths, bias)
}

/// Evaluates a BM layer on `x` with exact activations.
///
/// Dense layers accept a vector or a `batch × inputs` matrix; conv layers a
/// `batch × c × h × w` tensor. Any max-plus value beyond the exponent range
/// is reported as [`Error::Overflow`].
pub fn bm_forward(x: &Tensor, bw: &BmWeights) -> Result<Tensor> {
    bm_forward_with(x, bw, None)
}

/// [`bm_forward`] with optional replacement activations (e.g. [`ExpLnLut`]).
pub fn bm_forward_with(
    x: &Tensor,
    bw: &BmWeights,
    activations: Option<Arc<dyn Activations>>,
) -> Result<Tensor> {
    if let Some((index, &value)) = x.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Invalid(format!(
            "non-finite input {value} at index {index}"
        )));
    }
    let vector = x.rank() == 1;
    let input = if vector {
        x.reshape(&[1, x.numel()])?
    } else {
        x.clone()
    };
    let mut g = match activations {
        Some(a) => Graph::with_activations(a),
        None => Graph::new(),
    };
    let xv = g.input(input);
    let v0 = g.input(bw.v0.clone());
    let v1 = g.input(bw.v1.clone());
    let bias = g.input(bw.bias.clone());
    let paths = bm_paths(&mut g, xv, v0, v1, bw.geometry.maxplus())?;
    if g.saturation().0 > 0 {
        let limit = saturation_limit();
        for p in paths {
            if let Some(coord) = g.value(p).data().iter().position(|&v| v >= limit) {
                return Err(Error::Overflow {
                    layer: "bm".into(),
                    coord,
                    value: limit,
                });
            }
        }
    }
    let y = bm_combine(&mut g, paths, bias)?;
    let y = g.value(y);
    if vector {
        y.reshape(&[y.numel()])
    } else {
        Ok(y.clone())
    }
}

/// The four exact sign-path sums of a dot product.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignPaths {
    /// x > 0, w > 0
    pub s00: f64,
    /// x > 0, w < 0
    pub s01: f64,
    /// x < 0, w > 0
    pub s10: f64,
    /// x < 0, w < 0
    pub s11: f64,
}

impl SignPaths {
    /// `S⁰⁰ − S⁰¹ − S¹⁰ + S¹¹`, which equals the dot product.
    pub fn recombine(&self) -> f64 {
        self.s00 - self.s01 - self.s10 + self.s11
    }
}

/// Splits `Σ x_i w_i` into its four non-negative sign-path sums.
pub fn sign_path_decompose(x: &[f64], w: &[f64]) -> SignPaths {
    assert_eq!(x.len(), w.len(), "sign_path_decompose length mismatch");
    let mut s = SignPaths {
        s00: 0.0,
        s01: 0.0,
        s10: 0.0,
        s11: 0.0,
    };
    for (&xi, &wi) in x.iter().zip(w) {
        let term = xi.abs() * wi.abs();
        match (xi > 0.0, xi < 0.0, wi > 0.0, wi < 0.0) {
            (true, _, true, _) => s.s00 += term,
            (true, _, _, true) => s.s01 += term,
            (_, true, true, _) => s.s10 += term,
            (_, true, _, true) => s.s11 += term,
            _ => {}
        }
    }
    s
}

/// Approximation-quality diagnostic of one non-negative path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KFactorReport {
    /// Largest product term.
    pub m: f64,
    /// `Σ x_i w_i / M − 1`; the exact sum is `(1 + k)·M`.
    pub k: f64,
    pub n_terms: usize,
}

pub fn k_factor(x: &[f64], w: &[f64]) -> Result<KFactorReport> {
    if x.len() != w.len() {
        return Err(Error::shape(
            "k_factor",
            format!("{} inputs vs {} weights", x.len(), w.len()),
        ));
    }
    let mut sum = 0.0;
    let mut m: f64 = 0.0;
    for (i, (&a, &b)) in x.iter().zip(w).enumerate() {
        let p = a * b;
        if p < 0.0 {
            return Err(Error::Invalid(format!("negative product {p} at index {i}")));
        }
        sum += p;
        m = m.max(p);
    }
    if m <= 0.0 {
        return Err(Error::ZeroProducts);
    }
    Ok(KFactorReport {
        m,
        k: sum / m - 1.0,
        n_terms: x.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(w: &[f64]) -> BmWeights {
        let t = Tensor::new(&[1, w.len()], w.to_vec()).unwrap();
        convert_weights(
            &t,
            &Tensor::zeros(&[1]),
            Geometry::Dense {
                inputs: w.len(),
                outputs: 1,
            },
        )
        .unwrap()
    }

    fn run(x: &[f64], w: &[f64]) -> f64 {
        bm_forward(&Tensor::from_vec(x.to_vec()), &dense(w)).unwrap().item()
    }

    #[test]
    fn convert_examples() {
        let bw = dense(&[1.0, -1.0, 0.0]);
        assert_eq!(bw.v0.data(), &[0.0, NEG_INF, NEG_INF]);
        assert_eq!(bw.v1.data(), &[NEG_INF, 0.0, NEG_INF]);
        let bw = dense(&[std::f64::consts::E]);
        assert!((bw.v0.data()[0] - 1.0).abs() < 1e-15);
        assert_eq!(bw.v1.data(), &[NEG_INF]);
    }

    #[test]
    fn convert_rejects_non_finite() {
        let t = Tensor::new(&[1, 2], vec![1.0, f64::INFINITY]).unwrap();
        let geom = Geometry::Dense {
            inputs: 2,
            outputs: 1,
        };
        assert!(matches!(
            convert_weights(&t, &Tensor::zeros(&[1]), geom),
            Err(Error::NonFiniteWeight { index: 1, .. })
        ));
    }

    #[test]
    fn forward_examples() {
        assert_eq!(run(&[2.0, 0.0], &[3.0, 0.0]), 6.0);
        assert_eq!(run(&[1.0, 1.0], &[1.0, 1.0]), 1.0);
        assert_eq!(run(&[1.0, -1.0], &[1.0, 1.0]), 0.0);
        assert!((run(&[3.0, 4.0], &[2.0, -5.0]) + 14.0).abs() < 1e-12);
    }

    #[test]
    fn forward_adds_bias_after_paths() {
        let mut bw = dense(&[2.0]);
        bw.bias = Tensor::from_vec(vec![0.5]);
        let y = bm_forward(&Tensor::from_vec(vec![1.5]), &bw).unwrap().item();
        assert!((y - 3.5).abs() < 1e-12);
    }

    #[test]
    fn forward_reports_overflow() {
        let t = Tensor::new(&[1, 1], vec![1e300]).unwrap();
        let bw = convert_weights(
            &t,
            &Tensor::zeros(&[1]),
            Geometry::Dense {
                inputs: 1,
                outputs: 1,
            },
        )
        .unwrap();
        let err = bm_forward(&Tensor::from_vec(vec![1e300]), &bw).unwrap_err();
        assert!(matches!(err, Error::Overflow { coord: 0, .. }), "{err}");
    }

    #[test]
    fn maxplus_examples() {
        let v = Tensor::new(&[1, 1], vec![0.0]).unwrap();
        let out = maxplus_correlate(&Tensor::from_vec(vec![-2.5]), &v, MaxPlusGeometry::Dense).unwrap();
        assert_eq!(out.data(), &[-2.5]);
        let v = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let out =
            maxplus_correlate(&Tensor::from_vec(vec![0.0, NEG_INF]), &v, MaxPlusGeometry::Dense).unwrap();
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn sign_paths_examples() {
        let s = sign_path_decompose(&[1.0, -1.0], &[1.0, 1.0]);
        assert_eq!((s.s00, s.s01, s.s10, s.s11), (1.0, 0.0, 1.0, 0.0));
        let s = sign_path_decompose(&[3.0, 4.0], &[2.0, -5.0]);
        assert_eq!((s.s00, s.s01, s.s10, s.s11), (6.0, 20.0, 0.0, 0.0));
    }

    #[test]
    fn k_factor_examples() {
        let r = k_factor(&[1.0; 4], &[1.0; 4]).unwrap();
        assert_eq!((r.m, r.k, r.n_terms), (1.0, 3.0, 4));
        let r = k_factor(&[2.0, 0.0, 0.0], &[3.0, 1.0, 1.0]).unwrap();
        assert_eq!((r.m, r.k), (6.0, 0.0));
        assert!(matches!(k_factor(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::ZeroProducts)));
    }
}
