//! Declarative sequential networks built from classical and BM layers.

mod network;
mod parse;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use network::{LayerSaturation, Mode, ParamSlot, ParamVar, Trace};
pub use parse::{parse_layers, print_layers};

use crate::bm::{convert_weights, BmWeights, Geometry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The first MNIST network: one convolution and a linear classifier.
pub const CNN1: &str = "conv1(30, 5, 5) - relu1 - dropout1(0,2) - fc1(10) - softmax1";
/// The second MNIST network: two convolutions and two fully-connected layers.
pub const CNN2: &str = "conv1(40, 5, 5) - relu1 - maxpool1(2, 2) - conv2(40, 5, 5) - relu2 - fc1(200) - relu3 - dropout1(0,3) - fc2(10) - softmax1";
/// Symbol-recognition networks (37 classes on 21×17 crops).
pub const CNN3: &str = "conv1(8, 3, 3) - relu1 - conv2(30, 5, 5) - relu2 - conv3(30, 5, 5) - relu3 - dropout1(0,25) - fc1(37) - softmax1";
pub const CNN4: &str = "conv1(8, 3, 3) - relu1 - conv2(8, 5, 5) - relu2 - conv3(8, 3, 3) - relu3 - dropout1(0,25) - conv4(12, 5, 5) - relu4 - conv5(12, 3, 3) - relu5 - conv6(12, 1, 1) - relu6 - fc1(37) - softmax1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv(ConvSpec),
    Fc { units: usize },
    Relu,
    MaxPool { kh: usize, kw: usize },
    Dropout { p: f64 },
    Softmax,
    BmConv(ConvSpec),
    BmFc { units: usize },
}

impl LayerKind {
    pub fn is_bm(&self) -> bool {
        matches!(self, LayerKind::BmConv(_) | LayerKind::BmFc { .. })
    }

    /// Conv and fully-connected layers, classical or already converted.
    pub fn is_weighted(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv(_) | LayerKind::Fc { .. } | LayerKind::BmConv(_) | LayerKind::BmFc { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Classical { weight: Tensor, bias: Tensor },
    Bm(BmWeights),
}

/// An ordered network with its input shape (`channels × height × width`)
/// and a parameter store keyed by layer name.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    pub params: BTreeMap<String, LayerParams>,
}

impl NetworkSpec {
    pub fn new(input_shape: [usize; 3], layers: Vec<LayerSpec>) -> Result<Self> {
        let net = Self {
            input_shape,
            layers,
            params: BTreeMap::new(),
        };
        net.layer_geometry()?;
        Ok(net)
    }

    pub fn parse(text: &str, input_shape: [usize; 3]) -> Result<Self> {
        Self::new(input_shape, parse_layers(text)?)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn architecture(&self) -> String {
        print_layers(&self.layers)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Names of conv/fc layers in network order (the conversion schedule).
    pub fn convertible_layers(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.kind.is_weighted())
            .map(|l| l.name.clone())
            .collect()
    }

    /// Output shape (without batch) after every layer.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        Ok(self.layer_geometry()?.into_iter().map(|(_, out, _)| out).collect())
    }

    /// Per layer: input shape, output shape, and weight geometry for conv/fc.
    pub(crate) fn layer_geometry(&self) -> Result<Vec<(Vec<usize>, Vec<usize>, Option<Geometry>)>> {
        let mut shape = self.input_shape.to_vec();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Invalid(format!("input shape {shape:?} has a zero dimension")));
        }
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::Invalid(format!("duplicate layer name `{}`", l.name)));
            }
            let input = shape.clone();
            let mismatch = |detail: String| Error::shape("network", detail).in_layer(&l.name);
            let (next, geom) = match &l.kind {
                LayerKind::Conv(c) | LayerKind::BmConv(c) => {
                    if shape.len() != 3 {
                        return Err(mismatch(format!("conv needs a c×h×w input, got {shape:?}")));
                    }
                    let (h, w) = (shape[1] + 2 * c.pad, shape[2] + 2 * c.pad);
                    if h < c.kh || w < c.kw || c.stride == 0 {
                        return Err(mismatch(format!(
                            "kernel {}x{} does not fit input {shape:?}",
                            c.kh, c.kw
                        )));
                    }
                    let geom = Geometry::Conv {
                        in_ch: shape[0],
                        out_ch: c.out_ch,
                        kh: c.kh,
                        kw: c.kw,
                        stride: c.stride,
                        pad: c.pad,
                    };
                    (
                        vec![c.out_ch, (h - c.kh) / c.stride + 1, (w - c.kw) / c.stride + 1],
                        Some(geom),
                    )
                }
                LayerKind::Fc { units } | LayerKind::BmFc { units } => {
                    let inputs = shape.iter().product();
                    (
                        vec![*units],
                        Some(Geometry::Dense {
                            inputs,
                            outputs: *units,
                        }),
                    )
                }
                LayerKind::MaxPool { kh, kw } => {
                    if shape.len() != 3 || shape[1] < *kh || shape[2] < *kw {
                        return Err(mismatch(format!("window {kh}x{kw} on input {shape:?}")));
                    }
                    (vec![shape[0], shape[1] / kh, shape[2] / kw], None)
                }
                LayerKind::Dropout { p } => {
                    if !(0.0..1.0).contains(p) {
                        return Err(mismatch(format!("dropout probability {p} not in [0, 1)")));
                    }
                    (shape.clone(), None)
                }
                LayerKind::Relu => (shape.clone(), None),
                LayerKind::Softmax => (vec![shape.iter().product()], None),
            };
            shape = next;
            out.push((input, shape.clone(), geom));
        }
        Ok(out)
    }

    pub fn geometry_of(&self, name: &str) -> Result<Geometry> {
        let idx = self
            .layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::LayerNotFound(name.into()))?;
        self.layer_geometry()?[idx]
            .2
            .ok_or_else(|| Error::NotConvertible(name.into()))
    }

    /// Uniform He-style initialization, `U(±sqrt(6 / fan_in))`, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.params.clear();
        let geoms = self.layer_geometry()?;
        for (l, (_, _, geom)) in self.layers.iter().zip(geoms) {
            let Some(geom) = geom else { continue };
            let shape = geom.weight_shape();
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            let weight = Tensor::new(&shape, w)?;
            let bias = Tensor::zeros(&[geom.outputs()]);
            let params = if l.kind.is_bm() {
                LayerParams::Bm(convert_weights(&weight, &bias, geom)?)
            } else {
                LayerParams::Classical { weight, bias }
            };
            self.params.insert(l.name.clone(), params);
        }
        Ok(())
    }

    /// Checks that every conv/fc layer has parameters of the right shape.
    pub fn check_params(&self) -> Result<()> {
        for (l, (_, _, geom)) in self.layers.iter().zip(self.layer_geometry()?) {
            let Some(geom) = geom else { continue };
            let want = geom.weight_shape();
            let ok = match (self.params.get(&l.name), l.kind.is_bm()) {
                (Some(LayerParams::Classical { weight, bias }), false) => {
                    weight.shape() == want.as_slice() && bias.shape() == [geom.outputs()]
                }
                (Some(LayerParams::Bm(bw)), true) => {
                    bw.v0.shape() == want.as_slice()
                        && bw.v1.shape() == want.as_slice()
                        && bw.bias.shape() == [geom.outputs()]
                        && bw.geometry == geom
                }
                (None, _) => return Err(Error::MissingParams(l.name.clone())),
                _ => false,
            };
            if !ok {
                return Err(Error::shape("params", format!("parameters do not match {want:?}")).in_layer(&l.name));
            }
        }
        Ok(())
    }

    /// Replaces the named classical conv/fc layer by its BM counterpart.
    pub fn convert_in_place(&mut self, name: &str) -> Result<()> {
        let idx = self
            .layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::LayerNotFound(name.into()))?;
        let new_kind = match &self.layers[idx].kind {
            LayerKind::Conv(c) => LayerKind::BmConv(*c),
            LayerKind::Fc { units } => LayerKind::BmFc { units: *units },
            _ => return Err(Error::NotConvertible(name.into())),
        };
        let geom = self.geometry_of(name)?;
        let Some(LayerParams::Classical { weight, bias }) = self.params.get(name) else {
            return Err(Error::MissingParams(name.into()));
        };
        let bw = convert_weights(weight, bias, geom).map_err(|e| e.in_layer(name))?;
        self.params.insert(name.to_string(), LayerParams::Bm(bw));
        self.layers[idx].kind = new_kind;
        Ok(())
    }

    /// Copy of the network with `name` converted to a BM layer.
    pub fn convert_layer(&self, name: &str) -> Result<Self> {
        let mut net = self.clone();
        net.convert_in_place(name)?;
        Ok(net)
    }

    /// Layer names from the start through the `depth`-th convertible layer.
    pub fn converted_prefix(&self, depth: usize) -> String {
        if depth == 0 {
            return "none".into();
        }
        let mut seen = 0;
        let mut names = Vec::new();
        for l in &self.layers {
            names.push(l.name.as_str());
            if l.kind.is_weighted() {
                seen += 1;
                if seen == depth {
                    break;
                }
            }
        }
        names.join(" - ")
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input_shape;
        writeln!(f, "input: {c}x{h}x{w}")?;
        let shapes = self.output_shapes().map_err(|_| fmt::Error)?;
        for (l, shape) in self.layers.iter().zip(shapes) {
            let kind = print_layers(std::slice::from_ref(l));
            write!(f, "{kind:<28} -> {shape:?}")?;
            match self.params.get(&l.name) {
                Some(LayerParams::Classical { weight, bias }) => {
                    write!(f, "  weight {:?} bias {:?}", weight.shape(), bias.shape())?
                }
                Some(LayerParams::Bm(bw)) => write!(
                    f,
                    "  V0 {:?} V1 {:?} bias {:?}",
                    bw.v0.shape(),
                    bw.v1.shape(),
                    bw.bias.shape()
                )?,
                None => {}
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mnist_shapes() {
        let net = NetworkSpec::parse(CNN1, [1, 28, 28]).unwrap();
        let shapes = net.output_shapes().unwrap();
        assert_eq!(shapes[0], vec![30, 24, 24]);
        assert_eq!(shapes[3], vec![10]);
        let net = NetworkSpec::parse(CNN2, [1, 28, 28]).unwrap();
        let shapes = net.output_shapes().unwrap();
        assert_eq!(shapes[2], vec![40, 12, 12]);
        assert_eq!(shapes[3], vec![40, 8, 8]);
        assert_eq!(net.convertible_layers(), ["conv1", "conv2", "fc1", "fc2"]);
    }

    #[test]
    fn symbol_networks_fit_their_input() {
        for arch in [CNN3, CNN4] {
            let net = NetworkSpec::parse(arch, [1, 21, 17]).unwrap();
            assert_eq!(net.output_shapes().unwrap().last().unwrap(), &vec![37]);
        }
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let err = NetworkSpec::parse("conv1(4, 9, 9) - fc1(2)", [1, 5, 5]).unwrap_err();
        assert!(err.to_string().contains("conv1"), "{err}");
    }

    #[test]
    fn convert_relu_fails() {
        let mut net = NetworkSpec::parse(CNN1, [1, 28, 28]).unwrap();
        net.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(net.convert_layer("relu1"), Err(Error::NotConvertible(_))));
        assert!(matches!(net.convert_layer("conv9"), Err(Error::LayerNotFound(_))));
    }

    #[test]
    fn convert_keeps_order_and_other_layers() {
        let mut net = NetworkSpec::parse(CNN1, [1, 28, 28]).unwrap();
        net.init_params(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let conv = net.convert_layer("conv1").unwrap();
        assert!(conv.layers()[0].kind.is_bm());
        assert_eq!(conv.layers()[1..], net.layers()[1..]);
        assert_eq!(conv.params["fc1"], net.params["fc1"]);
        conv.check_params().unwrap();
        let LayerParams::Classical { weight, .. } = &net.params["conv1"] else { panic!() };
        let LayerParams::Bm(bw) = &conv.params["conv1"] else { panic!() };
        for (a, b) in bw.reconstruct().data().iter().zip(weight.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
        assert!(matches!(conv.convert_layer("conv1"), Err(Error::NotConvertible(_))));
    }

    #[test]
    fn prefix_labels() {
        let net = NetworkSpec::parse(CNN2, [1, 28, 28]).unwrap();
        assert_eq!(net.converted_prefix(0), "none");
        assert_eq!(net.converted_prefix(2), "conv1 - relu1 - maxpool1 - conv2");
    }
}
