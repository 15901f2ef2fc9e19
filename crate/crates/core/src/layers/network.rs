use std::collections::HashSet;
use std::sync::Arc;

use rand::Rng;

use super::{LayerKind, LayerParams, NetworkSpec};
use crate::bm::{bm_layer, Geometry};
use crate::error::{Error, Result};
use crate::tensor::{Activations, ConvGeometry, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which tensor of a layer a parameter leaf holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamSlot {
    Weight,
    Bias,
    V0,
    V1,
}

#[derive(Clone, Debug)]
pub struct ParamVar {
    pub layer: String,
    pub slot: ParamSlot,
    pub var: Var,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerSaturation {
    pub layer: String,
    pub saturated: usize,
    pub total: usize,
}

/// A recorded forward pass.
pub struct Trace {
    pub graph: Graph,
    /// Pre-softmax scores (equal to `output` when the net has no softmax).
    pub logits: Var,
    pub output: Var,
    /// Leaves of trainable layers, in layer order.
    pub params: Vec<ParamVar>,
    pub saturation: Vec<LayerSaturation>,
}

impl NetworkSpec {
    /// Records a forward pass of `batch` (`b × c × h × w`).
    ///
    /// Layers named in `trainable` get gradient-tracking leaves; everything
    /// else enters as constants. Dropout only acts in [`Mode::Train`].
    pub fn trace<R: Rng + ?Sized>(
        &self,
        batch: Tensor,
        mode: Mode,
        trainable: &HashSet<String>,
        activations: Option<Arc<dyn Activations>>,
        rng: &mut R,
    ) -> Result<Trace> {
        let [c, h, w] = self.input_shape();
        let s = batch.shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::shape(
                "forward",
                format!("batch {s:?} does not match input {c}x{h}x{w}"),
            )
            .in_layer("input"));
        }
        let mut g = match activations {
            Some(a) => Graph::with_activations(a),
            None => Graph::new(),
        };
        let mut x = g.input(batch);
        let mut logits = None;
        let mut params = Vec::new();
        let mut saturation = Vec::new();
        for layer in self.layers() {
            let train = trainable.contains(&layer.name);
            x = self
                .apply_layer(layer, &mut g, x, mode, train, rng, &mut params, &mut saturation, &mut logits)
                .map_err(|e| e.in_layer(&layer.name))?;
        }
        let output = x;
        let logits = match logits {
            Some(l) => l,
            None => g.flatten(output)?,
        };
        Ok(Trace {
            graph: g,
            logits,
            output,
            params,
            saturation,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_layer<R: Rng + ?Sized>(
        &self,
        layer: &super::LayerSpec,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        train: bool,
        rng: &mut R,
        params: &mut Vec<ParamVar>,
        saturation: &mut Vec<LayerSaturation>,
        logits: &mut Option<Var>,
    ) -> Result<Var> {
        let name = layer.name.as_str();
        let mut leaf = |g: &mut Graph, t: &Tensor, slot: ParamSlot| {
            let var = g.leaf(t.clone(), train);
            if train {
                params.push(ParamVar {
                    layer: name.to_string(),
                    slot,
                    var,
                });
            }
            var
        };
        Ok(match &layer.kind {
            LayerKind::Conv(_) | LayerKind::Fc { .. } => {
                let Some(LayerParams::Classical { weight, bias }) = self.params.get(name) else {
                    return Err(Error::MissingParams(name.into()));
                };
                let wv = leaf(g, weight, ParamSlot::Weight);
                let bv = leaf(g, bias, ParamSlot::Bias);
                let y = match &layer.kind {
                    LayerKind::Conv(spec) => g.conv2d(
                        x,
                        wv,
                        ConvGeometry {
                            stride: spec.stride,
                            pad: spec.pad,
                        },
                    )?,
                    _ => {
                        let flat = g.flatten(x)?;
                        g.linear(flat, wv)?
                    }
                };
                g.add_bias(y, bv)?
            }
            LayerKind::BmConv(_) | LayerKind::BmFc { .. } => {
                let Some(LayerParams::Bm(bw)) = self.params.get(name) else {
                    return Err(Error::MissingParams(name.into()));
                };
                let before = g.saturation();
                let v0 = leaf(g, &bw.v0, ParamSlot::V0);
                let v1 = leaf(g, &bw.v1, ParamSlot::V1);
                let bv = leaf(g, &bw.bias, ParamSlot::Bias);
                let input = match bw.geometry {
                    Geometry::Dense { .. } => g.flatten(x)?,
                    Geometry::Conv { .. } => x,
                };
                let y = bm_layer(g, input, v0, v1, bv, bw.geometry.maxplus())?;
                let after = g.saturation();
                saturation.push(LayerSaturation {
                    layer: name.to_string(),
                    saturated: after.0 - before.0,
                    total: after.1 - before.1,
                });
                y
            }
            LayerKind::Relu => g.relu(x),
            LayerKind::MaxPool { kh, kw } => g.max_pool(x, *kh, *kw)?,
            LayerKind::Dropout { p } => match mode {
                Mode::Train => g.dropout(x, *p, rng)?,
                Mode::Eval => x,
            },
            LayerKind::Softmax => {
                let flat = g.flatten(x)?;
                *logits = Some(flat);
                g.softmax(flat)?
            }
        })
    }

    /// Mutable access to one parameter tensor.
    pub fn param_mut(&mut self, layer: &str, slot: ParamSlot) -> Option<&mut Tensor> {
        match (self.params.get_mut(layer)?, slot) {
            (LayerParams::Classical { weight, .. }, ParamSlot::Weight) => Some(weight),
            (LayerParams::Classical { bias, .. }, ParamSlot::Bias) => Some(bias),
            (LayerParams::Bm(bw), ParamSlot::V0) => Some(&mut bw.v0),
            (LayerParams::Bm(bw), ParamSlot::V1) => Some(&mut bw.v1),
            (LayerParams::Bm(bw), ParamSlot::Bias) => Some(&mut bw.bias),
            _ => None,
        }
    }

    /// Network output (class probabilities for softmax classifiers).
    pub fn forward<R: Rng + ?Sized>(&self, batch: Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        let t = self.trace(batch, mode, &HashSet::new(), None, rng)?;
        Ok(t.graph.value(t.output).clone())
    }

    /// Eval-mode scores before the final softmax.
    pub fn logits(&self, batch: Tensor, activations: Option<Arc<dyn Activations>>) -> Result<Tensor> {
        let t = self.trace(batch, Mode::Eval, &HashSet::new(), activations, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        Ok(t.graph.value(t.logits).clone())
    }
}
