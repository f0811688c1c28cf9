//! Named parameter storage with group-level gradient gating, plus the layer
//! and network types the potential functions are assembled from.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Value};
use super::tensor::Tensor;
use crate::error::DnbpError;

/// Identifies a gradient-gating group ("node0.unary", "edge0_1.density", ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupId(pub(crate) usize);

/// Index of a single named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

struct Param {
    name: String,
    group: GroupId,
    tensor: Tensor,
}

/// Ordered, named parameter tensors. Order is fixed at construction and
/// defines the checkpoint layout and optimizer slot alignment.
pub struct ParamStore {
    groups: Vec<String>,
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { groups: Vec::new(), params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn group(&mut self, name: &str) -> GroupId {
        if let Some(i) = self.groups.iter().position(|g| g == name) {
            return GroupId(i);
        }
        self.groups.push(name.to_string());
        GroupId(self.groups.len() - 1)
    }

    pub fn group_name(&self, g: GroupId) -> &str {
        &self.groups[g.0]
    }

    pub fn add(&mut self, group: GroupId, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        self.params.push(Param { name: name.to_string(), group, tensor });
        let id = self.params.len() - 1;
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group_of(&self, id: ParamId) -> GroupId {
        self.params[id.0].group
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradient vectors aligned with [`ParamStore`] order.
#[derive(Clone)]
pub struct Gradients {
    pub slots: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Gradients { slots: store.ids().map(|id| vec![0.0; store.tensor(id).numel()]).collect() }
    }

    /// Harvest every parameter gradient from a tape after backward.
    pub fn from_tape(tape: &Tape, store: &ParamStore) -> Self {
        Gradients { slots: store.ids().map(|id| tape.param_grad(store, id)).collect() }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn global_norm(&self) -> f32 {
        let sq: f64 = self
            .slots
            .iter()
            .map(|s| s.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
            .sum();
        sq.sqrt() as f32
    }

    pub fn scale(&mut self, c: f32) {
        for s in &mut self.slots {
            for v in s.iter_mut() {
                *v *= c;
            }
        }
    }
}

// ── layers and networks ──────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum Layer {
    /// 3x3 convolution with the given stride and padding.
    Conv2d { weight: ParamId, bias: ParamId, stride: usize, pad: usize },
    /// 2x2 max-pool, stride 2, ceil mode; identity on 1x1 inputs.
    MaxPool2,
    Relu,
    /// [C,H,W] -> [C*H*W]
    Flatten,
    Linear { weight: ParamId, bias: ParamId },
    SigmoidScaled { lo: f32, hi: f32 },
}

/// A sequential stack of layers with shape validation at each step.
pub struct Network {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl Network {
    /// Run the stack. Inputs must be finite; shape errors name the layer.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Value) -> Result<Value, DnbpError> {
        if tape.data(x).iter().any(|v| !v.is_finite()) {
            return Err(DnbpError::Numeric(format!(
                "non-finite input to network {:?}",
                self.name
            )));
        }
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = self.apply(tape, store, cur, layer).map_err(|msg| DnbpError::Shape {
                network: self.name.clone(),
                layer: i,
                detail: msg,
            })?;
        }
        Ok(cur)
    }

    fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Value,
        layer: &Layer,
    ) -> Result<Value, String> {
        match *layer {
            Layer::Conv2d { weight, bias, stride, pad } => {
                let s = tape.shape(x);
                if s.len() != 3 {
                    return Err(format!("conv2d expects [C,H,W], got {s:?}"));
                }
                if s[0] != store.tensor(weight).shape()[1] {
                    return Err(format!(
                        "conv2d channel mismatch: input {:?}, weight {:?}",
                        s,
                        store.tensor(weight).shape()
                    ));
                }
                let w = tape.param(store, weight);
                let b = tape.param(store, bias);
                Ok(tape.conv2d(x, w, b, stride, pad))
            }
            Layer::MaxPool2 => {
                if tape.shape(x).len() != 3 {
                    return Err(format!("maxpool expects [C,H,W], got {:?}", tape.shape(x)));
                }
                Ok(tape.maxpool2(x))
            }
            Layer::Relu => Ok(tape.relu(x)),
            Layer::Flatten => {
                let n = tape.numel(x);
                Ok(tape.reshape(x, vec![n]))
            }
            Layer::Linear { weight, bias } => {
                let s = tape.shape(x);
                let n = *s.last().unwrap();
                let want = store.tensor(weight).shape()[1];
                if n != want || s.len() > 2 {
                    return Err(format!(
                        "linear expects [B,{want}] or [{want}], got {s:?}"
                    ));
                }
                let w = tape.param(store, weight);
                let b = tape.param(store, bias);
                Ok(tape.linear(x, w, b))
            }
            Layer::SigmoidScaled { lo, hi } => Ok(tape.sigmoid_scaled(x, lo, hi)),
        }
    }
}

/// Helpers to build the standard blocks.
pub fn linear_layer(
    store: &mut ParamStore,
    group: GroupId,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Layer {
    let w = store.add(
        group,
        &format!("{prefix}.weight"),
        Tensor::uniform_fan_in(vec![fan_out, fan_in], fan_in, rng),
    );
    let b = store.add(
        group,
        &format!("{prefix}.bias"),
        Tensor::uniform_fan_in(vec![fan_out], fan_in, rng),
    );
    Layer::Linear { weight: w, bias: b }
}

pub fn conv_layer(
    store: &mut ParamStore,
    group: GroupId,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    stride: usize,
    pad: usize,
    rng: &mut ChaCha8Rng,
) -> Layer {
    let fan_in = 9 * c_in;
    let w = store.add(
        group,
        &format!("{prefix}.weight"),
        Tensor::uniform_fan_in(vec![c_out, c_in, 3, 3], fan_in, rng),
    );
    let b = store.add(
        group,
        &format!("{prefix}.bias"),
        Tensor::uniform_fan_in(vec![c_out], fan_in, rng),
    );
    Layer::Conv2d { weight: w, bias: b, stride, pad }
}
