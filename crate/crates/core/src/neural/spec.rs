//! Architecture descriptors and parameter containers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Matrix;
use super::NeuralError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Rnn,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// One real output.
    Linear,
    /// Two-class probabilities.
    Softmax,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Linear => 1,
            HeadKind::Softmax => 2,
        }
    }
}

/// A many-to-one stack: one output per input sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub head: HeadKind,
    pub seq_len: usize,
    pub input_features: usize,
}

impl NetworkSpec {
    pub fn stacked(kind: LayerKind, hidden: usize, depth: usize, head: HeadKind, seq_len: usize, input_features: usize) -> Self {
        Self {
            layers: vec![LayerSpec { kind, hidden }; depth],
            head,
            seq_len,
            input_features,
        }
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.layers.is_empty() || self.seq_len == 0 || self.input_features == 0 {
            return Err(NeuralError::ShapeMismatch(
                "a network needs at least one layer, seq_len >= 1 and input_features >= 1".into(),
            ));
        }
        if self.layers.iter().any(|l| l.hidden == 0) {
            return Err(NeuralError::ShapeMismatch("hidden size must be >= 1".into()));
        }
        Ok(())
    }

    /// Width of each layer's input: the features for the first layer, the
    /// previous layer's hidden size after that.
    pub fn layer_inputs(&self) -> Vec<usize> {
        std::iter::once(self.input_features)
            .chain(self.layers.iter().map(|l| l.hidden))
            .take(self.layers.len())
            .collect()
    }

    pub fn top_hidden(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden)
    }

    /// Name and shape of every parameter tensor, in serialization order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, (layer, f)) in self.layers.iter().zip(self.layer_inputs()).enumerate() {
            let h = layer.hidden;
            let gates: &[&str] = match layer.kind {
                LayerKind::Rnn => &[""],
                LayerKind::Lstm => &["_c", "_u", "_f", "_o"],
            };
            for g in gates {
                out.push((format!("layer{i}.W{g}"), vec![h, h + f]));
            }
            for g in gates {
                out.push((format!("layer{i}.b{g}"), vec![h]));
            }
        }
        let k = self.head.outputs();
        out.push(("head.W".into(), vec![k, self.top_hidden()]));
        out.push(("head.b".into(), vec![k]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.manifest().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnLayerParams {
    /// `[H × (H+F)]`, acting on `[a_prev; x]`.
    pub w: Matrix,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams {
    pub w_c: Matrix,
    pub w_u: Matrix,
    pub w_f: Matrix,
    pub w_o: Matrix,
    pub b_c: Vec<f64>,
    pub b_u: Vec<f64>,
    pub b_f: Vec<f64>,
    pub b_o: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Rnn(RnnLayerParams),
    Lstm(LstmLayerParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `[K × H_top]`
    pub w: Matrix,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
    pub head: HeadParams,
}

/// Forget-gate bias at initialisation.
pub const FORGET_BIAS_INIT: f64 = 1.0;

impl NetworkParams {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = spec
            .layers
            .iter()
            .zip(spec.layer_inputs())
            .map(|(l, f)| {
                let (h, z) = (l.hidden, || Matrix::zeros(l.hidden, l.hidden + f));
                match l.kind {
                    LayerKind::Rnn => LayerParams::Rnn(RnnLayerParams { w: z(), b: vec![0.0; h] }),
                    LayerKind::Lstm => LayerParams::Lstm(LstmLayerParams {
                        w_c: z(),
                        w_u: z(),
                        w_f: z(),
                        w_o: z(),
                        b_c: vec![0.0; h],
                        b_u: vec![0.0; h],
                        b_f: vec![0.0; h],
                        b_o: vec![0.0; h],
                    }),
                }
            })
            .collect();
        let k = spec.head.outputs();
        Self {
            layers,
            head: HeadParams {
                w: Matrix::zeros(k, spec.top_hidden()),
                b: vec![0.0; k],
            },
        }
    }

    /// Weights uniform in ±1/√(H+F), biases zero, forget bias +1.
    pub fn init(spec: &NetworkSpec, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(spec);
        for (layer, (l, f)) in p.layers.iter_mut().zip(spec.layers.iter().zip(spec.layer_inputs())) {
            let (h, bound) = (l.hidden, 1.0 / ((l.hidden + f) as f64).sqrt());
            let mut u = || Matrix::uniform(h, h + f, bound, rng);
            match layer {
                LayerParams::Rnn(r) => r.w = u(),
                LayerParams::Lstm(m) => {
                    m.w_c = u();
                    m.w_u = u();
                    m.w_f = u();
                    m.w_o = u();
                    m.b_f = vec![FORGET_BIAS_INIT; h];
                }
            }
        }
        let top = spec.top_hidden();
        p.head.w = Matrix::uniform(spec.head.outputs(), top, 1.0 / (top as f64).sqrt(), rng);
        p
    }

    /// Every tensor as a flat slice, in manifest order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerParams::Rnn(r) => out.extend([&r.w.data[..], &r.b[..]]),
                LayerParams::Lstm(m) => out.extend([
                    &m.w_c.data[..],
                    &m.w_u.data[..],
                    &m.w_f.data[..],
                    &m.w_o.data[..],
                    &m.b_c[..],
                    &m.b_u[..],
                    &m.b_f[..],
                    &m.b_o[..],
                ]),
            }
        }
        out.extend([&self.head.w.data[..], &self.head.b[..]]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                LayerParams::Rnn(r) => out.extend([&mut r.w.data[..], &mut r.b[..]]),
                LayerParams::Lstm(m) => out.extend([
                    &mut m.w_c.data[..],
                    &mut m.w_u.data[..],
                    &mut m.w_f.data[..],
                    &mut m.w_o.data[..],
                    &mut m.b_c[..],
                    &mut m.b_u[..],
                    &mut m.b_f[..],
                    &mut m.b_o[..],
                ]),
            }
        }
        out.extend([&mut self.head.w.data[..], &mut self.head.b[..]]);
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Overwrites every parameter from `flat` (manifest order).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<(), NeuralError> {
        let total: usize = self.tensors().iter().map(|t| t.len()).sum();
        if flat.len() != total {
            return Err(NeuralError::ManifestShapeMismatch(format!(
                "expected {total} values, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Checks tensor shapes against `spec`.
    pub fn check(&self, spec: &NetworkSpec) -> Result<(), NeuralError> {
        let expected: Vec<usize> = spec.manifest().iter().map(|(_, s)| s.iter().product()).collect();
        let actual: Vec<usize> = self.tensors().iter().map(|t| t.len()).collect();
        let kinds_match = self.layers.len() == spec.layers.len()
            && self.layers.iter().zip(&spec.layers).all(|(p, l)| {
                matches!((p, l.kind), (LayerParams::Rnn(_), LayerKind::Rnn) | (LayerParams::Lstm(_), LayerKind::Lstm))
            });
        if !kinds_match || expected != actual {
            return Err(NeuralError::ShapeMismatch("parameters do not match the network spec".into()));
        }
        Ok(())
    }
}
