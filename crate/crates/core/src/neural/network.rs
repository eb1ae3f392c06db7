//! Many-to-one forward pass over a stacked network, and backpropagation
//! through time from the cached intermediates.

use serde::{Deserialize, Serialize};

use super::cell::{LstmStep, RnnStep};
use super::loss::{cce_loss_grad, LossKind, CCE_EPS};
use super::spec::{HeadKind, LayerParams, NetworkParams, NetworkSpec};
use super::tensor::{dot, softmax};
use super::NeuralError;

/// Network output for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Output {
    Value(f64),
    Probs(Vec<f64>),
}

impl Output {
    pub fn value(&self) -> Option<f64> {
        match self {
            Output::Value(v) => Some(*v),
            Output::Probs(_) => None,
        }
    }

    pub fn probs(&self) -> Option<&[f64]> {
        match self {
            Output::Probs(p) => Some(p),
            Output::Value(_) => None,
        }
    }
}

/// Training target for one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Value(f64),
    Class(usize),
}

pub(crate) enum LayerCache {
    Rnn(Vec<RnnStep>),
    Lstm(Vec<LstmStep>),
}

impl LayerCache {
    fn outputs(&self) -> Vec<&[f64]> {
        match self {
            LayerCache::Rnn(s) => s.iter().map(|x| &x.a[..]).collect(),
            LayerCache::Lstm(s) => s.iter().map(|x| &x.a[..]).collect(),
        }
    }
}

/// Intermediates of one forward pass.
pub struct ForwardCache {
    pub(crate) layers: Vec<LayerCache>,
    /// Final top-layer activation.
    pub(crate) top: Vec<f64>,
    /// Head pre-activations.
    pub(crate) logits: Vec<f64>,
}

impl ForwardCache {
    pub fn top_activation(&self) -> &[f64] {
        &self.top
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

fn check_input(spec: &NetworkSpec, x: &[Vec<f64>]) -> Result<(), NeuralError> {
    if x.len() != spec.seq_len {
        return Err(NeuralError::ShapeMismatch(format!("expected {} time steps, got {}", spec.seq_len, x.len())));
    }
    if let Some(row) = x.iter().find(|r| r.len() != spec.input_features) {
        return Err(NeuralError::ShapeMismatch(format!(
            "expected {} features per step, got {}",
            spec.input_features,
            row.len()
        )));
    }
    Ok(())
}

/// Zero initial states, layers stacked, head applied to the last top-layer
/// activation.
pub fn forward_sequence(spec: &NetworkSpec, params: &NetworkParams, x: &[Vec<f64>]) -> Result<(Output, ForwardCache), NeuralError> {
    check_input(spec, x)?;
    params.check(spec)?;
    let mut layers = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let h = spec.layers[i].hidden;
        let inputs: Vec<&[f64]> = match layers.last() {
            None => x.iter().map(Vec::as_slice).collect(),
            Some(prev) => LayerCache::outputs(prev),
        };
        let cache = match layer {
            LayerParams::Rnn(p) => {
                let mut steps: Vec<RnnStep> = Vec::with_capacity(inputs.len());
                for xt in &inputs {
                    let a_prev = steps.last().map_or_else(|| vec![0.0; h], |s| s.a.clone());
                    steps.push(RnnStep::forward(p, [&a_prev[..], xt].concat()));
                }
                LayerCache::Rnn(steps)
            }
            LayerParams::Lstm(p) => {
                let mut steps: Vec<LstmStep> = Vec::with_capacity(inputs.len());
                for xt in &inputs {
                    let step = match steps.last() {
                        None => LstmStep::forward(p, [&vec![0.0; h][..], xt].concat(), &vec![0.0; h]),
                        Some(s) => LstmStep::forward(p, [&s.a[..], xt].concat(), &s.c),
                    };
                    steps.push(step);
                }
                LayerCache::Lstm(steps)
            }
        };
        layers.push(cache);
    }
    let top = layers
        .last()
        .and_then(|l| l.outputs().last().map(|a| a.to_vec()))
        .expect("validated non-empty network");
    let logits: Vec<f64> = (0..spec.head.outputs())
        .map(|k| params.head.b[k] + dot(params.head.w.row(k), &top))
        .collect();
    let output = match spec.head {
        HeadKind::Linear => Output::Value(logits[0]),
        HeadKind::Softmax => Output::Probs(softmax(&logits)),
    };
    Ok((output, ForwardCache { layers, top, logits }))
}

/// Loss of one example and its gradient with respect to the head logits.
fn loss_and_logit_grad(spec: &NetworkSpec, loss: LossKind, output: &Output, target: Target) -> Result<(f64, Vec<f64>), NeuralError> {
    match (spec.head, loss, output, target) {
        (HeadKind::Linear, LossKind::Mae, Output::Value(y_hat), Target::Value(y)) => {
            let r = y_hat - y;
            Ok((r.abs(), vec![r.signum() * f64::from(u8::from(r != 0.0))]))
        }
        (HeadKind::Softmax, LossKind::Cce, Output::Probs(p), Target::Class(k)) if k < p.len() => {
            let mut label = vec![0.0; p.len()];
            label[k] = 1.0;
            let (l, dp) = cce_loss_grad(&label, p, CCE_EPS)?;
            // Softmax Jacobian: dz_j = p_j (dp_j − Σ_k p_k dp_k).
            let s: f64 = p.iter().zip(&dp).map(|(pk, gk)| pk * gk).sum();
            Ok((l, p.iter().zip(&dp).map(|(pj, gj)| pj * (gj - s)).collect()))
        }
        _ => Err(NeuralError::ShapeMismatch(format!(
            "loss {loss:?} and target {target:?} do not fit a {:?} head",
            spec.head
        ))),
    }
}

/// Mean batch loss and its exact gradient with respect to every parameter.
pub fn backprop_through_time(
    spec: &NetworkSpec,
    params: &NetworkParams,
    batch: &[(&[Vec<f64>], Target)],
    loss: LossKind,
) -> Result<(f64, NetworkParams), NeuralError> {
    if batch.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    let mut grads = NetworkParams::zeros(spec);
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for (x, target) in batch {
        let (output, cache) = forward_sequence(spec, params, x)?;
        let (l, dlogits) = loss_and_logit_grad(spec, loss, &output, *target)?;
        total += l;
        let dlogits: Vec<f64> = dlogits.iter().map(|g| g * scale).collect();
        accumulate_example(spec, params, &cache, &dlogits, &mut grads);
    }
    Ok((total * scale, grads))
}

fn accumulate_example(spec: &NetworkSpec, params: &NetworkParams, cache: &ForwardCache, dlogits: &[f64], grads: &mut NetworkParams) {
    grads.head.w.outer_acc(dlogits, &cache.top);
    grads.head.b.iter_mut().zip(dlogits).for_each(|(b, d)| *b += d);
    let t_len = spec.seq_len;
    // Gradient arriving at each output of the layer currently being processed.
    let mut d_out: Vec<Vec<f64>> = vec![vec![0.0; spec.top_hidden()]; t_len];
    params.head.w.transpose_mul_acc(dlogits, &mut d_out[t_len - 1]);

    for (li, (layer, layer_cache)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let h = spec.layers[li].hidden;
        let f_in = spec.layer_inputs()[li];
        let mut d_in: Vec<Vec<f64>> = vec![Vec::new(); if li > 0 { t_len } else { 0 }];
        let mut da_rec = vec![0.0; h];
        match (layer, layer_cache, &mut grads.layers[li]) {
            (LayerParams::Rnn(p), LayerCache::Rnn(steps), LayerParams::Rnn(g)) => {
                for t in (0..t_len).rev() {
                    let da: Vec<f64> = d_out[t].iter().zip(&da_rec).map(|(a, b)| a + b).collect();
                    let dv = steps[t].backward(p, g, &da);
                    da_rec.copy_from_slice(&dv[..h]);
                    if li > 0 {
                        d_in[t] = dv[h..h + f_in].to_vec();
                    }
                }
            }
            (LayerParams::Lstm(p), LayerCache::Lstm(steps), LayerParams::Lstm(g)) => {
                let mut dc = vec![0.0; h];
                for t in (0..t_len).rev() {
                    let da: Vec<f64> = d_out[t].iter().zip(&da_rec).map(|(a, b)| a + b).collect();
                    let (dv, dc_prev) = steps[t].backward(p, g, &da, &dc);
                    dc = dc_prev;
                    da_rec.copy_from_slice(&dv[..h]);
                    if li > 0 {
                        d_in[t] = dv[h..h + f_in].to_vec();
                    }
                }
            }
            _ => unreachable!("parameters, caches and gradients share the spec's layer kinds"),
        }
        d_out = d_in;
    }
}

/// Loss of one batch without gradients.
pub fn batch_loss(spec: &NetworkSpec, params: &NetworkParams, batch: &[(&[Vec<f64>], Target)], loss: LossKind) -> Result<f64, NeuralError> {
    if batch.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    let mut total = 0.0;
    for (x, target) in batch {
        let (output, _) = forward_sequence(spec, params, x)?;
        total += loss_and_logit_grad(spec, loss, &output, *target)?.0;
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::cell::{lstm_cell_forward, LstmState};
    use crate::neural::spec::LayerKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(rng: &mut impl Rng, t: usize, f: usize) -> Vec<Vec<f64>> {
        (0..t).map(|_| (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn zero_params_give_head_bias() {
        let spec = NetworkSpec::stacked(LayerKind::Lstm, 3, 2, HeadKind::Linear, 4, 2);
        let mut p = NetworkParams::zeros(&spec);
        p.head.b = vec![7.5];
        let x = seq(&mut ChaCha8Rng::seed_from_u64(0), 4, 2);
        assert_eq!(forward_sequence(&spec, &p, &x).unwrap().0, Output::Value(7.5));

        let spec = NetworkSpec::stacked(LayerKind::Rnn, 3, 1, HeadKind::Softmax, 4, 2);
        let p = NetworkParams::zeros(&spec);
        assert_eq!(forward_sequence(&spec, &p, &x).unwrap().0, Output::Probs(vec![0.5, 0.5]));
    }

    #[test]
    fn stacked_lstm_is_composition_of_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = NetworkSpec::stacked(LayerKind::Lstm, 3, 2, HeadKind::Linear, 4, 2);
        let p = NetworkParams::init(&spec, &mut rng);
        let x = seq(&mut rng, 4, 2);
        let (LayerParams::Lstm(l0), LayerParams::Lstm(l1)) = (&p.layers[0], &p.layers[1]) else { panic!() };
        let (mut s0, mut s1) = (LstmState::zeros(3), LstmState::zeros(3));
        for xt in &x {
            s0 = lstm_cell_forward(l0, xt, &s0).unwrap();
            s1 = lstm_cell_forward(l1, &s0.a, &s1).unwrap();
        }
        let expected = p.head.b[0] + dot(p.head.w.row(0), &s1.a);
        assert_eq!(forward_sequence(&spec, &p, &x).unwrap().0, Output::Value(expected));
    }

    #[test]
    fn wrong_length_is_a_shape_error() {
        let spec = NetworkSpec::stacked(LayerKind::Rnn, 2, 1, HeadKind::Linear, 4, 1);
        let p = NetworkParams::zeros(&spec);
        assert!(matches!(forward_sequence(&spec, &p, &[vec![0.0]]), Err(NeuralError::ShapeMismatch(_))));
    }

    #[test]
    fn identical_batch_matches_single_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = NetworkSpec::stacked(LayerKind::Lstm, 3, 2, HeadKind::Linear, 5, 2);
        let p = NetworkParams::init(&spec, &mut rng);
        let x = seq(&mut rng, 5, 2);
        let one = [(&x[..], Target::Value(3.0))];
        let many = vec![(&x[..], Target::Value(3.0)); 4];
        let (l1, g1) = backprop_through_time(&spec, &p, &one, LossKind::Mae).unwrap();
        let (l4, g4) = backprop_through_time(&spec, &p, &many, LossKind::Mae).unwrap();
        assert!((l1 - l4).abs() < 1e-12);
        for (a, b) in g1.flatten().iter().zip(g4.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_fit_has_zero_head_gradient() {
        // Zero weights: every activation is 0, so the linear head outputs its bias.
        let spec = NetworkSpec::stacked(LayerKind::Rnn, 4, 1, HeadKind::Linear, 3, 2);
        let mut p = NetworkParams::zeros(&spec);
        p.head.b = vec![2.0];
        let x = seq(&mut ChaCha8Rng::seed_from_u64(1), 3, 2);
        let (l, g) = backprop_through_time(&spec, &p, &[(&x[..], Target::Value(2.0))], LossKind::Mae).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.head.w.data.iter().chain(&g.head.b).all(|v| *v == 0.0));
    }
}
