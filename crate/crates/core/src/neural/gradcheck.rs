//! Central finite differences against the analytic BPTT gradient.

use super::loss::LossKind;
use super::network::{backprop_through_time, batch_loss, Target};
use super::spec::{NetworkParams, NetworkSpec};
use super::NeuralError;

/// `|g_a − g_n| / max(|g_a|, |g_n|, 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Largest relative error over every parameter, perturbing each by ±`eps`.
pub fn finite_difference_check(
    spec: &NetworkSpec,
    params: &NetworkParams,
    example: (&[Vec<f64>], Target),
    loss: LossKind,
    eps: f64,
) -> Result<f64, NeuralError> {
    let batch = [example];
    let (_, grads) = backprop_through_time(spec, params, &batch, loss)?;
    let analytic = grads.flatten();
    let mut flat = params.flatten();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + eps;
        probe.assign_flat(&flat)?;
        let up = batch_loss(spec, &probe, &batch, loss)?;
        flat[i] = orig - eps;
        probe.assign_flat(&flat)?;
        let down = batch_loss(spec, &probe, &batch, loss)?;
        flat[i] = orig;
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::spec::{HeadKind, LayerKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn case(kind: LayerKind, depth: usize, head: HeadKind, seed: u64) -> (NetworkSpec, NetworkParams, Vec<Vec<f64>>, Target) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = NetworkSpec::stacked(kind, 4, depth, head, 8, 3);
        let params = NetworkParams::init(&spec, &mut rng);
        let x = (0..8).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let target = match head {
            HeadKind::Linear => Target::Value(5.0),
            HeadKind::Softmax => Target::Class(1),
        };
        (spec, params, x, target)
    }

    #[test]
    fn two_layer_lstm_matches_finite_differences() {
        let (spec, params, x, t) = case(LayerKind::Lstm, 2, HeadKind::Linear, 1);
        let err = finite_difference_check(&spec, &params, (&x, t), LossKind::Mae, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_params_have_guarded_errors() {
        let (spec, _, x, t) = case(LayerKind::Rnn, 2, HeadKind::Softmax, 2);
        let err = finite_difference_check(&spec, &NetworkParams::zeros(&spec), (&x, t), LossKind::Cce, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn larger_step_is_less_accurate() {
        let (spec, params, x, t) = case(LayerKind::Lstm, 1, HeadKind::Softmax, 3);
        let coarse = finite_difference_check(&spec, &params, (&x, t), LossKind::Cce, 1e-3).unwrap();
        let fine = finite_difference_check(&spec, &params, (&x, t), LossKind::Cce, 1e-5).unwrap();
        assert!(coarse > fine, "{coarse} vs {fine}");
    }
}
