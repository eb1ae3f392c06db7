//! Finite-difference check of backpropagation through time for RNN and LSTM
//! stacks with regression and classification heads.
//!
//!     cargo run --release --example gradient_check

use coldchain::neural::{finite_difference_check, HeadKind, LayerKind, LossKind, NetworkParams, NetworkSpec, Target};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (hidden, features, steps) = (6, 3, 10);
    println!("layers  depth  head     eps=1e-4   eps=1e-5   eps=1e-6");
    for kind in [LayerKind::Rnn, LayerKind::Lstm] {
        for depth in [1, 2] {
            for head in [HeadKind::Linear, HeadKind::Softmax] {
                let mut rng = ChaCha8Rng::seed_from_u64(depth as u64);
                let spec = NetworkSpec::stacked(kind, hidden, depth, head, steps, features);
                let params = NetworkParams::init(&spec, &mut rng);
                let x: Vec<Vec<f64>> = (0..steps).map(|_| (0..features).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
                let (target, loss) = match head {
                    HeadKind::Linear => (Target::Value(3.0), LossKind::Mae),
                    HeadKind::Softmax => (Target::Class(1), LossKind::Cce),
                };
                let errs = [1e-4, 1e-5, 1e-6]
                    .map(|eps| finite_difference_check(&spec, &params, (&x, target), loss, eps).map(|e| format!("{e:.2e}")));
                let [a, b, c] = errs;
                println!("{:<7} {depth:>5}  {:<7}  {:>9}  {:>9}  {:>9}", format!("{kind:?}"), format!("{head:?}"), a?, b?, c?);
            }
        }
    }
    println!("(max relative error over all parameters; tiny gradients are limited by f64 rounding)");
    Ok(())
}
