use serde::{Deserialize, Serialize};

use super::NeuralError;

/// Probabilities are clamped to `[CCE_EPS, 1 − CCE_EPS]` before the log.
pub const CCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Mean absolute error, for the linear head.
    Mae,
    /// Categorical cross-entropy, for the softmax head.
    Cce,
}

pub fn mae_loss(y: &[f64], y_hat: &[f64]) -> Result<f64, NeuralError> {
    if y.len() != y_hat.len() {
        return Err(NeuralError::LengthMismatch {
            left: y.len(),
            right: y_hat.len(),
        });
    }
    if y.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

fn check_distribution(label: &[f64], p: &[f64]) -> Result<(), NeuralError> {
    if label.len() != p.len() || p.is_empty() {
        return Err(NeuralError::LengthMismatch {
            left: label.len(),
            right: p.len(),
        });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(NeuralError::BadDistribution(format!("probabilities {p:?} do not form a distribution")));
    }
    Ok(())
}

/// `−Σ label · ln(clamp(p))`
pub fn cce_loss(label: &[f64], p: &[f64]) -> Result<f64, NeuralError> {
    Ok(cce_loss_grad(label, p, CCE_EPS)?.0)
}

/// Loss and its gradient with respect to `p`; clamped entries get zero gradient.
pub(crate) fn cce_loss_grad(label: &[f64], p: &[f64], eps: f64) -> Result<(f64, Vec<f64>), NeuralError> {
    check_distribution(label, p)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for ((l, pk), g) in label.iter().zip(p).zip(&mut grad) {
        let clamped = pk.clamp(eps, 1.0 - eps);
        loss -= l * clamped.ln();
        if clamped == *pk {
            *g = -l / pk;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        assert_eq!(mae_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae_loss(&[1800.0], &[1810.0]).unwrap(), 10.0);
        assert_eq!(mae_loss(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.5);
        assert!(matches!(mae_loss(&[1.0], &[]), Err(NeuralError::LengthMismatch { .. })));
    }

    #[test]
    fn cce_examples() {
        assert!(cce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-11);
        assert!((cce_loss(&[0.0, 1.0], &[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((cce_loss(&[0.0, 1.0], &[0.8, 0.2]).unwrap() - 1.6094).abs() < 1e-4);
        assert!(matches!(cce_loss(&[1.0, 0.0], &[0.7, 0.7]), Err(NeuralError::BadDistribution(_))));
    }
}
