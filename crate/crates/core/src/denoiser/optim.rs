use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};

/// Denominator guard in the adaptive step.
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step_count: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay, applied in place.
///
/// Nothing is modified if any gradient is non-finite.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(Error::invalid(format!(
            "adamw_step: params {n}, grads {}, moments {}/{}",
            grads.len(),
            state.first_moment.len(),
            state.second_moment.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(
            "adamw_step",
            format!("gradient at index {i} is {}", grads[i]),
        ));
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for i in 0..n {
        let g = grads[i];
        let m = b1 * state.first_moment[i] + (1.0 - b1) * g;
        let v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        params[i] -= cfg.learning_rate * (m_hat / (v_hat.sqrt() + ADAM_EPS) + cfg.weight_decay * params[i]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = vec![0.3, -1.2, 4.0];
        let mut st = OptimizerState::new(3);
        adamw_step(&mut p, &[0.0; 3], &mut st, &cfg).unwrap();
        assert_eq!(p, vec![0.3, -1.2, 4.0]);
        assert!(st.first_moment.iter().all(|&m| m == 0.0));
        assert!(st.second_moment.iter().all(|&v| v == 0.0));
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = vec![0.0];
        let mut st = OptimizerState::new(1);
        adamw_step(&mut p, &[1.0], &mut st, &cfg).unwrap();
        let expected = -1e-4 / (1.0 + ADAM_EPS);
        assert!((p[0] - expected).abs() < 1e-16);
    }

    #[test]
    fn decoupled_decay_alone() {
        let cfg = TrainConfig::default();
        let mut p = vec![1.0];
        let mut st = OptimizerState::new(1);
        adamw_step(&mut p, &[0.0], &mut st, &cfg).unwrap();
        assert!((p[0] - (1.0 - 1e-7)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_index_and_leaves_state() {
        let cfg = TrainConfig::default();
        let mut p = vec![1.0, 2.0, 3.0];
        let mut st = OptimizerState::new(3);
        let err = adamw_step(&mut p, &[0.1, f64::NAN, 0.0], &mut st, &cfg).unwrap_err();
        assert!(err.to_string().contains("index 1"));
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
        assert_eq!(st.step_count, 0);
    }
}
