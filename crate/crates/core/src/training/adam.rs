use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore};

/// Moment estimates of the Adam optimizer, one pair per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update from the gradients stored in `store`.
///
/// ```
/// use helo::numerics::{Matrix, ParamStore};
/// use helo::training::{adam_step, AdamState};
/// let mut store = ParamStore::new();
/// store.add("theta", Matrix::zeros(1, 1));
/// store.iter_mut().next().unwrap().grad = Matrix::filled(1, 1, 1.0);
/// let mut state = AdamState::new(&store);
/// adam_step(&mut store, &mut state, 1e-3).unwrap();
/// let theta = store.iter().next().unwrap().value.get(0, 0);
/// assert!((theta + 1e-3).abs() < 1e-8);
/// ```
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::Validation(format!(
            "optimizer tracks {} parameters, model has {}",
            state.m.len(),
            store.len()
        )));
    }
    for ((p, m), v) in store.iter().zip(&state.m).zip(&state.v) {
        if p.value.shape() != m.shape() || p.value.shape() != v.shape() || p.grad.shape() != p.value.shape() {
            return Err(Error::Validation(format!("optimizer moments of {:?} do not match its shape", p.name)));
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let values = p.value.as_mut_slice();
        for (((x, &g), m), v) in values
            .iter_mut()
            .zip(p.grad.as_slice())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]));
        s.add("b", Matrix::from_rows(&[[0.25]]));
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store();
        let mut st = AdamState::new(&s);
        for _ in 0..5 {
            adam_step(&mut s, &mut st, 1e-3).unwrap();
        }
        assert_eq!(s.iter().map(|p| p.value.clone()).collect::<Vec<_>>(), store().iter().map(|p| p.value.clone()).collect::<Vec<_>>());
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        s.add("t", Matrix::zeros(1, 1));
        s.iter_mut().next().unwrap().grad = Matrix::filled(1, 1, 1.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 1e-3).unwrap();
        let x = s.iter().next().unwrap().value.get(0, 0);
        assert!((x + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut s = store();
        for p in s.iter_mut() {
            p.grad = p.value.scale(3.0);
        }
        let before: Vec<Matrix> = s.iter().map(|p| p.value.clone()).collect();
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 0.0).unwrap();
        let after: Vec<Matrix> = s.iter().map(|p| p.value.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn repeated_runs_are_bitwise_equal() {
        let run = || {
            let mut s = store();
            let mut st = AdamState::new(&s);
            for k in 0..10 {
                for p in s.iter_mut() {
                    p.grad = p.value.map(|x| (x * (k as f64 + 1.0)).sin());
                }
                adam_step(&mut s, &mut st, 1e-2).unwrap();
            }
            s.iter().flat_map(|p| p.value.as_slice().to_vec()).map(f64::to_bits).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_drift_is_detected() {
        let mut s = store();
        let mut st = AdamState::new(&s);
        st.m[0] = Matrix::zeros(3, 3);
        assert!(adam_step(&mut s, &mut st, 1e-3).is_err());
        st.m.pop();
        assert!(adam_step(&mut s, &mut st, 1e-3).is_err());
    }
}
