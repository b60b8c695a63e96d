use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::model::ParamStore;
use crate::tensor::{Float, Tensor};

/// Adam moment coefficients and stabiliser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .ids()
                .map(|id| Tensor::zeros(params.get(id).shape()))
                .collect()
        };
        AdamState {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn matches(&self, params: &ParamStore<T>) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .ids()
                .zip(self.m.iter().zip(&self.v))
                .all(|(id, (m, v))| {
                    m.shape() == params.get(id).shape() && v.shape() == params.get(id).shape()
                })
    }
}

/// One bias-corrected Adam update. Nothing is modified when any gradient is
/// non-finite. `grads[i] = None` means a zero gradient.
pub fn adam_step<T: Float>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || !state.matches(params) {
        return Err(TrainError::InvalidConfig(
            "optimizer state does not match the parameters".into(),
        ));
    }
    for (id, g) in params.ids().zip(grads) {
        if let Some(g) = g {
            if g.shape() != params.get(id).shape() {
                return Err(TrainError::InvalidConfig(format!(
                    "gradient shape mismatch for {}",
                    params.name(id)
                )));
            }
            if !g.all_finite() {
                return Err(TrainError::NonFiniteGrad(params.name(id).to_string()));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let md = m.data_mut();
        let vd = v.data_mut();
        match &grads[i] {
            Some(g) => {
                for ((mi, vi), &gi) in md.iter_mut().zip(vd.iter_mut()).zip(g.data()) {
                    let gi = gi.as_f64();
                    *mi = T::of(b1 * mi.as_f64() + (1.0 - b1) * gi);
                    *vi = T::of(b2 * vi.as_f64() + (1.0 - b2) * gi * gi);
                }
            }
            None => {
                for (mi, vi) in md.iter_mut().zip(vd.iter_mut()) {
                    *mi = T::of(b1 * mi.as_f64());
                    *vi = T::of(b2 * vi.as_f64());
                }
            }
        }
        let p = params.get_mut(id);
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(md.iter()).zip(vd.iter()) {
            let mhat = mi.as_f64() / c1;
            let vhat = vi.as_f64() / c2;
            *pi = T::of(pi.as_f64() - lr * mhat / (vhat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::WeightInit;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new(0);
        s.add(
            "a",
            &[3],
            WeightInit::He {
                fan_in: 3,
                scale: 1.0,
            },
        )
        .unwrap();
        s.add(
            "b",
            &[2, 2],
            WeightInit::He {
                fan_in: 2,
                scale: 1.0,
            },
        )
        .unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let grads: Vec<_> = p
            .ids()
            .map(|id| Some(Tensor::full(p.get(id).shape(), 1.0)))
            .collect();
        adam_step(&mut p, &grads, &mut st, &AdamConfig::default(), 1e-4).unwrap();
        for id in p.ids() {
            for (a, b) in p.get(id).data().iter().zip(before.get(id).data()) {
                let want = -1e-4 / (1.0 + 1e-8);
                assert!(((a - b) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let grads: Vec<_> = p
            .ids()
            .map(|id| Some(Tensor::zeros(p.get(id).shape())))
            .collect();
        for _ in 0..3 {
            adam_step(&mut p, &grads, &mut st, &AdamConfig::default(), 1e-3).unwrap();
        }
        adam_step(&mut p, &[None, None], &mut st, &AdamConfig::default(), 1e-3).unwrap();
        for id in p.ids() {
            assert_eq!(p.get(id), before.get(id));
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_change() {
        let mut p = store();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let grads = vec![
            Some(Tensor::full(&[3], 1.0)),
            Some(Tensor::full(&[2, 2], f64::NAN)),
        ];
        assert!(matches!(
            adam_step(&mut p, &grads, &mut st, &AdamConfig::default(), 1e-3),
            Err(TrainError::NonFiniteGrad(n)) if n == "b"
        ));
        assert_eq!(st.t, 0);
        for id in p.ids() {
            assert_eq!(p.get(id), before.get(id));
        }
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut p = store();
            let mut st = AdamState::new(&p);
            for k in 0..5 {
                let grads: Vec<_> = p
                    .ids()
                    .map(|id| Some(p.get(id).map(|v| v * 0.3 + k as f64 * 0.01)))
                    .collect();
                adam_step(&mut p, &grads, &mut st, &AdamConfig::default(), 1e-2).unwrap();
            }
            p.ids().map(|id| p.get(id).clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
