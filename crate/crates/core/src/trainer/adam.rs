use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::encoders::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter, plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient (unused or
/// frozen this step) are left untouched, moments included. A non-finite
/// gradient aborts before any parameter changes.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (id, g) in params.ids().zip(grads) {
        if let Some(bad) = g.as_ref().and_then(|g| g.iter().find(|x| !x.is_finite())) {
            return Err(TrainError::NonFiniteGradient {
                param: params.name(id).to_string(),
                value: *bad,
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (id, g) in ids.into_iter().zip(grads) {
        let Some(g) = g else { continue };
        let i = id.index();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = params.get_mut(id).data_mut();
        for k in 0..p.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            p[k] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.add("w", Tensor::row(vec![v]));
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Some(vec![0.5])], &mut st, 1e-3, &AdamConfig::default()).unwrap();
        let delta = p.get(p.id("w").unwrap()).data()[0] - 1.0;
        assert!((delta + 1e-3).abs() < 1e-10, "{delta}");
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = store(2.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Some(vec![0.0])], &mut st, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(p.get(p.id("w").unwrap()).data()[0], 2.0);
        st.m[0][0] = 0.4;
        st.v[0][0] = 0.0;
        let mut q = p.clone();
        adam_step(&mut q, &[Some(vec![0.0])], &mut st, 0.0, &AdamConfig::default()).unwrap();
        assert!((st.m[0][0] - 0.36).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = store(0.0);
        let mut st = AdamState::new(&p);
        match adam_step(&mut p, &[Some(vec![f64::NAN])], &mut st, 1e-3, &AdamConfig::default()) {
            Err(TrainError::NonFiniteGradient { param, .. }) => assert_eq!(param, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(st.t, 0);
    }

    #[test]
    fn missing_gradient_skips_the_parameter() {
        let mut p = store(3.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[None], &mut st, 1.0, &AdamConfig::default()).unwrap();
        assert_eq!(p.get(p.id("w").unwrap()).data()[0], 3.0);
    }
}
