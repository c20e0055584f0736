use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

static TOTAL_STEPS: AtomicU64 = AtomicU64::new(0);

/// Adam updates applied by every optimizer in this process so far.
pub fn total_steps() -> u64 {
    TOTAL_STEPS.load(Ordering::Relaxed)
}

/// Bias-corrected Adam state for one parameter set.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// One update of `params` from `grads`. Nothing is modified on error.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} tensors", self.m.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if !p.same_shape(g) || !p.same_shape(&self.m[i]) {
                return Err(Error::shape(
                    "adam_step",
                    format!("{:?}", self.m[i].shape()),
                    format!("param {:?} grad {:?}", p.shape(), g.shape()),
                ));
            }
            g.ensure_finite("adam gradient")?;
        }

        self.step += 1;
        TOTAL_STEPS.fetch_add(1, Ordering::Relaxed);
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv.f64();
                let mn = beta1 * mv.f64() + (1.0 - beta1) * gv;
                let vn = beta2 * vv.f64() + (1.0 - beta2) * gv * gv;
                *mv = T::of(mn);
                *vv = T::of(vn);
                let mhat = mn / bc1;
                let vhat = vn / bc2;
                *pv = T::of(pv.f64() - lr * mhat / (vhat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![Tensor::<f64>::vector(vec![1.0, -2.0])];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        st.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(st.step_count(), 1);

        st.step(&mut p, &[Tensor::vector(vec![1.0, 1.0])]).unwrap();
        let m = st.first_moments()[0].data()[0];
        let v = st.second_moments()[0].data()[0];
        st.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        assert!((st.first_moments()[0].data()[0] - 0.9 * m).abs() < 1e-15);
        assert!((st.second_moments()[0].data()[0] - 0.999 * v).abs() < 1e-15);
        assert_eq!(st.step_count(), 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut st = AdamState::new(AdamConfig::with_lr(0.01), &p);
        st.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        // m̂ = 1, v̂ = 1 ⇒ Δ = lr / (1 + eps)
        assert!((p[0].data()[0] - 0.99).abs() < 1e-9);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn two_steps_decrease_quadratic() {
        let f = |x: f64| x * x;
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut st = AdamState::new(AdamConfig::with_lr(0.01), &p);
        for _ in 0..2 {
            let g = Tensor::scalar(2.0 * p[0].data()[0]);
            st.step(&mut p, &[g]).unwrap();
        }
        assert!(f(p[0].data()[0]) < f(1.0));
    }

    #[test]
    fn rejects_shape_mismatch_and_nan() {
        let mut p = vec![Tensor::<f32>::zeros(&[2])];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        assert!(st.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
        assert!(st.step(&mut p, &[Tensor::vector(vec![f32::NAN, 0.0])]).is_err());
        assert_eq!(st.step_count(), 0);
    }
}
