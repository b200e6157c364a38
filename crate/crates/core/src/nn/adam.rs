use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate: T::lit(learning_rate),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }
}

impl<T: Scalar> Default for AdamConfig<T> {
    fn default() -> Self {
        Self::with_learning_rate(1e-3)
    }
}

/// Adam moments for an ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig<T>,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig<T>, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// One bias-corrected update of every tensor. A `false` mask entry freezes
    /// that parameter (its moments stay untouched as well).
    pub fn step(
        &mut self,
        params: &mut [&mut [T]],
        grads: &[&[T]],
        masks: &[Option<&[bool]>],
    ) -> Result<()> {
        if params.len() != self.first.len()
            || grads.len() != params.len()
            || masks.len() != params.len()
        {
            return Err(Error::shape(
                format!("{} parameter tensors", self.first.len()),
                format!(
                    "{} params / {} grads / {} masks",
                    params.len(),
                    grads.len(),
                    masks.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let n = self.first[i].len();
            if p.len() != n || g.len() != n || masks[i].is_some_and(|m| m.len() != n) {
                return Err(Error::shape(format!("tensor {i} with {n} values"), p.len()));
            }
        }
        self.step += 1;
        let cfg = self.config;
        let t = self.step as i32;
        let c1 = T::one() - cfg.beta1.powi(t);
        let c2 = T::one() - cfg.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let g = grads[i];
            let mask = masks[i];
            for j in 0..p.len() {
                if mask.is_some_and(|mk| !mk[j]) {
                    continue;
                }
                m[j] = cfg.beta1 * m[j] + (T::one() - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (T::one() - cfg.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] = p[j] - cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(g: f64, mask: Option<&[bool]>) -> f64 {
        let mut s = AdamState::new(AdamConfig::<f64>::default(), &[1]);
        let mut p = [0.0];
        s.step(&mut [&mut p], &[&[g]], &[mask]).unwrap();
        p[0]
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        assert!((one_step(1.0, None) + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        assert_eq!(one_step(0.0, None), 0.0);
    }

    #[test]
    fn masked_parameter_is_frozen() {
        assert_eq!(one_step(5.0, Some(&[false])), 0.0);
    }

    #[test]
    fn invariant_to_gradient_scale() {
        let a = one_step(0.37, None);
        let b = one_step(370.0, None);
        assert!(((a - b) / a).abs() < 1e-6);
    }

    #[test]
    fn step_counter_and_shape_checks() {
        let mut s = AdamState::new(AdamConfig::<f32>::default(), &[2]);
        let mut p = [1.0f32, 2.0];
        s.step(&mut [&mut p], &[&[0.1, 0.2]], &[None]).unwrap();
        assert_eq!(s.step, 1);
        assert!(s.step(&mut [&mut p], &[&[0.1]], &[None]).is_err());
    }
}
