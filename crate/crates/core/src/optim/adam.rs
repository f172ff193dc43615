use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor_graph::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the joint gradient to at most this L2 norm. Off by default.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .unzip();
        Self { config, m, v, t: 0 }
    }

    /// One bias-corrected update. `names` label parameters in errors.
    pub fn step(
        &mut self,
        params: &mut [&mut Matrix<T>],
        grads: &[Matrix<T>],
        names: &[String],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::State(format!(
                "adam tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.shape() != g.shape() || g.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: names.get(k).cloned().unwrap_or_else(|| format!("#{k}")),
                });
            }
        }
        let scale = match self.config.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|x| x.as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powf(self.t as f64));
        let bc2 = T::of(1.0 - c.beta2.powf(self.t as f64));
        let (lr, eps, scale) = (T::of(c.lr), T::of(c.eps), T::of(scale));
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((theta, &gi), (mi, vi)) in it {
                let gi = gi * scale;
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f64) -> Matrix<f64> {
        Matrix::scalar(value)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [1.0, -3.0, 1e-3, 250.0] {
            let mut s = AdamState::<f64>::new(AdamConfig::default(), [(1, 1)]);
            let mut p = one(2.0);
            s.step(&mut [&mut p], &[one(g)], &["p".into()]).unwrap();
            let delta = p.get(0, 0) - 2.0;
            assert!(
                (delta + 0.0005 * g.signum()).abs() < 1e-8 * g.abs().recip().max(1.0),
                "{g}: {delta}"
            );
        }
        let mut s = AdamState::<f64>::new(AdamConfig::default(), [(1, 1)]);
        let mut p = one(0.0);
        s.step(&mut [&mut p], &[one(1.0)], &["p".into()]).unwrap();
        assert!((p.get(0, 0) + 0.0005 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = AdamState::<f64>::new(AdamConfig::default(), [(2, 2)]);
        let mut p = Matrix::from_rows(&[&[1.0, -2.0], &[3.0, 0.5]]);
        let before = p.clone();
        for _ in 0..5 {
            s.step(&mut [&mut p], &[Matrix::zeros(2, 2)], &["p".into()])
                .unwrap();
        }
        assert_eq!(p, before);
        assert!(s.v.iter().flat_map(|v| v.data()).all(|&x| x >= 0.0));
    }

    #[test]
    fn update_opposes_first_moment() {
        let mut s = AdamState::<f64>::new(AdamConfig::default(), [(1, 3)]);
        let mut p = Matrix::zeros(1, 3);
        for g in [[1.0, -1.0, 0.5], [0.2, -3.0, -0.1], [-0.4, 2.0, 0.3]] {
            let before = p.clone();
            s.step(&mut [&mut p], &[Matrix::row_vector(&g)], &["p".into()])
                .unwrap();
            for k in 0..3 {
                let d = p.get(0, k) - before.get(0, k);
                assert_eq!(d.signum(), -s.m[0].get(0, k).signum());
            }
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = AdamState::<f64>::new(AdamConfig::default(), [(1, 1), (1, 1)]);
        let (mut a, mut b) = (one(0.0), one(0.0));
        let err = s
            .step(
                &mut [&mut a, &mut b],
                &[one(1.0), one(f64::NAN)],
                &["a".into(), "head.out.b".into()],
            )
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref param } if param == "head.out.b"));
        assert_eq!(s.t, 0);
        assert_eq!(a.get(0, 0), 0.0);
    }

    #[test]
    fn clipping_bounds_the_moment() {
        let cfg = AdamConfig {
            clip_norm: Some(1.0),
            ..AdamConfig::default()
        };
        let mut s = AdamState::<f64>::new(cfg, [(1, 2)]);
        let mut p = Matrix::zeros(1, 2);
        s.step(
            &mut [&mut p],
            &[Matrix::row_vector(&[30.0, 40.0])],
            &["p".into()],
        )
        .unwrap();
        assert!((s.m[0].get(0, 0) - 0.1 * 0.6).abs() < 1e-12);
        assert!((s.m[0].get(0, 1) - 0.1 * 0.8).abs() < 1e-12);
    }
}
