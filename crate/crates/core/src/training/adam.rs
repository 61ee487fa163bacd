use serde::{Deserialize, Serialize};

use crate::nets::{ParamStore, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates. Non-trainable tensors
/// (batch-norm running statistics) are skipped.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new<T: Scalar>(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.values.len()]).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>]) {
        self.steps += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, tensor) in params.tensors.iter_mut().enumerate() {
            if !tensor.trainable {
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in tensor.values.iter_mut().enumerate() {
                let g = grads[i][j].to_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let update = learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + epsilon);
                *w = T::from_f64(w.to_f64() - update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ParamTensor;

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut store = ParamStore {
            tensors: vec![
                ParamTensor {
                    name: "w".into(),
                    shape: vec![2],
                    values: vec![1.0f64, 1.0],
                    trainable: true,
                },
                ParamTensor {
                    name: "stat".into(),
                    shape: vec![1],
                    values: vec![5.0],
                    trainable: false,
                },
            ],
        };
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[vec![0.5, -2.0], vec![1.0]]);
        let w = &store.tensors[0].values;
        assert!((w[0] - (1.0 - 1e-4)).abs() < 1e-9);
        assert!((w[1] - (1.0 + 1e-4)).abs() < 1e-9);
        assert_eq!(store.tensors[1].values, vec![5.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore {
            tensors: vec![ParamTensor {
                name: "x".into(),
                shape: vec![1],
                values: vec![3.0f64],
                trainable: true,
            }],
        };
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..2000 {
            let x = store.tensors[0].values[0];
            adam.step(&mut store, &[vec![2.0 * (x - 1.0)]]);
        }
        assert!((store.tensors[0].values[0] - 1.0).abs() < 1e-2);
    }
}
