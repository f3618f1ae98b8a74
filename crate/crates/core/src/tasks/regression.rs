//! Linear least squares on a small, overfit-prone training split. The one
//! hyperparameter, `sigma`, is the magnitude of Gaussian noise added to the
//! training inputs at every update; it plays the role of augmentation
//! strength. Selection uses a dedicated validation split, and a larger
//! held-out split is logged separately for reporting.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{decode_f64s, encode_f64s, param, Evaluation, TaskDefaults, Trainable};
use crate::error::{Error, Result};
use crate::hparam::{HyperparamSpec, HyperparamVector, SearchSpace};
use crate::PbtRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionOptions {
    pub dim: usize,
    pub n_train: usize,
    pub n_select: usize,
    pub n_report: usize,
    /// Standard deviation of the label noise.
    pub label_noise: f64,
    pub learning_rate: f64,
    pub sigma_init: f64,
    pub sigma_max: f64,
    pub sigma_deltas: Vec<f64>,
}

impl Default for RegressionOptions {
    fn default() -> Self {
        TaskDefaults::get().regression.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    /// Row-major `n x dim` inputs.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Split {
    fn len(&self) -> usize {
        self.y.len()
    }

    fn mse(&self, w: &[f64]) -> f64 {
        let dim = w.len();
        let sse: f64 = self
            .y
            .iter()
            .enumerate()
            .map(|(i, y)| {
                let pred: f64 = self.x[i * dim..(i + 1) * dim]
                    .iter()
                    .zip(w)
                    .map(|(a, b)| a * b)
                    .sum();
                (pred - y).powi(2)
            })
            .sum();
        sse / self.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionData {
    pub true_weights: Vec<f64>,
    pub train: Split,
    pub select: Split,
    pub report: Split,
}

impl RegressionData {
    pub fn generate(o: &RegressionOptions, seed: u64) -> Self {
        let mut rng = PbtRng::seed_from_u64(seed);
        let normal = |rng: &mut PbtRng| -> f64 { StandardNormal.sample(rng) };
        let true_weights: Vec<f64> = (0..o.dim).map(|_| normal(&mut rng)).collect();
        let mut split = |n: usize| {
            let x: Vec<f64> = (0..n * o.dim).map(|_| normal(&mut rng)).collect();
            let y = (0..n)
                .map(|i| {
                    let clean: f64 = x[i * o.dim..(i + 1) * o.dim]
                        .iter()
                        .zip(&true_weights)
                        .map(|(a, b)| a * b)
                        .sum();
                    clean + o.label_noise * normal(&mut rng)
                })
                .collect();
            Split { x, y }
        };
        let train = split(o.n_train);
        let select = split(o.n_select);
        let report = split(o.n_report);
        Self {
            true_weights,
            train,
            select,
            report,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegressionTask {
    pub options: RegressionOptions,
    pub data: RegressionData,
}

impl RegressionTask {
    pub fn new(options: RegressionOptions, seed: u64) -> Result<Self> {
        if options.dim == 0
            || options.n_train == 0
            || options.n_select == 0
            || options.n_report == 0
        {
            return Err(Error::Config(
                "regression splits and dim must be non-empty".into(),
            ));
        }
        let data = RegressionData::generate(&options, seed);
        Ok(Self { options, data })
    }

    pub fn sigma_grid(&self, points: usize) -> Vec<f64> {
        let max = self.options.sigma_max;
        (0..points)
            .map(|i| max * i as f64 / (points - 1).max(1) as f64)
            .collect()
    }

    fn fail(reason: &str) -> Error {
        Error::Task {
            task: "regression".into(),
            reason: reason.into(),
        }
    }
}

impl Trainable for RegressionTask {
    type State = Vec<f64>;

    fn name(&self) -> &'static str {
        "regression"
    }

    fn search_space(&self) -> SearchSpace {
        let o = &self.options;
        SearchSpace::new(vec![HyperparamSpec::new(
            "sigma",
            o.sigma_init,
            0.0,
            o.sigma_max,
            &o.sigma_deltas,
        )])
        .expect("regression search space")
    }

    fn required_params(&self) -> &'static [&'static str] {
        &["sigma"]
    }

    fn init_state(&self, _rng: &mut PbtRng) -> Vec<f64> {
        vec![0.0; self.options.dim]
    }

    fn train(
        &self,
        state: &Vec<f64>,
        h: &HyperparamVector,
        num_updates: usize,
        rng: &mut PbtRng,
    ) -> Result<Vec<f64>> {
        let sigma = param("regression", h, "sigma")?;
        let dim = self.options.dim;
        if state.len() != dim {
            return Err(Self::fail("state has wrong dimension"));
        }
        let train = &self.data.train;
        let n = train.len();
        let lr = self.options.learning_rate;
        let mut w = state.clone();
        let mut grad = vec![0.0; dim];
        let mut xi = vec![0.0; dim];
        for _ in 0..num_updates {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for i in 0..n {
                let row = &train.x[i * dim..(i + 1) * dim];
                for (dst, src) in xi.iter_mut().zip(row) {
                    let eps: f64 = if sigma > 0.0 {
                        StandardNormal.sample(rng)
                    } else {
                        0.0
                    };
                    *dst = src + sigma * eps;
                }
                let residual: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - train.y[i];
                for (g, x) in grad.iter_mut().zip(&xi) {
                    *g += 2.0 * residual * x / n as f64;
                }
            }
            for (wj, g) in w.iter_mut().zip(&grad) {
                *wj -= lr * g;
            }
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Self::fail("weights diverged"));
        }
        Ok(w)
    }

    fn evaluate(&self, w: &Vec<f64>) -> Evaluation {
        let selection = self.data.select.mse(w);
        let metrics = [
            ("train".to_string(), self.data.train.mse(w)),
            ("selection".to_string(), selection),
            ("reporting".to_string(), self.data.report.mse(w)),
        ]
        .into_iter()
        .collect();
        Evaluation {
            loss: selection,
            metrics,
        }
    }

    fn serialize_state(&self, w: &Vec<f64>) -> Vec<u8> {
        encode_f64s(w)
    }

    fn deserialize_state(&self, bytes: &[u8]) -> Result<Vec<f64>> {
        let w = decode_f64s("regression", bytes)?;
        if w.len() != self.options.dim {
            return Err(Self::fail("state blob has wrong dimension"));
        }
        Ok(w)
    }

    fn dataset(&self) -> Option<serde_json::Value> {
        serde_json::to_value(&self.data).ok()
    }
}
