//! Toy problem: maximize `Q(θ) = 1.2 - θ1² - θ2²` by gradient ascent on the
//! surrogate `1.2 - h1·θ1² - h2·θ2²`. The hyperparameters only scale the
//! surrogate's curvature, so they act as per-coordinate step sizes.

use serde::{Deserialize, Serialize};

use super::{decode_f64s, encode_f64s, param, Evaluation, TaskDefaults, Trainable};
use crate::error::{Error, Result};
use crate::hparam::{HyperparamSpec, HyperparamVector, SearchSpace};
use crate::PbtRng;

pub const Q_MAX: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticOptions {
    pub eta: f64,
    pub theta0: [f64; 2],
    pub h_init: f64,
    pub h_deltas: Vec<f64>,
}

impl Default for QuadraticOptions {
    fn default() -> Self {
        TaskDefaults::get().quadratic.clone()
    }
}

#[derive(Debug, Clone, Default)]
pub struct QuadraticTask {
    pub options: QuadraticOptions,
}

impl QuadraticTask {
    pub fn new(options: QuadraticOptions) -> Self {
        Self { options }
    }

    /// `Q(θ)`, the true objective.
    pub fn objective(theta: &[f64; 2]) -> f64 {
        Q_MAX - theta[0] * theta[0] - theta[1] * theta[1]
    }
}

impl Trainable for QuadraticTask {
    type State = [f64; 2];

    fn name(&self) -> &'static str {
        "quadratic"
    }

    fn search_space(&self) -> SearchSpace {
        let o = &self.options;
        SearchSpace::new(vec![
            HyperparamSpec::new("h1", o.h_init, 0.0, 1.0, &o.h_deltas),
            HyperparamSpec::new("h2", o.h_init, 0.0, 1.0, &o.h_deltas),
        ])
        .expect("quadratic search space")
    }

    fn required_params(&self) -> &'static [&'static str] {
        &["h1", "h2"]
    }

    fn init_state(&self, _rng: &mut PbtRng) -> [f64; 2] {
        self.options.theta0
    }

    fn train(
        &self,
        state: &[f64; 2],
        h: &HyperparamVector,
        num_updates: usize,
        _rng: &mut PbtRng,
    ) -> Result<[f64; 2]> {
        let scale = [param("quadratic", h, "h1")?, param("quadratic", h, "h2")?];
        let eta = self.options.eta;
        let mut theta = *state;
        for _ in 0..num_updates {
            for i in 0..2 {
                // d/dθi of (1.2 - h_i θi²)
                theta[i] += eta * (-2.0 * scale[i] * theta[i]);
            }
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Task {
                task: "quadratic".into(),
                reason: "θ diverged".into(),
            });
        }
        Ok(theta)
    }

    fn evaluate(&self, state: &[f64; 2]) -> Evaluation {
        Evaluation {
            loss: -Self::objective(state),
            metrics: Default::default(),
        }
    }

    fn serialize_state(&self, state: &[f64; 2]) -> Vec<u8> {
        encode_f64s(state)
    }

    fn deserialize_state(&self, bytes: &[u8]) -> Result<[f64; 2]> {
        let v = decode_f64s("quadratic", bytes)?;
        v.try_into().map_err(|v: Vec<f64>| Error::Task {
            task: "quadratic".into(),
            reason: format!("expected 2 parameters, got {}", v.len()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{grid_baseline, grid_product, Budget};
    use rand::SeedableRng;

    fn hv(a: f64, b: f64) -> HyperparamVector {
        [("h1", a), ("h2", b)].into_iter().collect()
    }

    #[test]
    fn zero_h_leaves_theta() {
        let task = QuadraticTask::default();
        let mut rng = PbtRng::seed_from_u64(0);
        let s = task.init_state(&mut rng);
        assert_eq!(task.train(&s, &hv(0.0, 0.0), 100, &mut rng).unwrap(), s);
    }

    #[test]
    fn optimum_loss() {
        let task = QuadraticTask::default();
        assert_eq!(task.evaluate(&[0.0, 0.0]).loss, -1.2);
    }

    #[test]
    fn matches_geometric_decay() {
        let task = QuadraticTask::default();
        let mut rng = PbtRng::seed_from_u64(0);
        let s = task
            .train(&[0.9, 0.9], &hv(1.0, 1.0), 100, &mut rng)
            .unwrap();
        let expected = 0.9 * (1.0f64 - 2.0 * 0.01).powi(100);
        assert!((s[0] - expected).abs() < 1e-12);
        let loss = task.evaluate(&s).loss;
        assert!((loss - (2.0 * expected * expected - 1.2)).abs() < 1e-12);
    }

    #[test]
    fn loss_non_increasing_for_fixed_h() {
        let task = QuadraticTask::default();
        let mut rng = PbtRng::seed_from_u64(0);
        for h in [hv(0.3, 0.9), hv(1.0, 0.1), hv(0.05, 0.05)] {
            let mut s = task.init_state(&mut rng);
            let mut prev = task.evaluate(&s).loss;
            for _ in 0..30 {
                s = task.train(&s, &h, 10, &mut rng).unwrap();
                let loss = task.evaluate(&s).loss;
                assert!(loss <= prev);
                prev = loss;
            }
        }
    }

    #[test]
    fn state_round_trip() {
        let task = QuadraticTask::default();
        let s = [0.123, -4.5];
        let back = task.deserialize_state(&task.serialize_state(&s)).unwrap();
        assert_eq!(back, s);
        assert_eq!(task.evaluate(&back), task.evaluate(&s));
    }

    #[test]
    fn grid_prefers_full_curvature() {
        let task = QuadraticTask::default();
        let axis = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let grid = grid_product(&[("h1", axis.clone()), ("h2", axis)]);
        let budget = Budget {
            steps: 40,
            updates_per_step: 10,
        };
        let points = grid_baseline(&task, &grid, budget, 0).unwrap();
        let best = points
            .iter()
            .min_by(|a, b| a.evaluation.loss.total_cmp(&b.evaluation.loss))
            .unwrap();
        assert_eq!(best.hparams, hv(1.0, 1.0));
        let expected = 2.0 * (0.9 * 0.98f64.powi(400)).powi(2) - 1.2;
        assert!((best.evaluation.loss - expected).abs() < 1e-12);
    }
}
