//! The trainable-task contract and desk-scale surrogate tasks.

use std::collections::BTreeMap;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hparam::{HyperparamVector, SearchSpace};
use crate::PbtRng;

mod defaults;
pub mod quadratic;
pub mod regression;
pub mod spectoy;

pub use defaults::{TaskDefaults, DEFAULTS_VERSION};
pub use quadratic::{QuadraticOptions, QuadraticTask};
pub use regression::{RegressionOptions, RegressionTask};
pub use spectoy::{SpecToyOptions, SpecToyTask};

/// Result of evaluating a model state. `loss` drives selection; `metrics`
/// carries any extra numbers worth logging. All of them are lower-is-better.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Evaluation {
    pub loss: f64,
    pub metrics: BTreeMap<String, f64>,
}

/// A model that can be trained in steps under a hyperparameter vector.
///
/// `train` must not modify its input state, and `evaluate` must be a pure
/// function of the state.
pub trait Trainable: Send + Sync {
    type State: Clone + Send + Sync;

    fn name(&self) -> &'static str;

    /// The space this task is tuned over unless a run config overrides it.
    fn search_space(&self) -> SearchSpace;

    /// Hyperparameter names `train` reads. A run's search space must cover them.
    fn required_params(&self) -> &'static [&'static str];

    fn init_state(&self, rng: &mut PbtRng) -> Self::State;

    fn train(
        &self,
        state: &Self::State,
        h: &HyperparamVector,
        num_updates: usize,
        rng: &mut PbtRng,
    ) -> Result<Self::State>;

    fn evaluate(&self, state: &Self::State) -> Evaluation;

    fn serialize_state(&self, state: &Self::State) -> Vec<u8>;

    fn deserialize_state(&self, bytes: &[u8]) -> Result<Self::State>;

    /// Synthetic data worth persisting next to a run, if any.
    fn dataset(&self) -> Option<serde_json::Value> {
        None
    }
}

pub(crate) fn param(task: &str, h: &HyperparamVector, name: &str) -> Result<f64> {
    h.get(name).ok_or_else(|| Error::Task {
        task: task.to_string(),
        reason: format!("missing hyperparameter `{name}`"),
    })
}

pub(crate) fn encode_f64s(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn decode_f64s(task: &str, bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Task {
            task: task.to_string(),
            reason: format!("state blob of {} bytes is not a list of f64", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Fixed training budget: `steps` training steps of `updates_per_step` updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub steps: u32,
    pub updates_per_step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub hparams: HyperparamVector,
    pub evaluation: Evaluation,
}

/// Trains one model from the initial state per grid point with the
/// hyperparameters held fixed, for the same budget a single lineage gets in
/// a population run.
pub fn grid_baseline<T: Trainable>(
    task: &T,
    grid: &[HyperparamVector],
    budget: Budget,
    seed: u64,
) -> Result<Vec<GridPoint>> {
    grid.iter()
        .map(|h| {
            let mut rng = PbtRng::seed_from_u64(seed);
            let mut state = task.init_state(&mut rng);
            for _ in 0..budget.steps {
                state = task.train(&state, h, budget.updates_per_step, &mut rng)?;
            }
            Ok(GridPoint {
                hparams: h.clone(),
                evaluation: task.evaluate(&state),
            })
        })
        .collect()
}

/// Cartesian product of per-parameter value lists.
pub fn grid_product(axes: &[(&str, Vec<f64>)]) -> Vec<HyperparamVector> {
    axes.iter()
        .fold(vec![HyperparamVector::new()], |acc, (name, values)| {
            acc.iter()
                .flat_map(|h| {
                    values.iter().map(move |&v| {
                        let mut h = h.clone();
                        h.insert(*name, v);
                        h
                    })
                })
                .collect()
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_product_shape() {
        let g = grid_product(&[("a", vec![0.0, 1.0]), ("b", vec![0.0, 0.5, 1.0])]);
        assert_eq!(g.len(), 6);
        assert!(g.iter().all(|h| h.len() == 2));
        assert_eq!(grid_product(&[]).len(), 1);
    }

    #[test]
    fn f64_blob_round_trip() {
        let v = vec![1.5, -0.0, f64::MAX, 1e-300];
        assert_eq!(decode_f64s("t", &encode_f64s(&v)).unwrap(), v);
        assert!(decode_f64s("t", &[0u8; 7]).is_err());
    }
}
