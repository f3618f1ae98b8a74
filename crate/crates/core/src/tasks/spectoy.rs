//! Tone-pattern classification on small synthetic spectrograms.
//!
//! Each class owns a narrow frequency band; an example lights that band up
//! for a random stretch of frames on top of Gaussian noise and a distracting
//! tone at a random band. A linear softmax classifier is trained on the
//! flattened spectrogram, with SpecAugment applied to every training example
//! it sees. Evaluation never masks.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{decode_f64s, encode_f64s, Evaluation, TaskDefaults, Trainable};
use crate::error::{Error, Result};
use crate::hparam::{sample_count, HyperparamVector, SearchSpace};
use crate::specaugment::{freq_masks_in_place, time_masks_in_place, MaskPolicy, Spectrogram};
use crate::PbtRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecToyOptions {
    pub classes: usize,
    pub frames: usize,
    pub bands: usize,
    pub n_train: usize,
    pub n_select: usize,
    pub n_report: usize,
    pub noise: f64,
    pub amplitude: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for SpecToyOptions {
    fn default() -> Self {
        TaskDefaults::get().spectoy.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    /// Row-major `frames x bands`.
    pub features: Vec<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecToyData {
    pub train: Vec<Example>,
    pub select: Vec<Example>,
    pub report: Vec<Example>,
}

impl SpecToyData {
    pub fn generate(o: &SpecToyOptions, seed: u64) -> Self {
        let mut rng = PbtRng::seed_from_u64(seed);
        let noise = Normal::new(0.0, o.noise.max(0.0)).expect("finite noise");
        let example = |rng: &mut PbtRng| {
            let label = rng.random_range(0..o.classes);
            let mut features: Vec<f32> = (0..o.frames * o.bands)
                .map(|_| noise.sample(rng) as f32)
                .collect();
            let centre = (2 * label + 1) * o.bands / (2 * o.classes);
            let mut light = |band_lo: usize, band_hi: usize, rng: &mut PbtRng| {
                let len = rng.random_range(o.frames / 4..=o.frames / 2).max(1);
                let start = rng.random_range(0..=o.frames - len);
                for t in start..start + len {
                    for f in band_lo..band_hi {
                        features[t * o.bands + f] += o.amplitude as f32;
                    }
                }
            };
            light(centre.saturating_sub(1), (centre + 2).min(o.bands), rng);
            let distractor = rng.random_range(0..o.bands);
            light(distractor, distractor + 1, rng);
            Example { features, label }
        };
        let mut split = |n: usize| (0..n).map(|_| example(&mut rng)).collect::<Vec<_>>();
        let train = split(o.n_train);
        let select = split(o.n_select);
        let report = split(o.n_report);
        Self {
            train,
            select,
            report,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpecToyTask {
    pub options: SpecToyOptions,
    pub data: SpecToyData,
}

/// Cross-entropy and accuracy of a linear softmax model over `examples`.
fn score(o: &SpecToyOptions, w: &[f64], examples: &[Example]) -> (f64, f64) {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut logits = vec![0.0; o.classes];
    for ex in examples {
        forward(o, w, &ex.features, &mut logits);
        let (lse, argmax) = log_softmax_stats(&logits);
        loss += lse - logits[ex.label];
        correct += usize::from(argmax == ex.label);
    }
    let n = examples.len().max(1) as f64;
    (loss / n, correct as f64 / n)
}

fn forward(o: &SpecToyOptions, w: &[f64], x: &[f32], logits: &mut [f64]) {
    let stride = o.frames * o.bands + 1;
    for (k, logit) in logits.iter_mut().enumerate() {
        let row = &w[k * stride..(k + 1) * stride];
        *logit = row[stride - 1]
            + row[..stride - 1]
                .iter()
                .zip(x)
                .map(|(a, b)| a * f64::from(*b))
                .sum::<f64>();
    }
}

/// Returns (log-sum-exp, argmax).
fn log_softmax_stats(logits: &[f64]) -> (f64, usize) {
    let (argmax, max) =
        logits
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
            );
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    (max + sum.ln(), argmax)
}

impl SpecToyTask {
    pub fn new(options: SpecToyOptions, seed: u64) -> Result<Self> {
        let o = &options;
        if o.classes < 2 || o.frames < 4 || o.bands < 3 || o.n_train == 0 || o.batch_size == 0 {
            return Err(Error::Config(
                "spectoy needs >= 2 classes, >= 4 frames, >= 3 bands and data".into(),
            ));
        }
        let data = SpecToyData::generate(o, seed);
        Ok(Self { options, data })
    }

    fn state_len(&self) -> usize {
        self.options.classes * (self.options.frames * self.options.bands + 1)
    }

    /// Minibatch SGD on softmax cross-entropy. With `policy` set, every
    /// sampled example is masked before the gradient step.
    pub fn train_with_policy(
        &self,
        state: &[f64],
        policy: Option<&MaskPolicy>,
        num_updates: usize,
        rng: &mut PbtRng,
    ) -> Result<Vec<f64>> {
        let o = &self.options;
        if state.len() != self.state_len() {
            return Err(Error::Task {
                task: "spectoy".into(),
                reason: "state has wrong size".into(),
            });
        }
        // Masks draw from their own stream so batches do not depend on the policy.
        let mut aug_rng = PbtRng::seed_from_u64(rng.random());
        let stride = o.frames * o.bands + 1;
        let mut w = state.to_vec();
        let mut grad = vec![0.0; w.len()];
        let mut logits = vec![0.0; o.classes];
        let mut spec = Spectrogram::zeros(o.frames, o.bands);
        for _ in 0..num_updates {
            grad.iter_mut().for_each(|g| *g = 0.0);
            // Mask counts are shared by the mini-batch; mask geometry is per utterance.
            let counts = match policy {
                Some(policy) => (
                    sample_count(policy.fmask_n, &mut aug_rng)?,
                    sample_count(policy.tmask_n, &mut aug_rng)?,
                ),
                None => (0, 0),
            };
            for _ in 0..o.batch_size {
                let ex = &self.data.train[rng.random_range(0..self.data.train.len())];
                let x: &[f32] = match policy {
                    Some(policy) => {
                        spec.0
                            .as_slice_mut()
                            .expect("standard layout")
                            .copy_from_slice(&ex.features);
                        let (nf, nt) = counts;
                        freq_masks_in_place(
                            &mut spec,
                            policy.fmask_f,
                            nf,
                            policy.fill,
                            &mut aug_rng,
                        );
                        time_masks_in_place(
                            &mut spec,
                            policy.tmask_t,
                            policy.tmask_p,
                            nt,
                            policy.fill,
                            &mut aug_rng,
                        );
                        spec.0.as_slice().expect("standard layout")
                    }
                    None => &ex.features,
                };
                forward(o, &w, x, &mut logits);
                let (lse, _) = log_softmax_stats(&logits);
                for (k, logit) in logits.iter().enumerate() {
                    let p = (logit - lse).exp();
                    let coeff = (p - f64::from(u8::from(k == ex.label))) / o.batch_size as f64;
                    let row = &mut grad[k * stride..(k + 1) * stride];
                    for (g, xv) in row[..stride - 1].iter_mut().zip(x) {
                        *g += coeff * f64::from(*xv);
                    }
                    row[stride - 1] += coeff;
                }
            }
            for (wi, g) in w.iter_mut().zip(&grad) {
                *wi -= o.learning_rate * g;
            }
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Task {
                task: "spectoy".into(),
                reason: "weights diverged".into(),
            });
        }
        Ok(w)
    }
}

impl Trainable for SpecToyTask {
    type State = Vec<f64>;

    fn name(&self) -> &'static str {
        "spectoy"
    }

    fn search_space(&self) -> SearchSpace {
        SearchSpace::table2_augmentation()
    }

    fn required_params(&self) -> &'static [&'static str] {
        &["fmask_f", "fmask_n", "tmask_t", "tmask_p", "tmask_n"]
    }

    fn init_state(&self, _rng: &mut PbtRng) -> Vec<f64> {
        vec![0.0; self.state_len()]
    }

    fn train(
        &self,
        state: &Vec<f64>,
        h: &HyperparamVector,
        num_updates: usize,
        rng: &mut PbtRng,
    ) -> Result<Vec<f64>> {
        let policy = MaskPolicy::from_hparams(h)?;
        self.train_with_policy(state, Some(&policy), num_updates, rng)
    }

    fn evaluate(&self, w: &Vec<f64>) -> Evaluation {
        let o = &self.options;
        let (selection, _) = score(o, w, &self.data.select);
        let (reporting, accuracy) = score(o, w, &self.data.report);
        Evaluation {
            loss: selection,
            metrics: [
                ("selection".to_string(), selection),
                ("reporting".to_string(), reporting),
                ("reporting_error".to_string(), 1.0 - accuracy),
            ]
            .into_iter()
            .collect(),
        }
    }

    fn serialize_state(&self, w: &Vec<f64>) -> Vec<u8> {
        encode_f64s(w)
    }

    fn deserialize_state(&self, bytes: &[u8]) -> Result<Vec<f64>> {
        let w = decode_f64s("spectoy", bytes)?;
        if w.len() != self.state_len() {
            return Err(Error::Task {
                task: "spectoy".into(),
                reason: "state blob has wrong size".into(),
            });
        }
        Ok(w)
    }

    fn dataset(&self) -> Option<serde_json::Value> {
        serde_json::to_value(&self.data).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> SpecToyTask {
        SpecToyTask::new(SpecToyOptions::default(), 0).unwrap()
    }

    #[test]
    fn zero_policy_equals_plain_training() {
        let task = task();
        let init = task.init_state(&mut PbtRng::seed_from_u64(0));
        let masked = task
            .train_with_policy(
                &init,
                Some(&MaskPolicy::NONE),
                50,
                &mut PbtRng::seed_from_u64(7),
            )
            .unwrap();
        let plain = task
            .train_with_policy(&init, None, 50, &mut PbtRng::seed_from_u64(7))
            .unwrap();
        assert_eq!(masked, plain);
    }

    #[test]
    fn evaluation_ignores_policy() {
        let task = task();
        let init = task.init_state(&mut PbtRng::seed_from_u64(0));
        let h = task.search_space().init_vector();
        let w = task
            .train(&init, &h, 20, &mut PbtRng::seed_from_u64(1))
            .unwrap();
        assert_eq!(task.evaluate(&w), task.evaluate(&w.clone()));
        // Evaluating before training is chance level.
        let chance = (task.options.classes as f64).ln();
        assert!((task.evaluate(&init).loss - chance).abs() < 1e-9);
    }

    #[test]
    fn learns_above_chance() {
        let task = task();
        let init = task.init_state(&mut PbtRng::seed_from_u64(0));
        let h = task.search_space().init_vector();
        let w = task
            .train(&init, &h, 300, &mut PbtRng::seed_from_u64(2))
            .unwrap();
        let e = task.evaluate(&w);
        assert!(e.metrics["reporting_error"] < 0.5, "{e:?}");
    }

    #[test]
    fn state_round_trip() {
        let task = task();
        let w: Vec<f64> = (0..task.state_len())
            .map(|i| (i % 7) as f64 * 0.01)
            .collect();
        let back = task.deserialize_state(&task.serialize_state(&w)).unwrap();
        assert_eq!(task.evaluate(&back), task.evaluate(&w));
    }

    #[test]
    fn one_full_step_is_fast() {
        let task = task();
        let init = task.init_state(&mut PbtRng::seed_from_u64(0));
        let h = SearchSpace::table2().init_vector();
        let start = std::time::Instant::now();
        task.train(&init, &h, 2200, &mut PbtRng::seed_from_u64(3))
            .unwrap();
        assert!(start.elapsed().as_secs_f64() < 1.0, "{:?}", start.elapsed());
    }
}
