//! Bounded continuous hyperparameters and their mutation scheme.
//!
//! Every parameter lives in a closed interval `[min, max]` and mutates by
//! adding or subtracting one of a small set of constants, clamped back into
//! range. Parameters that stand for counts (number of masks, for example) are
//! kept as reals and realized per use with [`sample_count`].

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperparamSpec {
    pub name: String,
    pub init: f64,
    pub min: f64,
    pub max: f64,
    /// Allowed mutation magnitudes; the sign is drawn separately.
    pub deltas: Vec<f64>,
    #[serde(default)]
    pub fractional_count: bool,
}

impl HyperparamSpec {
    pub fn new(name: &str, init: f64, min: f64, max: f64, deltas: &[f64]) -> Self {
        Self {
            name: name.to_string(),
            init,
            min,
            max,
            deltas: deltas.to_vec(),
            fractional_count: false,
        }
    }

    pub fn fractional(mut self) -> Self {
        self.fractional_count = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| {
            Err(Error::InvalidSpec {
                name: self.name.clone(),
                reason,
            })
        };
        if self.name.is_empty() {
            return bad("empty name".into());
        }
        if ![self.init, self.min, self.max]
            .iter()
            .all(|v| v.is_finite())
        {
            return bad("bounds and init must be finite".into());
        }
        if self.min >= self.max {
            return bad(format!("min {} must be below max {}", self.min, self.max));
        }
        if self.init < self.min || self.init > self.max {
            return bad(format!(
                "init {} outside [{}, {}]",
                self.init, self.min, self.max
            ));
        }
        if self.deltas.is_empty() {
            return bad("no mutation deltas".into());
        }
        let range = self.max - self.min;
        for &d in &self.deltas {
            if !(d > 0.0 && d < range) {
                return bad(format!("delta {d} must lie in (0, {range})"));
            }
        }
        Ok(())
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

/// Values for every parameter of a search space, keyed by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HyperparamVector(BTreeMap<String, f64>);

impl HyperparamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        self.0.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: Into<String>> FromIterator<(S, f64)> for HyperparamVector {
    fn from_iter<I: IntoIterator<Item = (S, f64)>>(iter: I) -> Self {
        Self(iter.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }
}

impl fmt::Display for HyperparamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

/// An ordered list of parameter specs with unique names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchSpace(Vec<HyperparamSpec>);

impl SearchSpace {
    pub fn new(specs: Vec<HyperparamSpec>) -> Result<Self> {
        let space = Self(specs);
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for spec in &self.0 {
            spec.validate()?;
            if !seen.insert(spec.name.as_str()) {
                return Err(Error::InvalidSpec {
                    name: spec.name.clone(),
                    reason: "duplicate name".into(),
                });
            }
        }
        Ok(())
    }

    /// The ten parameters tuned in the speech recognition run: five
    /// SpecAugment knobs followed by encoder and decoder regularization.
    pub fn table2() -> Self {
        let mut specs = Self::table2_augmentation().0;
        specs.extend([
            HyperparamSpec::new("dropout", 0.2, 0.01, 0.8, &[0.01]),
            HyperparamSpec::new("tr_dropout", 0.2, 0.01, 0.8, &[0.01]),
            HyperparamSpec::new("tr_layerdrop", 0.2, 0.01, 0.8, &[0.01]),
            HyperparamSpec::new("dec_tr_dropout", 0.3, 0.01, 0.8, &[0.01]),
            HyperparamSpec::new("dec_tr_layerdrop", 0.2, 0.01, 0.8, &[0.01]),
        ]);
        Self(specs)
    }

    /// The SpecAugment block of [`SearchSpace::table2`].
    pub fn table2_augmentation() -> Self {
        Self(vec![
            HyperparamSpec::new("fmask_f", 7.0, 7.0, 120.0, &[2.5, 5.0]),
            HyperparamSpec::new("fmask_n", 1.0, 1.0, 8.0, &[0.5]).fractional(),
            HyperparamSpec::new("tmask_t", 20.0, 20.0, 150.0, &[2.0, 5.0]),
            HyperparamSpec::new("tmask_p", 0.2, 0.2, 1.0, &[0.05, 0.1]),
            HyperparamSpec::new("tmask_n", 1.0, 1.0, 8.0, &[0.5, 1.0]).fractional(),
        ])
    }

    pub fn specs(&self) -> &[HyperparamSpec] {
        &self.0
    }

    pub fn get(&self, name: &str) -> Option<&HyperparamSpec> {
        self.0.iter().find(|s| s.name == name)
    }

    /// Looks up `name`, listing the valid names on failure.
    pub fn require(&self, name: &str) -> Result<&HyperparamSpec> {
        self.get(name).ok_or_else(|| Error::UnknownParameter {
            name: name.to_string(),
            valid: self.names().collect::<Vec<_>>().join(", "),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|s| s.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn init_vector(&self) -> HyperparamVector {
        self.0.iter().map(|s| (s.name.clone(), s.init)).collect()
    }

    /// Checks that `h` has exactly this space's keys and every value is in range.
    pub fn check_vector(&self, h: &HyperparamVector) -> Result<()> {
        if h.len() != self.len() {
            return Err(Error::VectorMismatch(format!(
                "expected {} parameters, got {}",
                self.len(),
                h.len()
            )));
        }
        for spec in &self.0 {
            let value = h.get(&spec.name).ok_or_else(|| {
                Error::VectorMismatch(format!("missing parameter `{}`", spec.name))
            })?;
            if !spec.contains(value) {
                return Err(Error::OutOfRange {
                    name: spec.name.clone(),
                    value,
                    min: spec.min,
                    max: spec.max,
                    clamped: clamp(spec, value),
                });
            }
        }
        Ok(())
    }
}

pub fn clamp(spec: &HyperparamSpec, v: f64) -> f64 {
    v.max(spec.min).min(spec.max)
}

/// Adds or subtracts one of `spec.deltas`, sign and magnitude drawn
/// uniformly and independently, then clamps into range.
pub fn mutate_param<R: Rng + ?Sized>(spec: &HyperparamSpec, v: f64, rng: &mut R) -> f64 {
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let delta = *spec
        .deltas
        .choose(rng)
        .expect("validated spec has at least one delta");
    clamp(spec, v + sign * delta)
}

/// Returns a mutated copy of `h`. Each parameter is perturbed independently
/// with probability `mutation_probability`.
pub fn mutate<R: Rng + ?Sized>(
    space: &SearchSpace,
    h: &HyperparamVector,
    mutation_probability: f64,
    rng: &mut R,
) -> HyperparamVector {
    let mut out = h.clone();
    for spec in space.specs() {
        let Some(v) = h.get(&spec.name) else { continue };
        if mutation_probability < 1.0 && !rng.random_bool(mutation_probability.max(0.0)) {
            continue;
        }
        out.insert(spec.name.clone(), mutate_param(spec, v, rng));
    }
    out
}

/// Realizes a fractional count `N + p` as `N` with probability `1 - p` and
/// `N + 1` with probability `p`.
pub fn sample_count<R: Rng + ?Sized>(x: f64, rng: &mut R) -> Result<u32> {
    if !(x.is_finite() && x >= 0.0) {
        return Err(Error::NegativeCount(x));
    }
    let n = x.floor();
    let p = x - n;
    let extra = p > 0.0 && rng.random::<f64>() < p;
    Ok(n as u32 + u32::from(extra))
}
