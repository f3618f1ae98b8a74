use std::sync::OnceLock;

use serde::Deserialize;

use super::{QuadraticOptions, RegressionOptions, SpecToyOptions};

const DEFAULTS_TOML: &str = include_str!("../../defaults/tasks.toml");

/// Version of the bundled task defaults.
pub const DEFAULTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDefaults {
    pub version: u32,
    pub quadratic: QuadraticOptions,
    pub regression: RegressionOptions,
    pub spectoy: SpecToyOptions,
}

impl TaskDefaults {
    pub fn get() -> &'static TaskDefaults {
        static DEFAULTS: OnceLock<TaskDefaults> = OnceLock::new();
        DEFAULTS.get_or_init(|| {
            let d: TaskDefaults =
                toml::from_str(DEFAULTS_TOML).expect("bundled task defaults parse");
            assert_eq!(
                d.version, DEFAULTS_VERSION,
                "task defaults version mismatch"
            );
            d
        })
    }
}
