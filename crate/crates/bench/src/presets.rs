//! Named scenario presets. The documents live in `presets/` and are
//! compiled in, so `--profile` works from any directory.

use thiserror::Error;

use crate::config::{ConfigError, ScenarioConfig};

const PRESETS: [(&str, &str); 3] = [
    ("paper", include_str!("../presets/paper.toml")),
    ("desk", include_str!("../presets/desk.toml")),
    ("lossless", include_str!("../presets/lossless.toml")),
];

#[derive(Debug, Error)]
pub enum PresetError {
    #[error("unknown preset {0:?} (known: paper, desk, lossless)")]
    UnknownPreset(String),
    #[error("preset {name}: {source}")]
    Invalid { name: String, source: ConfigError },
}

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

/// Raw TOML text of a preset.
pub fn source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn load_preset(name: &str) -> Result<ScenarioConfig, PresetError> {
    let text = source(name).ok_or_else(|| PresetError::UnknownPreset(name.to_owned()))?;
    ScenarioConfig::from_toml(text).map_err(|source| PresetError::Invalid {
        name: name.to_owned(),
        source,
    })
}
