//! Optional TOML config file. Every key is optional; a command-line flag
//! overrides the file, and the file overrides the built-in default.

use std::path::Path;

use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub synth: SynthFile,
    #[serde(default)]
    pub train: TrainFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    pub seed: Option<u64>,
    pub scenes: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub channels: Option<usize>,
    pub count_min: Option<usize>,
    pub count_max: Option<usize>,
    pub radius_min: Option<f64>,
    pub radius_max: Option<f64>,
    pub background: Option<String>,
    pub distractor_density: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub lr: Option<f64>,
    pub lr_decay_at: Option<f64>,
    pub lr_decay_factor: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub augment: Option<bool>,
    pub crop_patches: Option<usize>,
    pub flip_p: Option<f64>,
    pub noise_p: Option<f64>,
    pub noise_amplitude: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub base_channels: Option<usize>,
    pub dilation_set: Option<Vec<usize>>,
    pub trunk_widths: Option<[usize; 3]>,
    pub fm_channels: Option<usize>,
    pub groups: Option<usize>,
    pub use_confidence: Option<bool>,
    pub use_cross_layer: Option<bool>,
    pub fm_output: Option<String>,
    pub init_std: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
