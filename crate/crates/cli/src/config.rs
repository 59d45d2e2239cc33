//! Run configuration: built-in defaults, overridden by a JSON file, then
//! by command-line flags. The effective configuration is echoed as
//! `run.json` next to a command's outputs and can be fed back with
//! `--config` to reproduce the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Option<String>,
    pub version: String,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub weighting: WeightingConfig,
    pub sampler: SamplerSection,
    pub hankel: HankelSection,
    pub mask: MaskSection,
    pub phantom: PhantomSection,
    pub training: TrainingSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: 0,
            schedule: ScheduleConfig::default(),
            weighting: WeightingConfig::default(),
            sampler: SamplerSection::default(),
            hankel: HankelSection::default(),
            mask: MaskSection::default(),
            phantom: PhantomSection::default(),
            training: TrainingSection::default(),
            paths: PathsSection::default(),
        }
    }
}

/// For `recon`, unset fields are taken from the model file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub sigma_min: Option<f64>,
    pub sigma_max: Option<f64>,
    pub num_scales: Option<usize>,
}

/// For `recon`, unset fields are taken from the model file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightingConfig {
    pub r: Option<f64>,
    pub p: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Wkgm,
    SvdWkgm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub method: Method,
    pub corrector_steps: usize,
    pub snr: f64,
    /// `null` means infinity (replace sampled entries).
    pub lambda_dc: Option<f64>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            method: Method::Wkgm,
            corrector_steps: wkgm_core::sampler::DEFAULT_CORRECTOR_STEPS,
            snr: wkgm_core::sampler::DEFAULT_SNR,
            lambda_dc: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HankelSection {
    pub window: usize,
    /// `null` means `max(1, C * window^2 / 2)`.
    pub rank: Option<usize>,
}

impl Default for HankelSection {
    fn default() -> Self {
        Self {
            window: wkgm_core::hankel::DEFAULT_WINDOW,
            rank: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSection {
    pub pattern: String,
    pub accel: f64,
    pub acs: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for MaskSection {
    fn default() -> Self {
        Self {
            pattern: "poisson-disc-2d".into(),
            accel: 3.0,
            acs: 4,
            height: 32,
            width: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub kind: String,
    pub height: usize,
    pub width: usize,
    pub coils: usize,
    pub components: usize,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self {
            kind: "ellipses".into(),
            height: 32,
            width: 32,
            coils: 1,
            components: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    /// Fit a closed-form Gaussian model instead of training the network.
    pub oracle: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    /// Number of synthetic phantoms when no data files are given.
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub coils: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = wkgm_core::score::TrainingConfig::default();
        Self {
            oracle: false,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            hidden: t.hidden,
            count: 64,
            height: 32,
            width: 32,
            coils: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub kspace: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub sos_out: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub data: Vec<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }

    /// Writes the effective configuration as `run.json` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let mut cfg = self.clone();
        cfg.version = env!("CARGO_PKG_VERSION").to_string();
        let path = dir.join(RUN_FILE);
        let mut text = serde_json::to_string_pretty(&cfg).expect("config serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Directory that receives `run.json` for an output file.
pub fn output_dir(out: &Path) -> PathBuf {
    match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}
