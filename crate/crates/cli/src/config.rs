use std::fs;
use std::path::{Path, PathBuf};

use gyrocal::dataio::{GyroSchema, RefSchema};
use gyrocal::pipeline::{ModelKind, ModelSettings};
use gyrocal::sim::{default_sim_config, RateProfileConfig, SimConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

/// Everything a run reads, as loaded from `--config` and then overridden by
/// flags. Written back out as the run's config echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub gyro: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    /// Second device for `report`; its test split replaces the first's.
    pub test_gyro: Option<PathBuf>,
    pub test_reference: Option<PathBuf>,
    pub test_truth: Option<PathBuf>,
    pub model_file: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub model: ModelKind,
    /// Seed for every stochastic training stage.
    pub seed: u64,
    /// Widest reference gap bridged by interpolation, seconds.
    pub max_gap: f64,
    pub gyro_schema: GyroSchema,
    pub ref_schema: RefSchema,
    pub profile: RateProfileConfig,
    /// Run the controlled-rate staircase instead of a random profile.
    pub staircase: bool,
    pub staircase_dwell: f64,
    pub staircase_rest: f64,
    pub sim: SimConfig,
    pub settings: ModelSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            gyro: None,
            reference: None,
            truth: None,
            test_gyro: None,
            test_reference: None,
            test_truth: None,
            model_file: None,
            predictions: None,
            out_dir: PathBuf::from("."),
            model: ModelKind::Mlp,
            seed: 0,
            max_gap: 1.0,
            gyro_schema: GyroSchema::default(),
            ref_schema: RefSchema::default(),
            profile: RateProfileConfig::default(),
            staircase: false,
            staircase_dwell: 30.0,
            staircase_rest: 10.0,
            sim: default_sim_config(),
            settings: ModelSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())).into())
    }

    /// Pushes the run seed into the stochastic stages.
    pub fn apply_seed(&mut self) {
        self.settings.gbrt.seed = self.seed;
        self.settings.mlp.seed = self.seed;
    }

    pub fn input_paths(&self) -> Vec<&Path> {
        [
            &self.gyro,
            &self.reference,
            &self.truth,
            &self.test_gyro,
            &self.test_reference,
            &self.test_truth,
            &self.model_file,
            &self.predictions,
        ]
        .into_iter()
        .flatten()
        .map(PathBuf::as_path)
        .collect()
    }
}

pub fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| UsageError(format!("missing required input {flag}")).into())
}

#[derive(Debug, Serialize)]
struct InputHash {
    path: PathBuf,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct ConfigEcho<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a PipelineConfig,
    inputs: Vec<InputHash>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Writes `run_config.json`: the resolved configuration and input digests.
pub fn write_echo(cfg: &PipelineConfig, command: &str) -> anyhow::Result<()> {
    let inputs = cfg
        .input_paths()
        .into_iter()
        .map(|p| {
            Ok(InputHash {
                path: p.to_path_buf(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<std::io::Result<Vec<_>>>()?;
    let echo = ConfigEcho {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        inputs,
    };
    let file = fs::File::create(cfg.out_dir.join("run_config.json"))?;
    serde_json::to_writer_pretty(file, &echo)?;
    Ok(())
}
