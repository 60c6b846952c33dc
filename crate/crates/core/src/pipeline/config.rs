use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::phantom::PhantomSpec;
use super::report::Grouping;
use crate::data::{Plane, SplitCounts};
use crate::diffusion::{
    CoefficientMode, OutputRange, ScheduleConfig, SimulationParams, VarianceSchedule,
};
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::models::{InitScheme, TrainerConfig, UNetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub counts: SplitCounts,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            counts: SplitCounts {
                ddpm_train: 30,
                ddpm_val: 15,
                unet_train: 30,
                unet_val: 15,
                test: 54,
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Preset letters, one simulated image per letter, e.g. `"JZ"`.
    pub pair: String,
    pub presets: BTreeMap<String, SimulationParams>,
    /// Schedule length the preset `n` values refer to; they are rescaled
    /// to the configured schedule when it differs.
    pub preset_timesteps: usize,
    pub output: OutputRange,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let presets = SimulationParams::PRESET_NAMES
            .iter()
            .map(|n| {
                (
                    n.to_string(),
                    SimulationParams::preset(n).expect("built-in preset"),
                )
            })
            .collect();
        SimulationConfig {
            pair: "JZ".into(),
            presets,
            preset_timesteps: SimulationParams::PRESET_TIMESTEPS,
            output: OutputRange::Clamp,
        }
    }
}

impl SimulationConfig {
    /// The selected presets, rescaled to `sched`.
    pub fn selected(&self, sched: &VarianceSchedule) -> Result<Vec<(String, SimulationParams)>> {
        let names: Vec<String> = self.pair.chars().map(String::from).collect();
        if names.len() != 2 || names[0] == names[1] {
            return Err(Error::Config(format!(
                "simulation.pair must name two distinct presets, got `{}`",
                self.pair
            )));
        }
        names
            .into_iter()
            .map(|n| {
                let p = *self
                    .presets
                    .get(&n)
                    .ok_or_else(|| Error::Config(format!("unknown preset `{n}`")))?;
                let p = if sched.timesteps() == self.preset_timesteps {
                    p
                } else {
                    p.rescaled(self.preset_timesteps, sched.timesteps())
                };
                p.validate(sched)
                    .map_err(|e| Error::Config(format!("preset {n}: {e}")))?;
                Ok((n, p))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub model: UNetConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
}

fn default_ddpm() -> ModelSection {
    ModelSection {
        model: UNetConfig {
            time_conditioned: true,
            ..Default::default()
        },
        trainer: TrainerConfig::default(),
    }
}

fn default_corrector() -> ModelSection {
    ModelSection {
        model: UNetConfig {
            init: InitScheme::Identity,
            ..Default::default()
        },
        trainer: TrainerConfig::default(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub enabled: bool,
    pub max_shift: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            enabled: true,
            max_shift: 10,
        }
    }
}

/// How the corrector's validation set is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMode {
    /// Separate patients, simulated the same way as the training set.
    #[default]
    HeldOut,
    /// The training inputs themselves.
    TrainingSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub groupings: Vec<Grouping>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            groupings: vec![Grouping::Source, Grouping::Plane, Grouping::Patient],
        }
    }
}

fn default_plane() -> Plane {
    Plane::Sagittal
}

fn default_slices() -> usize {
    100
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_manifest: PathBuf,
    #[serde(default = "default_plane")]
    pub plane: Plane,
    #[serde(default = "default_slices")]
    pub slices_per_scan: usize,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub literal_paper_coefficient: bool,
    #[serde(default = "default_ddpm")]
    pub ddpm: ModelSection,
    #[serde(default = "default_corrector")]
    pub corrector: ModelSection,
    #[serde(default)]
    pub metrics: MetricConfig,
    #[serde(default)]
    pub registration: RegistrationConfig,
    #[serde(default)]
    pub validation: ValidationMode,
    #[serde(default)]
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

/// Splits `key=value`; the value is parsed as JSON when possible and taken
/// as a plain string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    if k.is_empty() {
        return Err(Error::Config(format!("override `{s}` has an empty key")));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "`{key}`: `{}` is not an object",
                parts[..i].join(".")
            ))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

impl RunConfig {
    /// Parses JSON text, applying dotted-path overrides first.
    pub fn from_json(text: &str, overrides: &[(String, Value)]) -> Result<Self> {
        let cfg_err = |e: serde_json::Error| Error::Config(e.to_string());
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(cfg_err)?;
        if !overrides.is_empty() {
            let mut v = serde_json::to_value(&cfg).map_err(cfg_err)?;
            for (k, val) in overrides {
                set_path(&mut v, k, val.clone())?;
            }
            cfg = serde_json::from_value(v).map_err(cfg_err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path, overrides: &[(String, Value)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset_manifest = base.join(&cfg.dataset_manifest);
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |e: Error| Error::Config(e.to_string());
        let sched = VarianceSchedule::from_config(&self.schedule).map_err(bad)?;
        self.simulation.selected(&sched)?;
        self.ddpm.model.validate().map_err(bad)?;
        self.corrector.model.validate().map_err(bad)?;
        self.ddpm.trainer.validate().map_err(bad)?;
        self.corrector.trainer.validate().map_err(bad)?;
        self.metrics.validate().map_err(bad)?;
        self.phantom.validate().map_err(bad)?;
        if !self.ddpm.model.time_conditioned {
            return Err(Error::Config(
                "ddpm.model.time_conditioned must be true".into(),
            ));
        }
        if self.corrector.model.time_conditioned {
            return Err(Error::Config(
                "corrector.model.time_conditioned must be false".into(),
            ));
        }
        if self.slices_per_scan == 0 {
            return Err(Error::Config("slices_per_scan must be positive".into()));
        }
        Ok(())
    }

    pub fn coefficient_mode(&self) -> CoefficientMode {
        if self.literal_paper_coefficient {
            CoefficientMode::LiteralPaper
        } else {
            CoefficientMode::Standard
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        super::artifacts::sha256_bytes(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}
