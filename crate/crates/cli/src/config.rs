//! The resolved run configuration: defaults, then a TOML file, then
//! environment variables, then command-line flags.

use std::path::{Path, PathBuf};

use rpo::backends::{EndpointConfig, Informativeness, MockOptions, VectorWorld};
use rpo::diffusion::{Activation, Architecture, ScheduleDescriptor};
use rpo::eval::{EvalConfig, ReportFormat};
use rpo::pipeline::PipelineConfig;
use rpo::store::SplitConfig;
use rpo::trainer::{DpoConfig, ElboConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub time_frequencies: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let arch = Architecture::desk_default(2, 4, 50);
        Self {
            hidden: arch.hidden,
            time_frequencies: arch.time_frequencies,
            activation: arch.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurateConfig {
    /// Originals drawn from the base generator.
    pub inputs: usize,
}

impl Default for CurateConfig {
    fn default() -> Self {
        Self { inputs: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub inputs: usize,
    pub sizes: Vec<usize>,
    pub levels: Vec<Informativeness>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            inputs: 2000,
            sizes: vec![0, 250, 1000, 4000],
            levels: vec![Informativeness::Full, Informativeness::Partial, Informativeness::None],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Any of `csv`, `json`, `plot-data`.
    pub formats: Vec<String>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            formats: vec!["csv".into(), "json".into()],
        }
    }
}

impl ReportConfig {
    pub fn parsed(&self) -> Result<Vec<ReportFormat>, CliError> {
        self.formats
            .iter()
            .map(|f| f.parse().map_err(|e: rpo::eval::EvalError| CliError::Config(e.to_string())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Drives every component seed and the split salt.
    pub seed: u64,
    /// Output directory for stores, checkpoints and reports.
    pub out: PathBuf,
    pub world: VectorWorld,
    pub schedule: ScheduleDescriptor,
    pub model: ModelConfig,
    pub elbo: ElboConfig,
    pub dpo: DpoConfig,
    pub pipeline: PipelineConfig,
    pub mock: MockOptions,
    pub split: SplitConfig,
    pub curate: CurateConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub report: ReportConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("rpo-out"),
            world: VectorWorld::default(),
            schedule: ScheduleDescriptor::default(),
            model: ModelConfig::default(),
            elbo: ElboConfig::default(),
            dpo: DpoConfig::default(),
            pipeline: PipelineConfig::default(),
            mock: MockOptions::default(),
            split: SplitConfig::default(),
            curate: CurateConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

/// Values that may come from the environment or from flags. clap already
/// prefers a flag over its environment variable.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub critic_url: Option<String>,
    pub instructor_url: Option<String>,
    pub editor_url: Option<String>,
    pub scorer_url: Option<String>,
    pub curate_inputs: Option<usize>,
    pub elbo_steps: Option<usize>,
    pub dpo_steps: Option<usize>,
}

fn set_url(slot: &mut Option<EndpointConfig>, url: &Option<String>) {
    if let Some(url) = url {
        match slot {
            Some(e) => e.base_url = url.clone(),
            None => *slot = Some(EndpointConfig::new(url.clone())),
        }
    }
}

impl CliConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut config = match file {
            Some(path) => Self::from_file(path)?,
            None => Self::default(),
        };
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(out) = &overrides.out {
            config.out = out.clone();
        }
        if let Some(n) = overrides.curate_inputs {
            config.curate.inputs = n;
        }
        if let Some(n) = overrides.elbo_steps {
            config.elbo.total_steps = n;
        }
        if let Some(n) = overrides.dpo_steps {
            config.dpo.total_steps = n;
        }
        let endpoints = &mut config.pipeline.endpoints;
        set_url(&mut endpoints.critic, &overrides.critic_url);
        set_url(&mut endpoints.instructor, &overrides.instructor_url);
        set_url(&mut endpoints.editor, &overrides.editor_url);
        set_url(&mut endpoints.scorer, &overrides.scorer_url);

        let seed = config.seed;
        config.world.seed = seed;
        config.elbo.seed = seed;
        config.dpo.seed = seed;
        config.pipeline.seed = seed;
        config.eval.seed = seed;
        config.split.salt = seed;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: String| CliError::Config(e);
        self.world.validate().map_err(|e| invalid(e.to_string()))?;
        self.schedule.build().map_err(|e| invalid(e.to_string()))?;
        self.dpo.validate().map_err(|e| invalid(e.to_string()))?;
        self.pipeline.validate().map_err(|e| invalid(e.to_string()))?;
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(invalid("model.hidden needs at least one nonzero width".into()));
        }
        if !(0.0..1.0).contains(&self.split.heldout_fraction) {
            return Err(invalid("split.heldout_fraction must be in [0, 1)".into()));
        }
        self.report.parsed()?;
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            data_dim: self.world.dim,
            cond_dim: self.world.num_conditions,
            time_scale: self.schedule.steps,
            time_frequencies: self.model.time_frequencies,
            hidden: self.model.hidden.clone(),
            activation: self.model.activation,
        }
    }

    /// sha256 of the resolved configuration without the output directory.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serialises");
        value.as_object_mut().expect("config is a table").remove("out");
        hex::encode(Sha256::digest(serde_json::to_vec(&value).expect("value serialises")))
    }
}
