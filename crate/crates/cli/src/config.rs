//! The TOML run configuration.

use std::path::{Path, PathBuf};

use icf_core::collab::LoopConfig;
use icf_core::gateway::{BackendSpec, BehaviorSource, ModelProfile, Role};
use icf_core::prompt::Dialect;
use icf_core::run::RunSpec;
use icf_core::sc::SummarizeScope;
use serde::{Deserialize, Serialize};

fn default_temperature() -> f64 {
    1.0
}

fn default_max_new_tokens() -> u32 {
    512
}

fn default_parallelism() -> usize {
    4
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// A model entry; its role comes from where it appears in the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub model_id: String,
    pub dialect: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    pub backend: BackendSpec,
}

impl ProfileConfig {
    fn to_profile(&self, role: Role, base: &Path) -> ModelProfile {
        let mut backend = self.backend.clone();
        if let BackendSpec::Scripted {
            behavior: BehaviorSource::Path(path),
            ..
        } = &mut backend
        {
            *path = base.join(&*path);
        }
        ModelProfile {
            model_id: self.model_id.clone(),
            role,
            backend,
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            dialect: self.dialect.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    /// Relative paths resolve against the config file's directory.
    pub dataset: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub summarize_scope: SummarizeScope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    #[serde(default, rename = "loop")]
    pub loop_config: LoopConfig,
    pub participants: Vec<ProfileConfig>,
    pub summarizer: ProfileConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dialects: Vec<Dialect>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default, Clone, Copy)]
pub struct Overrides {
    pub threshold: Option<f64>,
    pub max_rounds: Option<u32>,
    pub n: Option<u32>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(v) = o.threshold {
            self.loop_config.threshold = v;
        }
        if let Some(v) = o.max_rounds {
            self.loop_config.max_rounds = v;
        }
        if let Some(v) = o.n {
            self.loop_config.n = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.parallelism {
            self.parallelism = v;
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.participants.len() < 2 {
            return Err(format!(
                "at least 2 participants are required, got {}",
                self.participants.len()
            ));
        }
        if self.parallelism == 0 {
            return Err("parallelism must be positive".into());
        }
        Ok(())
    }

    /// Resolves paths against `base` and builds the engine-level spec.
    pub fn to_spec(&self, base: &Path) -> RunSpec {
        RunSpec {
            dataset_path: base.join(&self.dataset),
            participants: self
                .participants
                .iter()
                .map(|p| p.to_profile(Role::Participant, base))
                .collect(),
            summarizer: self.summarizer.to_profile(Role::Summarizer, base),
            loop_config: self.loop_config,
            seed: self.seed,
            summarize_scope: self.summarize_scope,
            templates_dir: self.templates_dir.as_ref().map(|d| base.join(d)),
            dialects: self.dialects.clone(),
        }
    }
}
