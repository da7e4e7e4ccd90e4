//! Run configuration: one TOML document covering data, model, training and
//! protocol. Every key has a default except the dataset location; unknown keys
//! are rejected.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/proteins"
//!
//! [dataset]
//! name = "PROTEINS"
//! path = "PROTEINS"        # relative paths resolve against GRAPHPROMPT_DATA_DIR
//!
//! [encoder]
//! hidden_dim = 32
//!
//! [protocol]
//! level = "graph"
//! k = 5
//! ```
//!
//! Stage seeds (`pretrain.seed`, `tune.seed`, `scalability.seed`) are derived
//! from the master `seed` by labelled hashing unless set to a nonzero value.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingMode, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{ExperimentSpec, Protocol, ScalabilityConfig};
use crate::graph::{generate_synthetic, load_tu_dataset, GraphCollection, SyntheticSpec};
use crate::pretrain::PretrainConfig;
use crate::prompt::TuneConfig;
use crate::seed::derive_seed;

/// Environment variable naming the directory that relative dataset paths
/// resolve against.
pub const DATA_DIR_ENV: &str = "GRAPHPROMPT_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Directory holding `<name>_A.txt` and friends, or its parent.
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub name: Option<String>,
    /// Generate data instead of loading it.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub synthetic_seed: u64,
}

/// Encoder settings; the input width comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub embedding_mode: EmbeddingMode,
    pub epsilon: f32,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let c = EncoderConfig::new(1);
        Self {
            num_layers: c.num_layers,
            hidden_dim: c.hidden_dim,
            embedding_mode: c.embedding_mode,
            epsilon: c.epsilon,
        }
    }
}

impl EncoderSection {
    pub fn with_input(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            input_dim,
            hidden_dim: self.hidden_dim,
            embedding_mode: self.embedding_mode,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub tune: TuneConfig,
    #[serde(default)]
    pub protocol: Protocol,
    #[serde(default)]
    pub scalability: ScalabilityConfig,
}

/// Labelled seed kept below 2^63 so it survives TOML's signed integers.
pub fn stage_seed(master: u64, label: &str) -> u64 {
    derive_seed(master, label) >> 1
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    /// Checks the config and fills derived stage seeds.
    pub fn resolve(mut self) -> Result<Self> {
        let ds = &self.dataset;
        if ds.synthetic.is_none() && ds.path.is_none() {
            return Err(Error::Config("missing required key `dataset.path`".into()));
        }
        if ds.synthetic.is_none() && ds.name.is_none() {
            return Err(Error::Config("missing required key `dataset.name`".into()));
        }
        if self.protocol.k == 0 {
            return Err(Error::Config("`protocol.k` must be at least 1".into()));
        }
        self.pretrain.validate()?;
        self.tune.validate()?;
        self.encoder.with_input(1).validate()?;
        if self.pretrain.seed == 0 {
            self.pretrain.seed = stage_seed(self.seed, "pretrain");
        }
        if self.tune.seed == 0 {
            self.tune.seed = stage_seed(self.seed, "tune");
        }
        if self.scalability.seed == 0 {
            self.scalability.seed = stage_seed(self.seed, "scalability");
        }
        Ok(self)
    }

    pub fn dataset_name(&self) -> String {
        match (&self.dataset.name, &self.dataset.synthetic) {
            (Some(n), _) => n.clone(),
            (None, Some(_)) => "synthetic".into(),
            (None, None) => "unnamed".into(),
        }
    }

    /// Directory actually read for the dataset. Relative paths resolve
    /// against `GRAPHPROMPT_DATA_DIR` when set; `<path>/<name>/` is used when
    /// the files live one level down.
    pub fn dataset_dir(&self) -> Option<PathBuf> {
        let path = self.dataset.path.as_ref()?;
        let base = match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) if path.is_relative() => PathBuf::from(dir).join(path),
            _ => path.clone(),
        };
        let name = self.dataset.name.as_deref().unwrap_or_default();
        let nested = base.join(name);
        if !base.join(format!("{name}_A.txt")).exists() && nested.join(format!("{name}_A.txt")).exists() {
            Some(nested)
        } else {
            Some(base)
        }
    }

    pub fn load_collection(&self) -> Result<GraphCollection> {
        if let Some(spec) = &self.dataset.synthetic {
            let mut c = generate_synthetic(spec, self.dataset.synthetic_seed)?;
            c.name = self.dataset_name();
            return Ok(c);
        }
        let dir = self
            .dataset_dir()
            .ok_or_else(|| Error::Config("missing required key `dataset.path`".into()))?;
        let mut c = load_tu_dataset(&dir, &self.dataset_name())?;
        c.name = self.dataset_name();
        Ok(c)
    }

    pub fn experiment_spec(&self) -> ExperimentSpec {
        ExperimentSpec {
            dataset: self.dataset_name(),
            protocol: self.protocol.clone(),
            tune: self.tune.clone(),
            seed: stage_seed(self.seed, "experiment"),
        }
    }
}
