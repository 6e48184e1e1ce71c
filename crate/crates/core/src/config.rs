//! Run configuration, one TOML file per experiment.
//!
//! ```toml
//! seed = 1
//! universe = "topics.tsv"        # optional, built-in universe otherwise
//! engine_template = "engine.toml" # optional, default template otherwise
//! out = "run"
//!
//! [[feeds]]
//! topic = 6
//! path = "feeds/politics.xml"
//!
//! [world]                         # synthetic feed world
//! seed = 7
//!
//! [simulation]
//! mode = "topic-exposed"          # or "topic-obfuscated"
//! rate = 3.0                      # decoys per hour, 0 disables
//! weeks = 1
//!
//! [guarantee]
//! epsilon = 0.25
//! p_ob = 1.0
//!
//! [adversary]
//! threshold = 0.5
//! beta = 0.9
//! ```
//!
//! Relative paths resolve against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{Adversary, DEFAULT_SMOOTHING, DEFAULT_THRESHOLD, DEFAULT_USER_COHERENCE};
use crate::corpus::PoolSet;
use crate::sidechannel::{EngineTemplate, SideChannelError};
use crate::sim::SimConfig;
use crate::timing::DEFAULT_SESSION_GAP;
use crate::topics::{TopicError, TopicId, TopicUniverse};
use crate::world::WorldConfig;

pub const DEFAULT_EPSILON: f64 = 0.25;
pub const DEFAULT_BETA: f64 = 0.9;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("referenced file {0} does not exist")]
    Missing(PathBuf),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error(transparent)]
    Template(#[from] SideChannelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedSource {
    pub topic: TopicId,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuaranteeSettings {
    pub epsilon: f64,
    pub p_ob: f64,
}

impl Default for GuaranteeSettings {
    fn default() -> Self {
        GuaranteeSettings {
            epsilon: DEFAULT_EPSILON,
            p_ob: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversarySettings {
    pub threshold: f64,
    /// Target TNR for the resiliency sweep.
    pub beta: f64,
    pub smoothing: f64,
    pub user_coherence: f64,
    pub session_gap: f64,
    /// Count estimates; when absent the adversary assumes `X_est = Y_est`.
    pub x_est: Option<u64>,
    pub y_est: Option<u64>,
}

impl Default for AdversarySettings {
    fn default() -> Self {
        AdversarySettings {
            threshold: DEFAULT_THRESHOLD,
            beta: DEFAULT_BETA,
            smoothing: DEFAULT_SMOOTHING,
            user_coherence: DEFAULT_USER_COHERENCE,
            session_gap: DEFAULT_SESSION_GAP,
            x_est: None,
            y_est: None,
        }
    }
}

impl AdversarySettings {
    pub fn adversary<'a>(&self, universe: &'a TopicUniverse, pools: &'a PoolSet) -> Adversary<'a> {
        let mut a = Adversary::new(universe, pools);
        if let (Some(x), Some(y)) = (self.x_est, self.y_est) {
            a = a.with_estimates(x, y);
        }
        a.smoothing = self.smoothing;
        a.user_coherence = self.user_coherence;
        a.session_gap = self.session_gap;
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub universe: Option<PathBuf>,
    pub engine_template: Option<PathBuf>,
    pub out: PathBuf,
    pub feeds: Vec<FeedSource>,
    pub world: WorldConfig,
    pub simulation: SimConfig,
    pub guarantee: GuaranteeSettings,
    pub adversary: AdversarySettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            universe: None,
            engine_template: None,
            out: PathBuf::from("out"),
            feeds: Vec::new(),
            world: WorldConfig::default(),
            simulation: SimConfig::default(),
            guarantee: GuaranteeSettings::default(),
            adversary: AdversarySettings::default(),
        }
    }
}

impl RunConfig {
    /// Parses without touching the file system.
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = RunConfig::from_toml(&text).map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.universe.as_mut() {
            join(p);
        }
        if let Some(p) = self.engine_template.as_mut() {
            join(p);
        }
        join(&mut self.out);
        for f in &mut self.feeds {
            join(&mut f.path);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let files = self
            .universe
            .iter()
            .chain(self.engine_template.iter())
            .chain(self.feeds.iter().map(|f| &f.path));
        for p in files {
            if !p.exists() {
                return Err(ConfigError::Missing(p.clone()));
            }
        }
        let sim = &self.simulation;
        if !(sim.rate.is_finite() && sim.rate >= 0.0) {
            return Err(ConfigError::Invalid(format!("rate must be finite and nonnegative, got {}", sim.rate)));
        }
        if sim.weeks == 0 || sim.history_weeks == 0 {
            return Err(ConfigError::Invalid("weeks and history_weeks must be positive".into()));
        }
        let g = &self.guarantee;
        if !(0.0..=1.0).contains(&g.p_ob) {
            return Err(ConfigError::Invalid(format!("p_ob must lie in [0, 1], got {}", g.p_ob)));
        }
        if !(g.epsilon > 0.0 && g.epsilon < 1.0) {
            return Err(ConfigError::Invalid(format!("epsilon must lie in (0, 1), got {}", g.epsilon)));
        }
        let a = &self.adversary;
        if !(a.beta > 0.0 && a.beta < 1.0) {
            return Err(ConfigError::Invalid(format!("beta must lie in (0, 1), got {}", a.beta)));
        }
        if a.x_est.is_some() != a.y_est.is_some() {
            return Err(ConfigError::Invalid("x_est and y_est must be given together".into()));
        }
        Ok(())
    }

    /// Simulation settings with the run seed applied.
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            ..self.simulation.clone()
        }
    }

    pub fn load_universe(&self) -> Result<TopicUniverse, ConfigError> {
        match &self.universe {
            None => Ok(TopicUniverse::default_universe()),
            Some(p) => {
                let file = fs::File::open(p).map_err(|source| ConfigError::Io {
                    path: p.clone(),
                    source,
                })?;
                let version = p.file_stem().and_then(|s| s.to_str()).unwrap_or("file");
                Ok(TopicUniverse::from_records(std::io::BufReader::new(file), version)?)
            }
        }
    }

    pub fn load_template(&self) -> Result<EngineTemplate, ConfigError> {
        match &self.engine_template {
            None => Ok(EngineTemplate::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.clone(),
                    source,
                })?;
                Ok(EngineTemplate::from_toml(&text)?)
            }
        }
    }
}
