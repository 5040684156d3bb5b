//! Run configuration shared by every pipeline subcommand.
//!
//! One TOML file describes a batch run end to end: where inputs and
//! artifacts live, which backend answers prompts, each stage's tunables,
//! and the seed every random draw descends from. Command-line flags beat
//! the file, the file beats built-in defaults, and the hash of the resolved
//! configuration is echoed into every artifact so an output is always
//! traceable to the exact settings that produced it.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cohort::{parse_dims, CohortConfig};
use crate::eval::BinningConfig;
use crate::gateway::{BackendKind, GatewayError, RemoteConfig, ScriptedBackend};
use crate::pattern::PatternConfig;
use crate::reasoner::ReasonerConfig;
use crate::spatial::grid::GridSpec;

/// Configuration loading or validation failure.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("backend setup failed")]
    Backend(#[from] GatewayError),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

// ---------------------------------------------------------------------------
// Backend selection
// ---------------------------------------------------------------------------

/// Which backend answers prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    /// Offline statistical replay; the default, and fully deterministic.
    #[default]
    Replay,
    /// Canned responses from a fixture file.
    Scripted,
    /// A live HTTP chat-completion endpoint.
    Remote,
}

impl BackendChoice {
    pub fn id(self) -> &'static str {
        match self {
            BackendChoice::Replay => "replay",
            BackendChoice::Scripted => "scripted",
            BackendChoice::Remote => "remote",
        }
    }
}

impl fmt::Display for BackendChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for BackendChoice {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<BackendChoice, ConfigError> {
        match s {
            "replay" => Ok(BackendChoice::Replay),
            "scripted" => Ok(BackendChoice::Scripted),
            "remote" => Ok(BackendChoice::Remote),
            other => Err(invalid(format!(
                "unknown backend {other:?}; expected replay, scripted, or remote"
            ))),
        }
    }
}

/// Backend selection plus per-kind parameters; only the chosen kind's
/// parameters are read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendChoice,
    /// Exchange NDJSON consumed by the scripted backend.
    pub fixtures: Option<PathBuf>,
    /// Endpoint parameters for the remote backend. The API key comes only
    /// from the `MOBFORGE_LLM_API_KEY` environment variable, never from
    /// this file.
    pub remote: RemoteConfig,
}

// ---------------------------------------------------------------------------
// Paths
// ---------------------------------------------------------------------------

/// Input and artifact locations. Inputs are explicit; artifacts default to
/// well-known names under `out_dir` unless pinned individually.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Survey CSVs for `ingest`.
    pub survey_profiles: Option<PathBuf>,
    pub survey_trips: Option<PathBuf>,
    /// Synthetic-survey spec TOML for `synth`.
    pub synth_spec: Option<PathBuf>,
    /// Road-network CSVs; the three files go together. When unset, the
    /// `network_grid` section supplies a synthetic grid instead.
    pub network_nodes: Option<PathBuf>,
    pub network_edges: Option<PathBuf>,
    pub network_pois: Option<PathBuf>,
    /// Directory the defaulted artifact paths below are rooted at. The
    /// `--out` flag rebases it, moving every artifact not pinned here.
    pub out_dir: PathBuf,
    /// Normalized dataset NDJSON written by `ingest`/`synth`.
    pub dataset: Option<PathBuf>,
    /// Cohort hierarchy written by `cohort`.
    pub cohorts: Option<PathBuf>,
    /// Pattern set written by `patterns`.
    pub patterns: Option<PathBuf>,
    /// Generated diaries written by `generate`.
    pub diaries: Option<PathBuf>,
    /// Evaluation report written by `evaluate`.
    pub report: Option<PathBuf>,
    /// Append-only exchange transcript reused as the response cache.
    pub cache: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            survey_profiles: None,
            survey_trips: None,
            synth_spec: None,
            network_nodes: None,
            network_edges: None,
            network_pois: None,
            out_dir: PathBuf::from("out"),
            dataset: None,
            cohorts: None,
            patterns: None,
            diaries: None,
            report: None,
            cache: None,
        }
    }
}

impl PathsConfig {
    fn under_out(&self, pinned: &Option<PathBuf>, name: &str) -> PathBuf {
        pinned.clone().unwrap_or_else(|| self.out_dir.join(name))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.under_out(&self.dataset, "dataset.ndjson")
    }

    pub fn cohorts_path(&self) -> PathBuf {
        self.under_out(&self.cohorts, "cohorts.json")
    }

    pub fn patterns_path(&self) -> PathBuf {
        self.under_out(&self.patterns, "patterns.ndjson")
    }

    pub fn diaries_path(&self) -> PathBuf {
        self.under_out(&self.diaries, "diaries.ndjson")
    }

    pub fn report_path(&self) -> PathBuf {
        self.under_out(&self.report, "report.json")
    }

    pub fn cache_path(&self) -> PathBuf {
        self.under_out(&self.cache, "transcript.ndjson")
    }
}

// ---------------------------------------------------------------------------
// Ablations and generation targets
// ---------------------------------------------------------------------------

/// Switches that disable individual pipeline stages for ablation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Skip pattern understanding and its self-evaluation loop entirely;
    /// cohort patterns carry only their raw statistical digests.
    pub disable_self_evaluation: bool,
    /// Accept each step's first decision (or fall straight back to the
    /// sampler); never re-prompt on a rejected decision.
    pub disable_rethink: bool,
    /// Restrict cohort division to these profile dimensions instead of the
    /// configured split order.
    pub pattern_dims_override: Option<Vec<String>>,
}

/// What `generate` produces: one candidate person-day per profile × date,
/// in profile order, truncated once `max_person_days` is reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Calendar dates to synthesize diaries for.
    pub dates: Vec<chrono::NaiveDate>,
    /// Cap on emitted person-days; 0 means every profile × date pair.
    pub max_person_days: u64,
}

// ---------------------------------------------------------------------------
// The top-level run configuration
// ---------------------------------------------------------------------------

/// Everything one batch run needs, loadable from a single TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every random draw in the pipeline descends from it.
    pub run_seed: u64,
    /// Parallel diary-generation workers; 0 sizes the pool to the host.
    pub workers: usize,
    pub paths: PathsConfig,
    pub backend: BackendConfig,
    /// Synthetic grid network, used when the network CSV paths are unset.
    pub network_grid: Option<GridSpec>,
    pub cohort: CohortConfig,
    pub pattern: PatternConfig,
    pub reasoner: ReasonerConfig,
    pub binning: BinningConfig,
    pub ablation: AblationFlags,
    pub generate: GenerateConfig,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub backend: Option<BackendChoice>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<RunConfig, ConfigError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<inline>".to_owned(),
            source: Box::new(e),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads, parses, and validates a config file.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            source: Box::new(e),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Applies command-line overrides: flags > file > defaults.
    pub fn apply_overrides(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.run_seed = seed;
        }
        if let Some(backend) = overrides.backend {
            self.backend.kind = backend;
        }
        if let Some(workers) = overrides.workers {
            self.workers = workers;
        }
        if let Some(out) = &overrides.out {
            self.paths.out_dir = out.clone();
        }
    }

    /// Rejects configurations that could only fail later and further from
    /// the mistake.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.backend.kind == BackendChoice::Scripted && self.backend.fixtures.is_none() {
            return Err(invalid("backend.kind = \"scripted\" requires backend.fixtures"));
        }

        parse_dims(&self.cohort.dims).map_err(|e| invalid(e.to_string()))?;
        if let Some(dims) = &self.ablation.pattern_dims_override {
            parse_dims(dims).map_err(|e| invalid(e.to_string()))?;
        }
        if !(1..=10).contains(&self.cohort.split_threshold) {
            return Err(invalid(format!(
                "cohort.split_threshold {} is outside 1..=10",
                self.cohort.split_threshold
            )));
        }

        let p = &self.pattern;
        if !(p.holdout_fraction > 0.0 && p.holdout_fraction < 1.0) {
            return Err(invalid(format!(
                "pattern.holdout_fraction {} must lie strictly between 0 and 1",
                p.holdout_fraction
            )));
        }
        if !(0.0..=1.0).contains(&p.revision_threshold) {
            return Err(invalid(format!(
                "pattern.revision_threshold {} is outside [0, 1]",
                p.revision_threshold
            )));
        }
        if p.distance_tolerance < 0.0 {
            return Err(invalid("pattern.distance_tolerance must be nonnegative"));
        }

        let r = &self.reasoner;
        if !(r.snap_radius_m > 0.0) {
            return Err(invalid("reasoner.snap_radius_m must be positive"));
        }
        for (mode, cruise) in &r.cruise_speeds_kmh.0 {
            let cap = r
                .speed_caps
                .cap_kmh(*mode)
                .ok_or_else(|| invalid(format!("reasoner.speed_caps is missing {mode}")))?;
            if *cruise > cap {
                return Err(invalid(format!(
                    "reasoner cruise speed {cruise} km/h for {mode} exceeds its cap {cap}"
                )));
            }
            if !(*cruise > 0.0) {
                return Err(invalid(format!("reasoner cruise speed for {mode} must be positive")));
            }
        }

        let b = &self.binning;
        if b.sd_bins == 0 {
            return Err(invalid("binning.sd_bins must be at least 1"));
        }
        if !(b.sd_min_m > 0.0 && b.sd_max_m > b.sd_min_m) {
            return Err(invalid(format!(
                "binning distance range [{}, {}] must be positive and increasing",
                b.sd_min_m, b.sd_max_m
            )));
        }
        if b.si_bin_minutes == 0 {
            return Err(invalid("binning.si_bin_minutes must be at least 1"));
        }
        if !(b.cell_size_m > 0.0) {
            return Err(invalid("binning.cell_size_m must be positive"));
        }

        if let Some(grid) = &self.network_grid {
            if grid.rows < 2 || grid.cols < 2 {
                return Err(invalid("network_grid needs at least 2 rows and 2 columns"));
            }
            if !(grid.spacing_m > 0.0) {
                return Err(invalid("network_grid.spacing_m must be positive"));
            }
        }
        Ok(())
    }

    /// Materializes the configured backend. The replay backend is keyed by
    /// `run_seed`; the scripted backend loads its fixture file strictly.
    pub fn backend_kind(&self) -> Result<BackendKind, ConfigError> {
        match self.backend.kind {
            BackendChoice::Replay => Ok(BackendKind::Replay { run_seed: self.run_seed }),
            BackendChoice::Scripted => {
                let path = self
                    .backend
                    .fixtures
                    .as_ref()
                    .ok_or_else(|| invalid("scripted backend has no fixtures path"))?;
                Ok(BackendKind::Scripted(ScriptedBackend::load_ndjson(path, true)?))
            }
            BackendChoice::Remote => Ok(BackendKind::Remote(self.backend.remote.clone())),
        }
    }

    /// The cohort configuration with the ablation dimension override folded
    /// in.
    pub fn effective_cohort(&self) -> CohortConfig {
        let mut cohort = self.cohort.clone();
        if let Some(dims) = &self.ablation.pattern_dims_override {
            cohort.dims = dims.clone();
        }
        cohort
    }

    /// Hex SHA-256 of the configuration's canonical JSON form, with artifact
    /// locations and the worker count zeroed out first: two runs with equal
    /// hashes produce identical artifact contents, wherever they write them
    /// and however many threads they use.
    pub fn config_hash(&self) -> String {
        let mut content = self.clone();
        content.paths = PathsConfig::default();
        content.workers = 0;
        let canonical =
            serde_json::to_string(&content).expect("config serialization cannot fail");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            use std::fmt::Write as _;
            let _ = write!(hex, "{byte:02x}");
        }
        hex
    }

    /// The provenance object embedded in every artifact.
    pub fn echo_meta(&self) -> serde_json::Value {
        serde_json::json!({
            "config_sha256": self.config_hash(),
            "run_seed": self.run_seed,
            "backend": self.backend.kind.id(),
        })
    }
}
