//! Run configuration and the on-disk layout derived from it.

use std::path::{Path, PathBuf};

use cue_core::cues::CueMode;
use cue_core::io::sha256_hex;
use cue_core::metrics::BALANCEDNESS_SIGMA;
use cue_core::neighbors::{LiveConfig, DEFAULT_BATCH_SIZE, DEFAULT_MAX_NEIGHBORS};
use cue_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub dataset: DatasetParams,
    pub cues: CueParams,
    pub neighbors: NeighborParams,
    pub train: TrainConfig,
    pub metrics: MetricParams,
    pub ablation: AblationParams,
}

/// Inputs plus optional explicit locations for artifacts. Unset artifact paths
/// live inside the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    pub test_manifest: Option<PathBuf>,
    pub runs_root: PathBuf,
    pub split: Option<PathBuf>,
    pub zeroshot: Option<PathBuf>,
    pub cue_cache: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            manifest: "train.manifest.json".into(),
            test_manifest: None,
            runs_root: "runs".into(),
            split: None,
            zeroshot: None,
            cue_cache: None,
            graph: None,
            model: None,
            reports: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetParams {
    pub ir: f64,
    /// Head-class size; defaults to the largest class in the manifest.
    pub n_max: Option<usize>,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            ir: 100.0,
            n_max: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CueParams {
    pub k: usize,
    pub mode: CueMode,
}

impl Default for CueParams {
    fn default() -> Self {
        Self {
            k: 5,
            mode: CueMode::Top,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Fixture,
    Live,
}

impl std::str::FromStr for ProviderKind {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "fixture" => Ok(ProviderKind::Fixture),
            "live" => Ok(ProviderKind::Live),
            other => Err(CliError::Config(format!("unknown provider {other:?}, expected fixture or live"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeighborParams {
    pub provider: ProviderKind,
    pub fixture_dir: PathBuf,
    pub batch_size: usize,
    pub max_neighbors: usize,
    pub concurrency: usize,
    pub live: Option<LiveConfig>,
}

impl Default for NeighborParams {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Fixture,
            fixture_dir: "fixtures".into(),
            batch_size: DEFAULT_BATCH_SIZE,
            max_neighbors: DEFAULT_MAX_NEIGHBORS,
            concurrency: 1,
            live: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricParams {
    pub sigma: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            sigma: BALANCEDNESS_SIGMA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationParams {
    pub seeds: Vec<u64>,
    /// Values tried for each loss weight in the sensitivity grid.
    pub grid: Vec<f64>,
    /// Arms trained at once; 0 uses every available core.
    pub workers: usize,
}

impl Default for AblationParams {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            workers: 0,
        }
    }
}

/// Per-field command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub ir: Option<f64>,
    pub k: Option<usize>,
    pub lambda_zs: Option<f64>,
    pub lambda_llm: Option<f64>,
    /// Sets both the split seed and the training seed.
    pub seed: Option<u64>,
    pub mode: Option<CueMode>,
    pub provider: Option<ProviderKind>,
}

impl RunConfig {
    /// Reads JSON or TOML, chosen by extension (`.toml` means TOML).
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, is_toml(path)).map_err(|msg| CliError::Config(format!("{}: {msg}", path.display())))
    }

    pub fn parse(text: &str, toml_format: bool) -> Result<Self, String> {
        if toml_format {
            toml::from_str(text).map_err(|e| e.to_string())
        } else {
            serde_json::from_str(text).map_err(|e| e.to_string())
        }
    }

    pub fn to_text(&self, toml_format: bool) -> CliResult<String> {
        if toml_format {
            toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
        } else {
            let mut s = serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = self.to_text(is_toml(path))?;
        cue_core::io::write_bytes(path, text.as_bytes())?;
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(ir) = o.ir {
            self.dataset.ir = ir;
        }
        if let Some(k) = o.k {
            self.cues.k = k;
        }
        if let Some(l) = o.lambda_zs {
            self.train.loss.lambda_zs = l;
        }
        if let Some(l) = o.lambda_llm {
            self.train.loss.lambda_llm = l;
        }
        if let Some(seed) = o.seed {
            self.dataset.seed = seed;
            self.train.seed = seed;
        }
        if let Some(mode) = o.mode {
            self.cues.mode = mode;
        }
        if let Some(p) = o.provider {
            self.neighbors.provider = p;
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if !(self.dataset.ir >= 1.0 && self.dataset.ir.is_finite()) {
            return Err(CliError::Config(format!("ir must be >= 1, got {}", self.dataset.ir)));
        }
        if self.cues.k == 0 {
            return Err(CliError::Config("k must be at least 1".into()));
        }
        if self.neighbors.batch_size == 0 || self.neighbors.max_neighbors == 0 {
            return Err(CliError::Config("neighbor batch_size and max_neighbors must be positive".into()));
        }
        if !(self.metrics.sigma > 0.0) {
            return Err(CliError::Config("sigma must be positive".into()));
        }
        if self.ablation.seeds.is_empty() || self.ablation.grid.is_empty() {
            return Err(CliError::Config("ablation seeds and grid must be non-empty".into()));
        }
        self.train.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

fn is_toml(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"))
}

/// Absolute-ish locations of every input and artifact for one config.
#[derive(Debug, Clone)]
pub struct Layout {
    pub run_dir: PathBuf,
    pub manifest: PathBuf,
    pub test_manifest: Option<PathBuf>,
    pub split: PathBuf,
    pub zeroshot: PathBuf,
    pub cue_cache: PathBuf,
    pub graph: PathBuf,
    pub filter_report: PathBuf,
    pub responses: PathBuf,
    pub fixture_dir: PathBuf,
    pub model: PathBuf,
    pub reports: PathBuf,
}

impl Layout {
    /// Relative paths resolve against `base`, normally the config file's directory.
    pub fn new(config: &RunConfig, base: &Path) -> Self {
        let p = &config.paths;
        let resolve = |path: &Path| if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
        let run_dir = resolve(&p.runs_root).join(&config.hash()[..16]);
        let in_run = |explicit: &Option<PathBuf>, name: &str| explicit.as_deref().map_or_else(|| run_dir.join(name), resolve);
        let graph = in_run(&p.graph, "graph.json");
        let graph_dir = graph.parent().map(Path::to_path_buf).unwrap_or_default();
        Self {
            manifest: resolve(&p.manifest),
            test_manifest: p.test_manifest.as_deref().map(resolve),
            split: in_run(&p.split, "split.json"),
            zeroshot: in_run(&p.zeroshot, "zeroshot.json"),
            cue_cache: in_run(&p.cue_cache, "cues.json"),
            filter_report: graph_dir.join("filter_report.json"),
            responses: graph_dir.join("responses.json"),
            graph,
            fixture_dir: resolve(&config.neighbors.fixture_dir),
            model: in_run(&p.model, "model.json"),
            reports: in_run(&p.reports, "reports"),
            run_dir,
        }
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.reports.join(name)
    }
}
