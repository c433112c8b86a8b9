//! One function per pipeline stage. Each checks its upstream artifacts, then
//! writes exactly its own outputs.

use std::path::{Path, PathBuf};

use cue_core::cues::{
    expand_targets_llm, expand_targets_zs, variant_cues, zero_shot_logits, CueCache, CueKind, CueTargets,
    ZeroShotLogits,
};
use cue_core::dataset::{compute_prior, ClassCounts, ClassPrior, LabeledEmbeddings, SplitDescriptor};
use cue_core::io::{file_sha256, read_json, sha256_hex, write_json};
use cue_core::metrics::{
    evaluate_with_sigma, per_class_csv, render_eval_table, render_transition_table, transition_analysis,
    EvalReport, TransitionReport,
};
use cue_core::neighbors::{
    build_neighbor_graph, FixtureProvider, LiveProvider, NeighborGraph, PipelineConfig, PipelineOutput, Provider,
};
use cue_core::tensorio::{self, load_dataset, LoadedDataset, Manifest};
use cue_core::trainer::{train, HeadModel, TrainConfig, TrainReport};
use cue_core::{io, Matrix};
use serde::{Deserialize, Serialize};

use crate::config::{Layout, ProviderKind, RunConfig};
use crate::error::{CliError, CliResult};

pub const PRODUCER_MANIFEST: &str = "cue synth";
pub const PRODUCER_SPLIT: &str = "cue split";
pub const PRODUCER_ZEROSHOT: &str = "cue zeroshot";
pub const PRODUCER_CUES: &str = "cue cues";
pub const PRODUCER_GRAPH: &str = "cue neighbors";
pub const PRODUCER_MODEL: &str = "cue train";

/// A validated config plus where its files live.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub layout: Layout,
}

impl Context {
    pub fn new(config: RunConfig, base: &Path) -> CliResult<Self> {
        config.validate()?;
        let layout = Layout::new(&config, base);
        Ok(Self { config, layout })
    }

    /// Loads `path` and resolves relative paths against its directory.
    pub fn from_file(path: &Path, overrides: &crate::config::Overrides) -> CliResult<Self> {
        let mut config = RunConfig::load(path)?;
        config.apply(overrides);
        Self::new(config, path.parent().unwrap_or(Path::new("")))
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    /// Records the effective config in the run directory.
    fn record_config(&self) -> CliResult<()> {
        write_json(&self.layout.run_dir.join("config.json"), &self.config)?;
        Ok(())
    }
}

pub(crate) fn require(path: &Path, producer: &'static str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        })
    }
}

fn stale(path: &Path, producer: &'static str, reason: impl Into<String>) -> CliError {
    CliError::StaleArtifact {
        path: path.to_path_buf(),
        producer,
        reason: reason.into(),
    }
}

fn test_manifest(ctx: &Context) -> CliResult<&Path> {
    let path = ctx
        .layout
        .test_manifest
        .as_deref()
        .ok_or_else(|| CliError::Config("paths.test_manifest is required for evaluation".into()))?;
    require(path, PRODUCER_MANIFEST)?;
    Ok(path)
}

/// Hash of a manifest together with the arrays it points at.
pub fn dataset_key(manifest_path: &Path) -> CliResult<String> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    let mut parts = vec![file_sha256(manifest_path)?];
    for p in [&manifest.features_path, &manifest.prototypes_path, &manifest.labels_path] {
        parts.push(file_sha256(&base.join(p))?);
    }
    Ok(sha256_hex(parts.join(":").as_bytes()))
}

pub fn cmd_split(ctx: &Context) -> CliResult<SplitDescriptor> {
    let layout = &ctx.layout;
    require(&layout.manifest, PRODUCER_MANIFEST)?;
    let data = load_dataset(&layout.manifest)?;
    let emb = &data.embeddings;
    let n_max = match ctx.config.dataset.n_max {
        Some(n) => n,
        None => emb.counts().0.iter().copied().max().unwrap_or(0),
    };
    let d = &ctx.config.dataset;
    let mut split = SplitDescriptor::build(emb.labels(), emb.num_classes(), n_max, d.ir, d.seed)?;
    split.source_hash = Some(dataset_key(&layout.manifest)?);
    split.save(&layout.split)?;
    ctx.record_config()?;
    log::info!("split: {} of {} samples -> {}", split.flat_indices().len(), emb.len(), layout.split.display());
    Ok(split)
}

/// The long-tailed training subset with the data it was cut from.
pub struct TrainData {
    pub full: LoadedDataset,
    pub split: SplitDescriptor,
    pub train: LabeledEmbeddings,
    pub dataset_key: String,
    pub split_key: String,
}

impl TrainData {
    pub fn counts(&self) -> ClassCounts {
        self.train.counts()
    }

    pub fn prior(&self) -> CliResult<ClassPrior> {
        Ok(compute_prior(&self.counts())?)
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.full.prototypes
    }

    fn cue_key(&self) -> String {
        sha256_hex(format!("{}:{}", self.dataset_key, self.split_key).as_bytes())
    }
}

pub fn load_train_data(ctx: &Context) -> CliResult<TrainData> {
    let layout = &ctx.layout;
    require(&layout.manifest, PRODUCER_MANIFEST)?;
    require(&layout.split, PRODUCER_SPLIT)?;
    let dataset_key = dataset_key(&layout.manifest)?;
    let split = SplitDescriptor::load(&layout.split)?;
    if split.source_hash.as_deref() != Some(dataset_key.as_str()) {
        return Err(stale(&layout.split, PRODUCER_SPLIT, "built from a different manifest"));
    }
    let full = load_dataset(&layout.manifest)?;
    let indices = split.flat_indices();
    if let Some(&bad) = indices.iter().find(|&&i| i >= full.embeddings.len()) {
        return Err(stale(&layout.split, PRODUCER_SPLIT, format!("index {bad} is out of range")));
    }
    let train = full.embeddings.subset(&indices);
    Ok(TrainData {
        split_key: file_sha256(&layout.split)?,
        full,
        split,
        train,
        dataset_key,
    })
}

/// Sidecar describing the zero-shot tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotMeta {
    pub split_key: String,
    pub classes: usize,
    /// Cosine scores for the training subset, one row per sample in split order.
    pub train_scores: PathBuf,
    pub test_predictions: Option<PathBuf>,
    pub test_accuracy: Option<f64>,
}

pub struct ZeroShotArtifacts {
    pub train_scores: ZeroShotLogits,
    pub test_predictions: Option<Vec<usize>>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("artifact");
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn cmd_zeroshot(ctx: &Context) -> CliResult<ZeroShotMeta> {
    let data = load_train_data(ctx)?;
    let layout = &ctx.layout;
    let scores = zero_shot_logits(data.train.features(), data.prototypes())?;
    let scores_path = sibling(&layout.zeroshot, "train.bin");
    tensorio::write_tensor(&scores_path, &scores.to_matrix())?;

    let (mut test_predictions, mut test_accuracy) = (None, None);
    if let Some(path) = layout.test_manifest.as_deref() {
        require(path, PRODUCER_MANIFEST)?;
        let test = load_dataset(path)?;
        if test.embeddings.class_names() != data.train.class_names() {
            return Err(CliError::Config("train and test manifests list different classes".into()));
        }
        let preds = zero_shot_logits(test.embeddings.features(), &test.prototypes)?.predict();
        let correct = preds.iter().zip(test.embeddings.labels()).filter(|(p, y)| p == y).count();
        test_accuracy = Some(correct as f64 / preds.len().max(1) as f64);
        let preds_path = sibling(&layout.zeroshot, "test.labels.bin");
        tensorio::write_labels(&preds_path, &preds)?;
        test_predictions = Some(file_name(&preds_path));
    }
    let meta = ZeroShotMeta {
        split_key: data.split_key,
        classes: data.train.num_classes(),
        train_scores: file_name(&scores_path),
        test_predictions,
        test_accuracy,
    };
    write_json(&layout.zeroshot, &meta)?;
    ctx.record_config()?;
    Ok(meta)
}

fn file_name(path: &Path) -> PathBuf {
    path.file_name().map(PathBuf::from).unwrap_or_default()
}

pub fn load_zeroshot(ctx: &Context, data: &TrainData) -> CliResult<ZeroShotArtifacts> {
    let path = &ctx.layout.zeroshot;
    require(path, PRODUCER_ZEROSHOT)?;
    let meta: ZeroShotMeta = read_json(path)?;
    if meta.split_key != data.split_key {
        return Err(stale(path, PRODUCER_ZEROSHOT, "computed for a different split"));
    }
    let dir = path.parent().unwrap_or(Path::new(""));
    let scores_path = dir.join(&meta.train_scores);
    require(&scores_path, PRODUCER_ZEROSHOT)?;
    let matrix = tensorio::read_tensor(&scores_path)?;
    if matrix.rows() != data.train.len() || matrix.cols() != data.train.num_classes() {
        return Err(stale(path, PRODUCER_ZEROSHOT, "score tensor shape disagrees with the split"));
    }
    let test_predictions = match &meta.test_predictions {
        Some(p) => {
            let p = dir.join(p);
            require(&p, PRODUCER_ZEROSHOT)?;
            Some(tensorio::read_labels(&p)?)
        }
        None => None,
    };
    Ok(ZeroShotArtifacts {
        train_scores: ZeroShotLogits::from_matrix(&matrix),
        test_predictions,
    })
}

pub fn cmd_cues(ctx: &Context) -> CliResult<CueCache> {
    let data = load_train_data(ctx)?;
    let zs = load_zeroshot(ctx, &data)?;
    let c = &ctx.config;
    let lists = variant_cues(&zs.train_scores, data.train.labels(), c.cues.k, c.cues.mode, c.train.seed)?;
    let cache = CueCache {
        kind: CueKind::Zs,
        k: c.cues.k,
        mode: c.cues.mode,
        seed: c.train.seed,
        key: data.cue_key(),
        per_sample_cue_lists: lists,
    };
    cache.save(&ctx.layout.cue_cache)?;
    ctx.record_config()?;
    Ok(cache)
}

fn load_cues(ctx: &Context, data: &TrainData) -> CliResult<CueCache> {
    let path = &ctx.layout.cue_cache;
    require(path, PRODUCER_CUES)?;
    let cache = CueCache::load(path)?;
    let c = &ctx.config;
    if cache.key != data.cue_key() {
        return Err(stale(path, PRODUCER_CUES, "mined from a different manifest or split"));
    }
    if cache.k != c.cues.k || cache.mode != c.cues.mode || cache.seed != c.train.seed {
        return Err(stale(path, PRODUCER_CUES, "k, mode or seed differ from the config"));
    }
    if cache.per_sample_cue_lists.len() != data.train.len() {
        return Err(stale(path, PRODUCER_CUES, "row count differs from the split"));
    }
    Ok(cache)
}

fn provider(ctx: &Context) -> CliResult<Box<dyn Provider>> {
    let n = &ctx.config.neighbors;
    match n.provider {
        ProviderKind::Fixture => Ok(Box::new(FixtureProvider::new(&ctx.layout.fixture_dir))),
        ProviderKind::Live => {
            let live = n
                .live
                .clone()
                .ok_or_else(|| CliError::Config("neighbors.live must be set for the live provider".into()))?;
            Ok(Box::new(LiveProvider::from_env(live).map_err(cue_core::Error::from)?))
        }
    }
}

pub fn cmd_neighbors(ctx: &Context) -> CliResult<PipelineOutput> {
    let layout = &ctx.layout;
    require(&layout.manifest, PRODUCER_MANIFEST)?;
    let manifest = Manifest::load(&layout.manifest)?;
    let provider = provider(ctx)?;
    let n = &ctx.config.neighbors;
    let pipeline = PipelineConfig {
        batch_size: n.batch_size,
        max_neighbors: n.max_neighbors,
        concurrency: n.concurrency,
    };
    let out = build_neighbor_graph(&manifest.classes, provider.as_ref(), &pipeline)?;
    out.graph.save(&layout.graph)?;
    out.report.save(&layout.filter_report)?;
    write_json(&layout.responses, &out.responses)?;
    ctx.record_config()?;
    log::info!(
        "graph: {} classes, {} dropped names, {} uncovered",
        out.graph.num_classes(),
        out.report.dropped.len(),
        out.report.uncovered.len()
    );
    Ok(out)
}

pub fn load_graph(ctx: &Context, classes: &[String]) -> CliResult<NeighborGraph> {
    let path = &ctx.layout.graph;
    require(path, PRODUCER_GRAPH)?;
    let graph = NeighborGraph::load(path)?;
    if graph.classes != classes {
        return Err(stale(path, PRODUCER_GRAPH, "class list differs from the manifest"));
    }
    Ok(graph)
}

/// Everything an arm needs besides its own weights and cue lists.
pub struct ArmInputs {
    pub data: TrainData,
    pub prior: ClassPrior,
    pub scores: Option<ZeroShotLogits>,
    pub graph: Option<NeighborGraph>,
}

impl ArmInputs {
    /// Trains one head. `zs_cues` may be `None` only when the VLM cue weight is zero.
    pub fn fit(&self, zs_cues: Option<&[Vec<usize>]>, config: &TrainConfig) -> CliResult<TrainReport> {
        let train_set = &self.data.train;
        let labels = train_set.labels();
        let classes = train_set.num_classes();
        let t_zs = match zs_cues {
            Some(c) => expand_targets_zs(c, labels, classes)?,
            None if config.loss.lambda_zs == 0.0 => CueTargets::one_hot(labels, classes, CueKind::Zs),
            None => return Err(CliError::Config("VLM cues are required when lambda_zs > 0".into())),
        };
        let t_llm = match &self.graph {
            Some(g) => expand_targets_llm(g, labels, classes)?,
            None if config.loss.lambda_llm == 0.0 => CueTargets::one_hot(labels, classes, CueKind::Llm),
            None => return Err(CliError::Config("a neighbor graph is required when lambda_llm > 0".into())),
        };
        Ok(train(train_set, &self.prior, &t_zs, &t_llm, Some(self.data.prototypes()), config)?)
    }
}

pub fn cmd_train(ctx: &Context) -> CliResult<TrainReport> {
    let data = load_train_data(ctx)?;
    let loss = &ctx.config.train.loss;
    let cues = if loss.lambda_zs > 0.0 {
        Some(load_cues(ctx, &data)?)
    } else {
        None
    };
    let graph = if loss.lambda_llm > 0.0 {
        Some(load_graph(ctx, data.train.class_names())?)
    } else {
        None
    };
    let inputs = ArmInputs {
        prior: data.prior()?,
        data,
        scores: None,
        graph,
    };
    let report = inputs.fit(cues.as_ref().map(|c| c.per_sample_cue_lists.as_slice()), &ctx.config.train)?;
    report.model.save(&ctx.layout.model, &report.config_hash)?;
    write_json(&ctx.layout.report("train.json"), &report.summary(&ctx.config.train))?;
    ctx.record_config()?;
    Ok(report)
}

#[derive(Debug)]
pub struct EvalOutput {
    pub eval: EvalReport,
    pub transitions: TransitionReport,
    pub table: String,
}

pub fn cmd_eval(ctx: &Context) -> CliResult<EvalOutput> {
    let layout = &ctx.layout;
    require(&layout.model, PRODUCER_MODEL)?;
    let data = load_train_data(ctx)?;
    let zs = load_zeroshot(ctx, &data)?;
    let test_path = test_manifest(ctx)?;
    let test = load_dataset(test_path)?.embeddings;
    let zs_predictions = zs
        .test_predictions
        .ok_or_else(|| stale(&layout.zeroshot, PRODUCER_ZEROSHOT, "no test predictions recorded"))?;
    if zs_predictions.len() != test.len() {
        return Err(stale(&layout.zeroshot, PRODUCER_ZEROSHOT, "test prediction count differs from the test set"));
    }
    let graph = if layout.graph.exists() {
        load_graph(ctx, data.train.class_names())?
    } else {
        NeighborGraph::empty(data.train.class_names().to_vec())
    };

    let (model, _) = HeadModel::load(&layout.model)?;
    let predictions = model.predict(test.features())?;
    let counts = data.counts();
    let eval = evaluate_with_sigma(&predictions, test.labels(), &counts, ctx.config.metrics.sigma)?;
    let transitions = transition_analysis(&zs_predictions, &predictions, test.labels(), &graph)?;
    let table = format!("{}\n{}", render_eval_table(&eval), render_transition_table(&transitions));

    write_json(&layout.report("eval.json"), &eval)?;
    write_json(&layout.report("transitions.json"), &transitions)?;
    io::write_bytes(&layout.report("eval.txt"), table.as_bytes())?;
    let csv = per_class_csv(test.class_names(), &counts, &eval, Some(&transitions));
    io::write_bytes(&layout.report("per_class.csv"), csv.as_bytes())?;
    ctx.record_config()?;
    Ok(EvalOutput {
        eval,
        transitions,
        table,
    })
}

/// Loads what the ablation and sweep harnesses share: data, zero-shot scores, graph and test set.
pub fn load_harness_inputs(ctx: &Context) -> CliResult<(ArmInputs, LabeledEmbeddings)> {
    let data = load_train_data(ctx)?;
    let zs = load_zeroshot(ctx, &data)?;
    let graph = load_graph(ctx, data.train.class_names())?;
    let test = load_dataset(test_manifest(ctx)?)?.embeddings;
    if test.class_names() != data.train.class_names() {
        return Err(CliError::Config("train and test manifests list different classes".into()));
    }
    Ok((
        ArmInputs {
            prior: data.prior()?,
            data,
            scores: Some(zs.train_scores),
            graph: Some(graph),
        },
        test,
    ))
}
