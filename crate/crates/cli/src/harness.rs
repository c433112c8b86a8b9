//! Ablation arms, the loss-weight sweep, and the synthetic demo dataset.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use cue_core::cues::{variant_cues, CueMode};
use cue_core::dataset::LabeledEmbeddings;
use cue_core::io::{write_bytes, write_json};
use cue_core::metrics::{evaluate_with_sigma, EvalReport};
use cue_core::synthetic::{reference_train_config, SyntheticBenchmark, SyntheticConfig};
use cue_core::tensorio::save_dataset;
use cue_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::commands::{load_harness_inputs, ArmInputs, Context};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationTable {
    /// Which cue terms are switched on.
    Components,
    /// How the VLM cues are picked.
    CueSelection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: &'static str,
    pub table: AblationTable,
    pub mode: CueMode,
    pub lambda_zs: f64,
    pub lambda_llm: f64,
}

/// The seven arms, with cue weights taken from `config` where an arm enables a term.
pub fn ablation_arms(config: &TrainConfig) -> Vec<Arm> {
    let (zs, llm) = (config.loss.lambda_zs, config.loss.lambda_llm);
    let arm = |name, table, mode, lambda_zs, lambda_llm| Arm {
        name,
        table,
        mode,
        lambda_zs,
        lambda_llm,
    };
    use AblationTable::*;
    vec![
        arm("neither", Components, CueMode::Top, 0.0, 0.0),
        arm("vlm_only", Components, CueMode::Top, zs, 0.0),
        arm("llm_only", Components, CueMode::Top, 0.0, llm),
        arm("both", Components, CueMode::Top, zs, llm),
        arm("top", CueSelection, CueMode::Top, zs, llm),
        arm("random", CueSelection, CueMode::Random, zs, llm),
        arm("last", CueSelection, CueMode::Last, zs, llm),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub arm: String,
    pub table: AblationTable,
    pub seed: Option<u64>,
    pub all: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

impl AccuracyRow {
    fn from_eval(arm: &Arm, seed: Option<u64>, e: &EvalReport) -> Self {
        Self {
            arm: arm.name.into(),
            table: arm.table,
            seed,
            all: e.overall_acc,
            many: e.acc_many,
            medium: e.acc_medium,
            few: e.acc_few,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<AccuracyRow>,
    /// One row per arm, averaged over seeds.
    pub means: Vec<AccuracyRow>,
}

/// Runs `jobs` on up to `workers` threads; results come back in job order.
fn run_parallel<J: Sync, T: Send>(jobs: &[J], workers: usize, f: impl Fn(&J) -> CliResult<T> + Sync) -> CliResult<Vec<T>> {
    let workers = if workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        workers
    }
    .min(jobs.len())
    .max(1);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<T>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Trains one arm under `seed` and scores it on `test`.
pub fn run_arm(
    inputs: &ArmInputs,
    test: &LabeledEmbeddings,
    base: &RunConfig,
    mode: CueMode,
    lambda_zs: f64,
    lambda_llm: f64,
    seed: u64,
) -> CliResult<EvalReport> {
    let mut config = base.train.clone();
    config.seed = seed;
    config.loss.lambda_zs = lambda_zs;
    config.loss.lambda_llm = lambda_llm;
    let cues = match (&inputs.scores, lambda_zs > 0.0) {
        (Some(scores), true) => Some(variant_cues(scores, inputs.data.train.labels(), base.cues.k, mode, seed)?),
        _ => None,
    };
    let report = inputs.fit(cues.as_deref(), &config)?;
    let predictions = report.model.predict(test.features())?;
    Ok(evaluate_with_sigma(&predictions, test.labels(), &inputs.data.counts(), base.metrics.sigma)?)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.collect::<Option<Vec<_>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn ablate_with(ctx: &Context, inputs: &ArmInputs, test: &LabeledEmbeddings) -> CliResult<AblationReport> {
    let config = &ctx.config;
    let arms = ablation_arms(&config.train);
    let seeds = &config.ablation.seeds;
    let jobs: Vec<(Arm, u64)> = arms.iter().flat_map(|a| seeds.iter().map(move |&s| (*a, s))).collect();
    let evals = run_parallel(&jobs, config.ablation.workers, |(arm, seed)| {
        run_arm(inputs, test, config, arm.mode, arm.lambda_zs, arm.lambda_llm, *seed)
    })?;
    let rows: Vec<AccuracyRow> = jobs
        .iter()
        .zip(&evals)
        .map(|((arm, seed), e)| AccuracyRow::from_eval(arm, Some(*seed), e))
        .collect();
    let means = arms
        .iter()
        .map(|arm| {
            let mine: Vec<&AccuracyRow> = rows.iter().filter(|r| r.arm == arm.name).collect();
            AccuracyRow {
                arm: arm.name.into(),
                table: arm.table,
                seed: None,
                all: mine.iter().map(|r| r.all).sum::<f64>() / mine.len() as f64,
                many: mean(mine.iter().map(|r| r.many)),
                medium: mean(mine.iter().map(|r| r.medium)),
                few: mean(mine.iter().map(|r| r.few)),
            }
        })
        .collect();
    Ok(AblationReport {
        config_hash: ctx.config_hash(),
        k: config.cues.k,
        seeds: seeds.clone(),
        rows,
        means,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

pub fn render_ablation(report: &AblationReport) -> String {
    let mut out = String::new();
    for (table, title) in [
        (AblationTable::Components, "cue components"),
        (AblationTable::CueSelection, "cue selection"),
    ] {
        let _ = writeln!(out, "{title} (k={}, mean over seeds {:?})", report.k, report.seeds);
        let _ = writeln!(out, "{:<10} {:>7} {:>7} {:>7} {:>7}", "arm", "All", "Many", "Med", "Few");
        for r in report.means.iter().filter(|r| r.table == table) {
            let _ = writeln!(
                out,
                "{:<10} {:>7} {:>7} {:>7} {:>7}",
                r.arm,
                pct(Some(r.all)),
                pct(r.many),
                pct(r.medium),
                pct(r.few)
            );
        }
        out.push('\n');
    }
    out
}

pub fn cmd_ablate(ctx: &Context) -> CliResult<AblationReport> {
    let (inputs, test) = load_harness_inputs(ctx)?;
    let report = ablate_with(ctx, &inputs, &test)?;
    write_json(&ctx.layout.report("ablation.json"), &report)?;
    write_bytes(&ctx.layout.report("ablation.txt"), render_ablation(&report).as_bytes())?;
    Ok(report)
}

/// Accuracy over the (λ_zs, λ_llm) grid; rows follow λ_zs, columns λ_llm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub seed: u64,
    pub grid: Vec<f64>,
    pub all: Vec<Vec<f64>>,
    pub few: Vec<Vec<Option<f64>>>,
}

pub fn sweep_with(ctx: &Context, inputs: &ArmInputs, test: &LabeledEmbeddings) -> CliResult<SweepReport> {
    let config = &ctx.config;
    let grid = config.ablation.grid.clone();
    let seed = config.train.seed;
    let jobs: Vec<(f64, f64)> = grid.iter().flat_map(|&z| grid.iter().map(move |&l| (z, l))).collect();
    let evals = run_parallel(&jobs, config.ablation.workers, |&(z, l)| {
        run_arm(inputs, test, config, config.cues.mode, z, l, seed)
    })?;
    let n = grid.len();
    Ok(SweepReport {
        config_hash: ctx.config_hash(),
        seed,
        all: evals.chunks(n).map(|r| r.iter().map(|e| e.overall_acc).collect()).collect(),
        few: evals.chunks(n).map(|r| r.iter().map(|e| e.acc_few).collect()).collect(),
        grid,
    })
}

/// Writes a grid matrix with λ_llm across the header and λ_zs down the first column.
pub fn matrix_csv(grid: &[f64], rows: &[Vec<Option<f64>>]) -> String {
    let mut out = String::from("lambda_zs\\lambda_llm");
    for g in grid {
        let _ = write!(out, ",{g}");
    }
    out.push('\n');
    for (g, row) in grid.iter().zip(rows) {
        let _ = write!(out, "{g}");
        for v in row {
            out.push(',');
            if let Some(v) = v {
                let _ = write!(out, "{v}");
            }
        }
        out.push('\n');
    }
    out
}

/// Grid values and the matrix rows, as read back from CSV.
pub type GridMatrix = (Vec<f64>, Vec<Vec<Option<f64>>>);

/// Inverse of [`matrix_csv`].
pub fn parse_matrix_csv(text: &str) -> CliResult<GridMatrix> {
    let bad = |what: &str| CliError::Config(format!("malformed grid csv: {what}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(s));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty"))?;
    let grid = header.split(',').skip(1).map(num).collect::<CliResult<Vec<_>>>()?;
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != grid.len() + 1 {
            return Err(bad("ragged row"));
        }
        rows.push(
            cells[1..]
                .iter()
                .map(|c| if c.is_empty() { Ok(None) } else { num(c).map(Some) })
                .collect::<CliResult<Vec<_>>>()?,
        );
    }
    Ok((grid, rows))
}

pub fn cmd_sweep(ctx: &Context) -> CliResult<SweepReport> {
    let (inputs, test) = load_harness_inputs(ctx)?;
    let report = sweep_with(ctx, &inputs, &test)?;
    let all: Vec<Vec<Option<f64>>> = report.all.iter().map(|r| r.iter().copied().map(Some).collect()).collect();
    write_json(&ctx.layout.report("sweep.json"), &report)?;
    write_bytes(&ctx.layout.report("sweep_all.csv"), matrix_csv(&report.grid, &all).as_bytes())?;
    write_bytes(&ctx.layout.report("sweep_few.csv"), matrix_csv(&report.grid, &report.few).as_bytes())?;
    Ok(report)
}

/// Files written by [`cmd_synth`].
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub graph: PathBuf,
    pub config: PathBuf,
}

/// Writes the clustered Gaussian benchmark as manifests, its oracle neighbor
/// graph, and a ready-to-run `cue.toml`.
pub fn cmd_synth(dir: &Path, synthetic: &SyntheticConfig) -> CliResult<SynthOutput> {
    let bench = SyntheticBenchmark::generate(synthetic)?;
    let source = format!("synthetic seed={}", synthetic.seed);
    let train_manifest = save_dataset(dir, "train", &bench.train_pool, &bench.prototypes, &source)?;
    let test_manifest = save_dataset(dir, "test", &bench.test, &bench.prototypes, &source)?;
    let graph = dir.join("graph.json");
    bench.cluster_graph().save(&graph)?;

    let mut config = RunConfig::default();
    config.paths.manifest = "train.manifest.json".into();
    config.paths.test_manifest = Some("test.manifest.json".into());
    config.paths.graph = Some("graph.json".into());
    config.dataset.ir = synthetic.ir;
    config.dataset.n_max = Some(synthetic.n_max);
    config.dataset.seed = synthetic.seed;
    config.cues.k = 3;
    config.train = reference_train_config();
    config.train.seed = synthetic.seed;
    let config_path = dir.join("cue.toml");
    config.save(&config_path)?;
    Ok(SynthOutput {
        train_manifest,
        test_manifest,
        graph,
        config: config_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_arms_two_tables() {
        let arms = ablation_arms(&TrainConfig::default());
        assert_eq!(arms.len(), 7);
        assert_eq!(arms.iter().filter(|a| a.table == AblationTable::Components).count(), 4);
        assert_eq!((arms[0].lambda_zs, arms[0].lambda_llm), (0.0, 0.0));
        assert_eq!(arms[6].mode, CueMode::Last);
    }

    #[test]
    fn csv_round_trip() {
        let grid = vec![0.0, 0.25, 0.5];
        let rows = vec![
            vec![Some(0.1), Some(1.0 / 3.0), None],
            vec![Some(0.0), Some(0.5), Some(0.75)],
            vec![Some(1.0), Some(2e-17), Some(0.123456789012345)],
        ];
        let text = matrix_csv(&grid, &rows);
        assert_eq!(parse_matrix_csv(&text).unwrap(), (grid, rows));
    }

    #[test]
    fn parallel_keeps_job_order() {
        let jobs: Vec<u64> = (0..37).collect();
        let out = run_parallel(&jobs, 4, |&j| Ok(j * j)).unwrap();
        assert_eq!(out, jobs.iter().map(|j| j * j).collect::<Vec<_>>());
    }
}
