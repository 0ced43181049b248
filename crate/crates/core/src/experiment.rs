//! Declarative experiment files and the commands that execute them.
//!
//! An experiment is one TOML file naming a dataset, how to partition it into
//! a pretraining source and a downstream task, the network architecture, the
//! pretraining recipe, and a matrix of fine-tuning runs. Commands:
//!
//! * [`cmd_pretrain`] writes `pretrained.json` and `pretrain_report.json`.
//! * [`cmd_finetune`] writes `results.jsonl`, `summary.csv` and `timings.csv`.
//! * [`cmd_analyze`] writes `pca.csv` and `fisher_heatmap.csv`.
//! * [`cmd_report`] turns `results.jsonl` into `report.csv`.
//!
//! Every output starts with provenance: `#` comment lines for text files, a
//! `provenance` key for JSON. Apart from `timings.csv`, outputs are
//! byte-identical across reruns of the same spec.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    load_csv, split, stratified_partition, ColumnSchema, Dataset, SplitSpec, Standardizer,
    SyntheticWorld,
};
use crate::error::{Error, Result};
use crate::fisher::export_fisher_heatmap;
use crate::lowrank::RankPolicy;
use crate::metrics::{pca_project, predict_from_logits, FairnessReport};
use crate::model::{Constraint, FairnessPenalty, NeuralNet, TrainConfig};
use crate::pipeline::{finetune, pretrain, Architecture, Method, RunConfig, RunResult, Task};

pub const CHECKPOINT_FILE: &str = "pretrained.json";
pub const PRETRAIN_REPORT_FILE: &str = "pretrain_report.json";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const PCA_FILE: &str = "pca.csv";
pub const HEATMAP_FILE: &str = "fisher_heatmap.csv";
pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated data; the task partition may be redrawn with a different
    /// group–label coupling to simulate a shifted downstream task.
    Synthetic {
        n: usize,
        dim: usize,
        bias_strength: f64,
        #[serde(default)]
        task_bias_strength: Option<f64>,
        #[serde(default)]
        seed: u64,
    },
    /// A tabular or embedding CSV. Relative paths resolve against the
    /// directory of the experiment file.
    Csv { path: PathBuf, schema: ColumnSchema },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSpec {
    /// Share of rows used to pretrain; the rest form the downstream task.
    pub pretrain_fraction: f64,
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            pretrain_fraction: 0.6,
            train: 0.6,
            validation: 0.2,
            test: 0.2,
            seed: 0,
        }
    }
}

impl PartitionSpec {
    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.train,
            validation: self.validation,
            test: self.test,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fairness {
    #[default]
    None,
    Eo,
    Dp,
}

impl Fairness {
    pub fn constraint(self) -> Option<Constraint> {
        match self {
            Fairness::None => None,
            Fairness::Eo => Some(Constraint::Eo),
            Fairness::Dp => Some(Constraint::Dp),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSpec {
    pub fairness: Fairness,
    pub intensity: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        PretrainSpec {
            fairness: Fairness::None,
            intensity: 0.0,
            lr: t.lr,
            epochs: t.epochs,
            batch: t.batch,
            seed: 0,
        }
    }
}

impl PretrainSpec {
    pub fn penalty(&self) -> Option<FairnessPenalty> {
        self.fairness.constraint().map(|constraint| FairnessPenalty {
            constraint,
            intensity: self.intensity,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch: self.batch,
        }
    }
}

/// One row of the run matrix; expands to one run per intensity and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub method: Method,
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default)]
    pub energy: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub intensities: Option<Vec<f64>>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub batch: Option<usize>,
}

impl RunSpec {
    pub fn new(method: Method) -> Self {
        RunSpec {
            method,
            rank: None,
            energy: None,
            alpha: None,
            intensities: None,
            lr: None,
            epochs: None,
            batch: None,
        }
    }

    fn factorizes(&self) -> bool {
        matches!(self.method, Method::FSvd | Method::Ours)
    }

    pub fn rank_policy(&self) -> RankPolicy {
        match (self.rank, self.energy) {
            (Some(r), _) => RankPolicy::Fixed(r),
            (None, Some(e)) => RankPolicy::Energy(e),
            (None, None) => RankPolicy::default(),
        }
    }

    pub fn intensity_grid(&self) -> Vec<f64> {
        self.intensities.clone().unwrap_or_else(|| vec![0.0])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub partition: PartitionSpec,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub pretrain: PretrainSpec,
    /// Defaults for every fine-tuning run.
    #[serde(default)]
    pub finetune: TrainConfig,
    #[serde(default, rename = "run")]
    pub runs: Vec<RunSpec>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            n: 5000,
            dim: 10,
            bias_strength: 0.6,
            task_bias_strength: None,
            seed: 0,
        }
    }
}

fn default_name() -> String {
    "experiment".into()
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

/// Command-line adjustments applied on top of an experiment file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub out_dir: Option<PathBuf>,
    /// Replaces the rank policy of every factorizing run.
    pub rank: Option<RankPolicy>,
    /// Replaces `alpha` of every `OURS` run.
    pub alpha: Option<f64>,
}

fn in_unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl ExperimentSpec {
    /// Parses and validates; TOML syntax and type errors carry line and
    /// column.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid experiment file: {e}")))?;
        spec.base_dir = base_dir.to_path_buf();
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply_overrides(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seeds) = &o.seeds {
            self.seeds = seeds.clone();
        }
        if let Some(out) = &o.out_dir {
            self.out_dir = Some(out.clone());
        }
        for run in &mut self.runs {
            if let Some(policy) = o.rank {
                if run.factorizes() {
                    match policy {
                        RankPolicy::Fixed(r) => (run.rank, run.energy) = (Some(r), None),
                        RankPolicy::Energy(e) => (run.rank, run.energy) = (None, Some(e)),
                    }
                }
            }
            if let Some(alpha) = o.alpha {
                if run.method == Method::Ours {
                    run.alpha = Some(alpha);
                }
            }
        }
        self.validate()
    }

    /// Checks every field so that no command fails on configuration after
    /// compute has started.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return err("`seeds` must not be empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return err(format!("`seeds` contains duplicates: {:?}", self.seeds));
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                n,
                dim,
                bias_strength,
                task_bias_strength,
                ..
            } => {
                if *n < 40 || *dim < 2 {
                    return err(format!("dataset: synthetic data needs n >= 40 and dim >= 2, got n={n}, dim={dim}"));
                }
                if !in_unit(*bias_strength) || !task_bias_strength.is_none_or(in_unit) {
                    return err("dataset: bias strengths must lie in [0, 1]".into());
                }
            }
            DatasetSpec::Csv { schema, .. } => {
                if schema.positive.is_empty() || schema.privileged.is_empty() {
                    return err("dataset.schema: `positive` and `privileged` must not be empty".into());
                }
            }
        }
        let p = &self.partition;
        if !(p.pretrain_fraction > 0.0 && p.pretrain_fraction < 1.0) {
            return err(format!(
                "partition.pretrain_fraction must lie in (0, 1), got {}",
                p.pretrain_fraction
            ));
        }
        p.split_spec()
            .validate()
            .map_err(|e| Error::Config(format!("partition: {e}")))?;
        if self.architecture.hidden.contains(&0) {
            return err("architecture.hidden: widths must be positive".into());
        }
        let pre = &self.pretrain;
        if !in_unit(pre.intensity) {
            return err(format!("pretrain.intensity must lie in [0, 1], got {}", pre.intensity));
        }
        check_train("pretrain", &pre.train_config())?;
        check_train("finetune", &self.finetune)?;
        for (i, run) in self.runs.iter().enumerate() {
            let at = format!("run[{i}] ({})", run.method.label());
            if run.rank.is_some() && run.energy.is_some() {
                return err(format!("{at}: set either `rank` or `energy`, not both"));
            }
            if !run.factorizes() && (run.rank.is_some() || run.energy.is_some()) {
                return err(format!("{at}: `rank`/`energy` only apply to F_SVD and OURS"));
            }
            if run.method != Method::Ours && run.alpha.is_some() {
                return err(format!("{at}: `alpha` only applies to OURS"));
            }
            if run.method.constraint().is_none()
                && run.intensities.as_ref().is_some_and(|v| v.iter().any(|&x| x != 0.0))
            {
                return err(format!("{at}: `intensities` only apply to RETRAIN_EO and RETRAIN_DP"));
            }
            if run.intensities.as_ref().is_some_and(Vec::is_empty) {
                return err(format!("{at}: `intensities` must not be empty"));
            }
            for cfg in self.expand_run(run, 0) {
                cfg.validate().map_err(|e| Error::Config(format!("{at}: {e}")))?;
            }
        }
        Ok(())
    }

    fn expand_run(&self, run: &RunSpec, seed: u64) -> Vec<RunConfig> {
        run.intensity_grid()
            .into_iter()
            .map(|intensity| RunConfig {
                method: run.method,
                rank: run.rank_policy(),
                alpha: run.alpha.unwrap_or(0.5),
                intensity,
                train: TrainConfig {
                    lr: run.lr.unwrap_or(self.finetune.lr),
                    epochs: run.epochs.unwrap_or(self.finetune.epochs),
                    batch: run.batch.unwrap_or(self.finetune.batch),
                },
                seed,
                pretrain_fairness: self.pretrain.penalty(),
            })
            .collect()
    }

    /// Every fine-tuning run as `(config index, config)`, sorted by config
    /// index then seed. Config indices enumerate run rows and their
    /// intensities in file order.
    pub fn run_matrix(&self) -> Vec<(usize, RunConfig)> {
        let mut out = Vec::new();
        let mut index = 0;
        for run in &self.runs {
            let grid = run.intensity_grid().len();
            for k in 0..grid {
                for &seed in &self.seeds {
                    out.push((index + k, self.expand_run(run, seed).swap_remove(k)));
                }
            }
            index += grid;
        }
        out
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// SHA-256 over the canonical JSON form of the resolved spec, leaving
    /// out the output directory.
    pub fn hash(&self) -> String {
        let canonical = ExperimentSpec {
            out_dir: None,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("spec serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn provenance(&self, input_dim: usize) -> Provenance {
        let mut widths = vec![input_dim];
        widths.extend(&self.architecture.hidden);
        widths.push(2);
        Provenance {
            tool: concat!("winfair ", env!("CARGO_PKG_VERSION")).to_string(),
            experiment: self.name.clone(),
            spec_sha256: self.hash(),
            seeds: self.seeds.clone(),
            pretrain_seed: self.pretrain.seed,
            architecture: format!(
                "{} {:?}",
                widths.iter().map(ToString::to_string).collect::<Vec<_>>().join("-"),
                self.architecture.activation
            )
            .to_lowercase(),
        }
    }
}

fn check_train(what: &str, t: &TrainConfig) -> Result<()> {
    if !(t.lr > 0.0 && t.lr.is_finite()) || t.epochs == 0 || t.batch == 0 {
        return Err(Error::Config(format!(
            "{what}: lr must be positive and epochs, batch at least 1, got {t:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub experiment: String,
    pub spec_sha256: String,
    pub seeds: Vec<u64>,
    pub pretrain_seed: u64,
    pub architecture: String,
}

impl Provenance {
    pub fn header_lines(&self) -> Vec<String> {
        let seeds: Vec<String> = self.seeds.iter().map(ToString::to_string).collect();
        vec![
            format!("tool={}", self.tool),
            format!("experiment={}", self.experiment),
            format!("spec_sha256={}", self.spec_sha256),
            format!("seeds={}", seeds.join(",")),
            format!("pretrain_seed={}", self.pretrain_seed),
            format!("architecture={}", self.architecture),
        ]
    }

    fn comment_block(&self) -> String {
        self.header_lines().iter().map(|l| format!("# {l}\n")).collect()
    }
}

/// Splits of the pretraining source plus the downstream task, all
/// standardized with statistics of the pretraining training split.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub source_train: Dataset,
    pub source_validation: Dataset,
    pub source_test: Dataset,
    pub task: Task,
}

/// Materializes the dataset, partitions it, splits both partitions and
/// standardizes everything.
pub fn prepare_data(dataset: &DatasetSpec, partition: &PartitionSpec, base_dir: &Path) -> Result<PreparedData> {
    let fractions = [partition.pretrain_fraction, 1.0 - partition.pretrain_fraction];
    let (source, task) = match dataset {
        DatasetSpec::Synthetic {
            n,
            dim,
            bias_strength,
            task_bias_strength,
            seed,
        } => {
            let world = SyntheticWorld::new(*dim, *seed)?;
            let full = world.sample(*n, *bias_strength, *seed)?;
            let parts = stratified_partition(&full, &fractions, partition.seed);
            let source = full.select(&parts[0]);
            let task = match task_bias_strength {
                Some(b) if b != bias_strength => {
                    let mut t = world.sample(parts[1].len().max(40), *b, seed.wrapping_add(1))?;
                    t.name = format!("synthetic task (bias={b})");
                    t
                }
                _ => full.select(&parts[1]),
            };
            (source, task)
        }
        DatasetSpec::Csv { path, schema } => {
            let path = if path.is_absolute() {
                path.clone()
            } else {
                base_dir.join(path)
            };
            let full = load_csv(&path, schema)?;
            let parts = stratified_partition(&full, &fractions, partition.seed);
            (full.select(&parts[0]), full.select(&parts[1]))
        }
    };
    let spec = partition.split_spec();
    let (s_train, s_val, s_test) = split(&source, &spec)?;
    let (t_train, t_val, t_test) = split(&task, &spec)?;
    let st = Standardizer::fit(&s_train.x);
    let z = |d: &Dataset| -> Result<Dataset> { d.with_features(st.apply(&d.x)?) };
    Ok(PreparedData {
        source_train: z(&s_train)?,
        source_validation: z(&s_val)?,
        source_test: z(&s_test)?,
        task: Task {
            train: z(&t_train)?,
            validation: z(&t_val)?,
            test: z(&t_test)?,
        },
    })
}

impl ExperimentSpec {
    pub fn prepare(&self) -> Result<PreparedData> {
        let dataset = match &self.dataset {
            DatasetSpec::Csv { path, schema } => DatasetSpec::Csv {
                path: self.resolve(path),
                schema: schema.clone(),
            },
            other => other.clone(),
        };
        prepare_data(&dataset, &self.partition, &self.base_dir)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReportFile {
    pub provenance: Provenance,
    pub fairness: Fairness,
    pub intensity: f64,
    pub source_test: FairnessReport,
    pub task_test: FairnessReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutputs {
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub net: NeuralNet,
}

pub fn cmd_pretrain(spec: &ExperimentSpec) -> Result<PretrainOutputs> {
    let data = spec.prepare()?;
    let net = pretrain(
        &data.source_train,
        &spec.architecture,
        spec.pretrain.penalty(),
        &spec.pretrain.train_config(),
        spec.pretrain.seed,
    )?;
    let out = spec.out_dir();
    ensure_dir(&out)?;
    let prov = spec.provenance(net.input_dim());
    let checkpoint = out.join(CHECKPOINT_FILE);
    net.save_checkpoint(&checkpoint, serde_json::to_value(&prov).expect("provenance serializes"))?;

    let report = PretrainReportFile {
        provenance: prov,
        fairness: spec.pretrain.fairness,
        intensity: spec.pretrain.intensity,
        source_test: FairnessReport::evaluate(&net, &data.source_test)?,
        task_test: FairnessReport::evaluate(&net, &data.task.test)?,
    };
    let report_path = out.join(PRETRAIN_REPORT_FILE);
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    write_file(&report_path, text.as_bytes())?;
    log::info!("pretrained network written to {}", checkpoint.display());
    Ok(PretrainOutputs {
        checkpoint,
        report: report_path,
        net,
    })
}

/// One line of `results.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub config_index: usize,
    #[serde(flatten)]
    pub result: RunResult,
}

/// Runs every `(config, seed)` pair with at most `jobs` worker threads.
/// Output order is `(config index, seed)` regardless of scheduling.
pub fn run_matrix(
    pretrained: &NeuralNet,
    task: &Task,
    matrix: &[(usize, RunConfig)],
    jobs: usize,
) -> Result<Vec<ResultLine>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    let results: Vec<Result<ResultLine>> = pool.install(|| {
        matrix
            .par_iter()
            .map(|(config_index, cfg)| {
                let (_, result) = finetune(pretrained, task, cfg)?;
                Ok(ResultLine {
                    config_index: *config_index,
                    result,
                })
            })
            .collect()
    });
    let mut lines = results.into_iter().collect::<Result<Vec<_>>>()?;
    lines.sort_by_key(|l| (l.config_index, l.result.config.seed));
    Ok(lines)
}

fn check_checkpoint(net: &NeuralNet, data: &PreparedData, checkpoint: &Path) -> Result<()> {
    if net.input_dim() != data.task.train.dim() {
        return Err(Error::shape(
            "checkpoint",
            format!(
                "{} expects {} input features but the task has {}; was it pretrained with a different dataset block?",
                checkpoint.display(),
                net.input_dim(),
                data.task.train.dim()
            ),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutputs {
    pub results: PathBuf,
    pub summary: PathBuf,
    pub timings: PathBuf,
    pub lines: Vec<ResultLine>,
}

pub fn cmd_finetune(spec: &ExperimentSpec, checkpoint: &Path, jobs: usize) -> Result<FinetuneOutputs> {
    if spec.runs.is_empty() {
        return Err(Error::Config("the experiment declares no [[run]] entries".into()));
    }
    let net = NeuralNet::load_checkpoint(checkpoint)?;
    let data = spec.prepare()?;
    check_checkpoint(&net, &data, checkpoint)?;
    let matrix = spec.run_matrix();
    log::info!("running {} fine-tuning jobs on {} workers", matrix.len(), jobs);
    let lines = run_matrix(&net, &data.task, &matrix, jobs)?;

    let out = spec.out_dir();
    ensure_dir(&out)?;
    let prov = spec.provenance(net.input_dim());
    let header = prov.comment_block();

    let mut jsonl = header.clone();
    for line in &lines {
        jsonl.push_str(&serde_json::to_string(line).expect("result serializes"));
        jsonl.push('\n');
    }
    let results = out.join(RESULTS_FILE);
    write_file(&results, jsonl.as_bytes())?;

    let summary = out.join(SUMMARY_FILE);
    write_summary(&summarize(&lines), &header, &summary)?;

    let mut timings = format!("{header}# wall-clock times vary between runs\nconfig_index,seed,wall_time_secs\n");
    for l in &lines {
        timings.push_str(&format!(
            "{},{},{}\n",
            l.config_index, l.result.config.seed, l.result.wall_time_secs
        ));
    }
    let timings_path = out.join(TIMINGS_FILE);
    write_file(&timings_path, timings.as_bytes())?;
    Ok(FinetuneOutputs {
        results,
        summary,
        timings: timings_path,
        lines,
    })
}

/// Mean and sample standard deviation (`n − 1`; zero for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Stat { mean, std }
    }

    pub fn display(&self) -> String {
        format!("{:.3}±{:.3}", self.mean, self.std)
    }
}

/// Seed-aggregated metrics of one run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config_index: usize,
    pub method: Method,
    pub rank_policy: String,
    pub alpha: f64,
    pub intensity: f64,
    pub runs: usize,
    pub trainable_params: Stat,
    pub rank: Option<Stat>,
    pub err: Stat,
    pub delta_dp: Stat,
    pub delta_eo: Stat,
    pub delta_tpr: Stat,
    pub delta_fpr: Stat,
    pub pretrain_err: Stat,
    pub pretrain_dp: Stat,
    pub pretrain_eo: Stat,
    pub constraint: Option<Constraint>,
    pub bias_delta: Option<Stat>,
}

fn policy_label(p: RankPolicy) -> String {
    match p {
        RankPolicy::Fixed(r) => format!("rank={r}"),
        RankPolicy::Energy(e) => format!("energy={e}"),
    }
}

pub fn summarize(lines: &[ResultLine]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    let mut start = 0;
    while start < lines.len() {
        let idx = lines[start].config_index;
        let end = start + lines[start..].iter().take_while(|l| l.config_index == idx).count();
        let group: Vec<&RunResult> = lines[start..end].iter().map(|l| &l.result).collect();
        let col = |f: &dyn Fn(&RunResult) -> f64| Stat::of(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
        let first = group[0];
        let factorized = first.rank.is_some();
        rows.push(SummaryRow {
            config_index: idx,
            method: first.config.method,
            rank_policy: if factorized {
                policy_label(first.config.rank)
            } else {
                "dense".into()
            },
            alpha: first.config.alpha,
            intensity: first.config.intensity,
            runs: group.len(),
            trainable_params: col(&|r| r.trainable_params as f64),
            rank: factorized.then(|| col(&|r| r.rank.unwrap_or(0) as f64)),
            err: col(&|r| r.finetune_report.err_percent),
            delta_dp: col(&|r| r.finetune_report.delta_dp),
            delta_eo: col(&|r| r.finetune_report.delta_eo),
            delta_tpr: col(&|r| r.finetune_report.delta_tpr),
            delta_fpr: col(&|r| r.finetune_report.delta_fpr),
            pretrain_err: col(&|r| r.pretrain_report.err_percent),
            pretrain_dp: col(&|r| r.pretrain_report.delta_dp),
            pretrain_eo: col(&|r| r.pretrain_report.delta_eo),
            constraint: first.constraint,
            bias_delta: first
                .constraint
                .map(|_| col(&|r| r.bias_delta.unwrap_or(f64::NAN))),
        });
        start = end;
    }
    rows
}

const SUMMARY_COLUMNS: &[&str] = &[
    "config_index",
    "method",
    "rank_policy",
    "alpha",
    "intensity",
    "runs",
    "trainable_params_mean",
    "rank_mean",
    "err_mean",
    "err_std",
    "delta_dp_mean",
    "delta_dp_std",
    "delta_eo_mean",
    "delta_eo_std",
    "delta_tpr_mean",
    "delta_tpr_std",
    "delta_fpr_mean",
    "delta_fpr_std",
    "pretrain_err_mean",
    "pretrain_dp_mean",
    "pretrain_eo_mean",
    "constraint",
    "bias_delta_mean",
    "bias_delta_std",
];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

fn constraint_label(c: Option<Constraint>) -> String {
    match c {
        Some(Constraint::Dp) => "dp".into(),
        Some(Constraint::Eo) => "eo".into(),
        None => String::new(),
    }
}

fn write_summary(rows: &[SummaryRow], header: &str, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(header.as_bytes().to_vec());
    w.write_record(SUMMARY_COLUMNS).map_err(|e| csv_error(path, e))?;
    for r in rows {
        let opt = |s: &Option<Stat>, f: fn(&Stat) -> f64| s.as_ref().map(|s| f(s).to_string()).unwrap_or_default();
        let record = vec![
            r.config_index.to_string(),
            r.method.label().to_string(),
            r.rank_policy.clone(),
            r.alpha.to_string(),
            r.intensity.to_string(),
            r.runs.to_string(),
            r.trainable_params.mean.to_string(),
            opt(&r.rank, |s| s.mean),
            r.err.mean.to_string(),
            r.err.std.to_string(),
            r.delta_dp.mean.to_string(),
            r.delta_dp.std.to_string(),
            r.delta_eo.mean.to_string(),
            r.delta_eo.std.to_string(),
            r.delta_tpr.mean.to_string(),
            r.delta_tpr.std.to_string(),
            r.delta_fpr.mean.to_string(),
            r.delta_fpr.std.to_string(),
            r.pretrain_err.mean.to_string(),
            r.pretrain_dp.mean.to_string(),
            r.pretrain_eo.mean.to_string(),
            constraint_label(r.constraint),
            opt(&r.bias_delta, |s| s.mean),
            opt(&r.bias_delta, |s| s.std),
        ];
        w.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    write_file(path, &bytes)
}

/// Reads `results.jsonl`, skipping `#` comment lines.
pub fn read_results(path: &Path) -> Result<Vec<ResultLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                detail: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOutputs {
    pub pca: PathBuf,
    pub heatmap: PathBuf,
    pub positive_count: usize,
}

/// PCA of the head's input over task-test samples the pretrained network
/// predicts positive, and the per-group Fisher heatmap of its final layer on
/// the task's training split.
pub fn cmd_analyze(spec: &ExperimentSpec, checkpoint: &Path) -> Result<AnalyzeOutputs> {
    let net = NeuralNet::load_checkpoint(checkpoint)?;
    let data = spec.prepare()?;
    check_checkpoint(&net, &data, checkpoint)?;
    let out = spec.out_dir();
    ensure_dir(&out)?;
    let prov = spec.provenance(net.input_dim());
    let header = prov.comment_block();

    let test = &data.task.test;
    let (logits, reps) = net.forward(&test.x)?;
    let preds = predict_from_logits(&logits);
    let positive: Vec<usize> = (0..test.len()).filter(|&i| preds[i] == 1).collect();
    if positive.len() < 2 {
        return Err(Error::Input(format!(
            "PCA needs at least two positively predicted samples, found {}",
            positive.len()
        )));
    }
    let projection = pca_project(&reps.select_rows(&positive), 2)?;
    let mut pca = header.clone();
    pca.push_str(&format!(
        "# explained_variance={}\npc1,pc2,group\n",
        projection
            .explained_variance
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    ));
    for (row, &i) in positive.iter().enumerate() {
        let pc2 = if projection.scores.cols() > 1 {
            projection.scores[(row, 1)]
        } else {
            0.0
        };
        pca.push_str(&format!("{},{},{}\n", projection.scores[(row, 0)], pc2, test.s[i]));
    }
    let pca_path = out.join(PCA_FILE);
    write_file(&pca_path, pca.as_bytes())?;

    let heatmap = out.join(HEATMAP_FILE);
    let g1 = data.task.train.group_subset(1)?;
    let g2 = data.task.train.group_subset(2)?;
    export_fisher_heatmap(&net, &g1, &g2, &heatmap, &prov.header_lines())?;
    Ok(AnalyzeOutputs {
        pca: pca_path,
        heatmap,
        positive_count: positive.len(),
    })
}

const REPORT_COLUMNS: &[&str] = &[
    "method",
    "rank_policy",
    "alpha",
    "intensity",
    "params",
    "Err",
    "ΔEO",
    "ΔDP",
    "pretrain_bias",
    "bias_delta",
];

/// Summary table: one row per configuration, metrics as `mean±std`.
pub fn render_report(rows: &[SummaryRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            let pre = match r.constraint {
                Some(Constraint::Dp) => r.pretrain_dp.display(),
                Some(Constraint::Eo) => r.pretrain_eo.display(),
                None => String::new(),
            };
            vec![
                r.method.label().to_string(),
                r.rank_policy.clone(),
                format!("{}", r.alpha),
                format!("{}", r.intensity),
                format!("{:.0}", r.trainable_params.mean),
                r.err.display(),
                r.delta_eo.display(),
                r.delta_dp.display(),
                pre,
                r.bias_delta.as_ref().map(Stat::display).unwrap_or_default(),
            ]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutputs {
    pub report: PathBuf,
    pub table: String,
}

/// Aggregates `results.jsonl` in the output directory into `report.csv`
/// and returns the same table as aligned text.
pub fn cmd_report(spec: &ExperimentSpec) -> Result<ReportOutputs> {
    let out = spec.out_dir();
    let results_path = out.join(RESULTS_FILE);
    let lines = read_results(&results_path)?;
    if lines.is_empty() {
        return Err(Error::Format {
            path: results_path,
            detail: "no result lines".into(),
        });
    }
    let rows = render_report(&summarize(&lines));
    let header: String = results_header(&results_path)?;

    let report = out.join(REPORT_FILE);
    let mut w = csv::Writer::from_writer(header.into_bytes());
    w.write_record(REPORT_COLUMNS).map_err(|e| csv_error(&report, e))?;
    for r in &rows {
        w.write_record(r).map_err(|e| csv_error(&report, e))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(&report, std::io::Error::other(e.to_string())))?;
    write_file(&report, &bytes)?;
    Ok(ReportOutputs {
        report,
        table: align(REPORT_COLUMNS, &rows),
    })
}

fn results_header(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect())
}

fn align(columns: &[&str], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..columns.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain([columns[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = Vec::new();
    let fmt = |cells: Vec<&str>, out: &mut Vec<u8>| {
        let line: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        writeln!(out, "{}", line.join("  ").trim_end()).expect("write to vec");
    };
    fmt(columns.to_vec(), &mut out);
    for r in rows {
        fmt(r.iter().map(String::as_str).collect(), &mut out);
    }
    String::from_utf8(out).expect("utf-8 table")
}
