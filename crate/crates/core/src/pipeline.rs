//! Pretraining and the fine-tuning methods compared in experiments.
//!
//! Every method freezes the feature extractor and trains only the head:
//!
//! * `Tl` fine-tunes the dense head as is.
//! * `FSvd` replaces the head with an unweighted truncated-SVD factor pair.
//! * `Ours` replaces it with a factor pair from the SVD weighted by the
//!   neutralized per-group Fisher importance, measured on the task's
//!   training split with the pretrained network.
//! * `RetrainEo` / `RetrainDp` fine-tune the dense head with a fairness
//!   penalty added to the loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fisher::{blend, group_importances};
use crate::linalg::DiagonalMatrix;
use crate::lowrank::{build_replacement_layers, weighted_factorize, LowRankHead, RankPolicy};
use crate::metrics::FairnessReport;
use crate::model::{Activation, Constraint, FairnessPenalty, LossConfig, NeuralNet, TrainConfig};

/// Hidden widths and activation of the pretrained MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![32, 16]
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            hidden: default_hidden(),
            activation: default_activation(),
        }
    }
}

impl Architecture {
    /// Freshly initialized network for `input_dim` features.
    pub fn build(&self, input_dim: usize, rng: &mut impl rand::Rng) -> Result<NeuralNet> {
        let mut net = NeuralNet::mlp(input_dim, &self.hidden, rng)?;
        let n = net.layers().len();
        for layer in &mut net.layers_mut()[..n - 1] {
            layer.activation = self.activation;
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "TL")]
    Tl,
    #[serde(rename = "F_SVD")]
    FSvd,
    #[serde(rename = "OURS")]
    Ours,
    #[serde(rename = "RETRAIN_EO")]
    RetrainEo,
    #[serde(rename = "RETRAIN_DP")]
    RetrainDp,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Tl => "TL",
            Method::FSvd => "F_SVD",
            Method::Ours => "OURS",
            Method::RetrainEo => "RETRAIN_EO",
            Method::RetrainDp => "RETRAIN_DP",
        }
    }

    /// Constraint a retraining method optimizes for.
    pub fn constraint(self) -> Option<Constraint> {
        match self {
            Method::RetrainEo => Some(Constraint::Eo),
            Method::RetrainDp => Some(Constraint::Dp),
            _ => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace(['-', '+'], "_").as_str() {
            "TL" => Ok(Method::Tl),
            "F_SVD" | "FSVD" => Ok(Method::FSvd),
            "OURS" => Ok(Method::Ours),
            "RETRAIN_EO" => Ok(Method::RetrainEo),
            "RETRAIN_DP" => Ok(Method::RetrainDp),
            _ => Err(Error::Config(format!("unknown method `{s}`"))),
        }
    }
}

/// Fine-tuning run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub rank: RankPolicy,
    /// Weight of group 1 when blending importances; 0.5 is plain averaging.
    pub alpha: f64,
    /// Penalty intensity for the retraining methods.
    pub intensity: f64,
    pub train: TrainConfig,
    pub seed: u64,
    /// Fairness penalty the pretrained model was trained with, if any.
    pub pretrain_fairness: Option<FairnessPenalty>,
}

impl RunConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        RunConfig {
            method,
            rank: RankPolicy::default(),
            alpha: 0.5,
            intensity: 0.0,
            train: TrainConfig::default(),
            seed,
            pretrain_fairness: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0.5, 1), got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::Config(format!(
                "regularizer intensity must lie in [0, 1], got {}",
                self.intensity
            )));
        }
        if let Some(p) = self.pretrain_fairness {
            if !(0.0..=1.0).contains(&p.intensity) {
                return Err(Error::Config(format!(
                    "pretraining intensity must lie in [0, 1], got {}",
                    p.intensity
                )));
            }
        }
        if self.train.lr.is_nan() || self.train.lr <= 0.0 || self.train.epochs == 0 || self.train.batch == 0 {
            return Err(Error::Config(format!(
                "invalid training settings {:?}",
                self.train
            )));
        }
        self.rank.validate()
    }

    /// Constraint whose metric `bias_delta` tracks: the retraining
    /// constraint, else the pretraining one.
    pub fn active_constraint(&self) -> Option<Constraint> {
        self.method
            .constraint()
            .or(self.pretrain_fairness.map(|p| p.constraint))
    }
}

/// Train / validation / test splits of the downstream task, expressed in the
/// pretrained network's input space.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: RunConfig,
    /// Pretrained network on the task's test split.
    pub pretrain_report: FairnessReport,
    /// Fine-tuned network on the task's test split.
    pub finetune_report: FairnessReport,
    pub trainable_params: usize,
    /// Rank of the factorized head, for the low-rank methods.
    pub rank: Option<usize>,
    /// Importance entries raised to the floor before inversion.
    pub floored_rows: Option<usize>,
    /// Training objective before fine-tuning and after the last epoch.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub constraint: Option<Constraint>,
    /// `finetune − pretrain` under the active constraint's metric.
    pub bias_delta: Option<f64>,
    /// Excluded from serialized results so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// `post − pre` under `constraint`'s metric.
pub fn bias_delta_report(pre: &FairnessReport, post: &FairnessReport, constraint: Constraint) -> f64 {
    post.bias(constraint) - pre.bias(constraint)
}

/// Wall-clock timer; reads zero where the platform has no clock.
struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    fn start() -> Self {
        Stopwatch(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}

fn require_both_groups(ds: &Dataset, what: &str) -> Result<()> {
    for g in [1, 2] {
        if ds.group_count(g) == 0 {
            return Err(Error::GroupEmpty {
                group: g,
                context: format!(" in {what}"),
            });
        }
    }
    Ok(())
}

/// Trains a fresh MLP `input → hidden… → 2`, optionally with a fairness
/// penalty.
pub fn pretrain(
    train: &Dataset,
    arch: &Architecture,
    fairness: Option<FairnessPenalty>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<NeuralNet> {
    require_both_groups(train, "pretraining data")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = arch.build(train.dim(), &mut rng)?;
    let loss = LossConfig {
        penalty: fairness,
        scale: 1.0,
    };
    net.fit(train, &loss, cfg, &mut rng)?;
    Ok(net)
}

/// Importance diagonal used by `Ours`: per-group row importances of the
/// pretrained head on `train`, blended with `alpha`, then floored. Returns
/// the diagonal and how many entries were floored.
pub fn neutralized_importance(
    pretrained: &NeuralNet,
    train: &Dataset,
    alpha: f64,
) -> Result<(DiagonalMatrix, usize)> {
    let (g1, g2) = group_importances(pretrained, train)?;
    let neutral = blend(&g1, &g2, alpha)?;
    let (diag, floored) = neutral.floored()?;
    if floored > 0 {
        log::info!("floored {floored} of {} importance entries", diag.dim());
    }
    Ok((diag, floored))
}

/// Factor pair for the low-rank methods, computed from the pretrained
/// dense head.
pub fn initial_factors(
    pretrained: &NeuralNet,
    train: &Dataset,
    cfg: &RunConfig,
) -> Result<(LowRankHead, Option<usize>)> {
    if pretrained.head_len() != 1 {
        return Err(Error::Input(
            "low-rank fine-tuning needs a network with a dense head".into(),
        ));
    }
    let head = pretrained.final_layer();
    let bias = head.bias.clone().unwrap_or_else(|| vec![0.0; head.out_dim()]);
    let (imp, floored) = match cfg.method {
        Method::Ours => {
            let (d, f) = neutralized_importance(pretrained, train, cfg.alpha)?;
            (d, Some(f))
        }
        Method::FSvd => (DiagonalMatrix::identity(head.in_dim()), None),
        other => {
            return Err(Error::Input(format!(
                "{} does not factorize the head",
                other.label()
            )))
        }
    };
    Ok((weighted_factorize(&head.weight, &bias, &imp, cfg.rank)?, floored))
}

fn check_task(pretrained: &NeuralNet, task: &Task) -> Result<()> {
    if task.train.dim() != pretrained.input_dim() {
        return Err(Error::shape(
            "finetune",
            format!(
                "task has {} features but the pretrained network expects {}",
                task.train.dim(),
                pretrained.input_dim()
            ),
        ));
    }
    require_both_groups(&task.train, "the task's training split")
}

fn run(pretrained: &NeuralNet, task: &Task, cfg: &RunConfig, expected: &[Method]) -> Result<(NeuralNet, RunResult)> {
    if !expected.contains(&cfg.method) {
        return Err(Error::Config(format!(
            "method {} routed to the wrong fine-tuning entry point",
            cfg.method.label()
        )));
    }
    cfg.validate()?;
    check_task(pretrained, task)?;
    let started = Stopwatch::start();

    let mut net = pretrained.clone();
    let (mut rank, mut floored_rows) = (None, None);
    let mut loss = LossConfig::default();
    match cfg.method {
        Method::Tl => {}
        Method::RetrainEo | Method::RetrainDp => {
            let constraint = cfg.method.constraint().expect("retrain method");
            loss = LossConfig::with_penalty(constraint, cfg.intensity);
        }
        Method::FSvd | Method::Ours => {
            let (head, floored) = initial_factors(pretrained, &task.train, cfg)?;
            rank = Some(head.rank);
            floored_rows = floored;
            let (l1, l2) = build_replacement_layers(&head);
            net = net.with_head(vec![l1, l2])?;
        }
    }
    net.freeze_extractor();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let history = net.fit(&task.train, &loss, &cfg.train, &mut rng)?;

    let pretrain_report = FairnessReport::evaluate(pretrained, &task.test)?;
    let finetune_report = FairnessReport::evaluate(&net, &task.test)?;
    let constraint = cfg.active_constraint();
    let bias_delta = constraint.map(|c| bias_delta_report(&pretrain_report, &finetune_report, c));
    let result = RunResult {
        config: cfg.clone(),
        pretrain_report,
        finetune_report,
        trainable_params: net.trainable_params(),
        rank,
        floored_rows,
        initial_loss: history[0],
        final_loss: *history.last().expect("history has the initial loss"),
        constraint,
        bias_delta,
        wall_time_secs: started.seconds(),
    };
    Ok((net, result))
}

/// Dense-head transfer learning.
pub fn finetune_tl(pretrained: &NeuralNet, task: &Task, cfg: &RunConfig) -> Result<(NeuralNet, RunResult)> {
    run(pretrained, task, cfg, &[Method::Tl])
}

/// Unweighted truncated-SVD head replacement.
pub fn finetune_fsvd(pretrained: &NeuralNet, task: &Task, cfg: &RunConfig) -> Result<(NeuralNet, RunResult)> {
    run(pretrained, task, cfg, &[Method::FSvd])
}

/// Neutralized-importance weighted SVD head replacement.
pub fn finetune_ours(pretrained: &NeuralNet, task: &Task, cfg: &RunConfig) -> Result<(NeuralNet, RunResult)> {
    run(pretrained, task, cfg, &[Method::Ours])
}

/// Dense-head fine-tuning with an EO or DP penalty.
pub fn finetune_retrain_fair(
    pretrained: &NeuralNet,
    task: &Task,
    cfg: &RunConfig,
) -> Result<(NeuralNet, RunResult)> {
    run(pretrained, task, cfg, &[Method::RetrainEo, Method::RetrainDp])
}

/// Dispatches on `cfg.method`.
pub fn finetune(pretrained: &NeuralNet, task: &Task, cfg: &RunConfig) -> Result<(NeuralNet, RunResult)> {
    match cfg.method {
        Method::Tl => finetune_tl(pretrained, task, cfg),
        Method::FSvd => finetune_fsvd(pretrained, task, cfg),
        Method::Ours => finetune_ours(pretrained, task, cfg),
        Method::RetrainEo | Method::RetrainDp => finetune_retrain_fair(pretrained, task, cfg),
    }
}
