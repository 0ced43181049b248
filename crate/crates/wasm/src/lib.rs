//! Browser demo: weighted factorization explorer, method comparison on
//! synthetic data, and a PCA scatter of the learned representation.
//!
//! Each `#[wasm_bindgen]` export returns a JSON string; the plain Rust
//! functions underneath are what the native tests exercise.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

use winfair::experiment::{prepare_data, DatasetSpec, PartitionSpec, PreparedData};
use winfair::linalg::{scale_rows, DiagonalMatrix, Matrix};
use winfair::lowrank::{weighted_factorize, RankPolicy};
use winfair::metrics::{pca_project, predict_from_logits, FairnessReport};
use winfair::model::{NeuralNet, TrainConfig};
use winfair::pipeline::{finetune, pretrain, Architecture, Method, RunConfig};
use winfair::{Error, Result};

const DEMO_ROWS: usize = 1500;
const DEMO_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankRow {
    pub rank: usize,
    /// `‖D(W − AB)‖` of the importance-weighted factorization.
    pub weighted_svd_error: f64,
    /// The same weighted norm for a plain truncated SVD of `W`.
    pub plain_svd_error: f64,
    pub retained_energy: f64,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exploration {
    pub importance: Vec<f64>,
    pub rows: Vec<RankRow>,
}

/// Random `d × k` weight matrix with row importances growing
/// exponentially from the first row to the last at rate `skew`.
pub fn explore(d: usize, k: usize, seed: u64, skew: f64) -> Result<Exploration> {
    if d == 0 || k == 0 || !skew.is_finite() {
        return Err(Error::Input(format!("need a non-empty head and finite skew, got {d}×{k}, skew {skew}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Matrix::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
    let importance: Vec<f64> = (0..d)
        .map(|i| {
            let t = if d > 1 { 2.0 * i as f64 / (d - 1) as f64 - 1.0 } else { 0.0 };
            (skew * t).exp()
        })
        .collect();
    let imp = DiagonalMatrix::new(importance.clone());
    let zero = vec![0.0; k];
    let weighted_norm = |approx: &Matrix| -> Result<f64> {
        Ok(scale_rows(&imp, &w.sub(approx)?)?.frobenius_norm())
    };
    let rows = (1..=d.min(k))
        .map(|r| {
            let ours = weighted_factorize(&w, &zero, &imp, RankPolicy::Fixed(r))?;
            let plain = weighted_factorize(&w, &zero, &DiagonalMatrix::identity(d), RankPolicy::Fixed(r))?;
            let s = &ours.weighted_singular_values;
            let total: f64 = s.iter().map(|v| v * v).sum();
            Ok(RankRow {
                rank: r,
                weighted_svd_error: weighted_norm(&ours.product())?,
                plain_svd_error: weighted_norm(&plain.product())?,
                retained_energy: s[..r].iter().map(|v| v * v).sum::<f64>() / total,
                params: ours.param_count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Exploration { importance, rows })
}

fn demo_data(bias: f64, task_bias: f64, seed: u64) -> Result<PreparedData> {
    let ds = DatasetSpec::Synthetic {
        n: DEMO_ROWS,
        dim: DEMO_DIM,
        bias_strength: bias,
        task_bias_strength: Some(task_bias),
        seed,
    };
    let part = PartitionSpec {
        seed,
        ..Default::default()
    };
    prepare_data(&ds, &part, Path::new(""))
}

fn demo_net(data: &PreparedData, seed: u64) -> Result<NeuralNet> {
    let arch = Architecture {
        hidden: vec![16, 8],
        ..Default::default()
    };
    let train = TrainConfig {
        epochs: 20,
        ..Default::default()
    };
    pretrain(&data.source_train, &arch, None, &train, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodRow {
    pub method: &'static str,
    pub rank: Option<usize>,
    pub params: usize,
    pub report: FairnessReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub pretrained: FairnessReport,
    pub methods: Vec<MethodRow>,
}

/// Pretrains on a synthetic source with group–label coupling `bias`, then
/// fine-tunes TL, F_SVD and OURS on a task with coupling `task_bias`.
/// `rank = 0` keeps the default energy policy.
pub fn compare(bias: f64, task_bias: f64, seed: u64, rank: usize) -> Result<Comparison> {
    let data = demo_data(bias, task_bias, seed)?;
    let net = demo_net(&data, seed)?;
    let methods = [Method::Tl, Method::FSvd, Method::Ours]
        .into_iter()
        .map(|method| {
            let mut cfg = RunConfig::new(method, seed);
            if rank > 0 {
                cfg.rank = RankPolicy::Fixed(rank);
            }
            let (_, r) = finetune(&net, &data.task, &cfg)?;
            Ok(MethodRow {
                method: method.label(),
                rank: r.rank,
                params: r.trainable_params,
                report: r.finetune_report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison {
        pretrained: FairnessReport::evaluate(&net, &data.task.test)?,
        methods,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scatter {
    /// `[pc1, pc2, group]` per positively predicted test sample, group 1 or 2.
    pub points: Vec<[f64; 3]>,
    pub explained_variance: Vec<f64>,
}

/// PCA of the pretrained representation over task-test samples predicted
/// positive.
pub fn scatter(bias: f64, seed: u64) -> Result<Scatter> {
    let data = demo_data(bias, bias, seed)?;
    let net = demo_net(&data, seed)?;
    let test = &data.task.test;
    let (logits, reps) = net.forward(&test.x)?;
    let preds = predict_from_logits(&logits);
    let positive: Vec<usize> = (0..test.len()).filter(|&i| preds[i] == 1).collect();
    if positive.len() < 2 {
        return Ok(Scatter {
            points: Vec::new(),
            explained_variance: Vec::new(),
        });
    }
    let p = pca_project(&reps.select_rows(&positive), 2)?;
    let points = positive
        .iter()
        .enumerate()
        .map(|(row, &i)| {
            let pc2 = if p.scores.cols() > 1 { p.scores[(row, 1)] } else { 0.0 };
            [p.scores[(row, 0)], pc2, f64::from(test.s[i])]
        })
        .collect();
    Ok(Scatter {
        points,
        explained_variance: p.explained_variance,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    match r {
        Ok(v) => Ok(serde_json::to_string(&v).expect("demo output serializes")),
        Err(e) => Err(JsError::new(&e.to_string())),
    }
}

#[wasm_bindgen]
pub fn explore_factorization(d: usize, k: usize, seed: u64, skew: f64) -> std::result::Result<String, JsError> {
    to_js(explore(d, k, seed, skew))
}

#[wasm_bindgen]
pub fn compare_methods(bias: f64, task_bias: f64, seed: u64, rank: usize) -> std::result::Result<String, JsError> {
    to_js(compare(bias, task_bias, seed, rank))
}

#[wasm_bindgen]
pub fn representation_scatter(bias: f64, seed: u64) -> std::result::Result<String, JsError> {
    to_js(scatter(bias, seed))
}
