use std::path::Path;

use winfair::experiment::{prepare_data, DatasetSpec, PartitionSpec, PreparedData};
use winfair::fisher::{group_importances, neutralize};
use winfair::linalg::DiagonalMatrix;
use winfair::lowrank::{replacement_param_count, weighted_factorize, RankPolicy};
use winfair::metrics::{predict, FairnessReport, GroupCounts};
use winfair::model::{Constraint, FairnessPenalty, NeuralNet, TrainConfig};
use winfair::pipeline::*;
use winfair::Error;

fn fixture(n: usize, seed: u64) -> PreparedData {
    let ds = DatasetSpec::Synthetic {
        n,
        dim: 6,
        bias_strength: 0.6,
        task_bias_strength: None,
        seed,
    };
    let part = PartitionSpec {
        seed,
        ..Default::default()
    };
    prepare_data(&ds, &part, Path::new(".")).unwrap()
}

fn short() -> TrainConfig {
    TrainConfig {
        lr: 0.05,
        epochs: 5,
        batch: 32,
    }
}

fn small_arch() -> Architecture {
    Architecture {
        hidden: vec![8, 6],
        ..Default::default()
    }
}

fn pretrained(data: &PreparedData) -> NeuralNet {
    pretrain(&data.source_train, &small_arch(), None, &short(), 3).unwrap()
}

fn cfg(method: Method) -> RunConfig {
    RunConfig {
        train: short(),
        ..RunConfig::new(method, 11)
    }
}

#[test]
fn zero_intensity_pretraining_is_plain_pretraining() {
    let data = fixture(600, 1);
    let plain = pretrain(&data.source_train, &small_arch(), None, &short(), 5).unwrap();
    for c in [Constraint::Dp, Constraint::Eo] {
        let pen = FairnessPenalty {
            constraint: c,
            intensity: 0.0,
        };
        let zero = pretrain(&data.source_train, &small_arch(), Some(pen), &short(), 5).unwrap();
        assert_eq!(plain, zero);
    }
}

#[test]
fn pretraining_needs_both_groups() {
    let data = fixture(600, 1);
    let only = data.source_train.group_subset(1).unwrap();
    let err = pretrain(&only, &small_arch(), None, &short(), 0).unwrap_err();
    assert!(matches!(err, Error::GroupEmpty { group: 2, .. }));
}

#[test]
fn tl_trains_only_the_dense_head() {
    let data = fixture(600, 2);
    let net = pretrained(&data);
    let (tuned, result) = finetune_tl(&net, &data.task, &cfg(Method::Tl)).unwrap();
    let d = net.representation_dim();
    assert_eq!(result.trainable_params, d * 2 + 2);
    let n = net.layers().len();
    for (a, b) in tuned.layers()[..n - 1].iter().zip(&net.layers()[..n - 1]) {
        assert!(a.frozen);
        assert_eq!((&a.weight, &a.bias), (&b.weight, &b.bias));
    }
    assert_ne!(tuned.final_layer(), net.final_layer());
    assert!(result.final_loss <= result.initial_loss);
}

#[test]
fn fsvd_uses_identity_importance_and_counts_factor_params() {
    let data = fixture(600, 3);
    let net = pretrained(&data);
    let mut c = cfg(Method::FSvd);
    c.rank = RankPolicy::Fixed(1);
    let (head, floored) = initial_factors(&net, &data.task.train, &c).unwrap();
    assert_eq!(floored, None);
    let dense = net.final_layer();
    let d = dense.in_dim();
    let direct = weighted_factorize(
        &dense.weight,
        dense.bias.as_ref().unwrap(),
        &DiagonalMatrix::identity(d),
        RankPolicy::Fixed(1),
    )
    .unwrap();
    assert_eq!(head, direct);
    let (_, result) = finetune_fsvd(&net, &data.task, &c).unwrap();
    assert_eq!(result.trainable_params, replacement_param_count(d, 1, 2));
    assert_eq!(result.rank, Some(1));
}

#[test]
fn full_rank_fsvd_head_reproduces_dense_predictions() {
    let data = fixture(600, 4);
    let net = pretrained(&data);
    let mut c = cfg(Method::FSvd);
    c.rank = RankPolicy::Fixed(2);
    let (head, _) = initial_factors(&net, &data.task.train, &c).unwrap();
    let (l1, l2) = winfair::lowrank::build_replacement_layers(&head);
    let replaced = net.with_head(vec![l1, l2]).unwrap();
    let test = &data.task.test;
    assert_eq!(predict(&net, test).unwrap(), predict(&replaced, test).unwrap());
    let a = net.logits(&test.x).unwrap();
    let b = replaced.logits(&test.x).unwrap();
    let diff = a.sub(&b).unwrap().frobenius_norm();
    assert!(diff < 1e-9 * a.frobenius_norm().max(1.0), "{diff}");
}

#[test]
fn ours_default_alpha_is_plain_neutralization() {
    let data = fixture(600, 5);
    let net = pretrained(&data);
    let c = cfg(Method::Ours);
    let (head, _) = initial_factors(&net, &data.task.train, &c).unwrap();
    let (g1, g2) = group_importances(&net, &data.task.train).unwrap();
    let (imp, _) = neutralize(&g1, &g2).unwrap().floored().unwrap();
    let dense = net.final_layer();
    let direct = weighted_factorize(&dense.weight, dense.bias.as_ref().unwrap(), &imp, c.rank).unwrap();
    assert_eq!(head, direct);
}

#[test]
fn ours_with_skewed_alpha_differs() {
    let data = fixture(600, 5);
    let net = pretrained(&data);
    let mut c = cfg(Method::Ours);
    c.rank = RankPolicy::Fixed(1);
    let (even, _) = initial_factors(&net, &data.task.train, &c).unwrap();
    c.alpha = 0.95;
    let (skewed, _) = initial_factors(&net, &data.task.train, &c).unwrap();
    assert_ne!(even.a, skewed.a);
}

#[test]
fn ours_rejects_task_missing_a_group() {
    let data = fixture(600, 6);
    let net = pretrained(&data);
    let mut task = data.task.clone();
    task.train = task.train.group_subset(2).unwrap();
    let err = finetune_ours(&net, &task, &cfg(Method::Ours)).unwrap_err();
    assert!(matches!(err, Error::GroupEmpty { group: 1, .. }));
}

#[test]
fn zero_intensity_retraining_matches_tl() {
    let data = fixture(600, 7);
    let net = pretrained(&data);
    let (tl, tl_result) = finetune_tl(&net, &data.task, &cfg(Method::Tl)).unwrap();
    for m in [Method::RetrainEo, Method::RetrainDp] {
        let (fair, r) = finetune_retrain_fair(&net, &data.task, &cfg(m)).unwrap();
        assert_eq!(fair, tl);
        assert_eq!(r.finetune_report, tl_result.finetune_report);
        assert_eq!(r.bias_delta, Some(bias_delta_report(&r.pretrain_report, &r.finetune_report, m.constraint().unwrap())));
    }
}

#[test]
fn entry_points_reject_other_methods() {
    let data = fixture(600, 7);
    let net = pretrained(&data);
    assert!(matches!(finetune_tl(&net, &data.task, &cfg(Method::Ours)), Err(Error::Config(_))));
    assert!(matches!(finetune_retrain_fair(&net, &data.task, &cfg(Method::Tl)), Err(Error::Config(_))));
}

#[test]
fn runs_are_reproducible() {
    let data = fixture(600, 8);
    let net = pretrained(&data);
    for m in [Method::Tl, Method::FSvd, Method::Ours, Method::RetrainDp] {
        let mut c = cfg(m);
        c.intensity = if m == Method::RetrainDp { 0.5 } else { 0.0 };
        let (n1, mut r1) = finetune(&net, &data.task, &c).unwrap();
        let (n2, mut r2) = finetune(&net, &data.task, &c).unwrap();
        r1.wall_time_secs = 0.0;
        r2.wall_time_secs = 0.0;
        assert_eq!(n1, n2);
        assert_eq!(r1, r2);
    }
}

#[test]
fn extractor_is_shared_across_methods() {
    let data = fixture(600, 9);
    let net = pretrained(&data);
    let (_, reference) = net.forward(&data.task.test.x).unwrap();
    let mut ours = cfg(Method::Ours);
    ours.rank = RankPolicy::Fixed(1);
    for c in [cfg(Method::Tl), cfg(Method::FSvd), ours] {
        let (tuned, _) = finetune(&net, &data.task, &c).unwrap();
        let n = tuned.layers().len() - tuned.head_len();
        let mut h = data.task.test.x.clone();
        for layer in &tuned.layers()[..n] {
            let mut next = winfair::linalg::matmul(&h, &layer.weight).unwrap();
            for r in 0..next.rows() {
                for (v, b) in next.row_mut(r).iter_mut().zip(layer.bias.as_ref().unwrap()) {
                    *v = match layer.activation {
                        winfair::model::Activation::Relu => (*v + b).max(0.0),
                        winfair::model::Activation::Identity => *v + b,
                    };
                }
            }
            h = next;
        }
        assert_eq!(h, reference);
    }
}

#[test]
fn low_rank_heads_have_fewer_parameters_than_tl() {
    let data = fixture(600, 10);
    let net = pretrained(&data);
    let (_, tl) = finetune(&net, &data.task, &cfg(Method::Tl)).unwrap();
    let mut c = cfg(Method::Ours);
    c.rank = RankPolicy::Fixed(1);
    let (_, ours) = finetune(&net, &data.task, &c).unwrap();
    assert!(ours.trainable_params < tl.trainable_params);
}

#[test]
fn task_width_mismatch_is_a_shape_error() {
    let data = fixture(600, 11);
    let net = pretrained(&data);
    let mut task = data.task.clone();
    task.train = task.train.with_features(task.train.x.leading_columns(3)).unwrap();
    assert!(matches!(
        finetune(&net, &task, &cfg(Method::Tl)),
        Err(Error::Shape { .. })
    ));
}

fn report(dp: f64, eo: f64) -> FairnessReport {
    FairnessReport {
        err_percent: 10.0,
        delta_dp: dp,
        delta_tpr: eo / 2.0,
        delta_fpr: eo / 2.0,
        delta_eo: eo,
        group_counts: GroupCounts::default(),
    }
}

#[test]
fn bias_delta_is_post_minus_pre() {
    let a = report(0.2, 0.3);
    assert_eq!(bias_delta_report(&a, &a, Constraint::Dp), 0.0);
    assert_eq!(bias_delta_report(&a, &a, Constraint::Eo), 0.0);
    let pre = report(0.0, 0.012);
    let post = report(0.0, 0.183);
    assert!((bias_delta_report(&pre, &post, Constraint::Eo) - 0.171).abs() < 1e-12);
}

#[test]
fn stored_reports_recompute_the_emitted_delta() {
    let data = fixture(600, 12);
    let pen = FairnessPenalty {
        constraint: Constraint::Eo,
        intensity: 0.5,
    };
    let net = pretrain(&data.source_train, &small_arch(), Some(pen), &short(), 1).unwrap();
    let mut c = cfg(Method::Tl);
    c.pretrain_fairness = Some(pen);
    let (_, r) = finetune(&net, &data.task, &c).unwrap();
    assert_eq!(r.constraint, Some(Constraint::Eo));
    let json = serde_json::to_string(&r).unwrap();
    let back: RunResult = serde_json::from_str(&json).unwrap();
    assert_eq!(
        back.bias_delta.unwrap(),
        back.finetune_report.delta_eo - back.pretrain_report.delta_eo
    );
    assert_eq!(back.bias_delta, r.bias_delta);
}

#[test]
fn run_config_validation() {
    let mut c = RunConfig::new(Method::Ours, 0);
    assert!(c.validate().is_ok());
    c.alpha = 1.0;
    assert!(c.validate().is_err());
    c.alpha = 0.5;
    c.intensity = 1.2;
    assert!(c.validate().is_err());
    c.intensity = 0.0;
    c.rank = RankPolicy::Fixed(0);
    assert!(c.validate().is_err());
    assert_eq!("f+svd".parse::<Method>().unwrap(), Method::FSvd);
    assert!("svd".parse::<Method>().is_err());
}

#[test]
fn dp_regularized_pretraining_lowers_dp_over_seeds() {
    let (mut plain_dp, mut fair_dp) = (0.0, 0.0);
    let train = TrainConfig::default();
    for seed in 0..10 {
        let data = fixture(2000, seed);
        let plain = pretrain(&data.source_train, &Architecture::default(), None, &train, seed).unwrap();
        let pen = FairnessPenalty {
            constraint: Constraint::Dp,
            intensity: 0.9,
        };
        let fair = pretrain(&data.source_train, &Architecture::default(), Some(pen), &train, seed).unwrap();
        plain_dp += FairnessReport::evaluate(&plain, &data.source_test).unwrap().delta_dp;
        fair_dp += FairnessReport::evaluate(&fair, &data.source_test).unwrap().delta_dp;
    }
    assert!(fair_dp < plain_dp, "regularized {fair_dp} vs plain {plain_dp}");
}
