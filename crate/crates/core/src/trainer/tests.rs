use proptest::prelude::*;

use super::*;
use crate::data::{prepare_dataset, split_random, NormStats, PreparedDataset, SplitRole, Splits, Strategy};
use crate::synth::{generate, GeneratorConfig};

#[test]
fn dwa_reference_values() {
    let w = dwa_weights([1.0, 0.5], 2.0);
    let want = 2.0 * 0.5f64.exp() / (0.5f64.exp() + 0.25f64.exp());
    assert!((w[0] - want).abs() < 1e-15);
    assert!((w[0] - 1.124354).abs() < 1e-6);
    assert!((w[0] + w[1] - 2.0).abs() < 1e-15);
    assert_eq!(dwa_weights([0.8, 0.8], 2.0), [1.0, 1.0]);
    let hot = dwa_weights([1.0, 0.5], 1e9);
    assert!((hot[0] - 1.0).abs() < 1e-9 && (hot[1] - 1.0).abs() < 1e-9);
}

#[test]
fn dwa_state_warm_up_and_fallbacks() {
    let both = HeadSet {
        temporal: true,
        missingness: true,
    };
    let mut s = DwaState::default();
    assert_eq!(s.weights(2.0, both), [1.0, 1.0]);
    s.record([2.0, 4.0]);
    assert_eq!(s.weights(2.0, both), [1.0, 1.0]);
    s.record([2.0, 2.0]);
    assert_eq!(s.weights(2.0, both), dwa_weights([1.0, 0.5], 2.0));
    s.record([-1.0, 2.0]);
    assert_eq!(s.weights(2.0, both), [1.0, 1.0]);
    let only_m = HeadSet {
        temporal: false,
        missingness: true,
    };
    assert_eq!(s.weights(2.0, only_m), [0.0, 1.0]);
}

#[test]
fn combined_loss_examples() {
    assert_eq!(combined_loss(2.0, Some(3.0), Some(5.0), [1.2, 0.8], 0.0).unwrap(), 2.0);
    assert_eq!(combined_loss(2.0, Some(3.0), Some(5.0), [1.0, 1.0], 1.0).unwrap(), 8.0);
    let v = combined_loss(2.0, Some(3.0), Some(5.0), [1.2, 0.8], 0.3).unwrap();
    assert!((v - 3.68).abs() < 1e-12);
    assert_eq!(combined_loss(2.0, None, None, [1.0, 1.0], 0.3).unwrap(), 2.0);
    let v = combined_loss(2.0, None, Some(5.0), [0.0, 1.0], 0.5).unwrap();
    assert_eq!(v, 3.5);
    assert!(matches!(
        combined_loss(1.0, None, None, [1.0, 1.0], 1.5),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn config_validation() {
    let ok = TrainConfig::default();
    ok.validate().unwrap();
    let bad = [
        TrainConfig {
            alpha: -0.1,
            ..ok.clone()
        },
        TrainConfig {
            theta: 0.0,
            ..ok.clone()
        },
        TrainConfig {
            joint_epochs: 2000,
            ..ok.clone()
        },
        TrainConfig {
            batch_size: 0,
            ..ok.clone()
        },
        TrainConfig {
            heads: Some(vec![Head::I]),
            ..ok.clone()
        },
        TrainConfig {
            patience: 0,
            ..ok.clone()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    let c = TrainConfig {
        heads: Some(vec![Head::S, Head::M]),
        ..ok
    };
    assert!(c.head_set(Strategy::Last).is_err());
    assert_eq!(
        c.head_set(Strategy::Feature).unwrap(),
        HeadSet {
            temporal: false,
            missingness: true
        }
    );
}

#[test]
fn strategies_map_to_heads() {
    assert_eq!(HeadSet::for_strategy(Strategy::Feature), HeadSet::SURVIVAL_ONLY);
    assert_eq!(
        HeadSet::for_strategy(Strategy::DeepJoint).heads(),
        vec![Head::S, Head::I, Head::M]
    );
    assert_eq!(
        HeadSet::for_strategy(Strategy::DeepJointI).heads(),
        vec![Head::S, Head::I]
    );
    assert_eq!(
        HeadSet::for_strategy(Strategy::DeepJointM).heads(),
        vec![Head::S, Head::M]
    );
}

struct Toy {
    train: PreparedDataset,
    val: PreparedDataset,
}

fn toy(strategy: Strategy, n: usize) -> Toy {
    let (cohort, _) = generate(&GeneratorConfig {
        n_patients: n,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let s = split_random(&cohort, 0.2, 0.2, 3).unwrap();
    let tr = Splits::select(&cohort, &s.train);
    let stats = NormStats::fit(&tr, SplitRole::Train).unwrap();
    Toy {
        train: prepare_dataset(&tr, strategy, &stats).unwrap(),
        val: prepare_dataset(&Splits::select(&cohort, &s.val), strategy, &stats).unwrap(),
    }
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        batch_size: 32,
        max_epochs: 12,
        joint_epochs: 8,
        patience: 4,
        hidden_dim: 4,
        survival_width: 8,
        temporal_width: 8,
        missingness_width: 8,
        seed,
        ..TrainConfig::default()
    }
}

fn bits(m: &JointModel) -> Vec<(String, Vec<u64>)> {
    m.params
        .iter()
        .map(|p| (p.id.clone(), p.tensor.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn fit(strategy: Strategy, data: &Toy, cfg: &TrainConfig) -> (JointModel, TrainHistory) {
    let mut m = JointModel::new(strategy, data.train.stats.clone(), cfg).unwrap();
    let h = train_joint(&mut m, &data.train, &data.val, cfg).unwrap();
    (m, h)
}

#[test]
fn zero_alpha_joint_training_equals_feature_training() {
    let data = toy(Strategy::Feature, 160);
    let cfg = TrainConfig { alpha: 0.0, ..quick(5) };
    let (feat, _) = fit(Strategy::Feature, &data, &cfg);
    let mut dj_data = toy(Strategy::DeepJoint, 160);
    for ds in [&mut dj_data.train, &mut dj_data.val] {
        assert!(ds.patients.iter().all(|p| p.input.as_sequence().is_some()));
    }
    let (dj, hist) = fit(Strategy::DeepJoint, &dj_data, &cfg);
    assert!(hist.epochs.iter().any(|e| e.train.temporal.is_some()));
    let shared: Vec<_> = bits(&dj)
        .into_iter()
        .filter(|(id, _)| id.starts_with("enc.") || id.starts_with("surv."))
        .collect();
    assert_eq!(shared, bits(&feat));
    assert_eq!(dj.breslow, feat.breslow);
    let p: Vec<_> = data.val.patients.iter().collect();
    let a = feat.log_hazards(&p).unwrap();
    let b = dj.log_hazards(&p).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn survival_only_heads_reduce_deepjoint_to_feature() {
    let data = toy(Strategy::Feature, 120);
    let cfg = quick(2);
    let (feat, _) = fit(Strategy::Feature, &data, &cfg);
    let dj_data = toy(Strategy::DeepJoint, 120);
    let cfg_s = TrainConfig {
        heads: Some(vec![Head::S]),
        ..cfg
    };
    let (dj, _) = fit(Strategy::DeepJoint, &dj_data, &cfg_s);
    assert!(dj.temporal.is_none() && dj.missingness.is_none());
    assert_eq!(bits(&dj), bits(&feat));
}

#[test]
fn fine_tuning_leaves_encoder_untouched() {
    let data = toy(Strategy::DeepJoint, 120);
    let joint_only = TrainConfig {
        max_epochs: 8,
        ..quick(9)
    };
    let (a, ha) = fit(Strategy::DeepJoint, &data, &joint_only);
    let (b, hb) = fit(Strategy::DeepJoint, &data, &quick(9));
    assert!(ha.epochs.iter().all(|e| e.phase == Phase::Joint));
    for head in [Head::S, Head::I, Head::M] {
        assert!(hb.epochs.iter().any(|e| e.phase == Phase::FineTune(head)));
    }
    let enc = |m: &JointModel| -> Vec<_> { bits(m).into_iter().filter(|(id, _)| id.starts_with("enc.")).collect() };
    assert!(!enc(&a).is_empty());
    assert_eq!(enc(&a), enc(&b));
    assert_ne!(bits(&a), bits(&b));
}

#[test]
fn early_stopping_keeps_best_validation_epoch() {
    let data = toy(Strategy::Ignore, 160);
    let cfg = TrainConfig {
        max_epochs: 40,
        joint_epochs: 40,
        patience: 5,
        ..quick(1)
    };
    let (_, h) = fit(Strategy::Ignore, &data, &cfg);
    let vals: Vec<f64> = h.epochs.iter().map(|e| e.val).collect();
    let best = vals.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(h.best[0].1, best);
    assert!(best <= *vals.last().unwrap());
    let mut run = f64::INFINITY;
    for e in &h.epochs {
        assert_eq!(e.improved, e.val < run);
        run = run.min(e.val);
    }
}

#[test]
fn training_is_reproducible() {
    let data = toy(Strategy::GruD, 100);
    let (a, ha) = fit(Strategy::GruD, &data, &quick(4));
    let (b, hb) = fit(Strategy::GruD, &data, &quick(4));
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(ha, hb);
    let (c, _) = fit(Strategy::GruD, &data, &quick(5));
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn ablations_drop_their_head() {
    let data = toy(Strategy::DeepJointM, 100);
    let (m, h) = fit(Strategy::DeepJointM, &data, &quick(0));
    assert!(m.temporal.is_none() && m.missingness.is_some());
    assert!(h.epochs.iter().all(|e| e.train.temporal.is_none()));
    assert!(h
        .epochs
        .iter()
        .filter(|e| e.phase == Phase::Joint)
        .all(|e| e.train.missingness.is_some()));
    let data = toy(Strategy::DeepJointI, 100);
    let (m, _) = fit(Strategy::DeepJointI, &data, &quick(0));
    assert!(m.temporal.is_some() && m.missingness.is_none());
}

#[test]
fn static_strategies_train_and_predict() {
    for s in [Strategy::Last, Strategy::Count] {
        let data = toy(s, 120);
        let (m, h) = fit(s, &data, &quick(0));
        assert!(m.encoder.is_none());
        assert!(h.epochs.iter().all(|e| e.phase == Phase::Joint));
        let p: Vec<_> = data.val.patients.iter().collect();
        let surv = m.survival_at(&p, 7.0).unwrap();
        assert!(surv.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn training_rejects_bad_inputs() {
    let data = toy(Strategy::Ignore, 100);
    let cfg = quick(0);
    let mut m = JointModel::new(Strategy::Ignore, data.train.stats.clone(), &cfg).unwrap();
    let mut empty = data.val.clone();
    empty.patients.clear();
    assert!(train_joint(&mut m, &data.train, &empty, &cfg).is_err());
    let mut censored = data.train.clone();
    for p in &mut censored.patients {
        p.label.event = false;
    }
    assert!(matches!(
        train_joint(&mut m, &censored, &data.val, &cfg),
        Err(crate::Error::NoEvents)
    ));
    let other = toy(Strategy::Resample, 100);
    assert!(train_joint(&mut m, &other.train, &other.val, &cfg).is_err());
}

#[test]
fn search_is_deterministic_and_sorted() {
    let data = toy(Strategy::Last, 100);
    let space = SearchSpace {
        lr: vec![1e-2, 1e-3],
        batch_size: vec![32],
        alpha: vec![0.1],
        rnn_layers: vec![1],
        hidden_dim: vec![4],
        head_layers: vec![0, 1],
        head_width: vec![8],
    };
    assert_eq!(space.size(), 16);
    let base = quick(0);
    let a = random_search(&space, &base, &data.train, &data.val, 3, 11).unwrap();
    assert_eq!(a, random_search(&space, &base, &data.train, &data.val, 3, 11).unwrap());
    assert_eq!(a.leaderboard.len(), 3);
    assert!(a.leaderboard.windows(2).all(|w| w[0].val_cindex >= w[1].val_cindex));
    assert_eq!(a.best, a.leaderboard[0].config);
    let one = random_search(&space, &base, &data.train, &data.val, 1, 11).unwrap();
    assert_eq!(one.leaderboard.len(), 1);
    assert_eq!(one.best, one.leaderboard[0].config);
    let mut empty = space.clone();
    empty.lr.clear();
    assert!(random_search(&empty, &base, &data.train, &data.val, 3, 11).is_err());
}

#[test]
fn grid_enumeration_covers_every_point() {
    let space = SearchSpace::default();
    let base = TrainConfig::default();
    let n = space.size();
    assert_eq!(n, 2 * 2 * 2 * 2 * 2 * 4 * 4 * 4);
    let all: std::collections::HashSet<String> = (0..n)
        .map(|i| serde_json::to_string(&space.config(&base, i)).unwrap())
        .collect();
    assert_eq!(all.len(), n);
}

proptest! {
    #[test]
    fn dwa_weights_are_positive_and_sum_to_two(a in 0.05f64..20.0, b in 0.05f64..20.0, theta in 0.5f64..50.0) {
        let w = dwa_weights([a, b], theta);
        prop_assert!(w[0] > 0.0 && w[1] > 0.0);
        prop_assert!((w[0] + w[1] - 2.0).abs() < 1e-12);
    }
}
