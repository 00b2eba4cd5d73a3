//! Training-loop behavior: convergence on separable data, determinism,
//! first-epoch loss decrease for every head, chance-level evaluation, and
//! hyper-power sigma tracking along a real optimization trajectory.

mod common;

use caproj::backbone::{zero_gradients, Mlp};
use caproj::capsule::{CapsuleSubspace, SigmaMode, DEFAULT_EPS};
use caproj::data::{synth_blobs, SynthConfig};
use caproj::heads::{softmax_loss, CapsuleHead, Head, HeadGrads, HeadKind};
use caproj::model::Model;
use caproj::seed::{child_seed, stream_rng};
use caproj::train::{
    build_dataset, compare_heads, evaluate, train, DatasetSpec, HeadSpec, TrainConfig,
};
use rand::seq::SliceRandom;

fn small_task(classes: usize, dim: usize, rank: usize, per_class: usize, spread: f64) -> DatasetSpec {
    DatasetSpec::SynthLowRank(SynthConfig {
        num_classes: classes,
        dim,
        subspace_rank: rank,
        train_per_class: per_class,
        test_per_class: per_class / 5 + 1,
        spread,
    })
}

#[test]
fn separable_two_class_task_reaches_zero_train_error() {
    let config = TrainConfig {
        seed: 1,
        epochs: 50,
        batch_size: 16,
        feature_dim: 8,
        hidden_dims: vec![16],
        capsule_dim: 2,
        lr_schedule: vec![(25, 0.1)],
        dataset: small_task(2, 8, 2, 50, 0.0),
        ..TrainConfig::default()
    };
    let data = build_dataset(&config).unwrap();
    let outcome = train(&config, &data).unwrap();
    let reached_zero = outcome.record.epochs.iter().any(|e| e.train_error == 0.0);
    assert!(
        reached_zero,
        "train error never hit zero: final {}",
        outcome.record.epochs.last().unwrap().train_error
    );
}

#[test]
fn loss_decreases_over_the_first_epoch_for_every_head_kind() {
    for kind in [HeadKind::Capsule, HeadKind::Linear, HeadKind::GroupNeuron] {
        let config = TrainConfig {
            seed: 3,
            epochs: 2,
            head_kind: kind,
            lr_schedule: Vec::new(),
            dataset: small_task(10, 64, 4, 100, 0.1),
            ..TrainConfig::default()
        };
        let data = build_dataset(&config).unwrap();
        let outcome = train(&config, &data).unwrap();
        let e = &outcome.record.epochs;
        assert!(
            e[1].train_loss < e[0].train_loss,
            "{kind}: loss went {} -> {}",
            e[0].train_loss,
            e[1].train_loss
        );
    }
}

#[test]
fn untrained_model_sits_at_chance_level() {
    let classes = 10;
    let cfg = SynthConfig {
        num_classes: classes,
        dim: 64,
        subspace_rank: 4,
        train_per_class: 1,
        test_per_class: 100,
        spread: 0.1,
    };
    let mut errors = Vec::new();
    for seed in 0..10u64 {
        let data = synth_blobs(child_seed(seed, "chance/data"), &cfg).unwrap();
        let mut rng = stream_rng(seed, "chance/model");
        let backbone = Mlp::random(&[64, 128, 64], &mut rng).unwrap();
        let head = Head::Capsule(
            CapsuleHead::random(classes, 64, 4, SigmaMode::Exact, DEFAULT_EPS, &mut rng).unwrap(),
        );
        let model = Model::new(backbone, head).unwrap();
        errors.push(evaluate(&model, &data.test).unwrap().error_rate);
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let chance = 1.0 - 1.0 / classes as f64;
    assert!(
        (mean - chance).abs() < 0.05,
        "mean error {mean} not near chance {chance}: {errors:?}"
    );
}

#[test]
fn absurd_learning_rate_reports_divergence_with_step_index() {
    let config = TrainConfig {
        seed: 2,
        epochs: 5,
        batch_size: 8,
        learning_rate: 1e150,
        feature_dim: 8,
        hidden_dims: vec![8],
        capsule_dim: 2,
        lr_schedule: Vec::new(),
        dataset: small_task(2, 8, 2, 20, 0.1),
        ..TrainConfig::default()
    };
    let data = build_dataset(&config).unwrap();
    match train(&config, &data) {
        Err(caproj::train::TrainError::Diverged { step }) => {
            assert!(step < 15, "diverged suspiciously late: step {step}");
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn oracle_model_scores_zero_error_on_its_own_construction() {
    // Identity backbone + axis-aligned subspaces classify axis-aligned
    // samples perfectly.
    let d = 6;
    let backbone = Mlp::new(vec![caproj::backbone::DenseLayer {
        weight: caproj::linalg::Matrix::identity(d),
        bias: caproj::linalg::Vector::zeros(d),
        activation: caproj::backbone::Activation::Identity,
    }])
    .unwrap();
    let axis_subspace = |axes: &[usize]| {
        let mut w = caproj::linalg::Matrix::zeros(d, axes.len());
        for (j, &a) in axes.iter().enumerate() {
            w.set(a, j, 1.0);
        }
        CapsuleSubspace::new(w, SigmaMode::Exact, DEFAULT_EPS).unwrap()
    };
    let head = Head::Capsule(
        caproj::heads::CapsuleHead::new(vec![
            axis_subspace(&[0, 1]),
            axis_subspace(&[2, 3]),
            axis_subspace(&[4, 5]),
        ])
        .unwrap(),
    );
    let model = Model::new(backbone, head).unwrap();
    let mut samples = Vec::new();
    let mut rng = stream_rng(4, "oracle/model");
    for class in 0..3usize {
        for _ in 0..20 {
            let mut x = caproj::linalg::Vector::zeros(d);
            let a: f64 = rand::Rng::random_range(&mut rng, 0.5..2.0);
            let b: f64 = rand::Rng::random_range(&mut rng, 0.5..2.0);
            x.set(2 * class, a);
            x.set(2 * class + 1, b);
            samples.push((x, class));
        }
    }
    let report = evaluate(&model, &samples).unwrap();
    assert_eq!(report.error_rate, 0.0);
    for stats in &report.per_class {
        assert_eq!(stats.accuracy(), Some(1.0));
    }
}

#[test]
fn compare_heads_emits_one_row_per_spec_and_is_deterministic() {
    let base = TrainConfig {
        epochs: 2,
        batch_size: 16,
        feature_dim: 8,
        hidden_dims: vec![12],
        lr_schedule: vec![(1, 0.1)],
        dataset: small_task(3, 8, 2, 20, 0.05),
        ..TrainConfig::default()
    };
    let specs = [
        HeadSpec {
            kind: HeadKind::Capsule,
            capsule_dim: 2,
        },
        HeadSpec {
            kind: HeadKind::Linear,
            capsule_dim: 0,
        },
        HeadSpec {
            kind: HeadKind::Capsule,
            capsule_dim: 2,
        },
    ];
    let table = compare_heads(&base, &specs, &[0, 1]).unwrap();
    assert_eq!(table.rows.len(), 3);
    assert_eq!(table.rows[0].test_errors.len(), 2);
    // Identical specs give identical rows.
    assert_eq!(table.rows[0].test_errors, table.rows[2].test_errors);
    assert_eq!(table.rows[0].mean_error, table.rows[2].mean_error);
    // Capsule rows carry an overhead figure relative to the linear row.
    assert!(table.rows[0].overhead_vs_linear.is_some());
    assert!(table.rows[1].overhead_vs_linear.is_none());
}

/// Hyper-power sigma maintenance must track the exact inverse along a real
/// training trajectory. The trajectory is driven with exact-sigma gradients
/// so both estimates see identical weight updates; the hyper-power estimate
/// is carried alongside with one recursion step per optimizer step.
#[test]
fn hyperpower_sigma_tracks_exact_sigma_for_200_steps() {
    let config = TrainConfig::default();
    let data = build_dataset(&config).unwrap();
    let d = config.feature_dim;
    let c = config.capsule_dim;
    let classes = data.num_classes;

    let mut dims = vec![data.input_dim];
    dims.extend_from_slice(&config.hidden_dims);
    dims.push(d);
    let mut backbone =
        Mlp::random(&dims, &mut stream_rng(config.seed, "init/backbone")).unwrap();
    let mut head = Head::Capsule(
        CapsuleHead::random(
            classes,
            d,
            c,
            SigmaMode::Exact,
            config.eps,
            &mut stream_rng(config.seed, "init/head"),
        )
        .unwrap(),
    );

    // Parallel hyper-power sigma estimates, initialized exactly.
    let mut hp_sigmas: Vec<_> = match &head {
        Head::Capsule(h) => h.subspaces().iter().map(|s| s.sigma().clone()).collect(),
        _ => unreachable!(),
    };

    let mut vel_layers = zero_gradients(&backbone);
    let mut vel_head = HeadGrads::zeros_like(&head);
    let lr = config.learning_rate;
    let mu = config.momentum;

    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(config.seed, "shuffle/0"));
    let mut worst_ratio = 0.0f64;
    let mut steps = 0usize;

    'outer: for epoch in 0.. {
        if epoch > 0 {
            order.shuffle(&mut stream_rng(config.seed, &format!("shuffle/{epoch}")));
        }
        for batch in order.chunks(config.batch_size) {
            let inv = 1.0 / batch.len() as f64;
            let mut grad_layers = zero_gradients(&backbone);
            let mut grad_head = HeadGrads::zeros_like(&head);
            for &idx in batch {
                let (x, y) = &data.train[idx];
                let (features, tape) = backbone.forward(x).unwrap();
                let out = head.forward(&features).unwrap();
                softmax_loss(out.scores(), *y).unwrap();
                let hb = head.backward(&features, *y, &out).unwrap();
                let (lg, _) = backbone.backward(&tape, &hb.input).unwrap();
                grad_head.add_scaled(&hb.weights, inv).unwrap();
                for (acc, g) in grad_layers.iter_mut().zip(&lg) {
                    acc.weight.add_scaled(&g.weight, inv).unwrap();
                    acc.bias.add_scaled(&g.bias, inv).unwrap();
                }
            }
            for (v, g) in vel_layers.iter_mut().zip(&grad_layers) {
                v.weight.scale_in_place(mu);
                v.weight.add_scaled(&g.weight, 1.0).unwrap();
                v.bias.as_mut_slice().iter_mut().for_each(|b| *b *= mu);
                v.bias.add_scaled(&g.bias, 1.0).unwrap();
            }
            vel_head.scale_in_place(mu);
            vel_head.add_scaled(&grad_head, 1.0).unwrap();
            for ((layer, g), v) in backbone
                .layers_mut()
                .iter_mut()
                .zip(&grad_layers)
                .zip(&vel_layers)
            {
                layer.weight.add_scaled(&g.weight, -lr).unwrap();
                layer.weight.add_scaled(&v.weight, -lr * mu).unwrap();
                layer.bias.add_scaled(&g.bias, -lr).unwrap();
                layer.bias.add_scaled(&v.bias, -lr * mu).unwrap();
            }
            head.apply_update(&grad_head, -lr).unwrap();
            head.apply_update(&vel_head, -lr * mu).unwrap();
            head.refresh_sigmas().unwrap();

            // One hyper-power step per subspace on the updated weights.
            if let Head::Capsule(h) = &head {
                for (l, s) in h.subspaces().iter().enumerate() {
                    let mut hp = CapsuleSubspace::from_parts(
                        s.weight().clone(),
                        hp_sigmas[l].clone(),
                        SigmaMode::HyperPower,
                        config.eps,
                    )
                    .unwrap();
                    hp.hyperpower_step().unwrap();
                    hp_sigmas[l] = hp.sigma().clone();
                    let exact = s.sigma();
                    let gap = hp_sigmas[l].sub(exact).unwrap().frobenius_norm();
                    let ratio = gap / exact.frobenius_norm();
                    worst_ratio = worst_ratio.max(ratio);
                    assert!(
                        ratio <= 1e-4,
                        "step {steps} class {l}: tracking ratio {ratio:e}"
                    );
                }
            }

            steps += 1;
            if steps >= 200 {
                break 'outer;
            }
        }
    }
    println!("worst hyper-power tracking ratio over 200 steps: {worst_ratio:e}");
}
