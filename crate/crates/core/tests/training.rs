use std::fs;

use mtrnet::model::{DiscriminatorSpec, GeneratorSpec, Tensor};
use mtrnet::pipeline::assemble;
use mtrnet::training::{
    epoch_checkpoint_name, g_adv_grad, g_total_with_grads, lr_at, train_loop, LoopOptions, TrainBatch, Trainer,
    TrainingConfig, FINAL_CHECKPOINT, TRACE_FILE, TRACE_HEADER,
};
use mtrnet::{Error, Generator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

#[test]
fn learning_rate_schedule_values() {
    let cfg = TrainingConfig::default();
    assert_eq!(lr_at(0, &cfg), 0.0002);
    assert_eq!(lr_at(2 * cfg.epoch_size - 1, &cfg), 0.0002);
    assert!((lr_at(2 * cfg.epoch_size, &cfg) - 0.0002 * 0.95).abs() < 1e-18);
    assert!((lr_at(4 * cfg.epoch_size + 3, &cfg) - 0.0002 * 0.95 * 0.95).abs() < 1e-18);
}

#[test]
fn adversarial_gradient_of_single_logit() {
    for l in [-3.0, -0.5, 0.0, 0.7, 4.0] {
        let g = g_adv_grad(&Tensor::<f64>::filled([1, 1, 1, 1], l));
        let sigma = 1.0 / (1.0 + (-l).exp());
        assert!((g.data()[0] - (sigma - 1.0)).abs() < 1e-15);
    }
}

fn random_batch(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: [usize; 4]| {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    (r([2, 4, 32, 32]), r([2, 3, 32, 32]))
}

#[test]
fn zero_lambda_leaves_only_the_adversarial_gradient() {
    let g = Generator::<f64>::new(GeneratorSpec::test_scale(), 1).unwrap();
    let mut d = mtrnet::Discriminator::<f64>::new(DiscriminatorSpec::test_scale(), 2).unwrap();
    let (x, y1) = random_batch(3);
    let (_, y2) = random_batch(4);
    let (l1, g1) = g_total_with_grads(&g, &d, &x, &y1, 0.0).unwrap();
    let (l2, g2) = g_total_with_grads(&g, &d, &x, &y2, 0.0).unwrap();
    assert_eq!(l1.total, l1.adv);
    assert_eq!(l1.adv, l2.adv);
    assert_eq!(g1, g2, "target influenced the λ = 0 gradient");
    let (_, g3) = g_total_with_grads(&g, &d, &x, &y1, 100.0).unwrap();
    assert_ne!(g1, g3);

    // a discriminator frozen at zero logits gives ln 2 and no signal
    let head = d.network_mut().layers_mut().last_mut().unwrap();
    head.weight.iter_mut().for_each(|w| *w = 0.0);
    head.bias.iter_mut().for_each(|b| *b = 0.0);
    let (loss, grads) = g_total_with_grads(&g, &d, &x, &y1, 0.0).unwrap();
    assert!((loss.adv - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(grads.iter().all(|l| l.arrays().iter().all(|a| a.iter().all(|&v| v == 0.0))));
}

#[test]
fn large_lambda_overfits_one_batch_monotonically() {
    let samples = common::samples(&common::small_spec(4), 4);
    let corpus = common::prepared(&samples, 32);
    let refs: Vec<_> = corpus.iter().collect();
    let (x, y) = assemble(&refs, true);
    let batch = TrainBatch { x, y };
    let mut t = common::test_trainer(TrainingConfig {
        lambda_l1: 1e6,
        lr0: 0.0002,
        ..common::test_config()
    });
    let l1: Vec<f64> = (0..50).map(|_| t.train_step(&batch).unwrap().g_l1_loss).collect();
    for w in l1.windows(2) {
        assert!(w[1] <= w[0], "l1 went up: {l1:?}");
    }
    assert!(l1[49] < l1[0]);
}

#[test]
fn bookkeeping_identity_every_step() {
    let corpus = common::prepared(&common::samples(&common::small_spec(5), 8), 32);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainingConfig {
        epoch_size: 3,
        epochs: 2,
        ..common::test_config()
    };
    let mut t = common::test_trainer(cfg.clone());
    let opts = LoopOptions {
        checkpoint_dir: dir.path().to_path_buf(),
        max_steps: None,
    };
    let out = t.run(&corpus, &opts, |r| assert_eq!(r.g_total, r.g_adv_loss + cfg.lambda_l1 * r.g_l1_loss)).unwrap();
    assert_eq!(out.reports.len(), 6);
    assert_eq!(out.checkpoints, vec![dir.path().join(epoch_checkpoint_name(1)), dir.path().join(epoch_checkpoint_name(2))]);
    let files: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".mtrn"))
        .collect();
    assert_eq!(files.len(), 2 + 1);
    assert!(dir.path().join(FINAL_CHECKPOINT).exists());
    let trace = fs::read_to_string(dir.path().join(TRACE_FILE)).unwrap();
    assert_eq!(trace.lines().next(), Some(TRACE_HEADER));
    assert_eq!(trace.lines().count(), 7);
}

#[test]
fn resumed_loop_continues_the_trace() {
    let corpus = common::prepared(&common::samples(&common::small_spec(6), 8), 32);
    let cfg = TrainingConfig {
        epoch_size: 3,
        epochs: 2,
        ..common::test_config()
    };
    let opts = |d: &std::path::Path| LoopOptions {
        checkpoint_dir: d.to_path_buf(),
        max_steps: None,
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    common::test_trainer(cfg.clone()).run(&corpus, &opts(a.path()), |_| {}).unwrap();
    common::test_trainer(cfg).run(&corpus, &opts(b.path()), |_| {}).unwrap();
    let mut t = Trainer::<f32>::load(&b.path().join(epoch_checkpoint_name(1))).unwrap();
    assert_eq!(t.step(), 3);
    t.run(&corpus, &opts(b.path()), |_| {}).unwrap();
    assert_eq!(
        fs::read_to_string(a.path().join(TRACE_FILE)).unwrap(),
        fs::read_to_string(b.path().join(TRACE_FILE)).unwrap()
    );
}

#[test]
fn corpus_smaller_than_a_batch_is_rejected() {
    let corpus = common::prepared(&common::samples(&common::small_spec(7), 2), 256);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainingConfig::default();
    let err = train_loop(
        &corpus,
        &cfg,
        &LoopOptions {
            checkpoint_dir: dir.path().to_path_buf(),
            max_steps: Some(1),
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}
