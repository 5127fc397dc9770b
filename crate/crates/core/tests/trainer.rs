mod common;

use std::collections::BTreeMap;

use volflow::model::{ModelConfig, ModelParams, ModelSize};
use volflow::trainer::*;
use volflow::Error;
use volflow_tensor::Tensor;

fn quick_config(steps: usize) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        warmup_steps: 1,
        batch_per_step: 4,
        lr_peak: 1e-3,
        seed: 5,
        ..Default::default()
    }
}

/// A bare parameter set for optimizer-only tests.
fn params_of(values: &[(&str, Vec<f32>)]) -> ModelParams {
    ModelParams {
        config: ModelConfig::new(ModelSize::Tiny, 4, 4),
        tensors: values
            .iter()
            .map(|(k, v)| (k.to_string(), Tensor::new(vec![v.len()], v.clone()).unwrap()))
            .collect(),
    }
}

fn grads_of(values: &[(&str, Vec<f32>)]) -> BTreeMap<String, Tensor<f32>> {
    params_of(values).tensors
}

#[test]
fn adam_first_steps_match_closed_form() {
    let mut p = params_of(&[("w", vec![1.0, -2.0, 0.5])]);
    let mut st = OptimState::new(&p);
    let g = vec![0.3f32, -4.0, 1e-3];
    let lr = 0.01;
    optim_step(&mut p, &grads_of(&[("w", g.clone())]), &mut st, lr).unwrap();
    // bias-corrected moments equal g and g², so each update is lr·g/(|g|+eps)
    let expect = [1.0 - lr, -2.0 + lr, 0.5 - lr * 1e-3 / (1e-3 + ADAM_EPS)];
    for (a, e) in p.tensors["w"].data().iter().zip(expect) {
        assert!((*a as f64 - e).abs() < 1e-6, "{a} vs {e}");
    }
    // second step with a different gradient
    let g2 = [0.1f64, -4.0, 1e-3];
    optim_step(&mut p, &grads_of(&[("w", g2.iter().map(|&x| x as f32).collect())]), &mut st, lr).unwrap();
    for (i, (&a, gi2)) in p.tensors["w"].data().iter().zip(g2).enumerate() {
        let gi = g[i] as f64;
        let m = (BETA1 * (1.0 - BETA1) * gi + (1.0 - BETA1) * gi2) / (1.0 - BETA1 * BETA1);
        let v = (BETA2 * (1.0 - BETA2) * gi * gi + (1.0 - BETA2) * gi2 * gi2) / (1.0 - BETA2 * BETA2);
        let e = expect[i] - lr * m / (v.sqrt() + ADAM_EPS);
        assert!((a as f64 - e).abs() < 1e-6, "{a} vs {e}");
    }
}

#[test]
fn adam_minimizes_a_quadratic_bowl() {
    let target = [3.0f32, -1.5, 0.25, 2.0];
    let mut p = params_of(&[("w", vec![0.0; 4])]);
    let mut st = OptimState::new(&p);
    for _ in 0..2000 {
        let g: Vec<f32> = p.tensors["w"].data().iter().zip(target).map(|(x, c)| 2.0 * (x - c)).collect();
        optim_step(&mut p, &grads_of(&[("w", g)]), &mut st, 1e-2).unwrap();
    }
    for (x, c) in p.tensors["w"].data().iter().zip(target) {
        assert!((x - c).abs() < 0.05, "{x} vs {c}");
    }
}

#[test]
fn zero_gradients_leave_parameters_alone() {
    let mut p = params_of(&[("a", vec![1.0, 2.0]), ("b", vec![-3.0])]);
    let before = p.clone();
    let mut st = OptimState::new(&p);
    for _ in 0..3 {
        optim_step(&mut p, &grads_of(&[("a", vec![0.0; 2]), ("b", vec![0.0])]), &mut st, 0.1).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let mut p = params_of(&[("a", vec![1.0]), ("blocks.0.attn.w", vec![1.0, 2.0])]);
    let before = p.clone();
    let mut st = OptimState::new(&p);
    let g = grads_of(&[("a", vec![0.1]), ("blocks.0.attn.w", vec![0.0, f32::NAN])]);
    match optim_step(&mut p, &g, &mut st, 0.1) {
        Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "blocks.0.attn.w"),
        other => panic!("expected a non-finite gradient error, got {other:?}"),
    }
    assert_eq!(p, before);
    assert_eq!(st.step, 0);
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut g = grads_of(&[("a", vec![3.0]), ("b", vec![4.0])]);
    assert_eq!(clip_grads(&mut g, 1.0), 5.0);
    assert!((grad_norm(&g) - 1.0).abs() < 1e-6);
    assert!((g["a"].data()[0] - 0.6).abs() < 1e-6);
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let ds = common::small_dataset(4, 3);
    let mut t = Trainer::new(quick_config(2), &ds).unwrap();
    t.run(|_, _| Ok(())).unwrap();
    let bytes = t.checkpoint().to_bytes();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ctck");
    t.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, t.checkpoint());
    assert_eq!(loaded.to_bytes(), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad, &path), Err(Error::Format { .. })));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], &path).is_err());
    let mut flipped = bytes.clone();
    flipped[4] = 99;
    assert!(Checkpoint::from_bytes(&flipped, &path).is_err());
}

#[test]
fn same_seed_training_is_bit_identical() {
    let ds = common::small_dataset(4, 3);
    let (a, la) = train(quick_config(3), &ds).unwrap();
    let (b, lb) = train(quick_config(3), &ds).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(loss_csv(&la), loss_csv(&lb));
    let (c, _) = train(TrainConfig { seed: 6, ..quick_config(3) }, &ds).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let ds = common::small_dataset(4, 3);
    let (full, full_log) = train(quick_config(4), &ds).unwrap();

    let (half, mut log) = train(quick_config(2), &ds).unwrap();
    let restored = Checkpoint::from_bytes(&half.to_bytes(), "mem".as_ref()).unwrap();
    let mut t = Trainer::resume(restored, quick_config(4), &ds).unwrap();
    log.extend(t.run(|_, _| Ok(())).unwrap());
    assert_eq!(t.checkpoint().to_bytes(), full.to_bytes());
    assert_eq!(loss_csv(&log), loss_csv(&full_log));

    let other = TrainConfig { lr_peak: 5e-3, ..quick_config(4) };
    assert!(Trainer::resume(half, other, &ds).is_err());
}

#[test]
fn accumulation_matches_a_large_batch() {
    let ds = common::small_dataset(4, 3);
    let big = TrainConfig { batch_per_step: 8, ..quick_config(2) };
    let acc = TrainConfig { batch_per_step: 4, accum_steps: 2, ..quick_config(2) };
    let (a, la) = train(big, &ds).unwrap();
    let (b, lb) = train(acc, &ds).unwrap();
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (name, x) in &a.params.tensors {
        for (p, q) in x.data().iter().zip(b.params.tensors[name].data()) {
            num += ((p - q) as f64).powi(2);
            den += (*p as f64).powi(2);
        }
    }
    assert!((num / den).sqrt() < 1e-5, "relative difference {}", (num / den).sqrt());
    for (x, y) in la.iter().zip(&lb) {
        assert!((x.loss - y.loss).abs() < 1e-5 * x.loss);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = common::small_dataset(2, 3);
    for cfg in [
        TrainConfig { total_steps: 0, ..Default::default() },
        TrainConfig { accum_steps: 0, ..Default::default() },
        TrainConfig { lr_peak: -1.0, ..Default::default() },
        TrainConfig { warmup_steps: 5000, ..Default::default() },
        TrainConfig { clip_grad_norm: Some(0.0), ..Default::default() },
    ] {
        assert!(matches!(Trainer::new(cfg, &ds), Err(Error::Parameter(_))));
    }
    assert!(TrainConfig::from_toml("lr_peek = 1.0").is_err());
}
