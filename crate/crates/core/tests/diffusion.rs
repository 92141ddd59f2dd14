mod common;

use common::{central_diff, rel_err, tiny_denoiser, toy_dataset, wavy};
use raddiff_core::diffusion::{estimate_f0_on, loss_rgb, loss_rgb_on, sample_loss, standard_normal};
use raddiff_core::*;
use raddiff_tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schedule() -> NoiseSchedule {
    linear_schedule(0.0015, 0.05, 1000).unwrap()
}

#[test]
fn marginal_statistics_at_step_500() {
    let s = schedule();
    let n = 100_000;
    let f0 = Tensor::full(&[n], 0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let eps = standard_normal(&[n], &mut rng);
    let ft = forward_diffuse(&f0, 500, &eps, &s).unwrap();
    let mean = ft.sum() / n as f64;
    let var = ft.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let want_var = 1.0 - s.alpha_bar[500];
    let se_mean = (want_var / n as f64).sqrt();
    let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
    assert!((mean - s.sqrt_alpha_bar(500) * 0.7).abs() < 3.0 * se_mean);
    assert!((var - want_var).abs() < 3.0 * se_var);
}

#[test]
fn final_step_is_nearly_pure_noise() {
    let s = schedule();
    let f0 = wavy(3, 1.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eps = standard_normal(f0.shape(), &mut rng);
    let ft = forward_diffuse(&f0, 1000, &eps, &s).unwrap();
    let bound = s.sqrt_alpha_bar(1000) * f0.max_abs() + (1.0 - s.sqrt_one_minus_alpha_bar(1000)) * eps.max_abs();
    assert!(ft.max_abs_diff(&eps).unwrap() <= bound + 1e-15);
    assert!(bound < 3e-6);
}

#[test]
fn zero_prediction_estimate_is_rescaled_input() {
    let s = schedule();
    let ft = wavy(2, 1.0, 0.2);
    let est = estimate_f0(&ft, 250, &Tensor::zeros(ft.shape()), &s).unwrap();
    for (a, b) in est.data().iter().zip(ft.data()) {
        assert!((a - b / s.sqrt_alpha_bar(250)).abs() < 1e-12);
    }
}

#[test]
fn loss_rf_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = standard_normal(&[64], &mut rng);
    let b = standard_normal(&[64], &mut rng);
    let mut order: Vec<usize> = (0..64).collect();
    order.shuffle(&mut rng);
    let pa = Tensor::new(&[64], order.iter().map(|&i| a.data()[i]).collect()).unwrap();
    let pb = Tensor::new(&[64], order.iter().map(|&i| b.data()[i]).collect()).unwrap();
    assert!((loss_rf(&a, &b).unwrap() - loss_rf(&pa, &pb).unwrap()).abs() < 1e-12);
}

#[test]
fn loss_rf_gradient_is_analytic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eps = standard_normal(&[4, 2, 2, 2], &mut rng);
    let pred = standard_normal(&[4, 2, 2, 2], &mut rng);
    let mut tape = Tape::new();
    let p = tape.param(pred.clone());
    let l = raddiff_core::diffusion::loss_rf_on(&mut tape, &eps, p).unwrap();
    let g = tape.backward(l).unwrap();
    let g = g.get(p).unwrap();
    for i in 0..pred.len() {
        let want = 2.0 * (pred.data()[i] - eps.data()[i]) / pred.len() as f64;
        assert!((g.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn rendering_loss_gradient_reaches_noise_prediction() {
    let s = schedule();
    let data = toy_dataset(4, 6, 6);
    let sample = &data[0];
    let cfg = TrainingConfig {
        pixels_per_step: 40,
        views_per_step: 2,
        ..Default::default()
    };
    let t = 5;
    let f0 = sample.field.to_tensor().map(|v| 0.8 * v);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eps = standard_normal(f0.shape(), &mut rng);
    let ft = forward_diffuse(&f0, t, &eps, &s).unwrap();
    let pred0 = eps
        .zip_map(&standard_normal(f0.shape(), &mut rng), |a, b| a + 0.1 * b)
        .unwrap();
    let eval = |pred: &Tensor| {
        let mut tape = Tape::new();
        let p = tape.param(pred.clone());
        let est = estimate_f0_on(&mut tape, &ft, t, p, &s).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(77);
        let l = loss_rgb_on(&mut tape, est, sample, t, &s, &cfg, &mut r).unwrap();
        let g = tape.backward(l).unwrap().get(p).cloned().unwrap();
        (tape.value(l).item().unwrap(), g)
    };
    let (value, grad) = eval(&pred0);
    assert!(value > 0.0);
    let mut worst: f64 = 0.0;
    for i in (0..pred0.len()).step_by(3) {
        let fd = central_diff(&pred0, i, 1e-5, |p| eval(p).0);
        worst = worst.max(rel_err(grad.data()[i], fd));
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn rendering_loss_vanishes_at_final_step() {
    let s = schedule();
    let data = toy_dataset(4, 4, 6);
    let cfg = TrainingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let est = wavy(4, 5.0, 0.0);
    let l = loss_rgb(&est, &data[1], 1000, &s, &cfg, &mut rng).unwrap();
    assert!(l < 1e-22 && l <= s.omega[1000] * 3.0);
}

#[test]
fn zero_lambda_total_is_plain_denoising_loss() {
    let s = schedule();
    let data = toy_dataset(4, 4, 6);
    let net = DenoiserNet::new(
        DenoiserConfig {
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            resnet_blocks_per_level: 1,
            attention_levels: vec![],
            attention_head_channels: 4,
            time_embed_dim: Some(8),
        },
        0,
    )
    .unwrap();
    let cfg = TrainingConfig {
        lambda_rgb: 0.0,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eps = standard_normal(&[4, 4, 4, 4], &mut rng);
    let (l, _) = sample_loss(&net, &data[0], 3, &eps, &s, &cfg, &mut rng).unwrap();
    assert_eq!(l.total, l.loss_rf);
    assert_eq!(l.loss_rgb, 0.0);
    let with_rgb = TrainingConfig::default();
    let (l1, _) = sample_loss(&net, &data[0], 3, &eps, &s, &with_rgb, &mut rng).unwrap();
    assert_eq!(l1.loss_rf, l.loss_rf);
    assert!(l1.total > l.total);
}

fn small_trainer(seed: u64) -> Trainer {
    let cfg = TrainingConfig {
        pixels_per_step: 32,
        batch_size: 2,
        lr: 1e-3,
        seed,
        ..Default::default()
    };
    let net_cfg = DenoiserConfig {
        base_channels: 4,
        attention_head_channels: 4,
        time_embed_dim: Some(8),
        ..tiny_denoiser()
    };
    Trainer::new(DenoiserNet::new(net_cfg, seed).unwrap(), schedule(), cfg).unwrap()
}

#[test]
fn training_is_deterministic() {
    let data = toy_dataset(4, 4, 6);
    let mut a = small_trainer(3);
    let mut b = small_trainer(3);
    for _ in 0..3 {
        assert_eq!(a.step_on(&data).unwrap(), b.step_on(&data).unwrap());
    }
    assert_eq!(a.net.params, b.net.params);
    let mut c = small_trainer(4);
    assert_ne!(c.step_on(&data).unwrap(), small_trainer(3).step_on(&data).unwrap());
}

#[test]
fn trainer_checkpoint_restores_state() {
    let data = toy_dataset(4, 4, 6);
    let mut a = small_trainer(8);
    a.step_on(&data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    a.save(&path).unwrap();
    let mut b = Trainer::load(&path).unwrap();
    assert_eq!(b.step, 1);
    assert_eq!(b.adam.step, 1);
    assert_eq!(b.config, a.config);
    assert_eq!(b.schedule, a.schedule);
    for (k, v) in &a.net.params {
        let w = &b.net.params[k];
        assert!(v.max_abs_diff(w).unwrap() <= 1e-6 * (1.0 + v.max_abs()));
    }
    // identical random streams: same draws, losses equal up to f32 storage
    let la = a.step_on(&data).unwrap();
    let lb = b.step_on(&data).unwrap();
    assert!((la.total - lb.total).abs() < 1e-4 * la.total.abs());
    let net = DenoiserNet::load(&path).unwrap();
    assert_eq!(net.config, a.net.config);
}

#[test]
fn empty_batch_is_rejected() {
    let mut t = small_trainer(0);
    assert!(t.train_step(&[]).is_err());
}

#[test]
fn moving_average_tracks_weights_and_survives_checkpoints() {
    let data = toy_dataset(4, 4, 6);
    let with_decay = |d: f64| {
        let mut t = small_trainer(5);
        t.config.ema_decay = Some(d);
        t.ema = Some(t.net.params.clone());
        t
    };
    // decay 0 copies the weights; decay 0.5 lands halfway after one step
    let mut copy = with_decay(0.0);
    let mut half = with_decay(0.5);
    let start = half.net.params.clone();
    copy.step_on(&data).unwrap();
    half.step_on(&data).unwrap();
    assert_eq!(copy.sampling_net().params, copy.net.params);
    for (k, avg) in half.ema.as_ref().unwrap() {
        let want = start[k].zip_map(&half.net.params[k], |a, b| 0.5 * a + 0.5 * b).unwrap();
        assert!(avg.max_abs_diff(&want).unwrap() < 1e-15);
    }
    assert!(small_trainer(5).ema.is_none());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    half.save(&path).unwrap();
    let back = Trainer::load(&path).unwrap();
    let (a, b) = (half.sampling_net(), back.sampling_net());
    for (k, v) in &a.params {
        assert!(v.max_abs_diff(&b.params[k]).unwrap() <= 1e-6 * (1.0 + v.max_abs()));
    }
    let mut bad = TrainingConfig::default();
    bad.ema_decay = Some(1.0);
    assert!(bad.validate().is_err());
}
