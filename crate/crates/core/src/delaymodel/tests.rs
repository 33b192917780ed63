use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dynsys::MeasurementSeries;
use crate::hankel::build_hankel;
use crate::neural::Activation;

fn toy_embedding(n: usize, len: usize, dt: f64) -> HankelEmbedding {
    let y: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 * dt;
            (1.3 * t).sin() + 0.5 * (3.1 * t).cos() + 0.2 * (0.7 * t).sin()
        })
        .collect();
    build_hankel(&MeasurementSeries::from_values(y, dt), n).unwrap()
}

fn toy_model(emb: &HankelEmbedding, p: Option<usize>, m: usize, hidden: Vec<usize>) -> DelayModel {
    let mut spec = ModelSpec::new(p, m);
    spec.hidden = hidden;
    spec.activation = Activation::Tanh;
    spec.seed = 11;
    assemble_model(emb, &spec).unwrap()
}

fn random_xi(model: &mut DelayModel, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in model.sindy.xi.iter_mut() {
        *v = scale * rng.random_range(0.2..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    }
}

#[test]
fn assemble_shapes() {
    let emb = toy_embedding(16, 200, 0.05);
    let model = toy_model(&emb, Some(4), 2, vec![8, 8]);
    assert_eq!(model.encoder.dims(), &[4, 8, 8, 2]);
    assert_eq!(model.decoder.dims(), &[2, 8, 8, 4]);
    assert_eq!(model.sindy.dim(), 2);
    assert!(model.sindy.xi.iter().all(|v| *v == 0.0));
    let raw = toy_model(&emb, None, 3, vec![8]);
    assert_eq!(raw.encoder.input_dim(), 16);
    assert_eq!(raw.decoder.output_dim(), 16);
    let mut spec = ModelSpec::new(Some(17), 2);
    assert!(assemble_model(&emb, &spec).is_err());
    spec.p = Some(4);
    spec.m = 0;
    assert!(assemble_model(&emb, &spec).is_err());
    spec.m = 2;
    spec.weights.cons = -1.0;
    assert!(assemble_model(&emb, &spec).is_err());
}

#[test]
fn total_is_weighted_sum() {
    let emb = toy_embedding(12, 150, 0.05);
    let mut model = toy_model(&emb, Some(5), 2, vec![6]);
    random_xi(&mut model, 1, 0.5);
    model.weights = LossWeights {
        hdot: 0.3,
        zdot: 0.7,
        z1: 1.1,
        cons: 0.2,
        reg: 0.05,
    };
    let data = TrainData::new(&model, &emb).unwrap();
    let l = compute_losses(&model, &data, &LossConfig { rollout_steps: 4, sup_weight: 0.0 }).unwrap();
    let w = model.weights;
    let expect = l.recon + w.hdot * l.hdot + w.zdot * l.zdot + w.z1 * l.z1 + w.cons * l.cons + w.reg * l.reg;
    assert!((l.total - expect).abs() <= 1e-10 * expect.abs().max(1.0));
    assert!([l.recon, l.hdot, l.zdot, l.z1, l.cons, l.reg].iter().all(|v| *v > 0.0));
}

#[test]
fn zero_xi_losses() {
    let emb = toy_embedding(10, 120, 0.05);
    let model = toy_model(&emb, Some(4), 2, vec![6]);
    let data = TrainData::new(&model, &emb).unwrap();
    let l = compute_losses(&model, &data, &LossConfig { rollout_steps: 2, sup_weight: 0.0 }).unwrap();
    assert_eq!(l.reg, 0.0);
    let (_, zdot, _) = model.encoder.forward_tangent_batch(&data.a, &data.adot).unwrap();
    let expect = zdot.norm_squared() / zdot.len() as f64;
    assert!((l.zdot - expect).abs() <= 1e-14 * expect);
}

#[test]
fn exact_inverse_decoder_reconstructs() {
    let emb = toy_embedding(3, 60, 0.1);
    let mut model = toy_model(&emb, None, 3, vec![]);
    let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 0.0, 1.0, -1.0, 1.0, 0.0, 3.0]);
    let inv = a.clone().try_inverse().unwrap();
    model.encoder.weight_mut(0).copy_from(&a);
    model.decoder.weight_mut(0).copy_from(&inv);
    let data = TrainData::new(&model, &emb).unwrap();
    let l = compute_losses(&model, &data, &LossConfig { rollout_steps: 1, sup_weight: 0.0 }).unwrap();
    assert!(l.recon < 1e-20, "{}", l.recon);
}

#[test]
fn no_basis_matches_identity_projection() {
    // a full-rank basis whose U is the identity reproduces the raw branch
    let emb = toy_embedding(6, 80, 0.05);
    let mut raw = toy_model(&emb, None, 2, vec![5]);
    random_xi(&mut raw, 4, 0.4);
    let mut with_basis = raw.clone();
    let mut basis = crate::hankel::truncated_svd(&emb, 6).unwrap();
    basis.u = DMatrix::identity(6, 6);
    with_basis.basis = Some(basis);
    let cfg = LossConfig { rollout_steps: 3, sup_weight: 0.0 };
    let l1 = compute_losses(&raw, &TrainData::new(&raw, &emb).unwrap(), &cfg).unwrap();
    let l2 = compute_losses(&with_basis, &TrainData::new(&with_basis, &emb).unwrap(), &cfg).unwrap();
    assert_eq!(l1, l2);
}

/// Central-difference check of the full objective over every parameter.
#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let emb = toy_embedding(6, 40, 0.05);
    let mut model = toy_model(&emb, Some(4), 2, vec![8]);
    random_xi(&mut model, 9, 0.8);
    model.weights = LossWeights {
        hdot: 0.5,
        zdot: 0.5,
        z1: 1.0,
        cons: 1.0,
        reg: 0.1,
    };
    for b in model.encoder.bias_mut(0) {
        *b = 0.1;
    }
    let full = TrainData::new(&model, &emb).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let targets = DMatrix::from_fn(2, full.len(), |_, _| rng.random_range(-1.0..1.0));
    let data = full.with_targets(targets).unwrap().select(&[0, 3, 7, 12, 20]);
    let cfg = LossConfig { rollout_steps: 3, sup_weight: 0.5 };
    let (_, g) = loss_and_gradient(&model, &data, &cfg).unwrap();
    let objective = |m: &DelayModel| compute_losses(m, &data, &cfg).unwrap().objective(cfg.sup_weight);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut check = |fd: f64, an: f64| {
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
    };
    for i in 0..model.encoder.num_params() {
        let mut p = model.clone();
        p.encoder.params_mut()[i] += eps;
        let mut q = model.clone();
        q.encoder.params_mut()[i] -= eps;
        check((objective(&p) - objective(&q)) / (2.0 * eps), g.encoder[i]);
    }
    for i in 0..model.decoder.num_params() {
        let mut p = model.clone();
        p.decoder.params_mut()[i] += eps;
        let mut q = model.clone();
        q.decoder.params_mut()[i] -= eps;
        check((objective(&p) - objective(&q)) / (2.0 * eps), g.decoder[i]);
    }
    for i in 0..model.sindy.xi.len() {
        let mut p = model.clone();
        p.sindy.xi[i] += eps;
        let mut q = model.clone();
        q.sindy.xi[i] -= eps;
        check((objective(&p) - objective(&q)) / (2.0 * eps), g.xi[i]);
    }
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn masked_coefficients_get_no_gradient() {
    let emb = toy_embedding(8, 60, 0.05);
    let mut model = toy_model(&emb, Some(4), 2, vec![6]);
    random_xi(&mut model, 3, 0.5);
    model.sindy.mask[(2, 1)] = false;
    model.sindy.apply_mask();
    let data = TrainData::new(&model, &emb).unwrap();
    let (_, g) = loss_and_gradient(&model, &data, &LossConfig { rollout_steps: 2, sup_weight: 0.0 }).unwrap();
    assert_eq!(g.xi[(2, 1)], 0.0);
}

#[test]
fn consistency_loss_for_exact_linear_model_is_tiny() {
    // y = e^{-t}: with z = h₁ and ż = −z the one-step rollout error is the
    // RK4 local truncation error
    let tau = 0.01;
    let y: Vec<f64> = (0..200).map(|i| (-(i as f64) * tau).exp()).collect();
    let emb = build_hankel(&MeasurementSeries::from_values(y, tau), 4).unwrap();
    let mut spec = ModelSpec::new(None, 1);
    spec.hidden = vec![];
    spec.library.degree = 1;
    let mut model = assemble_model(&emb, &spec).unwrap();
    model.encoder.params_mut().fill(0.0);
    model.encoder.weight_mut(0)[(0, 0)] = 1.0;
    model.sindy.xi[(1, 0)] = -1.0;
    let data = TrainData::new(&model, &emb).unwrap();
    let l = compute_losses(&model, &data, &LossConfig { rollout_steps: 1, sup_weight: 0.0 }).unwrap();
    let local = tau.powi(5) / 120.0;
    assert!(l.cons <= local * local, "{} vs {}", l.cons, local * local);
    assert!(l.z1 == 0.0);
}

#[test]
fn initialize_modes() {
    let emb = toy_embedding(10, 100, 0.05);
    let mut model = toy_model(&emb, Some(4), 2, vec![4]);
    let truth = DMatrix::from_fn(model.sindy.xi.nrows(), 2, |i, j| if (i + j) % 3 == 0 { 1.5 } else { 0.0 });
    assert!(matches!(
        initialize_xi(&mut model, InitMode::KnownEquation, None, 0.0, 0),
        Err(Error::MissingTrueXi(_))
    ));
    assert!(initialize_xi(&mut model, InitMode::Perturbed, None, 1.0, 0).is_err());

    initialize_xi(&mut model, InitMode::KnownEquation, Some(&truth), 0.0, 0).unwrap();
    assert!(model.xi_frozen);
    assert_eq!(model.sindy.xi, truth);
    assert_eq!(model.sindy.active_terms(), truth.iter().filter(|v| **v != 0.0).count());

    initialize_xi(&mut model, InitMode::Perturbed, Some(&truth), 0.0, 5).unwrap();
    assert!(!model.xi_frozen);
    assert_eq!(model.sindy.xi, truth);

    let mut diffs = Vec::new();
    for seed in 0..400 {
        initialize_xi(&mut model, InitMode::Perturbed, Some(&truth), 20.0, seed).unwrap();
        diffs.extend((&model.sindy.xi - &truth).iter().copied());
    }
    let (mean, sd) = crate::dynsys::mean_std(&diffs);
    assert!(mean.abs() < 0.5, "{mean}");
    assert!((sd - 20.0).abs() < 0.5, "{sd}");

    initialize_xi(&mut model, InitMode::Random, None, 0.0, 1).unwrap();
    let (_, sd) = crate::dynsys::mean_std(model.sindy.xi.as_slice());
    assert!(sd > 0.02 && sd < 0.3);
}

#[test]
fn pretraining_zero_epochs_is_identity_and_needs_basis() {
    let emb = toy_embedding(10, 100, 0.05);
    let mut model = toy_model(&emb, Some(4), 2, vec![6]);
    let data = TrainData::new(&model, &emb).unwrap();
    let before = model.clone();
    pretrain_to_svd_modes(&mut model, &data, 0, 1e-3, 16, 0).unwrap();
    assert_eq!(model, before);
    let mut raw = toy_model(&emb, None, 2, vec![6]);
    let raw_data = TrainData::new(&raw, &emb).unwrap();
    assert!(pretrain_to_svd_modes(&mut raw, &raw_data, 1, 1e-3, 16, 0).is_err());
    let mut narrow = toy_model(&emb, Some(2), 3, vec![6]);
    let narrow_data = TrainData::new(&narrow, &emb).unwrap();
    assert!(pretrain_to_svd_modes(&mut narrow, &narrow_data, 1, 1e-3, 16, 0).is_err());
}

#[test]
fn pretraining_learns_modes() {
    let emb = toy_embedding(16, 400, 0.05);
    let mut model = toy_model(&emb, Some(4), 2, vec![16, 16]);
    let data = TrainData::new(&model, &emb).unwrap();
    let rep = pretrain_to_svd_modes(&mut model, &data, 300, 3e-3, 32, 0).unwrap();
    assert!(rep.encoder_nmse < 1e-2, "{rep:?}");
}

fn short_config(mode: InitMode) -> TrainConfig {
    TrainConfig {
        epochs: 6,
        batch_size: 16,
        learning_rate: 1e-3,
        final_learning_rate: Some(5e-4),
        refit_period: 2,
        stlsq_threshold: 0.05,
        relative_threshold: false,
        rollout_steps: Some(3),
        init_mode: mode,
        perturb_sigma: 1.0,
        pretrain_epochs: 2,
        seed: 3,
        grad_clip: 10.0,
        sup_weight: 1.0,
    }
}

#[test]
fn learning_rate_decays_geometrically() {
    let cfg = TrainConfig { epochs: 5, learning_rate: 1e-2, final_learning_rate: Some(1e-4), ..Default::default() };
    assert_eq!(cfg.learning_rate_at(0), 1e-2);
    assert!((cfg.learning_rate_at(2) - 1e-3).abs() < 1e-15);
    assert!((cfg.learning_rate_at(4) - 1e-4).abs() < 1e-16);
    let flat = TrainConfig { final_learning_rate: None, ..cfg };
    assert_eq!(flat.learning_rate_at(3), 1e-2);
    assert!(TrainConfig { final_learning_rate: Some(0.0), ..cfg }.validate(10).is_err());
}

#[test]
fn frozen_xi_is_bitwise_unchanged() {
    let emb = toy_embedding(10, 120, 0.05);
    let mut model = toy_model(&emb, Some(4), 2, vec![6]);
    let data = TrainData::new(&model, &emb).unwrap();
    let truth = DMatrix::from_fn(model.sindy.xi.nrows(), 2, |i, j| 0.3 * (i as f64) - 0.2 * j as f64);
    let report = train(&mut model, &data, &short_config(InitMode::KnownEquation), Some(&truth)).unwrap();
    assert_eq!(report.records.len(), 6);
    assert!(model.sindy.xi.iter().zip(truth.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(report.records.iter().all(|r| r.xi == truth.as_slice()));
}

#[test]
fn masked_entries_stay_zero_between_refits() {
    let emb = toy_embedding(10, 120, 0.05);
    let mut model = toy_model(&emb, Some(4), 2, vec![6]);
    let data = TrainData::new(&model, &emb).unwrap();
    let mut cfg = short_config(InitMode::Random);
    cfg.stlsq_threshold = 0.3;
    cfg.epochs = 8;
    let report = train(&mut model, &data, &cfg, None).unwrap();
    // refits happen at the end of epochs 1, 3, 5, 7
    for pair in report.records.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if (b.epoch + 1) % cfg.refit_period == 0 {
            continue;
        }
        for (x, y) in a.xi.iter().zip(&b.xi) {
            if *x == 0.0 && a.epoch % 2 == 1 {
                assert_eq!(*y, 0.0, "epoch {} revived a masked term", b.epoch);
            }
        }
    }
    assert!(report.records.iter().all(|r| r.active_terms <= model.sindy.xi.len()));
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let emb = toy_embedding(10, 160, 0.05);
    let run = || {
        let mut model = toy_model(&emb, Some(4), 2, vec![8]);
        let data = TrainData::new(&model, &emb).unwrap();
        let mut cfg = short_config(InitMode::Random);
        cfg.epochs = 30;
        cfg.refit_period = 10;
        cfg.learning_rate = 3e-3;
        let report = train(&mut model, &data, &cfg, None).unwrap();
        (model, report)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(r1, r2);
    assert_eq!(r1.to_csv(), r2.to_csv());
    assert_eq!(m1, m2);
    assert!(r1.records.last().unwrap().loss.recon < r1.records[0].loss.recon);
}

#[test]
fn supervised_requires_targets() {
    let emb = toy_embedding(10, 120, 0.05);
    let mut model = toy_model(&emb, Some(4), 2, vec![6]);
    let data = TrainData::new(&model, &emb).unwrap();
    assert!(train(&mut model, &data, &short_config(InitMode::Supervised), None).is_err());
    let mut bad = short_config(InitMode::Random);
    bad.refit_period = 0;
    assert!(train(&mut model, &data, &bad, None).is_err());
    bad.refit_period = 1;
    bad.rollout_steps = Some(10);
    assert!(train(&mut model, &data, &bad, None).is_err());
}

#[test]
fn report_csv_layout() {
    let emb = toy_embedding(10, 120, 0.05);
    let mut model = toy_model(&emb, Some(4), 2, vec![6]);
    let data = TrainData::new(&model, &emb).unwrap();
    let report = train(&mut model, &data, &short_config(InitMode::Random), None).unwrap();
    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "epoch,recon,hdot,zdot,z1,cons,reg,total,active_terms,sup");
    assert_eq!(csv.lines().count(), 7);
    let coeffs = report.coefficients_csv();
    assert!(coeffs.lines().next().unwrap().starts_with("epoch,dz1:1,dz1:z1,dz1:z2"));
}

#[test]
fn checkpoint_round_trip() {
    let emb = toy_embedding(10, 120, 0.05);
    let mut model = toy_model(&emb, Some(4), 2, vec![6]);
    random_xi(&mut model, 2, 0.5);
    model.sindy.mask[(0, 0)] = false;
    model.sindy.apply_mask();
    model.y_shift = 0.25;
    model.y_scale = 3.5;
    let dir = std::env::temp_dir().join(format!("delaymodel-ckpt-{}", std::process::id()));
    model.save(&dir).unwrap();
    let back = DelayModel::load(&dir).unwrap();
    assert_eq!(back, model);
    assert!(DelayModel::load(&dir.join("missing")).is_err());
}

#[test]
fn evaluation_metrics() {
    let emb = toy_embedding(3, 300, 0.05);
    let mut model = toy_model(&emb, None, 3, vec![]);
    model.encoder.weight_mut(0).copy_from(&DMatrix::identity(3, 3));
    model.decoder.weight_mut(0).copy_from(&DMatrix::identity(3, 3));
    let opts = EvalOptions {
        horizon: 20,
        windows: 5,
        long_rollout: 100,
        bound_factor: 10.0,
    };
    let m = evaluate(&model, &emb, &opts).unwrap();
    assert!(m.recon_mse < 1e-28);
    assert_eq!(m.z1_mse, 0.0);
    // Ξ = 0: the rollout is constant at the starting value
    let y = eval::series_of(&emb);
    let last_start = (y.len() - 21).min(emb.q() - 1);
    let mut expect = 0.0;
    for w in 0..5 {
        let s = w * last_start / 4;
        expect += (1..=20).map(|j| (y[s + j] - y[s]).powi(2)).sum::<f64>();
    }
    assert!((m.prediction_error - expect / 100.0).abs() < 1e-12);
    assert!(m.bounded);
    assert_eq!(m.lobe_sign_changes, 0);
    assert_eq!(m.rollout.nrows(), 101);
}

#[test]
fn diagnostics_helpers() {
    assert_eq!(sign_changes(&[1.0, 2.0, 1.0, 2.0]), 3);
    assert_eq!(sign_changes(&[5.0, 5.0]), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    let g: Vec<f64> = (0..200_000).map(|_| rand_distr::Distribution::sample(&normal, &mut rng)).collect();
    assert!((kurtosis(&g) - 3.0).abs() < 0.05);
    let circle = DMatrix::from_fn(101, 2, |i, j| {
        let t = i as f64 / 100.0 * std::f64::consts::TAU;
        if j == 0 { t.cos() } else { t.sin() }
    });
    assert!(orbit_return_error(&circle).unwrap() < 1e-12);
    let spiral = DMatrix::from_fn(101, 2, |i, j| {
        let t = i as f64 / 100.0 * std::f64::consts::TAU;
        let r = 1.0 - 0.2 * i as f64 / 100.0;
        if j == 0 { r * t.cos() } else { r * t.sin() }
    });
    let e = orbit_return_error(&spiral).unwrap();
    assert!((e - 0.1).abs() < 0.01, "{e}");
}

#[test]
fn descaled_model_restores_units() {
    let emb = toy_embedding(6, 60, 0.05);
    let mut model = toy_model(&emb, None, 1, vec![]);
    // ż = −z in standardized units, y = 2 + 3 z
    model.sindy.xi[(1, 0)] = -1.0;
    model.y_shift = 2.0;
    model.y_scale = 3.0;
    let d = model.descaled_sindy().unwrap();
    // ẏ = 3 ż = −3 z = −(y − 2) = 2 − y
    assert!((d.xi[(0, 0)] - 2.0).abs() < 1e-10);
    assert!((d.xi[(1, 0)] + 1.0).abs() < 1e-10);
}
