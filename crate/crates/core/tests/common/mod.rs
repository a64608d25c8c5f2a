//! Checks shared by the per-module test targets and the acceptance run.
//!
//! Every suite returns `Err(reason)` on the first violated property so the
//! acceptance target can report it on one line.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use maskdiff::codec::BinaryMask;
use maskdiff::conditioner::TaskMode;
use maskdiff::config::{ExperimentConfig, LossConfig, TrainMode};
use maskdiff::datasets::{pairs_to_samples, procedural_bases, synth_pairs, ForgerySample};
use maskdiff::metrics::{pixel_auc, ConfusionCounts};
use maskdiff::model::LocalizationModel;
use maskdiff::objectives::{combined_loss, dice_loss, weighted_ce};
use maskdiff::schedule::{ddim_step, predict_x0_from_eps, q_sample, NoiseSchedule, SigmaMode, TimestepSubsequence};
use maskdiff::seed::{randn, stream};
use rand::Rng;

pub type Check = Result<(), String>;

/// `alpha_bar` at `t = 1, 500, 1000` of the default linear schedule, frozen
/// from an independent float64 cumulative product.
pub const ALPHA_BAR_1: f64 = 0.9999;
pub const ALPHA_BAR_500: f64 = 0.07858724288177824;
pub const ALPHA_BAR_1000: f64 = 4.035829765375676e-05;

pub const MATH_TOL: f64 = 1e-5;
pub const LOSS_ORACLE_TOL: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-4;
pub const AUC_TOL: f64 = 1e-9;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn default_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02, SigmaMode::Beta).unwrap()
}

fn randn64(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
    randn(shape, &mut stream(seed, &[]), DType::F64, &Device::Cpu).unwrap()
}

pub fn schedule_monotone(s: &NoiseSchedule) -> Check {
    for w in s.betas().windows(2) {
        ensure(w[1] >= w[0], || format!("betas decrease: {} -> {}", w[0], w[1]))?;
    }
    let mut prev = 1.0;
    for t in 1..=s.steps() {
        let ab = s.alpha_bar(t).unwrap();
        ensure(ab < prev && ab > 0.0, || format!("alpha_bar({t}) = {ab} not in (0, {prev})"))?;
        prev = ab;
    }
    Ok(())
}

/// Schedule values, forward noising, DDIM collapse and chaining, determinism.
pub fn math_suite() -> Check {
    let s = default_schedule();
    schedule_monotone(&s)?;
    ensure(s.alpha_bar(0).unwrap() == 1.0, || "alpha_bar(0) != 1".into())?;
    for (t, want) in [(1, ALPHA_BAR_1), (500, ALPHA_BAR_500), (1000, ALPHA_BAR_1000)] {
        let got = s.alpha_bar(t).unwrap();
        ensure((got - want).abs() <= MATH_TOL * want.max(1e-3), || {
            format!("alpha_bar({t}) = {got}, oracle {want}")
        })?;
    }

    let x0 = randn64((2, 16, 8, 8), 1);
    let eps = randn64((2, 16, 8, 8), 2);
    let zeros = x0.zeros_like().unwrap();
    for t in [1, 10, 500, 1000] {
        let ab = s.alpha_bar(t).unwrap();
        let xt = q_sample(&x0, t, &zeros, &s).unwrap();
        let d = max_abs_diff(&xt.values, &x0.affine(ab.sqrt(), 0.0).unwrap());
        ensure(d < MATH_TOL, || format!("zero-noise q_sample at t={t} off by {d}"))?;
        let noisy = q_sample(&x0, t, &eps, &s).unwrap();
        let d = max_abs_diff(&predict_x0_from_eps(&noisy, &eps, &s).unwrap(), &x0);
        ensure(d < MATH_TOL, || format!("x0 recovery at t={t} off by {d}"))?;
    }

    let x_t = q_sample(&x0, 700, &eps, &s).unwrap();
    let guess = randn64((2, 16, 8, 8), 3);
    let out = ddim_step(&x_t, &guess, 0, &s).unwrap();
    ensure(out.timestep == 0 && max_abs_diff(&out.values, &guess) == 0.0, || {
        "DDIM to timestep 0 does not return the clean estimate".into()
    })?;

    for steps in [1, 3, 5, 10, 50] {
        let seq = TimestepSubsequence::uniform(1000, steps).unwrap();
        let mut x = q_sample(&x0, 1000, &eps, &s).unwrap();
        for (tau, prev) in seq.reverse_pairs() {
            ensure(x.timestep == tau, || format!("chain at {} expected {tau}", x.timestep))?;
            x = ddim_step(&x, &x0, prev, &s).unwrap();
            if prev > 0 {
                let want = q_sample(&x0, prev, &eps, &s).unwrap();
                let d = max_abs_diff(&x.values, &want.values);
                ensure(d < MATH_TOL, || format!("S={steps}: state at {prev} off the forward marginal by {d}"))?;
            }
        }
        let d = max_abs_diff(&x.values, &x0);
        ensure(d < MATH_TOL, || format!("S={steps}: perfect-oracle chain ends {d} from x0"))?;
    }

    let run = || {
        let mut x = q_sample(&x0, 1000, &eps, &s).unwrap();
        for (_, prev) in TimestepSubsequence::uniform(1000, 7).unwrap().reverse_pairs() {
            let est = x.values.affine(0.5, 0.1).unwrap();
            x = ddim_step(&x, &est, prev, &s).unwrap();
        }
        x.values.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    };
    ensure(run() == run(), || "DDIM chain is not deterministic".into())
}

fn t64(v: &[f64], shape: (usize, usize)) -> Tensor {
    Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
}

/// Random probabilities away from the clip range and a random binary target.
pub fn random_pred_gt(rng: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let p = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let g = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    (p, g)
}

/// Largest per-element relative error between the autograd gradient of
/// `loss` and central differences, on an 8x8 f64 input.
pub fn fd_max_rel_error(loss: impl Fn(&Tensor, &Tensor) -> Tensor, seed: u64) -> f64 {
    let mut rng = stream(seed, &[]);
    let (p, g) = random_pred_gt(&mut rng, 64);
    let gt = t64(&g, (1, 64)).reshape((1, 8, 8)).unwrap();
    let var = Var::from_tensor(&t64(&p, (1, 64)).reshape((1, 8, 8)).unwrap()).unwrap();
    let grads = loss(var.as_tensor(), &gt).backward().unwrap();
    let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let mut up = p.clone();
        let mut dn = p.clone();
        up[i] += h;
        dn[i] -= h;
        let f = |v: &[f64]| scalar(&loss(&t64(v, (1, 64)).reshape((1, 8, 8)).unwrap(), &gt));
        let fd = (f(&up) - f(&dn)) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Dice range and endpoints, weighted cross-entropy hand values, the
/// combined-loss endpoints and finite-difference gradients.
pub fn loss_suite() -> Check {
    let mut rng = stream(11, &[]);
    for _ in 0..200 {
        let n = rng.random_range(1..64);
        let (p, g) = random_pred_gt(&mut rng, n);
        let d = scalar(&dice_loss(&t64(&p, (1, n)), &t64(&g, (1, n)), 1.0).unwrap());
        ensure((0.0..=1.0).contains(&d), || format!("dice {d} outside [0, 1]"))?;
    }
    for smooth in [0.0, 1.0] {
        let x = t64(&[0.0, 1.0, 1.0, 0.0, 1.0], (1, 5));
        let d = scalar(&dice_loss(&x, &x, smooth).unwrap());
        ensure(d.abs() < LOSS_ORACLE_TOL, || format!("dice(x, x) = {d} at smooth {smooth}"))?;
    }
    let a = t64(&[1.0, 1.0, 0.0, 0.0], (1, 4));
    let b = t64(&[0.0, 0.0, 1.0, 1.0], (1, 4));
    let d = scalar(&dice_loss(&a, &b, 0.0).unwrap());
    ensure((d - 1.0).abs() < LOSS_ORACLE_TOL, || format!("dice of disjoint masks = {d}"))?;

    let half = t64(&[0.5], (1, 1));
    let pos = scalar(&weighted_ce(&half, &t64(&[1.0], (1, 1)), 0.5, 2.5, 1e-7).unwrap());
    let neg = scalar(&weighted_ce(&half, &t64(&[0.0], (1, 1)), 0.5, 2.5, 1e-7).unwrap());
    ensure((pos - 0.3466).abs() < LOSS_ORACLE_TOL, || format!("wce positive pixel = {pos}"))?;
    ensure((neg - 1.7329).abs() < LOSS_ORACLE_TOL, || format!("wce negative pixel = {neg}"))?;

    let (p, g) = random_pred_gt(&mut rng, 64);
    let (p, g) = (t64(&p, (1, 64)), t64(&g, (1, 64)));
    let base = LossConfig::default();
    let wce = scalar(&weighted_ce(&p, &g, base.mu, base.eta, base.clip_eps).unwrap());
    let dice = scalar(&dice_loss(&p, &g, base.smooth).unwrap());
    let at = |lambda: f64| scalar(&combined_loss(&p, &g, &LossConfig { lambda, ..base }).unwrap());
    ensure((at(1.0) - wce).abs() < 1e-12, || "combined loss at lambda=1 differs from wce".into())?;
    ensure((at(0.0) - dice).abs() < 1e-12, || "combined loss at lambda=0 differs from dice".into())?;

    for seed in 0..3 {
        let e = fd_max_rel_error(|p, g| combined_loss(p, g, &base).unwrap(), seed);
        ensure(e < FD_REL_TOL, || format!("combined-loss gradient relative error {e:e}"))?;
        let e = fd_max_rel_error(|p, g| dice_loss(p, g, base.smooth).unwrap(), seed + 10);
        ensure(e < FD_REL_TOL, || format!("dice gradient relative error {e:e}"))?;
        let e = fd_max_rel_error(|p, g| weighted_ce(p, g, base.mu, base.eta, base.clip_eps).unwrap(), seed + 20);
        ensure(e < FD_REL_TOL, || format!("wce gradient relative error {e:e}"))?;
    }
    Ok(())
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.random_bool(p))
}

/// `P(s+ > s-) + 0.5 P(s+ = s-)` over every positive/negative pair.
pub fn pairwise_auc(scores: &[f32], gt: &BinaryMask) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if gt.data()[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if gt.data()[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// F1/IOU identity on 1000 random masks and AUC against the pairwise oracle.
pub fn metric_suite() -> Check {
    let mut rng = stream(21, &[]);
    for i in 0..1000 {
        let h = rng.random_range(1..33);
        let w = rng.random_range(1..33);
        let (pg, pp) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let gt = random_mask(&mut rng, h, w, pg);
        let pred = random_mask(&mut rng, h, w, pp);
        let c = ConfusionCounts::from_masks(&pred, &gt).unwrap();
        let (f1, iou) = (c.f1(), c.iou());
        ensure((f1 - 2.0 * iou / (1.0 + iou)).abs() < 1e-12, || {
            format!("mask {i}: F1 {f1} vs 2 IOU/(1 + IOU) with IOU {iou}")
        })?;
    }
    for i in 0..60 {
        let h = rng.random_range(2..33);
        let w = rng.random_range(2..33);
        let mut gt = random_mask(&mut rng, h, w, 0.3);
        if gt.count_ones() == 0 || gt.count_ones() == h * w {
            gt = BinaryMask::from_fn(h, w, |y, x| (y + x) % 2 == 0);
        }
        // coarse levels on half the grids so ties are exercised
        let levels = if i % 2 == 0 { 5.0 } else { 1e6 };
        let scores: Vec<f32> = (0..h * w)
            .map(|_| (rng.random_range(0.0..1.0f64) * levels).floor() as f32 / levels as f32)
            .collect();
        let got = pixel_auc(&scores, &gt).unwrap();
        let want = pairwise_auc(&scores, &gt);
        ensure((got - want).abs() < AUC_TOL, || format!("grid {i} ({h}x{w}): AUC {got} vs oracle {want}"))?;
    }
    Ok(())
}

/// Small tiny-profile config used by the fast tests.
pub fn small_config(mode: TrainMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.image_size = 32;
    cfg.train.mode = mode;
    cfg.train.batch_size = 2;
    cfg.train.jpeg_aug = false;
    cfg.train.learning_rate = 1e-3;
    cfg.sampler.batch_size = 4;
    cfg
}

/// The same model is enumerated for both tasks: names and count match, and a
/// CIML forward touches no parameter an IML forward lacks.
pub fn unified_params() -> Check {
    let cfg = ExperimentConfig::default();
    let a = LocalizationModel::new(&cfg.model, cfg.schedule.steps, DType::F32, &Device::Cpu).unwrap();
    let b = LocalizationModel::new(&cfg.model, cfg.schedule.steps, DType::F32, &Device::Cpu).unwrap();
    let samples = synthetic_samples(2, cfg.model.image_size, 4, 5);
    let refs: Vec<&ForgerySample> = samples.iter().collect();
    let before = a.named_parameters();
    let ci = maskdiff::sampler::batch_conditions(&a, &refs, TaskMode::Ciml).unwrap();
    let im = maskdiff::sampler::batch_conditions(&b, &refs, TaskMode::Iml).unwrap();
    let ok_ci = maskdiff::sampler::zero_noise_logits(&a, &ci).is_ok();
    let ok_im = maskdiff::sampler::zero_noise_logits(&b, &im).is_ok();
    ensure(ok_ci && ok_im, || "forward pass failed".into())?;
    let (pa, pb) = (a.named_parameters(), b.named_parameters());
    ensure(before == pa, || "a CIML forward created parameters".into())?;
    ensure(pa == pb, || "IML and CIML parameter lists differ".into())?;
    ensure(a.parameter_count() == b.parameter_count(), || "parameter counts differ".into())
}

/// Synthetic splice samples with a dedicated pool of base images.
pub fn synthetic_samples(n: usize, size: usize, bases: usize, seed: u64) -> Vec<ForgerySample> {
    let mut rng = stream(seed, &[]);
    let bases = procedural_bases(bases, size, &mut rng);
    pairs_to_samples(&synth_pairs(&bases, &mut rng, n).unwrap()).unwrap()
}

/// Train and test sets drawn from disjoint base pools.
pub fn synthetic_split(n_train: usize, n_test: usize, size: usize, seed: u64) -> (Vec<ForgerySample>, Vec<ForgerySample>) {
    let mut rng = stream(seed, &[]);
    let train_bases = procedural_bases(40, size, &mut rng);
    let test_bases = procedural_bases(20, size, &mut rng);
    let train = pairs_to_samples(&synth_pairs(&train_bases, &mut rng, n_train).unwrap()).unwrap();
    let test = pairs_to_samples(&synth_pairs(&test_bases, &mut rng, n_test).unwrap()).unwrap();
    (train, test)
}
