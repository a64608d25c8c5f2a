mod common;

use candle_core::{DType, Device, Tensor};
use maskdiff::schedule::{ddim_step, q_sample, NoiseSchedule, SigmaMode, TimestepSubsequence};
use maskdiff::seed::stream;
use maskdiff::trainer::sample_timesteps;
use proptest::prelude::*;

#[test]
fn math_suite_passes() {
    common::math_suite().unwrap();
}

#[test]
fn alpha_bar_matches_log_space_product() {
    let s = common::default_schedule();
    let mut log_sum = 0.0f64;
    for t in 1..=1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
        log_sum += (1.0 - beta).ln();
        let ab = s.alpha_bar(t).unwrap();
        assert!((ab - log_sum.exp()).abs() <= 1e-12 * ab.max(1e-6), "t={t}");
    }
}

#[test]
fn subsequence_is_floor_spaced_and_ends_at_t() {
    assert_eq!(TimestepSubsequence::uniform(1000, 3).unwrap().taus(), &[333, 666, 1000]);
    assert_eq!(TimestepSubsequence::uniform(1000, 1).unwrap().taus(), &[1000]);
    let pairs: Vec<_> = TimestepSubsequence::uniform(10, 2).unwrap().reverse_pairs().collect();
    assert_eq!(pairs, vec![(10, 5), (5, 0)]);
    assert!(TimestepSubsequence::uniform(10, 0).is_err());
    assert!(TimestepSubsequence::uniform(10, 11).is_err());
}

#[test]
fn ddim_rejects_non_decreasing_targets() {
    let s = common::default_schedule();
    let x = Tensor::zeros((1, 2, 2, 2), DType::F64, &Device::Cpu).unwrap();
    let xt = q_sample(&x, 10, &x, &s).unwrap();
    assert!(ddim_step(&xt, &x, 10, &s).is_err());
    assert!(ddim_step(&xt, &x, 11, &s).is_err());
    assert!(q_sample(&x, 0, &x, &s).is_err());
    assert!(q_sample(&x, 1001, &x, &s).is_err());
}

/// Pearson chi-square over ten equal bins of `1..=1000`; 9 degrees of freedom,
/// critical value 27.88 at p = 0.001.
#[test]
fn training_timesteps_are_uniform() {
    let mut rng = stream(3, &[]);
    let draws = sample_timesteps(&mut rng, 1000, 50_000);
    assert!(draws.iter().all(|&t| (1..=1000).contains(&t)));
    let mut bins = [0f64; 10];
    for t in &draws {
        bins[(t - 1) / 100] += 1.0;
    }
    let expected = draws.len() as f64 / 10.0;
    let chi2: f64 = bins.iter().map(|o| (o - expected).powi(2) / expected).sum();
    assert!(chi2 < 27.88, "chi-square {chi2}");
    assert!(draws.contains(&1) && draws.contains(&1000));
}

proptest! {
    #[test]
    fn linear_schedules_are_monotone(
        steps in 1usize..2000,
        start in 1e-5f64..0.01,
        extra in 0.0f64..0.5,
        scaled in any::<bool>(),
    ) {
        let mode = if scaled { SigmaMode::Scaled } else { SigmaMode::Beta };
        let s = NoiseSchedule::linear(steps, start, start + extra, mode).unwrap();
        prop_assert!(common::schedule_monotone(&s).is_ok());
        prop_assert!(s.sigmas().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn perfect_oracle_chain_recovers_x0(steps in 1usize..40, seed in 0u64..1000) {
        let s = common::default_schedule();
        let mut rng = stream(seed, &[]);
        let x0 = maskdiff::seed::randn((1, 4, 3, 3), &mut rng, DType::F64, &Device::Cpu).unwrap();
        let eps = maskdiff::seed::randn((1, 4, 3, 3), &mut rng, DType::F64, &Device::Cpu).unwrap();
        let mut x = q_sample(&x0, 1000, &eps, &s).unwrap();
        for (_, prev) in TimestepSubsequence::uniform(1000, steps).unwrap().reverse_pairs() {
            x = ddim_step(&x, &x0, prev, &s).unwrap();
        }
        prop_assert!(common::max_abs_diff(&x.values, &x0) < common::MATH_TOL);
    }
}
