mod common;

use candle_core::{Device, Tensor};
use maskdiff::config::LossConfig;
use maskdiff::objectives::{combined_loss, dice_loss, weighted_ce};
use proptest::prelude::*;

#[test]
fn loss_suite_passes() {
    common::loss_suite().unwrap();
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = Tensor::zeros((1, 4), candle_core::DType::F64, &Device::Cpu).unwrap();
    let b = Tensor::zeros((1, 5), candle_core::DType::F64, &Device::Cpu).unwrap();
    assert!(dice_loss(&a, &b, 1.0).is_err());
    assert!(weighted_ce(&a, &b, 0.5, 2.5, 1e-7).is_err());
    assert!(combined_loss(&a, &b, &LossConfig::default()).is_err());
}

#[test]
fn clipping_keeps_confident_mistakes_finite() {
    let p = Tensor::new(&[[0.0f64, 1.0]], &Device::Cpu).unwrap();
    let g = Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap();
    let v = common::scalar(&weighted_ce(&p, &g, 0.5, 2.5, 1e-7).unwrap());
    assert!(v.is_finite() && v > 10.0);
}

proptest! {
    #[test]
    fn dice_stays_in_unit_interval(
        pairs in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200),
        smooth in 0.0f64..2.0,
    ) {
        let n = pairs.len();
        let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
        let g: Vec<f64> = pairs.iter().map(|x| x.1 as u8 as f64).collect();
        let d = common::scalar(&dice_loss(
            &Tensor::from_slice(&p, (1, n), &Device::Cpu).unwrap(),
            &Tensor::from_slice(&g, (1, n), &Device::Cpu).unwrap(),
            smooth.max(1e-9),
        ).unwrap());
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&d), "dice {}", d);
    }
}
