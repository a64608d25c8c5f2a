//! Training objectives on per-pixel manipulated-class probabilities.
//!
//! All functions take `pred` and `gt` tensors of identical shape whose first
//! dimension is the batch. Dice is computed per sample and averaged; the
//! weighted cross-entropy is averaged over every pixel.

use candle_core::Tensor;

use crate::config::LossConfig;
use crate::error::{Error, Result};

fn same_shape(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch {
            expected: gt.dims().to_vec(),
            got: pred.dims().to_vec(),
        });
    }
    Ok(())
}

/// Soft dice loss `1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s)`, batch mean.
pub fn dice_loss(pred: &Tensor, gt: &Tensor, smooth: f64) -> Result<Tensor> {
    same_shape(pred, gt)?;
    let p = pred.flatten_from(1)?;
    let g = gt.flatten_from(1)?;
    let inter = (&p * &g)?.sum(1)?;
    let denom = (p.sum(1)? + g.sum(1)?)?;
    let ratio = (inter.affine(2.0, smooth)? / denom.affine(1.0, smooth)?)?;
    Ok(ratio.affine(-1.0, 1.0)?.mean_all()?)
}

/// `mean(-(mu g log p + eta (1 - g) log(1 - p)))` with `p` clamped to
/// `[clip, 1 - clip]`.
pub fn weighted_ce(pred: &Tensor, gt: &Tensor, mu: f64, eta: f64, clip: f64) -> Result<Tensor> {
    same_shape(pred, gt)?;
    let p = pred.clamp(clip, 1.0 - clip)?;
    let pos = (gt * p.log()?)?.affine(mu, 0.0)?;
    let neg = (gt.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?.affine(eta, 0.0)?;
    Ok((pos + neg)?.neg()?.mean_all()?)
}

/// `lambda * weighted_ce + (1 - lambda) * dice`.
pub fn combined_loss(pred: &Tensor, gt: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let wce = weighted_ce(pred, gt, cfg.mu, cfg.eta, cfg.clip_eps)?;
    let dice = dice_loss(pred, gt, cfg.smooth)?;
    Ok((wce.affine(cfg.lambda, 0.0)? + dice.affine(1.0 - cfg.lambda, 0.0)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, (1, v.len()), &Device::Cpu).unwrap()
    }

    fn scalar(x: Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn dice_hand_values() {
        let gt = t(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(scalar(dice_loss(&gt, &gt, 0.0).unwrap()), 0.0);
        let disjoint = t(&[0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(scalar(dice_loss(&disjoint, &gt, 0.0).unwrap()), 1.0);
        let half = t(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let d = scalar(dice_loss(&half, &gt, 0.0).unwrap());
        assert!((d - 1.0 / 3.0).abs() < 1e-12);
        // empty ground truth, empty prediction: smoothing keeps it defined
        let z = t(&[0.0; 6]);
        assert_eq!(scalar(dice_loss(&z, &z, 1.0).unwrap()), 0.0);
    }

    #[test]
    fn wce_hand_values() {
        let p = t(&[0.5]);
        let pos = scalar(weighted_ce(&p, &t(&[1.0]), 0.5, 2.5, 1e-7).unwrap());
        assert!((pos - 0.5 * 2f64.ln()).abs() < 1e-12);
        assert!((pos - 0.3466).abs() < 1e-4);
        let neg = scalar(weighted_ce(&p, &t(&[0.0]), 0.5, 2.5, 1e-7).unwrap());
        assert!((neg - 1.7329).abs() < 1e-4);
        let gt = t(&[1.0, 0.0, 1.0]);
        assert!(scalar(weighted_ce(&gt, &gt, 0.5, 2.5, 1e-7).unwrap()) < 1e-6);
    }

    #[test]
    fn combined_endpoints() {
        let p = t(&[0.2, 0.7, 0.9, 0.4]);
        let g = t(&[0.0, 1.0, 1.0, 0.0]);
        let mut cfg = LossConfig::default();
        cfg.lambda = 0.0;
        assert_eq!(
            scalar(combined_loss(&p, &g, &cfg).unwrap()),
            scalar(dice_loss(&p, &g, cfg.smooth).unwrap())
        );
        cfg.lambda = 1.0;
        assert_eq!(
            scalar(combined_loss(&p, &g, &cfg).unwrap()),
            scalar(weighted_ce(&p, &g, cfg.mu, cfg.eta, cfg.clip_eps).unwrap())
        );
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(
            dice_loss(&t(&[0.1, 0.2]), &t(&[1.0]), 1.0),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(weighted_ce(&t(&[0.1, 0.2]), &t(&[1.0]), 0.5, 2.5, 1e-7).is_err());
    }
}
