//! Training objective: penalty-reduced focal loss on the heatmap, masked L1
//! on the size and offset maps, and their weighted sum. Each loss returns its
//! gradient with respect to the prediction it was given.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Predictions are clamped to `[EPS, 1 - EPS]` before taking logarithms.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Focusing exponent on the prediction.
    pub alpha: f64,
    /// Exponent of the `(1 - Y)` penalty reduction near object centers.
    pub beta: f64,
    /// Ground-truth threshold for positive cells.
    pub phi: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 4.0,
            phi: 1.0,
            lambda1: 0.1,
            lambda2: 1.0,
        }
    }
}

/// A scalar loss and its gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Tensor,
    /// Set when the normalizer `N` was zero; loss and gradient are then zero.
    pub empty: bool,
}

impl LossOutput {
    fn empty(shape: &[usize]) -> Self {
        Self {
            loss: 0.0,
            grad: Tensor::zeros(shape),
            empty: true,
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Focal loss over a predicted heatmap `pred` in (0, 1) against the
/// Gaussian-splatted ground truth `gt`, normalized by the object count.
///
/// Cells with `gt >= phi` contribute `(1-p)^alpha * ln p`; all others
/// contribute `(1-y)^beta * p^alpha * ln(1-p)`. The sum is negated and
/// divided by `num_objects`. The gradient is exact wherever `pred` lies
/// inside the clamp range.
pub fn focal_loss(pred: &Tensor, gt: &Tensor, cfg: &LossConfig, num_objects: usize) -> Result<LossOutput> {
    same_shape("focal_loss", pred, gt)?;
    if num_objects == 0 {
        return Ok(LossOutput::empty(pred.shape()));
    }
    let n = num_objects as f64;
    let (a, b) = (cfg.alpha, cfg.beta);
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.data().iter().zip(gt.data()) {
        let p = p.clamp(EPS, 1.0 - EPS);
        let (term, dterm) = if y >= cfg.phi {
            let q = 1.0 - p;
            let t = q.powf(a) * p.ln();
            let dt = -a * q.powf(a - 1.0) * p.ln() + q.powf(a) / p;
            (t, dt)
        } else {
            let weight = (1.0 - y).powf(b);
            let l = (1.0 - p).ln();
            let t = weight * p.powf(a) * l;
            let dt = weight * (a * p.powf(a - 1.0) * l - p.powf(a) / (1.0 - p));
            (t, dt)
        };
        total += term;
        grad.push(-dterm / n);
    }
    Ok(LossOutput {
        loss: -total / n,
        grad: Tensor::new(pred.shape().to_vec(), grad)?,
        empty: false,
    })
}

/// L1 loss summed over both channels of `[2,h,w]` maps at cells where the
/// `[h,w]` mask is set, divided by `num_objects`. The subgradient at
/// `pred == gt` is zero.
pub fn l1_loss_masked(pred: &Tensor, gt: &Tensor, mask: &Tensor, num_objects: usize) -> Result<LossOutput> {
    same_shape("l1_loss_masked", pred, gt)?;
    let (c, h, w) = pred.dims3()?;
    if mask.shape() != [h, w] {
        return Err(Error::shape(
            "l1_loss_masked",
            format!("mask {:?} does not match prediction {:?}", mask.shape(), pred.shape()),
        ));
    }
    if num_objects == 0 {
        return Ok(LossOutput::empty(pred.shape()));
    }
    let n = num_objects as f64;
    let plane = h * w;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for ch in 0..c {
        for (i, &m) in mask.data().iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let k = ch * plane + i;
            let diff = gt.data()[k] - pred.data()[k];
            total += diff.abs();
            grad.data_mut()[k] = if diff > 0.0 {
                -1.0 / n
            } else if diff < 0.0 {
                1.0 / n
            } else {
                0.0
            };
        }
    }
    Ok(LossOutput {
        loss: total / n,
        grad,
        empty: false,
    })
}

/// `Lc + lambda1 * Lwh + lambda2 * Loff`.
pub fn total_loss(lc: f64, lwh: f64, loff: f64, cfg: &LossConfig) -> f64 {
    lc + cfg.lambda1 * lwh + cfg.lambda2 * loff
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn focal_limits() {
        let cfg = LossConfig::default();
        let gt = Tensor::filled(&[1, 1, 1], 1.0);
        let out = focal_loss(&Tensor::filled(&[1, 1, 1], 1.0 - EPS), &gt, &cfg, 1).unwrap();
        assert!(out.loss.abs() < 1e-12);

        let neg = Tensor::zeros(&[1, 1, 1]);
        let out = focal_loss(&Tensor::filled(&[1, 1, 1], EPS), &neg, &cfg, 1).unwrap();
        assert!(out.loss.abs() < 1e-12);
    }

    #[test]
    fn focal_empty_image() {
        let p = Tensor::filled(&[1, 2, 2], 0.3);
        let out = focal_loss(&p, &Tensor::zeros(&[1, 2, 2]), &LossConfig::default(), 0).unwrap();
        assert!(out.empty);
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn focal_saturated_predictions_stay_finite() {
        let cfg = LossConfig::default();
        let p = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let g = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let out = focal_loss(&p, &g, &cfg, 1).unwrap();
        assert!(out.loss.is_finite() && out.grad.all_finite());
    }

    #[test]
    fn focal_grad_signs_and_penalty_reduction() {
        let cfg = LossConfig::default();
        let mut rng = SplitMix64::new(5);
        for _ in 0..200 {
            let p = rng.uniform(0.01, 0.99);
            let pos = focal_loss(&Tensor::filled(&[1], p), &Tensor::filled(&[1], 1.0), &cfg, 1).unwrap();
            assert!(pos.loss >= 0.0 && pos.grad.data()[0] < 0.0);
            let y1 = rng.uniform(0.0, 0.99);
            let y2 = rng.uniform(y1, 0.999);
            let n1 = focal_loss(&Tensor::filled(&[1], p), &Tensor::filled(&[1], y1), &cfg, 1).unwrap();
            let n2 = focal_loss(&Tensor::filled(&[1], p), &Tensor::filled(&[1], y2), &cfg, 1).unwrap();
            assert!(n1.loss >= 0.0 && n1.grad.data()[0] > 0.0);
            assert!(n2.loss <= n1.loss);
        }
    }

    #[test]
    fn l1_cases() {
        let pred = Tensor::filled(&[2, 3, 3], 0.5);
        let mut mask = Tensor::zeros(&[3, 3]);
        mask.set(&[1, 2], 1.0);
        let out = l1_loss_masked(&pred, &pred, &mask, 1).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.data().iter().all(|&g| g == 0.0));

        let zero = Tensor::zeros(&[2, 3, 3]);
        let mut gt = Tensor::zeros(&[2, 3, 3]);
        gt.set(&[0, 1, 2], 3.0);
        gt.set(&[1, 1, 2], 4.0);
        gt.set(&[0, 0, 0], 100.0); // outside the mask
        let out = l1_loss_masked(&zero, &gt, &mask, 1).unwrap();
        assert_eq!(out.loss, 7.0);
        assert_eq!(out.grad.get(&[0, 1, 2]), -1.0);
        assert_eq!(out.grad.get(&[0, 0, 0]), 0.0);

        assert!(l1_loss_masked(&zero, &gt, &Tensor::zeros(&[2, 3]), 1).is_err());
        assert!(l1_loss_masked(&zero, &gt, &mask, 0).unwrap().empty);
    }

    #[test]
    fn total_cases() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(1.0, 10.0, 0.5, &cfg), 2.5);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &cfg), 0.0);
        let flat = LossConfig { lambda1: 0.0, lambda2: 0.0, ..cfg };
        assert_eq!(total_loss(1.25, 7.0, 3.0, &flat), 1.25);
    }
}
