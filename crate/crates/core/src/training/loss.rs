use crate::autodiff::Exec;
use crate::error::{Error, Result};
use crate::tensor::{Axes, Reduce, Tensor};
use serde::{Deserialize, Serialize};

/// Floor applied to probabilities before the logarithm in cross-entropy.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub dice_smooth: f64,
    pub include_background_in_dice: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { dice_smooth: 1e-5, include_background_in_dice: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dice_smooth > 0.0 && self.dice_smooth.is_finite()) {
            return Err(Error::InvalidConfig(format!("loss.dice_smooth: must be positive, got {}", self.dice_smooth)));
        }
        Ok(())
    }
}

/// Total loss and its two summands.
#[derive(Clone, Debug)]
pub struct LossParts<V> {
    pub total: V,
    pub dice: V,
    pub ce: V,
}

/// `N×C×H×W` one-hot encoding of `N×H×W` integral labels.
pub fn one_hot(labels: &Tensor, num_classes: usize) -> Result<Tensor> {
    let &[n, h, w] = labels.shape() else {
        return Err(Error::shape(format!("labels must be N×H×W, got {:?}", labels.shape())));
    };
    let hw = h * w;
    let mut out = vec![0.0; n * num_classes * hw];
    for (i, &l) in labels.data().iter().enumerate() {
        if !(l >= 0.0 && l.fract() == 0.0 && l < num_classes as f64) {
            return Err(Error::InvalidLabel { label: l, num_classes });
        }
        let (s, p) = (i / hw, i % hw);
        out[(s * num_classes + l as usize) * hw + p] = 1.0;
    }
    Tensor::new(vec![n, num_classes, h, w], out)
}

/// Soft Dice plus cross-entropy on post-softmax probabilities.
///
/// Dice sums over the whole batch per class; CE is the mean over pixels of
/// `−log p` at the true class.
pub fn dice_ce_loss<B: Exec>(b: &mut B, probs: &B::V, labels: &Tensor, cfg: &LossConfig) -> Result<LossParts<B::V>> {
    cfg.validate()?;
    let pshape = b.value(probs).shape().to_vec();
    let &[n, c, h, w] = pshape.as_slice() else {
        return Err(Error::shape(format!("probabilities must be N×C×H×W, got {pshape:?}")));
    };
    if labels.shape() != [n, h, w] {
        return Err(Error::shape(format!("labels {:?} for probabilities {pshape:?}", labels.shape())));
    }
    let y = one_hot(labels, c)?;
    let axes = Axes::Some(vec![0, 2, 3]);
    let ysum = y.reduce(Reduce::Sum, axes.clone())?;
    let yv = b.constant(y);

    let py = b.mul(probs, &yv)?;
    let inter = b.reduce(&py, Reduce::Sum, axes.clone())?;
    let psum = b.reduce(probs, Reduce::Sum, axes)?;
    let num = b.scale(&inter, 2.0);
    let num = b.add_scalar(&num, cfg.dice_smooth);
    let ysum = b.constant(ysum);
    let den = b.add(&psum, &ysum)?;
    let den = b.add_scalar(&den, cfg.dice_smooth);
    let ratio = b.div(&num, &den)?;
    let first = if cfg.include_background_in_dice { 0 } else { 1 };
    let ratio = if first == 0 { ratio } else { b.narrow(&ratio, 0, first, c - first)? };
    let mean_ratio = b.reduce(&ratio, Reduce::Mean, Axes::All)?;
    let neg = b.scale(&mean_ratio, -1.0);
    let dice = b.add_scalar(&neg, 1.0);

    let logp = b.log(probs, LOG_FLOOR);
    let picked = b.mul(&logp, &yv)?;
    let total_ll = b.sum(&picked);
    let ce = b.scale(&total_ll, -1.0 / (n * h * w) as f64);

    let total = b.add(&dice, &ce)?;
    Ok(LossParts { total, dice, ce })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Eager, GradcheckOptions};
    use crate::nn::softmax;
    use crate::tensor::Rng;

    fn labels_2x2(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, 2, 2], v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let labels = labels_2x2(&[0., 1., 1., 2.]);
        let probs = one_hot(&labels, 3).unwrap();
        let l = dice_ce_loss(&mut Eager, &probs, &labels, &LossConfig::default()).unwrap();
        assert_eq!(l.dice.item(), 0.0);
        assert_eq!(l.ce.item(), 0.0);
    }

    #[test]
    fn uniform_binary_is_ln2() {
        let labels = labels_2x2(&[0., 1., 1., 0.]);
        let probs = Tensor::full([1, 2, 2, 2], 0.5);
        let l = dice_ce_loss(&mut Eager, &probs, &labels, &LossConfig::default()).unwrap();
        assert!((l.ce.item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn completely_wrong_prediction() {
        let labels = labels_2x2(&[0., 1., 1., 2.]);
        let wrong = labels_2x2(&[1., 2., 2., 0.]);
        let probs = one_hot(&wrong, 3).unwrap();
        let s = 1e-5;
        let l = dice_ce_loss(&mut Eager, &probs, &labels, &LossConfig::default()).unwrap();
        // class 1: |P|=1, |G|=2; class 2: |P|=2, |G|=1
        let expect = 1.0 - (s / (3.0 + s) + s / (3.0 + s)) / 2.0;
        assert!((l.dice.item() - expect).abs() < 1e-15);
        assert!((l.dice.item() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn background_flag_changes_average() {
        let labels = labels_2x2(&[0., 0., 1., 1.]);
        let probs = Tensor::full([1, 2, 2, 2], 0.5);
        let with = LossConfig { include_background_in_dice: true, ..Default::default() };
        let a = dice_ce_loss(&mut Eager, &probs, &labels, &LossConfig::default()).unwrap().dice.item();
        let b = dice_ce_loss(&mut Eager, &probs, &labels, &with).unwrap().dice.item();
        assert!((a - b).abs() < 1e-12, "symmetric case");
        let labels = labels_2x2(&[0., 0., 0., 1.]);
        let a = dice_ce_loss(&mut Eager, &probs, &labels, &LossConfig::default()).unwrap().dice.item();
        let b = dice_ce_loss(&mut Eager, &probs, &labels, &with).unwrap().dice.item();
        assert!((a - b).abs() > 1e-3);
    }

    #[test]
    fn invalid_labels() {
        let probs = Tensor::full([1, 2, 2, 2], 0.5);
        for bad in [2.0, -1.0, 0.5] {
            let r = dice_ce_loss(&mut Eager, &probs, &labels_2x2(&[0., bad, 1., 0.]), &LossConfig::default());
            assert!(matches!(r, Err(Error::InvalidLabel { .. })), "{bad}");
        }
    }

    #[test]
    fn dice_gradcheck_two_class() {
        let logits = Rng::new(9).normal_tensor([1, 2, 4, 4], 0.0, 0.5).unwrap();
        let labels = Tensor::new(vec![1, 4, 4], (0..16).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect()).unwrap();
        let report = gradcheck(
            |g, p| {
                let probs = g.softmax(p[0], 1)?;
                Ok(dice_ce_loss(g, &probs, &labels, &LossConfig::default())?.dice)
            },
            &[logits],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{:?}", report.worst());
    }

    #[test]
    fn gradcheck_on_micro_inputs() {
        let mut rng = Rng::new(5);
        let logits = rng.normal_tensor([2, 3, 4, 4], 0.0, 0.5).unwrap();
        let labels = Tensor::new(vec![2, 4, 4], (0..32).map(|_| rng.below(3) as f64).collect()).unwrap();
        let report = gradcheck(
            |g, p| {
                let probs = g.softmax(p[0], 1)?;
                Ok(dice_ce_loss(g, &probs, &labels, &LossConfig::default())?.total)
            },
            &[logits],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{:?}", report.worst());
        let p = softmax(&Rng::new(1).normal_tensor([1, 2, 2, 2], 0.0, 1.0).unwrap(), 1).unwrap();
        let l = dice_ce_loss(&mut Eager, &p, &labels_2x2(&[0., 1., 1., 0.]), &LossConfig::default()).unwrap();
        assert!(l.total.item() >= 0.0 && l.total.item().is_finite());
    }
}
