//! Composite segmentation objective: BCE with logits, soft Dice and total
//! variation of the predicted probability map, summed over the refined
//! output and averaged over the multi-scale side outputs.

use serde::{Deserialize, Serialize};

use crate::decoder::SideOutputs;
use crate::error::{Error, Result};
use crate::resample::resize_nearest;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Pure loss kernels on plain tensors, shared by the tape ops and by
/// evaluation code.
pub mod kernels {
    use super::*;

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    fn check_pair(op: &'static str, logits: &Tensor, targets: &Tensor) -> Result<()> {
        if logits.shape() != targets.shape() {
            return Err(Error::shape(
                op,
                format!("logits {:?} vs targets {:?}", logits.shape(), targets.shape()),
            ));
        }
        if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::Invalid(format!("{op}: targets must be 0 or 1")));
        }
        Ok(())
    }

    /// Mean of `max(x,0) − x·y + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<f64> {
        check_pair("bce_with_logits", logits, targets)?;
        let total: f64 = logits
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        Ok(total / logits.len() as f64)
    }

    pub fn bce_with_logits_grad(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
        check_pair("bce_with_logits", logits, targets)?;
        let n = logits.len() as f64;
        logits.zip_map(targets, |x, y| (sigmoid(x) - y) / n)
    }

    /// `1 − (2Σpy + ε)/(Σp + Σy + ε)` on probabilities.
    pub fn soft_dice(probs: &Tensor, targets: &Tensor, eps: f64) -> Result<f64> {
        check_pair("soft_dice_loss", probs, targets)?;
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Invalid("soft_dice_loss: epsilon must be > 0".into()));
        }
        let (inter, denom) = dice_sums(probs, targets);
        Ok(1.0 - (2.0 * inter + eps) / (denom + eps))
    }

    fn dice_sums(probs: &Tensor, targets: &Tensor) -> (f64, f64) {
        let mut inter = 0.0;
        let mut denom = 0.0;
        for (&p, &y) in probs.data().iter().zip(targets.data()) {
            inter += p * y;
            denom += p + y;
        }
        (inter, denom)
    }

    /// Gradient of the soft Dice loss with respect to the logits.
    pub fn soft_dice_grad(logits: &Tensor, targets: &Tensor, eps: f64) -> Result<Tensor> {
        let probs = logits.map(sigmoid);
        check_pair("soft_dice_loss", &probs, targets)?;
        let (inter, denom) = dice_sums(&probs, targets);
        let num = 2.0 * inter + eps;
        let den = denom + eps;
        probs.zip_map(targets, |p, y| {
            let d_loss_d_p = -(2.0 * y * den - num) / (den * den);
            d_loss_d_p * p * (1.0 - p)
        })
    }

    /// `(1/N)·Σ(|p[h,w+1] − p[h,w]| + |p[h+1,w] − p[h,w]|)` with forward
    /// differences, `N` the number of elements of the probability map.
    pub fn total_variation(probs: &Tensor) -> Result<f64> {
        let (b, c, h, w) = probs.dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::shape(
                "tv_loss",
                format!("spatial extent {h}x{w} is smaller than 2"),
            ));
        }
        let mut total = 0.0;
        for plane in probs.data().chunks(h * w) {
            for r in 0..h {
                for col in 0..w {
                    let v = plane[r * w + col];
                    if col + 1 < w {
                        total += (plane[r * w + col + 1] - v).abs();
                    }
                    if r + 1 < h {
                        total += (plane[(r + 1) * w + col] - v).abs();
                    }
                }
            }
        }
        Ok(total / (b * c * h * w) as f64)
    }

    fn sign(x: f64) -> f64 {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    }

    /// Gradient of [`total_variation`]`(σ(logits))` with respect to the
    /// logits; ties contribute the zero subgradient.
    pub fn total_variation_grad(logits: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = logits.dims4()?;
        let probs = logits.map(sigmoid);
        total_variation(&probs)?;
        let n = (b * c * h * w) as f64;
        let mut dp = Tensor::zeros(logits.shape());
        for (plane, grad) in probs
            .data()
            .chunks(h * w)
            .zip(dp.data_mut().chunks_mut(h * w))
        {
            for r in 0..h {
                for col in 0..w {
                    let i = r * w + col;
                    if col + 1 < w {
                        let s = sign(plane[i + 1] - plane[i]) / n;
                        grad[i + 1] += s;
                        grad[i] -= s;
                    }
                    if r + 1 < h {
                        let s = sign(plane[i + w] - plane[i]) / n;
                        grad[i + w] += s;
                        grad[i] -= s;
                    }
                }
            }
        }
        dp.zip_map(&probs, |g, p| g * p * (1.0 - p))
    }
}

/// Weights of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_bce: f64,
    pub lambda_tv: f64,
    pub lambda_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_bce: 1.0,
            lambda_tv: 1e-3,
            lambda_dice: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_bce, self.lambda_tv, self.lambda_dice];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got {self:?}"
            )));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Dice smoothing added to numerator and denominator.
    pub epsilon: f64,
    /// Apply the TV term to every side output, not only the refined output.
    pub tv_all_scales: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            epsilon: 1e-6,
            tv_all_scales: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "dice epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// The scalar loss on the tape plus its weighted components.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub bce: f64,
    pub tv: f64,
    pub dice: f64,
}

struct ScaleLoss {
    value: Var,
    bce: f64,
    tv: f64,
    dice: f64,
}

fn scale_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &Tensor,
    cfg: &LossConfig,
    with_tv: bool,
) -> Result<ScaleLoss> {
    let w = cfg.weights;
    let mut terms = Vec::with_capacity(3);
    let mut parts = [0.0; 3];
    if w.lambda_bce > 0.0 {
        let v = tape.bce_with_logits(logits, targets)?;
        parts[0] = w.lambda_bce * tape.value(v).item();
        terms.push(tape.scale(v, w.lambda_bce)?);
    }
    if w.lambda_tv > 0.0 && with_tv {
        let v = tape.tv_loss(logits)?;
        parts[1] = w.lambda_tv * tape.value(v).item();
        terms.push(tape.scale(v, w.lambda_tv)?);
    }
    if w.lambda_dice > 0.0 {
        let v = tape.soft_dice_loss(logits, targets, cfg.epsilon)?;
        parts[2] = w.lambda_dice * tape.value(v).item();
        terms.push(tape.scale(v, w.lambda_dice)?);
    }
    let mut value = match terms.first() {
        Some(&v) => v,
        // Only reachable when λ_tv is the sole weight and TV is restricted
        // to the refined output.
        None => tape.constant(Tensor::scalar(0.0)),
    };
    for &t in &terms[1.min(terms.len())..] {
        value = tape.add(value, t)?;
    }
    Ok(ScaleLoss {
        value,
        bce: parts[0],
        tv: parts[1],
        dice: parts[2],
    })
}

/// Downsamples a full-resolution binary mask to `h × w` by nearest
/// neighbour, keeping it binary.
pub fn target_at(targets: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, th, tw) = targets.dims4()?;
    if (th, tw) == (h, w) {
        return Ok(targets.clone());
    }
    resize_nearest(targets, h, w)
}

/// `ℓ(R) + mean_i ℓ(S_i)` with `ℓ = λ_bce·BCE + λ_tv·TV + λ_dice·Dice`
/// against per-scale nearest-neighbour targets.
pub fn total_loss(
    tape: &mut Tape,
    outputs: &SideOutputs,
    targets: &Tensor,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    if outputs.sides.is_empty() {
        return Err(Error::Invalid("total_loss: no side outputs".into()));
    }
    let refined_shape = tape.value(outputs.refined).shape().to_vec();
    if targets.shape() != refined_shape.as_slice() {
        return Err(Error::shape(
            "total_loss",
            format!("targets {:?} vs logits {:?}", targets.shape(), refined_shape),
        ));
    }
    let main = scale_loss(tape, outputs.refined, targets, cfg, true)?;
    let mut side_sum: Option<Var> = None;
    let (mut bce, mut tv, mut dice) = (0.0, 0.0, 0.0);
    for &s in &outputs.sides {
        let (_, _, h, w) = tape.value(s).dims4()?;
        let t = target_at(targets, h, w)?;
        let l = scale_loss(tape, s, &t, cfg, cfg.tv_all_scales)?;
        bce += l.bce;
        tv += l.tv;
        dice += l.dice;
        side_sum = Some(match side_sum {
            Some(acc) => tape.add(acc, l.value)?,
            None => l.value,
        });
    }
    let k = outputs.sides.len() as f64;
    let side_mean = tape.scale(side_sum.expect("non-empty sides"), 1.0 / k)?;
    let total = tape.add(main.value, side_mean)?;
    Ok(LossBreakdown {
        total,
        bce: main.bce + bce / k,
        tv: main.tv + tv / k,
        dice: main.dice + dice / k,
    })
}

#[cfg(test)]
mod tests {
    use super::kernels::*;
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let v = bce_with_logits(&Tensor::zeros(&[1, 1, 4, 4]), &Tensor::full(&[1, 1, 4, 4], 1.0))
            .unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_saturates_without_overflow() {
        let v = bce_with_logits(&Tensor::full(&[8], 40.0), &Tensor::full(&[8], 1.0)).unwrap();
        assert!((0.0..1e-15).contains(&v));
        let big = bce_with_logits(&Tensor::full(&[2], 1e4), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(big, 1e4);
    }

    #[test]
    fn bce_logit_one_target_zero() {
        let v = bce_with_logits(&t(&[1], &[1.0]), &t(&[1], &[0.0])).unwrap();
        // −ln(1 − σ(1)) = ln(1 + e)
        let oracle = (1.0 + std::f64::consts::E).ln();
        assert!((v - oracle).abs() < 1e-14);
        assert!((v - 1.313262).abs() < 1e-6);
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        assert!(bce_with_logits(&t(&[2], &[0.0, 0.0]), &t(&[2], &[0.5, 1.0])).is_err());
        assert!(bce_with_logits(&t(&[2], &[0.0, 0.0]), &t(&[1], &[1.0])).is_err());
    }

    #[test]
    fn dice_examples() {
        let p = t(&[4], &[1.0, 1.0, 0.0, 0.0]);
        let y = t(&[4], &[1.0, 0.0, 1.0, 0.0]);
        assert!((soft_dice(&p, &y, 1e-12).unwrap() - 0.5).abs() < 1e-6);

        let y = Tensor::from_fn(&[1, 1, 10, 10], |i| (i % 2) as f64);
        assert!(soft_dice(&y, &y, 1e-6).unwrap() < 1e-6);

        let n = 64.0;
        let zero = soft_dice(&Tensor::full(&[64], 1.0), &Tensor::zeros(&[64]), 1e-6).unwrap();
        assert!((zero - (1.0 - 1e-6 / (n + 1e-6))).abs() < 1e-15);
    }

    #[test]
    fn tv_examples() {
        let p = t(&[1, 1, 2, 2], &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(total_variation(&p).unwrap(), 0.5);
        assert_eq!(total_variation(&Tensor::full(&[2, 1, 5, 3], 0.3)).unwrap(), 0.0);
        assert!(total_variation(&Tensor::zeros(&[1, 1, 1, 4])).is_err());
    }

    #[test]
    fn stripes_have_more_tv_than_blurred_stripes() {
        let (h, w) = (6, 8);
        let stripes = Tensor::from_fn(&[1, 1, h, w], |i| ((i % w) % 2) as f64);
        // 1-step horizontal box blur with edge replication.
        let blurred = Tensor::from_fn(&[1, 1, h, w], |i| {
            let (r, c) = (i / w, i % w);
            let at = |cc: usize| stripes.data()[r * w + cc];
            (at(c.saturating_sub(1)) + at(c) + at((c + 1).min(w - 1))) / 3.0
        });
        assert!(total_variation(&stripes).unwrap() > total_variation(&blurred).unwrap());
    }

    #[test]
    fn loss_weight_guard() {
        let zero = LossWeights {
            lambda_bce: 0.0,
            lambda_tv: 0.0,
            lambda_dice: 0.0,
        };
        assert!(zero.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
