//! Per-channel batch normalisation over `B × C × H × W` tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Exponential moving averages of the per-channel batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of training batches folded into the averages. Zero means the
    /// statistics have never been recorded.
    pub updates: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Folds one batch in. `var` is the biased batch variance; the running
    /// variance tracks the unbiased estimate.
    fn record(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let correction = count as f64 / (count as f64 - 1.0);
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - BN_MOMENTUM) * self.mean[c] + BN_MOMENTUM * mean[c];
            self.var[c] = (1.0 - BN_MOMENTUM) * self.var[c] + BN_MOMENTUM * var[c] * correction;
        }
        self.updates += 1;
    }
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub train: bool,
}

fn check(x: &Tensor, gamma: &Tensor, beta: &Tensor, stats: &RunningStats) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] || stats.channels() != c {
        return Err(Error::shape(
            "batch_norm",
            format!(
                "input has {c} channels but gamma {:?}, beta {:?}, running stats {}",
                gamma.shape(),
                beta.shape(),
                stats.channels()
            ),
        ));
    }
    Ok((b, c, h * w))
}

pub fn batch_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    mode: Mode,
    name: &str,
) -> Result<(Tensor, BnCache)> {
    let (b, c, plane) = check(x, gamma, beta, stats)?;
    let count = b * plane;
    let (mean, var) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::shape(
                    "batch_norm",
                    format!("training needs at least 2 values per channel, got {count}"),
                ));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    s += x.plane(bi, ch).iter().sum::<f64>();
                }
                let m = s / count as f64;
                let mut ss = 0.0;
                for bi in 0..b {
                    ss += x.plane(bi, ch).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = ss / count as f64;
            }
            stats.record(&mean, &var, count);
            (mean, var)
        }
        Mode::Eval => {
            if stats.updates == 0 {
                return Err(Error::MissingRunningStats(name.to_string()));
            }
            (stats.mean.clone(), stats.var.clone())
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for bi in 0..b {
        for ch in 0..c {
            let start = (bi * c + ch) * plane;
            let src = &x.data()[start..start + plane];
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for (k, &v) in src.iter().enumerate() {
                let n = (v - mean[ch]) * inv_std[ch];
                xhat.data_mut()[start + k] = n;
                y.data_mut()[start + k] = g * n + bt;
            }
        }
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            train: mode == Mode::Train,
        },
    ))
}

/// Returns `(d input, d gamma, d beta)`.
pub fn batch_norm_backward(
    cache: &BnCache,
    gamma: &Tensor,
    grad: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, h, w) = grad.dims4()?;
    let plane = h * w;
    let count = (b * plane) as f64;
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for bi in 0..b {
        for ch in 0..c {
            let start = (bi * c + ch) * plane;
            let g = &grad.data()[start..start + plane];
            let xh = &cache.xhat.data()[start..start + plane];
            dbeta.data_mut()[ch] += g.iter().sum::<f64>();
            dgamma.data_mut()[ch] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let mut dx = Tensor::zeros(grad.shape());
    for bi in 0..b {
        for ch in 0..c {
            let start = (bi * c + ch) * plane;
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            let (sum_g, sum_gx) = (dbeta.data()[ch], dgamma.data()[ch]);
            for k in start..start + plane {
                let g = grad.data()[k];
                dx.data_mut()[k] = if cache.train {
                    scale * (g - sum_g / count - cache.xhat.data()[k] * sum_gx / count)
                } else {
                    scale * g
                };
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_standardises_each_channel() {
        let x = Tensor::from_fn(&[3, 2, 4, 4], |i| ((i * 37) % 17) as f64 * 0.3 - 1.0);
        let mut stats = RunningStats::new(2);
        let (y, _) = batch_norm_forward(
            &x,
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            &mut stats,
            Mode::Train,
            "bn",
        )
        .unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| y.plane(b, ch).to_vec()).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert_eq!(stats.updates, 1);
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::full(&[2, 1, 3, 3], 4.2);
        let mut stats = RunningStats::new(1);
        let (y, _) = batch_norm_forward(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::full(&[1], 5.0),
            &mut stats,
            Mode::Train,
            "bn",
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn two_element_channel() {
        let x = Tensor::new(vec![2, 1, 1, 1], vec![0.0, 2.0]).unwrap();
        let mut stats = RunningStats::new(1);
        let (y, _) = batch_norm_forward(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            &mut stats,
            Mode::Train,
            "bn",
        )
        .unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expected).abs() < 1e-15);
        assert!((y.data()[1] - expected).abs() < 1e-15);
        assert!(expected < 1.0 && expected > 0.99999);
    }

    #[test]
    fn eval_before_training_is_an_error() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let mut stats = RunningStats::new(1);
        let err = batch_norm_forward(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            &mut stats,
            Mode::Eval,
            "enc.bn",
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingRunningStats(n) if n == "enc.bn"));
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        let mut stats = RunningStats::new(2);
        assert!(batch_norm_forward(
            &x,
            &Tensor::full(&[3], 1.0),
            &Tensor::zeros(&[2]),
            &mut stats,
            Mode::Train,
            "bn"
        )
        .is_err());
    }
}
