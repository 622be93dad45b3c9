//! Adam training loop, evaluation and loss history.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{AdamMoments, Checkpoint, CheckpointMeta, RngState};
use crate::data::{batch_tensors, preprocess, LesionClass, SegmentationSample};
use crate::decoder::predict_mask;
use crate::encoder::NetworkConfig;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, ImageRecord, MetricsReport};
use crate::model::Model;
use crate::norm::Mode;
use crate::objective::{kernels, total_loss, LossConfig};
use crate::resample::resize_nearest;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss: LossConfig,
    /// Evaluate on held-out data every this many epochs; 0 evaluates only
    /// after the last epoch.
    pub eval_every: usize,
    pub threshold: f64,
    pub include_normal: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 450,
            batch_size: 2,
            adam: AdamConfig::default(),
            seed: 0,
            loss: LossConfig::default(),
            eval_every: 0,
            threshold: 0.5,
            include_normal: false,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs < 1 {
            out.push("train.epochs must be at least 1".to_string());
        }
        if self.batch_size < 1 {
            out.push("train.batch_size must be at least 1".to_string());
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            out.push(format!("train.adam.lr must be non-negative, got {}", a.lr));
        }
        for (name, b) in [("beta1", a.beta1), ("beta2", a.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("train.adam.{name} must lie in [0, 1), got {b}"));
            }
        }
        if a.eps.is_nan() || a.eps <= 0.0 {
            out.push(format!("train.adam.eps must be positive, got {}", a.eps));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            out.push(format!("train.threshold must lie in (0, 1), got {}", self.threshold));
        }
        if let Err(e) = self.loss.validate() {
            out.push(e.to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// One Adam update at step `t` (1-based). Every gradient is checked before
/// anything is written, so a non-finite gradient leaves params and moments
/// untouched.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    moments: &mut AdamMoments,
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if t < 1 {
        return Err(Error::Invalid("adam step counter must start at 1".into()));
    }
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no gradient for parameter '{name}'")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("'{name}': param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!(
                "gradient of '{name}' is {} at flat index {i}; step aborted",
                g.data()[i]
            )));
        }
        for m in [moments.m.get(name), moments.v.get(name)].into_iter().flatten() {
            if m.shape() != p.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("'{name}': moment {:?} vs param {:?}", m.shape(), p.shape()),
                ));
            }
        }
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = moments
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = moments
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        for (((w, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Weighted loss components averaged over the batches of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub bce: f64,
    pub tv: f64,
    pub dice: f64,
    pub eval_dsc: Option<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,bce,tv,dice,eval_dsc\n");
    for r in history {
        let dsc = r.eval_dsc.map(|d| d.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.loss, r.bce, r.tv, r.dice, dsc
        ));
    }
    out
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed_hex: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(s: &RngState) -> Result<ChaCha8Rng> {
    let bad = || Error::Checkpoint("malformed rng state".into());
    if s.seed_hex.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s.seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos.parse().map_err(|_| bad())?);
    Ok(rng)
}

/// Optimizer state around a model: moments, step counter, epoch and the
/// shuffling RNG.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub moments: AdamMoments,
    pub step: u64,
    pub epoch: usize,
    pub input_size: (usize, usize),
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh parameters drawn from `config.seed`; the same stream then
    /// drives batch shuffling.
    pub fn new(network: NetworkConfig, config: TrainConfig, input_size: (usize, usize)) -> Result<Self> {
        config.validate()?;
        network.validate()?;
        network.check_input(input_size.0, input_size.1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::with_rng(network, &mut rng)?;
        Ok(Self {
            model,
            config,
            moments: AdamMoments::default(),
            step: 0,
            epoch: 0,
            input_size,
            rng,
        })
    }

    /// Continues from a saved checkpoint, including optimizer and RNG state.
    pub fn resume(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = match &ck.meta.rng {
            Some(s) => restore_rng(s)?,
            None => ChaCha8Rng::seed_from_u64(config.seed),
        };
        Ok(Self {
            model: ck.model()?,
            config,
            moments: ck.moments.clone(),
            step: ck.meta.adam_step,
            epoch: ck.meta.epoch,
            input_size: ck.meta.input_size,
            rng,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                network: self.model.config.clone(),
                input_size: self.input_size,
                epoch: self.epoch,
                adam_step: self.step,
                rng: Some(rng_state(&self.rng)),
            },
            params: self.model.params.clone(),
            moments: self.moments.clone(),
        }
    }

    /// Forward, loss and backward on one batch without updating anything
    /// except the batch-norm running statistics. Returns the loss value,
    /// its components and the parameter gradients.
    pub fn loss_and_grads(
        &mut self,
        images: &Tensor,
        masks: &Tensor,
    ) -> Result<(f64, [f64; 3], BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let fwd = self.model.forward(&mut tape, images, Mode::Train)?;
        let loss = total_loss(&mut tape, &fwd.outputs, masks, &self.config.loss)?;
        let value = tape.value(loss.total).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "total_loss" });
        }
        let grads = tape.backward(loss.total)?;
        let named = fwd
            .binding
            .vars
            .iter()
            .map(|(name, &var)| {
                let shape = tape.value(var).shape().to_vec();
                (name.clone(), grads.get_or_zeros(var, &shape))
            })
            .collect();
        Ok((value, [loss.bce, loss.tv, loss.dice], named))
    }

    /// One optimizer step on a batch. On failure the parameters, moments
    /// and running statistics are left as they were.
    pub fn step_batch(&mut self, images: &Tensor, masks: &Tensor) -> Result<(f64, [f64; 3])> {
        let stats = self.model.params.stats.clone();
        let result = self.loss_and_grads(images, masks).and_then(|(value, parts, grads)| {
            adam_step(
                &mut self.model.params.tensors,
                &grads,
                &mut self.moments,
                self.step + 1,
                &self.config.adam,
            )?;
            Ok((value, parts))
        });
        match result {
            Ok(r) => {
                self.step += 1;
                Ok(r)
            }
            Err(e) => {
                self.model.params.stats = stats;
                Err(e)
            }
        }
    }

    /// Shuffles, batches (keeping a short last batch) and steps through one
    /// epoch.
    pub fn run_epoch(&mut self, samples: &[SegmentationSample]) -> Result<EpochRecord> {
        if samples.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        for s in samples {
            if s.extent() != self.input_size {
                return Err(Error::Invalid(format!(
                    "sample '{}' is {:?}, trainer expects {:?}",
                    s.id,
                    s.extent(),
                    self.input_size
                )));
            }
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = [0.0; 4];
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&SegmentationSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (images, masks) = batch_tensors(&batch)?;
            let (loss, parts) = self.step_batch(&images, &masks)?;
            let w = chunk.len() as f64;
            sums[0] += w * loss;
            for k in 0..3 {
                sums[k + 1] += w * parts[k];
            }
        }
        self.epoch += 1;
        let n = samples.len() as f64;
        Ok(EpochRecord {
            epoch: self.epoch,
            loss: sums[0] / n,
            bce: sums[1] / n,
            tv: sums[2] / n,
            dice: sums[3] / n,
            eval_dsc: None,
        })
    }
}

/// Result of a full training run.
pub struct TrainOutcome {
    /// State after the last completed epoch (the last good state if the
    /// run halted).
    pub last: Checkpoint,
    /// Checkpoint at the epoch with the best held-out mean DSC.
    pub best: Option<(usize, Checkpoint)>,
    pub history: Vec<EpochRecord>,
    pub evaluations: Vec<(usize, MetricsReport)>,
    /// Why training stopped early, if it did.
    pub halted: Option<String>,
}

/// Trains on `train`, evaluating on `held_out` (if non-empty) every
/// `eval_every` epochs and after the last one. `on_epoch` sees each record
/// as it is produced.
pub fn train_with(
    network: NetworkConfig,
    train: &[SegmentationSample],
    held_out: &[SegmentationSample],
    config: TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let first = train
        .first()
        .ok_or_else(|| Error::Invalid("training set is empty".into()))?;
    let mut trainer = Trainer::new(network, config, first.extent())?;
    let cfg = trainer.config.clone();
    let mut history = Vec::new();
    let mut evaluations = Vec::new();
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let mut halted = None;
    for epoch in 1..=cfg.epochs {
        let mut record = match trainer.run_epoch(train) {
            Ok(r) => r,
            Err(e @ (Error::NonFinite { .. } | Error::Diverged(_))) => {
                halted = Some(format!("epoch {epoch}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let due = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        if due && !held_out.is_empty() {
            let report = evaluate_model(&mut trainer.model, held_out, 0, cfg.threshold, cfg.include_normal)?;
            let dsc = report.mean_dsc();
            record.eval_dsc = Some(dsc);
            if best.as_ref().is_none_or(|(_, b, _)| dsc > *b) {
                best = Some((epoch, dsc, trainer.checkpoint()));
            }
            evaluations.push((epoch, report));
        }
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome {
        last: trainer.checkpoint(),
        best: best.map(|(e, _, c)| (e, c)),
        history,
        evaluations,
        halted,
    })
}

pub fn train(
    network: NetworkConfig,
    train_set: &[SegmentationSample],
    held_out: &[SegmentationSample],
    config: TrainConfig,
) -> Result<TrainOutcome> {
    train_with(network, train_set, held_out, config, |_| {})
}

const EVAL_BATCH: usize = 8;

/// Eval-mode refined logits for each sample, as `1 × 1 × H × W` tensors.
pub fn predict_logits(model: &mut Model, samples: &[SegmentationSample]) -> Result<Vec<Tensor>> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to predict".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let (h, w) = chunk[0].extent();
        model.config.check_input(h, w)?;
        let batch: Vec<&SegmentationSample> = chunk.iter().collect();
        let (images, _) = batch_tensors(&batch)?;
        let logits = model.predict_logits(&images)?;
        let plane = h * w;
        for (b, _) in chunk.iter().enumerate() {
            out.push(Tensor::new(
                vec![1, 1, h, w],
                logits.data()[b * plane..(b + 1) * plane].to_vec(),
            )?);
        }
    }
    Ok(out)
}

/// Per-image metric records for `samples`, all labelled with `fold`.
pub fn evaluate_records(
    model: &mut Model,
    samples: &[SegmentationSample],
    fold: usize,
    threshold: f64,
) -> Result<Vec<ImageRecord>> {
    let logits = predict_logits(model, samples)?;
    samples
        .iter()
        .zip(&logits)
        .map(|(s, l)| {
            let pred = predict_mask(l, threshold)?;
            let truth = s.mask.clone().reshape(pred.shape().to_vec())?;
            ImageRecord::from_masks(&s.id, fold, s.class, &pred, &truth)
        })
        .collect()
}

pub fn evaluate_model(
    model: &mut Model,
    samples: &[SegmentationSample],
    fold: usize,
    threshold: f64,
    include_normal: bool,
) -> Result<MetricsReport> {
    Ok(aggregate(evaluate_records(model, samples, fold, threshold)?, include_normal))
}

/// Evaluates a checkpoint at threshold 0.5 with the normal class excluded.
pub fn evaluate(ck: &Checkpoint, samples: &[SegmentationSample]) -> Result<MetricsReport> {
    let mut model = ck.model()?;
    evaluate_model(&mut model, samples, 0, 0.5, false)
}

/// Binary mask for one `1 × H × W` image: resized to `input_size` and
/// normalised as in training, predicted, then resized back to `H × W` with
/// nearest-neighbour sampling.
pub fn predict_image_mask(
    model: &mut Model,
    input_size: (usize, usize),
    image: &Tensor,
    threshold: f64,
) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        &[1, h, w] => (h, w),
        other => return Err(Error::Invalid(format!("expected a 1 x H x W image, got {other:?}"))),
    };
    let sample = SegmentationSample {
        id: String::new(),
        image: image.clone(),
        mask: Tensor::zeros(image.shape()),
        class: LesionClass::Benign,
    };
    let (ih, iw) = input_size;
    let batch = preprocess(&sample, input_size)?.image.reshape(vec![1, 1, ih, iw])?;
    let mask = predict_mask(&model.predict_logits(&batch)?, threshold)?;
    resize_nearest(&mask, h, w)?.reshape(vec![1, h, w])
}

/// Mean total variation of the eval-mode probability maps.
pub fn mean_probability_tv(model: &mut Model, samples: &[SegmentationSample]) -> Result<f64> {
    let logits = predict_logits(model, samples)?;
    let mut sum = 0.0;
    for l in &logits {
        sum += kernels::total_variation(&l.map(kernels::sigmoid))?;
    }
    Ok(sum / logits.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::full(&[3], 1.5))]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[3]))]);
        let mut m = AdamMoments::default();
        for t in 1..=5 {
            adam_step(&mut params, &grads, &mut m, t, &AdamConfig::default()).unwrap();
        }
        assert_eq!(params["w"].data(), &[1.5; 3]);
    }

    #[test]
    fn first_step_is_lr_sign() {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::zeros(&[3]))]);
        let grads = BTreeMap::from([(
            "w".to_string(),
            Tensor::new(vec![3], vec![4.0, -0.02, 300.0]).unwrap(),
        )]);
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        adam_step(&mut params, &grads, &mut AdamMoments::default(), 1, &cfg).unwrap();
        for (w, s) in params["w"].data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((w - s * 0.01).abs() < 1e-6, "{w}");
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_writes() {
        let mut params = BTreeMap::from([
            ("a".to_string(), Tensor::full(&[2], 1.0)),
            ("b".to_string(), Tensor::full(&[2], 2.0)),
        ]);
        let grads = BTreeMap::from([
            ("a".to_string(), Tensor::full(&[2], 1.0)),
            ("b".to_string(), Tensor::new(vec![2], vec![0.0, f64::NAN]).unwrap()),
        ]);
        let mut m = AdamMoments::default();
        let err = adam_step(&mut params, &grads, &mut m, 1, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("'b'"), "{err}");
        assert_eq!(params["a"].data(), &[1.0, 1.0]);
        assert!(m.m.is_empty());
        assert!(adam_step(&mut params, &grads, &mut m, 0, &AdamConfig::default()).is_err());
    }

    #[test]
    fn config_problems_are_all_reported() {
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 0,
            threshold: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.problems().len(), 3);
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn rng_state_round_trip() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rng.random();
        let mut back = restore_rng(&rng_state(&rng)).unwrap();
        assert_eq!(rng.random::<u64>(), back.random::<u64>());
    }
}
