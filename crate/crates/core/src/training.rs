//! Optimisation: Adam with L2 weight decay, linear warmup into cosine
//! decay, and best-validation-F1 model selection.

use std::io::Write;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{to_input, to_targets, DatasetCase, WindowSample};
use crate::error::{Error, Result};
use crate::eval::{confusion, metrics, Metrics};
use crate::model::{predictions, AbodeNet, Mode, ModelConfig, ParamStore};
use crate::tensor::Graph;

/// How weight decay enters the update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// `wd · w` is added to the gradient before the moment updates.
    #[default]
    Coupled,
    /// `lr · wd · w` is subtracted from the weights after the Adam step.
    Decoupled,
}

impl std::str::FromStr for DecayMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "coupled" => Ok(DecayMode::Coupled),
            "decoupled" => Ok(DecayMode::Decoupled),
            other => Err(format!("unknown decay mode `{other}` (expected coupled or decoupled)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub decay: DecayMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            max_epochs: 100,
            warmup_epochs: 7,
            batch_size: 64,
            decay: DecayMode::Coupled,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Model(format!("invalid training configuration: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.warmup_epochs >= self.max_epochs {
            return bad(format!(
                "warmup ({}) must be shorter than training ({} epochs)",
                self.warmup_epochs, self.max_epochs
            ));
        }
        Ok(())
    }
}

/// Learning rate at a (possibly fractional) epoch: linear from 0 to the
/// base rate over the warmup, then half-cosine down to 0 at `max_epochs`.
pub fn lr_schedule(epoch: f64, config: &TrainConfig) -> f64 {
    let lr = config.learning_rate;
    let warmup = config.warmup_epochs as f64;
    if epoch < warmup {
        return lr * epoch / warmup;
    }
    let span = (config.max_epochs - config.warmup_epochs) as f64;
    let progress = ((epoch - warmup) / span).min(1.0);
    lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam moments for every parameter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: IndexMap<String, Vec<f64>>,
    pub second_moment: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ..Adam::default()
        }
    }

    /// Applies one update. Parameters without an entry in `grads` are
    /// treated as having zero gradient; weight decay only touches
    /// parameters registered with `decay = true`.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &IndexMap<String, Vec<f64>>,
        lr: f64,
        weight_decay: f64,
        mode: DecayMode,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let n = p.value.numel();
            let m = self.first_moment.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second_moment.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(name);
            let wd = if p.decay { weight_decay } else { 0.0 };
            let w = p.value.data_mut();
            for i in 0..n {
                let mut gi = g.map_or(0.0, |g| g[i]);
                if mode == DecayMode::Coupled {
                    gi += wd * w[i];
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                w[i] -= lr * update;
                if mode == DecayMode::Decoupled {
                    w[i] -= lr * wd * w[i];
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_f1: f64,
    pub lr: f64,
}

/// Position of the training RNG, enough to resume the stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            seed,
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything retained from the best epoch.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub epoch: usize,
    pub val_f1: f64,
    pub model: AbodeNet,
    pub optimizer: Adam,
    pub rng: RngState,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Snapshot,
    pub log: Vec<EpochLog>,
    /// Validation predictions after every epoch.
    pub val_predictions: Vec<Vec<bool>>,
}

/// Predicted occupancy for `samples` in eval mode.
pub fn predict(model: &mut AbodeNet, samples: &[WindowSample]) -> Result<Vec<bool>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&WindowSample> = samples.iter().collect();
    let probs = model.predict_proba(&to_input(&refs), 256)?;
    Ok(predictions(&probs))
}

pub fn evaluate(model: &mut AbodeNet, samples: &[WindowSample]) -> Result<Metrics> {
    let preds = predict(model, samples)?;
    let labels: Vec<bool> = samples.iter().map(|s| s.occupied).collect();
    Ok(metrics(&confusion(&preds, &labels)?))
}

/// Mean NLL of one mini-batch, then one optimizer update.
fn train_batch(
    model: &mut AbodeNet,
    optimizer: &mut Adam,
    batch: &[&WindowSample],
    lr: f64,
    config: &TrainConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(to_input(batch));
    let out = model.forward(&mut g, x, Mode::Train)?;
    let loss = g.nll_loss(out.log_probs, &to_targets(batch))?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(loss)?;
    let grads: IndexMap<String, Vec<f64>> = out
        .params
        .iter()
        .filter_map(|(name, &v)| g.grad(v).map(|d| (name.clone(), d.to_vec())))
        .collect();
    optimizer.step(model.params_mut(), &grads, lr, config.weight_decay, config.decay);
    Ok(value)
}

/// Trains a fresh network on `dataset`. See [`train_case_with`].
pub fn train_case(dataset: &DatasetCase, model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    train_case_with(dataset, model_config, config, |_, _| {})
}

/// Trains for `max_epochs` of shuffled mini-batches, scoring validation F1
/// after every epoch and keeping the earliest epoch with the highest score.
/// `on_epoch` sees each log row, and the network as it stands after that
/// epoch, as they are produced.
///
/// All randomness (initialisation, power-iteration start, shuffling) comes
/// from one ChaCha8 stream seeded with `config.seed`, so the log is a pure
/// function of the inputs.
pub fn train_case_with(
    dataset: &DatasetCase,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &mut AbodeNet),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::Data(format!(
            "case {}: training and validation splits must be non-empty",
            dataset.id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = AbodeNet::new(model_config.clone(), &mut rng)?;
    let mut optimizer = Adam::new();
    let val_labels: Vec<bool> = dataset.val.iter().map(|s| s.occupied).collect();
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut log = Vec::with_capacity(config.max_epochs);
    let mut val_predictions = Vec::with_capacity(config.max_epochs);
    let mut best: Option<Snapshot> = None;
    let mut last_finite: Option<f64> = None;

    for epoch in 0..config.max_epochs {
        let lr = lr_schedule(epoch as f64, config);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let loss = train_batch(&mut model, &mut optimizer, &batch, lr, config)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_finite_loss: last_finite,
                });
            }
            last_finite = Some(loss);
            loss_sum += loss * batch.len() as f64;
        }
        let preds = predict(&mut model, &dataset.val)?;
        let m = metrics(&confusion(&preds, &val_labels)?);
        let row = EpochLog {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_acc: m.accuracy,
            val_f1: m.f1,
            lr,
        };
        on_epoch(&row, &mut model);
        if best.as_ref().is_none_or(|b| m.f1 > b.val_f1) {
            best = Some(Snapshot {
                epoch,
                val_f1: m.f1,
                model: model.clone(),
                optimizer: optimizer.clone(),
                rng: RngState::of(config.seed, &rng),
            });
        }
        log.push(row);
        val_predictions.push(preds);
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        log,
        val_predictions,
    })
}

pub const LOG_HEADER: [&str; 5] = ["epoch", "train_loss", "val_acc", "val_f1", "lr"];

/// Writes the per-epoch log. Values use shortest round-trip formatting so
/// identical runs give identical bytes.
pub fn write_log_csv(log: &[EpochLog], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Data(format!("writing training log: {e}"));
    w.write_record(LOG_HEADER).map_err(err)?;
    for r in log {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_acc.to_string(),
            r.val_f1.to_string(),
            r.lr.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()
        .map_err(|e| Error::Data(format!("writing training log: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamGroup;
    use crate::tensor::Tensor;

    fn scalar_store(w: f64, decay: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("w", Tensor::full([1], w), ParamGroup::Classifier, decay)
            .unwrap();
        s
    }

    fn grads(g: f64) -> IndexMap<String, Vec<f64>> {
        IndexMap::from([("w".to_string(), vec![g])])
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = scalar_store(1.25, true);
        let mut adam = Adam::new();
        for _ in 0..3 {
            adam.step(&mut s, &grads(0.0), 1e-3, 0.0, DecayMode::Coupled);
        }
        assert_eq!(s.get("w").unwrap().value.data()[0], 1.25);
        assert_eq!(adam.step, 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [1e-3, 0.5, -40.0] {
            let mut s = scalar_store(0.0, false);
            Adam::new().step(&mut s, &grads(g), 0.01, 0.0, DecayMode::Coupled);
            let w = s.get("w").unwrap().value.data()[0];
            assert!((w + 0.01 * g.signum()).abs() < 1e-7, "{g}: {w}");
        }
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut s = scalar_store(0.0, false);
        let mut adam = Adam::new();
        for _ in 0..200 {
            let w = s.get("w").unwrap().value.data()[0];
            adam.step(&mut s, &grads(2.0 * (w - 3.0)), 0.1, 0.0, DecayMode::Coupled);
        }
        let w = s.get("w").unwrap().value.data()[0];
        assert!((w - 3.0).abs() < 0.05, "{w}");
    }

    #[test]
    fn weight_decay_modes() {
        // Coupled: the decay term passes through Adam's normalisation.
        let mut s = scalar_store(2.0, true);
        Adam::new().step(&mut s, &grads(0.0), 0.1, 0.5, DecayMode::Coupled);
        assert!((s.get("w").unwrap().value.data()[0] - 1.9).abs() < 1e-6);
        // Decoupled: zero gradient leaves only the multiplicative shrink.
        let mut s = scalar_store(2.0, true);
        Adam::new().step(&mut s, &grads(0.0), 0.1, 0.5, DecayMode::Decoupled);
        assert!((s.get("w").unwrap().value.data()[0] - 1.9).abs() < 1e-12);
        // Excluded parameters never decay.
        let mut s = scalar_store(2.0, false);
        Adam::new().step(&mut s, &grads(0.0), 0.1, 0.5, DecayMode::Coupled);
        assert_eq!(s.get("w").unwrap().value.data()[0], 2.0);
    }

    #[test]
    fn schedule_closed_form() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0.0, &c), 0.0);
        assert!((lr_schedule(7.0, &c) - 1e-3).abs() < 1e-12);
        assert!((lr_schedule(3.5, &c) - 0.5e-3).abs() < 1e-12);
        assert!((lr_schedule(53.5, &c) - 0.5e-3).abs() < 1e-12);
        let tail = 1e-3 * 0.5 * (1.0 + (std::f64::consts::PI * 92.0 / 93.0).cos());
        assert!((lr_schedule(99.0, &c) - tail).abs() < 1e-12);
        assert!((tail - 2.85e-7).abs() < 1e-9);
    }

    #[test]
    fn schedule_is_continuous_and_then_non_increasing() {
        let c = TrainConfig::default();
        let h = 1e-9;
        assert!((lr_schedule(7.0 - h, &c) - lr_schedule(7.0 + h, &c)).abs() < 1e-9);
        let mut prev = lr_schedule(7.0, &c);
        for e in 8..100 {
            let lr = lr_schedule(e as f64, &c);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                warmup_epochs: 100,
                ..TrainConfig::default()
            },
            TrainConfig {
                weight_decay: -1.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let _: [u64; 5] = rng.gen();
        let state = RngState::of(4, &rng);
        let mut resumed = state.restore();
        assert_eq!(rng.gen::<u64>(), resumed.gen::<u64>());
    }

    #[test]
    fn log_csv_layout() {
        let log = vec![EpochLog {
            epoch: 0,
            train_loss: 0.5,
            val_acc: 0.75,
            val_f1: 0.8,
            lr: 0.0,
        }];
        let mut buf = Vec::new();
        write_log_csv(&log, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,val_acc,val_f1,lr\n0,0.5,0.75,0.8,0\n"
        );
    }
}
