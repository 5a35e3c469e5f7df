//! Momentum-SGD training of a backbone plus margin-loss class weights on the
//! synthetic dataset, with per-epoch verification metrics.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::eval::{evaluate_verification, VerifPair};
use super::loss::margin_loss;
use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::tensor::{l2_normalize, Mode, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub scale: f64,
    pub margin: f64,
    pub learning_rate: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Horizontal flip probability; a flip negates the yaw sign.
    pub flip_probability: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            scale: 8.0,
            margin: 0.5,
            learning_rate: 0.01,
            lr_decay_epochs: vec![6, 9],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            flip_probability: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.scale <= 0.0 {
            problems.push("scale must be positive".to_string());
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            problems.push(format!("margin {} outside [0, pi/2)", self.margin));
        }
        if self.learning_rate < 0.0 {
            problems.push("learning rate must be nonnegative".to_string());
        }
        if !(0.0..1.0).contains(&self.lr_decay_factor) && self.lr_decay_factor != 1.0 {
            problems.push(format!("lr decay factor {} outside (0, 1]", self.lr_decay_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.weight_decay < 0.0 {
            problems.push("weight decay must be nonnegative".to_string());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            problems.push("batch size and epochs must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            problems.push(format!("flip probability {} outside [0, 1]", self.flip_probability));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub bucket_accuracy: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub initial_loss: f64,
    pub clamped_total: usize,
}

/// `epoch,loss,acc,acc_y0_30,acc_y30_60,acc_y60_90` rows, 12 significant
/// digits so golden-file comparisons are stable.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,loss,acc,acc_y0_30,acc_y30_60,acc_y60_90\n");
    for m in history {
        out.push_str(&format!(
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
            m.epoch, m.loss, m.accuracy, m.bucket_accuracy[0], m.bucket_accuracy[1], m.bucket_accuracy[2]
        ));
    }
    out
}

struct Sgd {
    params: Vec<(String, Tensor)>,
    velocity: Vec<Vec<f64>>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    fn new(params: Vec<(String, Tensor)>, momentum: f64, weight_decay: f64) -> Sgd {
        let velocity = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Sgd { params, velocity, momentum, weight_decay }
    }

    fn step(&mut self, lr: f64) {
        for ((_, p), v) in self.params.iter().zip(&mut self.velocity) {
            let grad = match p.grad() {
                Some(g) => g,
                None => continue,
            };
            let data = p.to_vec();
            for i in 0..v.len() {
                v[i] = self.momentum * v[i] + grad[i] + self.weight_decay * data[i];
            }
            p.add_scaled(v, -lr);
        }
    }

    fn zero_grads(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }
}

fn flip_image(image: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; image.len()];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = image[y * size + (size - 1 - x)];
        }
    }
    out
}

/// Trains in place. Verification metrics are computed on `eval_pairs` after
/// every epoch. Deterministic for a fixed config seed.
pub fn train(
    model: &Model,
    dataset: &Dataset,
    eval_pairs: &[VerifPair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n_classes = dataset.meta.n_identities;
    let size = dataset.meta.image_size;
    if size != model.cfg.input_size {
        return Err(Error::Shape(format!(
            "dataset image size {size} does not match model input {}",
            model.cfg.input_size
        )));
    }
    let dim = model.cfg.embedding_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC1A5_5EED);
    let class_weights =
        crate::blocks::uniform_fan_in(&mut rng, &[n_classes, dim], dim);

    let mut params = model.named_params();
    params.push(("loss.class_weights".to_string(), class_weights.clone()));
    let mut optimizer = Sgd::new(params, cfg.momentum, cfg.weight_decay);

    let forward_loss = |indices: &[usize], flips: &[bool], mode: Mode| -> Result<(Tensor, usize)> {
        let mut data = Vec::with_capacity(indices.len() * size * size);
        let mut yaws = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for (&i, &flip) in indices.iter().zip(flips) {
            let s = &dataset.samples[i];
            if flip {
                data.extend_from_slice(&flip_image(&s.image, size));
                yaws.push(-s.yaw_deg);
            } else {
                data.extend_from_slice(&s.image);
                yaws.push(s.yaw_deg);
            }
            labels.push(s.identity);
        }
        let x = Tensor::from_vec(&[indices.len(), 1, size, size], data)?;
        let e = model.forward_extract(&x, &yaws, mode)?;
        let e = l2_normalize(&e)?;
        let w = l2_normalize(&class_weights)?;
        let out = margin_loss(&e, &labels, &w, cfg.scale, cfg.margin)?;
        Ok((out.loss, out.clamped))
    };

    // loss of the untouched model over the whole set, for monotonicity checks
    let all: Vec<usize> = (0..dataset.samples.len()).collect();
    let mut initial_loss = 0.0;
    for chunk in all.chunks(cfg.batch_size) {
        let flips = vec![false; chunk.len()];
        let (loss, _) = forward_loss(chunk, &flips, Mode::Eval)?;
        initial_loss += loss.value() * chunk.len() as f64;
    }
    initial_loss /= dataset.samples.len() as f64;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut clamped_total = 0usize;
    let mut lr = cfg.learning_rate;
    for epoch in 1..=cfg.epochs {
        if cfg.lr_decay_epochs.contains(&epoch) {
            lr *= cfg.lr_decay_factor;
        }
        let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut epoch_rng);
        let mut epoch_loss = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let flips: Vec<bool> =
                chunk.iter().map(|_| epoch_rng.gen_bool(cfg.flip_probability)).collect();
            optimizer.zero_grads();
            let (loss, clamped) = forward_loss(chunk, &flips, Mode::Train)?;
            let value = loss.value();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss diverged at epoch {epoch}, step {step}"
                )));
            }
            clamped_total += clamped;
            loss.backward()?;
            optimizer.step(lr);
            epoch_loss += value * chunk.len() as f64;
        }
        epoch_loss /= dataset.samples.len() as f64;
        let report = evaluate_verification(model, eval_pairs)?;
        history.push(EpochMetrics {
            epoch,
            loss: epoch_loss,
            accuracy: report.accuracy,
            bucket_accuracy: report.bucket_accuracy,
        });
    }
    Ok(TrainOutcome { history, initial_loss, clamped_total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_model, BackboneConfig, PlacementPlan};
    use crate::harness::data::{generate_dataset, YawLaw};
    use crate::harness::eval::make_pairs;

    fn small_setup() -> (Dataset, Vec<VerifPair>) {
        let ds = generate_dataset(21, 4, 6, YawLaw::FrontalSkewed, 32);
        let pairs = make_pairs(&ds, 12, 3).unwrap();
        (ds, pairs)
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (ds, pairs) = small_setup();
        let model = build_model(&BackboneConfig::toy(), &PlacementPlan::baseline(), 1).unwrap();
        let before: Vec<Vec<f64>> = model.named_params().iter().map(|(_, t)| t.to_vec()).collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let outcome = train(&model, &ds, &pairs, &cfg).unwrap();
        let after: Vec<Vec<f64>> = model.named_params().iter().map(|(_, t)| t.to_vec()).collect();
        assert_eq!(before, after);
        // loss constant across epochs up to batch-statistics jitter in train
        // mode is not guaranteed; check exact equality in parameter space only
        assert_eq!(outcome.history.len(), 2);
    }

    #[test]
    fn equal_seeds_give_identical_histories() {
        let (ds, pairs) = small_setup();
        let cfg = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() };
        let m1 = build_model(&BackboneConfig::toy(), &PlacementPlan::parse("PAM12").unwrap(), 5)
            .unwrap();
        let m2 = build_model(&BackboneConfig::toy(), &PlacementPlan::parse("PAM12").unwrap(), 5)
            .unwrap();
        let o1 = train(&m1, &ds, &pairs, &cfg).unwrap();
        let o2 = train(&m2, &ds, &pairs, &cfg).unwrap();
        assert_eq!(metrics_csv(&o1.history), metrics_csv(&o2.history));
    }

    #[test]
    fn first_epoch_reduces_loss() {
        let (ds, pairs) = small_setup();
        let model = build_model(&BackboneConfig::toy(), &PlacementPlan::baseline(), 2).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() };
        let outcome = train(&model, &ds, &pairs, &cfg).unwrap();
        assert!(
            outcome.history[0].loss < outcome.initial_loss,
            "epoch loss {} vs initial {}",
            outcome.history[0].loss,
            outcome.initial_loss
        );
    }

    #[test]
    fn csv_header_and_shape() {
        let history = vec![EpochMetrics {
            epoch: 1,
            loss: 2.5,
            accuracy: 0.75,
            bucket_accuracy: [0.8, 0.7, 0.6],
        }];
        let csv = metrics_csv(&history);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,loss,acc,acc_y0_30,acc_y30_60,acc_y60_90");
        assert_eq!(lines.next().unwrap().split(',').count(), 6);
    }

    #[test]
    fn invalid_config_lists_problems() {
        let cfg = TrainConfig {
            scale: -1.0,
            momentum: 2.0,
            ..TrainConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("scale"));
        assert!(err.contains("momentum"));
    }
}
