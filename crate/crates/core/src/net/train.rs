use serde::{Deserialize, Serialize};

use super::{Batch, Dataset, GatedModel, ModelObjective};
use crate::autograd::GatedObjective;
use crate::error::{Error, Result};
use crate::ndtensor::SeededRng;

const SHUFFLE_STREAM: u64 = 0x5AFF1E;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 60, batch_size: 32, lr: 0.05, momentum: 0.9, weight_decay: 0.0, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Momentum buffer; one per weight.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<f64>,
}

/// One momentum-SGD update of the weights on `batch`. Gates are left alone.
///
/// `v ← μ·v + (g + wd·w)`, `w ← w − lr·v`. Returns the batch loss before the update.
pub fn sgd_step(model: &mut GatedModel, batch: &Batch, cfg: &TrainConfig, state: &mut SgdState) -> Result<f64> {
    let w = model.weights_flat();
    let lg = ModelObjective::new(model, batch).eval(&w, &model.gates_flat())?;
    if lg.grad_w.iter().any(|g| !g.is_finite()) {
        return Err(Error::non_finite("weight gradient"));
    }
    if state.velocity.len() != w.len() {
        state.velocity = vec![0.0; w.len()];
    }
    let mut next = w;
    for ((wi, vi), gi) in next.iter_mut().zip(state.velocity.iter_mut()).zip(&lg.grad_w) {
        *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *wi;
        *wi -= cfg.lr * *vi;
    }
    model.set_weights_flat(&next)?;
    Ok(lg.loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.accuracy));
        }
        out
    }
}

/// Shuffled mini-batch momentum SGD; records full-dataset loss/accuracy after each epoch.
pub fn train(model: &mut GatedModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed).split(SHUFFLE_STREAM);
    let mut state = SgdState::default();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        for batch in data.epoch_batches(cfg.batch_size, &mut rng)? {
            sgd_step(model, &batch, cfg, &mut state)?;
        }
        let (loss, accuracy) = evaluate(model, data)?;
        history.epochs.push(EpochRecord { epoch: epoch + 1, loss, accuracy });
    }
    Ok(history)
}

/// Mean cross-entropy and top-1 accuracy over the whole dataset.
pub fn evaluate(model: &GatedModel, data: &Dataset) -> Result<(f64, f64)> {
    let batch = data.full_batch();
    let loss = model.forward_loss(&batch)?;
    let logits = model.logits(&batch.inputs)?;
    let k = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(k)
        .zip(&batch.labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            best == label
        })
        .count();
    Ok((loss, correct as f64 / batch.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::build_model;
    use crate::Tensor64;

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = SeededRng::new(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let center = if c == 0 { -2.0 } else { 2.0 };
            data.push(center + 0.5 * rng.standard_normal());
            data.push(center + 0.5 * rng.standard_normal());
            labels.push(c);
        }
        Dataset::new(Tensor64::new(vec![n, 2], data).unwrap(), labels, 2).unwrap()
    }

    #[test]
    fn zero_lr_leaves_model_unchanged() {
        let mut model = build_model("mlp-tiny", 1).unwrap();
        let before = model.clone();
        let cfg = TrainConfig { lr: 0.0, epochs: 2, ..TrainConfig::default() };
        train(&mut model, &blobs(40, 0), &cfg).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn separable_blobs_are_learned_deterministically() {
        let data = blobs(200, 3);
        let cfg = TrainConfig { epochs: 10, batch_size: 20, lr: 0.05, ..TrainConfig::default() };
        let mut a = build_model("mlp-tiny", 2).unwrap();
        let mut b = a.clone();
        let ha = train(&mut a, &data, &cfg).unwrap();
        train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(ha.epochs.last().unwrap().accuracy >= 0.99);
        assert_eq!(evaluate(&a, &blobs(200, 99)).map(|r| r.1 >= 0.95).ok(), Some(true));
    }

    #[test]
    fn gates_untouched_by_sgd() {
        let mut model = build_model("mlp:2-8-2", 1).unwrap();
        model.set_gate(crate::net::ChannelId { layer: 0, channel: 3 }, 0.0).unwrap();
        let gates = model.gates_flat();
        let data = blobs(20, 1);
        sgd_step(&mut model, &data.full_batch(), &TrainConfig::default(), &mut SgdState::default()).unwrap();
        assert_eq!(model.gates_flat(), gates);
    }

    #[test]
    fn uniform_predictor_is_at_chance() {
        let mut model = build_model("mlp:2-4-2", 0).unwrap();
        let zeros = vec![0.0; model.num_weights()];
        model.set_weights_flat(&zeros).unwrap();
        let (loss, acc) = evaluate(&model, &blobs(100, 5)).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        // all-equal logits pick class 0, which is half of a balanced set
        assert!((acc - 0.5).abs() <= 0.05);
    }

    #[test]
    fn bad_config_rejected() {
        assert!(TrainConfig { momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..TrainConfig::default() }.validate().is_err());
    }
}
