use std::fmt::Write as _;

use log::warn;
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{argmax, classification_metrics, ClassifierMetrics};
use super::{one_hot, LabeledWindows, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, softmax, softmax_cross_entropy_grad, Adam, AdamConfig, Network, NetworkGrads};
use crate::normalization::NormLrMultipliers;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub norm_lr: NormLrMultipliers,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            norm_lr: NormLrMultipliers::default(),
        }
    }
}

impl TrainConfig {
    pub(crate) fn optimizer(&self) -> Adam {
        self.norm_lr.apply(Adam::new(self.adam))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One metrics row per epoch and split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub kappa: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,split,loss,accuracy,f1,kappa\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.split, r.loss, r.accuracy, r.f1, r.kappa
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub history: Vec<EpochMetrics>,
    pub warnings: Vec<String>,
}

/// Argmax predictions at unit temperature.
pub fn evaluate_classifier(net: &Network, data: &LabeledWindows) -> Result<ClassifierMetrics> {
    evaluate_split(net, data).map(|(_, m)| m)
}

/// Mean hard-label cross-entropy and classification metrics.
pub fn evaluate_split(net: &Network, data: &LabeledWindows) -> Result<(f64, ClassifierMetrics)> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let truth = data.classes();
    let mut predicted = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    for (w, &y) in data.windows.iter().zip(&truth) {
        let logits = net.predict(w.matrix.view(), &[])?;
        let p = softmax(logits.as_slice().expect("contiguous"));
        loss += cross_entropy(&one_hot(y), p.as_slice().expect("contiguous"))?;
        predicted.push(argmax(logits.as_slice().expect("contiguous")));
    }
    Ok((
        loss / data.len() as f64,
        classification_metrics(&predicted, &truth, NUM_CLASSES)?,
    ))
}

pub(crate) fn epoch_row(epoch: usize, split: &str, net: &Network, data: &LabeledWindows) -> Result<EpochMetrics> {
    let (loss, m) = evaluate_split(net, data)?;
    Ok(EpochMetrics {
        epoch,
        split: split.into(),
        loss,
        accuracy: m.accuracy,
        f1: m.macro_f1,
        kappa: m.kappa,
    })
}

pub(crate) fn single_class_warning(data: &LabeledWindows) -> Option<String> {
    let first = data.labels.first()?;
    data.labels.iter().all(|l| l == first).then(|| {
        let msg = format!("training set contains a single class ({first:?}); training proceeds");
        warn!("{msg}");
        msg
    })
}

/// Mean-reduced hard-label gradient over a minibatch.
fn batch_gradient(net: &Network, data: &LabeledWindows, batch: &[usize]) -> Result<NetworkGrads> {
    let mut acc = NetworkGrads::zeros_like(net);
    for &i in batch {
        let (logits, trace) = net.forward(data.windows[i].matrix.view(), &[])?;
        let target = one_hot(data.labels[i].index());
        let d = softmax_cross_entropy_grad(logits.as_slice().expect("contiguous"), &target, 1.0)?;
        acc.add_scaled(&net.backward(&trace, &d)?.grads, 1.0);
    }
    acc.scale(1.0 / batch.len() as f64);
    Ok(acc)
}

/// Plain cross-entropy training on hard labels with Adam. Deterministic for a seed.
pub fn train_baseline(
    train: &LabeledWindows,
    validation: Option<&LabeledWindows>,
    mut net: Network,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let warnings: Vec<String> = single_class_warning(train).into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = config.optimizer();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let g = batch_gradient(&net, train, batch)?;
            opt.step(&mut net, &g)?;
        }
        history.push(epoch_row(epoch, "train", &net, train)?);
        if let Some(val) = validation {
            history.push(epoch_row(epoch, "validation", &net, val)?);
        }
    }
    Ok(TrainOutcome {
        net,
        history,
        warnings,
    })
}

/// Flattened logits for every window, mostly for diagnostics.
pub fn predict_logits(net: &Network, data: &LabeledWindows) -> Result<Vec<Array1<f64>>> {
    data.windows
        .iter()
        .map(|w| net.predict(w.matrix.view(), &[]))
        .collect()
}
