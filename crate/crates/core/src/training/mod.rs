//! Model assembly, ablation variants, Adam and the epoch loop.

mod adam;
mod checkpoint;
mod config;
mod model;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, NamedMatrix, SplitInfo, CHECKPOINT_FORMAT_VERSION};
pub use config::{ablation_grid, AblationSpec, TrainConfig};
pub use model::{build_ablated, thread_pool, BatchResult, ForwardCache, HeloModel, SampleOutput, CHUNK};

use std::fmt::Write as _;

use log::info;
use rand::seq::SliceRandom;

use crate::data::{Fold, Sample};
use crate::error::{Error, Result};
use crate::labels::{correlation_matrix, label_matrix, EmotionDistribution};
use crate::metrics::{evaluate_set, MetricVector, METRIC_COLUMNS};
use crate::numerics::{derived_rng, grad_check, GradCheckReport, Matrix};

/// Summary of one training epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// Starts at 1.
    pub epoch: usize,
    /// Sample-weighted mean of the batch objectives.
    pub train_loss: f64,
    pub train_kld: f64,
    pub train_cc: f64,
    /// Mean test metrics after the epoch, when the fold has test samples.
    pub test: Option<MetricVector>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    /// `epoch,loss,cheb,clark,canb,kl,cos,inter`; metric cells are empty without a test set.
    pub fn to_csv(&self) -> String {
        let mut out = format!("epoch,loss,{}\n", METRIC_COLUMNS.join(","));
        for r in &self.records {
            let _ = write!(out, "{},{}", r.epoch, r.train_loss);
            match &r.test {
                Some(m) => m.to_array().iter().for_each(|v| {
                    let _ = write!(out, ",{v}");
                }),
                None => out.push_str(&",".repeat(6)),
            }
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

fn labels_of<'a>(samples: &'a [Sample], idx: &[usize]) -> Vec<&'a EmotionDistribution> {
    idx.iter().map(|&i| &samples[i].label).collect()
}

/// Label correlation of a whole sample set.
pub fn dataset_correlation(samples: &[&Sample]) -> Result<Matrix> {
    let labels: Vec<&EmotionDistribution> = samples.iter().map(|s| &s.label).collect();
    Ok(correlation_matrix(&label_matrix(&labels)?)?.matrix)
}

/// Mean test metrics of `model` on `samples[idx]`.
pub fn evaluate_indices(model: &HeloModel, samples: &[Sample], idx: &[usize]) -> Result<MetricVector> {
    let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
    let preds = model.predict_all(&batch)?;
    let truths: Vec<EmotionDistribution> = labels_of(samples, idx).into_iter().cloned().collect();
    evaluate_set(&preds, &truths)
}

/// Runs `model.config.epochs` epochs over `fold.train`, evaluating on `fold.test` after each.
pub fn train(model: &mut HeloModel, adam: &mut AdamState, samples: &[Sample], fold: &Fold) -> Result<History> {
    train_with(model, adam, samples, fold, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &mut HeloModel,
    adam: &mut AdamState,
    samples: &[Sample],
    fold: &Fold,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    if let Some(&bad) = fold.train.iter().chain(&fold.test).find(|&&i| i >= samples.len()) {
        return Err(Error::Split(format!("fold refers to sample {bad} of {}", samples.len())));
    }
    let cfg = model.config.clone();
    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if fold.train.is_empty() {
        return Err(Error::Split("fold has no training samples".into()));
    }
    let full_gt = if cfg.dataset_correlation {
        let train: Vec<&Sample> = fold.train.iter().map(|&i| &samples[i]).collect();
        Some(dataset_correlation(&train)?)
    } else {
        None
    };

    for epoch in 1..=cfg.epochs {
        let mut order = fold.train.clone();
        order.shuffle(&mut derived_rng(cfg.seed, 1000 + epoch as u64));
        let (mut loss, mut kld, mut cc) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let r = model.batch(&model.store, &batch, None, full_gt.as_ref(), true)?;
            if !r.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss: r.loss,
                });
            }
            let w = chunk.len() as f64;
            loss += w * r.loss;
            kld += w * r.kld;
            cc += w * r.cc;
            model.store.set_grads(r.grads.as_ref().expect("gradients requested"));
            adam_step(&mut model.store, adam, cfg.learning_rate)?;
        }
        let n = fold.train.len() as f64;
        let test = if fold.test.is_empty() {
            None
        } else {
            Some(evaluate_indices(model, samples, &fold.test)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss / n,
            train_kld: kld / n,
            train_cc: cc / n,
            test,
        };
        info!(
            "epoch {epoch}: loss {:.6} (kl {:.6}, cc {:.6})",
            record.train_loss, record.train_kld, record.train_cc
        );
        on_epoch(&record);
        history.records.push(record);
    }
    Ok(history)
}

/// Finite-difference check of the full batch objective with Sinkhorn plans held fixed.
///
/// Each loss term is measured relative to its value at the starting point.
/// The shift is constant, so derivatives are unchanged, but the small KL
/// differences are no longer rounded against the much larger CC term.
pub fn check_gradients(model: &HeloModel, samples: &[&Sample], eps: f64) -> Result<GradCheckReport> {
    let r = model.batch(&model.store, samples, None, None, true)?;
    let (plans, kld0, cc0) = (r.plans, r.kld, r.cc);
    let lambda = model.config.lambda_cc;
    let mut store = model.store.clone();
    store.set_grads(r.grads.as_ref().expect("gradients requested"));
    grad_check(
        |s| match model.batch(s, samples, Some(&plans), None, false) {
            Ok(r) => (r.kld - kld0) + lambda * (r.cc - cc0),
            Err(_) => f64::NAN,
        },
        &mut store,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_subject_dependent, DatasetSchema};

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 5,
            ..TrainConfig::gradcheck()
        }
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let s = DatasetSchema::dmer();
        let data = generate_synthetic(&s, 2, 5, 0).unwrap();
        let plan = split_subject_dependent(&data, 0.8, 0).unwrap();
        let mut model = HeloModel::new(&s, &TrainConfig { epochs: 0, ..tiny() }).unwrap();
        let before = model.store.clone();
        let mut adam = AdamState::new(&model.store);
        let h = train(&mut model, &mut adam, &data, &plan.folds[0]).unwrap();
        assert!(h.records.is_empty());
        for (a, b) in before.iter().zip(model.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn training_is_deterministic_and_recorded() {
        let s = DatasetSchema::dmer();
        let data = generate_synthetic(&s, 2, 6, 1).unwrap();
        let plan = split_subject_dependent(&data, 0.8, 1).unwrap();
        let run = || {
            let mut model = HeloModel::new(&s, &tiny()).unwrap();
            let mut adam = AdamState::new(&model.store);
            train(&mut model, &mut adam, &data, &plan.folds[0]).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.records.len(), 3);
        let csv = a.to_csv();
        assert!(csv.starts_with("epoch,loss,cheb,clark,canb,kl,cos,inter\n"));
        for r in &a.records {
            assert!(r.train_loss.is_finite());
            assert!((r.train_loss - (r.train_kld + r.train_cc)).abs() < 1e-12);
            assert!(r.test.is_some());
        }
    }

    #[test]
    fn without_lcdca_loss_is_pure_kld() {
        let s = DatasetSchema::dmer();
        let data = generate_synthetic(&s, 2, 6, 2).unwrap();
        let plan = split_subject_dependent(&data, 0.8, 2).unwrap();
        let ab = AblationSpec { disable_lcdca: true, ..Default::default() };
        let mut model = build_ablated(&s, &tiny(), &ab).unwrap();
        let mut adam = AdamState::new(&model.store);
        let h = train(&mut model, &mut adam, &data, &plan.folds[0]).unwrap();
        for r in &h.records {
            assert_eq!(r.train_cc, 0.0);
            assert!((r.train_loss - r.train_kld).abs() <= 1e-12);
        }
    }

    #[test]
    fn full_model_equals_all_false_ablation() {
        let s = DatasetSchema::dmer();
        let data = generate_synthetic(&s, 2, 6, 3).unwrap();
        let plan = split_subject_dependent(&data, 0.8, 3).unwrap();
        let mut a = HeloModel::new(&s, &tiny()).unwrap();
        let mut b = build_ablated(&s, &tiny(), &AblationSpec::default()).unwrap();
        let (mut oa, mut ob) = (AdamState::new(&a.store), AdamState::new(&b.store));
        let ha = train(&mut a, &mut oa, &data, &plan.folds[0]).unwrap();
        let hb = train(&mut b, &mut ob, &data, &plan.folds[0]).unwrap();
        assert_eq!(ha, hb);
    }

    #[test]
    fn full_pipeline_gradient_check() {
        let s = DatasetSchema::dmer();
        let data = generate_synthetic(&s, 2, 2, 4).unwrap();
        let batch: Vec<&Sample> = data.iter().collect();
        let model = HeloModel::new(&s, &TrainConfig { seed: 4, ..TrainConfig::gradcheck() }).unwrap();
        let r = check_gradients(&model, &batch, 1e-4).unwrap();
        assert!(r.max_relative_error <= 1e-4, "{r:?}");
    }
}
