use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_ablated, AblationSpec, AdamState, HeloModel, TrainConfig};
use crate::data::{DatasetSchema, Fold, SplitMode};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedMatrix {
    pub name: String,
    pub value: Matrix,
}

/// The split a checkpoint was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub mode: SplitMode,
    pub seed: u64,
    pub fold: usize,
    pub held_out_subject: Option<u32>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitInfo {
    pub fn new(mode: SplitMode, seed: u64, index: usize, fold: &Fold) -> Self {
        SplitInfo {
            mode,
            seed,
            fold: index,
            held_out_subject: fold.held_out_subject,
            train: fold.train.clone(),
            test: fold.test.clone(),
        }
    }

    pub fn to_fold(&self) -> Fold {
        Fold {
            train: self.train.clone(),
            test: self.test.clone(),
            held_out_subject: self.held_out_subject,
        }
    }
}

/// Parameters, optimizer state and provenance of a trained model, stored as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub ablation: AblationSpec,
    pub schema: DatasetSchema,
    pub split: Option<SplitInfo>,
    pub params: Vec<NamedMatrix>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn capture(model: &HeloModel, adam: Option<&AdamState>, split: Option<SplitInfo>) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config_hash: model.config.hash(),
            config: model.config.clone(),
            ablation: model.ablation.clone(),
            schema: model.schema.clone(),
            split,
            params: model
                .store
                .iter()
                .map(|p| NamedMatrix {
                    name: p.name.clone(),
                    value: p.value.clone(),
                })
                .collect(),
            adam: adam.cloned(),
        }
    }

    /// Rebuilds the model and copies the stored values into it.
    pub fn restore(&self) -> Result<(HeloModel, Option<AdamState>)> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "checkpoint format_version {} is not supported",
                self.format_version
            )));
        }
        if self.config.hash() != self.config_hash {
            return Err(Error::Validation("checkpoint config hash does not match its config".into()));
        }
        let mut model = build_ablated(&self.schema, &self.config, &self.ablation)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (p, saved) in model.store.iter_mut().zip(&self.params) {
            if p.name != saved.name || p.value.shape() != saved.value.shape() {
                return Err(Error::Validation(format!(
                    "checkpoint parameter {:?} {:?} does not match model parameter {:?} {:?}",
                    saved.name,
                    saved.value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = saved.value.clone();
        }
        Ok((model, self.adam.clone()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_subject_dependent};
    use crate::training::train;

    #[test]
    fn round_trip_restores_predictions() {
        let s = DatasetSchema::wesad();
        let data = generate_synthetic(&s, 2, 5, 0).unwrap();
        let plan = split_subject_dependent(&data, 0.8, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::gradcheck()
        };
        let mut model = HeloModel::new(&s, &cfg).unwrap();
        let mut adam = AdamState::new(&model.store);
        train(&mut model, &mut adam, &data, &plan.folds[0]).unwrap();
        let ck = Checkpoint::capture(&model, Some(&adam), Some(SplitInfo::new(plan.mode, 0, 0, &plan.folds[0])));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        let (restored, adam2) = back.restore().unwrap();
        assert_eq!(adam2.unwrap(), adam);
        assert_eq!(restored.predict(&data[0]).unwrap(), model.predict(&data[0]).unwrap());

        let mut tampered = ck.clone();
        tampered.config.epochs = 99;
        assert!(tampered.restore().is_err());
        let mut tampered = ck;
        tampered.params.pop();
        assert!(tampered.restore().is_err());
    }
}
