use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_FORMAT_VERSION: u32 = 1;

/// The ten PANAS emotions used as label classes.
pub const PANAS_LABELS: [&str; 10] = [
    "inspired",
    "alert",
    "excited",
    "enthusiastic",
    "determined",
    "afraid",
    "upset",
    "nervous",
    "scared",
    "distressed",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityGroup {
    Physiological,
    Behavioral,
}

/// One input modality: a flat feature vector viewed as `rows x cols` raw tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
    pub group: ModalityGroup,
    /// Raw token grid; `rows * cols == dim`.
    pub layout: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub format_version: u32,
    pub name: String,
    pub modalities: Vec<ModalitySpec>,
    pub labels: Vec<String>,
}

fn modality(name: &str, group: ModalityGroup, rows: usize, cols: usize) -> ModalitySpec {
    ModalitySpec {
        name: name.to_string(),
        dim: rows * cols,
        group,
        layout: [rows, cols],
    }
}

impl DatasetSchema {
    /// EEG 90, GSR 28, PPG 27 and video 768 features.
    pub fn dmer() -> Self {
        use ModalityGroup::*;
        DatasetSchema {
            format_version: SCHEMA_FORMAT_VERSION,
            name: "dmer".into(),
            modalities: vec![
                modality("eeg", Physiological, 6, 15),
                modality("gsr", Physiological, 4, 7),
                modality("ppg", Physiological, 3, 9),
                modality("video", Behavioral, 6, 128),
            ],
            labels: PANAS_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// ECG 73, EDA 4, EMG 14 and ACC 12 features.
    pub fn wesad() -> Self {
        use ModalityGroup::*;
        DatasetSchema {
            format_version: SCHEMA_FORMAT_VERSION,
            name: "wesad".into(),
            modalities: vec![
                modality("ecg", Physiological, 1, 73),
                modality("eda", Physiological, 2, 2),
                modality("emg", Physiological, 2, 7),
                modality("acc", Behavioral, 3, 4),
            ],
            labels: PANAS_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "dmer" => Ok(Self::dmer()),
            "wesad" => Ok(Self::wesad()),
            other => Err(Error::Config(format!("unknown schema {other:?}, expected dmer or wesad"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != SCHEMA_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "schema format_version {} is not supported",
                self.format_version
            )));
        }
        if self.labels.is_empty() {
            return Err(Error::Validation("schema has no labels".into()));
        }
        let mut names = BTreeSet::new();
        for m in &self.modalities {
            if !names.insert(m.name.as_str()) {
                return Err(Error::Validation(format!("modality {:?} listed twice", m.name)));
            }
            if m.dim == 0 || m.layout[0] * m.layout[1] != m.dim {
                return Err(Error::Validation(format!(
                    "modality {:?}: layout {}x{} does not cover {} features",
                    m.name, m.layout[0], m.layout[1], m.dim
                )));
            }
        }
        let behavioral = self.modalities.iter().filter(|m| m.group == ModalityGroup::Behavioral).count();
        if behavioral != 1 {
            return Err(Error::Validation(format!("schema needs exactly one behavioral modality, found {behavioral}")));
        }
        if self.physiological().next().is_none() {
            return Err(Error::Validation("schema has no physiological modality".into()));
        }
        Ok(())
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    pub fn modality(&self, name: &str) -> Option<&ModalitySpec> {
        self.modalities.iter().find(|m| m.name == name)
    }

    /// Physiological modalities in schema order.
    pub fn physiological(&self) -> impl Iterator<Item = &ModalitySpec> {
        self.modalities.iter().filter(|m| m.group == ModalityGroup::Physiological)
    }

    pub fn behavioral(&self) -> &ModalitySpec {
        self.modalities
            .iter()
            .find(|m| m.group == ModalityGroup::Behavioral)
            .expect("validated schema has a behavioral modality")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let schema: DatasetSchema = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_dimensions() {
        let d = DatasetSchema::dmer();
        d.validate().unwrap();
        let dims: Vec<usize> = d.modalities.iter().map(|m| m.dim).collect();
        assert_eq!(dims, vec![90, 28, 27, 768]);
        assert_eq!(dims.iter().sum::<usize>(), 913);
        assert_eq!(d.label_count(), 10);
        assert_eq!(d.behavioral().name, "video");

        let w = DatasetSchema::wesad();
        w.validate().unwrap();
        assert_eq!(w.modality("ecg").unwrap().dim, 73);
        assert_eq!(w.modality("eda").unwrap().dim, 4);
        assert_eq!(w.modality("emg").unwrap().dim, 14);
        assert_eq!(w.behavioral().dim, 12);
    }

    #[test]
    fn invalid_schemas() {
        let mut s = DatasetSchema::dmer();
        s.modalities[3].group = ModalityGroup::Physiological;
        assert!(s.validate().is_err());
        let mut s = DatasetSchema::dmer();
        s.modalities[0].layout = [5, 15];
        assert!(s.validate().is_err());
        let mut s = DatasetSchema::dmer();
        s.format_version = 2;
        assert!(s.validate().is_err());
        assert!(DatasetSchema::builtin("deap").is_err());
    }

    #[test]
    fn schema_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("schema.json");
        DatasetSchema::wesad().save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"format_version\": 1"));
        assert_eq!(DatasetSchema::load(&p).unwrap(), DatasetSchema::wesad());
    }
}
