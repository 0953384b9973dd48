use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DatasetSchema;
use crate::error::{Error, Result};
use crate::labels::EmotionDistribution;

/// One trial of one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub subject: u32,
    pub trial: u32,
    /// Flat feature vector per modality name.
    pub features: BTreeMap<String, Vec<f64>>,
    pub label: EmotionDistribution,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    subject: u32,
    trial: u32,
    features: BTreeMap<String, Vec<f64>>,
    label: Vec<f64>,
}

impl Sample {
    /// Checks modality names, vector lengths and the label against `schema`.
    pub fn validate(&self, schema: &DatasetSchema) -> Result<()> {
        for m in &schema.modalities {
            match self.features.get(&m.name) {
                None => return Err(Error::Validation(format!("missing modality {:?}", m.name))),
                Some(v) if v.len() != m.dim => {
                    return Err(Error::Validation(format!(
                        "modality {:?} has {} features, expected {}",
                        m.name,
                        v.len(),
                        m.dim
                    )))
                }
                Some(v) if v.iter().any(|x| !x.is_finite()) => {
                    return Err(Error::Validation(format!("modality {:?} has a non-finite feature", m.name)))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.features.keys().find(|k| schema.modality(k).is_none()) {
            return Err(Error::Validation(format!("unknown modality {extra:?}")));
        }
        if self.label.len() != schema.label_count() {
            return Err(Error::Validation(format!(
                "label has {} entries, expected {}",
                self.label.len(),
                schema.label_count()
            )));
        }
        Ok(())
    }
}

/// Parses JSON-lines text. Blank lines are skipped; line numbers start at 1.
pub fn parse_dataset(reader: impl BufRead, schema: &DatasetSchema) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let label = EmotionDistribution::new(rec.label).map_err(|e| parse_err(format!("label: {e}")))?;
        let sample = Sample {
            subject: rec.subject,
            trial: rec.trial,
            features: rec.features,
            label,
        };
        sample.validate(schema).map_err(|e| match e {
            Error::Validation(m) => parse_err(m),
            other => other,
        })?;
        out.push(sample);
    }
    Ok(out)
}

/// Loads and validates a JSON-lines dataset file.
pub fn load_dataset(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Vec<Sample>> {
    parse_dataset(BufReader::new(std::fs::File::open(path)?), schema)
}

pub fn write_dataset(writer: impl Write, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    write_dataset(std::fs::File::create(path)?, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    #[test]
    fn round_trip_is_exact() {
        let schema = DatasetSchema::dmer();
        let samples = generate_synthetic(&schema, 2, 3, 5).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &samples).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 6);
        let back = parse_dataset(&buf[..], &schema).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn empty_input_is_an_empty_dataset() {
        assert!(parse_dataset(&b""[..], &DatasetSchema::dmer()).unwrap().is_empty());
        assert!(parse_dataset(&b"\n  \n"[..], &DatasetSchema::dmer()).unwrap().is_empty());
    }

    fn record_with(schema: &DatasetSchema, edit: impl FnOnce(&mut serde_json::Value)) -> String {
        let s = &generate_synthetic(schema, 1, 1, 1).unwrap()[0];
        let mut v = serde_json::to_value(s).unwrap();
        edit(&mut v);
        v.to_string()
    }

    #[test]
    fn errors_name_line_and_field() {
        let schema = DatasetSchema::dmer();
        let good = record_with(&schema, |_| {});
        let short = record_with(&schema, |v| {
            v["features"]["eeg"].as_array_mut().unwrap().pop();
        });
        let text = format!("{good}\n{short}\n");
        let err = parse_dataset(text.as_bytes(), &schema).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{msg}");
        assert!(msg.contains("\"eeg\"") && msg.contains("89") && msg.contains("expected 90"), "{msg}");

        let missing = record_with(&schema, |v| {
            v["features"].as_object_mut().unwrap().remove("gsr");
        });
        let msg = parse_dataset(missing.as_bytes(), &schema).unwrap_err().to_string();
        assert!(msg.contains("line 1") && msg.contains("gsr"), "{msg}");

        let bad_label = record_with(&schema, |v| v["label"][0] = serde_json::json!(5.0));
        let msg = parse_dataset(bad_label.as_bytes(), &schema).unwrap_err().to_string();
        assert!(msg.contains("label"), "{msg}");

        let garbage = "{\"subject\": 1";
        assert!(matches!(parse_dataset(garbage.as_bytes(), &schema), Err(Error::Parse { line: 1, .. })));
    }
}
