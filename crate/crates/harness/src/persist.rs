//! Calibrator documents.
//!
//! A single calibrator is stored as
//! `{"version", "m", "parametrization", "W", "b", "rate"?, "metadata"}` with
//! `W` holding the stored weights row-major (m*m entries for dense, m for
//! diagonal, one inverse temperature for temperature). An ensemble is
//! `{"version", "entries": [...], "unconditioned": ...}` whose entries are
//! single-calibrator documents carrying a `rate`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use misscal_core::calib::{CalibratorParams, Parametrization};
use misscal_core::fit::{Calibrator, CalibratorEnsemble, EnsembleEntry};

use crate::error::{HarnessError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamsDoc {
    version: u32,
    m: usize,
    parametrization: Parametrization,
    #[serde(rename = "W")]
    weights: Vec<f64>,
    b: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rate: Option<f64>,
    metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EnsembleDoc {
    version: u32,
    entries: Vec<ParamsDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unconditioned: Option<ParamsDoc>,
}

impl ParamsDoc {
    fn from_params(p: &CalibratorParams, rate: Option<f64>, metadata: &Metadata) -> Self {
        Self {
            version: FORMAT_VERSION,
            m: p.m(),
            parametrization: p.kind(),
            weights: p.weights().to_vec(),
            b: p.bias().to_vec(),
            rate,
            metadata: metadata.clone(),
        }
    }

    fn into_params(self, context: &str) -> Result<CalibratorParams> {
        check_version(self.version)?;
        CalibratorParams::new(self.m, self.parametrization, self.weights, self.b)
            .map_err(|e| HarnessError::Schema(format!("{context}: {e}")))
    }
}

fn check_version(version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(HarnessError::Schema(format!(
            "unsupported version {version}"
        )));
    }
    Ok(())
}

/// Serializes a calibrator to its JSON document.
pub fn calibrator_to_json(calibrator: &Calibrator, metadata: &Metadata) -> String {
    let text = match calibrator {
        Calibrator::Single(p) => {
            serde_json::to_string_pretty(&ParamsDoc::from_params(p, None, metadata))
        }
        Calibrator::Ensemble(e) => serde_json::to_string_pretty(&EnsembleDoc {
            version: FORMAT_VERSION,
            entries: e
                .entries()
                .iter()
                .map(|en| ParamsDoc::from_params(&en.params, Some(en.rate), metadata))
                .collect(),
            unconditioned: e
                .unconditioned()
                .map(|p| ParamsDoc::from_params(p, None, metadata)),
        }),
    };
    text.expect("calibrator documents serialize")
}

/// Parses a calibrator document and validates every parameter invariant.
pub fn calibrator_from_json(text: &str) -> Result<Calibrator> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| HarnessError::Schema(format!("not JSON: {e}")))?;
    let schema = |e: serde_json::Error| HarnessError::Schema(e.to_string());
    if value.get("entries").is_some() {
        let doc: EnsembleDoc = serde_json::from_value(value).map_err(schema)?;
        check_version(doc.version)?;
        let mut entries = Vec::with_capacity(doc.entries.len());
        for (i, entry) in doc.entries.into_iter().enumerate() {
            let rate = entry.rate.ok_or_else(|| {
                HarnessError::Schema(format!("entries[{i}]: missing field `rate`"))
            })?;
            entries.push(EnsembleEntry {
                rate,
                params: entry.into_params(&format!("entries[{i}]"))?,
            });
        }
        let unconditioned = doc
            .unconditioned
            .map(|u| u.into_params("unconditioned"))
            .transpose()?;
        let ensemble = CalibratorEnsemble::new(entries, unconditioned)
            .map_err(|e| HarnessError::Schema(e.to_string()))?;
        Ok(Calibrator::Ensemble(ensemble))
    } else {
        let doc: ParamsDoc = serde_json::from_value(value).map_err(schema)?;
        Ok(Calibrator::Single(doc.into_params("calibrator")?))
    }
}

pub fn save_calibrator(path: &Path, calibrator: &Calibrator, metadata: &Metadata) -> Result<()> {
    std::fs::write(path, calibrator_to_json(calibrator, metadata) + "\n")
        .map_err(|e| HarnessError::io(path, e))
}

pub fn load_calibrator(path: &Path) -> Result<Calibrator> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    calibrator_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> Metadata {
        Metadata {
            seed: 7,
            created: None,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn single_round_trip_is_exact() {
        let w = vec![
            0.1,
            1.0 / 3.0,
            -2.5e-17,
            1e300,
            0.7,
            -0.0,
            3.0,
            2.0,
            f64::MIN_POSITIVE,
        ];
        let p = CalibratorParams::dense(3, w, vec![0.2, -1.0 / 7.0, 5.0]).unwrap();
        let back =
            calibrator_from_json(&calibrator_to_json(&Calibrator::Single(p.clone()), &meta()))
                .unwrap();
        match back {
            Calibrator::Single(q) => {
                for (a, b) in p.weights().iter().zip(q.weights()) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
                assert_eq!(p, q);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_bias_is_named() {
        let doc = r#"{"version":1,"m":2,"parametrization":"dense","W":[1,0,0,1],"metadata":{"seed":0,"config_hash":""}}"#;
        let err = calibrator_from_json(doc).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");
    }

    #[test]
    fn short_dense_matrix_is_rejected() {
        let doc = r#"{"version":1,"m":2,"parametrization":"dense","W":[1,0,0],"b":[0,0],"metadata":{"seed":0,"config_hash":""}}"#;
        assert!(matches!(
            calibrator_from_json(doc),
            Err(HarnessError::Schema(_))
        ));
    }

    #[test]
    fn ensemble_entries_need_rates() {
        let doc = r#"{"version":1,"entries":[{"version":1,"m":2,"parametrization":"temperature","W":[1],"b":[0,0],"metadata":{"seed":0,"config_hash":""}}]}"#;
        let err = calibrator_from_json(doc).unwrap_err().to_string();
        assert!(err.contains("rate"), "{err}");
    }
}
