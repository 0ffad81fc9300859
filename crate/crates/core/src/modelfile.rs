//! Model files in TOML or JSON.
//!
//! ```toml
//! env_dim = 2
//! C = [[-0.4, 0.1], [0.1, -0.1]]
//!
//! [[classes]]
//! D = [[0.3, 0.0], [0.0, 0.0]]
//! batch = { alpha = [1.0], P = [[0.0]] }
//! service = { kind = "deterministic", params = { value = 1.0 } }
//! ```
//!
//! A class may give `D_seq = [D(1), D(2), ...]` instead of `D` and `batch`;
//! such models are accepted by the workload analysis only.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mat_from_rows, Mat, Row};
use crate::model::{ArrivalClass, ArrivalModel, PhBatch, ServiceLaw};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub alpha: Vec<f64>,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<BatchSpec>,
    #[serde(rename = "D_seq", default, skip_serializing_if = "Option::is_none")]
    pub d_seq: Option<Vec<Vec<Vec<f64>>>>,
    pub service: ServiceLaw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub env_dim: usize,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    pub classes: Vec<ClassSpec>,
}

impl ModelFile {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |message: String| Error::ModelFile {
            path: origin.to_string(),
            message,
        };
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| err(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| err(e.to_string()))
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ModelFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model files always serialize")
    }

    /// Builds the arrival model and the per-class service laws.
    pub fn build(&self) -> Result<(ArrivalModel, Vec<ServiceLaw>)> {
        let c = mat_from_rows(&self.c)?;
        if c.nrows() != self.env_dim {
            return Err(Error::Dimension(format!(
                "env_dim is {} but C has {} rows",
                self.env_dim,
                c.nrows()
            )));
        }
        let mut classes = Vec::new();
        let mut services = Vec::new();
        for (k, spec) in self.classes.iter().enumerate() {
            let class = match (&spec.d, &spec.batch, &spec.d_seq) {
                (Some(d), batch, None) => {
                    let batch = match batch {
                        Some(b) => PhBatch::new(Row::from_row_slice(&b.alpha), mat_from_rows(&b.p)?)?,
                        None => PhBatch::single(),
                    };
                    ArrivalClass::phase_type(mat_from_rows(d)?, batch)
                }
                (None, None, Some(seq)) => {
                    let mats = seq.iter().map(|m| mat_from_rows(m)).collect::<Result<Vec<Mat>>>()?;
                    ArrivalClass::sequence(mats)?
                }
                _ => {
                    return Err(Error::Dimension(format!(
                        "class {} needs either D (with optional batch) or D_seq",
                        k + 1
                    )))
                }
            };
            classes.push(class);
            services.push(spec.service.clone());
        }
        Ok((ArrivalModel::new(c, classes)?, services))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"
env_dim = 1
C = [[-0.5]]

[[classes]]
D = [[0.5]]
service = { kind = "exponential", params = { rate = 1.0 } }
"#;

    #[test]
    fn toml_and_json_agree() {
        let a = ModelFile::parse(TEXT, "inline").unwrap();
        let json = serde_json::to_string(&a).unwrap();
        let b = ModelFile::parse(&json, "inline").unwrap();
        assert_eq!(a, b);
        let (model, services) = a.build().unwrap();
        assert_eq!(model.env_dim(), 1);
        assert!((services[0].mean() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sequence_classes_fail_the_joint_requirement() {
        let text = r#"
env_dim = 1
C = [[-0.5]]

[[classes]]
D_seq = [[[0.25]], [[0.25]]]
service = { kind = "deterministic", params = { value = 0.5 } }
"#;
        let (model, _) = ModelFile::parse(text, "inline").unwrap().build().unwrap();
        assert!(model.ph_batches().is_err());
    }

    #[test]
    fn broken_text_names_the_origin() {
        let e = ModelFile::parse("env_dim = ", "m.toml").unwrap_err();
        assert!(e.to_string().contains("m.toml"));
    }
}
