//! JSON model files.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! loaded model predicts bit-for-bit like the saved one.

use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::boosting::{FitConfig, InitialModel, WeakLearner};
use crate::data::{PreprocessStats, TaskKind};
use crate::error::{GbmapError, Result};
use crate::model::GbmapModel;
use crate::objective::Activation;

pub const FORMAT_VERSION: u32 = 1;

/// Serializable form of the initial model. External predictors cannot be stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitialModelSpec {
    Zero,
    Linear { intercept: f64, coefficients: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    /// Seconds since the Unix epoch at save time.
    pub timestamp: u64,
    pub config: Option<FitConfig>,
}

impl Provenance {
    pub fn now(config: Option<&FitConfig>) -> Self {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Provenance { seed: config.map(|c| c.seed), timestamp, config: config.cloned() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub task: TaskKind,
    pub beta: f64,
    #[serde(default)]
    pub activation: Activation,
    pub p: usize,
    pub f0: InitialModelSpec,
    pub learners: Vec<WeakLearner>,
    pub preprocessing: Option<PreprocessStats>,
    #[serde(default)]
    pub training_loss: Vec<f64>,
    pub provenance: Provenance,
}

impl ModelFile {
    pub fn from_model(model: &GbmapModel, provenance: Provenance) -> Result<Self> {
        let f0 = match &model.f0 {
            InitialModel::Zero => InitialModelSpec::Zero,
            InitialModel::Linear { intercept, coefficients } => {
                InitialModelSpec::Linear { intercept: *intercept, coefficients: coefficients.clone() }
            }
            InitialModel::External(_) | InitialModel::ExternalProbability(_) => {
                return Err(GbmapError::InvalidState("models with an external f0 cannot be saved".into()))
            }
        };
        let file = ModelFile {
            format_version: FORMAT_VERSION,
            task: model.task,
            beta: model.beta,
            activation: model.activation,
            p: model.p,
            f0,
            learners: model.learners.clone(),
            preprocessing: model.preprocessing.clone(),
            training_loss: model.training_loss.clone(),
            provenance,
        };
        file.validate()?;
        Ok(file)
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(GbmapError::Data(format!(
                "unsupported model format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(GbmapError::Data("model beta must be positive and finite".into()));
        }
        for l in &self.learners {
            l.validate()?;
            if l.w.len() != self.p {
                return Err(GbmapError::dim_mismatch("learner weights", self.p, l.w.len()));
            }
        }
        if let InitialModelSpec::Linear { intercept, coefficients } = &self.f0 {
            if coefficients.len() != self.p {
                return Err(GbmapError::dim_mismatch("initial model coefficients", self.p, coefficients.len()));
            }
            if !intercept.is_finite() || !coefficients.iter().all(|c| c.is_finite()) {
                return Err(GbmapError::Data("initial model has non-finite coefficients".into()));
            }
        }
        if let Some(stats) = &self.preprocessing {
            if stats.output_dim() != self.p {
                return Err(GbmapError::dim_mismatch("preprocessing output", self.p, stats.output_dim()));
            }
        }
        Ok(())
    }

    pub fn into_model(self) -> Result<GbmapModel> {
        self.validate()?;
        let f0 = match self.f0 {
            InitialModelSpec::Zero => InitialModel::Zero,
            InitialModelSpec::Linear { intercept, coefficients } => InitialModel::Linear { intercept, coefficients },
        };
        Ok(GbmapModel {
            learners: self.learners,
            beta: self.beta,
            activation: self.activation,
            task: self.task,
            f0,
            preprocessing: self.preprocessing,
            p: self.p,
            training_loss: self.training_loss,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.validate()?;
        Ok(file)
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| GbmapError::Io(e.error))?;
    Ok(())
}

pub fn save_model(path: impl AsRef<Path>, model: &GbmapModel, provenance: Provenance) -> Result<()> {
    let file = ModelFile::from_model(model, provenance)?;
    write_atomic(path, file.to_json()?.as_bytes())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<GbmapModel> {
    load_model_file(path)?.into_model()
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<ModelFile> {
    ModelFile::from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::seeded_rng;
    use crate::model::tests::random_model;
    use proptest::prelude::*;
    use rand::Rng;
    use std::sync::Arc;

    fn fixed_provenance() -> Provenance {
        Provenance { seed: Some(3), timestamp: 0, config: Some(FitConfig::new(TaskKind::Regression)) }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn round_trip_predicts_identically(seed in any::<u64>(), m in 0usize..8, p in 1usize..6, linear in any::<bool>()) {
            let mut rng = seeded_rng(seed);
            let mut model = random_model(&mut rng, m, p, TaskKind::Regression);
            if linear {
                model.f0 = InitialModel::Linear {
                    intercept: rng.random_range(-1.0..1.0),
                    coefficients: (0..p).map(|_| rng.random_range(-1.0..1.0)).collect(),
                };
            }
            let text = ModelFile::from_model(&model, fixed_provenance()).unwrap().to_json().unwrap();
            let back = ModelFile::from_json(&text).unwrap().into_model().unwrap();
            for _ in 0..20 {
                let x: Vec<f64> = (0..p).map(|_| rng.random_range(-3.0..3.0)).collect();
                prop_assert_eq!(model.predict(&x).unwrap(), back.predict(&x).unwrap());
            }
            prop_assert_eq!(&model.learners, &back.learners);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = random_model(&mut seeded_rng(1), 4, 3, TaskKind::Classification);
        save_model(&path, &model, fixed_provenance()).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.task, TaskKind::Classification);
        assert_eq!(back.learners, model.learners);
        assert_eq!(back.beta.to_bits(), model.beta.to_bits());
    }

    #[test]
    fn rejects_bad_files() {
        let model = random_model(&mut seeded_rng(2), 2, 3, TaskKind::Regression);
        let file = ModelFile::from_model(&model, fixed_provenance()).unwrap();
        let mut wrong = file.clone();
        wrong.format_version = 99;
        assert!(ModelFile::from_json(&wrong.to_json().unwrap()).is_err());
        let mut wrong = file.clone();
        wrong.learners[0].w.pop();
        assert!(ModelFile::from_json(&wrong.to_json().unwrap()).is_err());
        assert!(ModelFile::from_json("{\"format_version\": 1}").is_err());
    }

    #[derive(Debug)]
    struct Constant;
    impl crate::boosting::BaseModel for Constant {
        fn predict(&self, _x: &[f64]) -> f64 {
            0.5
        }
    }

    #[test]
    fn external_f0_cannot_be_saved() {
        let mut model = random_model(&mut seeded_rng(2), 2, 3, TaskKind::Regression);
        model.f0 = InitialModel::External(Arc::new(Constant));
        assert!(matches!(ModelFile::from_model(&model, fixed_provenance()), Err(GbmapError::InvalidState(_))));
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second");
    }
}
