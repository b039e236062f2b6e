//! Gradient boosting mapping.
//!
//! A regression or binary classification model built as a sum of boosted
//! softplus perceptrons `f_j(x) = a_j + b_j * softplus(w_j . x)`. The outputs
//! of the individual perceptrons form a supervised embedding of the input
//! space, whose Manhattan distance ignores directions that do not matter for
//! the prediction task. The same model gives local linear explanations (its
//! gradient) and an out-of-distribution indicator (disagreement between the
//! model and a k-nearest-neighbor smoother in embedding space).
//!
//! ```
//! use gbmap::{boosting::{fit, FitConfig}, data::{gen_synth_cos, TaskKind}};
//!
//! let data = gen_synth_cos(400, 4, 5.0, 7, TaskKind::Regression).unwrap();
//! let config = FitConfig { m: 5, ..FitConfig::new(TaskKind::Regression) };
//! let model = fit(&data, &config, Default::default()).unwrap();
//! let x = data.x.row(0);
//! let coords = model.embed(x).unwrap();
//! assert_eq!(coords.len(), 5);
//! let total: f64 = coords.iter().sum();
//! assert!((total - model.predict(x).unwrap()).abs() < 1e-12);
//! ```

pub mod boosting;
pub mod data;
pub mod drift;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod model;
pub mod neighbors;
pub mod objective;
pub mod optimizer;
pub mod persist;

pub use boosting::{fit, FitConfig, InitialModel, WeakLearner};
pub use data::{Dataset, TaskKind};
pub use error::{GbmapError, Result};
pub use matrix::Matrix;
pub use model::{Embedding, GbmapModel};
