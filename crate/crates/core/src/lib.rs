//! Distilling the structure of a frozen vision-language teacher into a
//! small vision-only student.
//!
//! Features are `f64` in memory and rows are compared through cosine
//! similarity of unit vectors. The teacher is consumed only through
//! [`teacher::TeacherProvider`], backed either by exported feature caches or
//! by a seeded synthetic teacher for desk-scale experiments.

pub mod config;
pub mod dataset;
pub mod enrich;
pub mod error;
pub mod experiment;
pub mod features;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod persist;
pub mod student;
pub mod teacher;
pub mod trainer;

pub use config::LossConfig;
pub use error::{Error, Result};
pub use features::{classify, cosine, normalize, predict, squared_l2, FeatureKind, FeatureMatrix, Matrix};
pub use labels::LabelSpace;
pub use student::{StudentModel, StudentSpec};
pub use teacher::TeacherProvider;
pub use trainer::TrainConfig;
