pub mod classifiers;
pub mod dataio;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod numerics;
pub mod training;

pub use classifiers::{ClassifierBank, ClassifierKind};
pub use dataio::{ClassReferenceSet, Dataset, DatasetManifest, TensorArchive};
pub use encoders::{GeneratorConfig, GeneratorParams, LanguageConfig, LanguageEncoder};
pub use error::{Error, Result};
pub use fusion::{Metric, PreferenceWeights};
pub use numerics::{Scalar, Tensor};
pub use training::{EpisodeSpec, TrainConfig};
