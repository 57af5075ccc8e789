pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod hcg;
pub mod mdi;
pub mod report;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Kernel3x3, Matrix};
pub use fusion::WeightingStrategy;
pub use mdi::{DominanceScores, GroundTruthMask, Modality};
pub use report::{ExperimentManifest, RunKind};
pub use sim::{EvalScores, ExperimentReport, GeneratorConfig, RunConfig, StepRecord, SuiteSpec, SyntheticSample};
