//! Membership-inference auditing: small classifiers, counted query oracles,
//! confidence and label-only attacks, and a config-driven experiment harness.

pub mod attacks;
pub mod boundary;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod outlier;

pub use attacks::{AttackClassifier, DecisionThreshold, MembershipPrediction, PerturbationBits};
pub use boundary::{DistanceEstimate, DistanceMethod, FeatureBox, HsjaConfig, NoiseRobustnessConfig};
pub use data::{AugmentationSpec, Dataset, ExampleRecord, FeatureKind, FeatureSchema, NoiseKind, PointId};
pub use error::{Error, Result};
pub use harness::{EvaluationReport, ExperimentConfig, MetricSet, Stage, StageError};
pub use model::{Architecture, Classifier, TrainConfig};
pub use numerics::{ConfidenceVector, Matrix, RngStream};
pub use oracle::{ConfidenceOracle, DefenseWrapperSpec, LabelOracle};
pub use outlier::{FeatureEmbedding, OutlierParams};
