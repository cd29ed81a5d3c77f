//! Stochastic transformation defenses, adversarial attacks, and classifiers
//! over the distribution of softmax outputs of randomly transformed images.

pub mod attacks;
pub mod classifiers;
pub mod cnn;
pub mod container;
pub mod data;
pub mod error;
pub mod experiment;
pub mod kde;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod transforms;

pub use attacks::{attack_pool, boundary_attack, run_attack, AdversarialSet, AttackConfig, AttackResult, BoundaryConfig, CwConfig, DecisionModel};
pub use classifiers::{majority_vote, predict_dc, train_dc, train_lat, DcModel, DcTrainConfig, MlpConfig, RfConfig};
pub use cnn::{predict, train_cnn, CnnModel, Prediction, TrainConfig};
pub use data::{load_idx, synthetic_blobs, Dataset};
pub use experiment::{boundary_eval, eval_pipeline, n_samples_sweep, vote_confusion, BoundaryReport, ConfusionTable, DefenseConfig, DefendedModel, EvalReport};
pub use error::{CheckpointError, Error, IdxError, Result};
pub use kde::{build_distribution, collect_samples, KdeConfig, LabeledDistribution, SoftmaxDistribution, SoftmaxSampleSet};
pub use metrics::{centroid, dist_between, distance_curves, js_divergence, DistanceCurveReport, Measure, TransformFamily};
pub use net::{Layer, NetArch, NetParams};
pub use tensor::{argmax, Image, Tensor};
pub use transforms::TransformSpec;
