//! Training, inference and checkpointing for the base classifier.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, BlobSpec};
use crate::data::Dataset;
use crate::error::{CheckpointError, Error, Result};
use crate::net::{self, NetArch, NetParams};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{keyed_rng, Domain};
use crate::tensor::{argmax, Image};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SDDC";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    pub epochs: usize,
    /// Accuracy on the validation split at the end of training, in `[0, 1]`.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub arch: NetArch,
    pub params: NetParams<f32>,
    pub meta: ModelMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probs: Vec<f64>,
}

/// Options the generic fitter understands beyond [`TrainConfig`].
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct FitOptions {
    /// Stop when validation cross entropy has not improved for this many
    /// epochs, restoring the best parameters.
    pub patience: Option<usize>,
}

pub(crate) struct FitOutcome {
    pub params: NetParams<f32>,
    pub epochs_run: usize,
}

fn mean_loss(arch: &NetArch, params: &NetParams<f32>, inputs: &[&Image], labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        let logits = net::forward(arch, params, x)?;
        let probs: Vec<f64> = net::softmax(&logits).iter().map(|&p| p as f64).collect();
        total += net::cross_entropy(&probs, y)?;
    }
    Ok(total / inputs.len().max(1) as f64)
}

/// Minibatch training with cross entropy. Single-threaded and fully
/// determined by the seed.
pub(crate) fn fit(
    arch: &NetArch,
    inputs: &[&Image],
    labels: &[usize],
    validation: Option<(&[&Image], &[usize])>,
    cfg: &TrainConfig,
    opts: FitOptions,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= arch.classes) {
        return Err(Error::invalid(format!("label {bad} >= class count {}", arch.classes)));
    }
    if let Some(x) = inputs.iter().find(|x| x.shape() != arch.input) {
        return Err(Error::shape(arch.input, x.shape()));
    }
    let mut params = NetParams::<f32>::init(arch, &mut keyed_rng(Domain::Training, cfg.seed, 0, 0))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &params);
    let mut grad = NetParams::<f32>::zeros(arch)?;
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut best: Option<(f64, NetParams<f32>)> = None;
    let mut stale = 0;
    let mut epochs_run = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut keyed_rng(Domain::Training, cfg.seed, 1, epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.fill_zero();
            for &i in batch {
                let t = net::trace(arch, &params, inputs[i])?;
                let logits = t.logits();
                let probs = net::softmax(logits);
                epoch_loss += -((probs[labels[i]] as f64) + net::LOG_FLOOR).ln();
                let g = net::cross_entropy_grad(logits, labels[i]);
                t.backprop(arch, &params, &g, Some(&mut grad), false)?;
            }
            let scale = 1.0 / batch.len() as f32;
            grad.values_mut().for_each(|g| *g *= scale);
            opt.step(&mut params, &grad);
        }
        epochs_run = epoch + 1;
        if !epoch_loss.is_finite() || !params.is_finite() {
            return Err(Error::TrainingDiverged { epoch: epoch + 1 });
        }
        if let (Some(patience), Some((vx, vy))) = (opts.patience, validation) {
            let loss = mean_loss(arch, &params, vx, vy)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch: epoch + 1 });
            }
            match &best {
                Some((b, _)) if loss >= *b => {
                    stale += 1;
                    if stale >= patience {
                        break;
                    }
                }
                _ => {
                    best = Some((loss, params.clone()));
                    stale = 0;
                }
            }
        }
    }
    if let Some((_, p)) = best {
        params = p;
    }
    Ok(FitOutcome { params, epochs_run })
}

/// Trains the base CNN and records its validation accuracy.
pub fn train_cnn(train: &Dataset, val: &Dataset, arch: &NetArch, cfg: &TrainConfig) -> Result<CnnModel> {
    arch.validate()?;
    if train.classes > arch.classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, architecture {}",
            train.classes, arch.classes
        )));
    }
    let inputs: Vec<&Image> = train.images.iter().collect();
    let out = fit(arch, &inputs, &train.labels, None, cfg, FitOptions::default())?;
    let mut model = CnnModel {
        arch: arch.clone(),
        params: out.params,
        meta: ModelMeta {
            seed: cfg.seed,
            epochs: out.epochs_run,
            val_accuracy: None,
        },
    };
    if !val.is_empty() {
        model.meta.val_accuracy = Some(model.accuracy(val)?);
    }
    Ok(model)
}

/// Label and softmax probabilities; ties in the argmax go to the lowest class.
pub fn predict(model: &CnnModel, x: &Image) -> Result<Prediction> {
    let logits = net::forward(&model.arch, &model.params, x)?;
    let logits: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    let probs = net::softmax(&logits);
    Ok(Prediction {
        label: argmax(&probs),
        probs,
    })
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    kind: String,
    arch: NetArch,
    meta: ModelMeta,
}

pub(crate) fn param_blob_specs(arch: &NetArch) -> Result<Vec<BlobSpec>, CheckpointError> {
    let shapes = arch
        .param_shapes()
        .map_err(|e| CheckpointError::Descriptor(e.to_string()))?;
    Ok(arch
        .layers
        .iter()
        .zip(shapes)
        .enumerate()
        .flat_map(|(i, (layer, (w, b)))| {
            [
                BlobSpec::exact(format!("layer {i} ({}) weights", layer.name()), w),
                BlobSpec::exact(format!("layer {i} ({}) bias", layer.name()), b),
            ]
        })
        .collect())
}

pub(crate) fn param_blobs(params: &NetParams<f32>) -> Vec<&[f32]> {
    params
        .layers
        .iter()
        .flat_map(|l| [&l.weight[..], &l.bias[..]])
        .collect()
}

pub(crate) fn params_from_blobs(blobs: Vec<Vec<f32>>) -> NetParams<f32> {
    let mut it = blobs.into_iter();
    let mut layers = Vec::new();
    while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
        layers.push(net::LayerParams { weight, bias });
    }
    NetParams { layers }
}

pub(crate) fn parse_descriptor<D: for<'de> Deserialize<'de>>(text: &str) -> Result<D, CheckpointError> {
    serde_json::from_str(text).map_err(|e| CheckpointError::Descriptor(e.to_string()))
}

impl CnnModel {
    pub fn predict(&self, x: &Image) -> Result<Prediction> {
        predict(self, x)
    }

    pub fn logits(&self, x: &Image) -> Result<Vec<f32>> {
        net::forward(&self.arch, &self.params, x)
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    /// Fraction of `ds` classified correctly.
    pub fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        let correct = ds
            .images
            .par_iter()
            .zip(&ds.labels)
            .map(|(x, &y)| Ok(usize::from(self.predict(x)?.label == y)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<usize>();
        Ok(correct as f64 / ds.len() as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let desc = Descriptor {
            kind: "cnn".into(),
            arch: self.arch.clone(),
            meta: self.meta.clone(),
        };
        let text = serde_json::to_string(&desc).expect("descriptor serializes");
        container::encode(CHECKPOINT_MAGIC, &text, &param_blobs(&self.params))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut desc: Option<Descriptor> = None;
        let (_, blobs) = container::decode::<f32>(CHECKPOINT_MAGIC, bytes, |text| {
            let d: Descriptor = parse_descriptor(text)?;
            if d.kind != "cnn" {
                return Err(CheckpointError::Descriptor(format!(
                    "architecture tag {:?} is not a CNN checkpoint",
                    d.kind
                )));
            }
            let specs = param_blob_specs(&d.arch)?;
            desc = Some(d);
            Ok(specs)
        })?;
        let desc = desc.expect("layout callback ran");
        let model = CnnModel {
            params: params_from_blobs(blobs),
            arch: desc.arch,
            meta: desc.meta,
        };
        model.params.check(&model.arch)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::file(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;

    fn blob_model(seed: u64) -> (CnnModel, Dataset) {
        let ds = synthetic_blobs(400, 2, 2, 10.0, 3).unwrap();
        let (train, val, _) = ds.split([0.75, 0.25, 0.0], 1).unwrap();
        let arch = NetArch::mlp(2, &[8], 2).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-2,
            seed,
            ..Default::default()
        };
        (train_cnn(&train, &val, &arch, &cfg).unwrap(), val)
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let (model, val) = blob_model(4);
        assert!(model.meta.val_accuracy.unwrap() >= 0.99, "{:?}", model.meta);
        assert_eq!(model.accuracy(&val).unwrap(), model.meta.val_accuracy.unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let (a, _) = blob_model(9);
        let (b, _) = blob_model(9);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn constant_labels_predicted_everywhere() {
        let ds = synthetic_blobs(60, 3, 4, 3.0, 8).unwrap();
        let labels = vec![2; ds.len()];
        let ds = Dataset::new(ds.images, labels, 3).unwrap();
        let arch = NetArch::mlp(4, &[6], 3).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 5e-2,
            seed: 1,
            ..Default::default()
        };
        let model = train_cnn(&ds, &ds, &arch, &cfg).unwrap();
        assert_eq!(model.meta.val_accuracy, Some(1.0));
    }

    #[test]
    fn zero_model_predicts_class_zero_uniformly() {
        let arch = NetArch::lenet([28, 28, 1], 10).unwrap();
        let model = CnnModel {
            params: NetParams::zeros(&arch).unwrap(),
            arch,
            meta: ModelMeta::default(),
        };
        let p = model.predict(&Image::zeros(&[28, 28, 1])).unwrap();
        assert_eq!(p.label, 0);
        assert!(p.probs.iter().all(|&v| (v - 0.1).abs() < 1e-12));
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let ds = synthetic_blobs(40, 2, 2, 5.0, 2).unwrap();
        let arch = NetArch::mlp(2, &[4], 2).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            optimizer: OptimizerKind::Sgd { momentum: 0.0 },
            learning_rate: 1e30,
            seed: 1,
        };
        match train_cnn(&ds, &ds, &arch, &cfg) {
            Err(Error::TrainingDiverged { epoch }) => assert!((1..=3).contains(&epoch)),
            other => panic!("expected divergence, got {:?}", other.map(|m| m.meta)),
        }
    }

    #[test]
    fn bad_configs_rejected() {
        let ds = synthetic_blobs(10, 2, 2, 5.0, 2).unwrap();
        let arch = NetArch::mlp(2, &[], 2).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.epochs = 0;
        assert!(train_cnn(&ds, &ds, &arch, &cfg).is_err());
        let wrong = NetArch::mlp(3, &[], 2).unwrap();
        assert!(matches!(
            train_cnn(&ds, &ds, &wrong, &TrainConfig::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let (model, val) = blob_model(5);
        let bytes = model.to_bytes();
        let back = CnnModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        for x in &val.images {
            assert_eq!(back.predict(x).unwrap().label, model.predict(x).unwrap().label);
        }
        assert_eq!(&bytes[..4], b"SDDC");

        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(
            CnnModel::from_bytes(&bad),
            Err(Error::Checkpoint(CheckpointError::BadMagic { .. }))
        ));
        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            CnnModel::from_bytes(&bad),
            Err(Error::Checkpoint(CheckpointError::VersionMismatch { found: 2, .. }))
        ));
    }

    /// Truncation inside the last dense layer's weights names that layer.
    #[test]
    fn truncation_names_the_layer() {
        let (model, _) = blob_model(5);
        let bytes = model.to_bytes();
        // layout tail: [.. | n | weights(2x8) | n | bias(2) | checksum]
        let cut = bytes.len() - 8 - (4 + 2 * 4) - 4 * 4;
        match CnnModel::from_bytes(&bytes[..cut]) {
            Err(Error::Checkpoint(CheckpointError::Truncated { section })) => {
                assert_eq!(section, "layer 2 (dense) weights")
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
