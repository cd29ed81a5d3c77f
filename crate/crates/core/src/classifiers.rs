//! Final-prediction heads: majority vote over per-sample labels, and
//! trainable classifiers over softmax distributions.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnn::{self, FitOptions, TrainConfig, CHECKPOINT_MAGIC};
use crate::container::{self, BlobSpec};
use crate::error::{CheckpointError, Error, Result};
use crate::kde::{LabeledDistribution, SoftmaxDistribution, SoftmaxSampleSet};
use crate::net::{self, NetArch, NetParams};
use crate::optim::OptimizerKind;
use crate::rng::{keyed_rng, Domain};
use crate::tensor::{argmax, Image, Tensor};

/// Per-sample argmax counts and the plurality label (ties to the lowest class).
pub fn majority_vote(set: &SoftmaxSampleSet) -> (usize, Vec<usize>) {
    let mut counts = vec![0; set.classes()];
    for row in set.rows() {
        counts[argmax(row)] += 1;
    }
    (argmax(&counts), counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Early-stopping patience in epochs on held-out cross entropy.
    pub patience: usize,
    /// Fraction of the training set held out for early stopping. No holdout
    /// is taken when it would leave fewer than 10 examples on either side.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![20],
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 32,
            patience: 10,
            validation_fraction: 0.1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub bootstrap: bool,
    /// Features tried per split; defaults to `floor(sqrt(C * B))`.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for RfConfig {
    fn default() -> Self {
        Self {
            trees: 100,
            max_depth: 20,
            bootstrap: true,
            max_features: None,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DcTrainConfig {
    Mlp(MlpConfig),
    Rf(RfConfig),
}

impl Default for DcTrainConfig {
    fn default() -> Self {
        DcTrainConfig::Mlp(MlpConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDc {
    pub arch: NetArch,
    pub params: NetParams<f32>,
    pub config: MlpConfig,
    pub epochs_run: usize,
}

/// Tree node. Leaves have `feature == LEAF` and carry the class histogram of
/// the training samples that reached them.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub feature: u32,
    pub threshold: f32,
    pub left: u32,
    pub right: u32,
    pub histogram: Vec<f32>,
}

pub const LEAF: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Samples with `x[feature] <= threshold` go left.
    pub fn predict(&self, x: &[f32]) -> usize {
        let mut n = &self.nodes[0];
        while n.feature != LEAF {
            n = if x[n.feature as usize] <= n.threshold {
                &self.nodes[n.left as usize]
            } else {
                &self.nodes[n.right as usize]
            };
        }
        argmax(&n.histogram)
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            let n = &t.nodes[i];
            if n.feature == LEAF {
                0
            } else {
                1 + go(t, n.left as usize).max(go(t, n.right as usize))
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestDc {
    pub trees: Vec<Tree>,
    pub config: RfConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DcKind {
    Mlp(MlpDc),
    Forest(ForestDc),
}

/// A trained distribution classifier for `classes x bins` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DcModel {
    pub classes: usize,
    pub bins: usize,
    pub kind: DcKind,
}

fn check_training_set(train: &[LabeledDistribution]) -> Result<(usize, usize)> {
    let first = train
        .first()
        .ok_or_else(|| Error::EmptyPool("no training distributions".into()))?;
    let (c, b) = (first.dist.classes(), first.dist.bins());
    for it in train {
        if (it.dist.classes(), it.dist.bins()) != (c, b) {
            return Err(Error::shape([c, b], [it.dist.classes(), it.dist.bins()]));
        }
        if it.label >= c {
            return Err(Error::invalid(format!("label {} >= class count {c}", it.label)));
        }
    }
    Ok((c, b))
}

fn as_input(dist: &SoftmaxDistribution) -> Image {
    let v = dist.flatten_f32();
    Tensor::from_vec(&[1, v.len(), 1], v).expect("nonempty distribution")
}

pub fn train_mlp_dc(train: &[LabeledDistribution], cfg: &MlpConfig) -> Result<DcModel> {
    let (classes, bins) = check_training_set(train)?;
    if cfg.hidden.contains(&0) || !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(Error::invalid("hidden sizes must be positive and the holdout fraction in [0, 1)"));
    }
    let arch = NetArch::mlp(classes * bins, &cfg.hidden, classes)?;
    let inputs: Vec<Image> = train.iter().map(|t| as_input(&t.dist)).collect();
    let labels: Vec<usize> = train.iter().map(|t| t.label).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut keyed_rng(Domain::Training, cfg.seed, 2, 0));
    let n_val = (train.len() as f64 * cfg.validation_fraction).round() as usize;
    let (val_idx, fit_idx) = if n_val >= 10 && train.len() - n_val >= 10 {
        order.split_at(n_val)
    } else {
        (&order[..0], &order[..])
    };
    let pick = |idx: &[usize]| -> (Vec<&Image>, Vec<usize>) {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        (idx.iter().map(|&i| &inputs[i]).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let (fx, fy) = pick(fit_idx);
    let (vx, vy) = pick(val_idx);
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optimizer: OptimizerKind::Adam,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
    };
    let validation = (!vx.is_empty()).then_some((&vx[..], &vy[..]));
    let out = cnn::fit(
        &arch,
        &fx,
        &fy,
        validation,
        &tc,
        FitOptions {
            patience: validation.map(|_| cfg.patience.max(1)),
        },
    )?;
    Ok(DcModel {
        classes,
        bins,
        kind: DcKind::Mlp(MlpDc {
            arch,
            params: out.params,
            config: cfg.clone(),
            epochs_run: out.epochs_run,
        }),
    })
}

struct Grower<'a> {
    x: &'a [Vec<f32>],
    y: &'a [usize],
    classes: usize,
    max_depth: usize,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

fn gini(counts: &[f64], n: f64) -> f64 {
    1.0 - counts.iter().map(|c| (c / n) * (c / n)).sum::<f64>()
}

/// Threshold strictly separating `lo < hi` under the `<=` rule.
fn split_threshold(lo: f32, hi: f32) -> f32 {
    let mid = ((lo as f64 + hi as f64) / 2.0) as f32;
    if mid >= lo && mid < hi {
        mid
    } else {
        lo
    }
}

impl Grower<'_> {
    fn histogram(&self, idx: &[usize]) -> Vec<f32> {
        let mut h = vec![0.0f32; self.classes];
        for &i in idx {
            h[self.y[i]] += 1.0;
        }
        h
    }

    fn leaf(&mut self, idx: &[usize]) -> u32 {
        let histogram = self.histogram(idx);
        self.nodes.push(Node {
            feature: LEAF,
            threshold: 0.0,
            left: 0,
            right: 0,
            histogram,
        });
        (self.nodes.len() - 1) as u32
    }

    /// Best Gini split over the sampled features: `(feature, threshold,
    /// weighted child impurity)`. Ties keep the first candidate found.
    fn best_split(&mut self, idx: &[usize]) -> Option<(usize, f32, f64)> {
        let features = self.x[0].len();
        let mut feats = index::sample(&mut self.rng, features, self.mtry).into_vec();
        feats.sort_unstable();
        let n = idx.len() as f64;
        let mut total = vec![0.0; self.classes];
        for &i in idx {
            total[self.y[i]] += 1.0;
        }
        let mut best: Option<(usize, f32, f64)> = None;
        let mut sorted = idx.to_vec();
        for f in feats {
            sorted.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left = vec![0.0; self.classes];
            for k in 0..sorted.len() - 1 {
                left[self.y[sorted[k]]] += 1.0;
                let (lo, hi) = (self.x[sorted[k]][f], self.x[sorted[k + 1]][f]);
                if lo == hi {
                    continue;
                }
                let nl = (k + 1) as f64;
                let nr = n - nl;
                let right: Vec<f64> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
                let score = (nl * gini(&left, nl) + nr * gini(&right, nr)) / n;
                if best.map_or(true, |(_, _, s)| score < s) {
                    best = Some((f, split_threshold(lo, hi), score));
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: &[usize], depth: usize) -> u32 {
        let first = self.y[idx[0]];
        if depth >= self.max_depth || idx.len() < 2 || idx.iter().all(|&i| self.y[i] == first) {
            return self.leaf(idx);
        }
        let Some((feature, threshold, _)) = self.best_split(idx) else {
            return self.leaf(idx);
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let at = self.nodes.len();
        self.nodes.push(Node {
            feature: feature as u32,
            threshold,
            left: 0,
            right: 0,
            histogram: self.histogram(idx),
        });
        let left = self.grow(&l, depth + 1);
        let right = self.grow(&r, depth + 1);
        self.nodes[at].left = left;
        self.nodes[at].right = right;
        at as u32
    }
}

/// Grows one tree with its own derived stream.
pub fn grow_tree(x: &[Vec<f32>], y: &[usize], classes: usize, cfg: &RfConfig, tree_index: u64) -> Tree {
    let features = x[0].len();
    let mtry = cfg
        .max_features
        .unwrap_or((features as f64).sqrt() as usize)
        .clamp(1, features);
    let mut rng = keyed_rng(Domain::Forest, cfg.seed, tree_index, 0);
    let idx: Vec<usize> = if cfg.bootstrap {
        (0..x.len()).map(|_| rng.gen_range(0..x.len())).collect()
    } else {
        (0..x.len()).collect()
    };
    let mut g = Grower {
        x,
        y,
        classes,
        max_depth: cfg.max_depth,
        mtry,
        rng,
        nodes: Vec::new(),
    };
    g.grow(&idx, 0);
    Tree { nodes: g.nodes }
}

pub fn train_rf_dc(train: &[LabeledDistribution], cfg: &RfConfig) -> Result<DcModel> {
    let (classes, bins) = check_training_set(train)?;
    if cfg.trees == 0 {
        return Err(Error::invalid("forest needs at least one tree"));
    }
    let x: Vec<Vec<f32>> = train.iter().map(|t| t.dist.flatten_f32()).collect();
    let y: Vec<usize> = train.iter().map(|t| t.label).collect();
    let trees = (0..cfg.trees as u64)
        .into_par_iter()
        .map(|t| grow_tree(&x, &y, classes, cfg, t))
        .collect();
    Ok(DcModel {
        classes,
        bins,
        kind: DcKind::Forest(ForestDc {
            trees,
            config: cfg.clone(),
        }),
    })
}

pub fn train_dc(train: &[LabeledDistribution], cfg: &DcTrainConfig) -> Result<DcModel> {
    match cfg {
        DcTrainConfig::Mlp(c) => train_mlp_dc(train, c),
        DcTrainConfig::Rf(c) => train_rf_dc(train, c),
    }
}

/// Trains on clean distributions followed by adversarial ones; the base CNN
/// is not involved.
pub fn train_lat(clean: &[LabeledDistribution], adv: &[LabeledDistribution], cfg: &DcTrainConfig) -> Result<DcModel> {
    let mixture: Vec<LabeledDistribution> = clean.iter().chain(adv).cloned().collect();
    train_dc(&mixture, cfg)
}

impl DcModel {
    fn check(&self, h: &SoftmaxDistribution) -> Result<()> {
        if (h.classes(), h.bins()) != (self.classes, self.bins) {
            return Err(Error::shape([self.classes, self.bins], [h.classes(), h.bins()]));
        }
        Ok(())
    }

    /// Per-tree votes for a forest; softmax probabilities for an MLP.
    pub fn scores(&self, h: &SoftmaxDistribution) -> Result<Vec<f64>> {
        self.check(h)?;
        Ok(match &self.kind {
            DcKind::Mlp(m) => {
                let logits = net::forward(&m.arch, &m.params, &as_input(h))?;
                let logits: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
                net::softmax(&logits)
            }
            DcKind::Forest(f) => {
                let x = h.flatten_f32();
                let mut votes = vec![0.0; self.classes];
                for t in &f.trees {
                    votes[t.predict(&x)] += 1.0;
                }
                votes
            }
        })
    }

    pub fn kind_tag(&self) -> &'static str {
        match self.kind {
            DcKind::Mlp(_) => "mlp-dc",
            DcKind::Forest(_) => "rf-dc",
        }
    }
}

/// Class index; ties go to the lowest class.
pub fn predict_dc(model: &DcModel, h: &SoftmaxDistribution) -> Result<usize> {
    Ok(argmax(&model.scores(h)?))
}

#[derive(Serialize, Deserialize)]
struct DcDescriptor {
    kind: String,
    classes: usize,
    bins: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mlp: Option<MlpDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    forest: Option<ForestDescriptor>,
}

#[derive(Serialize, Deserialize)]
struct MlpDescriptor {
    arch: NetArch,
    config: MlpConfig,
    epochs_run: usize,
}

#[derive(Serialize, Deserialize)]
struct ForestDescriptor {
    config: RfConfig,
    /// Node count per tree.
    nodes: Vec<usize>,
}

/// Fields per node record: feature, threshold, left, right, then the class
/// histogram.
fn record_len(classes: usize) -> usize {
    4 + classes
}

impl DcModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut desc = DcDescriptor {
            kind: self.kind_tag().into(),
            classes: self.classes,
            bins: self.bins,
            mlp: None,
            forest: None,
        };
        let mut owned: Vec<Vec<f32>> = Vec::new();
        let blobs: Vec<&[f32]> = match &self.kind {
            DcKind::Mlp(m) => {
                desc.mlp = Some(MlpDescriptor {
                    arch: m.arch.clone(),
                    config: m.config.clone(),
                    epochs_run: m.epochs_run,
                });
                cnn::param_blobs(&m.params)
            }
            DcKind::Forest(f) => {
                desc.forest = Some(ForestDescriptor {
                    config: f.config.clone(),
                    nodes: f.trees.iter().map(|t| t.nodes.len()).collect(),
                });
                for t in &f.trees {
                    let mut rec = Vec::with_capacity(t.nodes.len() * record_len(self.classes));
                    for n in &t.nodes {
                        let feature = if n.feature == LEAF { -1.0 } else { n.feature as f32 };
                        rec.extend([feature, n.threshold, n.left as f32, n.right as f32]);
                        rec.extend(&n.histogram);
                    }
                    owned.push(rec);
                }
                owned.iter().map(|v| &v[..]).collect()
            }
        };
        let text = serde_json::to_string(&desc).expect("descriptor serializes");
        container::encode(CHECKPOINT_MAGIC, &text, &blobs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut desc: Option<DcDescriptor> = None;
        let (_, blobs) = container::decode::<f32>(CHECKPOINT_MAGIC, bytes, |text| {
            let d: DcDescriptor = cnn::parse_descriptor(text)?;
            let specs = match (d.kind.as_str(), &d.mlp, &d.forest) {
                ("mlp-dc", Some(m), _) => cnn::param_blob_specs(&m.arch)?,
                ("rf-dc", _, Some(f)) => f
                    .nodes
                    .iter()
                    .enumerate()
                    .map(|(i, &n)| BlobSpec::exact(format!("tree {i}"), n * record_len(d.classes)))
                    .collect(),
                (other, _, _) => {
                    return Err(CheckpointError::Descriptor(format!(
                        "architecture tag {other:?} is not a distribution classifier"
                    )))
                }
            };
            desc = Some(d);
            Ok(specs)
        })?;
        let d = desc.expect("layout callback ran");
        let kind = if let Some(m) = d.mlp.filter(|_| d.kind == "mlp-dc") {
            let params = cnn::params_from_blobs(blobs);
            params.check(&m.arch)?;
            if m.arch.input_len() != d.classes * d.bins || m.arch.classes != d.classes {
                return Err(CheckpointError::Descriptor("MLP shape disagrees with classes x bins".into()).into());
            }
            DcKind::Mlp(MlpDc {
                arch: m.arch,
                params,
                config: m.config,
                epochs_run: m.epochs_run,
            })
        } else {
            let f = d.forest.expect("checked by layout");
            let width = record_len(d.classes);
            let features = d.classes * d.bins;
            let mut trees = Vec::with_capacity(blobs.len());
            for (ti, blob) in blobs.into_iter().enumerate() {
                let count = blob.len() / width;
                let mut nodes = Vec::with_capacity(count);
                for rec in blob.chunks_exact(width) {
                    let leaf = rec[0] == -1.0;
                    let ok_index = |v: f32, bound: usize| v >= 0.0 && v.fract() == 0.0 && (v as usize) < bound;
                    if !leaf && !(ok_index(rec[0], features) && ok_index(rec[2], count) && ok_index(rec[3], count)) {
                        return Err(CheckpointError::Descriptor(format!("tree {ti} has an invalid node record")).into());
                    }
                    nodes.push(Node {
                        feature: if leaf { LEAF } else { rec[0] as u32 },
                        threshold: rec[1],
                        left: if leaf { 0 } else { rec[2] as u32 },
                        right: if leaf { 0 } else { rec[3] as u32 },
                        histogram: rec[4..].to_vec(),
                    });
                }
                if nodes.is_empty() {
                    return Err(CheckpointError::Descriptor(format!("tree {ti} is empty")).into());
                }
                trees.push(Tree { nodes });
            }
            DcKind::Forest(ForestDc { trees, config: f.config })
        };
        Ok(DcModel {
            classes: d.classes,
            bins: d.bins,
            kind,
        })
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
    use crate::kde::{build_distribution, KdeConfig};

    fn rows(labels: &[usize], classes: usize) -> SoftmaxSampleSet {
        let r = labels
            .iter()
            .map(|&l| (0..classes).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
            .collect();
        SoftmaxSampleSet::new(r, 0, "t").unwrap()
    }

    #[test]
    fn vote_examples() {
        let (label, counts) = majority_vote(&rows(&[3, 3, 1, 3, 0], 5));
        assert_eq!((label, counts[3]), (3, 3));
        assert_eq!(counts.iter().sum::<usize>(), 5);
        let (label, _) = majority_vote(&rows(&[7, 2, 7, 2], 10));
        assert_eq!(label, 2);
        let (label, counts) = majority_vote(&rows(&[4; 6], 6));
        assert_eq!((label, counts[4]), (4, 6));
    }

    /// Class `k` puts its peak near bin B-1 in row `k` and near 0 elsewhere.
    pub(crate) fn separable(n: usize, classes: usize, seed: u64) -> Vec<LabeledDistribution> {
        let mut rng = keyed_rng(Domain::Synthetic, seed, 0, 0);
        let cfg = KdeConfig { kernel_width: 0.05, bins: 10 };
        (0..n)
            .map(|i| {
                let label = i % classes;
                let samples: Vec<Vec<f64>> = (0..5)
                    .map(|_| {
                        let top: f64 = rng.gen_range(0.7..1.0);
                        let rest = (1.0 - top) / (classes - 1) as f64;
                        (0..classes).map(|c| if c == label { top } else { rest }).collect()
                    })
                    .collect();
                let set = SoftmaxSampleSet::new(samples, i as u64, "t").unwrap();
                LabeledDistribution {
                    image_id: i as u64,
                    label,
                    dist: build_distribution(&set, &cfg).unwrap(),
                }
            })
            .collect()
    }

    fn train_accuracy(m: &DcModel, data: &[LabeledDistribution]) -> f64 {
        let ok = data.iter().filter(|d| predict_dc(m, &d.dist).unwrap() == d.label).count();
        ok as f64 / data.len() as f64
    }

    #[test]
    fn mlp_fits_separable_set() {
        let data = separable(120, 3, 1);
        let cfg = MlpConfig {
            epochs: 60,
            ..MlpConfig::default()
        };
        let m = train_mlp_dc(&data, &cfg).unwrap();
        assert!(train_accuracy(&m, &data) >= 0.99);
        let again = train_mlp_dc(&data, &cfg).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn mlp_memorizes_single_example() {
        let data = separable(2, 2, 4)[1..].to_vec();
        let m = train_mlp_dc(&data, &MlpConfig::default()).unwrap();
        assert_eq!(predict_dc(&m, &data[0].dist).unwrap(), data[0].label);
    }

    #[test]
    fn zero_mlp_predicts_class_zero() {
        let data = separable(4, 2, 2);
        let mut m = train_mlp_dc(&data, &MlpConfig { epochs: 1, ..MlpConfig::default() }).unwrap();
        if let DcKind::Mlp(mlp) = &mut m.kind {
            mlp.params.fill_zero();
        }
        assert_eq!(predict_dc(&m, &data[1].dist).unwrap(), 0);
        assert_eq!(m.scores(&data[1].dist).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn forest_fits_and_matches_tree_plurality() {
        let data = separable(90, 3, 3);
        let cfg = RfConfig {
            trees: 15,
            ..RfConfig::default()
        };
        let m = train_rf_dc(&data, &cfg).unwrap();
        assert!(train_accuracy(&m, &data) >= 0.99);
        let DcKind::Forest(f) = &m.kind else { unreachable!() };
        for d in &data {
            let x = d.dist.flatten_f32();
            let mut votes = vec![0usize; 3];
            for t in &f.trees {
                votes[t.predict(&x)] += 1;
                assert!(t.depth() <= cfg.max_depth);
            }
            assert_eq!(predict_dc(&m, &d.dist).unwrap(), argmax(&votes));
        }
    }

    #[test]
    fn single_tree_without_bootstrap_is_exact_on_training_data() {
        let data = separable(40, 4, 5);
        let cfg = RfConfig {
            trees: 1,
            bootstrap: false,
            ..RfConfig::default()
        };
        let m = train_rf_dc(&data, &cfg).unwrap();
        assert_eq!(train_accuracy(&m, &data), 1.0);
    }

    #[test]
    fn threshold_separates_adjacent_floats() {
        let lo = 0.3f32;
        let hi = lo.next_up();
        let t = split_threshold(lo, hi);
        assert!(lo <= t && t < hi);
        assert_eq!(split_threshold(0.0, 1.0), 0.5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let data = separable(10, 2, 6);
        let m = train_rf_dc(&data, &RfConfig { trees: 2, ..RfConfig::default() }).unwrap();
        let other = separable(3, 3, 6);
        assert!(matches!(predict_dc(&m, &other[0].dist), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(train_rf_dc(&[], &RfConfig::default()), Err(Error::EmptyPool(_))));
    }

    #[test]
    fn checkpoints_round_trip() {
        let data = separable(30, 3, 7);
        let rf = train_rf_dc(&data, &RfConfig { trees: 4, ..RfConfig::default() }).unwrap();
        assert_eq!(DcModel::from_bytes(&rf.to_bytes()).unwrap(), rf);
        let mlp = train_mlp_dc(&data, &MlpConfig { epochs: 2, ..MlpConfig::default() }).unwrap();
        let back = DcModel::from_bytes(&mlp.to_bytes()).unwrap();
        assert_eq!(back, mlp);
        // a DC checkpoint is not a CNN checkpoint and vice versa
        assert!(cnn::CnnModel::from_bytes(&mlp.to_bytes()).is_err());
        let bytes = rf.to_bytes();
        assert!(matches!(
            DcModel::from_bytes(&bytes[..bytes.len() - 30]),
            Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
        ));
    }

    #[test]
    fn config_serde_is_tagged() {
        let c: DcTrainConfig = serde_json::from_str(
            r#"{"kind":"rf","trees":100,"max_depth":20,"bootstrap":true,"max_features":null,"seed":3}"#,
        )
        .unwrap();
        assert!(matches!(c, DcTrainConfig::Rf(RfConfig { trees: 100, .. })));
        assert!(serde_json::from_str::<DcTrainConfig>(r#"{"kind":"rf","trees":1,"typo":2}"#).is_err());
    }
}
