//! End-to-end evaluations: defended accuracy on clean and adversarial pools,
//! vote confusion tables, the sample-count sweep and boundary-attack cost.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{boundary_attack, AdversarialSet, BoundaryConfig, DecisionModel};
use crate::classifiers::{majority_vote, predict_dc, train_dc, DcModel, DcTrainConfig};
use crate::cnn::CnnModel;
use crate::error::{Error, Result};
use crate::kde::{build_distribution, collect_samples, KdeConfig, LabeledDistribution, SoftmaxSampleSet};
use crate::metrics::{curve_image_id, mean_stderr, TransformFamily};
use crate::rng::{keyed_rng, pool_id, Domain};
use crate::tensor::Image;
use crate::transforms::TransformSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Clean,
    Adversarial,
}

impl Pool {
    pub fn name(&self) -> &'static str {
        match self {
            Pool::Clean => "clean",
            Pool::Adversarial => "adversarial",
        }
    }

    fn id_base(&self) -> u64 {
        match self {
            Pool::Clean => pool_id::CLEAN,
            Pool::Adversarial => pool_id::ADVERSARIAL,
        }
    }
}

/// Defense settings shared by every head in one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub transform: TransformSpec,
    #[serde(default)]
    pub kde: KdeConfig,
    pub n_samples: usize,
    pub seed: u64,
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        self.transform.validate()?;
        self.kde.validate()?;
        if self.n_samples == 0 {
            return Err(Error::invalid("N must be >= 1"));
        }
        Ok(())
    }
}

/// Sample sets and distributions for `(id, image, label)` triples.
pub fn sample_pool(
    model: &CnnModel,
    defense: &DefenseConfig,
    items: &[(u64, &Image, usize)],
) -> Result<Vec<(SoftmaxSampleSet, LabeledDistribution)>> {
    defense.validate()?;
    items
        .par_iter()
        .map(|&(id, x, label)| {
            let s = collect_samples(model, &defense.transform, x, defense.n_samples, defense.seed, id)?;
            let dist = build_distribution(&s, &defense.kde)?;
            Ok((
                s,
                LabeledDistribution {
                    image_id: id,
                    label,
                    dist,
                },
            ))
        })
        .collect()
}

/// Labeled distributions for distribution-classifier training or export.
pub fn build_distributions(
    model: &CnnModel,
    defense: &DefenseConfig,
    items: &[(u64, &Image, usize)],
) -> Result<Vec<LabeledDistribution>> {
    Ok(sample_pool(model, defense, items)?.into_iter().map(|(_, d)| d).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub pool: Pool,
    /// Index of the source image in the test set.
    pub index: usize,
    pub label: usize,
    pub cnn_label: usize,
    pub attack_success: Option<bool>,
    pub vote: usize,
    /// Predictions of the trained heads, by head name.
    pub heads: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolCounts {
    pub clean_total: usize,
    pub clean_evaluated: usize,
    pub cnn_misclassified: usize,
    pub adversarial_total: usize,
    pub adversarial_evaluated: usize,
    pub attack_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAccuracy {
    pub head: String,
    /// Percent of the clean pool classified correctly.
    pub clean: f64,
    /// Percent of the adversarial pool recovered, when one was given.
    pub adversarial: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEcho {
    pub defense: DefenseConfig,
    pub filtered: bool,
    pub heads: Vec<String>,
    pub attack: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalEcho,
    pub pools: PoolCounts,
    pub accuracy: Vec<HeadAccuracy>,
    pub records: Vec<ImageRecord>,
}

impl EvalReport {
    pub fn head(&self, name: &str) -> Option<&HeadAccuracy> {
        self.accuracy.iter().find(|h| h.head == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per image: pool, index, label, cnn_label, attack_success,
    /// vote, then one column per head.
    pub fn write_records_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["pool", "index", "label", "cnn_label", "attack_success", "vote"];
        header.extend(self.config.heads.iter().map(String::as_str));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.pool.name().to_string(),
                r.index.to_string(),
                r.label.to_string(),
                r.cnn_label.to_string(),
                r.attack_success.map_or(String::new(), |s| s.to_string()),
                r.vote.to_string(),
            ];
            row.extend(self.config.heads.iter().map(|h| r.heads[h].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// What to evaluate: test images with labels, an optional adversarial set
/// built from them, and named distribution classifiers.
pub struct EvalInputs<'a> {
    pub model: &'a CnnModel,
    pub images: &'a [Image],
    pub labels: &'a [usize],
    pub adversarial: Option<&'a AdversarialSet>,
    pub heads: &'a [(String, &'a DcModel)],
}

/// Evaluates the vote head and every trained head on the same sample sets.
///
/// With `filtered` set, the clean pool keeps only images the CNN classifies
/// correctly and the adversarial pool only successful attacks; otherwise
/// every image is evaluated.
pub fn eval_pipeline(inputs: &EvalInputs, defense: &DefenseConfig, filtered: bool) -> Result<EvalReport> {
    defense.validate()?;
    if inputs.images.len() != inputs.labels.len() {
        return Err(Error::shape(inputs.images.len(), inputs.labels.len()));
    }
    for (name, dc) in inputs.heads {
        if dc.classes != inputs.model.classes() || dc.bins != defense.kde.bins {
            return Err(Error::ShapeMismatch {
                expected: format!("{} classes x {} bins", inputs.model.classes(), defense.kde.bins),
                found: format!("head {name:?} trained on {} classes x {} bins", dc.classes, dc.bins),
            });
        }
    }
    let cnn_labels: Vec<usize> = inputs
        .images
        .par_iter()
        .map(|x| Ok(inputs.model.predict(x)?.label))
        .collect::<Result<_>>()?;
    let mut items: Vec<(Pool, usize, &Image, usize, usize, Option<bool>)> = Vec::new();
    let mut counts = PoolCounts {
        clean_total: inputs.images.len(),
        clean_evaluated: 0,
        cnn_misclassified: 0,
        adversarial_total: 0,
        adversarial_evaluated: 0,
        attack_failed: 0,
    };
    for (i, (x, &y)) in inputs.images.iter().zip(inputs.labels).enumerate() {
        let correct = cnn_labels[i] == y;
        counts.cnn_misclassified += usize::from(!correct);
        if correct || !filtered {
            items.push((Pool::Clean, i, x, y, cnn_labels[i], None));
        }
    }
    counts.clean_evaluated = items.len();
    if counts.clean_evaluated == 0 {
        return Err(Error::EmptyPool("no clean images left after filtering".into()));
    }
    if let Some(adv) = inputs.adversarial {
        counts.adversarial_total = adv.records.len();
        for (r, x) in adv.records.iter().zip(&adv.images) {
            counts.attack_failed += usize::from(!r.success);
            if r.success || !filtered {
                let cnn = inputs.model.predict(x)?.label;
                items.push((Pool::Adversarial, r.index, x, r.label, cnn, Some(r.success)));
            }
        }
        counts.adversarial_evaluated = items.len() - counts.clean_evaluated;
        if counts.adversarial_evaluated == 0 {
            return Err(Error::EmptyPool("no adversarial images left after filtering".into()));
        }
    }
    let triples: Vec<(u64, &Image, usize)> = items
        .iter()
        .map(|&(pool, index, x, y, _, _)| (pool.id_base() + index as u64, x, y))
        .collect();
    let sampled = sample_pool(inputs.model, defense, &triples)?;
    let records = items
        .iter()
        .zip(&sampled)
        .map(|(&(pool, index, _, label, cnn_label, attack_success), (set, ld))| {
            let mut heads = BTreeMap::new();
            for (name, dc) in inputs.heads {
                heads.insert(name.clone(), predict_dc(dc, &ld.dist)?);
            }
            Ok(ImageRecord {
                pool,
                index,
                label,
                cnn_label,
                attack_success,
                vote: majority_vote(set).0,
                heads,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let head_names: Vec<String> = inputs.heads.iter().map(|(n, _)| n.clone()).collect();
    let accuracy_of = |pred: &dyn Fn(&ImageRecord) -> usize, pool: Pool| -> Option<f64> {
        let rs: Vec<&ImageRecord> = records.iter().filter(|r| r.pool == pool).collect();
        (!rs.is_empty()).then(|| 100.0 * rs.iter().filter(|r| pred(r) == r.label).count() as f64 / rs.len() as f64)
    };
    let mut accuracy = vec![HeadAccuracy {
        head: "vote".into(),
        clean: accuracy_of(&|r| r.vote, Pool::Clean).unwrap_or(0.0),
        adversarial: accuracy_of(&|r| r.vote, Pool::Adversarial),
    }];
    for name in &head_names {
        accuracy.push(HeadAccuracy {
            head: name.clone(),
            clean: accuracy_of(&|r| r.heads[name], Pool::Clean).unwrap_or(0.0),
            adversarial: accuracy_of(&|r| r.heads[name], Pool::Adversarial),
        });
    }
    Ok(EvalReport {
        config: EvalEcho {
            defense: defense.clone(),
            filtered,
            heads: head_names,
            attack: inputs.adversarial.map(|a| a.config.name().to_string()),
        },
        pools: counts,
        accuracy,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRow {
    pub true_class: usize,
    pub images: usize,
    /// Percent of images voted into each class.
    pub percent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionTable {
    pub d: f64,
    pub pool: Pool,
    pub rows: Vec<ConfusionRow>,
}

impl ConfusionTable {
    pub fn row(&self, class: usize) -> Option<&ConfusionRow> {
        self.rows.iter().find(|r| r.true_class == class)
    }
}

/// Classes voted for off the diagonal on clean images that also receive
/// votes (off the diagonal) on adversarial images of the same true class.
pub fn confusion_overlap(clean: &ConfusionRow, adv: &ConfusionRow) -> Vec<usize> {
    let c = clean.true_class;
    (0..clean.percent.len())
        .filter(|&k| k != c && clean.percent[k] > 0.0 && adv.percent[k] > 0.0)
        .collect()
}

/// Vote percentages per true class for clean and adversarial images at each
/// magnitude. Classes with no images are left out.
pub fn vote_confusion(
    model: &CnnModel,
    family: &TransformFamily,
    grid: &[f64],
    clean: &[Vec<Image>],
    adv: &[Vec<Image>],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<ConfusionTable>> {
    let classes = model.classes();
    if clean.len() != classes || adv.len() != classes {
        return Err(Error::invalid(format!("need image lists for all {classes} classes")));
    }
    if clean.iter().chain(adv).all(Vec::is_empty) {
        return Err(Error::EmptyPool("no images for the confusion tables".into()));
    }
    let mut tables = Vec::new();
    for &d in grid {
        let spec = family.at(d)?;
        for (pool, lists) in [(Pool::Clean, clean), (Pool::Adversarial, adv)] {
            let mut rows = Vec::new();
            for (c, images) in lists.iter().enumerate().filter(|(_, v)| !v.is_empty()) {
                let votes = images
                    .par_iter()
                    .enumerate()
                    .map(|(k, x)| {
                        let id = curve_image_id(pool.id_base(), c, k);
                        Ok(majority_vote(&collect_samples(model, &spec, x, n_samples, seed, id)?).0)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut percent = vec![0.0; classes];
                for v in &votes {
                    percent[*v] += 100.0 / votes.len() as f64;
                }
                rows.push(ConfusionRow {
                    true_class: c,
                    images: votes.len(),
                    percent,
                });
            }
            tables.push(ConfusionTable { d, pool, rows });
        }
    }
    Ok(tables)
}

/// CSV columns: d, pool, true_class, images, predicted, percent.
pub fn write_confusion_csv<W: Write>(out: W, tables: &[ConfusionTable]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["d", "pool", "true_class", "images", "predicted", "percent"])?;
    for t in tables {
        for r in &t.rows {
            for (k, p) in r.percent.iter().enumerate() {
                w.write_record(&[
                    t.d.to_string(),
                    t.pool.name().to_string(),
                    r.true_class.to_string(),
                    r.images.to_string(),
                    k.to_string(),
                    p.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub head: String,
    pub pool: Pool,
    pub accuracy: f64,
}

/// Sample sets long enough for the largest `N`, computed once.
pub struct SweepSamples {
    pub train: Vec<(SoftmaxSampleSet, usize)>,
    pub clean: Vec<(SoftmaxSampleSet, usize)>,
    pub adversarial: Vec<(SoftmaxSampleSet, usize)>,
}

fn long_samples(model: &CnnModel, spec: &TransformSpec, n: usize, seed: u64, items: &[(u64, &Image, usize)]) -> Result<Vec<(SoftmaxSampleSet, usize)>> {
    items
        .par_iter()
        .map(|&(id, x, y)| Ok((collect_samples(model, spec, x, n, seed, id)?, y)))
        .collect()
}

pub fn sweep_samples(
    model: &CnnModel,
    spec: &TransformSpec,
    max_n: usize,
    seed: u64,
    train: &[(u64, &Image, usize)],
    clean: &[(u64, &Image, usize)],
    adversarial: &[(u64, &Image, usize)],
) -> Result<SweepSamples> {
    if max_n == 0 {
        return Err(Error::invalid("N grid must be positive"));
    }
    Ok(SweepSamples {
        train: long_samples(model, spec, max_n, seed, train)?,
        clean: long_samples(model, spec, max_n, seed, clean)?,
        adversarial: long_samples(model, spec, max_n, seed, adversarial)?,
    })
}

/// Accuracy of the vote head and of a distribution classifier retrained at
/// each `N`. Every `N` uses the first `N` samples of the same long runs.
pub fn n_samples_sweep(samples: &SweepSamples, grid: &[usize], kde: &KdeConfig, dc: &DcTrainConfig, head_name: &str) -> Result<Vec<SweepRow>> {
    if samples.clean.is_empty() {
        return Err(Error::EmptyPool("sweep needs clean images".into()));
    }
    let longest = samples.clean[0].0.len();
    if grid.iter().any(|&n| n == 0 || n > longest) {
        return Err(Error::invalid(format!("sweep N values must lie in 1..={longest}")));
    }
    let dists = |sets: &[(SoftmaxSampleSet, usize)], n: usize| -> Result<Vec<(SoftmaxSampleSet, LabeledDistribution)>> {
        sets.par_iter()
            .map(|(s, y)| {
                let t = s.truncate(n)?;
                let dist = build_distribution(&t, kde)?;
                Ok((
                    t,
                    LabeledDistribution {
                        image_id: s.image_id,
                        label: *y,
                        dist,
                    },
                ))
            })
            .collect()
    };
    let mut rows = Vec::new();
    for &n in grid {
        let train: Vec<LabeledDistribution> = dists(&samples.train, n)?.into_iter().map(|(_, d)| d).collect();
        let model = train_dc(&train, dc)?;
        for (pool, sets) in [(Pool::Clean, &samples.clean), (Pool::Adversarial, &samples.adversarial)] {
            if sets.is_empty() {
                continue;
            }
            let evald = dists(sets, n)?;
            let total = evald.len() as f64;
            let vote_ok = evald.iter().filter(|(s, d)| majority_vote(s).0 == d.label).count();
            let mut dc_ok = 0;
            for (_, d) in &evald {
                dc_ok += usize::from(predict_dc(&model, &d.dist)? == d.label);
            }
            rows.push(SweepRow {
                n,
                head: "vote".into(),
                pool,
                accuracy: 100.0 * vote_ok as f64 / total,
            });
            rows.push(SweepRow {
                n,
                head: head_name.into(),
                pool,
                accuracy: 100.0 * dc_ok as f64 / total,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "head", "pool", "accuracy"])?;
    for r in rows {
        w.write_record(&[r.n.to_string(), r.head.clone(), r.pool.name().to_string(), r.accuracy.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Label oracle for a transformation defense: every query draws `N` fresh
/// transformed samples from its own stream and predicts by vote or by a
/// distribution classifier.
pub struct DefendedModel<'a> {
    pub cnn: &'a CnnModel,
    pub defense: DefenseConfig,
    pub head: Option<&'a DcModel>,
}

impl DecisionModel for DefendedModel<'_> {
    fn decide(&self, x: &Image, query: u64) -> Result<usize> {
        let s = collect_samples(
            self.cnn,
            &self.defense.transform,
            x,
            self.defense.n_samples,
            self.defense.seed,
            pool_id::EXTRA + query,
        )?;
        match self.head {
            None => Ok(majority_vote(&s).0),
            Some(dc) => predict_dc(dc, &build_distribution(&s, &self.defense.kde)?),
        }
    }

    fn is_stochastic(&self) -> bool {
        true
    }
}

/// Shifts query ids so that different images never share a stream.
struct ImageQueries<'a> {
    inner: &'a dyn DecisionModel,
    offset: u64,
}

impl DecisionModel for ImageQueries<'_> {
    fn decide(&self, x: &Image, query: u64) -> Result<usize> {
        self.inner.decide(x, self.offset + query)
    }

    fn is_stochastic(&self) -> bool {
        self.inner.is_stochastic()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRow {
    pub target: String,
    pub mean_l2: f64,
    pub stderr: f64,
    pub evaluated: usize,
    pub init_failures: usize,
    pub success: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryImage {
    pub target: String,
    pub index: usize,
    /// `None` when no misclassified starting point was found.
    pub l2_normalized: Option<f64>,
    pub success: bool,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub rows: Vec<BoundaryRow>,
    pub images: Vec<BoundaryImage>,
}

impl BoundaryReport {
    pub fn row(&self, target: &str) -> Option<&BoundaryRow> {
        self.rows.iter().find(|r| r.target == target)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs the boundary attack against every target on the same images and
/// summarizes the final normalized L2. Images whose attack cannot start are
/// counted and left out of the means.
pub fn boundary_eval(
    targets: &[(String, &dyn DecisionModel)],
    images: &[(usize, &Image, usize)],
    cfg: &BoundaryConfig,
    seed: u64,
) -> Result<BoundaryReport> {
    if cfg.max_iterations == 0 {
        return Err(Error::invalid("boundary evaluation needs a positive iteration budget"));
    }
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyPool("no images for the boundary evaluation".into()));
    }
    let mut report = BoundaryReport {
        rows: Vec::new(),
        images: Vec::new(),
    };
    for (t, (name, model)) in targets.iter().enumerate() {
        let outcomes = images
            .par_iter()
            .map(|&(index, x, y)| {
                let keyed = ImageQueries {
                    inner: *model,
                    offset: (index as u64) << 32,
                };
                let mut rng = keyed_rng(Domain::Attack, seed, index as u64, t as u64);
                match boundary_attack(&keyed, x, y, cfg, &mut rng) {
                    Ok(r) => Ok(BoundaryImage {
                        target: name.clone(),
                        index,
                        l2_normalized: Some(r.l2_normalized),
                        success: r.success,
                        queries: r.steps,
                    }),
                    Err(Error::Initialization(_)) => Ok(BoundaryImage {
                        target: name.clone(),
                        index,
                        l2_normalized: None,
                        success: false,
                        queries: 0,
                    }),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let l2s: Vec<f64> = outcomes.iter().filter_map(|o| o.l2_normalized).collect();
        let (mean_l2, stderr) = if l2s.is_empty() { (f64::NAN, f64::NAN) } else { mean_stderr(&l2s) };
        report.rows.push(BoundaryRow {
            target: name.clone(),
            mean_l2,
            stderr,
            evaluated: l2s.len(),
            init_failures: outcomes.len() - l2s.len(),
            success: outcomes.iter().filter(|o| o.success).count(),
        });
        report.images.extend(outcomes);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{attack_pool, AttackConfig};
    use crate::classifiers::{train_rf_dc, RfConfig};
    use crate::cnn::{train_cnn, TrainConfig};
    use crate::data::synthetic_blobs;
    use crate::net::NetArch;

    fn toy() -> (CnnModel, Vec<Image>, Vec<usize>) {
        let ds = synthetic_blobs(240, 3, 4, 6.0, 11).unwrap();
        let (train, val, test) = ds.split([0.6, 0.2, 0.2], 2).unwrap();
        let arch = NetArch::mlp(4, &[16], 3).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        };
        let m = train_cnn(&train, &val, &arch, &cfg).unwrap();
        (m, test.images, test.labels)
    }

    fn identity() -> DefenseConfig {
        DefenseConfig {
            transform: TransformSpec::Rpn { epsilon: 0.0 },
            kde: KdeConfig::default(),
            n_samples: 3,
            seed: 5,
        }
    }

    #[test]
    fn identity_transform_pool_conventions() {
        let (m, images, labels) = toy();
        let pool: Vec<(usize, &Image, usize)> = images.iter().zip(&labels).enumerate().map(|(i, (x, &y))| (i, x, y)).collect();
        let adv = attack_pool(&m, &AttackConfig::Fgsm { epsilon: 0.5 }, &pool, 1).unwrap();
        let inputs = EvalInputs {
            model: &m,
            images: &images,
            labels: &labels,
            adversarial: Some(&adv),
            heads: &[],
        };
        let r = eval_pipeline(&inputs, &identity(), true).unwrap();
        let vote = r.head("vote").unwrap();
        assert_eq!(vote.clean, 100.0);
        assert_eq!(vote.adversarial, Some(0.0));
        assert_eq!(r.pools.clean_evaluated + r.pools.cnn_misclassified, images.len());
        let unfiltered = eval_pipeline(&inputs, &identity(), false).unwrap();
        assert_eq!(unfiltered.pools.clean_evaluated, images.len());
    }

    #[test]
    fn empty_pools_are_errors() {
        let (m, images, labels) = toy();
        let wrong: Vec<usize> = labels.iter().map(|&y| (y + 1) % 3).collect();
        let inputs = EvalInputs {
            model: &m,
            images: &images,
            labels: &wrong,
            adversarial: None,
            heads: &[],
        };
        // a few images may still be "correct" under shifted labels; drop them
        let keep: Vec<usize> = (0..images.len())
            .filter(|&i| m.predict(&images[i]).unwrap().label != wrong[i])
            .collect();
        let imgs: Vec<Image> = keep.iter().map(|&i| images[i].clone()).collect();
        let labs: Vec<usize> = keep.iter().map(|&i| wrong[i]).collect();
        let inputs = EvalInputs {
            images: &imgs,
            labels: &labs,
            ..inputs
        };
        assert!(matches!(eval_pipeline(&inputs, &identity(), true), Err(Error::EmptyPool(_))));
    }

    #[test]
    fn head_shape_mismatch_is_rejected() {
        let (m, images, labels) = toy();
        let defense = identity();
        let items: Vec<(u64, &Image, usize)> = images.iter().zip(&labels).enumerate().map(|(i, (x, &y))| (i as u64, x, y)).collect();
        let mut other = defense.clone();
        other.kde.bins = 20;
        let train = build_distributions(&m, &other, &items).unwrap();
        let rf = train_rf_dc(&train, &RfConfig { trees: 3, ..RfConfig::default() }).unwrap();
        let heads = [("rf".to_string(), &rf)];
        let inputs = EvalInputs {
            model: &m,
            images: &images,
            labels: &labels,
            adversarial: None,
            heads: &heads,
        };
        assert!(matches!(eval_pipeline(&inputs, &defense, true), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn confusion_identity_is_diagonal() {
        let (m, images, labels) = toy();
        let mut clean = vec![Vec::new(); 3];
        for (x, &y) in images.iter().zip(&labels) {
            if m.predict(x).unwrap().label == y {
                clean[y].push(x.clone());
            }
        }
        let adv = vec![Vec::new(); 3];
        let tables = vote_confusion(&m, &TransformFamily::Rpn, &[0.0], &clean, &adv, 4, 1).unwrap();
        for r in &tables[0].rows {
            assert!((r.percent[r.true_class] - 100.0).abs() < 1e-9);
            assert!((r.percent.iter().sum::<f64>() - 100.0).abs() < 1e-9);
        }
        assert!(tables[1].rows.is_empty());
    }

    #[test]
    fn sweep_n1_vote_is_single_sample_accuracy() {
        let (m, images, labels) = toy();
        let spec = TransformSpec::Rpn { epsilon: 0.3 };
        let items: Vec<(u64, &Image, usize)> = images.iter().zip(&labels).enumerate().map(|(i, (x, &y))| (i as u64, x, y)).collect();
        let s = sweep_samples(&m, &spec, 6, 3, &items, &items, &[]).unwrap();
        let dc = DcTrainConfig::Rf(RfConfig { trees: 5, ..RfConfig::default() });
        let rows = n_samples_sweep(&s, &[1, 6], &KdeConfig::default(), &dc, "rf").unwrap();
        let vote1 = rows.iter().find(|r| r.n == 1 && r.head == "vote").unwrap().accuracy;
        let single = items
            .iter()
            .filter(|&&(id, x, y)| {
                let t = crate::transforms::sample(&spec, x, crate::rng::RngStream::new(3, id, 0)).unwrap();
                m.predict(&t).unwrap().label == y
            })
            .count() as f64
            * 100.0
            / items.len() as f64;
        assert_eq!(vote1, single);
    }

    #[test]
    fn boundary_eval_rejects_zero_budget() {
        let (m, images, labels) = toy();
        let cfg = BoundaryConfig {
            max_iterations: 0,
            ..BoundaryConfig::default()
        };
        let targets: [(String, &dyn DecisionModel); 1] = [("cnn".into(), &m)];
        let imgs = [(0, &images[0], labels[0])];
        assert!(boundary_eval(&targets, &imgs, &cfg, 1).is_err());
    }
}
