//! One function per subcommand. Each validates its inputs, plans its
//! outputs, computes everything in memory, then writes.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use softdist::attacks::{attack_pool, encode_images, AdversarialSet, DecisionModel};
use softdist::classifiers::{predict_dc, train_dc, train_lat, DcModel, DcTrainConfig};
use softdist::experiment::{
    boundary_eval, build_distributions, eval_pipeline, n_samples_sweep, sweep_samples, vote_confusion, write_confusion_csv,
    write_sweep_csv, DefenseConfig, DefendedModel, EvalInputs,
};
use softdist::kde::{decode_set, encode_set, write_csv, LabeledDistribution};
use softdist::metrics::{distance_curves, CurveConfig};
use softdist::rng::pool_id;
use softdist::{load_idx, synthetic_blobs, train_cnn, CnnModel, Dataset, Image, NetArch};

use crate::config::{ArchKind, BaseHead, CliConfig, CurveSection, DistSource, Head, Split};
use crate::error::CliError;
use crate::output::{with_sidecars, Outputs, Provenance};

/// Stream base for distributions of adversarial training images.
const TRAIN_ADVERSARIAL: u64 = pool_id::TRAIN | 1 << 39;

pub struct Run<'a> {
    pub cfg: &'a CliConfig,
    pub command: &'a str,
    pub force: bool,
}

impl Run<'_> {
    fn outputs(&self, paths: &[PathBuf]) -> Result<Outputs, CliError> {
        Outputs::plan(paths, self.force, Provenance::new(self.command, self.cfg))
    }

    fn p(&self, name: &str) -> PathBuf {
        self.cfg.artifact(name)
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing {
            path: path.to_path_buf(),
            detail: "required upstream artifact not found".into(),
        })
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::missing(path, e))
}

struct Data {
    train: Dataset,
    test: Dataset,
}

const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

fn check_data_paths(cfg: &CliConfig) -> Result<(), CliError> {
    if let Some(dir) = &cfg.data.mnist_dir {
        for f in MNIST_FILES {
            require(&dir.join(f))?;
        }
    }
    Ok(())
}

fn load_data(cfg: &CliConfig) -> Result<Data, CliError> {
    let d = &cfg.data;
    let (train, test) = if let Some(dir) = &d.mnist_dir {
        let f = |i: usize| dir.join(MNIST_FILES[i]);
        (load_idx(f(0), f(1))?, load_idx(f(2), f(3))?)
    } else {
        let s = d.synthetic.as_ref().expect("checked at load");
        let all = synthetic_blobs(s.samples, s.classes, s.dims, s.separation, cfg.seed)?;
        let (train, _, test) = all.split([1.0 - s.test_fraction, 0.0, s.test_fraction], cfg.seed)?;
        (train, test)
    };
    let cut = |ds: Dataset, limit: Option<usize>| limit.map_or(ds.clone(), |n| ds.head(n));
    Ok(Data {
        train: cut(train, d.train_limit),
        test: cut(test, d.test_limit),
    })
}

fn load_cnn(run: &Run) -> Result<CnnModel, CliError> {
    let path = run.p("cnn.ckpt");
    require(&path)?;
    Ok(CnnModel::load(&path)?)
}

fn adv_paths(run: &Run, split: Split) -> (PathBuf, PathBuf) {
    (run.p(&format!("adv_{}.json", split.name())), run.p(&format!("adv_{}.bin", split.name())))
}

fn load_adv(run: &Run, split: Split) -> Result<AdversarialSet, CliError> {
    let (m, t) = adv_paths(run, split);
    require(&m)?;
    require(&t)?;
    Ok(AdversarialSet::load(m, t)?)
}

fn defense(cfg: &CliConfig) -> Result<DefenseConfig, CliError> {
    let d = cfg.defense()?;
    let out = DefenseConfig {
        transform: d.transform.clone(),
        kde: d.kde,
        n_samples: d.n_samples,
        seed: cfg.seed,
    };
    out.validate()?;
    Ok(out)
}

fn triples(ds: &Dataset, n: usize, base: u64) -> Vec<(u64, &Image, usize)> {
    ds.images
        .iter()
        .zip(&ds.labels)
        .take(n)
        .enumerate()
        .map(|(i, (x, &y))| (base + i as u64, x, y))
        .collect()
}

fn check_shapes(dc: &DcModel, classes: usize, bins: usize, what: &str) -> Result<(), CliError> {
    if dc.classes != classes || dc.bins != bins {
        return Err(CliError::Mismatch(format!(
            "{what} was trained on {} classes x {} bins, the run uses {classes} x {bins}",
            dc.classes, dc.bins
        )));
    }
    Ok(())
}

fn check_dists(items: &[LabeledDistribution], classes: usize, bins: usize, what: &str) -> Result<(), CliError> {
    if let Some(it) = items.iter().find(|it| it.dist.classes() != classes || it.dist.bins() != bins) {
        return Err(CliError::Mismatch(format!(
            "{what} holds {} classes x {} bins, the run uses {classes} x {bins}",
            it.dist.classes(),
            it.dist.bins()
        )));
    }
    Ok(())
}

pub fn train_cnn_cmd(run: &Run) -> Result<Value, CliError> {
    let cfg = run.cfg;
    check_data_paths(cfg)?;
    let ckpt = run.p("cnn.ckpt");
    let mut out = run.outputs(&with_sidecars(&[ckpt.clone()]))?;
    let data = load_data(cfg)?;
    let (train, val, _) = data
        .train
        .split([1.0 - cfg.data.val_fraction, cfg.data.val_fraction, 0.0], cfg.seed)?;
    let shape = train
        .image_shape()
        .ok_or_else(|| softdist::Error::EmptyPool("empty training set".into()))?;
    let arch = match cfg.cnn.arch {
        ArchKind::Lenet => NetArch::lenet(shape, train.classes)?,
        ArchKind::Mlp => NetArch::mlp(shape.iter().product(), &cfg.cnn.hidden, train.classes)?,
    };
    let mut train_cfg = cfg.cnn.train.clone();
    train_cfg.seed = cfg.seed;
    eprintln!("training on {} images, validating on {}", train.len(), val.len());
    let model = train_cnn(&train, &val, &arch, &train_cfg)?;
    let test_acc = if data.test.is_empty() { None } else { Some(100.0 * model.accuracy(&data.test)?) };
    out.binary(ckpt, model.to_bytes());
    let metrics = json!({
        "val_accuracy": model.meta.val_accuracy.map(|a| 100.0 * a),
        "test_accuracy": test_acc,
        "epochs": model.meta.epochs,
        "outputs": out.paths(),
    });
    out.commit()?;
    Ok(metrics)
}

pub fn attack_cmd(run: &Run) -> Result<Value, CliError> {
    let cfg = run.cfg;
    let section = cfg.attack()?;
    section.method.validate()?;
    check_data_paths(cfg)?;
    let model = load_cnn(run)?;
    let (m, t) = adv_paths(run, section.source);
    let mut planned = with_sidecars(&[t.clone()]);
    planned.push(m.clone());
    let mut out = run.outputs(&planned)?;
    let data = load_data(cfg)?;
    let ds = match section.source {
        Split::Train => &data.train,
        Split::Test => &data.test,
    };
    let pool: Vec<(usize, &Image, usize)> = ds
        .images
        .iter()
        .zip(&ds.labels)
        .take(section.size)
        .enumerate()
        .map(|(i, (x, &y))| (i, x, y))
        .collect();
    eprintln!("attacking {} {} images with {}", pool.len(), section.source.name(), section.method.name());
    let set = attack_pool(&model, &section.method, &pool, cfg.seed)?;
    let manifest: Value = serde_json::from_str(&set.manifest_json()?).map_err(softdist::Error::from)?;
    out.json(m, manifest)?;
    out.binary(t, encode_images(&set.images)?);
    let metrics = json!({
        "attacked": set.records.len(),
        "skipped": set.skipped,
        "success_rate": 100.0 * set.success_rate(),
        "mean_l2_normalized": set.mean_l2(),
        "outputs": out.paths(),
    });
    out.commit()?;
    Ok(metrics)
}

pub fn build_dists_cmd(run: &Run) -> Result<Value, CliError> {
    let cfg = run.cfg;
    let defense = defense(cfg)?;
    check_data_paths(cfg)?;
    let model = load_cnn(run)?;
    let name = cfg.dists.source.name();
    let (bin, csv) = (run.p(&format!("dists_{name}.bin")), run.p(&format!("dists_{name}.csv")));
    let mut planned = with_sidecars(&[bin.clone()]);
    planned.push(csv.clone());
    let mut out = run.outputs(&planned)?;
    let data = load_data(cfg)?;
    let adv;
    let items: Vec<(u64, &Image, usize)> = match cfg.dists.source {
        DistSource::Train => triples(&data.train, cfg.dists.size, pool_id::TRAIN),
        DistSource::TrainAdversarial => {
            adv = load_adv(run, Split::Train)?;
            adv.records
                .iter()
                .zip(&adv.images)
                .filter(|(r, _)| r.success)
                .map(|(r, x)| (TRAIN_ADVERSARIAL + r.index as u64, x, r.label))
                .collect()
        }
    };
    if items.is_empty() {
        return Err(softdist::Error::EmptyPool(format!("no {name} images for distributions")).into());
    }
    eprintln!("building {} distributions with {}", items.len(), defense.transform.id());
    let dists = build_distributions(&model, &defense, &items)?;
    let mut body = Vec::new();
    let refs: Vec<(u64, &softdist::SoftmaxDistribution)> = dists.iter().map(|d| (d.image_id, &d.dist)).collect();
    write_csv(&mut body, &refs)?;
    out.binary(bin, encode_set(&dists)?);
    out.csv(csv, body);
    let metrics = json!({ "distributions": dists.len(), "outputs": out.paths() });
    out.commit()?;
    Ok(metrics)
}

fn load_dists(run: &Run, source: DistSource) -> Result<Vec<LabeledDistribution>, CliError> {
    let path = run.p(&format!("dists_{}.bin", source.name()));
    require(&path)?;
    Ok(decode_set(&read(&path)?)?)
}

fn base_config(cfg: &CliConfig, base: BaseHead) -> DcTrainConfig {
    match base {
        BaseHead::Mlp => DcTrainConfig::Mlp(cfg.dc.mlp.clone()),
        BaseHead::Rf => DcTrainConfig::Rf(cfg.dc.rf.clone()),
    }
}

pub fn train_dc_cmd(run: &Run) -> Result<Value, CliError> {
    let cfg = run.cfg;
    let defense = defense(cfg)?;
    let head = cfg.dc.head;
    let ckpt = run.p(&format!("dc_{}.ckpt", head.name()));
    let mut out = run.outputs(&with_sidecars(&[ckpt.clone()]))?;
    let clean = load_dists(run, DistSource::Train)?;
    let classes = clean.first().map_or(0, |d| d.dist.classes());
    check_dists(&clean, classes, defense.kde.bins, "dists_train.bin")?;
    let model = match head {
        Head::Mlp => train_dc(&clean, &base_config(cfg, BaseHead::Mlp))?,
        Head::Rf => train_dc(&clean, &base_config(cfg, BaseHead::Rf))?,
        Head::Lat => {
            let adv = load_dists(run, DistSource::TrainAdversarial)?;
            check_dists(&adv, classes, defense.kde.bins, "dists_train_adversarial.bin")?;
            train_lat(&clean, &adv, &base_config(cfg, cfg.dc.lat_base))?
        }
    };
    let mut correct = 0;
    for d in &clean {
        correct += usize::from(predict_dc(&model, &d.dist)? == d.label);
    }
    out.binary(ckpt, model.to_bytes());
    let metrics = json!({
        "head": head.name(),
        "train_accuracy": 100.0 * correct as f64 / clean.len() as f64,
        "outputs": out.paths(),
    });
    out.commit()?;
    Ok(metrics)
}

fn load_heads(run: &Run, heads: &[Head], classes: usize, bins: usize) -> Result<Vec<(String, DcModel)>, CliError> {
    let mut sorted = heads.to_vec();
    sorted.sort();
    sorted.dedup();
    sorted
        .into_iter()
        .map(|h| {
            let path = run.p(&format!("dc_{}.ckpt", h.name()));
            require(&path)?;
            let dc = DcModel::from_bytes(&read(&path)?)?;
            check_shapes(&dc, classes, bins, &format!("dc_{}.ckpt", h.name()))?;
            Ok((h.name().to_string(), dc))
        })
        .collect()
}

pub fn evaluate_cmd(run: &Run) -> Result<Value, CliError> {
    let cfg = run.cfg;
    let defense = defense(cfg)?;
    check_data_paths(cfg)?;
    let model = load_cnn(run)?;
    let heads = load_heads(run, &cfg.evaluate.heads, model.classes(), defense.kde.bins)?;
    let adv = match &cfg.attack {
        Some(a) if a.source == Split::Test => Some(load_adv(run, Split::Test)?),
        _ => None,
    };
    let (json_path, csv_path) = (run.p("eval.json"), run.p("eval_records.csv"));
    let mut out = run.outputs(&[json_path.clone(), csv_path.clone()])?;
    let data = load_data(cfg)?;
    let test = data.test.head(cfg.evaluate.clean_size);
    let head_refs: Vec<(String, &DcModel)> = heads.iter().map(|(n, m)| (n.clone(), m)).collect();
    let inputs = EvalInputs {
        model: &model,
        images: &test.images,
        labels: &test.labels,
        adversarial: adv.as_ref(),
        heads: &head_refs,
    };
    eprintln!("evaluating {} clean images, heads: vote {:?}", test.len(), cfg.evaluate.heads);
    let report = eval_pipeline(&inputs, &defense, cfg.evaluate.filtered)?;
    let mut body = Vec::new();
    report.write_records_csv(&mut body)?;
    out.json(json_path, &report)?;
    out.csv(csv_path, body);
    let metrics = json!({
        "accuracy": report.accuracy,
        "pools": report.pools,
        "outputs": out.paths(),
    });
    out.commit()?;
    Ok(metrics)
}

/// CNN-correct clean test images and successful adversarial images, each
/// grouped by true class and capped at `per_class`.
fn class_pools(model: &CnnModel, test: &Dataset, adv: &AdversarialSet, per_class: usize) -> Result<(Vec<Vec<Image>>, Vec<Vec<Image>>), CliError> {
    let classes = model.classes();
    let mut clean = vec![Vec::new(); classes];
    for (x, &y) in test.images.iter().zip(&test.labels) {
        if clean[y].len() < per_class && model.predict(x)?.label == y {
            clean[y].push(x.clone());
        }
    }
    let mut advs = vec![Vec::new(); classes];
    for (r, x) in adv.records.iter().zip(&adv.images) {
        if r.success && advs[r.label].len() < per_class {
            advs[r.label].push(x.clone());
        }
    }
    Ok((clean, advs))
}

fn curve_section<'a>(s: &'a Option<CurveSection>, name: &str) -> Result<&'a CurveSection, CliError> {
    s.as_ref().ok_or_else(|| CliError::Schema(format!("missing [{name}] section")))
}

pub fn distances_cmd(run: &Run) -> Result<Value, CliError> {
    let cfg = run.cfg;
    let section = curve_section(&cfg.distances, "distances")?;
    let defense = defense(cfg)?;
    let curve = CurveConfig {
        family: section.family,
        grid: section.grid.clone(),
        n_samples: defense.n_samples,
        seeds: section.seeds.clone(),
        kde: defense.kde,
    };
    curve.validate()?;
    check_data_paths(cfg)?;
    let model = load_cnn(run)?;
    let adv = load_adv(run, Split::Test)?;
    let path = run.p("distances.csv");
    let mut out = run.outputs(&[path.clone()])?;
    let data = load_data(cfg)?;
    let (clean, advs) = class_pools(&model, &data.test, &adv, section.per_class)?;
    eprintln!("distance curves over {} magnitudes and {} seeds", curve.grid.len(), curve.seeds.len());
    let report = distance_curves(&model, &clean, &advs, &curve)?;
    let mut body = Vec::new();
    report.write_csv(&mut body)?;
    out.csv(path, body);
    let metrics = json!({ "points": report.points.len(), "outputs": out.paths() });
    out.commit()?;
    Ok(metrics)
}

pub fn confusion_cmd(run: &Run) -> Result<Value, CliError> {
    let cfg = run.cfg;
    let section = curve_section(&cfg.confusion, "confusion")?;
    let defense = defense(cfg)?;
    for &d in &section.grid {
        section.family.at(d)?;
    }
    check_data_paths(cfg)?;
    let model = load_cnn(run)?;
    let adv = load_adv(run, Split::Test)?;
    let path = run.p("confusion.csv");
    let mut out = run.outputs(&[path.clone()])?;
    let data = load_data(cfg)?;
    let (clean, advs) = class_pools(&model, &data.test, &adv, section.per_class)?;
    let tables = vote_confusion(&model, &section.family, &section.grid, &clean, &advs, defense.n_samples, cfg.seed)?;
    let mut body = Vec::new();
    write_confusion_csv(&mut body, &tables)?;
    out.csv(path, body);
    let metrics = json!({ "tables": tables.len(), "outputs": out.paths() });
    out.commit()?;
    Ok(metrics)
}

pub fn sweep_cmd(run: &Run) -> Result<Value, CliError> {
    let cfg = run.cfg;
    let section = cfg.sweep.as_ref().ok_or_else(|| CliError::Schema("missing [sweep] section".into()))?;
    let defense = defense(cfg)?;
    let max_n = section.grid.iter().copied().max().unwrap_or(0);
    if max_n == 0 || section.grid.contains(&0) {
        return Err(CliError::Schema("sweep.grid needs positive sample counts".into()));
    }
    check_data_paths(cfg)?;
    let model = load_cnn(run)?;
    let adv = match &cfg.attack {
        Some(a) if a.source == Split::Test => Some(load_adv(run, Split::Test)?),
        _ => None,
    };
    let path = run.p("sweep_n.csv");
    let mut out = run.outputs(&[path.clone()])?;
    let data = load_data(cfg)?;
    let train = triples(&data.train, section.train_size, pool_id::TRAIN);
    let clean: Vec<(u64, &Image, usize)> = triples(&data.test, section.clean_size, pool_id::CLEAN)
        .into_iter()
        .filter(|&(_, x, y)| model.predict(x).map(|p| p.label == y).unwrap_or(false))
        .collect();
    let advs: Vec<(u64, &Image, usize)> = adv
        .iter()
        .flat_map(|a| a.records.iter().zip(&a.images))
        .filter(|(r, _)| r.success)
        .map(|(r, x)| (pool_id::ADVERSARIAL + r.index as u64, x, r.label))
        .collect();
    eprintln!("sampling N={max_n} for {} train, {} clean, {} adversarial images", train.len(), clean.len(), advs.len());
    let samples = sweep_samples(&model, &defense.transform, max_n, cfg.seed, &train, &clean, &advs)?;
    let head = match section.head {
        BaseHead::Mlp => "mlp",
        BaseHead::Rf => "rf",
    };
    let rows = n_samples_sweep(&samples, &section.grid, &defense.kde, &base_config(cfg, section.head), head)?;
    let mut body = Vec::new();
    write_sweep_csv(&mut body, &rows)?;
    out.csv(path, body);
    let metrics = json!({ "rows": rows, "outputs": out.paths() });
    out.commit()?;
    Ok(metrics)
}

pub fn boundary_cmd(run: &Run) -> Result<Value, CliError> {
    let cfg = run.cfg;
    let section = cfg.boundary.as_ref().ok_or_else(|| CliError::Schema("missing [boundary] section".into()))?;
    section.attack.validate()?;
    let mut defense = defense(cfg)?;
    defense.n_samples = section.n_samples;
    defense.validate()?;
    check_data_paths(cfg)?;
    let model = load_cnn(run)?;
    let heads = load_heads(run, &section.heads, model.classes(), defense.kde.bins)?;
    let (csv_path, json_path) = (run.p("boundary.csv"), run.p("boundary.json"));
    let mut out = run.outputs(&[csv_path.clone(), json_path.clone()])?;
    let data = load_data(cfg)?;
    let mut images = Vec::new();
    for (i, (x, &y)) in data.test.images.iter().zip(&data.test.labels).enumerate() {
        if images.len() == section.images {
            break;
        }
        if model.predict(x)?.label == y {
            images.push((i, x, y));
        }
    }
    let vote = DefendedModel {
        cnn: &model,
        defense: defense.clone(),
        head: None,
    };
    let defended: Vec<(String, DefendedModel)> = heads
        .iter()
        .map(|(n, dc)| {
            (
                n.clone(),
                DefendedModel {
                    cnn: &model,
                    defense: defense.clone(),
                    head: Some(dc),
                },
            )
        })
        .collect();
    let mut targets: Vec<(String, &dyn DecisionModel)> = vec![("cnn".into(), &model), ("vote".into(), &vote)];
    targets.extend(defended.iter().map(|(n, m)| (n.clone(), m as &dyn DecisionModel)));
    eprintln!("boundary attack on {} images against {} targets", images.len(), targets.len());
    let report = boundary_eval(&targets, &images, &section.attack, cfg.seed)?;
    let mut body = Vec::new();
    report.write_csv(&mut body)?;
    out.csv(csv_path, body);
    out.json(json_path, &report)?;
    let metrics = json!({ "rows": report.rows, "outputs": out.paths() });
    out.commit()?;
    Ok(metrics)
}
