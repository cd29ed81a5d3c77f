//! The experiment config file: one TOML document with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use softdist::attacks::{AttackConfig, BoundaryConfig};
use softdist::classifiers::{MlpConfig, RfConfig};
use softdist::kde::KdeConfig;
use softdist::metrics::TransformFamily;
use softdist::transforms::TransformSpec;
use softdist::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    /// Master seed for every derived random stream.
    #[serde(default = "one")]
    pub seed: u64,
    /// Directory holding every artifact of the experiment.
    pub out_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub cnn: CnnConfig,
    pub attack: Option<AttackSection>,
    pub defense: Option<DefenseSection>,
    #[serde(default)]
    pub dists: DistsSection,
    #[serde(default)]
    pub dc: DcSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    pub distances: Option<CurveSection>,
    pub confusion: Option<CurveSection>,
    pub sweep: Option<SweepSection>,
    pub boundary: Option<BoundarySection>,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with the four MNIST IDX files.
    pub mnist_dir: Option<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
    /// Keep only the first examples of the training set.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Fraction of the training set held out for validation.
    #[serde(default = "val_fraction")]
    pub val_fraction: f64,
}

fn val_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub classes: usize,
    pub dims: usize,
    pub separation: f64,
    /// Fraction used as the test set.
    #[serde(default = "test_fraction")]
    pub test_fraction: f64,
}

fn test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    #[default]
    Lenet,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub arch: ArchKind,
    /// Hidden widths when `arch = "mlp"`.
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    /// Which split the attacked images come from.
    #[serde(default = "test_split")]
    pub source: Split,
    /// Number of leading images of that split offered to the attack.
    pub size: usize,
    pub method: AttackConfig,
}

fn test_split() -> Split {
    Split::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    pub transform: TransformSpec,
    pub n_samples: usize,
    #[serde(default)]
    pub kde: KdeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistSource {
    /// Clean training images.
    Train,
    /// Adversarial images from the attack on the training split.
    TrainAdversarial,
}

impl DistSource {
    pub fn name(self) -> &'static str {
        match self {
            DistSource::Train => "train",
            DistSource::TrainAdversarial => "train_adversarial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistsSection {
    pub source: DistSource,
    /// Leading training images used; adversarial sources use every
    /// successful attack.
    pub size: usize,
}

impl Default for DistsSection {
    fn default() -> Self {
        Self {
            source: DistSource::Train,
            size: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Mlp,
    Rf,
    Lat,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Mlp => "mlp",
            Head::Rf => "rf",
            Head::Lat => "lat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseHead {
    Mlp,
    Rf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcSection {
    /// Which classifier `train-dc` fits.
    pub head: Head,
    /// Model family used for the LAT head.
    pub lat_base: BaseHead,
    pub mlp: MlpConfig,
    pub rf: RfConfig,
}

impl Default for DcSection {
    fn default() -> Self {
        Self {
            head: Head::Mlp,
            lat_base: BaseHead::Mlp,
            mlp: MlpConfig::default(),
            rf: RfConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Trained heads to evaluate next to the vote.
    pub heads: Vec<Head>,
    /// Leading test images forming the clean pool before filtering.
    pub clean_size: usize,
    /// Evaluate only CNN-correct clean images and successful attacks.
    pub filtered: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            heads: Vec::new(),
            clean_size: 1000,
            filtered: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSection {
    pub family: TransformFamily,
    pub grid: Vec<f64>,
    /// Images per class and pool.
    pub per_class: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub grid: Vec<usize>,
    pub head: BaseHead,
    /// Training images whose distributions train the classifier at each N.
    pub train_size: usize,
    pub clean_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySection {
    pub images: usize,
    /// Transformed samples per defended query.
    pub n_samples: usize,
    #[serde(default)]
    pub heads: Vec<Head>,
    #[serde(default)]
    pub attack: BoundaryConfig,
}

impl CliConfig {
    /// Reads `path`, applies `key.path=value` overrides, and checks the schema.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Schema(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: CliConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Schema(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), CliError> {
        match (&self.data.mnist_dir, &self.data.synthetic) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(CliError::Schema("data needs exactly one of mnist_dir or synthetic".into())),
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(CliError::Schema("data.val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn attack(&self) -> Result<&AttackSection, CliError> {
        self.attack.as_ref().ok_or_else(|| CliError::Schema("missing [attack] section".into()))
    }

    pub fn defense(&self) -> Result<&DefenseSection, CliError> {
        self.defense.as_ref().ok_or_else(|| CliError::Schema("missing [defense] section".into()))
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a
/// bare string.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Schema(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Schema(format!("override {key:?}: {p:?} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
