//! Softmax samples over transformed copies of an image and their per-class
//! kernel density estimates.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnn::CnnModel;
use crate::container::{self, BlobSpec};
use crate::error::{CheckpointError, Error, Result};
use crate::rng::RngStream;
use crate::tensor::Image;
use crate::transforms::{self, TransformSpec};

/// Row sums of softmax samples must be within this of one.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// `N x C` softmax vectors from transformed samples of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxSampleSet {
    samples: Vec<Vec<f64>>,
    classes: usize,
    pub image_id: u64,
    pub spec_id: String,
}

impl SoftmaxSampleSet {
    pub fn new(samples: Vec<Vec<f64>>, image_id: u64, spec_id: impl Into<String>) -> Result<Self> {
        let classes = samples
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("sample set needs at least one row"))?;
        if classes == 0 {
            return Err(Error::invalid("softmax rows must be nonempty"));
        }
        for (i, row) in samples.iter().enumerate() {
            if row.len() != classes {
                return Err(Error::shape(classes, row.len()));
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("row {i} is not a probability vector (sum {sum})")));
            }
        }
        Ok(Self {
            samples,
            classes,
            image_id,
            spec_id: spec_id.into(),
        })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// The first `n` samples. Sample `i` always comes from stream `i`, so
    /// truncation gives exactly the set a smaller `N` would have produced.
    pub fn truncate(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid(format!("cannot keep {n} of {} samples", self.len())));
        }
        Ok(Self {
            samples: self.samples[..n].to_vec(),
            ..self.clone()
        })
    }
}

/// Softmax outputs of `model` on `n` transformed copies of `x`. Sample `i`
/// uses the stream `(master_seed, image_id, i)`.
pub fn collect_samples(
    model: &CnnModel,
    spec: &TransformSpec,
    x: &Image,
    n: usize,
    master_seed: u64,
    image_id: u64,
) -> Result<SoftmaxSampleSet> {
    if n == 0 {
        return Err(Error::invalid("N must be >= 1"));
    }
    spec.validate()?;
    let shape: [usize; 3] = x
        .shape()
        .try_into()
        .map_err(|_| Error::shape("[h, w, c]", x.shape()))?;
    if spec.output_shape(shape) != model.arch.input {
        return Err(Error::shape(model.arch.input, spec.output_shape(shape)));
    }
    let rows = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let t = transforms::sample(spec, x, RngStream::new(master_seed, image_id, i))?;
            Ok(model.predict(&t)?.probs)
        })
        .collect::<Result<Vec<_>>>()?;
    SoftmaxSampleSet::new(rows, image_id, spec.id())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdeConfig {
    pub kernel_width: f64,
    pub bins: usize,
}

impl Default for KdeConfig {
    fn default() -> Self {
        Self {
            kernel_width: 0.05,
            bins: 50,
        }
    }
}

impl KdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kernel_width > 0.0 && self.kernel_width.is_finite()) {
            return Err(Error::invalid("kernel width must be positive"));
        }
        if self.bins < 2 {
            return Err(Error::invalid("need at least 2 bins"));
        }
        Ok(())
    }

    pub fn bin_center(&self, b: usize) -> f64 {
        (b as f64 + 0.5) / self.bins as f64
    }
}

/// Gaussian KDE `(1/N) sum_i phi((s - v_i) / delta) / delta` at `s`.
/// Values are summed in the order given.
pub fn kde_density(values: &[f64], s: f64, kernel_width: f64) -> f64 {
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * kernel_width);
    let total: f64 = values
        .iter()
        .map(|&v| {
            let z = (s - v) / kernel_width;
            (-0.5 * z * z).exp()
        })
        .sum();
    norm * total / values.len() as f64
}

/// Per-class binned densities over `[0, 1]`; each row sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxDistribution {
    classes: usize,
    bins: usize,
    mass: Vec<f64>,
    pub n_samples: usize,
    pub kernel_width: f64,
}

impl SoftmaxDistribution {
    /// Wraps a row-major `classes x bins` mass array, checking that each row
    /// is a distribution within `1e-9`.
    pub fn from_mass(classes: usize, bins: usize, mass: Vec<f64>, n_samples: usize, kernel_width: f64) -> Result<Self> {
        if classes == 0 || bins < 2 {
            return Err(Error::invalid(format!("bad distribution shape {classes} x {bins}")));
        }
        if mass.len() != classes * bins {
            return Err(Error::shape(classes * bins, mass.len()));
        }
        for (j, row) in mass.chunks_exact(bins).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&m| !(m >= 0.0)) || (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("class {j} row is not normalized (sum {sum})")));
            }
        }
        Ok(Self {
            classes,
            bins,
            mass,
            n_samples,
            kernel_width,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.mass[class * self.bins..(class + 1) * self.bins]
    }

    /// Bins of all classes concatenated, as classifier input.
    pub fn flatten_f32(&self) -> Vec<f32> {
        self.mass.iter().map(|&m| m as f32).collect()
    }
}

/// Evaluates the per-class KDE at the bin centers and renormalizes each row.
///
/// Sample values are sorted and equal values merged into weights before
/// summation, so the result does not depend on sample order and `N` copies of
/// one sample give exactly the single-sample distribution. A row whose densities all underflow (only
/// possible for tiny kernel widths) falls back to a histogram of the samples.
pub fn build_distribution(set: &SoftmaxSampleSet, cfg: &KdeConfig) -> Result<SoftmaxDistribution> {
    cfg.validate()?;
    let (c, b) = (set.classes(), cfg.bins);
    let mut mass = Vec::with_capacity(c * b);
    let n = set.len() as f64;
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * cfg.kernel_width);
    let mut values = Vec::with_capacity(set.len());
    for j in 0..c {
        values.clear();
        values.extend(set.rows().iter().map(|r| r[j]));
        values.sort_by(f64::total_cmp);
        let mut weighted: Vec<(f64, f64)> = Vec::new();
        for &v in &values {
            match weighted.last_mut() {
                Some((u, count)) if *u == v => *count += 1.0,
                _ => weighted.push((v, 1.0)),
            }
        }
        let mut row: Vec<f64> = (0..b)
            .map(|k| {
                let s = cfg.bin_center(k);
                let total: f64 = weighted
                    .iter()
                    .map(|&(v, count)| {
                        let z = (s - v) / cfg.kernel_width;
                        (count / n) * (-0.5 * z * z).exp()
                    })
                    .sum();
                norm * total
            })
            .collect();
        let mut sum: f64 = row.iter().sum();
        if !(sum > 0.0) {
            row.iter_mut().for_each(|m| *m = 0.0);
            for &v in &values {
                row[((v * b as f64) as usize).min(b - 1)] += 1.0;
            }
            sum = values.len() as f64;
        }
        mass.extend(row.into_iter().map(|m| m / sum));
    }
    SoftmaxDistribution::from_mass(c, b, mass, set.len(), cfg.kernel_width)
}

/// A distribution with the source image id and its true label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDistribution {
    pub image_id: u64,
    pub label: usize,
    pub dist: SoftmaxDistribution,
}

pub const DIST_MAGIC: [u8; 4] = *b"SDDH";

#[derive(Serialize, Deserialize)]
struct SetDescriptor {
    kind: String,
    classes: usize,
    bins: usize,
    kernel_width: f64,
    n_samples: usize,
    image_ids: Vec<u64>,
    labels: Vec<usize>,
}

/// Binary form: the shared container with one f64 blob per distribution.
pub fn encode_set(items: &[LabeledDistribution]) -> Result<Vec<u8>> {
    let first = items
        .first()
        .ok_or_else(|| Error::EmptyPool("no distributions to write".into()))?;
    let d0 = &first.dist;
    for it in items {
        let d = &it.dist;
        if (d.classes, d.bins, d.n_samples) != (d0.classes, d0.bins, d0.n_samples) || d.kernel_width != d0.kernel_width {
            return Err(Error::invalid(format!(
                "image {} has different distribution metadata than image {}",
                it.image_id, first.image_id
            )));
        }
    }
    let desc = SetDescriptor {
        kind: "softmax-distributions".into(),
        classes: d0.classes,
        bins: d0.bins,
        kernel_width: d0.kernel_width,
        n_samples: d0.n_samples,
        image_ids: items.iter().map(|i| i.image_id).collect(),
        labels: items.iter().map(|i| i.label).collect(),
    };
    let text = serde_json::to_string(&desc)?;
    let blobs: Vec<&[f64]> = items.iter().map(|i| i.dist.mass()).collect();
    Ok(container::encode(DIST_MAGIC, &text, &blobs))
}

pub fn decode_set(bytes: &[u8]) -> Result<Vec<LabeledDistribution>> {
    let mut desc: Option<SetDescriptor> = None;
    let (_, blobs) = container::decode::<f64>(DIST_MAGIC, bytes, |text| {
        let d: SetDescriptor =
            serde_json::from_str(text).map_err(|e| CheckpointError::Descriptor(e.to_string()))?;
        if d.kind != "softmax-distributions" || d.image_ids.len() != d.labels.len() {
            return Err(CheckpointError::Descriptor(format!("not a distribution set: {:?}", d.kind)));
        }
        let specs = d
            .image_ids
            .iter()
            .enumerate()
            .map(|(i, id)| BlobSpec::exact(format!("distribution {i} (image {id})"), d.classes * d.bins))
            .collect();
        desc = Some(d);
        Ok(specs)
    })?;
    let d = desc.expect("layout callback ran");
    blobs
        .into_iter()
        .zip(d.image_ids.iter().zip(&d.labels))
        .map(|(mass, (&image_id, &label))| {
            Ok(LabeledDistribution {
                image_id,
                label,
                dist: SoftmaxDistribution::from_mass(d.classes, d.bins, mass, d.n_samples, d.kernel_width)?,
            })
        })
        .collect()
}

pub fn save_set(path: impl AsRef<Path>, items: &[LabeledDistribution]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_set(items)?).map_err(|e| Error::file(path, e))
}

pub fn load_set(path: impl AsRef<Path>) -> Result<Vec<LabeledDistribution>> {
    let path = path.as_ref();
    decode_set(&fs::read(path).map_err(|e| Error::file(path, e))?)
}

#[derive(Serialize, Deserialize)]
struct MassRecord {
    image_id: u64,
    class_j: usize,
    bin_b: usize,
    mass: f64,
}

/// Long-format CSV with columns `image_id, class_j, bin_b, mass`. Values use
/// the shortest representation that round-trips.
pub fn write_csv<W: Write>(out: W, items: &[(u64, &SoftmaxDistribution)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for &(image_id, dist) in items {
        for j in 0..dist.classes {
            for (b, &mass) in dist.row(j).iter().enumerate() {
                w.serialize(MassRecord {
                    image_id,
                    class_j: j,
                    bin_b: b,
                    mass,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads [`write_csv`] output. The CSV carries no KDE metadata, so the
/// caller supplies it. Lines starting with `#` are skipped.
pub fn read_csv<R: Read>(input: R, n_samples: usize, kernel_width: f64) -> Result<Vec<(u64, SoftmaxDistribution)>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let mut groups: Vec<(u64, Vec<MassRecord>)> = Vec::new();
    for rec in rdr.deserialize() {
        let rec: MassRecord = rec?;
        match groups.last_mut() {
            Some((id, recs)) if *id == rec.image_id => recs.push(rec),
            _ => groups.push((rec.image_id, vec![rec])),
        }
    }
    groups
        .into_iter()
        .map(|(id, recs)| {
            let classes = recs.iter().map(|r| r.class_j).max().unwrap_or(0) + 1;
            let bins = recs.iter().map(|r| r.bin_b).max().unwrap_or(0) + 1;
            if recs.len() != classes * bins {
                return Err(Error::invalid(format!("image {id}: {} cells for a {classes} x {bins} grid", recs.len())));
            }
            let mut mass = vec![f64::NAN; classes * bins];
            for r in &recs {
                mass[r.class_j * bins + r.bin_b] = r.mass;
            }
            Ok((id, SoftmaxDistribution::from_mass(classes, bins, mass, n_samples, kernel_width)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: Vec<Vec<f64>>) -> SoftmaxSampleSet {
        SoftmaxSampleSet::new(rows, 0, "test").unwrap()
    }

    #[test]
    fn single_sample_peak_density() {
        let d = kde_density(&[0.5], 0.5, 0.05);
        assert!((d - 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * 0.05)).abs() < 1e-12);
        assert!((d - 7.979).abs() < 1e-3);
    }

    #[test]
    fn rows_normalized_and_symmetric() {
        let s = set(vec![vec![0.2, 0.8], vec![0.8, 0.2]]);
        let h = build_distribution(&s, &KdeConfig::default()).unwrap();
        for j in 0..2 {
            let row = h.row(j);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for k in 0..row.len() {
                assert!((row[k] - row[row.len() - 1 - k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn repeated_sample_equals_single() {
        let cfg = KdeConfig::default();
        let one = build_distribution(&set(vec![vec![0.3, 0.7]]), &cfg).unwrap();
        let many = build_distribution(&set(vec![vec![0.3, 0.7]; 9]), &cfg).unwrap();
        assert_eq!(one.mass(), many.mass());
    }

    #[test]
    fn wide_kernel_is_near_uniform() {
        let s = set(vec![vec![0.0, 1.0], vec![0.1, 0.9]]);
        let h = build_distribution(&s, &KdeConfig { kernel_width: 10.0, bins: 20 }).unwrap();
        let (lo, hi) = h.mass().iter().fold((1.0f64, 0.0f64), |(a, b), &m| (a.min(m), b.max(m)));
        assert!(hi - lo < 1e-3, "{lo} {hi}");
    }

    #[test]
    fn tiny_kernel_falls_back_to_histogram() {
        let s = set(vec![vec![0.0, 1.0]]);
        let h = build_distribution(&s, &KdeConfig { kernel_width: 1e-6, bins: 4 }).unwrap();
        assert_eq!(h.row(0), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(h.row(1), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn sample_set_validation() {
        assert!(SoftmaxSampleSet::new(vec![], 0, "x").is_err());
        assert!(SoftmaxSampleSet::new(vec![vec![0.5, 0.6]], 0, "x").is_err());
        assert!(SoftmaxSampleSet::new(vec![vec![0.5, 0.5], vec![1.0]], 0, "x").is_err());
        let s = set(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(s.truncate(1).unwrap().rows(), &[vec![1.0, 0.0]]);
        assert!(s.truncate(3).is_err());
    }

    fn sample_items() -> Vec<LabeledDistribution> {
        let cfg = KdeConfig { kernel_width: 0.05, bins: 7 };
        (0..3)
            .map(|i| {
                let p = 0.1 + 0.3 * i as f64;
                LabeledDistribution {
                    image_id: 10 + i,
                    label: i as usize % 2,
                    dist: build_distribution(&set(vec![vec![p, 1.0 - p], vec![1.0 - p, p]]), &cfg).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let items = sample_items();
        let bytes = encode_set(&items).unwrap();
        assert_eq!(decode_set(&bytes).unwrap(), items);
        assert!(matches!(
            decode_set(&bytes[..bytes.len() - 20]),
            Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
        ));
        assert!(matches!(encode_set(&[]), Err(Error::EmptyPool(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let items = sample_items();
        let refs: Vec<(u64, &SoftmaxDistribution)> = items.iter().map(|i| (i.image_id, &i.dist)).collect();
        let mut buf = b"# provenance test\n".to_vec();
        write_csv(&mut buf, &refs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().nth(1).unwrap() == "image_id,class_j,bin_b,mass");
        let back = read_csv(&buf[..], 2, 0.05).unwrap();
        assert_eq!(back.len(), 3);
        for ((id, d), it) in back.iter().zip(&items) {
            assert_eq!(*id, it.image_id);
            assert_eq!(d, &it.dist);
        }
    }
}
