//! Labeled image datasets: IDX loading, stratified splits, synthetic blobs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, IdxError, Result};
use crate::rng::{keyed_rng, Domain};
use crate::tensor::Image;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} >= class count {classes}")));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.shape() != first.shape()) {
                return Err(Error::invalid("images have inconsistent shapes"));
            }
        }
        if images.iter().any(|im| !im.is_unit_range()) {
            return Err(Error::invalid("pixel values outside [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.images.first().map(|im| {
            let (h, w, c) = im.hwc();
            [h, w, c]
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!(
                "index {bad} out of range for dataset of {}",
                self.len()
            )));
        }
        Ok(Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// Stratified `(train, val, test)` split. Within each class the examples
    /// are shuffled with the seed and cut at the rounded cumulative fractions;
    /// each split keeps the source order.
    pub fn split(&self, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
        let [a, b, c] = fractions;
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split fractions {fractions:?} must be in [0,1] and sum to 1"
            )));
        }
        let mut parts: [Vec<usize>; 3] = Default::default();
        for class in 0..self.classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            let mut rng = keyed_rng(Domain::Split, seed, class as u64, 0);
            idx.shuffle(&mut rng);
            let n = idx.len() as f64;
            let cut1 = (a * n).round() as usize;
            let cut2 = (((a + b) * n).round() as usize).max(cut1).min(idx.len());
            parts[0].extend_from_slice(&idx[..cut1]);
            parts[1].extend_from_slice(&idx[cut1..cut2]);
            parts[2].extend_from_slice(&idx[cut2..]);
        }
        for p in &mut parts {
            p.sort_unstable();
        }
        Ok((
            self.subset(&parts[0])?,
            self.subset(&parts[1])?,
            self.subset(&parts[2])?,
        ))
    }

    /// First `n` examples (or all when shorter).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx).expect("in range")
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::file(path, e))
}

fn be_u32(bytes: &[u8], at: usize, file: &str) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| IdxError::DimensionMismatch {
            file: file.to_string(),
            detail: format!("header truncated at byte {at}"),
        })
}

/// Parses an IDX image file (`0x00000803`, n, rows, cols, pixels).
pub fn parse_idx_images(bytes: &[u8], file: &str) -> Result<Vec<Image>, IdxError> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::BadMagic {
            file: file.to_string(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, file)? as usize;
    let rows = be_u32(bytes, 8, file)? as usize;
    let cols = be_u32(bytes, 12, file)? as usize;
    let px = rows * cols;
    if px == 0 || bytes.len() != 16 + n * px {
        return Err(IdxError::DimensionMismatch {
            file: file.to_string(),
            detail: format!(
                "header declares {n} x {rows} x {cols} but payload is {} bytes",
                bytes.len().saturating_sub(16)
            ),
        });
    }
    Ok(bytes[16..]
        .chunks_exact(px)
        .map(|chunk| {
            let data = chunk.iter().map(|&b| b as f32 / 255.0).collect();
            Image::from_vec(&[rows, cols, 1], data).expect("sized by header")
        })
        .collect())
}

/// Parses an IDX label file (`0x00000801`, n, labels).
pub fn parse_idx_labels(bytes: &[u8], file: &str) -> Result<Vec<usize>, IdxError> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::BadMagic {
            file: file.to_string(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, file)? as usize;
    if bytes.len() != 8 + n {
        return Err(IdxError::DimensionMismatch {
            file: file.to_string(),
            detail: format!(
                "header declares {n} labels but payload is {} bytes",
                bytes.len() - 8
            ),
        });
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads an image/label IDX pair. The class count is one past the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx_images(&read_file(ip)?, &ip.display().to_string())?;
    let labels = parse_idx_labels(&read_file(lp)?, &lp.display().to_string())?;
    if images.len() != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        }
        .into());
    }
    let classes = labels.iter().max().map_or(1, |&m| m + 1);
    Ok(Dataset {
        images,
        labels,
        classes,
    })
}

pub fn encode_idx_images(images: &[Vec<u8>], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for im in images {
        assert_eq!(im.len(), rows * cols);
        out.extend_from_slice(im);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Noise scale of each synthetic cluster.
pub const BLOB_SPREAD: f64 = 0.05;

/// Gaussian class clusters in `[0,1]^dims`, stored as `1 x dims x 1` images.
///
/// Class `c` is centered at `0.5 + separation * BLOB_SPREAD * u_c / 2` for a
/// seeded random unit direction `u_c`; labels cycle through the classes.
pub fn synthetic_blobs(
    samples: usize,
    classes: usize,
    dims: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if samples == 0 || classes == 0 || dims == 0 {
        return Err(Error::invalid("samples, classes and dims must be >= 1"));
    }
    let mut rng = keyed_rng(Domain::Synthetic, seed, 0, 0);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let dir: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            dir.iter()
                .map(|d| 0.5 + separation * BLOB_SPREAD * 0.5 * d / norm)
                .collect()
        })
        .collect();
    let mut images = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let class = i % classes;
        let data = centers[class]
            .iter()
            .map(|&m| {
                let z: f64 = rng.sample(StandardNormal);
                (m + BLOB_SPREAD * z).clamp(0.0, 1.0) as f32
            })
            .collect();
        images.push(Image::from_vec(&[1, dims, 1], data)?);
        labels.push(class);
    }
    Dataset::new(images, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let a: Vec<u8> = (0..6).collect();
        let b: Vec<u8> = vec![255, 128, 1, 0, 17, 200];
        (encode_idx_images(&[a, b], 2, 3), encode_idx_labels(&[3, 7]))
    }

    #[test]
    fn parses_hand_built_fixture() {
        let (im, lb) = fixture();
        let images = parse_idx_images(&im, "im").unwrap();
        let labels = parse_idx_labels(&lb, "lb").unwrap();
        assert_eq!(labels, vec![3, 7]);
        assert_eq!(images[0].shape(), &[2, 3, 1]);
        let want: Vec<f32> = [255u8, 128, 1, 0, 17, 200].iter().map(|&b| b as f32 / 255.0).collect();
        assert_eq!(images[1].data(), &want[..]);
        assert_eq!(images[0].data()[5], 5.0 / 255.0);
    }

    #[test]
    fn wrong_magic_rejected() {
        let (im, lb) = fixture();
        assert!(matches!(
            parse_idx_images(&lb, "x"),
            Err(IdxError::BadMagic { found: 0x801, .. })
        ));
        assert!(matches!(
            parse_idx_labels(&im, "x"),
            Err(IdxError::BadMagic { found: 0x803, .. })
        ));
    }

    #[test]
    fn truncated_payload_is_dimension_mismatch() {
        let (im, _) = fixture();
        assert!(matches!(
            parse_idx_images(&im[..im.len() - 1], "x"),
            Err(IdxError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn count_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (im, _) = fixture();
        std::fs::write(dir.path().join("im"), im).unwrap();
        std::fs::write(dir.path().join("lb"), encode_idx_labels(&[1, 2, 3])).unwrap();
        let err = load_idx(dir.path().join("im"), dir.path().join("lb")).unwrap_err();
        assert!(matches!(
            err,
            Error::Idx(IdxError::CountMismatch { images: 2, labels: 3 })
        ));
    }

    fn two_class(n0: usize, n1: usize) -> Dataset {
        let images = (0..n0 + n1)
            .map(|i| Image::from_vec(&[1, 1, 1], vec![(i % 7) as f32 / 7.0]).unwrap())
            .collect();
        let labels = (0..n0 + n1).map(|i| usize::from(i >= n0)).collect();
        Dataset::new(images, labels, 2).unwrap()
    }

    #[test]
    fn split_identity_and_determinism() {
        let ds = two_class(30, 20);
        let (tr, va, te) = ds.split([1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(tr, ds);
        assert!(va.is_empty() && te.is_empty());
        let a = ds.split([0.5, 0.25, 0.25], 9).unwrap();
        let b = ds.split([0.5, 0.25, 0.25], 9).unwrap();
        assert_eq!(a, b);
        assert!(ds.split([0.5, 0.6, 0.0], 1).is_err());
    }

    #[test]
    fn stratified_split_preserves_proportions() {
        // 60/40 two-class source, halved: each half should stay 60/40 +- 2%
        let ds = two_class(600, 400);
        let (a, _, b) = ds.split([0.5, 0.0, 0.5], 11).unwrap();
        for half in [a, b] {
            let c = half.class_counts();
            let frac = c[0] as f64 / half.len() as f64;
            assert!((frac - 0.6).abs() <= 0.02, "{frac}");
        }
    }

    #[test]
    fn subset_rejects_out_of_range() {
        let ds = two_class(2, 2);
        assert!(ds.subset(&[0, 3]).is_ok());
        assert!(ds.subset(&[4]).is_err());
    }

    #[test]
    fn blobs_zero_separation_share_means() {
        let ds = synthetic_blobs(4000, 2, 3, 0.0, 5).unwrap();
        let mut sums = [[0.0f64; 3]; 2];
        for (im, &l) in ds.images.iter().zip(&ds.labels) {
            for (s, &v) in sums[l].iter_mut().zip(im.data()) {
                *s += v as f64 / 2000.0;
            }
        }
        for d in 0..3 {
            assert!((sums[0][d] - sums[1][d]).abs() < 0.01);
            assert!((sums[0][d] - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn blobs_are_reproducible() {
        assert_eq!(
            synthetic_blobs(50, 3, 4, 5.0, 1).unwrap(),
            synthetic_blobs(50, 3, 4, 5.0, 1).unwrap()
        );
        assert_ne!(
            synthetic_blobs(50, 3, 4, 5.0, 1).unwrap(),
            synthetic_blobs(50, 3, 4, 5.0, 2).unwrap()
        );
    }

    /// Least-squares linear classifier (one-vs-rest targets +-1) as an
    /// independent separability oracle.
    #[test]
    fn blobs_far_apart_are_linearly_separable() {
        let ds = synthetic_blobs(1000, 2, 2, 10.0, 21).unwrap();
        // normal equations for [x1, x2, 1] -> target
        let mut ata = [[0.0f64; 3]; 3];
        let mut atb = [0.0f64; 3];
        for (im, &l) in ds.images.iter().zip(&ds.labels) {
            let f = [im.data()[0] as f64, im.data()[1] as f64, 1.0];
            let t = if l == 1 { 1.0 } else { -1.0 };
            for r in 0..3 {
                atb[r] += f[r] * t;
                for c in 0..3 {
                    ata[r][c] += f[r] * f[c];
                }
            }
        }
        let w = solve3(ata, atb);
        let correct = ds
            .images
            .iter()
            .zip(&ds.labels)
            .filter(|(im, &l)| {
                let s = w[0] * im.data()[0] as f64 + w[1] * im.data()[1] as f64 + w[2];
                (s > 0.0) == (l == 1)
            })
            .count();
        assert!(correct as f64 / 1000.0 >= 0.99, "{correct}");
    }

    fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
        for i in 0..3 {
            let p = (i..3).max_by(|&x, &y| a[x][i].abs().total_cmp(&a[y][i].abs())).unwrap();
            a.swap(i, p);
            b.swap(i, p);
            for r in i + 1..3 {
                let f = a[r][i] / a[i][i];
                for c in i..3 {
                    a[r][c] -= f * a[i][c];
                }
                b[r] -= f * b[i];
            }
        }
        let mut x = [0.0; 3];
        for i in (0..3).rev() {
            x[i] = (b[i] - (i + 1..3).map(|c| a[i][c] * x[c]).sum::<f64>()) / a[i][i];
        }
        x
    }
}
