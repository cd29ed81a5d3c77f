//! Jensen-Shannon distances between softmax distributions and the
//! same-class / cross-class distance curves over a transform magnitude grid.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnn::CnnModel;
use crate::error::{Error, Result};
use crate::kde::{build_distribution, collect_samples, KdeConfig, SoftmaxDistribution};
use crate::rng::pool_id;
use crate::tensor::Image;
use crate::transforms::TransformSpec;

/// Tolerance on row sums accepted by [`js_divergence`].
pub const NORMALIZATION_TOL: f64 = 1e-6;

fn check_normalized(p: &[f64], name: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL || p.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid(format!("{name} is not a distribution (sum {sum})")));
    }
    Ok(())
}

/// Base-2 Jensen-Shannon divergence, in `[0, 1]`. Zero-mass bins contribute
/// nothing. Each bin's two halves are added as a commutative pair, so the
/// result is bitwise symmetric in `p` and `q`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(p.len(), q.len()));
    }
    check_normalized(p, "p")?;
    check_normalized(q, "q")?;
    let term = |a: f64, b: f64| if a > 0.0 { a * (2.0 * a / (a + b)).log2() } else { 0.0 };
    let total: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| term(a, b) + term(b, a))
        .sum();
    Ok((0.5 * total).clamp(0.0, 1.0))
}

/// Mean over classes of the per-class JS divergence.
pub fn dist_between(h1: &SoftmaxDistribution, h2: &SoftmaxDistribution) -> Result<f64> {
    if (h1.classes(), h1.bins()) != (h2.classes(), h2.bins()) {
        return Err(Error::shape(
            [h1.classes(), h1.bins()],
            [h2.classes(), h2.bins()],
        ));
    }
    let mut total = 0.0;
    for j in 0..h1.classes() {
        total += js_divergence(h1.row(j), h2.row(j))?;
    }
    Ok(total / h1.classes() as f64)
}

/// Elementwise mean of distributions with matching shape.
pub fn centroid(hs: &[&SoftmaxDistribution]) -> Result<SoftmaxDistribution> {
    let first = hs
        .first()
        .ok_or_else(|| Error::invalid("centroid of an empty list"))?;
    let mut mass = vec![0.0; first.mass().len()];
    for h in hs {
        if (h.classes(), h.bins()) != (first.classes(), first.bins()) {
            return Err(Error::shape([first.classes(), first.bins()], [h.classes(), h.bins()]));
        }
        for (m, &v) in mass.iter_mut().zip(h.mass()) {
            *m += v;
        }
    }
    let n = hs.len() as f64;
    mass.iter_mut().for_each(|m| *m /= n);
    SoftmaxDistribution::from_mass(first.classes(), first.bins(), mass, first.n_samples, first.kernel_width)
}

/// One transform family indexed by a scalar magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformFamily {
    /// Pixel deflection with `d` deflections.
    Pd { window: usize, sigma: f64 },
    /// Random pixel noise with `epsilon = d`.
    Rpn,
}

impl TransformFamily {
    pub fn at(&self, d: f64) -> Result<TransformSpec> {
        let spec = match *self {
            TransformFamily::Pd { window, sigma } => {
                if d < 0.0 || d.fract() != 0.0 {
                    return Err(Error::invalid(format!("pd magnitude must be a whole number, got {d}")));
                }
                TransformSpec::Pd {
                    deflections: d as usize,
                    window,
                    sigma,
                }
            }
            TransformFamily::Rpn => TransformSpec::Rpn { epsilon: d },
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveConfig {
    pub family: TransformFamily,
    pub grid: Vec<f64>,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub kde: KdeConfig,
}

impl CurveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.seeds.is_empty() || self.n_samples == 0 {
            return Err(Error::invalid("curve config needs a grid, seeds and N >= 1"));
        }
        for &d in &self.grid {
            self.family.at(d)?;
        }
        self.kde.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    /// Mean distance of clean images to the clean centroid of their class.
    CleanCleanSame,
    /// Mean distance of adversarial images to the adversarial centroid.
    AdvAdvSame,
    /// Distance between the clean and adversarial centroids of a class.
    CleanAdvSame,
    /// Mean distance from the clean centroid to the other classes' clean centroids.
    CleanCleanDiff,
}

impl Measure {
    pub const ALL: [Measure; 4] = [
        Measure::CleanCleanSame,
        Measure::AdvAdvSame,
        Measure::CleanAdvSame,
        Measure::CleanCleanDiff,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Measure::CleanCleanSame => "clean_clean_same",
            Measure::AdvAdvSame => "adv_adv_same",
            Measure::CleanAdvSame => "clean_adv_same",
            Measure::CleanCleanDiff => "clean_clean_diff",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub d: f64,
    pub class: usize,
    pub measure: Measure,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceCurveReport {
    pub grid: Vec<f64>,
    pub classes: usize,
    pub seeds: usize,
    pub points: Vec<CurvePoint>,
}

impl DistanceCurveReport {
    pub fn get(&self, d: f64, class: usize, measure: Measure) -> Option<&CurvePoint> {
        self.points
            .iter()
            .find(|p| p.d == d && p.class == class && p.measure == measure)
    }

    /// Mean over classes of one measure at one grid value.
    pub fn class_mean(&self, d: f64, measure: Measure) -> Option<f64> {
        let vals: Vec<f64> = self
            .points
            .iter()
            .filter(|p| p.d == d && p.measure == measure)
            .map(|p| p.value)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// CSV with columns `d, class, measure, value, stderr`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            d: f64,
            class: usize,
            measure: &'a str,
            value: f64,
            stderr: f64,
        }
        let mut w = csv::Writer::from_writer(out);
        for p in &self.points {
            w.serialize(Row {
                d: p.d,
                class: p.class,
                measure: p.measure.name(),
                value: p.value,
                stderr: p.stderr,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Clean and adversarial distributions of every class for one (seed, d) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveCell {
    pub seed: u64,
    pub d: f64,
    /// Indexed by class.
    pub clean: Vec<Vec<SoftmaxDistribution>>,
    pub adv: Vec<Vec<SoftmaxDistribution>>,
}

/// Image id used for class `c`, image `k` of a curve pool.
pub fn curve_image_id(pool: u64, class: usize, k: usize) -> u64 {
    pool | ((class as u64) << 24) | k as u64
}

/// Builds the distributions behind [`distance_curves`].
pub fn curve_distributions(
    model: &CnnModel,
    clean: &[Vec<Image>],
    adv: &[Vec<Image>],
    cfg: &CurveConfig,
) -> Result<Vec<CurveCell>> {
    cfg.validate()?;
    let classes = model.classes();
    if clean.len() != classes || adv.len() != classes {
        return Err(Error::invalid(format!(
            "need clean and adversarial images for all {classes} classes, got {} and {}",
            clean.len(),
            adv.len()
        )));
    }
    if let Some(c) = (0..classes).find(|&c| clean[c].is_empty() || adv[c].is_empty()) {
        return Err(Error::invalid(format!("class {c} has no clean or no adversarial images")));
    }
    let build = |images: &[Image], pool: u64, class: usize, spec: &TransformSpec, seed: u64| {
        images
            .par_iter()
            .enumerate()
            .map(|(k, x)| {
                let s = collect_samples(model, spec, x, cfg.n_samples, seed, curve_image_id(pool, class, k))?;
                build_distribution(&s, &cfg.kde)
            })
            .collect::<Result<Vec<_>>>()
    };
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for &d in &cfg.grid {
            let spec = cfg.family.at(d)?;
            let mut cell = CurveCell {
                seed,
                d,
                clean: Vec::with_capacity(classes),
                adv: Vec::with_capacity(classes),
            };
            for c in 0..classes {
                cell.clean.push(build(&clean[c], pool_id::CLEAN, c, &spec, seed)?);
                cell.adv.push(build(&adv[c], pool_id::ADVERSARIAL, c, &spec, seed)?);
            }
            cells.push(cell);
        }
    }
    Ok(cells)
}

fn cell_measures(cell: &CurveCell) -> Result<Vec<[f64; 4]>> {
    let classes = cell.clean.len();
    if classes < 2 {
        return Err(Error::invalid("the different-class measure needs at least 2 classes"));
    }
    let mu_clean: Vec<SoftmaxDistribution> = cell.clean.iter().map(|v| centroid(&v.iter().collect::<Vec<_>>())).collect::<Result<_>>()?;
    let mu_adv: Vec<SoftmaxDistribution> = cell.adv.iter().map(|v| centroid(&v.iter().collect::<Vec<_>>())).collect::<Result<_>>()?;
    let spread = |v: &[SoftmaxDistribution], mu: &SoftmaxDistribution| -> Result<f64> {
        let mut t = 0.0;
        for h in v {
            t += dist_between(h, mu)?;
        }
        Ok(t / v.len() as f64)
    };
    (0..classes)
        .map(|c| {
            let mut other = 0.0;
            for c2 in (0..classes).filter(|&c2| c2 != c) {
                other += dist_between(&mu_clean[c], &mu_clean[c2])?;
            }
            Ok([
                spread(&cell.clean[c], &mu_clean[c])?,
                spread(&cell.adv[c], &mu_adv[c])?,
                dist_between(&mu_clean[c], &mu_adv[c])?,
                other / (classes - 1) as f64,
            ])
        })
        .collect()
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Aggregates cells into the four measures per (d, class), with standard
/// errors over seeds.
pub fn curves_from_distributions(cells: &[CurveCell]) -> Result<DistanceCurveReport> {
    let mut grid: Vec<f64> = Vec::new();
    let mut seeds: Vec<u64> = Vec::new();
    for cell in cells {
        if !grid.contains(&cell.d) {
            grid.push(cell.d);
        }
        if !seeds.contains(&cell.seed) {
            seeds.push(cell.seed);
        }
    }
    let classes = cells
        .first()
        .map(|c| c.clean.len())
        .ok_or_else(|| Error::invalid("no distance cells"))?;
    let measures: Vec<Vec<[f64; 4]>> = cells.par_iter().map(cell_measures).collect::<Result<_>>()?;
    let mut points = Vec::new();
    for &d in &grid {
        for class in 0..classes {
            for (m, measure) in Measure::ALL.into_iter().enumerate() {
                let vals: Vec<f64> = cells
                    .iter()
                    .zip(&measures)
                    .filter(|(cell, _)| cell.d == d)
                    .map(|(_, per_class)| per_class[class][m])
                    .collect();
                let (value, stderr) = mean_stderr(&vals);
                points.push(CurvePoint {
                    d,
                    class,
                    measure,
                    value,
                    stderr,
                });
            }
        }
    }
    Ok(DistanceCurveReport {
        grid,
        classes,
        seeds: seeds.len(),
        points,
    })
}

/// Builds distributions for every (seed, d, class) and reduces them to the
/// four distance measures.
pub fn distance_curves(
    model: &CnnModel,
    clean: &[Vec<Image>],
    adv: &[Vec<Image>],
    cfg: &CurveConfig,
) -> Result<DistanceCurveReport> {
    curves_from_distributions(&curve_distributions(model, clean, adv, cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(rows: &[&[f64]]) -> SoftmaxDistribution {
        let bins = rows[0].len();
        SoftmaxDistribution::from_mass(rows.len(), bins, rows.concat(), 1, 0.05).unwrap()
    }

    #[test]
    fn js_examples() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        // direct KL sums with m = [0.75, 0.25]
        let kl_p = 0.5 * (0.5f64 / 0.75).log2() + 0.5 * (0.5f64 / 0.25).log2();
        let kl_q = (1.0f64 / 0.75).log2();
        let want = 0.5 * kl_p + 0.5 * kl_q;
        let got = js_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.31128).abs() < 1e-5);
        assert!(js_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn dist_between_is_mean_of_rows() {
        let a = dist(&[&[0.5, 0.5], &[1.0, 0.0]]);
        let b = dist(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let want = (js_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap() + 1.0) / 2.0;
        assert_eq!(dist_between(&a, &b).unwrap(), want);
        assert_eq!(dist_between(&a, &b).unwrap(), dist_between(&b, &a).unwrap());
        assert_eq!(dist_between(&a, &a).unwrap(), 0.0);
        let c = dist(&[&[0.5, 0.5]]);
        assert!(dist_between(&a, &c).is_err());
    }

    #[test]
    fn centroid_examples() {
        let a = dist(&[&[0.2, 0.8]]);
        let b = dist(&[&[0.6, 0.4]]);
        assert_eq!(centroid(&[&a]).unwrap(), a);
        let m = centroid(&[&a, &b]).unwrap();
        assert!((m.row(0)[0] - 0.4).abs() < 1e-15);
        assert!((m.mass().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(centroid(&[]).is_err());
    }

    #[test]
    fn stderr_uses_sample_deviation() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_stderr(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn one_cell_yields_four_measures_per_class() {
        let a = dist(&[&[0.2, 0.8], &[0.8, 0.2]]);
        let b = dist(&[&[0.8, 0.2], &[0.2, 0.8]]);
        let cell = CurveCell {
            seed: 0,
            d: 10.0,
            clean: vec![vec![a.clone(), a.clone()], vec![b.clone()]],
            adv: vec![vec![b.clone()], vec![a.clone()]],
        };
        let r = curves_from_distributions(&[cell]).unwrap();
        assert_eq!(r.points.len(), 8);
        let p = |c, m| r.get(10.0, c, m).unwrap().value;
        assert_eq!(p(0, Measure::CleanCleanSame), 0.0);
        assert_eq!(p(0, Measure::CleanAdvSame), dist_between(&a, &b).unwrap());
        assert_eq!(p(1, Measure::CleanCleanDiff), dist_between(&b, &a).unwrap());
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("d,class,measure,value,stderr\n10.0,0,clean_clean_same,0.0,0.0\n"));
    }

    #[test]
    fn family_rejects_fractional_deflections() {
        let f = TransformFamily::Pd { window: 20, sigma: 0.0 };
        assert!(f.at(2.5).is_err());
        assert_eq!(
            f.at(300.0).unwrap(),
            TransformSpec::Pd { deflections: 300, window: 20, sigma: 0.0 }
        );
    }
}
