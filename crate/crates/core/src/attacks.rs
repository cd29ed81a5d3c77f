//! Untargeted adversarial attacks: four gradient-based attacks against a
//! [`CnnModel`] and a decision-based attack against any label oracle.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnn::CnnModel;
use crate::error::{Error, Result};
use crate::net;
use crate::optim::VecAdam;
use crate::rng::{keyed_rng, Domain};
use crate::tensor::{argmax, Image};
use crate::transforms::clamp_step;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackConfig {
    Fgsm {
        epsilon: f64,
    },
    Igsm {
        epsilon: f64,
        steps: usize,
        step_size: f64,
    },
    Deepfool {
        max_iter: usize,
        #[serde(default = "default_overshoot")]
        overshoot: f64,
    },
    Cw(CwConfig),
    Boundary(BoundaryConfig),
}

fn default_overshoot() -> f64 {
    0.02
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        match self {
            AttackConfig::Fgsm { epsilon } if !(*epsilon >= 0.0) => bad("epsilon must be >= 0"),
            AttackConfig::Igsm {
                epsilon,
                steps,
                step_size,
            } if !(*epsilon >= 0.0) || *steps == 0 || !(*step_size >= 0.0) => {
                bad("igsm needs epsilon >= 0, steps >= 1, step size >= 0")
            }
            AttackConfig::Deepfool { overshoot, .. } if !(*overshoot >= 0.0) => bad("overshoot must be >= 0"),
            AttackConfig::Cw(c) => c.validate(),
            AttackConfig::Boundary(b) => b.validate(),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackConfig::Fgsm { .. } => "fgsm",
            AttackConfig::Igsm { .. } => "igsm",
            AttackConfig::Deepfool { .. } => "deepfool",
            AttackConfig::Cw(_) => "cw",
            AttackConfig::Boundary(_) => "boundary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CwConfig {
    pub max_iter: usize,
    pub kappa: f64,
    /// Bounds on the trade-off constant `c`.
    pub c_range: [f64; 2],
    pub initial_c: f64,
    pub binary_steps: usize,
    pub learning_rate: f64,
    /// Stop an inner run when the objective has not dropped by 0.01% over
    /// the last tenth of the iterations.
    pub abort_early: bool,
}

impl Default for CwConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            kappa: 0.0,
            c_range: [1e-3, 1e10],
            initial_c: 1e-2,
            binary_steps: 5,
            learning_rate: 5e-3,
            abort_early: true,
        }
    }
}

impl CwConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.c_range;
        if !(lo > 0.0 && lo <= hi) || self.binary_steps == 0 || !(self.learning_rate > 0.0) || !(self.kappa >= 0.0) {
            return Err(Error::invalid("cw needs 0 < c_lo <= c_hi, binary steps >= 1, lr > 0, kappa >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryConfig {
    pub max_iterations: usize,
    pub orthogonal_step: f64,
    pub source_step: f64,
    /// Decision queries per candidate against a stochastic model.
    pub stochastic_queries: usize,
    /// Random starting points tried before giving up.
    pub init_draws: usize,
    /// Spherical candidates per step-size adaptation window. The orthogonal
    /// step follows the spherical success rate, the source step also
    /// follows the success rate of full steps.
    pub adapt_window: usize,
    /// Candidates tried per iteration before giving up on the step.
    pub max_directions: usize,
    /// Multipliers tried, in order, when the returned image is no longer
    /// adversarial.
    pub scale_up: Vec<f64>,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            orthogonal_step: 0.1,
            source_step: 0.01,
            stochastic_queries: 5,
            init_draws: 100,
            adapt_window: 10,
            max_directions: 25,
            scale_up: (0..12).map(|k| 1.0 + 0.05 * 2f64.powi(k)).collect(),
        }
    }
}

impl BoundaryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0
            || self.stochastic_queries == 0
            || self.init_draws == 0
            || self.adapt_window == 0
            || self.max_directions == 0
            || !(self.orthogonal_step > 0.0 && self.source_step > 0.0)
        {
            return Err(Error::invalid("boundary attack parameters must be positive"));
        }
        if self.scale_up.iter().any(|&m| !(m > 1.0)) {
            return Err(Error::invalid("scale-up multipliers must exceed 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub x_adv: Image,
    pub success: bool,
    pub l_inf: f64,
    pub l2_normalized: f64,
    /// Gradient steps for white-box attacks, decision queries for the
    /// boundary attack.
    pub steps: usize,
}

/// Largest absolute change and root-mean-square change over all entries.
pub fn distortion(x: &Image, x_adv: &Image) -> Result<(f64, f64)> {
    if x.shape() != x_adv.shape() {
        return Err(Error::shape(x.shape(), x_adv.shape()));
    }
    let (mut linf, mut ss) = (0.0f64, 0.0f64);
    for (&a, &b) in x.data().iter().zip(x_adv.data()) {
        let d = b as f64 - a as f64;
        linf = linf.max(d.abs());
        ss += d * d;
    }
    Ok((linf, (ss / x.len() as f64).sqrt()))
}

fn finish(model: &CnnModel, x: &Image, y: usize, x_adv: Image, steps: usize) -> Result<AttackResult> {
    let success = model.predict(&x_adv)?.label != y;
    let (l_inf, l2_normalized) = distortion(x, &x_adv)?;
    Ok(AttackResult {
        x_adv,
        success,
        l_inf,
        l2_normalized,
        steps,
    })
}

fn require_correct(model: &CnnModel, x: &Image, y: usize) -> Result<()> {
    let label = model.predict(x)?.label;
    if label != y {
        return Err(Error::invalid(format!(
            "attacks need a correctly classified image; model says {label}, label is {y}"
        )));
    }
    Ok(())
}

/// Logits at `x` and the input gradient of `<logits, g(logits)>`.
fn input_gradient(model: &CnnModel, x: &Image, g: impl FnOnce(&[f32]) -> Vec<f32>) -> Result<(Vec<f32>, Vec<f32>)> {
    let t = net::trace(&model.arch, &model.params, x)?;
    let logits = t.logits().to_vec();
    let gl = g(&logits);
    let gx = t
        .backprop(&model.arch, &model.params, &gl, None, true)?
        .expect("input gradient requested");
    Ok((logits, gx.into_data()))
}

fn sign(v: f32) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One signed-gradient step from `cur`, projected onto the `epsilon` ball
/// around `x0` and onto `[0, 1]`.
fn signed_step(x0: &Image, cur: &Image, grad: &[f32], step: f64, epsilon: f64) -> Image {
    let mut out = cur.clone();
    for (((o, &c), &x), &g) in out.data_mut().iter_mut().zip(cur.data()).zip(x0.data()).zip(grad) {
        let x = x as f64;
        let cand = (c as f64 + step * sign(g)).clamp(x - epsilon, x + epsilon).clamp(0.0, 1.0);
        *o = clamp_step(x as f32, cand as f32, epsilon);
    }
    out
}

fn ce_gradient(model: &CnnModel, x: &Image, y: usize) -> Result<Vec<f32>> {
    Ok(input_gradient(model, x, |l| net::cross_entropy_grad(l, y))?.1)
}

pub fn fgsm(model: &CnnModel, x: &Image, y: usize, epsilon: f64) -> Result<AttackResult> {
    require_correct(model, x, y)?;
    let g = ce_gradient(model, x, y)?;
    let x_adv = signed_step(x, x, &g, epsilon, epsilon);
    finish(model, x, y, x_adv, 1)
}

pub fn igsm(model: &CnnModel, x: &Image, y: usize, epsilon: f64, steps: usize, step_size: f64) -> Result<AttackResult> {
    require_correct(model, x, y)?;
    let mut cur = x.clone();
    for _ in 0..steps {
        let g = ce_gradient(model, &cur, y)?;
        cur = signed_step(x, &cur, &g, step_size, epsilon);
    }
    finish(model, x, y, cur, steps)
}

/// DeepFool against the label `y` of a correctly classified `x`. Iterates on
/// `clip(x + r)`; the returned image is `clip(x + (1 + overshoot) r)`.
pub fn deepfool(model: &CnnModel, x: &Image, y: usize, max_iter: usize, overshoot: f64) -> Result<AttackResult> {
    require_correct(model, x, y)?;
    let classes = model.classes();
    let mut r_tot = vec![0.0f64; x.len()];
    let mut cur = x.clone();
    let mut iters = 0;
    while iters < max_iter && model.predict(&cur)?.label == y {
        let t = net::trace(&model.arch, &model.params, &cur)?;
        let logits = t.logits().to_vec();
        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        for k in (0..classes).filter(|&k| k != y) {
            let mut gl = vec![0.0f32; classes];
            gl[k] = 1.0;
            gl[y] = -1.0;
            let w: Vec<f64> = t
                .backprop(&model.arch, &model.params, &gl, None, true)?
                .expect("input gradient requested")
                .data()
                .iter()
                .map(|&v| v as f64)
                .collect();
            let f = logits[k] as f64 - logits[y] as f64;
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            // the small constant moves each linear step past the boundary
            let pert = (f.abs() + 1e-4) / norm;
            if best.as_ref().map_or(true, |(p, _, _)| pert < *p) {
                best = Some((pert, norm, w));
            }
        }
        let Some((pert, norm, w)) = best else { break };
        for (r, wi) in r_tot.iter_mut().zip(&w) {
            *r += pert * wi / norm;
        }
        cur = shifted(x, &r_tot, 1.0)?;
        iters += 1;
    }
    finish(model, x, y, shifted(x, &r_tot, 1.0 + overshoot)?, iters)
}

/// `clip(x + scale * r)`.
fn shifted(x: &Image, r: &[f64], scale: f64) -> Result<Image> {
    let data = x.data().iter().zip(r).map(|(&a, &d)| (a as f64 + scale * d).clamp(0.0, 1.0) as f32).collect();
    Image::from_vec(x.shape(), data)
}

/// Carlini-Wagner L2 with a tanh change of variables and a binary search on
/// the constant `c`. Returns the successful example with the smallest L2
/// seen, or the unmodified image when none succeeds.
pub fn cw_l2(model: &CnnModel, x: &Image, y: usize, cfg: &CwConfig) -> Result<AttackResult> {
    cfg.validate()?;
    require_correct(model, x, y)?;
    let classes = model.classes();
    let n = x.len();
    let [c_lo, c_hi] = cfg.c_range;
    // keep atanh finite at the pixel bounds
    let w0: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| ((2.0 * v as f64 - 1.0) * 0.999999).atanh())
        .collect();
    let x_ref: Vec<f64> = w0.iter().map(|w| (w.tanh() + 1.0) / 2.0).collect();
    let mut best: Option<(f64, Image)> = None;
    let (mut lower, mut upper) = (0.0f64, f64::INFINITY);
    let mut c = cfg.initial_c.clamp(c_lo, c_hi);
    let mut steps = 0;
    let mut img = x.clone();
    for _ in 0..cfg.binary_steps {
        let mut modifier = vec![0.0f64; n];
        let mut adam = VecAdam::new(cfg.learning_rate, n);
        let mut succeeded = false;
        let mut prev = f64::INFINITY;
        let check_every = (cfg.max_iter / 10).max(1);
        for it in 0..cfg.max_iter {
            let tanh: Vec<f64> = w0.iter().zip(&modifier).map(|(w, m)| (w + m).tanh()).collect();
            for (p, t) in img.data_mut().iter_mut().zip(&tanh) {
                *p = ((t + 1.0) / 2.0) as f32;
            }
            let mut margin_active = false;
            let mut target = 0;
            let (logits, gx) = input_gradient(model, &img, |l| {
                target = (0..classes)
                    .filter(|&j| j != y)
                    .max_by(|&a, &b| l[a].total_cmp(&l[b]).then(b.cmp(&a)))
                    .expect("at least two classes");
                margin_active = (l[y] - l[target]) as f64 > -cfg.kappa;
                let mut g = vec![0.0f32; classes];
                if margin_active {
                    g[y] = c as f32;
                    g[target] = -(c as f32);
                }
                g
            })?;
            steps += 1;
            let l2: f64 = img
                .data()
                .iter()
                .zip(&x_ref)
                .map(|(&p, r)| (p as f64 - r).powi(2))
                .sum();
            let margin = (logits[y] - logits[target]) as f64;
            let loss = l2 + c * margin.max(-cfg.kappa);
            // success under the kappa-shifted comparison
            let mut shifted: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
            shifted[y] += cfg.kappa;
            if argmax(&shifted) != y && argmax(&logits) != y {
                succeeded = true;
                let (_, rms) = distortion(x, &img)?;
                if best.as_ref().map_or(true, |(b, _)| rms < *b) {
                    best = Some((rms, img.clone()));
                }
            }
            if cfg.abort_early && it % check_every == 0 {
                if loss > prev * 0.9999 {
                    break;
                }
                prev = loss;
            }
            let grad: Vec<f64> = (0..n)
                .map(|i| {
                    let d_img = 2.0 * (img.data()[i] as f64 - x_ref[i]) + gx[i] as f64;
                    d_img * (1.0 - tanh[i] * tanh[i]) / 2.0
                })
                .collect();
            adam.step(&mut modifier, &grad);
        }
        if succeeded {
            upper = upper.min(c);
            c = (lower + upper) / 2.0;
        } else {
            lower = lower.max(c);
            c = if upper.is_finite() { (lower + upper) / 2.0 } else { c * 10.0 };
        }
        c = c.clamp(c_lo, c_hi);
    }
    let x_adv = best.map_or_else(|| x.clone(), |(_, im)| im);
    finish(model, x, y, x_adv, steps)
}

/// A black-box label oracle. `query` identifies the call so stochastic
/// models can derive fresh randomness per query.
pub trait DecisionModel: Sync {
    fn decide(&self, x: &Image, query: u64) -> Result<usize>;
    fn is_stochastic(&self) -> bool;
}

impl DecisionModel for CnnModel {
    fn decide(&self, x: &Image, _query: u64) -> Result<usize> {
        Ok(self.predict(x)?.label)
    }

    fn is_stochastic(&self) -> bool {
        false
    }
}

struct Oracle<'a> {
    model: &'a dyn DecisionModel,
    label: usize,
    per_candidate: usize,
    queries: u64,
}

impl Oracle<'_> {
    /// Adversarial when at least one of the candidate's queries misclassifies.
    /// All queries are spent even after a hit.
    fn is_adversarial(&mut self, x: &Image) -> Result<bool> {
        let mut hit = false;
        for _ in 0..self.per_candidate {
            hit |= self.model.decide(x, self.queries)? != self.label;
            self.queries += 1;
        }
        Ok(hit)
    }
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn blend(x: &Image, other: &Image, alpha: f64) -> Image {
    let mut out = x.clone();
    for ((o, &a), &b) in out.data_mut().iter_mut().zip(x.data()).zip(other.data()) {
        *o = ((1.0 - alpha) * a as f64 + alpha * b as f64).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Boundary attack with the distance to `x` after every iteration.
pub fn boundary_attack_traced(
    model: &dyn DecisionModel,
    x: &Image,
    y: usize,
    cfg: &BoundaryConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(AttackResult, Vec<f64>)> {
    cfg.validate()?;
    let mut oracle = Oracle {
        model,
        label: y,
        per_candidate: if model.is_stochastic() { cfg.stochastic_queries } else { 1 },
        queries: 0,
    };
    let mut start = None;
    for _ in 0..cfg.init_draws {
        let noise = x.map(|_| rng.gen_range(0.0f32..=1.0));
        if oracle.is_adversarial(&noise)? {
            start = Some(noise);
            break;
        }
    }
    let noise = start.ok_or_else(|| {
        Error::Initialization(format!("no misclassified random image in {} draws", cfg.init_draws))
    })?;
    // shrink toward x along the segment
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..10 {
        let mid = (lo + hi) / 2.0;
        if oracle.is_adversarial(&blend(x, &noise, mid))? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut cur = blend(x, &noise, hi);
    let mut dist = l2(cur.data(), x.data());
    let mut history = Vec::with_capacity(cfg.max_iterations);
    let (mut orth, mut source) = (cfg.orthogonal_step, cfg.source_step);
    // hits and trials of the spherical and the full candidates in the window
    let (mut sph, mut full) = ([0usize; 2], [0usize; 2]);
    for _ in 0..cfg.max_iterations {
        if dist == 0.0 {
            history.push(dist);
            continue;
        }
        for _ in 0..cfg.max_directions {
            let diff: Vec<f64> = x.data().iter().zip(cur.data()).map(|(&a, &b)| a as f64 - b as f64).collect();
            let mut eta: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
            // remove the component along the source direction
            let dot: f64 = eta.iter().zip(&diff).map(|(e, d)| e * d).sum::<f64>() / (dist * dist);
            eta.iter_mut().zip(&diff).for_each(|(e, d)| *e -= dot * d);
            let en = eta.iter().map(|e| e * e).sum::<f64>().sqrt().max(1e-12);
            let mut cand: Vec<f64> = cur
                .data()
                .iter()
                .zip(&eta)
                .map(|(&c, e)| c as f64 + orth * dist * e / en)
                .collect();
            // back onto the sphere of radius dist around x
            let cd = cand.iter().zip(x.data()).map(|(c, &a)| (c - a as f64).powi(2)).sum::<f64>().sqrt();
            let on_sphere: Vec<f64> = cand
                .iter()
                .zip(x.data())
                .map(|(c, &a)| (a as f64 + (c - a as f64) * dist / cd.max(1e-12)).clamp(0.0, 1.0))
                .collect();
            let to_image = |v: &[f64]| Image::from_vec(x.shape(), v.iter().map(|&p| p as f32).collect());
            let sph_hit = oracle.is_adversarial(&to_image(&on_sphere)?)?;
            sph[0] += usize::from(sph_hit);
            sph[1] += 1;
            let mut accepted = false;
            if sph_hit {
                for (c, (&s, &a)) in cand.iter_mut().zip(on_sphere.iter().zip(x.data())) {
                    *c = a as f64 + (s - a as f64) * (1.0 - source);
                }
                let stepped = to_image(&cand)?;
                let step_dist = l2(stepped.data(), x.data());
                let hit = oracle.is_adversarial(&stepped)?;
                full[0] += usize::from(hit);
                full[1] += 1;
                if hit && step_dist < dist {
                    cur = stepped;
                    dist = step_dist;
                    accepted = true;
                }
            }
            if sph[1] == cfg.adapt_window {
                let rate = sph[0] as f64 / sph[1] as f64;
                if rate > 0.75 {
                    orth *= 1.5;
                    source = (source * 1.5).min(0.5);
                } else if rate < 0.25 {
                    orth /= 1.5;
                    source /= 1.5;
                }
                if full[1] > 0 {
                    let rate = full[0] as f64 / full[1] as f64;
                    if rate > 0.75 {
                        source = (source * 1.5).min(0.5);
                    } else if rate < 0.25 {
                        source /= 1.5;
                    }
                }
                sph = [0; 2];
                full = [0; 2];
            }
            if accepted {
                break;
            }
        }
        history.push(dist);
    }
    let mut success = oracle.is_adversarial(&cur)?;
    if !success {
        for &m in &cfg.scale_up {
            let scaled = blend(x, &cur, m);
            if oracle.is_adversarial(&scaled)? {
                cur = scaled;
                success = true;
                break;
            }
        }
    }
    let (l_inf, l2_normalized) = distortion(x, &cur)?;
    Ok((
        AttackResult {
            x_adv: cur,
            success,
            l_inf,
            l2_normalized,
            steps: oracle.queries as usize,
        },
        history,
    ))
}

pub fn boundary_attack(
    model: &dyn DecisionModel,
    x: &Image,
    y: usize,
    cfg: &BoundaryConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackResult> {
    Ok(boundary_attack_traced(model, x, y, cfg, rng)?.0)
}

/// Runs `cfg` against the CNN for one image; the boundary attack draws from
/// the stream `(seed, image_index)`.
pub fn run_attack(model: &CnnModel, cfg: &AttackConfig, x: &Image, y: usize, seed: u64, image_index: u64) -> Result<AttackResult> {
    cfg.validate()?;
    match cfg {
        AttackConfig::Fgsm { epsilon } => fgsm(model, x, y, *epsilon),
        AttackConfig::Igsm {
            epsilon,
            steps,
            step_size,
        } => igsm(model, x, y, *epsilon, *steps, *step_size),
        AttackConfig::Deepfool { max_iter, overshoot } => deepfool(model, x, y, *max_iter, *overshoot),
        AttackConfig::Cw(c) => cw_l2(model, x, y, c),
        AttackConfig::Boundary(b) => {
            require_correct(model, x, y)?;
            boundary_attack(model, x, y, b, &mut keyed_rng(Domain::Attack, seed, image_index, 0))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvRecord {
    /// Index of the source image in its dataset.
    pub index: usize,
    pub label: usize,
    pub success: bool,
    pub l_inf: f64,
    pub l2_normalized: f64,
    pub steps: usize,
}

/// Attack outputs for a pool of correctly classified images.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialSet {
    pub config: AttackConfig,
    pub seed: u64,
    /// Source images the CNN misclassified, which were not attacked.
    pub skipped: usize,
    pub records: Vec<AdvRecord>,
    pub images: Vec<Image>,
}

impl AdversarialSet {
    pub fn success_rate(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.success).count() as f64 / self.records.len() as f64
    }

    pub fn mean_l2(&self) -> f64 {
        self.records.iter().map(|r| r.l2_normalized).sum::<f64>() / self.records.len().max(1) as f64
    }
}

/// Attacks every correctly classified image among `(index, image, label)`
/// in parallel; misclassified inputs are counted and skipped.
pub fn attack_pool(model: &CnnModel, cfg: &AttackConfig, pool: &[(usize, &Image, usize)], seed: u64) -> Result<AdversarialSet> {
    cfg.validate()?;
    let outcomes = pool
        .par_iter()
        .map(|&(index, x, y)| {
            if model.predict(x)?.label != y {
                return Ok(None);
            }
            run_attack(model, cfg, x, y, seed, index as u64).map(|r| Some((index, y, r)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = AdversarialSet {
        config: cfg.clone(),
        seed,
        skipped: 0,
        records: Vec::new(),
        images: Vec::new(),
    };
    for o in outcomes {
        match o {
            None => set.skipped += 1,
            Some((index, label, r)) => {
                set.records.push(AdvRecord {
                    index,
                    label,
                    success: r.success,
                    l_inf: r.l_inf,
                    l2_normalized: r.l2_normalized,
                    steps: r.steps,
                });
                set.images.push(r.x_adv);
            }
        }
    }
    Ok(set)
}

pub const TENSOR_MAGIC: [u8; 4] = *b"SDAT";

#[derive(Serialize, Deserialize)]
struct Manifest {
    attack: AttackConfig,
    seed: u64,
    skipped: usize,
    success_rate: f64,
    mean_l2_normalized: f64,
    records: Vec<AdvRecord>,
}

/// Image file: magic, then `count, h, w, c` as u32 LE, then f32 LE values.
pub fn encode_images(images: &[Image]) -> Result<Vec<u8>> {
    let shape = images.first().map(|i| i.hwc()).unwrap_or((0, 0, 0));
    let mut out = Vec::with_capacity(20 + images.len() * images.first().map_or(0, |i| i.len()) * 4);
    out.extend_from_slice(&TENSOR_MAGIC);
    for v in [images.len(), shape.0, shape.1, shape.2] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for im in images {
        if im.hwc() != shape {
            return Err(Error::shape([shape.0, shape.1, shape.2], im.shape()));
        }
        for v in im.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_images(bytes: &[u8]) -> Result<Vec<Image>> {
    use crate::error::CheckpointError;
    if bytes.len() < 20 {
        return Err(CheckpointError::Truncated { section: "header".into() }.into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != TENSOR_MAGIC {
        return Err(CheckpointError::BadMagic {
            expected: TENSOR_MAGIC,
            found: magic,
        }
        .into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (count, h, w, c) = (word(0), word(1), word(2), word(3));
    let per = h * w * c;
    let body = &bytes[20..];
    if body.len() != count * per * 4 {
        return Err(CheckpointError::BlobLength {
            section: "images".into(),
            expected: count * per * 4,
            found: body.len(),
        }
        .into());
    }
    body.chunks_exact((per * 4).max(1))
        .take(count)
        .map(|chunk| {
            let v = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            Image::from_vec(&[h, w, c], v)
        })
        .collect()
}

impl AdversarialSet {
    pub fn manifest_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Manifest {
            attack: self.config.clone(),
            seed: self.seed,
            skipped: self.skipped,
            success_rate: self.success_rate(),
            mean_l2_normalized: self.mean_l2(),
            records: self.records.clone(),
        })?)
    }

    pub fn save(&self, manifest: impl AsRef<Path>, tensor: impl AsRef<Path>) -> Result<()> {
        let (m, t) = (manifest.as_ref(), tensor.as_ref());
        fs::write(m, self.manifest_json()?).map_err(|e| Error::file(m, e))?;
        fs::write(t, encode_images(&self.images)?).map_err(|e| Error::file(t, e))
    }

    pub fn load(manifest: impl AsRef<Path>, tensor: impl AsRef<Path>) -> Result<Self> {
        let (m, t) = (manifest.as_ref(), tensor.as_ref());
        let text = fs::read_to_string(m).map_err(|e| Error::file(m, e))?;
        let man: Manifest = serde_json::from_str(&text)?;
        let images = decode_images(&fs::read(t).map_err(|e| Error::file(t, e))?)?;
        if images.len() != man.records.len() {
            return Err(Error::shape(man.records.len(), images.len()));
        }
        Ok(Self {
            config: man.attack,
            seed: man.seed,
            skipped: man.skipped,
            records: man.records,
            images,
        })
    }
}
