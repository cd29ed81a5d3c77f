//! Test-only oracles, written independently of the library's im2col/gemm path.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softdist::net::{Layer, NetArch, NetParams};
use softdist::Tensor;

/// Activation pattern: ReLU signs and pool argmax choices.
pub type Pattern = Vec<usize>;

/// Direct nested-loop forward pass over an HWC input. Returns logits and the
/// activation pattern that determines which linear piece is active.
pub fn naive_forward(arch: &NetArch, params: &NetParams<f64>, x: &[f64]) -> (Vec<f64>, Pattern) {
    let [h0, w0, c0] = arch.input;
    // act[c][y][x]
    let mut act: Vec<Vec<Vec<f64>>> = (0..c0)
        .map(|c| (0..h0).map(|y| (0..w0).map(|xx| x[(y * w0 + xx) * c0 + c]).collect()).collect())
        .collect();
    let mut flat: Option<Vec<f64>> = None;
    let mut pattern = Vec::new();
    for (li, layer) in arch.layers.iter().enumerate() {
        let p = &params.layers[li];
        match *layer {
            Layer::Conv {
                out_channels,
                kernel,
                stride,
            } => {
                let cin = act.len();
                let (h, w) = (act[0].len(), act[0][0].len());
                let oh = (h - kernel) / stride + 1;
                let ow = (w - kernel) / stride + 1;
                let mut out = vec![vec![vec![0.0; ow]; oh]; out_channels];
                for co in 0..out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = p.bias[co];
                            for ci in 0..cin {
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let wi = ((co * cin + ci) * kernel + ky) * kernel + kx;
                                        s += p.weight[wi] * act[ci][oy * stride + ky][ox * stride + kx];
                                    }
                                }
                            }
                            out[co][oy][ox] = s;
                        }
                    }
                }
                act = out;
            }
            Layer::MaxPool { window } => {
                let (h, w) = (act[0].len(), act[0][0].len());
                let (oh, ow) = (h / window, w / window);
                let mut out = vec![vec![vec![0.0; ow]; oh]; act.len()];
                for (c, plane) in act.iter().enumerate() {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = (0, f64::NEG_INFINITY);
                            for dy in 0..window {
                                for dx in 0..window {
                                    let v = plane[oy * window + dy][ox * window + dx];
                                    if v > best.1 {
                                        best = (dy * window + dx, v);
                                    }
                                }
                            }
                            pattern.push(best.0);
                            out[c][oy][ox] = best.1;
                        }
                    }
                }
                act = out;
            }
            Layer::Dense { out } => {
                let input: Vec<f64> = flat
                    .take()
                    .unwrap_or_else(|| act.iter().flatten().flatten().copied().collect());
                let n = input.len();
                let y: Vec<f64> = (0..out)
                    .map(|r| {
                        let mut s = p.bias[r];
                        for i in 0..n {
                            s += p.weight[r * n + i] * input[i];
                        }
                        s
                    })
                    .collect();
                // a dense output is C x 1 x 1 in channel-major order
                act = y.iter().map(|&v| vec![vec![v]]).collect();
                flat = Some(y);
            }
            Layer::Relu => {
                for plane in act.iter_mut() {
                    for row in plane.iter_mut() {
                        for v in row.iter_mut() {
                            pattern.push(usize::from(*v > 0.0));
                            *v = v.max(0.0);
                        }
                    }
                }
                if let Some(f) = flat.as_mut() {
                    for v in f.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
            }
        }
    }
    let logits = flat.unwrap_or_else(|| act.iter().flatten().flatten().copied().collect());
    (logits, pattern)
}

/// Random small architecture: optional conv (+relu, +pool), 1-2 dense layers.
pub fn random_arch(rng: &mut ChaCha8Rng) -> NetArch {
    loop {
        let h = rng.gen_range(5..9);
        let w = rng.gen_range(5..9);
        let c = rng.gen_range(1..3);
        let classes = rng.gen_range(2..5);
        let mut layers = Vec::new();
        let convs = rng.gen_range(0..3);
        for _ in 0..convs {
            layers.push(Layer::Conv {
                out_channels: rng.gen_range(1..4),
                kernel: rng.gen_range(1..4),
                stride: rng.gen_range(1..3),
            });
            if rng.gen_bool(0.7) {
                layers.push(Layer::Relu);
            }
            if rng.gen_bool(0.4) {
                layers.push(Layer::MaxPool { window: 2 });
            }
        }
        if rng.gen_bool(0.5) {
            layers.push(Layer::Dense {
                out: rng.gen_range(2..7),
            });
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Dense { out: classes });
        if let Ok(arch) = NetArch::new([h, w, c], classes, layers) {
            return arch;
        }
    }
}

pub fn random_params(arch: &NetArch, rng: &mut ChaCha8Rng) -> NetParams<f64> {
    let mut p = NetParams::<f64>::zeros(arch).unwrap();
    for v in p.values_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    p
}

pub fn random_input(arch: &NetArch, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = arch.input_len();
    Tensor::from_vec(&arch.input, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares library backward against central differences (step `h`) of
/// `<naive_forward(.), g>`, skipping coordinates where the perturbation
/// changes the activation pattern (non-differentiable kinks).
pub fn finite_difference_check(seed: u64, h: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = random_arch(&mut rng);
    let params = random_params(&arch, &mut rng);
    let x = random_input(&arch, &mut rng);
    let g: Vec<f64> = (0..arch.classes).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (gp, gx) = softdist::net::backward(&arch, &params, &x, &g).unwrap();
    let objective = |p: &NetParams<f64>, xs: &[f64]| {
        let (l, pat) = naive_forward(&arch, p, xs);
        (l.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>(), pat)
    };
    let (_, base_pat) = objective(&params, x.data());
    let mut out = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut record = |analytic: f64, plus: (f64, Pattern), minus: (f64, Pattern)| {
        if plus.1 != base_pat || minus.1 != base_pat {
            out.skipped_kinks += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * h);
        out.max_rel_err = out.max_rel_err.max(rel_err(analytic, numeric));
        out.checked += 1;
    };
    for i in 0..x.len() {
        let mut xp = x.data().to_vec();
        let mut xm = x.data().to_vec();
        xp[i] += h;
        xm[i] -= h;
        record(gx.data()[i], objective(&params, &xp), objective(&params, &xm));
    }
    for li in 0..params.layers.len() {
        for which in 0..2 {
            let len = if which == 0 {
                params.layers[li].weight.len()
            } else {
                params.layers[li].bias.len()
            };
            for j in 0..len {
                let mut pp = params.clone();
                let mut pm = params.clone();
                let (vp, vm, a) = if which == 0 {
                    (&mut pp.layers[li].weight[j], &mut pm.layers[li].weight[j], gp.layers[li].weight[j])
                } else {
                    (&mut pp.layers[li].bias[j], &mut pm.layers[li].bias[j], gp.layers[li].bias[j])
                };
                *vp += h;
                *vm -= h;
                record(a, objective(&pp, x.data()), objective(&pm, x.data()));
            }
        }
    }
    out
}

fn gini_of(labels: &[usize], classes: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut h = vec![0.0; classes];
    for &y in labels {
        h[y] += 1.0;
    }
    let n = labels.len() as f64;
    1.0 - h.iter().map(|c| (c / n) * (c / n)).sum::<f64>()
}

/// Weighted Gini impurity of the children of `x[f] <= t`.
pub fn split_impurity(x: &[Vec<f32>], y: &[usize], classes: usize, f: usize, t: f32) -> f64 {
    let (l, r): (Vec<usize>, Vec<usize>) = (0..x.len()).partition(|&i| x[i][f] <= t);
    let yl: Vec<usize> = l.iter().map(|&i| y[i]).collect();
    let yr: Vec<usize> = r.iter().map(|&i| y[i]).collect();
    let n = x.len() as f64;
    (yl.len() as f64 * gini_of(&yl, classes) + yr.len() as f64 * gini_of(&yr, classes)) / n
}

/// Lowest impurity over every feature and every threshold at an observed
/// value; `None` when no split separates anything.
pub fn exhaustive_split(x: &[Vec<f32>], y: &[usize], classes: usize) -> Option<f64> {
    let mut best: Option<f64> = None;
    for f in 0..x[0].len() {
        let mut vals: Vec<f32> = x.iter().map(|r| r[f]).collect();
        vals.sort_by(f32::total_cmp);
        vals.dedup();
        for &t in &vals[..vals.len() - 1] {
            let s = split_impurity(x, y, classes, f, t);
            best = Some(best.map_or(s, |b: f64| b.min(s)));
        }
    }
    best
}

/// Random data on a coarse grid (so ties occur) and the root-split check
/// against [`exhaustive_split`]. Returns a failure description, if any.
pub fn check_root_split(seed: u64) -> Option<String> {
    use softdist::classifiers::{grow_tree, RfConfig, LEAF};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, f, classes) = (rng.gen_range(4..30), rng.gen_range(1..6), rng.gen_range(2..4));
    let x: Vec<Vec<f32>> = (0..n).map(|_| (0..f).map(|_| rng.gen_range(0..6) as f32 / 5.0).collect()).collect();
    let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    let cfg = RfConfig {
        trees: 1,
        max_depth: 1,
        bootstrap: false,
        max_features: Some(f),
        seed,
    };
    let root = &grow_tree(&x, &y, classes, &cfg, 0).nodes[0];
    let pure = y.iter().all(|&v| v == y[0]);
    match exhaustive_split(&x, &y, classes) {
        Some(_) if pure => (root.feature != LEAF).then(|| format!("seed {seed}: pure node was split")),
        None => (root.feature != LEAF).then(|| format!("seed {seed}: split where none exists")),
        Some(best) => {
            if root.feature == LEAF {
                return Some(format!("seed {seed}: no split, oracle found {best}"));
            }
            let got = split_impurity(&x, &y, classes, root.feature as usize, root.threshold);
            ((got - best).abs() >= 1e-12).then(|| format!("seed {seed}: impurity {got} vs oracle {best}"))
        }
    }
}

/// Plurality label by counting argmax rows, ties to the lowest class.
pub fn counting_vote(rows: &[Vec<f64>]) -> (usize, Vec<usize>) {
    let c = rows[0].len();
    let mut counts = vec![0usize; c];
    for r in rows {
        let mut best = 0;
        for k in 1..c {
            if r[k] > r[best] {
                best = k;
            }
        }
        counts[best] += 1;
    }
    let top = *counts.iter().max().unwrap();
    (counts.iter().position(|&k| k == top).unwrap(), counts)
}
