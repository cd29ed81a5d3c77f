//! Library results checked against independent brute-force computations.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softdist::classifiers::majority_vote;
use softdist::kde::{load_set, save_set, KdeConfig, LabeledDistribution, SoftmaxSampleSet};
use softdist::metrics::{curve_distributions, curves_from_distributions, CurveCell, CurveConfig, TransformFamily};
use softdist::net::NetArch;
use softdist::rng::pool_id;
use softdist::transforms::resize_bilinear;
use softdist::{synthetic_blobs, train_cnn, Image, SoftmaxDistribution, TrainConfig};

#[test]
fn forest_root_split_matches_exhaustive_search() {
    for seed in 0..60u64 {
        if let Some(msg) = common::check_root_split(seed) {
            panic!("{msg}");
        }
    }
}

#[test]
fn vote_matches_direct_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let (n, c) = (rng.gen_range(1..40), rng.gen_range(2..8));
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut r = vec![0.0; c];
                r[rng.gen_range(0..c)] = 1.0;
                r
            })
            .collect();
        let want = common::counting_vote(&rows);
        let set = SoftmaxSampleSet::new(rows, 0, "t").unwrap();
        assert_eq!(majority_vote(&set), want);
    }
}

#[test]
fn bilinear_reproduces_linear_ramps() {
    // interpolation is exact on affine images; 28 -> 23 never clamps
    let (a, b, c0) = (0.013, 0.021, 0.05);
    let data: Vec<f32> = (0..28 * 28).map(|i| (a * (i / 28) as f64 + b * (i % 28) as f64 + c0) as f32).collect();
    let x = Image::from_vec(&[28, 28, 1], data).unwrap();
    let out = resize_bilinear(&x, 23, 23);
    let src = |d: usize| (d as f64 + 0.5) * 28.0 / 23.0 - 0.5;
    for yy in 0..23 {
        for xx in 0..23 {
            let want = a * src(yy) + b * src(xx) + c0;
            let got = out.data()[yy * 23 + xx] as f64;
            assert!((got - want).abs() < 1e-6, "({yy},{xx}): {got} vs {want}");
        }
    }
}

#[test]
fn distances_recompute_from_persisted_distributions() {
    let ds = synthetic_blobs(150, 3, 6, 5.0, 4).unwrap();
    let (train, val, test) = ds.split([0.6, 0.2, 0.2], 1).unwrap();
    let m = train_cnn(&train, &val, &NetArch::mlp(6, &[12], 3).unwrap(), &TrainConfig { epochs: 10, ..Default::default() }).unwrap();
    let mut clean = vec![Vec::new(); 3];
    let mut adv = vec![Vec::new(); 3];
    for (i, (x, &y)) in test.images.iter().zip(&test.labels).enumerate() {
        if i % 2 == 0 { clean[y].push(x.clone()) } else { adv[y].push(x.clone()) }
    }
    let cfg = CurveConfig {
        family: TransformFamily::Rpn,
        grid: vec![0.05, 0.2],
        n_samples: 12,
        seeds: vec![1, 2],
        kde: KdeConfig::default(),
    };
    let cells = curve_distributions(&m, &clean, &adv, &cfg).unwrap();
    let direct = curves_from_distributions(&cells).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut reloaded = Vec::new();
    for (k, cell) in cells.iter().enumerate() {
        let pack = |pools: &[Vec<SoftmaxDistribution>], base: u64| -> Vec<LabeledDistribution> {
            pools
                .iter()
                .enumerate()
                .flat_map(|(c, v)| v.iter().enumerate().map(move |(i, d)| LabeledDistribution { image_id: base | (c as u64) << 24 | i as u64, label: c, dist: d.clone() }))
                .collect()
        };
        let unpack = |items: Vec<LabeledDistribution>| -> Vec<Vec<SoftmaxDistribution>> {
            let mut out = vec![Vec::new(); 3];
            for it in items {
                out[it.label].push(it.dist);
            }
            out
        };
        let (pc, pa) = (dir.path().join(format!("c{k}.bin")), dir.path().join(format!("a{k}.bin")));
        save_set(&pc, &pack(&cell.clean, pool_id::CLEAN)).unwrap();
        save_set(&pa, &pack(&cell.adv, pool_id::ADVERSARIAL)).unwrap();
        reloaded.push(CurveCell {
            seed: cell.seed,
            d: cell.d,
            clean: unpack(load_set(&pc).unwrap()),
            adv: unpack(load_set(&pa).unwrap()),
        });
    }
    assert_eq!(reloaded, cells);
    assert_eq!(curves_from_distributions(&reloaded).unwrap(), direct);
}
