//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! `REFSIM_ACCEPTANCE_ONLY=1,4` runs a subset. Criterion 8 needs
//! `REFSIM_TOOTHBRUSH_DATA` (MVTec-style directory) and
//! `REFSIM_TOOTHBRUSH_FEATURES` (RSFG grids with `train/`, `simulated/train/`
//! and `test/` entries); it is skipped otherwise.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use refsim_core::eval::{
    load_dataset, make_synthetic_dataset, run_experiment, Confusion, Dataset, ExperimentConfig, ImportedFeatures,
    Label, MvtecOptions, Pipeline, Polarity, Prerequisites, RefMode, SyntheticConfig,
};
use refsim_core::generative::{train_inpainter, train_vae, Generator, InpaintConfig, VaeConfig};
use refsim_core::imagecore::texture::TextureKind;
use refsim_core::imagecore::{inject_defect, DefectShape, DefectSpec, DetectionMask, Image};
use refsim_core::membank::{
    build_bank, coreset_subsample, decode_bank, encode_bank, knn_brute_force, knn_exact, load_feature_grids,
    score_grid, squared_distance, Backbone, BackboneMeta, FeatureGrid, MemoryBank, Provenance, DEFAULT_K, MAP_SIGMA,
};
use refsim_core::nncore::{
    decode_checkpoint, encode_checkpoint, grad_check, ConvOptions, Graph, NnError, NormMode, Tensor, Var,
};
use refsim_core::util::{mix_seed, sha256_hex};

const GRAD_TOL: f64 = 1e-3;
const GRAD_EPS: f64 = 1e-4;
const SIDE: usize = 64;

struct Outcome {
    passed: Option<bool>,
    detail: String,
}

fn pass_if(ok: bool, detail: String) -> Outcome {
    Outcome {
        passed: Some(ok),
        detail,
    }
}

fn rand_t(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values at least 0.05 from zero, so no relu input sits on its kink.
fn off_kink(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = rand_t(shape, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = 0.05f64.copysign(*v) + *v;
        }
    }
    t
}

/// Distinct values spaced well beyond `eps`, so every 2x2 max is unique.
fn distinct(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, order.into_iter().map(|k| k as f64 * 0.01 - 0.3).collect()).unwrap()
}

/// `sum(y * w)` for a fixed random `w`: every output element gets its own
/// nonzero upstream gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var, NnError> {
    let shape = g.shape(y).to_vec();
    let n = g.value(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect())?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Criterion<'a> = (u32, &'static str, Box<dyn Fn() -> Outcome + 'a>);

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, NnError>>;

/// One case per differentiable primitive; `grad_scale` is excluded because
/// it deliberately reports a scaled gradient.
fn grad_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, Builder)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x9c));
    let r = &mut rng;
    let labels: Vec<f64> = (0..2 * 9).map(|_| f64::from(r.random::<bool>())).collect();
    let weights: Vec<f64> = (0..6).map(|_| r.random_range(0.0..2.0)).collect();
    let target = rand_t(vec![2, 3], r);
    let frozen_mean = rand_t(vec![2], r).data().to_vec();
    let frozen_var: Vec<f64> = (0..2).map(|_| r.random_range(0.5..2.0)).collect();
    let p = seed;
    let mut cases: Vec<(&'static str, Vec<Tensor>, Builder)> = vec![
        (
            "add",
            vec![rand_t(vec![2, 3], r), rand_t(vec![2, 3], r)],
            Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, p)
            }),
        ),
        (
            "sub",
            vec![rand_t(vec![2, 3], r), rand_t(vec![2, 3], r)],
            Box::new(move |g, v| {
                let y = g.sub(v[0], v[1])?;
                project(g, y, p)
            }),
        ),
        (
            "mul",
            vec![rand_t(vec![2, 3], r), rand_t(vec![2, 3], r)],
            Box::new(move |g, v| {
                let y = g.mul(v[0], v[1])?;
                project(g, y, p)
            }),
        ),
        (
            "scale",
            vec![rand_t(vec![5], r)],
            Box::new(move |g, v| {
                let y = g.scale(v[0], -1.7)?;
                project(g, y, p)
            }),
        ),
        (
            "add_scalar",
            vec![rand_t(vec![5], r)],
            Box::new(move |g, v| {
                let y = g.add_scalar(v[0], 0.3)?;
                let y = g.mul(y, y)?;
                project(g, y, p)
            }),
        ),
        (
            "exp",
            vec![rand_t(vec![6], r)],
            Box::new(move |g, v| {
                let y = g.exp(v[0])?;
                project(g, y, p)
            }),
        ),
        (
            "relu",
            vec![off_kink(vec![8], r)],
            Box::new(move |g, v| {
                let y = g.relu(v[0])?;
                project(g, y, p)
            }),
        ),
        (
            "sigmoid",
            vec![rand_t(vec![6], r)],
            Box::new(move |g, v| {
                let y = g.sigmoid(v[0])?;
                project(g, y, p)
            }),
        ),
        (
            "reshape",
            vec![rand_t(vec![2, 6], r)],
            Box::new(move |g, v| {
                let y = g.reshape(v[0], vec![3, 4])?;
                project(g, y, p)
            }),
        ),
        (
            "sum",
            vec![rand_t(vec![7], r)],
            Box::new(move |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            }),
        ),
        (
            "mean",
            vec![rand_t(vec![7], r)],
            Box::new(move |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.mean(sq)
            }),
        ),
        (
            "maxpool2",
            vec![distinct(vec![1, 2, 4, 4], r)],
            Box::new(move |g, v| {
                let y = g.maxpool2(v[0])?;
                project(g, y, p)
            }),
        ),
        (
            "upsample2",
            vec![rand_t(vec![1, 2, 2, 3], r)],
            Box::new(move |g, v| {
                let y = g.upsample2(v[0])?;
                project(g, y, p)
            }),
        ),
        (
            "concat",
            vec![rand_t(vec![1, 1, 3, 3], r), rand_t(vec![1, 2, 3, 3], r)],
            Box::new(move |g, v| {
                let y = g.concat(v[0], v[1])?;
                project(g, y, p)
            }),
        ),
        (
            "linear",
            vec![rand_t(vec![3, 4], r), rand_t(vec![2, 4], r), rand_t(vec![2], r)],
            Box::new(move |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                project(g, y, p)
            }),
        ),
        (
            "mse_loss",
            vec![rand_t(vec![2, 3], r), rand_t(vec![2, 3], r)],
            Box::new(move |g, v| g.mse_loss(v[0], v[1])),
        ),
        (
            "kl_diag_gaussian",
            vec![rand_t(vec![2, 4], r), rand_t(vec![2, 4], r)],
            Box::new(move |g, v| g.kl_diag_gaussian(v[0], v[1])),
        ),
    ];
    for (name, opts) in [
        ("conv2d zero pad", ConvOptions::new(1, 1)),
        ("conv2d replicate pad", ConvOptions::new(1, 1).replicate()),
        ("conv2d stride 2", ConvOptions::new(2, 1)),
        ("conv2d no pad", ConvOptions::new(1, 0)),
    ] {
        cases.push((
            name,
            vec![
                rand_t(vec![2, 2, 5, 5], r),
                rand_t(vec![3, 2, 3, 3], r),
                rand_t(vec![3], r),
            ],
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), opts)?;
                project(g, y, p)
            }),
        ));
    }
    cases.push((
        "batch_norm batch",
        vec![rand_t(vec![3, 2, 3, 3], r), rand_t(vec![2], r), rand_t(vec![2], r)],
        Box::new(move |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], NormMode::Batch)?;
            project(g, y, p)
        }),
    ));
    cases.push((
        "batch_norm frozen",
        vec![rand_t(vec![2, 2, 3, 3], r), rand_t(vec![2], r), rand_t(vec![2], r)],
        Box::new(move |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], NormMode::Frozen(&frozen_mean, &frozen_var))?;
            project(g, y, p)
        }),
    ));
    cases.push((
        "weighted_mse_loss",
        vec![rand_t(vec![2, 3], r), rand_t(vec![2, 3], r)],
        Box::new(move |g, v| g.weighted_mse_loss(v[0], v[1], weights.clone())),
    ));
    cases.push((
        "mse_loss vs constant",
        vec![rand_t(vec![2, 3], r)],
        Box::new(move |g, v| {
            let t = g.leaf(&target);
            g.mse_loss(v[0], t)
        }),
    ));
    cases.push((
        "balanced_cross_entropy",
        vec![rand_t(vec![2, 2, 3, 3], r)],
        Box::new(move |g, v| g.balanced_cross_entropy(v[0], &labels, 3.0, 0.5)),
    ));
    cases
}

fn criterion_gradients() -> Outcome {
    let t = Instant::now();
    let seeds = 20;
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    let mut checked = 0;
    for seed in 0..seeds {
        for (name, leaves, build) in grad_cases(seed) {
            match grad_check(&leaves, GRAD_EPS, |g, v| build(g, v)) {
                Ok(r) => {
                    checked += 1;
                    if r.max_rel_error > worst.0 {
                        worst = (r.max_rel_error, format!("{name} seed {seed}"));
                    }
                    if r.max_rel_error >= GRAD_TOL {
                        failures.push(format!("{name}@{seed}={:.2e}", r.max_rel_error));
                    }
                }
                Err(e) => failures.push(format!("{name}@{seed}: {e}")),
            }
        }
    }
    let elapsed = t.elapsed();
    let ok = failures.is_empty() && checked > 0 && elapsed < Duration::from_secs(60);
    pass_if(
        ok,
        format!(
            "{checked} checks over {seeds} seeds, max rel error {:.2e} ({}), {} failures{}",
            worst.0,
            worst.1,
            failures.len(),
            if failures.is_empty() {
                String::new()
            } else {
                format!(": {}", failures.join(", "))
            }
        ),
    )
}

fn stripes_config(n_train: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_train,
        texture: TextureKind::Stripes,
        width: SIDE,
        height: SIDE,
        seed,
        ..SyntheticConfig::default()
    }
}

/// Generators trained on 200 striped 64x64 images, shared by criteria 2 and 3.
struct StripeModels {
    inpainter: Generator,
    inpaint_metrics: BTreeMap<String, f64>,
    inpaint_time: Duration,
    vae: Option<Generator>,
}

fn train_stripes(with_vae: bool) -> StripeModels {
    let ds = make_synthetic_dataset(&stripes_config(200, 7)).unwrap();
    let t = Instant::now();
    let (params, report) = train_inpainter(&ds.train_nominal, &InpaintConfig::default()).unwrap();
    let inpaint_time = t.elapsed();
    let vae = with_vae.then(|| {
        let (p, _) = train_vae(&ds.train_nominal, &VaeConfig::default()).unwrap();
        Generator::new(p).unwrap()
    });
    StripeModels {
        inpainter: Generator::new(params).unwrap(),
        inpaint_metrics: report.metrics.into_iter().collect(),
        inpaint_time,
        vae,
    }
}

fn criterion_inpaint_sanity(m: &StripeModels) -> Outcome {
    let masked = m.inpaint_metrics["held_out_masked_mse"];
    let baseline = m.inpaint_metrics["mean_baseline_masked_mse"];
    let ratio = baseline / masked;
    let ok = ratio >= 2.0 && m.inpaint_time < Duration::from_secs(600);
    pass_if(
        ok,
        format!(
            "held-out masked MSE {masked:.5} vs mean baseline {baseline:.5} (ratio {ratio:.2}, need >= 2), trained in {:.0} s",
            m.inpaint_time.as_secs_f64()
        ),
    )
}

/// Defective/clean pairs with the stripes trainset's texture: the same
/// config with `defect_delta = 0` renders the identical clean images.
fn elimination_cases() -> Vec<(Image, Image, DetectionMask)> {
    let mut cases = Vec::new();
    for (shape, n) in [
        (DefectShape::Disc, 34),
        (DefectShape::Rectangle, 33),
        (DefectShape::Scratch, 33),
    ] {
        let cfg = SyntheticConfig {
            n_test_defective: n,
            defect_shape: shape,
            defect_size: 5,
            defect_delta: 0.3,
            polarity: Polarity::Mixed,
            ..stripes_config(1, 7)
        };
        let defective = make_synthetic_dataset(&cfg).unwrap();
        let clean = make_synthetic_dataset(&SyntheticConfig {
            defect_delta: 0.0,
            ..cfg
        })
        .unwrap();
        for (d, c) in defective.test_items.iter().zip(&clean.test_items).take(n) {
            cases.push((d.candidate.clone(), c.candidate.clone(), d.truth.clone().unwrap()));
        }
    }
    cases
}

fn footprint_residual(img: &Image, clean: &Image, mask: &DetectionMask) -> f64 {
    let (mut s, mut k) = (0.0, 0usize);
    for y in 0..img.height() {
        for x in 0..img.width() {
            if mask.get(x, y) {
                s += (img.get(x, y, 0) - clean.get(x, y, 0)).abs();
                k += 1;
            }
        }
    }
    s / k.max(1) as f64
}

fn criterion_elimination(m: &StripeModels) -> Outcome {
    let cases = elimination_cases();
    let mut parts = Vec::new();
    let mut ok = true;
    let vae = m.vae.as_ref().expect("criterion 3 trains a VAE");
    for (name, g) in [("inpaint", &m.inpainter), ("vae", vae)] {
        let candidates: Vec<Image> = cases.iter().map(|c| c.0.clone()).collect();
        let sims = g.simulate_many(&candidates).unwrap();
        let wins = cases
            .iter()
            .zip(&sims)
            .filter(|((def, clean, mask), sim)| {
                footprint_residual(&sim.image, clean, mask) < footprint_residual(def, clean, mask)
            })
            .count();
        let rate = wins as f64 / cases.len() as f64;
        ok &= rate >= 0.9;
        parts.push(format!("{name} {wins}/{}", cases.len()));
    }
    pass_if(
        ok,
        format!(
            "{} cases with residual below the defective input (need >= 90%)",
            parts.join(", ")
        ),
    )
}

fn gaussian_kl_mc(mu: &[f64], logvar: &[f64], samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    // log q(z) - log p(z) with z = mu + sigma * e; constants cancel.
    let mut acc = 0.0;
    for _ in 0..samples {
        let mut s = 0.0;
        for (m, lv) in mu.iter().zip(logvar) {
            let e: f64 = StandardNormal.sample(rng);
            let z = m + (0.5 * lv).exp() * e;
            s += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
        }
        acc += s;
    }
    acc / samples as f64
}

fn closed_form_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    let mut g = Graph::new();
    let m = g.constant(vec![1, mu.len()], mu.to_vec()).unwrap();
    let l = g.constant(vec![1, logvar.len()], logvar.to_vec()).unwrap();
    let kl = g.kl_diag_gaussian(m, l).unwrap();
    g.scalar(kl)
}

fn criterion_kl() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4b1);
    let dim = 8;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let logvar: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let exact = closed_form_kl(&mu, &logvar);
        let mc = gaussian_kl_mc(&mu, &logvar, 1_000_000, &mut rng);
        worst = worst.max((exact - mc).abs() / exact);
    }
    let zero = closed_form_kl(&[0.0; 8], &[0.0; 8]);
    pass_if(
        worst < 0.01 && zero == 0.0,
        format!("10 draws of dim {dim}, max relative gap to 1e6-sample MC {worst:.2e} (need < 1e-2); kl(0,0) = {zero}"),
    )
}

fn meta() -> BackboneMeta {
    BackboneMeta {
        checkpoint_hash: "synthetic".into(),
        layer_tag: "enc2".into(),
    }
}

/// Clustered random vectors, so neighbor sets are not trivially uniform.
fn clustered(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let centers: Vec<f64> = (0..8 * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut v = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let c = rng.random_range(0..8);
        for d in 0..dim {
            let e: f64 = StandardNormal.sample(rng);
            v.push(centers[c * dim + d] + 0.5 * e);
        }
    }
    v
}

/// Smallest achievable k-center radius, by enumerating every k-subset.
fn optimal_k_center(v: &[f64], dim: usize, n: usize, k: usize) -> f64 {
    let dist: Vec<f64> = (0..n * n)
        .map(|ij| {
            squared_distance(
                &v[(ij / n) * dim..(ij / n + 1) * dim],
                &v[(ij % n) * dim..(ij % n + 1) * dim],
            )
            .sqrt()
        })
        .collect();
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best = f64::INFINITY;
    loop {
        let radius = (0..n)
            .map(|p| idx.iter().map(|&c| dist[p * n + c]).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max);
        best = best.min(radius);
        let Some(i) = (0..k).rev().find(|&i| idx[i] < n - k + i) else {
            return best;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn criterion_knn() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e6e);
    let dim = 16;
    let mut queries = 0;
    let mut mismatches = 0;
    let mut max_gap = 0.0f64;
    for n in [1usize, 10, 100, 1000, 10_000] {
        let vectors = clustered(n, dim, &mut rng);
        let bank = MemoryBank::new(dim, vectors.clone(), Provenance::RealRef, meta()).unwrap();
        let candidates: Vec<usize> = (0..n).collect();
        let (gh, gw) = (5, 8);
        let q = clustered(gh * gw, dim, &mut rng);
        let grid = FeatureGrid::new(gh, gw, dim, q.clone(), gw * 4, gh * 4).unwrap();
        for k in [1, 3, 9] {
            let k = k.min(n);
            let scored = score_grid(&bank, &grid, k, MAP_SIGMA).unwrap();
            for cell in 0..gh * gw {
                let query = &q[cell * dim..(cell + 1) * dim];
                let fast = knn_exact(&vectors, dim, &candidates, query, k);
                let slow = knn_brute_force(&vectors, dim, &candidates, query, k);
                queries += 1;
                let same_idx = fast.iter().map(|x| x.index).eq(slow.iter().map(|x| x.index));
                let gap = fast
                    .iter()
                    .zip(&slow)
                    .map(|(a, b)| (a.distance - b.distance).abs())
                    .fold(0.0, f64::max);
                let brute_score = slow.iter().map(|x| x.distance).sum::<f64>() / k as f64;
                let score_gap = (scored.grid_scores[cell] - brute_score).abs();
                max_gap = max_gap.max(gap).max(score_gap);
                if !same_idx || gap > 1e-6 || score_gap > 1e-6 {
                    mismatches += 1;
                }
            }
        }
    }

    let mut worst_ratio = 0.0f64;
    for seed in 0..50u64 {
        let mut r = ChaCha8Rng::seed_from_u64(mix_seed(0xc0, seed));
        let k = 1 + (seed % 4) as usize;
        // Keep the number of enumerated k-subsets tractable.
        let n = if k == 4 {
            r.random_range(8..=30)
        } else {
            r.random_range(8..=64)
        };
        let v = clustered(n, 4, &mut r);
        let bank = MemoryBank::new(4, v.clone(), Provenance::RealRef, meta()).unwrap();
        let sub = coreset_subsample(&bank, k as f64 / n as f64, seed).unwrap();
        let cs = sub.coreset().unwrap();
        assert_eq!(cs.indices.len(), k);
        let opt = optimal_k_center(&v, 4, n, k);
        let ratio = if opt == 0.0 {
            if cs.cover_radius == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            cs.cover_radius / opt
        };
        worst_ratio = worst_ratio.max(ratio);
    }
    pass_if(
        mismatches == 0 && worst_ratio <= 2.0,
        format!(
            "{queries} queries on banks up to 10^4, {mismatches} mismatches (max gap {max_gap:.1e}); \
             coreset radius / optimal <= {worst_ratio:.3} over 50 seeds (need <= 2)"
        ),
    )
}

fn benchmark_config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_train: 120,
        n_test_defective: 20,
        n_test_nominal: 20,
        ref_noise_sigma: 0.1,
        ref_misalign_px: 3,
        ..stripes_config(120, seed)
    }
}

fn inpaint_config(seed: u64) -> InpaintConfig {
    InpaintConfig {
        seed,
        ..InpaintConfig::default()
    }
}

/// `(value, metric name)` used for the real-vs-simulated comparison.
fn headline(report: &refsim_core::eval::EvalReport) -> (f64, &'static str) {
    let a = &report.aggregates;
    match report.pipeline {
        Pipeline::Membank => (a.f_score.unwrap_or(0.0), "F"),
        _ => (a.capture_rate.unwrap_or(0.0) + a.filter_rate.unwrap_or(0.0), "CR+FR"),
    }
}

fn criterion_directional(seeds: &[u64]) -> Outcome {
    let t = Instant::now();
    let mut wins: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut rows = Vec::new();
    for &seed in seeds {
        let ds = make_synthetic_dataset(&benchmark_config(seed)).unwrap();
        let (params, _) = train_inpainter(&ds.train_nominal, &inpaint_config(seed)).unwrap();
        let inpainter = Generator::new(params).unwrap();
        let pre = Prerequisites {
            inpainter: Some(&inpainter),
            vae: None,
            backbone: Some(inpainter.params()),
            features: None,
        };
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let mut cells = Vec::new();
        for (pipeline, name) in [
            (Pipeline::Classic, "classic"),
            (Pipeline::Supervised, "supervised"),
            (Pipeline::Membank, "membank"),
        ] {
            let real = run_experiment(&ds, pipeline, RefMode::Real, &cfg, &pre).unwrap();
            let sim = run_experiment(&ds, pipeline, RefMode::SimulatedInpaint, &cfg, &pre).unwrap();
            let ((r, metric), (s, _)) = (headline(&real), headline(&sim));
            let entry = wins.entry(name).or_default();
            if s >= r {
                *entry += 1;
            }
            cells.push(format!("{name} {metric} {r:.2}/{s:.2}"));
        }
        rows.push(format!("seed {seed}: {}", cells.join(" ")));
        eprintln!(
            "  criterion 6 {} ({:.0} s)",
            rows.last().unwrap(),
            t.elapsed().as_secs_f64()
        );
    }
    let need = seeds.len().saturating_sub(1).max(1);
    let elapsed = t.elapsed();
    let ok = wins.len() == 3 && wins.values().all(|&w| w >= need) && elapsed < Duration::from_secs(1800);
    let tally: Vec<String> = wins.iter().map(|(k, v)| format!("{k} {v}/{}", seeds.len())).collect();
    pass_if(
        ok,
        format!(
            "simulated >= real: {} (need >= {need} each), {:.0} s; real/simulated per seed: {}",
            tally.join(", "),
            elapsed.as_secs_f64(),
            rows.join("; ")
        ),
    )
}

/// The defect of the first defective test item, re-injected into one
/// training image and its acquired reference.
fn contaminate(ds: &mut Dataset, cfg: &SyntheticConfig) -> usize {
    let item = ds.test_items.iter().find(|i| i.label == Label::Defective).unwrap();
    let truth = item.truth.as_ref().unwrap();
    let (mut sx, mut sy, mut k) = (0i64, 0i64, 0i64);
    for y in 0..truth.height() {
        for x in 0..truth.width() {
            if truth.get(x, y) {
                sx += x as i64;
                sy += y as i64;
                k += 1;
            }
        }
    }
    let spec = DefectSpec {
        shape: cfg.defect_shape,
        center: (sx / k, sy / k),
        size: cfg.defect_size,
        intensity_delta: cfg.defect_delta,
        seed: 1,
    };
    let j = 0;
    ds.train_nominal[j] = inject_defect(&ds.train_nominal[j], &spec).unwrap().0;
    let refs = ds.train_references.as_mut().unwrap();
    refs[j] = inject_defect(&refs[j], &spec).unwrap().0;
    ds.test_items.iter().position(|i| i.label == Label::Defective).unwrap()
}

fn bank_scores(g: &Generator, refs: &[Image], target: &Image, seed: u64) -> (f64, f64) {
    let bb = Backbone::new(g.params().clone(), "enc2").unwrap();
    let grid = bb.extract(target).unwrap();
    let sims: Vec<Image> = g.simulate_many(refs).unwrap().into_iter().map(|s| s.image).collect();
    let mut out = [0.0; 2];
    for (slot, (images, prov)) in out
        .iter_mut()
        .zip([(refs, Provenance::RealRef), (&sims[..], Provenance::SimulatedRef)])
    {
        let bank = build_bank(&bb, images, prov).unwrap();
        let bank = coreset_subsample(&bank, 0.1, mix_seed(seed, 0xc05e)).unwrap();
        *slot = score_grid(&bank, &grid, DEFAULT_K, MAP_SIGMA).unwrap().image_score;
    }
    (out[0], out[1])
}

fn criterion_contamination(seeds: &[u64]) -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for &seed in seeds {
        let cfg = benchmark_config(seed);
        let mut ds = make_synthetic_dataset(&cfg).unwrap();
        let clean_refs = ds.train_references.clone().unwrap();
        let target = contaminate(&mut ds, &cfg);
        let (params, _) = train_inpainter(&ds.train_nominal, &inpaint_config(seed)).unwrap();
        let g = Generator::new(params).unwrap();
        let candidate = &ds.test_items[target].candidate;
        let (real, sim) = bank_scores(&g, ds.train_references.as_ref().unwrap(), candidate, seed);
        let (real_clean, sim_clean) = bank_scores(&g, &clean_refs, candidate, seed);
        if sim > real {
            wins += 1;
        }
        rows.push(format!(
            "seed {seed}: real {real:.3} sim {sim:.3} (uncontaminated real {real_clean:.3} sim {sim_clean:.3})"
        ));
        eprintln!("  criterion 7 {}", rows.last().unwrap());
    }
    let need = seeds.len().saturating_sub(1).max(1);
    pass_if(
        wins >= need,
        format!(
            "simulated-bank score above real-bank score in {wins}/{} seeds (need >= {need}); {}",
            seeds.len(),
            rows.join("; ")
        ),
    )
}

fn criterion_toothbrush() -> Outcome {
    let (Some(data), Some(features)) = (
        std::env::var_os("REFSIM_TOOTHBRUSH_DATA").map(PathBuf::from),
        std::env::var_os("REFSIM_TOOTHBRUSH_FEATURES").map(PathBuf::from),
    ) else {
        return Outcome {
            passed: None,
            detail: "set REFSIM_TOOTHBRUSH_DATA and REFSIM_TOOTHBRUSH_FEATURES to run".into(),
        };
    };
    let ds = load_dataset(&data, &MvtecOptions::default()).unwrap();
    let bytes = std::fs::read(&features).unwrap();
    let grids = load_feature_grids(&features).unwrap();
    let imported = ImportedFeatures {
        source: sha256_hex(&bytes),
        grids: grids.into_iter().map(|n| (n.name, n.grid)).collect(),
    };
    let pre = Prerequisites {
        inpainter: None,
        vae: None,
        backbone: None,
        features: Some(&imported),
    };
    let cfg = ExperimentConfig::default();
    let f = |mode| {
        run_experiment(&ds, Pipeline::Membank, mode, &cfg, &pre)
            .unwrap()
            .aggregates
            .f_score
            .unwrap_or(0.0)
    };
    let (real, sim) = (f(RefMode::Real), f(RefMode::SimulatedInpaint));
    pass_if(
        sim >= 0.95,
        format!("F simulated {sim:.3} (need >= 0.95), real {real:.3}"),
    )
}

/// Exact rational harmonic mean, rounded once.
fn f_oracle(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    // P = tp/(tp+fp), R = tp/(tp+fn); 2PR/(P+R) over a common denominator.
    let num = 2 * tp * tp;
    let den = tp * (tp + fn_) + tp * (tp + fp);
    num as f64 / den as f64
}

fn criterion_metrics_and_files() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);
    let mut bad = 0;
    let mut compared = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let labels: Vec<Label> = (0..n)
            .map(|_| {
                if rng.random::<bool>() {
                    Label::Defective
                } else {
                    Label::Nominal
                }
            })
            .collect();
        let decisions: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        let c = Confusion::from_decisions(&decisions, &labels).unwrap();
        let count = |label: Label, flagged: bool| {
            labels
                .iter()
                .zip(&decisions)
                .filter(|(l, d)| **l == label && **d == flagged)
                .count() as u64
        };
        let (tp, fp) = (count(Label::Defective, true), count(Label::Nominal, true));
        let (tn, fn_) = (count(Label::Nominal, false), count(Label::Defective, false));
        let checks = [
            (
                c.capture_rate().ok(),
                (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64),
            ),
            (
                c.filter_rate().ok(),
                (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64),
            ),
            (
                c.f_score().ok(),
                (tp + fp > 0 && tp + fn_ > 0).then(|| f_oracle(tp, fp, fn_)),
            ),
        ];
        for (got, want) in checks {
            compared += 1;
            if got.map(f64::to_bits) != want.map(f64::to_bits) {
                bad += 1;
            }
        }
    }

    let mut file_notes = Vec::new();
    let params = {
        let mut g = ChaCha8Rng::seed_from_u64(5);
        let ds = make_synthetic_dataset(&SyntheticConfig {
            n_train: 4,
            width: 16,
            height: 16,
            defect_size: 2,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let cfg = InpaintConfig {
            epochs: 1,
            seed: g.random(),
            ..InpaintConfig::default()
        };
        (train_inpainter(&ds.train_nominal, &cfg).unwrap().0, ds)
    };
    let (params, ds) = params;
    let bytes = encode_checkpoint(&params);
    let back = decode_checkpoint(&bytes).unwrap();
    let ckpt_exact = encode_checkpoint(&back) == bytes;
    let ckpt_crc = (0..bytes.len()).step_by(97).all(|i| {
        let mut b = bytes.clone();
        b[i] ^= 0x20;
        decode_checkpoint(&b).is_err()
    });
    file_notes.push(format!("checkpoint exact {ckpt_exact}, corruption detected {ckpt_crc}"));

    let bb = Backbone::new(params, "enc2").unwrap();
    let bank = build_bank(&bb, &ds.train_nominal, Provenance::RealRef).unwrap();
    let bank = coreset_subsample(&bank, 0.5, 3).unwrap();
    let bytes = encode_bank(&bank);
    let back = decode_bank(&bytes).unwrap();
    let bank_exact = encode_bank(&back) == bytes && back == bank;
    let bank_crc = (0..bytes.len()).step_by(97).all(|i| {
        let mut b = bytes.clone();
        b[i] ^= 0x20;
        decode_bank(&b).is_err()
    });
    file_notes.push(format!("bank exact {bank_exact}, corruption detected {bank_crc}"));

    pass_if(
        bad == 0 && ckpt_exact && ckpt_crc && bank_exact && bank_crc,
        format!(
            "{compared} metric values on 1000 configurations, {bad} bit mismatches; {}",
            file_notes.join("; ")
        ),
    )
}

fn main() -> ExitCode {
    if std::env::var_os("REFSIM_THREADS").is_none() {
        std::env::set_var("REFSIM_THREADS", "1");
    }
    refsim_core::util::init_thread_pool();
    // `cargo test -- <filter>` and `--list` pass through; this target has no sub-tests to filter.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let only: Option<Vec<u32>> = std::env::var("REFSIM_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let seeds: Vec<u64> = (1..=5).collect();

    let stripe_models = (wanted(2) || wanted(3)).then(|| train_stripes(wanted(3)));
    let criteria: Vec<Criterion> = vec![
        (1, "gradient suite", Box::new(criterion_gradients)),
        (
            2,
            "inpainting trainer beats the mean baseline",
            Box::new(|| criterion_inpaint_sanity(stripe_models.as_ref().unwrap())),
        ),
        (
            3,
            "defect elimination",
            Box::new(|| criterion_elimination(stripe_models.as_ref().unwrap())),
        ),
        (4, "closed-form KL", Box::new(criterion_kl)),
        (5, "exact k-NN and coreset bound", Box::new(criterion_knn)),
        (
            6,
            "simulated references no worse than real",
            Box::new(|| criterion_directional(&seeds)),
        ),
        (
            7,
            "contaminated memory bank",
            Box::new(|| criterion_contamination(&seeds)),
        ),
        (8, "toothbrush with imported features", Box::new(criterion_toothbrush)),
        (
            9,
            "metric oracles and file round trips",
            Box::new(criterion_metrics_and_files),
        ),
    ];
    let mut failed = 0;
    for (n, name, run) in &criteria {
        if !wanted(*n) {
            continue;
        }
        let t = Instant::now();
        let out = run();
        let tag = match out.passed {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "SKIP",
        };
        println!(
            "criterion {n} {tag} {name}: {} [{:.1} s]",
            out.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
