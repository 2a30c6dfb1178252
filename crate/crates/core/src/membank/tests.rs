use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::generative::{encoder, INPAINTER_ARCH};
use crate::imagecore::texture::{Texture, TextureKind};
use crate::imagecore::Image;
use crate::nncore::{ModelMeta, ModelParams};

const SIDE: usize = 32;

fn random_backbone(seed: u64, tag: &str) -> Backbone {
    let mut meta = ModelMeta::new(INPAINTER_ARCH);
    meta.info
        .insert("input_shape".into(), serde_json::json!([SIDE, SIDE, 1]));
    let mut params = ModelParams::new(meta);
    encoder(1)
        .init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap();
    Backbone::new(params, tag).unwrap()
}

fn texture_images(seed: u64, n: usize) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = Texture::sample(TextureKind::Stripes, SIDE, SIDE, &mut rng);
    (0..n)
        .map(|_| tex.render(SIDE, SIDE, (rng.random_range(0.0..16.0), rng.random_range(0.0..16.0))))
        .collect()
}

fn meta() -> BackboneMeta {
    BackboneMeta {
        checkpoint_hash: "test".into(),
        layer_tag: "enc2".into(),
    }
}

fn random_bank(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> MemoryBank {
    let v = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    MemoryBank::new(dim, v, Provenance::RealRef, meta()).unwrap()
}

#[test]
fn extraction_is_deterministic_and_shaped() {
    let bb = random_backbone(1, "enc2");
    let img = &texture_images(2, 1)[0];
    let a = bb.extract(img).unwrap();
    assert_eq!((a.gh, a.gw, a.dim), (8, 8, 32));
    assert_eq!(a, bb.extract(img).unwrap());
    assert!(matches!(
        Backbone::new(bb_params(), "enc9"),
        Err(MembankError::InvalidTag(_))
    ));
    let wrong = Image::filled(16, 16, 1, 0.2).unwrap();
    assert!(matches!(bb.extract(&wrong), Err(MembankError::ShapeMismatch { .. })));
}

fn bb_params() -> ModelParams {
    let mut meta = ModelMeta::new(INPAINTER_ARCH);
    meta.info
        .insert("input_shape".into(), serde_json::json!([SIDE, SIDE, 1]));
    ModelParams::new(meta)
}

#[test]
fn constant_image_gives_equal_vectors() {
    let bb = random_backbone(3, "enc3");
    let g = bb.extract(&Image::filled(SIDE, SIDE, 1, 0.37).unwrap()).unwrap();
    let first = g.vector(0).to_vec();
    for cell in 0..g.cells() {
        for (a, b) in g.vector(cell).iter().zip(&first) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn translation_by_one_stride_shifts_the_grid() {
    let bb = random_backbone(4, "enc2");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tex = Texture::sample(TextureKind::Grid, SIDE, SIDE, &mut rng);
    let a = bb.extract(&tex.render(SIDE, SIDE, (0.0, 0.0))).unwrap();
    // b(x, y) = a(x + 4, y): one enc2 stride to the left.
    let b = bb.extract(&tex.render(SIDE, SIDE, (-4.0, 0.0))).unwrap();
    for gy in 2..a.gh - 2 {
        for gx in 2..a.gw - 3 {
            let va = a.vector(gy * a.gw + gx + 1);
            let vb = b.vector(gy * b.gw + gx);
            for (x, y) in va.iter().zip(vb) {
                assert!((x - y).abs() < 1e-5, "cell ({gx}, {gy}): {x} vs {y}");
            }
        }
    }
}

#[test]
fn receptive_map_tiles_the_image() {
    for (gh, gw, w, h) in [(8, 8, 32, 32), (3, 5, 17, 10), (1, 1, 4, 4)] {
        let g = FeatureGrid::new(gh, gw, 1, vec![0.0; gh * gw], w, h).unwrap();
        let mut hits = vec![0; w * h];
        for cell in 0..g.cells() {
            let [x0, y0, x1, y1] = g.receptive(cell);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    hits[y * w + x] += 1;
                }
            }
        }
        assert!(hits.iter().all(|h| *h == 1));
    }
}

#[test]
fn bank_counts_and_duplicates() {
    let bb = random_backbone(6, "enc2");
    let imgs = texture_images(7, 3);
    let bank = build_bank(&bb, &imgs, Provenance::RealRef).unwrap();
    assert_eq!(bank.len(), 3 * 64);
    assert_eq!(bank.backbone.layer_tag, "enc2");
    let dup = build_bank(&bb, &[imgs[0].clone(), imgs[0].clone()], Provenance::SimulatedRef).unwrap();
    assert_eq!(dup.len(), 128);
    assert_eq!(dup.vector(5), dup.vector(64 + 5));
    assert_eq!(bank, build_bank(&bb, &imgs, Provenance::RealRef).unwrap());
    assert!(matches!(
        build_bank(&bb, &[], Provenance::RealRef),
        Err(MembankError::EmptyRefs)
    ));
}

#[test]
fn full_fraction_coreset_is_the_bank() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bank = random_bank(&mut rng, 40, 4);
    let c = coreset_subsample(&bank, 1.0, 3).unwrap();
    let core = c.coreset().unwrap();
    let mut idx = core.indices.clone();
    idx.sort();
    assert_eq!(idx, (0..40).collect::<Vec<_>>());
    assert_eq!(core.cover_radius, 0.0);
    assert!(coreset_subsample(&bank, 0.0, 0).is_err());
    assert_eq!(coreset_size(30, 0.1), 3);
}

#[test]
fn coreset_picks_one_vector_per_cluster() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
    let mut v = Vec::new();
    let mut cluster_of = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..10 {
            v.push(center[0] + rng.random_range(-0.5..0.5));
            v.push(center[1] + rng.random_range(-0.5..0.5));
            cluster_of.push(c);
        }
    }
    let bank = MemoryBank::new(2, v, Provenance::RealRef, meta()).unwrap();
    // Intra-cluster diameter is at most the box diagonal.
    let diameter = 2f64.sqrt();
    for seed in 0..10 {
        let c = coreset_subsample(&bank, 0.1, seed).unwrap();
        let core = c.coreset().unwrap();
        let mut clusters: Vec<usize> = core.indices.iter().map(|i| cluster_of[*i]).collect();
        clusters.sort();
        assert_eq!(clusters, vec![0, 1, 2]);
        assert!(core.cover_radius <= diameter);
    }
}

/// Optimal k-center radius by enumerating every k-subset.
fn optimal_radius(bank: &MemoryBank, k: usize) -> f64 {
    fn rec(bank: &MemoryBank, k: usize, start: usize, chosen: &mut Vec<usize>, best: &mut f64) {
        if chosen.len() == k {
            let r = (0..bank.len())
                .map(|i| {
                    chosen
                        .iter()
                        .map(|c| squared_distance(bank.vector(i), bank.vector(*c)))
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
                .sqrt();
            *best = best.min(r);
            return;
        }
        for i in start..bank.len() {
            chosen.push(i);
            rec(bank, k, i + 1, chosen, best);
            chosen.pop();
        }
    }
    let mut best = f64::INFINITY;
    rec(bank, k, 0, &mut Vec::new(), &mut best);
    best
}

#[test]
fn greedy_cover_radius_is_within_twice_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for seed in 0..10 {
        let n = rng.random_range(4..=24);
        let bank = random_bank(&mut rng, n, 3);
        let k = rng.random_range(1..=3usize);
        let c = coreset_subsample(&bank, k as f64 / n as f64, seed).unwrap();
        let core = c.coreset().unwrap();
        assert_eq!(core.indices.len(), k);
        assert!(core.cover_radius <= 2.0 * optimal_radius(&bank, k) + 1e-12);
    }
}

#[test]
fn exact_knn_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let n = rng.random_range(1..1500);
        let dim = rng.random_range(1..40);
        let bank = random_bank(&mut rng, n, dim);
        let candidates: Vec<usize> = (0..n).collect();
        for _ in 0..10 {
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = rng.random_range(1..=5);
            let fast = knn_exact(bank.vectors(), dim, &candidates, &q, k);
            let slow = knn_brute_force(bank.vectors(), dim, &candidates, &q, k);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert_eq!(a.index, b.index);
                assert!((a.distance - b.distance).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn self_match_scores_zero() {
    let bb = random_backbone(12, "enc2");
    let imgs = texture_images(13, 4);
    let bank = build_bank(&bb, &imgs, Provenance::RealRef).unwrap();
    let r = score(&bank, &bb, &imgs[2], 1).unwrap();
    assert!(r.image_score < 1e-4);
    assert_eq!((r.width, r.height, r.map.len()), (SIDE, SIDE, SIDE * SIDE));
    assert!(matches!(
        score(&bank, &bb, &imgs[0], bank.len() + 1),
        Err(MembankError::TooFewVectors { .. })
    ));
}

#[test]
fn upsampling_follows_cell_centers() {
    // Stride-4 cells have centers at 4 gx + 1.5; a ramp in gx must
    // interpolate linearly between them and clamp outside.
    let g = FeatureGrid::new(2, 4, 1, vec![0.0; 8], 16, 8).unwrap();
    let values: Vec<f64> = (0..8).map(|c| (c % 4) as f64).collect();
    let up = upsample_grid(&g, &values);
    for y in 0..8 {
        for x in 0..16 {
            let want = ((x as f64 - 1.5) / 4.0).clamp(0.0, 3.0);
            assert!((up[y * 16 + x] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn classification_and_threshold() {
    let r = AnomalyResult {
        width: 1,
        height: 1,
        map: vec![0.0],
        grid_scores: vec![0.0],
        image_score: 0.0,
        decision: None,
    };
    assert!(!classify(&r, 0.1).unwrap());
    assert!(classify(&r, -1.0).is_err());
    let scores = [0.2, 0.5, 0.3];
    let t = nominal_threshold(&scores, THRESHOLD_MARGIN).unwrap();
    assert!((t - 0.525).abs() < 1e-12);
    for s in scores {
        let r = AnomalyResult {
            image_score: s,
            ..r.clone()
        };
        assert!(!classify(&r, t).unwrap());
        assert!(!classify(&r, nominal_threshold(&scores, 1.0).unwrap()).unwrap());
    }
    assert!(nominal_threshold(&[], 1.05).is_err());
}

#[test]
fn bank_file_round_trip_and_corruption() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let bank = coreset_subsample(&random_bank(&mut rng, 50, 6), 0.2, 1).unwrap();
    let bytes = encode_bank(&bank);
    let back = decode_bank(&bytes).unwrap();
    assert_eq!(back, bank);
    assert_eq!(encode_bank(&back), bytes);

    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(decode_bank(&flipped), Err(MembankError::Checksum { .. })));
    assert!(matches!(
        decode_bank(&bytes[..bytes.len() - 9]),
        Err(MembankError::Truncated)
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_bank(&bad), Err(MembankError::BadMagic)));
    let mut ver = bytes.clone();
    ver[4] = 9;
    assert!(matches!(decode_bank(&ver), Err(MembankError::Version { found: 9, .. })));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.rsmb");
    save_bank(&path, &bank).unwrap();
    assert_eq!(load_bank(&path).unwrap(), bank);
}

#[test]
fn feature_grid_file_round_trip() {
    let bb = random_backbone(15, "enc3");
    let grids: Vec<NamedGrid> = texture_images(16, 2)
        .iter()
        .enumerate()
        .map(|(i, img)| NamedGrid {
            name: format!("img{i:03}"),
            grid: bb.extract(img).unwrap(),
        })
        .collect();
    let bytes = encode_feature_grids(&grids).unwrap();
    assert_eq!(decode_feature_grids(&bytes).unwrap(), grids);
    let mut flipped = bytes.clone();
    flipped[bytes.len() - 12] ^= 1;
    assert!(matches!(
        decode_feature_grids(&flipped),
        Err(MembankError::Checksum { .. })
    ));
}

#[test]
fn feature_grid_file_accepts_f32_payloads() {
    // Hand-assembled f32 file with one 1×2 grid of dim 2.
    let mut bytes = b"RSFG".to_vec();
    bytes.extend_from_slice(&FEATURE_GRID_VERSION.to_le_bytes());
    bytes.push(0);
    bytes.extend_from_slice(&2u32.to_le_bytes());
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.push(b'a');
    for v in [4u32, 2, 1, 2] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in [0.5f32, 1.5, -2.0, 0.25] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    let grids = decode_feature_grids(&bytes).unwrap();
    assert_eq!(grids.len(), 1);
    assert_eq!(grids[0].name, "a");
    assert_eq!(grids[0].grid.vectors, vec![0.5, 1.5, -2.0, 0.25]);
    assert_eq!(grids[0].grid.receptive(1), [2, 0, 3, 1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn coreset_score_is_within_cover_radius(seed in any::<u64>(), fraction in 0.05f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = random_bank(&mut rng, 120, 3);
        let core = coreset_subsample(&bank, fraction, seed).unwrap();
        let r = core.coreset().unwrap().cover_radius;
        let grid = FeatureGrid::new(3, 3, 3, (0..27).map(|_| rng.random_range(-1.5..1.5)).collect(), 12, 12).unwrap();
        let full = score_grid(&bank, &grid, 1, MAP_SIGMA).unwrap().image_score;
        let sub = score_grid(&core, &grid, 1, MAP_SIGMA).unwrap().image_score;
        prop_assert!(sub >= full - 1e-12);
        prop_assert!(sub <= full + r + 1e-12);
    }

    #[test]
    fn image_score_is_map_max(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = random_bank(&mut rng, 30, 2);
        let grid = FeatureGrid::new(2, 3, 2, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect(), 9, 8).unwrap();
        let res = score_grid(&bank, &grid, 2, MAP_SIGMA).unwrap();
        prop_assert_eq!(res.image_score, res.map.iter().cloned().fold(0.0, f64::max));
    }
}
