use ndarray::{array, Array2};

use super::*;
use crate::dataio::{generate_synthetic, SyntheticSpec};
use crate::features::ExtractorConfig;
use crate::rng::rng_from_seed;
use rand::Rng as _;

fn cm(rows: Array2<u64>) -> ConfusionMatrix {
    ConfusionMatrix::from_counts(rows).unwrap()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn hungarian_examples() {
    let diag = cm(Array2::from_diag(&ndarray::arr1(&[5u64, 3, 9])));
    let m = hungarian_match(&diag);
    assert_eq!(m, Matching::identity(3));
    assert_eq!(metrics(&diag, &m).accuracy, 1.0);

    let c = cm(array![[3, 1], [0, 4]]);
    let m = hungarian_match(&c);
    assert_eq!(m, Matching::identity(2));
    let r = metrics(&c, &m);
    assert_eq!(r.accuracy, 0.875);
    assert!((r.per_class_iou[0].unwrap() - 0.75).abs() < 1e-15);
    assert!((r.per_class_iou[1].unwrap() - 0.8).abs() < 1e-15);
    assert!((r.miou - 0.775).abs() < 1e-12);

    // Rows permuted: the inverse permutation comes back.
    let perm = [2usize, 0, 3, 1];
    let mut rows = Array2::<u64>::zeros((4, 4));
    for (p, &g) in perm.iter().enumerate() {
        rows[[p, g]] = 10 + g as u64;
    }
    let m = hungarian_match(&cm(rows));
    assert_eq!(m.pred_to_gt, perm.iter().map(|&g| Some(g)).collect::<Vec<_>>());
}

#[test]
fn hungarian_matches_brute_force() {
    let mut rng = rng_from_seed(3);
    for _ in 0..60 {
        let kp = rng.random_range(1..=5);
        let kg = rng.random_range(1..=5);
        let c = cm(Array2::from_shape_fn((kp, kg), |_| rng.random_range(0..50)));
        let n = kp.max(kg);
        let best = permutations(n)
            .iter()
            .map(|p| (0..kp).filter(|&i| p[i] < kg).map(|i| c.counts[[i, p[i]]]).sum::<u64>())
            .max()
            .unwrap();
        let m = hungarian_match(&c);
        assert_eq!(m.matched_mass(&c), best);
        let used: Vec<usize> = m.pred_to_gt.iter().flatten().copied().collect();
        let mut dedup = used.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(used.len(), dedup.len());
    }
}

#[test]
fn single_cluster_prediction() {
    let c = cm(array![[50, 50]]);
    let r = metrics(&c, &hungarian_match(&c));
    assert_eq!(r.accuracy, 0.5);
    assert!((r.miou - 0.25).abs() < 1e-15);
    assert_eq!(r.matching, vec![Some(0)]);
}

#[test]
fn absent_class_is_excluded() {
    let c = cm(array![[4, 0, 1], [0, 0, 5], [0, 0, 0]]);
    let r = metrics(&c, &hungarian_match(&c));
    assert_eq!(r.per_class_iou[1], None);
    let present: Vec<f64> = r.per_class_iou.iter().flatten().copied().collect();
    assert_eq!(present.len(), 2);
}

#[test]
fn partitions() {
    let c = cm(array![[9, 1, 0, 2], [1, 7, 3, 0], [0, 2, 8, 1], [3, 0, 1, 6]]);
    let m = hungarian_match(&c);
    let full = metrics(&c, &m);
    let all = partition_metrics(&c, &m, &[("all".into(), vec![0, 1, 2, 3])]).unwrap();
    assert_eq!(all["all"].accuracy, full.accuracy);
    assert_eq!(all["all"].miou, full.miou);

    let split = partition_metrics(&c, &m, &[("a".into(), vec![0, 1]), ("b".into(), vec![2, 3])]).unwrap();
    assert_eq!(split["a"].pixels + split["b"].pixels, c.total());

    // Independent recomputation on the two gt columns.
    let sub = c.counts.slice(ndarray::s![.., 0..2]).to_owned();
    let tp: Vec<u64> = (0..2).map(|g| sub[[m.gt_to_pred(g).unwrap(), g]]).collect();
    let acc = (tp[0] + tp[1]) as f64 / sub.sum() as f64;
    let iou: Vec<f64> = (0..2)
        .map(|g| {
            let p = m.gt_to_pred(g).unwrap();
            tp[g] as f64 / (sub.column(g).sum() + sub.row(p).sum() - tp[g]) as f64
        })
        .collect();
    assert!((split["a"].accuracy - acc).abs() < 1e-15);
    assert!((split["a"].miou - (iou[0] + iou[1]) / 2.0).abs() < 1e-15);

    assert!(partition_metrics(&c, &m, &[("e".into(), vec![])]).is_err());
    assert!(partition_metrics(&c, &m, &[("x".into(), vec![0]), ("y".into(), vec![0])]).is_err());
}

#[test]
fn confusion_skips_ignore() {
    let mut c = ConfusionMatrix::new(2, 2);
    c.accumulate(&array![[0, 1], [1, 1]], &array![[0, 255], [1, 0]], 255).unwrap();
    assert_eq!(c.total(), 3);
    assert_eq!(c.counts, array![[1, 0], [1, 1]]);
}

fn data() -> Vec<ImageSample> {
    generate_synthetic(&SyntheticSpec {
        n_images: 4,
        side: 32,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn random_centroids(k: usize, seed: u64) -> Centroids {
    let mut rng = rng_from_seed(seed);
    Centroids::from_unnormalized(Array2::from_shape_fn((k, 128), |_| rng.random_range(-1.0..1.0)), 0).unwrap()
}

#[test]
fn prediction_shapes_and_single_cluster() {
    let ex = Extractor::new(ExtractorConfig::default(), 1).unwrap();
    let d = data();
    let preds = predict_labels(&ex, &random_centroids(3, 1), &d).unwrap();
    assert_eq!(preds[0].dim(), (32, 32));
    // Each 4x4 block carries one feature cell's label.
    for by in 0..8 {
        for bx in 0..8 {
            let v = preds[0][[by * 4, bx * 4]];
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(preds[0][[by * 4 + y, bx * 4 + x]], v);
                }
            }
        }
    }
    let one = predict_labels(&ex, &random_centroids(1, 2), &d).unwrap();
    assert!(one.iter().all(|p| p.iter().all(|&l| l == 0)));
}

#[test]
fn upsample_block_shape() {
    let g = Array2::from_shape_fn((16, 16), |(y, x)| (y * 16 + x) as u32);
    let up = upsample_nearest(&g, (64, 64));
    assert_eq!(up[[5, 9]], g[[1, 2]]);
    assert_eq!(up[[63, 63]], g[[15, 15]]);
}

#[test]
fn robustness_identity_equals_clean() {
    let ex = Extractor::new(ExtractorConfig::default(), 1).unwrap();
    let d = data();
    let c = random_centroids(4, 3);
    let r = robustness_eval(&ex, &c, &d, 4, &identity_records(&d)).unwrap();
    assert_eq!(r.photometric, r.clean);
    assert_eq!(r.geometric, r.clean);
    let recs = robustness_records(&d, 9);
    let r = robustness_eval(&ex, &c, &d, 4, &recs).unwrap();
    assert!(r.photometric.accuracy >= 0.0 && r.photometric.accuracy <= 1.0);
}

#[test]
fn majority_vote_rendering() {
    let palette = default_palette(3);
    let gt = vec![array![[0u32, 1, 2], [2, 1, 0]]];
    let imgs = render_majority_vote(&gt, &gt, &palette, 3, 255).unwrap();
    assert_eq!(imgs[0], paint(&gt[0], &palette));

    // 60/40 split, then an exact tie, then an empty cluster.
    let pred = vec![array![[0u32, 0, 0, 0, 0, 1, 1]]];
    let gts = vec![array![[1u32, 1, 1, 2, 2, 2, 0]]];
    let img = &render_majority_vote(&pred, &gts, &palette, 3, 255).unwrap()[0];
    assert_eq!(img.get_pixel(0, 0).0, palette[1]);
    assert_eq!(img.get_pixel(5, 0).0, palette[0]);
    let pred = vec![array![[0u32, 2]]];
    let gts = vec![array![[1u32, 255]]];
    let img = &render_majority_vote(&pred, &gts, &palette, 3, 255).unwrap()[0];
    assert_eq!(img.get_pixel(1, 0).0, EMPTY_COLOR);
}

#[test]
fn neighbor_search() {
    let ex = Extractor::new(ExtractorConfig::default(), 1).unwrap();
    let d = data();
    let z = ex.extract(&d[0].image).unwrap();
    let corpus = vec![("a".to_string(), z.clone()), ("dup".to_string(), z), ("b".to_string(), ex.extract(&d[1].image).unwrap())];
    let res = nearest_neighbors("a", (3, 5), &corpus, 5, 2).unwrap();
    assert_eq!(res.neighbors.len(), 5);
    assert_eq!(res.neighbors[0].image_id, "dup");
    assert_eq!(res.neighbors[0].coord, (3, 5));
    assert_eq!(res.neighbors[0].distance, 0.0);
    assert!(res.neighbors.windows(2).all(|w| w[0].distance <= w[1].distance));
    assert!(!res.neighbors.iter().any(|n| n.image_id == "a" && n.coord == (3, 5)));
    assert!(nearest_neighbors("a", (3, 5), &corpus, 0, 2).unwrap().neighbors.is_empty());
    let all = nearest_neighbors("a", (0, 0), &corpus, 10_000, 2).unwrap();
    assert!(all.truncated);
    assert_eq!(all.neighbors.len(), 3 * 16 - 1);
    assert!(nearest_neighbors("a", (8, 0), &corpus, 1, 2).is_err());
    assert!(nearest_neighbors("zzz", (0, 0), &corpus, 1, 2).is_err());
}

#[test]
fn scale_invariant_prediction() {
    // Positive rescaling of the pre-normalization map leaves the argmin fixed.
    let ex = Extractor::new(ExtractorConfig::default(), 4).unwrap();
    let d = data();
    let c = random_centroids(5, 6);
    let fused = ex.fused(&d[0].image).unwrap();
    let a = assign_grid(&crate::ops::l2_normalize(&fused).0, &c).unwrap();
    let b = assign_grid(&crate::ops::l2_normalize(&(&fused * 37.5)).0, &c).unwrap();
    assert_eq!(a, b);
}
