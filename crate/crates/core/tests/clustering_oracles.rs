use featseg::clustering::{
    assign, fit_restarts, inertia, kmeanspp_init, lloyd_fit, ClusterModel, LloydConfig,
    PixelDataset,
};
use featseg::rng::SplitMix64;
use featseg::tensorio::FeatureTensor;
use proptest::prelude::*;

/// Minimum of J over every labeling of the points into at most k groups.
fn exhaustive_optimum(points: &[f64], dim: usize, k: usize) -> f64 {
    let n = points.len() / dim;
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for d in 0..dim {
                sums[l * dim + d] += points[i * dim + d];
            }
        }
        let mut j = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            for d in 0..dim {
                let mean = sums[l * dim + d] / counts[l] as f64;
                j += (points[i * dim + d] - mean).powi(2);
            }
        }
        best = best.min(j);
        let mut pos = 0;
        loop {
            if pos == n {
                return best;
            }
            labels[pos] += 1;
            if labels[pos] < k {
                break;
            }
            labels[pos] = 0;
            pos += 1;
        }
    }
}

fn to_rows(points: &[f64]) -> Vec<f32> {
    points.iter().map(|&v| v as f32).collect()
}

#[test]
fn exhaustive_oracle_on_hand_instance() {
    assert_eq!(exhaustive_optimum(&[0.0, 2.0, 10.0], 1, 2), 2.0);
    assert_eq!(exhaustive_optimum(&[1.0, 1.0, 5.0, 5.0], 1, 2), 0.0);
}

#[test]
fn three_blobs_within_one_percent_of_multi_restart_best() {
    let mut rng = SplitMix64::new(42);
    let centers = [(0.0, 0.0), (10.0, 0.0), (5.0, 9.0)];
    let mut rows = Vec::new();
    for i in 0..300 {
        let (cx, cy) = centers[i % 3];
        rows.push((cx + rng.next_gaussian()) as f32);
        rows.push((cy + rng.next_gaussian()) as f32);
    }
    let data = PixelDataset::from_rows(rows, 2).unwrap();
    let cfg = LloydConfig::default();
    let (_, best) = fit_restarts(&data, 3, 0, 100, &cfg).unwrap();
    let single = lloyd_fit(&data, &kmeanspp_init(&data, 3, 5).unwrap(), &cfg).unwrap();
    let j = inertia(&single, &data).unwrap();
    assert!(j <= best * 1.01, "J {j} vs best {best}");
}

#[test]
fn restarts_reach_exhaustive_optimum_on_tiny_instances() {
    let mut hits = 0;
    for seed in 0..10u64 {
        let mut rng = SplitMix64::new(seed);
        let n = 6 + rng.next_index(5);
        let points: Vec<f64> = (0..n * 2)
            .map(|_| (rng.next_f64() * 8.0) as f32 as f64)
            .collect();
        let data = PixelDataset::from_rows(to_rows(&points), 2).unwrap();
        let (_, j) = fit_restarts(&data, 3, seed, 50, &LloydConfig::default()).unwrap();
        let opt = exhaustive_optimum(&points, 2, 3);
        assert!(j >= opt - 1e-9 * opt.max(1.0));
        hits += ((j - opt).abs() <= 1e-9 * opt.max(1.0)) as usize;
    }
    assert!(hits >= 9, "{hits}/10");
}

fn random_rows(seed: u64, n: usize, dim: usize) -> Vec<f32> {
    let mut rng = SplitMix64::new(seed);
    (0..n * dim)
        .map(|_| rng.uniform(-3.0, 3.0) as f32)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn full_batch_history_is_non_increasing(seed in any::<u64>(), n in 5usize..400, dim in 1usize..8, k in 1usize..6) {
        let data = PixelDataset::from_rows(random_rows(seed, n, dim), dim).unwrap();
        let init = kmeanspp_init(&data, k.min(n), seed).unwrap();
        let model = lloyd_fit(&data, &init, &LloydConfig::default()).unwrap();
        let h = &model.inertia_history;
        let eps = 1e-6 * h[0];
        for w in h.windows(2) {
            prop_assert!(w[1] <= w[0] + eps, "{:?}", h);
        }
    }

    #[test]
    fn assign_follows_centroid_permutation(seed in any::<u64>(), k in 2usize..6) {
        let dim = 3;
        let (h, w) = (5, 6);
        let mut rng = SplitMix64::new(seed);
        let centroids: Vec<f64> = (0..k * dim).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut perm);
        // permuted[j] = original[perm[j]]
        let permuted: Vec<f64> = perm.iter().flat_map(|&p| centroids[p * dim..(p + 1) * dim].to_vec()).collect();
        let a = ClusterModel::from_centroids(k, dim, centroids).unwrap();
        let b = ClusterModel::from_centroids(k, dim, permuted).unwrap();
        let feats: Vec<f32> = (0..dim * h * w).map(|_| rng.uniform(-2.0, 2.0) as f32).collect();
        let t = FeatureTensor::from_f32(&[dim, h, w], feats.clone()).unwrap();
        let la = assign(&a, &t).unwrap();
        let lb = assign(&b, &t).unwrap();
        let mut inverse = vec![0usize; k];
        for (j, &p) in perm.iter().enumerate() {
            inverse[p] = j;
        }
        for (x, y) in la.labels.iter().zip(&lb.labels) {
            prop_assert_eq!(inverse[*x as usize], *y as usize);
        }
        let rows: Vec<f32> = (0..h * w).flat_map(|p| (0..dim).map(move |c| (c, p))).map(|(c, p)| feats[c * h * w + p]).collect();
        let data = PixelDataset::from_rows(rows, dim).unwrap();
        prop_assert_eq!(inertia(&a, &data).unwrap(), inertia(&b, &data).unwrap());
    }

    #[test]
    fn assign_is_pure(seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let model = ClusterModel::from_centroids(4, 2, (0..8).map(|_| rng.next_f64()).collect()).unwrap();
        let t = FeatureTensor::from_f32(&[2, 7, 9], (0..126).map(|_| rng.next_f64() as f32).collect()).unwrap();
        prop_assert_eq!(assign(&model, &t).unwrap(), assign(&model, &t).unwrap());
    }
}
