//! Property tests of relation maps and the decoupled losses against
//! straightforward reference computations.

use manifold_kd::losses::{self, SampleIndices};
use manifold_kd::Tensor64;
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn features(b: usize, n: usize, d: usize) -> impl Strategy<Value = Tensor64> {
    prop::collection::vec(-3.0f64..3.0, b * n * d)
        .prop_map(move |v| Tensor64::new([b, n, d], v).unwrap())
}

fn pair() -> impl Strategy<Value = (Tensor64, Tensor64)> {
    (1usize..=6, 1usize..=6, 1usize..=8, 1usize..=8)
        .prop_flat_map(|(b, n, ds, dt)| (features(b, n, ds), features(b, n, dt)))
}

/// Cosine similarity of every pair of `(B·N)` rows, via nalgebra.
fn reference_map(f: &Tensor64) -> DMatrix<f64> {
    let d = f.last_dim();
    let rows = f.numel() / d;
    let mut m = DMatrix::from_row_slice(rows, d, f.data());
    for mut r in m.row_iter_mut() {
        let norm = r.norm().max(1e-12);
        r /= norm;
    }
    &m * m.transpose()
}

fn gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm_squared()
}

fn block(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn maps_are_symmetric_psd_with_unit_diagonal(f in (1usize..=5, 1usize..=5, 1usize..=6).prop_flat_map(|(b, n, d)| features(b, n, d))) {
        let m = losses::full_map(&f).unwrap();
        prop_assert!(m.is_symmetric());
        let r = m.size();
        let dm = DMatrix::from_row_slice(r, r, m.tensor().data());
        for i in 0..r {
            let row_norm: f64 = f.data()[i * f.last_dim()..(i + 1) * f.last_dim()].iter().map(|v| v * v).sum();
            if row_norm > 1e-12 {
                prop_assert!((dm[(i, i)] - 1.0).abs() < 1e-12);
            }
        }
        let eig = SymmetricEigen::new(dm);
        prop_assert!(eig.eigenvalues.iter().all(|&e| e > -1e-9), "{:?}", eig.eigenvalues);
    }

    #[test]
    fn decoupled_terms_match_reference_blocks((fs, ft) in pair()) {
        let [b, n, _] = *fs.shape() else { unreachable!() };
        let (ms, mt) = (reference_map(&fs), reference_map(&ft));
        let intra: f64 = (0..b)
            .map(|i| { let idx: Vec<usize> = (0..n).map(|p| i * n + p).collect(); gap(&block(&ms, &idx), &block(&mt, &idx)) })
            .sum::<f64>() / b as f64;
        let inter: f64 = (0..n)
            .map(|p| { let idx: Vec<usize> = (0..b).map(|i| i * n + p).collect(); gap(&block(&ms, &idx), &block(&mt, &idx)) })
            .sum::<f64>() / n as f64;
        let full = gap(&ms, &mt);
        prop_assert!((losses::intra_loss_value(&fs, &ft).unwrap() - intra).abs() < 1e-9);
        prop_assert!((losses::inter_loss_value(&fs, &ft).unwrap() - inter).abs() < 1e-9);
        prop_assert!((losses::full_manifold_loss_value(&fs, &ft).unwrap() - full).abs() < 1e-9);
        let all = SampleIndices::exhaustive(b * n);
        prop_assert!((losses::random_loss_value(&fs, &ft, &all).unwrap() - full).abs() < 1e-9);
    }

    #[test]
    fn losses_are_non_negative_and_vanish_on_equal_features((fs, ft) in pair(), seed in any::<u64>()) {
        let [b, n, _] = *fs.shape() else { unreachable!() };
        let idx = losses::sample_indices(b, n, (b * n).min(5), seed).unwrap();
        let w = losses::LossWeights::default();
        let v = losses::decoupled_loss_value(&fs, &ft, &w, &idx).unwrap();
        prop_assert!(v.intra >= 0.0 && v.inter >= 0.0 && v.random >= 0.0 && v.total >= 0.0);
        let same = losses::decoupled_loss_value(&fs, &fs, &w, &idx).unwrap();
        prop_assert_eq!(same.total, 0.0);
    }

    #[test]
    fn random_indices_are_in_range_and_distinct(b in 1usize..10, n in 1usize..10, k in 1usize..40, seed in any::<u64>()) {
        let idx = losses::sample_indices(b, n, k, seed).unwrap();
        prop_assert_eq!(idx.len(), k);
        prop_assert!(idx.indices.iter().all(|&i| i < b * n));
        if k <= b * n {
            let mut sorted = idx.indices.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), k);
        }
    }
}

#[test]
fn right_orthogonal_transforms_leave_losses_unchanged() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for (b, n, d) in [(2, 3, 4), (4, 5, 6), (3, 7, 8)] {
        let mut rand_t = |shape: [usize; 3]| Tensor64::from_fn(shape, |_| StandardNormal.sample(&mut rng));
        let fs = rand_t([b, n, d]);
        let ft = rand_t([b, n, d + 1]);
        let q = |dim: usize, seed: u64| {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut r));
            a.qr().q()
        };
        let rotate = |f: &Tensor64, q: &DMatrix<f64>| {
            let dim = f.last_dim();
            let m = DMatrix::from_row_slice(f.numel() / dim, dim, f.data()) * q;
            let mut out = Vec::with_capacity(f.numel());
            for r in m.row_iter() {
                out.extend(r.iter().copied());
            }
            Tensor64::new(f.shape().to_vec(), out).unwrap()
        };
        let (rs, rt) = (rotate(&fs, &q(d, 1)), rotate(&ft, &q(d + 1, 2)));
        let idx = losses::sample_indices(b, n, 5, 0).unwrap();
        let w = losses::LossWeights::default();
        let a = losses::decoupled_loss_value(&fs, &ft, &w, &idx).unwrap();
        let r = losses::decoupled_loss_value(&rs, &rt, &w, &idx).unwrap();
        for (x, y) in [(a.intra, r.intra), (a.inter, r.inter), (a.random, r.random)] {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }
}

#[test]
fn merged_reference_grid_has_196_patches() {
    // 56×56 patch grid merged by (14, 14) → 196 patches of 16·D.
    let d = 3;
    let f = Tensor64::from_fn([1, 56 * 56, d], |i| (i % 97) as f64);
    let m = losses::merge_patches(&f, (56, 56), losses::MergeSetting::new(14, 14)).unwrap();
    assert_eq!(m.shape(), &[1, 196, 16 * d]);
}
