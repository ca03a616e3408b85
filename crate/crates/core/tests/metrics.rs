mod oracles;

use consensus_prune::metrics::{
    bures_distance, center_columns, default_metric_set, gaussian_summary, interpolated_distance, linear_cka,
    procrustes_distance, score_layer, GaussianSummary, MetricDescriptor, MetricError, Orientation,
    RepresentationMatrix,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn rep(rows: &oracles::Rows) -> RepresentationMatrix {
    let n = rows.len();
    let d = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    RepresentationMatrix::from_row_slice(n, d, &flat, (0..n as u64).collect()).unwrap()
}

fn matrix(n: std::ops::RangeInclusive<usize>, d: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = oracles::Rows> {
    (n, d).prop_flat_map(|(n, d)| prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), n))
}

fn pair(
    n: std::ops::RangeInclusive<usize>,
    d: std::ops::RangeInclusive<usize>,
) -> impl Strategy<Value = (oracles::Rows, oracles::Rows)> {
    (n, d).prop_flat_map(|(n, d)| {
        let m = || prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), n);
        (m(), m())
    })
}

fn orthogonal(d: usize, seed: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| seed[(i * d + j) % seed.len()] + if i == j { 0.5 } else { 0.0 })
        .qr()
        .q()
}

fn diag_summary(mean: &[f64], eig: &[f64], basis: &DMatrix<f64>) -> GaussianSummary {
    let cov = basis * DMatrix::from_diagonal(&DVector::from_row_slice(eig)) * basis.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianSummary::new(DVector::from_row_slice(mean), cov).unwrap()
}

#[test]
fn centering_examples() {
    let r = rep(&vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    let c = center_columns(&r).unwrap();
    assert_eq!(c.data(), &DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 1.0, 1.0]));
    let again = center_columns(&c).unwrap();
    assert!((again.data() - c.data()).amax() < 1e-12);
    let flat = rep(&vec![vec![5.0], vec![5.0], vec![5.0]]);
    assert_eq!(center_columns(&flat).unwrap().data().amax(), 0.0);
}

#[test]
fn hand_computed_summary() {
    let g = gaussian_summary(&rep(&vec![vec![0.0, 0.0], vec![2.0, 0.0]]), 1e-6).unwrap();
    assert_eq!(g.mean(), &DVector::from_row_slice(&[1.0, 0.0]));
    let want = DMatrix::from_row_slice(2, 2, &[2.0 + 1e-6, 0.0, 0.0, 1e-6]);
    assert!((g.covariance() - want).amax() < 1e-15);
    assert!(matches!(
        RepresentationMatrix::from_row_slice(1, 2, &[1.0, 2.0], vec![0]),
        Err(MetricError::InsufficientSamples(1))
    ));
}

#[test]
fn bures_identity_vs_four_identity() {
    for d in 1..=4 {
        let a = GaussianSummary::new(DVector::zeros(d), DMatrix::identity(d, d)).unwrap();
        let b = GaussianSummary::new(DVector::zeros(d), DMatrix::identity(d, d) * 4.0).unwrap();
        assert!((bures_distance(&a, &b).unwrap() - (d as f64).sqrt()).abs() < 1e-12);
    }
}

#[test]
fn interpolated_endpoints() {
    let a = GaussianSummary::new(DVector::from_row_slice(&[0.0, 0.0]), DMatrix::identity(2, 2)).unwrap();
    let b = GaussianSummary::new(DVector::from_row_slice(&[3.0, 4.0]), DMatrix::identity(2, 2) * 2.0).unwrap();
    assert!((interpolated_distance(&a, &b, 1.0).unwrap() - 5.0).abs() < 1e-12);
    let bures = bures_distance(&a, &b).unwrap();
    assert!((interpolated_distance(&a, &b, 0.0).unwrap() - bures).abs() < 1e-9);
    assert!(matches!(
        interpolated_distance(&a, &b, 1.5),
        Err(MetricError::InvalidParameter(_))
    ));
}

#[test]
fn dispatch_matches_direct_kernel_on_shuffled_features() {
    let r = rep(&vec![
        vec![0.3, -1.2, 2.0],
        vec![1.1, 0.4, -0.7],
        vec![-0.9, 2.2, 0.1],
        vec![0.5, 0.0, 1.4],
        vec![2.1, -0.3, -1.0],
    ]);
    let shuffled = r.permute_columns(&[2, 0, 1]);
    let m = MetricDescriptor::interpolated(0.5);
    let via = score_layer(&m, &r, &shuffled).unwrap();
    let direct = interpolated_distance(
        &gaussian_summary(&r, 1e-6).unwrap(),
        &gaussian_summary(&shuffled, 1e-6).unwrap(),
        0.5,
    )
    .unwrap();
    assert_eq!(via.value, direct);
    assert_eq!(via.orientation, Orientation::Distance);
}

#[test]
fn orientations_are_fixed() {
    let set = default_metric_set();
    let o: Vec<Orientation> = set.iter().map(|m| m.orientation).collect();
    assert_eq!(
        o,
        vec![Orientation::Similarity, Orientation::Distance, Orientation::Distance, Orientation::Distance]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cka_matches_exact_hsic((x, y) in pair(3..=5, 1..=3).prop_flat_map(|(x, _)| {
        let n = x.len();
        (Just(x), prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 1..=3usize), n)
            .prop_map(|rows| { let d = rows[0].len(); rows.into_iter().map(|mut r| { r.resize(d, 0.5); r }).collect::<Vec<_>>() }))
    })) {
        let got = linear_cka(&rep(&x), &rep(&y)).unwrap();
        let want = oracles::cka_hsic_exact(&x, &y);
        prop_assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn procrustes_matches_grid((x, y) in pair(3..=5, 1..=3)) {
        let got = procrustes_distance(&rep(&x), &rep(&y)).unwrap();
        let want = oracles::procrustes_grid(&x, &y);
        prop_assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }

    #[test]
    fn bures_matches_commuting_closed_form(
        d in 1..=3usize,
        a in prop::collection::vec(0.05..4.0f64, 3),
        b in prop::collection::vec(0.05..4.0f64, 3),
        seed in prop::collection::vec(-1.0..1.0f64, 9),
    ) {
        let basis = orthogonal(d, &seed);
        let (a, b) = (&a[..d], &b[..d]);
        let zero = vec![0.0; d];
        let got = bures_distance(&diag_summary(&zero, a, &basis), &diag_summary(&zero, b, &basis)).unwrap();
        prop_assert!((got - oracles::bures_commuting(a, b)).abs() < 1e-6);
    }

    #[test]
    fn bures_matches_two_by_two_closed_form(
        l in prop::collection::vec(-1.5..1.5f64, 6),
    ) {
        // A = L Lᵀ + 0.1 I is SPD for any L.
        let spd = |p: &[f64]| {
            let m = [[p[0], 0.0], [p[1], p[2]]];
            let mut s = [[0.0; 2]; 2];
            for i in 0..2 { for j in 0..2 { s[i][j] = m[i][0] * m[j][0] + m[i][1] * m[j][1]; } }
            s[0][0] += 0.1; s[1][1] += 0.1;
            s
        };
        let (a, b) = (spd(&l[..3]), spd(&l[3..]));
        let g = |s: [[f64; 2]; 2]| GaussianSummary::new(
            DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[s[0][0], s[0][1], s[1][0], s[1][1]])).unwrap();
        let got = bures_distance(&g(a), &g(b)).unwrap();
        let want = oracles::bures_2x2(a, b);
        prop_assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn interpolated_matches_closed_form(
        d in 1..=3usize,
        a in prop::collection::vec(0.05..4.0f64, 3),
        b in prop::collection::vec(0.05..4.0f64, 3),
        mu in prop::collection::vec(-2.0..2.0f64, 6),
        lambda in 0.0..=1.0f64,
        seed in prop::collection::vec(-1.0..1.0f64, 9),
    ) {
        let basis = orthogonal(d, &seed);
        let (a, b, ma, mb) = (&a[..d], &b[..d], &mu[..d], &mu[3..3 + d]);
        let got = interpolated_distance(&diag_summary(ma, a, &basis), &diag_summary(mb, b, &basis), lambda).unwrap();
        prop_assert!((got - oracles::interpolated_commuting(ma, mb, a, b, lambda)).abs() < 1e-6);
    }

    #[test]
    fn self_comparison_is_perfect(x in matrix(3..=6, 1..=4)) {
        let r = rep(&x);
        for m in default_metric_set() {
            let s = score_layer(&m, &r, &r).unwrap();
            prop_assert!((s.value - m.orientation.perfect_score()).abs() < 1e-8, "{} gave {}", m.name, s.value);
        }
    }

    #[test]
    fn cka_and_procrustes_orthogonal_invariance(
        (x, y) in pair(4..=6, 1..=3),
        seed in prop::collection::vec(-1.0..1.0f64, 9),
        c in 0.1..10.0f64,
    ) {
        let (a, b) = (rep(&x), rep(&y));
        let q = orthogonal(a.dim(), &seed);
        let rotated = a.transform(&q).unwrap();
        let cka = linear_cka(&a, &b).unwrap();
        prop_assert!((linear_cka(&rotated, &b).unwrap() - cka).abs() < 1e-8);
        prop_assert!((linear_cka(&a.scaled(c).unwrap(), &b).unwrap() - cka).abs() < 1e-8);
        prop_assert!((linear_cka(&a, &rotated).unwrap() - 1.0).abs() < 1e-8);
        let p = procrustes_distance(&a, &b).unwrap();
        prop_assert!((procrustes_distance(&rotated, &b).unwrap() - p).abs() < 1e-8);
        prop_assert!((procrustes_distance(&a, &b.transform(&q).unwrap()).unwrap() - p).abs() < 1e-8);
        prop_assert!(procrustes_distance(&a, &rotated).unwrap() < 1e-8);
    }

    #[test]
    fn every_metric_is_symmetric((x, y) in pair(3..=6, 1..=3)) {
        let (a, b) = (rep(&x), rep(&y));
        for m in default_metric_set() {
            let ab = score_layer(&m, &a, &b).unwrap().value;
            let ba = score_layer(&m, &b, &a).unwrap().value;
            prop_assert!((ab - ba).abs() < 1e-8, "{}: {ab} vs {ba}", m.name);
        }
    }

    #[test]
    fn joint_row_permutation_changes_nothing(
        (x, y) in pair(3..=6, 1..=3),
        keys in prop::collection::vec(any::<u32>(), 6),
    ) {
        let (a, b) = (rep(&x), rep(&y));
        let mut order: Vec<usize> = (0..a.n_samples()).collect();
        order.sort_by_key(|&i| (keys[i], i));
        let (pa, pb) = (a.permute_rows(&order), b.permute_rows(&order));
        for m in default_metric_set() {
            let before = score_layer(&m, &a, &b).unwrap().value;
            let after = score_layer(&m, &pa, &pb).unwrap().value;
            prop_assert!((before - after).abs() < 1e-10, "{}: {before} vs {after}", m.name);
        }
    }

    #[test]
    fn summary_ignores_row_order(x in matrix(2..=6, 1..=3), keys in prop::collection::vec(any::<u32>(), 6)) {
        let r = rep(&x);
        let mut order: Vec<usize> = (0..r.n_samples()).collect();
        order.sort_by_key(|&i| (keys[i], i));
        let g1 = gaussian_summary(&r, 1e-6).unwrap();
        let g2 = gaussian_summary(&r.permute_rows(&order), 1e-6).unwrap();
        prop_assert!((g1.mean() - g2.mean()).amax() < 1e-12);
        prop_assert!((g1.covariance() - g2.covariance()).amax() < 1e-12);
    }

    #[test]
    fn centering_zeroes_column_means(x in matrix(2..=6, 1..=4)) {
        let c = center_columns(&rep(&x)).unwrap();
        for col in c.data().column_iter() {
            prop_assert!(col.mean().abs() < 1e-10);
        }
    }
}
