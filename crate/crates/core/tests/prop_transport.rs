use causal_rdp::linalg::Mat;
use causal_rdp::transport::{monotone_coupling, w2sq_discrete_1d, w2sq_gauss_1d, w2sq_gauss_nd, ScalarPmf};
use proptest::prelude::*;

fn pmf() -> impl Strategy<Value = ScalarPmf> {
    prop::collection::vec((-5.0..5.0f64, 0.01..1.0f64), 1..6).prop_map(|atoms| ScalarPmf::from_weighted(atoms).unwrap())
}

fn cov(n: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-1.0..1.0f64, n * n).prop_map(move |v| {
        let g = Mat::from_fn(n, n, |i, k| v[i * n + k]);
        g.mul(&g.transpose()).unwrap()
    })
}

/// Squared W2 between two-point laws by scanning every coupling: with
/// marginals fixed, a two-by-two coupling has one free entry.
fn two_point_scan(p: &ScalarPmf, q: &ScalarPmf) -> f64 {
    let (a, b) = (p.probs()[0], q.probs()[0]);
    let lo = (a + b - 1.0).max(0.0);
    let hi = a.min(b);
    let cost = |m: f64| {
        let cells = [(0, 0, m), (0, 1, a - m), (1, 0, b - m), (1, 1, 1.0 - a - b + m)];
        cells.iter().map(|(i, k, w)| w * (p.support()[*i] - q.support()[*k]).powi(2)).sum::<f64>()
    };
    // The cost is affine in the free entry, so an endpoint is optimal.
    cost(lo).min(cost(hi))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn discrete_w2_is_symmetric_and_nonnegative(p in pmf(), q in pmf()) {
        let (a, b) = (w2sq_discrete_1d(&p, &q), w2sq_discrete_1d(&q, &p));
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn discrete_w2_vanishes_on_identical_laws(p in pmf()) {
        prop_assert!(w2sq_discrete_1d(&p, &p).abs() <= 1e-12);
    }

    #[test]
    fn monotone_coupling_has_prescribed_marginals(p in pmf(), q in pmf()) {
        let c = monotone_coupling(&p, &q);
        prop_assert!(c.marginal_error() <= 1e-12);
        prop_assert!((c.cost() - w2sq_discrete_1d(&p, &q)).abs() <= 1e-12);
        for i in 0..p.len() {
            let s: f64 = c.row_conditional(i).iter().map(|(_, w)| w).sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn two_point_laws_match_coupling_scan(
        x in (-3.0..0.0f64, 0.1..3.0f64), y in (-3.0..0.0f64, 0.1..3.0f64), a in 0.05..0.95f64, b in 0.05..0.95f64
    ) {
        let p = ScalarPmf::new(vec![x.0, x.0 + x.1], vec![a, 1.0 - a]).unwrap();
        let q = ScalarPmf::new(vec![y.0, y.0 + y.1], vec![b, 1.0 - b]).unwrap();
        prop_assert!((w2sq_discrete_1d(&p, &q) - two_point_scan(&p, &q)).abs() <= 1e-12);
    }

    #[test]
    fn shift_costs_its_square(p in pmf(), shift in -3.0..3.0f64) {
        let moved = ScalarPmf::new(p.support().iter().map(|v| v + shift).collect(), p.probs().to_vec()).unwrap();
        prop_assert!((w2sq_discrete_1d(&p, &moved) - shift * shift).abs() <= 1e-10);
    }

    #[test]
    fn gaussian_w2_is_symmetric_and_nonnegative(a in cov(3), b in cov(3)) {
        let (x, y) = (w2sq_gauss_nd(&a, &b).unwrap(), w2sq_gauss_nd(&b, &a).unwrap());
        prop_assert!(x >= -1e-10);
        prop_assert!((x - y).abs() <= 1e-8 * (1.0 + x.abs()));
        prop_assert!(w2sq_gauss_nd(&a, &a).unwrap().abs() <= 1e-7 * (1.0 + a.trace()));
    }

    #[test]
    fn gaussian_w2_one_dimensional(s in 0.0..4.0f64, t in 0.0..4.0f64) {
        let nd = w2sq_gauss_nd(&Mat::diag(&[s * s]), &Mat::diag(&[t * t])).unwrap();
        prop_assert!((nd - w2sq_gauss_1d(s, t).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn gaussian_w2_bounded_by_trace_sum(a in cov(2), b in cov(2)) {
        let w = w2sq_gauss_nd(&a, &b).unwrap();
        prop_assert!(w <= a.trace() + b.trace() + 1e-10);
    }
}
