use eralab::theory::{
    bound_smooth, bound_strongly_convex, simulate_pair, step_halving_check, verify_bound, BoundKind, DriftSign, SdeSpec,
};
use proptest::prelude::*;

#[test]
fn anisotropic_descent_sits_under_both_bounds() {
    let mut spec = SdeSpec::isotropic(2, 1.0, DriftSign::Descent, 1.0, 2.0, 1e-3, 4000);
    spec.a = vec![vec![2.0, 0.5], vec![0.5, 1.0]];
    spec.sigma1 = vec![0.3, 0.1];
    spec.sigma2 = vec![0.2, 0.4];
    for kind in [BoundKind::Smooth, BoundKind::StronglyConvex] {
        let r = verify_bound(&spec, kind).unwrap();
        assert!(r.satisfied, "{kind:?}: {} vs {}", r.empirical, r.bound);
    }
}

#[test]
fn same_seed_same_trace() {
    let spec = SdeSpec::isotropic(3, 0.7, DriftSign::Ascent, 0.6, 0.5, 1e-2, 300);
    assert_eq!(simulate_pair(&spec).unwrap(), simulate_pair(&spec).unwrap());
}

#[test]
fn ascent_step_halving() {
    let mut spec = SdeSpec::isotropic(2, 1.0, DriftSign::Ascent, 1.0, 0.5, 1e-2, 4000);
    spec.seed = 5;
    let r = step_halving_check(&spec).unwrap();
    assert!(r.difference() < 2.0 * r.std_err, "{r:?}");
}

proptest! {
    #[test]
    fn strongly_convex_bound_is_tighter(l in 0.1f64..5.0, t in 0.01f64..3.0, s1 in 0.0f64..2.0, s2 in 0.0f64..2.0) {
        let smooth = bound_smooth(l, s1, s2, t).unwrap();
        let convex = bound_strongly_convex(l, s1, s2, t).unwrap();
        prop_assert!(convex <= smooth * (1.0 + 1e-12));
        prop_assert!(convex <= (s1 + s2) / (2.0 * l) * (1.0 + 1e-12));
    }
}
