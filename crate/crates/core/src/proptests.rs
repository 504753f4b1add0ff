use proptest::prelude::*;
use crate::dynamics::{verify_translation_identity, WienerStore};
use crate::ergodic::{min_cost_assignment, rho_bounds, MetricConfig};
use crate::regime::reference;
use crate::spectral::{nonlinear_term, symmetrized_bracket, SpectralField, TruncationSpec};

fn field(trunc: TruncationSpec) -> impl Strategy<Value = SpectralField> {
    prop::collection::vec(-1.0f64..1.0, trunc.len()).prop_map(move |c| SpectralField::from_coeffs(trunc, c).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bracket_is_symmetric(u in field(TruncationSpec::new(3)), w in field(TruncationSpec::new(3))) {
        let a = symmetrized_bracket(&u, &w).unwrap();
        let b = symmetrized_bracket(&w, &u).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn advection_is_orthogonal_to_state(w in field(TruncationSpec::new(4))) {
        let b = nonlinear_term(&w);
        prop_assert!(b.inner(&w).abs() <= 1e-11 * (1.0 + w.norm_sq() * b.norm()));
    }

    #[test]
    fn rho_bounds_are_ordered_and_symmetric(a in field(TruncationSpec::new(2)), b in field(TruncationSpec::new(2))) {
        let m = MetricConfig::new(0.05, 1.0, 16).unwrap();
        let ab = rho_bounds(&a, &b, &m).unwrap();
        let ba = rho_bounds(&b, &a, &m).unwrap();
        prop_assert!(ab.lower <= ab.upper);
        prop_assert!((ab.upper - ba.upper).abs() <= 1e-12 * ab.upper.max(1.0));
    }

    #[test]
    fn assignment_beats_identity(c in prop::collection::vec(0.0f64..10.0, 25)) {
        let cost: Vec<Vec<f64>> = c.chunks(5).map(|r| r.to_vec()).collect();
        let (total, cols) = min_cost_assignment(&cost);
        let identity: f64 = (0..5).map(|i| cost[i][i]).sum();
        prop_assert!(total <= identity + 1e-12);
        let mut seen = cols.clone();
        seen.sort();
        prop_assert_eq!(seen, (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn translation_is_bit_exact(h in 1i64..250, s in -50i64..50) {
        let cfg = reference::mixing();
        let n = 20;
        let store = WienerStore::derive(3, cfg.dt, cfg.noise.channels(), s.min(0), s + h + n as i64).unwrap();
        let w0 = crate::ergodic::sphere_sample(&cfg, 1.0, 1);
        prop_assert_eq!(verify_translation_identity(&cfg, &store, &w0, s, h, n).unwrap(), 0.0);
    }
}
