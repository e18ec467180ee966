//! Property tests for the structural invariants of spaces, operators,
//! limits, heat filters and traces.

use std::sync::Arc;

use num_complex::Complex64;
use proptest::prelude::*;

use roetrace_core::heat::{heat_filter, PolynomialFilter};
use roetrace_core::operator::{local_trace, power_norm_estimate, schur_bound_general};
use roetrace_core::spectral::{spectral_density, DensityRequest};
use roetrace_core::trace::{mollified_functional, roe_functional, LimitProcedure};
use roetrace_core::{Exhaustion, KernelOperator, SiteSet, SpaceModel, SpaceSpec};
use roetrace_oracle as oracle;

fn space(kind: u8) -> Arc<SpaceModel> {
    let spec = match kind % 4 {
        0 => SpaceSpec::lattice(1, 30),
        1 => SpaceSpec::lattice(2, 16),
        2 => SpaceSpec::tree(3, 12),
        _ => SpaceSpec::strip(12.0, 0.25),
    };
    Arc::new(SpaceModel::new(spec).unwrap())
}

fn random_set(s: &SpaceModel, mask: &[bool], radius: f64) -> SiteSet {
    let ball = s.ball(s.center(), radius * s.step()).unwrap();
    ball.iter().zip(mask.iter().cycle()).filter(|(_, m)| **m).map(|(x, _)| x).collect()
}

/// Banded operator with seeded entries on a 1-D lattice.
fn banded(s: &Arc<SpaceModel>, band: i64, entries: &[(f64, f64)]) -> KernelOperator {
    let e = entries.to_vec();
    let sp = s.clone();
    KernelOperator::from_fn(s.clone(), 1, band as f64, move |x, y| {
        let (cx, cy) = (sp.coords(x)[0], sp.coords(y)[0]);
        let o = cy - cx;
        (o.abs() <= band).then(|| {
            let (re, im) = e[((cx * 7 + o * 3).rem_euclid(e.len() as i64)) as usize];
            vec![Complex64::new(re, im)]
        })
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn penumbra_inclusions(kind in 0u8..4, mask in prop::collection::vec(any::<bool>(), 1..40),
                           radius in 0.0f64..5.0, r1 in 0.0f64..3.0, r2 in 0.0f64..3.0, big in 0.0f64..3.0) {
        let s = space(kind);
        let h = s.step();
        let k = random_set(&s, &mask, radius);
        prop_assume!(!k.is_empty());
        let (r1, r2, big) = (r1 * h, r2 * h, big * h);
        let outer = s.pen_plus(&k, r1).unwrap();
        let inner = s.pen_minus(&k, r2).unwrap();
        prop_assert!(inner.is_subset(&k));
        prop_assert!(k.is_subset(&outer));
        let shell = outer.difference(&inner);
        if !shell.is_empty() {
            let grown = s.pen_plus(&shell, big).unwrap();
            let bound = s.pen_plus(&k, r1 + big + h).unwrap().difference(&s.pen_minus(&k, r2 + big + h).unwrap());
            prop_assert!(grown.is_subset(&bound));
        }
    }

    #[test]
    fn local_trace_is_additive(mask_a in prop::collection::vec(any::<bool>(), 1..30),
                               mask_b in prop::collection::vec(any::<bool>(), 1..30),
                               entries in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..12)) {
        let s = space(0);
        let op = banded(&s, 2, &entries);
        let a = random_set(&s, &mask_a, 8.0);
        let b = random_set(&s, &mask_b, 12.0).difference(&a);
        let m = op.local_trace_measure();
        let joint = a.union(&b);
        prop_assert!((m.measure(&joint) - m.measure(&a) - m.measure(&b)).abs() <= 1e-12);
        prop_assert!((local_trace(&op, &joint) - m.measure(&joint)).abs() <= 1e-12);
    }

    #[test]
    fn schur_bound_dominates_the_norm(band in 0i64..3, entries in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..12)) {
        let s = space(0);
        let op = banded(&s, band, &entries);
        let est = power_norm_estimate(&op, 2000, 1e-12, 3);
        prop_assert!(schur_bound_general(&op) >= est * (1.0 - 1e-9));
    }

    #[test]
    fn propagation_is_tracked(b1 in 0i64..3, b2 in 0i64..3, entries in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..8)) {
        let s = space(0);
        let a = banded(&s, b1, &entries);
        let b = banded(&s, b2, &entries);
        let c = a.compose(&b).unwrap();
        prop_assert!(c.propagation() <= a.propagation() + b.propagation() + 1e-12);
        prop_assert!(c.measured_propagation() <= c.propagation() + 1e-12);
        prop_assert!(a.adjoint().propagation() <= a.propagation() + 1e-12);
    }

    #[test]
    fn limit_modes_agree_on_convergent_sequences(limit in -3.0f64..3.0, c1 in -5.0f64..5.0, c2 in -5.0f64..5.0) {
        let scales: Vec<f64> = (10..=24).map(|k| 20.0 * k as f64).collect();
        let vol: Vec<f64> = scales.iter().map(|n| 2.0 * n + 1.0).collect();
        let mu: Vec<f64> = scales.iter().zip(&vol).map(|(n, v)| v * (limit + c1 / n + c2 / (n * n))).collect();
        let a = LimitProcedure::cesaro().with_deflation(2).evaluate(&scales, &mu, &vol).unwrap();
        let b = LimitProcedure::envelope().with_deflation(2).evaluate(&scales, &mu, &vol).unwrap();
        let c = LimitProcedure::subsequence(vec![4, 9, 14]).with_deflation(2).evaluate(&scales, &mu, &vol).unwrap();
        let (a, b, c) = (a.value.unwrap(), b.value.unwrap(), c.value.unwrap());
        prop_assert!((a - limit).abs() <= 1e-9 && (b - limit).abs() <= 1e-9 && (c - limit).abs() <= 1e-9);
    }

    #[test]
    fn value_lies_in_its_envelope(values in prop::collection::vec(0.0f64..2.0, 6..16)) {
        let scales: Vec<f64> = (1..=values.len()).map(|k| 10.0 * k as f64).collect();
        let vol = scales.clone();
        let mu: Vec<f64> = values.iter().zip(&vol).map(|(a, v)| a * v).collect();
        let out = LimitProcedure::envelope().with_tolerance(10.0).evaluate(&scales, &mu, &vol).unwrap();
        let v = out.value.unwrap();
        prop_assert!(out.envelope.0 <= v && v <= out.envelope.1);
    }

    #[test]
    fn heat_filter_matches_oracle_coefficients(t in 0.05f64..40.0) {
        let lap = KernelOperator::laplacian(space(0), 1);
        let f = heat_filter(&lap, t, 1e-12).unwrap();
        for (k, c) in f.coeffs.iter().enumerate().take(12) {
            prop_assert!((c - oracle::heat_chebyshev_coefficient(t, 4.0, k as u32)).abs() <= 1e-13);
        }
        prop_assert!(f.truncation_bound <= 1e-12);
        prop_assert!((f.truncation_bound - oracle::heat_chebyshev_tail(t, 4.0, f.degree as u32)).abs() <= 1e-15);
        let g = PolynomialFilter::new(t, 0.0, 4.0, 1e-12).unwrap();
        prop_assert_eq!(g.coeffs, f.coeffs);
    }

    #[test]
    fn density_is_nondecreasing(points in prop::collection::vec(0.0f64..4.0, 2..30)) {
        let lap = KernelOperator::laplacian(space(0), 1);
        let mut grid = points;
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let d = spectral_density(&lap, &grid, &DensityRequest::FourierOracle).unwrap();
        prop_assert!(d.values.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(d.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mollified_functional_is_dominated(delta in 0.3f64..3.0, entries in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..6)) {
        let s = Arc::new(SpaceModel::new(SpaceSpec::lattice(1, 640)).unwrap());
        let c = banded(&s, 1, &entries);
        let a = c.adjoint().compose(&c).unwrap().mark_positive("Gram operator C* C");
        let exh = Exhaustion::centered(&s, 120, 600, 60, &[]).unwrap();
        let lim = LimitProcedure::cesaro().with_deflation(2);
        let phi = roe_functional(&a, &exh, &lim, &[(1.0, 1.0)]).unwrap();
        let psi = mollified_functional(&a, delta, &exh, &lim, &[(1.0, 1.0)]).unwrap();
        prop_assert!(psi.scalar().unwrap() <= phi.scalar().unwrap() + phi.uncertainty + psi.uncertainty);
    }
}
