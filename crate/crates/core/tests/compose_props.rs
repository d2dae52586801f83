use std::sync::Arc;

use proptest::prelude::*;
use scalar_ebm::compose::{build_composition, gibbs_invariance_check, CompositionOp, CompositionSpec, GibbsCheckOptions, Operand};
use scalar_ebm::energy::curl_residual;
use scalar_ebm::presets::{expert_a_centers, expert_b_centers};
use scalar_ebm::{BoxBounds, EnergyField, GaussianMixtureEnergy, QuadraticEnergy};

fn experts() -> (Arc<dyn EnergyField>, Arc<dyn EnergyField>) {
    (
        Arc::new(GaussianMixtureEnergy::equal_weights(expert_a_centers(), 0.3).unwrap()),
        Arc::new(GaussianMixtureEnergy::equal_weights(expert_b_centers(), 0.3).unwrap()),
    )
}

fn spec(op: CompositionOp) -> CompositionSpec {
    let (a, b) = experts();
    CompositionSpec { operands: vec![Operand::new("A", a), Operand::new("B", b)], op }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn additive_drift_is_the_weighted_sum(x in -6.0f64..6.0, y in -6.0f64..6.0, ca in -2.0f64..2.0, cb in -2.0f64..2.0) {
        let (a, b) = experts();
        let f = build_composition(&spec(CompositionOp::Additive { coefficients: vec![ca, cb] })).unwrap();
        let p = [x, y];
        let (mut g, mut ga, mut gb) = ([0.0; 2], [0.0; 2], [0.0; 2]);
        let u = f.energy_and_gradient(&p, &mut g);
        let ua = a.energy_and_gradient(&p, &mut ga);
        let ub = b.energy_and_gradient(&p, &mut gb);
        prop_assert!((u - (ca * ua + cb * ub)).abs() <= 1e-9 * (1.0 + u.abs()));
        for k in 0..2 {
            prop_assert!((g[k] - (ca * ga[k] + cb * gb[k])).abs() <= 1e-9 * (1.0 + g[k].abs()));
        }
    }

    #[test]
    fn composed_drifts_are_curl_free(x in -6.0f64..6.0, y in -6.0f64..6.0) {
        for op in [CompositionOp::Conjunction, CompositionOp::Disjunction, CompositionOp::Negation { lambda: 0.35 }] {
            let f = build_composition(&spec(op)).unwrap();
            prop_assert!(curl_residual(&f, &[x, y]).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn disjunction_lies_below_both_operands(x in -6.0f64..6.0, y in -6.0f64..6.0) {
        let (a, b) = experts();
        let f = build_composition(&spec(CompositionOp::Disjunction)).unwrap();
        let p = [x, y];
        prop_assert!(f.energy(&p) <= a.energy(&p).min(b.energy(&p)) + 1e-12);
    }
}

#[test]
fn conjunction_of_quadratics_samples_the_product() {
    // e^{-|x|²/2} · e^{-|x|²/2} is N(0, I/2).
    let q: Arc<dyn EnergyField> = Arc::new(QuadraticEnergy::isotropic(2, 1.0));
    let spec = CompositionSpec {
        operands: vec![Operand::new("p", q.clone()), Operand::new("q", q)],
        op: CompositionOp::Conjunction,
    };
    let f = build_composition(&spec).unwrap();
    let check = gibbs_invariance_check(&f, 5000, 1000, 3, &GibbsCheckOptions::new(BoxBounds::cube(2, -5.0, 5.0))).unwrap();
    assert!(check.l1 <= 0.15, "{check:?}");
}
