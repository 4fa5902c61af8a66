use lppls_core::model::{solve_linear_slices, uniform_grid};
use lppls_core::noise::{gen_clean, stream_rng, ScenarioSpec};
use lppls_core::{eval_basis, reduced_loss, residual_mse, solve_linear, LinearParams, LpplsParams, NonlinearParams};
use proptest::prelude::*;

fn nonlinear() -> impl Strategy<Value = NonlinearParams> {
    (1.0001f64..1.2, 0.1f64..0.9, 6.0f64..13.0).prop_map(|(tc, m, omega)| NonlinearParams::new(tc, m, omega))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oscillating_terms_share_the_power_law_envelope(t in 0.0f64..1.0, gap in 1e-4f64..2.0, m in 0.05f64..1.0, omega in 1.0f64..20.0) {
        let b = eval_basis(t, t + gap, m, omega).unwrap();
        prop_assert!((b.g * b.g + b.h * b.h - b.f * b.f).abs() <= 1e-12 * b.f * b.f);
    }

    #[test]
    fn basis_rejects_times_at_or_after_tc(t in 0.0f64..1.0, gap in 0.0f64..1.0) {
        prop_assert!(eval_basis(t, t - gap, 0.5, 8.0).is_err());
    }

    #[test]
    fn linear_solve_recovers_clean_coefficients(nl in nonlinear(), seed in any::<u64>()) {
        let (series, truth) = gen_clean(nl, &mut stream_rng(seed, 0), 252).unwrap();
        let lin = solve_linear(&series, nl.tc, nl.m, nl.omega).unwrap();
        let (got, want) = (lin.to_array(), truth.linear().to_array());
        for (g, w) in got.iter().zip(want) {
            prop_assert!((g - w).abs() <= 1e-6 * (1.0 + w.abs()), "{got:?} vs {want:?}");
        }
        prop_assert!(reduced_loss(&series, nl.tc, nl.m, nl.omega).unwrap() < 1e-20);
    }

    #[test]
    fn linear_solve_beats_any_perturbation(
        nl in nonlinear(),
        seed in any::<u64>(),
        k in 0usize..4,
        delta in prop_oneof![-1e-2f64..-1e-6, 1e-6f64..1e-2],
    ) {
        let spec = ScenarioSpec { seed, ..ScenarioSpec::default() };
        let noisy = spec.scenario(0).unwrap().noisy;
        let lin = solve_linear(&noisy, nl.tc, nl.m, nl.omega).unwrap();
        let best = residual_mse(&noisy, &LpplsParams::from_parts(nl, lin)).unwrap();
        let mut a = lin.to_array();
        a[k] += delta;
        let other = residual_mse(&noisy, &LpplsParams::from_parts(nl, LinearParams::from_array(a))).unwrap();
        prop_assert!(best <= other);
    }

    #[test]
    fn linear_solve_is_affine_equivariant(
        nl in nonlinear(),
        seed in any::<u64>(),
        scale in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0],
        shift in -100.0f64..100.0,
    ) {
        let noisy = ScenarioSpec { seed, ..ScenarioSpec::default() }.scenario(3).unwrap().noisy;
        let times = uniform_grid(noisy.len());
        let y: Vec<f64> = noisy.values().to_vec();
        let z: Vec<f64> = y.iter().map(|v| scale * v + shift).collect();
        let ly = solve_linear_slices(&times, &y, nl).unwrap().to_array();
        let lz = solve_linear_slices(&times, &z, nl).unwrap().to_array();
        let want = [scale * ly[0] + shift, scale * ly[1], scale * ly[2], scale * ly[3]];
        for (g, w) in lz.iter().zip(want) {
            prop_assert!((g - w).abs() <= 1e-7 * (1.0 + w.abs()), "{lz:?} vs {want:?}");
        }
    }

    #[test]
    fn scenarios_are_a_pure_function_of_seed_and_index(seed in any::<u64>(), index in 0u64..1000) {
        let spec = ScenarioSpec { seed, ..ScenarioSpec::default() };
        let (a, b) = (spec.scenario(index).unwrap(), spec.scenario(index).unwrap());
        let next = spec.scenario(index + 1).unwrap();
        prop_assert_ne!(next.noisy.values(), a.noisy.values());
        prop_assert_eq!(a.noisy, b.noisy);
        prop_assert_eq!(a.truth, b.truth);
    }
}
