use std::f64::consts::PI;

use proptest::prelude::*;
use qtrain::qnn::{
    adjoint_gradient, combine_distributed, finite_difference_gradient, kron_backward, parameter_shift_gradient,
    probabilities, simulate_distributed, simulate_registers, simulate_subcircuit, CircuitSpec, ProbVector,
    ThetaParams,
};
use qtrain::verify::relative_error;

fn angles(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-PI..PI, len)
}

fn circuit(max_n: usize, max_l: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_n, 1..=max_l).prop_flat_map(|(n, l)| (Just(n), Just(l), angles(n * l)))
}

fn split_circuit() -> impl Strategy<Value = (Vec<usize>, usize, Vec<f64>)> {
    (1..=6usize, 1..=6usize, 1..=8usize).prop_flat_map(|(a, b, l)| (Just(vec![a, b]), Just(l), angles((a + b) * l)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn state_is_normalised((n, l, theta) in circuit(12, 8)) {
        let state = simulate_subcircuit(n, l, &theta).unwrap();
        prop_assert!((state.norm() - 1.0).abs() < 1e-12);
        let p = probabilities(&state);
        prop_assert!(p.probs().iter().all(|&x| x >= 0.0));
        prop_assert!((p.total() - 1.0).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn full_turn_leaves_probabilities_unchanged((n, l, theta) in circuit(8, 6), pick in any::<prop::sample::Index>()) {
        let j = pick.index(theta.len());
        let mut shifted = theta.clone();
        shifted[j] += 2.0 * PI;
        let a = probabilities(&simulate_subcircuit(n, l, &theta).unwrap());
        let b = probabilities(&simulate_subcircuit(n, l, &shifted).unwrap());
        for (x, y) in a.probs().iter().zip(b.probs()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kronecker_equals_disjoint_registers((splits, l, theta) in split_circuit()) {
        let spec = CircuitSpec::new(splits, l).unwrap();
        let theta = ThetaParams::from_flat(&spec, theta).unwrap();
        let (_, combined) = simulate_distributed(&spec, &theta).unwrap();
        let mono = probabilities(&simulate_registers(&spec, &theta).unwrap());
        for (x, y) in combined.probs().iter().zip(mono.probs()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn combined_distribution_sums_to_one((splits, l, theta) in split_circuit()) {
        let spec = CircuitSpec::new(splits, l).unwrap();
        let theta = ThetaParams::from_flat(&spec, theta).unwrap();
        let (_, combined) = simulate_distributed(&spec, &theta).unwrap();
        prop_assert!((combined.total() - 1.0).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn adjoint_shift_and_finite_differences_agree(
        (n, l, theta) in circuit(6, 4),
        seed in prop::collection::vec(-1.0f64..1.0, 64),
    ) {
        let upstream: Vec<f64> = seed.iter().cycle().take(1 << n).cloned().collect();
        let adj = adjoint_gradient(n, l, &theta, &upstream).unwrap();
        let shift = parameter_shift_gradient(n, l, &theta, &upstream).unwrap();
        let fd = finite_difference_gradient(n, l, &theta, &upstream, 1e-5).unwrap();
        for (a, s) in adj.iter().zip(&shift) {
            prop_assert!((a - s).abs() < 1e-10);
        }
        prop_assert!(relative_error(&adj, &fd) < 1e-6);
        prop_assert!(relative_error(&shift, &fd) < 1e-6);
    }

    #[test]
    fn kron_backward_is_the_product_rule(
        a in prop::collection::vec(0.0f64..1.0, 4),
        b in prop::collection::vec(0.0f64..1.0, 8),
        up in prop::collection::vec(-1.0f64..1.0, 32),
    ) {
        let pa = ProbVector::new(a.clone()).unwrap();
        let pb = ProbVector::new(b.clone()).unwrap();
        let grads = kron_backward(&[pa, pb], &up).unwrap();
        // reference: explicit double sums over the index pairs
        for i in 0..4 {
            let expect: f64 = (0..8).map(|j| up[i * 8 + j] * b[j]).sum();
            prop_assert!((grads[0][i] - expect).abs() < 1e-12);
        }
        for j in 0..8 {
            let expect: f64 = (0..4).map(|i| up[i * 8 + j] * a[i]).sum();
            prop_assert!((grads[1][j] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn rotation_example_gives_half_gradient() {
    let g = adjoint_gradient(1, 1, &[PI / 2.0], &[0.0, 1.0]).unwrap();
    assert!((g[0] - 0.5).abs() < 1e-12);
    let fd = finite_difference_gradient(1, 1, &[PI / 2.0], &[0.0, 1.0], 1e-5).unwrap();
    assert!((fd[0] - 0.5).abs() < 1e-9);
}

#[test]
fn bell_pair_amplitudes() {
    let s = simulate_subcircuit(2, 1, &[PI / 2.0, 0.0]).unwrap();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    for (got, want) in s.amplitudes().iter().zip([h, 0.0, 0.0, h]) {
        assert!((got - want).abs() < 1e-15);
    }
}

#[test]
fn uniform_factors_combine_to_uniform() {
    let half = ProbVector::new(vec![0.5, 0.5]).unwrap();
    let c = combine_distributed(&[half.clone(), half]).unwrap();
    assert_eq!(c.probs(), &[0.25; 4]);
    assert!(combine_distributed(&[]).is_err());
}
