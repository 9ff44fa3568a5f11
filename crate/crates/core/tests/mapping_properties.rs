use proptest::prelude::*;
use qtrain::mapping::{
    basis_bits, contract_dense, count_mapping_params, dense_oracle, feature_map, mapping_backprop, mps_contract,
    scale_probability, Mapping, MappingInput, MlpMapping, MpsMapping,
};
use qtrain::verify::relative_error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn features(coords: &[f64]) -> Vec<[f64; 2]> {
    feature_map(&MappingInput::new(coords.to_vec()).unwrap()).unwrap()
}

/// Sum over every tuple of bond indices, written without any sweep.
fn index_sum(mps: &MpsMapping, f: &[[f64; 2]]) -> f64 {
    let n = mps.sites();
    let r = mps.bond_dim();
    let bonds = n - 1;
    let mut total = 0.0;
    for tuple in 0..r.pow(bonds as u32) {
        let idx: Vec<usize> = (0..bonds).map(|k| tuple / r.pow(k as u32) % r).collect();
        let mut term = 1.0;
        for k in 0..n {
            let a = if k == 0 { 0 } else { idx[k - 1] };
            let b = if k == n - 1 { 0 } else { idx[k] };
            term *= (0..2).map(|s| mps.entry(k, a, s, b) * f[k][s]).sum::<f64>();
        }
        total += term;
    }
    total
}

#[test]
fn five_site_contraction_matches_index_sum() {
    let mut g = rng(5);
    for seed in 0..20 {
        let mps = MpsMapping::gaussian(5, 2, 0.8, &mut g).unwrap();
        let coords: Vec<f64> = (0..5).map(|k| ((seed * 7 + k * 3) % 11) as f64 / 10.0).collect();
        let f = features(&coords);
        assert!((mps_contract(&mps, &f).unwrap() - index_sum(&mps, &f)).abs() < 1e-12);
    }
}

#[test]
fn six_site_contraction_matches_dense_oracle() {
    let mps = MpsMapping::gaussian(6, 3, 0.6, &mut rng(1)).unwrap();
    let dense = dense_oracle(&mps).unwrap();
    let f = features(&[0.1, 0.9, 0.0, 1.0, 0.25, 0.6]);
    assert!((mps_contract(&mps, &f).unwrap() - contract_dense(&dense, &f).unwrap()).abs() < 1e-10);
}

#[test]
fn dense_oracle_refuses_large_chains() {
    let mps = MpsMapping::filled(17, 1, 1.0).unwrap();
    assert!(matches!(dense_oracle(&mps), Err(qtrain::Error::Refused(_))));
}

#[test]
fn parameter_count_matches_enumeration() {
    for sites in 2..=20 {
        for r in [1, 2, 3, 4, 8] {
            let mps = MpsMapping::zeros(sites, r).unwrap();
            let enumerated: usize = (0..sites)
                .map(|k| {
                    let (l, rr) = mps.site_dims(k);
                    l * 2 * rr
                })
                .sum();
            assert_eq!(enumerated, MpsMapping::param_count_for(sites, r));
            assert_eq!(mps.params().len(), enumerated);
            let closed = 4 * r + 2 * r * r * (sites - 2);
            assert_eq!(count_mapping_params(&Mapping::Mps(mps)), closed);
        }
    }
    // nineteen qubits, r = 2
    assert_eq!(MpsMapping::param_count_for(20, 2), 152);
    assert_eq!(MpsMapping::param_count_for(14, 4), 400);
}

#[test]
fn mlp_parameter_count_matches_layout() {
    for (inputs, hidden) in [(14, 13), (5, 1), (20, 20)] {
        let expect = inputs * hidden + hidden + hidden * hidden + hidden + hidden + 1;
        assert_eq!(MlpMapping::param_count_for(inputs, hidden), expect);
        assert_eq!(MlpMapping::zeros(inputs, hidden).unwrap().params().len(), expect);
    }
}

#[test]
fn scaling_derivative_is_zero_on_the_clamp() {
    assert_eq!(scale_probability(0.01, 4, true), (0.16, 16.0));
    assert_eq!(scale_probability(0.5, 4, true), (1.0, 0.0));
    assert_eq!(scale_probability(0.5, 4, false), (0.5, 1.0));
}

#[test]
fn basis_bits_reject_out_of_range_indices() {
    assert!(basis_bits(8, 3).is_err());
    assert_eq!(basis_bits(6, 3).unwrap(), vec![1, 1, 0]);
}

fn coords_strategy(sites: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, sites)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn contraction_matches_dense_oracle(
        (sites, r, coords) in (2..=8usize, 1..=4usize).prop_flat_map(|(s, r)| (Just(s), Just(r), coords_strategy(s))),
        seed in any::<u64>(),
    ) {
        let mps = MpsMapping::init(sites, r, &mut rng(seed)).unwrap();
        let dense = dense_oracle(&mps).unwrap();
        let f = features(&coords);
        prop_assert!((mps_contract(&mps, &f).unwrap() - contract_dense(&dense, &f).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn contraction_is_affine_in_each_coordinate(
        (sites, coords) in (2..=8usize).prop_flat_map(|s| (Just(s), coords_strategy(s))),
        r in 1..=4usize,
        pick in any::<prop::sample::Index>(),
        t in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mps = MpsMapping::init(sites, r, &mut rng(seed)).unwrap();
        let j = pick.index(sites);
        let at = |v: f64| {
            let mut c = coords.clone();
            c[j] = v;
            mps_contract(&mps, &features(&c)).unwrap()
        };
        let interp = (1.0 - t) * at(0.0) + t * at(1.0);
        prop_assert!((at(t) - interp).abs() < 1e-10);
    }
}

fn fd_check(mut mapping: Mapping, inputs: &[MappingInput], upstream: &[f64]) -> f64 {
    let h = 1e-6;
    let value = |m: &Mapping| -> f64 { inputs.iter().zip(upstream).map(|(x, u)| u * m.forward(x).unwrap()).sum() };
    let grads = mapping_backprop(&mapping, inputs, upstream).unwrap();
    let mut fd = Vec::new();
    for k in 0..mapping.params().len() {
        let orig = mapping.params()[k];
        mapping.params_mut()[k] = orig + h;
        let plus = value(&mapping);
        mapping.params_mut()[k] = orig - h;
        let minus = value(&mapping);
        mapping.params_mut()[k] = orig;
        fd.push((plus - minus) / (2.0 * h));
    }
    let mut fd_coord = Vec::new();
    for (x, u) in inputs.iter().zip(upstream) {
        let mut c = x.coords().to_vec();
        let last = c.len() - 1;
        let orig = c[last];
        c[last] = orig + h;
        let plus = mapping.forward(&MappingInput::new(c.clone()).unwrap()).unwrap();
        c[last] = orig - h;
        let minus = mapping.forward(&MappingInput::new(c).unwrap()).unwrap();
        fd_coord.push(u * (plus - minus) / (2.0 * h));
    }
    relative_error(&grads.params, &fd).max(relative_error(&grads.prob_coord, &fd_coord))
}

fn random_inputs(n: usize, m: usize, xs: &[f64]) -> Vec<MappingInput> {
    (0..m).map(|i| MappingInput::from_basis(i, n, xs[i % xs.len()]).unwrap()).collect()
}

#[test]
fn mps_backprop_example_instance() {
    // six sites, bond dimension three, eight weights
    let mps = MpsMapping::gaussian(6, 3, 0.7, &mut rng(11)).unwrap();
    let inputs = random_inputs(5, 8, &[0.13, 0.72, 0.4, 0.91, 0.05]);
    let up = [0.3, -1.0, 0.25, 0.8, -0.4, 0.6, -0.9, 0.1];
    assert!(fd_check(Mapping::Mps(mps), &inputs, &up) < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn mps_backprop_matches_finite_differences(
        n in 1..=5usize,
        r in 1..=3usize,
        xs in prop::collection::vec(0.05f64..0.95, 1..6),
        up in prop::collection::vec(-1.0f64..1.0, 32),
        seed in any::<u64>(),
    ) {
        let m = (1usize << n).min(up.len());
        let mps = MpsMapping::gaussian(n + 1, r, 0.7, &mut rng(seed)).unwrap();
        prop_assert!(fd_check(Mapping::Mps(mps), &random_inputs(n, m, &xs), &up[..m]) < 1e-5);
    }

    #[test]
    fn mlp_backprop_matches_finite_differences(
        n in 1..=5usize,
        hidden in 1..=6usize,
        xs in prop::collection::vec(0.05f64..0.95, 1..6),
        up in prop::collection::vec(-1.0f64..1.0, 32),
        seed in any::<u64>(),
    ) {
        let m = (1usize << n).min(up.len());
        let mut mlp = MlpMapping::init(n + 1, hidden, &mut rng(seed)).unwrap();
        mlp.set_output_bias(0.3);
        prop_assert!(fd_check(Mapping::Mlp(mlp), &random_inputs(n, m, &xs), &up[..m]) < 1e-5);
    }
}
