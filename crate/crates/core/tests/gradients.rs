use declineforge_core::nncore::{
    grad_check, gradient_suite, init, layers, transformer_block_from_vars, transformer_block_param_names, Tape,
};
use declineforge_core::{rng, ParamStore, Tensor};

#[test]
fn every_block_passes_its_tolerance() {
    for seed in [1, 2, 3] {
        let cases = gradient_suite(seed).unwrap();
        assert_eq!(cases.len(), 8);
        for c in &cases {
            assert!(c.passed(), "seed {seed}: {} error {:.3e} > {:.0e}", c.name, c.error, c.tolerance);
            assert!(c.tolerance <= 1e-4);
        }
    }
}

#[test]
fn explicit_block_matches_store_block() {
    let mut rng = rng::seeded(9);
    let mut store = ParamStore::new();
    layers::init_transformer_block(&mut store, "b", 8, 2, &mut rng);
    for name in transformer_block_param_names("b") {
        let shape = store.value(&name).unwrap().shape().to_vec();
        *store.value_mut(&name).unwrap() = init::trunc_normal(&shape, 0.5, &mut rng);
    }
    let x = init::trunc_normal(&[4, 8], 1.0, &mut rng);

    let mut t = Tape::new(false, 0);
    let xv = t.input(x.clone());
    let a = layers::transformer_block(&mut t, &store, "b", xv, 2, 0.0).unwrap();

    let mut u = Tape::new(false, 0);
    let xu = u.input(x);
    let vars: Vec<_> =
        transformer_block_param_names("b").iter().map(|n| u.input(store.value(n).unwrap().clone())).collect();
    let b = transformer_block_from_vars(&mut u, xu, 2, &vars).unwrap();
    assert_eq!(t.value(a).data(), u.value(b).data());
}

#[test]
fn non_scalar_fragment_is_rejected() {
    let err = grad_check(|t, v| Ok(t.relu(v[0])), &[Tensor::zeros(&[2, 2])], 1e-6).unwrap_err();
    assert!(err.to_string().contains("scalar"));
}
