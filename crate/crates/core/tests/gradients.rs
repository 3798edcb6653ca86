mod support;

#[test]
fn every_layer_kind_f64() {
    for (name, r) in support::gradient_suite::<f64>() {
        println!("{name}: {:.2e} ({})", r.max_rel_err, r.worst);
        assert!(r.max_rel_err < 1e-6, "{name}: {r:?}");
    }
}

#[test]
fn every_layer_kind_f32() {
    for (name, r) in support::gradient_suite::<f32>() {
        println!("{name}: {:.2e} ({})", r.max_rel_err, r.worst);
        assert!(r.max_rel_err < 1e-3, "{name}: {r:?}");
    }
}
