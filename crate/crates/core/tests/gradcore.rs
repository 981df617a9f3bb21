use proptest::prelude::*;
use warpadapt::gradcore::{kernel_suite, Graph, Kernel, Shape, Tensor};

#[test]
fn every_kernel_passes_finite_difference_check() {
    let outcomes = kernel_suite(7).unwrap();
    let names: Vec<&str> = outcomes.iter().map(|o| o.name.as_str()).collect();
    for k in Kernel::catalog() {
        assert!(
            names.iter().any(|n| n.split('/').next() == Some(k.name())),
            "kernel {} not covered",
            k.name()
        );
    }
    for o in &outcomes {
        println!(
            "{:<24} {:.3e} < {:.0e}",
            o.name, o.max_rel_error, o.threshold
        );
    }
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed()).collect();
    assert!(failed.is_empty(), "{failed:?}");
}

#[test]
fn kernel_suite_is_deterministic() {
    let a = kernel_suite(3).unwrap();
    let b = kernel_suite(3).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.max_rel_error.to_bits(), y.max_rel_error.to_bits());
    }
}

#[test]
fn backward_on_matrix_output_is_rejected() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)), true);
    assert!(g.backward(x).is_err());
}

proptest! {
    #[test]
    fn gradient_of_sum_is_ones(vals in proptest::collection::vec(-5.0f32..5.0, 12)) {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(Shape::new(1, 3, 2, 2), vals).unwrap(), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        prop_assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grads_accumulate_over_reuse(vals in proptest::collection::vec(-5.0f64..5.0, 8), k in 1usize..4) {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(Shape::new(2, 1, 2, 2), vals).unwrap(), true);
        let mut acc = x;
        for _ in 0..k {
            acc = g.add(acc, x).unwrap();
        }
        let s = g.sum(acc).unwrap();
        g.backward(s).unwrap();
        let expect = (k + 1) as f64;
        prop_assert!(g.grad(x).unwrap().data().iter().all(|&v| v == expect));
    }
}
