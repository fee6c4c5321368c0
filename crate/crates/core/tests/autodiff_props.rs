use ndarray::{Array2, ArrayD};
use proptest::prelude::*;
use structreg::autodiff::{finite_diff_check, softmax_rows, Elementwise, Graph};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-2.0..2.0f64, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

/// `sum(softmax(relu(X·W1 + b1)·W2) ⊙ T)` with all parameters flattened.
fn small_net(params: &[f64], x: &Array2<f64>, t: &Array2<f64>) -> (f64, Vec<f64>) {
    let (d, h, c) = (x.ncols(), 3, t.ncols());
    let mut it = params.iter().copied();
    let w1 = Array2::from_shape_fn((d, h), |_| it.next().unwrap());
    let b1 = Array2::from_shape_fn((1, h), |_| it.next().unwrap());
    let w2 = Array2::from_shape_fn((h, c), |_| it.next().unwrap());
    let mut g = Graph::new();
    let xs = g.constant(x.clone().into_dyn());
    let ts = g.constant(t.clone().into_dyn());
    let n1 = g.leaf(w1.into_dyn());
    let n2 = g.leaf(b1.into_dyn());
    let n3 = g.leaf(w2.into_dyn());
    let z = g.matmul(xs, n1).unwrap();
    let z = g.add(z, n2).unwrap();
    let a = g.relu(z);
    let o = g.matmul(a, n3).unwrap();
    let p = g.softmax_rows(o).unwrap();
    let e = g.exp(p);
    let q = g.mul(e, ts).unwrap();
    let loss = g.mean(q);
    g.backward(loss).unwrap();
    let grad = [n1, n2, n3]
        .iter()
        .flat_map(|&n| g.grad(n).iter().copied().collect::<Vec<_>>())
        .collect();
    (g.scalar_value(loss), grad)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_network_gradients_match_finite_differences(
        x in matrix(4, 2),
        t in matrix(4, 2),
        params in prop::collection::vec(-1.0..1.0f64, 2 * 3 + 3 + 3 * 2),
    ) {
        // Keep relu inputs away from the kink so central differences are valid.
        let mut g = Graph::new();
        let xs = g.constant(x.clone().into_dyn());
        let w1 = g.constant(Array2::from_shape_vec((2, 3), params[..6].to_vec()).unwrap().into_dyn());
        let b1 = g.constant(Array2::from_shape_vec((1, 3), params[6..9].to_vec()).unwrap().into_dyn());
        let z = g.matmul(xs, w1).unwrap();
        let z = g.add(z, b1).unwrap();
        prop_assume!(g.value(z).iter().all(|v| v.abs() > 1e-3));
        let worst = finite_diff_check(|p| small_net(p, &x, &t), &params, 1e-6).unwrap();
        prop_assert!(worst < 1e-4, "relative error {worst}");
    }

    #[test]
    fn softmax_rows_are_distributions(z in matrix(5, 4).prop_map(|m| m * 500.0)) {
        let p = softmax_rows(z.view());
        for row in p.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn grad_shape_matches_value_shape(a in matrix(3, 2), b in matrix(1, 2)) {
        let mut g = Graph::new();
        let na = g.leaf(a.into_dyn());
        let nb = g.constant(b.into_dyn());
        let s = g.elementwise(Elementwise::Mul, &[na, nb]).unwrap();
        let s = g.sum(s);
        g.backward(s).unwrap();
        prop_assert_eq!(g.grad(na).shape(), g.value(na).shape());
        prop_assert_eq!(g.grad(nb).shape(), g.value(nb).shape());
        prop_assert!(g.grad(nb).iter().all(|&v| v == 0.0));
        prop_assert_eq!(g.grad(s)[[]], 1.0);
    }
}

#[test]
fn root_gradient_is_one_and_repeat_backward_does_not_accumulate() {
    let mut g = Graph::new();
    let a = g.leaf(ArrayD::from_elem(ndarray::IxDyn(&[2]), 3.0));
    let s = g.mul(a, a).unwrap();
    let s = g.sum(s);
    g.backward(s).unwrap();
    let first = g.grad(a).clone();
    g.backward(s).unwrap();
    assert_eq!(g.grad(a), &first);
    assert_eq!(g.grad(s)[[]], 1.0);
    assert_eq!(first.as_slice().unwrap(), &[6.0, 6.0]);
}
