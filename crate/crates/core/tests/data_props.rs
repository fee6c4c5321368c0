use ndarray::Array2;
use proptest::prelude::*;
use structreg::autodiff::Graph;
use structreg::data::{
    gen_blobs, gen_two_moons, mask_labels, read_csv, write_csv, BatchSampler, Dataset, Rescaler,
    SemiSplit,
};
use structreg::model::{sgd_step, MlpClassifier};
use structreg::regularize::supervised_ce;
use structreg::seeded_rng;

fn labels(ds: &Dataset) -> Vec<usize> {
    ds.class_ids().into_iter().map(|c| c.unwrap()).collect()
}

fn train_supervised(train: &Dataset, widths: &[usize], steps: usize, lr: f64) -> MlpClassifier {
    let mut rng = seeded_rng(1);
    let mut model = MlpClassifier::new(widths, &mut rng).unwrap();
    let split = SemiSplit {
        labeled_indices: (0..train.len()).collect(),
        unlabeled_indices: vec![],
        seed: 0,
    };
    let mut sampler = BatchSampler::new(&split, 64, 0).unwrap();
    let mut g = Graph::new();
    for _ in 0..steps {
        let b = sampler.sample(train, &mut rng);
        g.reset();
        let p = model.bind(&mut g);
        let x = g.constant(b.labeled_features.into_dyn());
        let y = g.constant(b.labeled_targets.into_dyn());
        let z = model.forward_graph(&mut g, &p, x).unwrap();
        let l = supervised_ce(&mut g, z, y).unwrap();
        g.backward(l).unwrap();
        let grads = model.gradients(&g, &p);
        sgd_step(&mut model, &grads, lr, 0.0).unwrap();
    }
    model
}

fn accuracy(model: &MlpClassifier, ds: &Dataset) -> f64 {
    let p = model.predict(ds.features.view()).unwrap();
    1.0 - structreg::metrics::error_rate(p.view(), &labels(ds)).unwrap()
}

#[test]
fn supervised_mlp_solves_two_moons() {
    let train = gen_two_moons(1000, 0.1, 1).unwrap();
    let test = gen_two_moons(1000, 0.1, 2).unwrap();
    let r = Rescaler::fit(&train, -1.0, 1.0).unwrap();
    let (train, test) = (r.apply(&train), r.apply(&test));
    let model = train_supervised(&train, &[2, 64, 64, 2], 3000, 0.1);
    let acc = accuracy(&model, &test);
    assert!(acc > 0.95, "test accuracy {acc}");
}

#[test]
fn linear_classifier_separates_distant_blobs() {
    let centers = vec![vec![-5.0, 0.0], vec![5.0, 0.0]];
    let train = gen_blobs(400, 2, &centers, 0.5, 3).unwrap();
    let test = gen_blobs(400, 2, &centers, 0.5, 4).unwrap();
    let model = train_supervised(&train, &[2, 2], 500, 0.1);
    assert_eq!(accuracy(&model, &test), 1.0);
}

#[test]
fn csv_round_trip_preserves_dataset() {
    let mut ds = gen_two_moons(50, 0.1, 9).unwrap();
    ds.labels[3] = None;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("moons.csv");
    write_csv(&ds, &path).unwrap();
    let back = read_csv(&path).unwrap();
    assert_eq!(back.features, ds.features);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.class_count, 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_labels_partitions_and_balances(n in 20usize..200, per_class in 1usize..6, c in 2usize..5, seed in any::<u64>()) {
        let centers: Vec<Vec<f64>> = (0..c).map(|k| vec![k as f64 * 3.0, 0.0]).collect();
        let ds = gen_blobs(n.max(c * per_class * 2), c, &centers, 0.5, seed).unwrap();
        let n_l = per_class * c;
        let split = mask_labels(&ds, n_l, seed).unwrap();
        prop_assert_eq!(split.labeled_indices.len(), n_l);
        prop_assert_eq!(split.labeled_indices.len() + split.unlabeled_indices.len(), ds.len());
        let mut all: Vec<usize> = split.labeled_indices.iter().chain(&split.unlabeled_indices).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        let ids = labels(&ds);
        for k in 0..c {
            let count = split.labeled_indices.iter().filter(|&&i| ids[i] == k).count();
            prop_assert_eq!(count, per_class);
        }
        prop_assert_eq!(mask_labels(&ds, n_l, seed).unwrap(), split);
    }

    #[test]
    fn rescale_is_affine_invariant(
        scale in 0.1..50.0f64,
        shift in -100.0..100.0f64,
        vals in prop::collection::vec(-10.0..10.0f64, 8),
    ) {
        prop_assume!(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - vals.iter().cloned().fold(f64::INFINITY, f64::min) > 1e-3);
        let make = |v: Vec<f64>| {
            Dataset::new("x", Array2::from_shape_vec((4, 2), v).unwrap(), vec![None; 4], 2, None).unwrap()
        };
        let a = make(vals.clone());
        let b = make(vals.iter().map(|v| v * scale + shift).collect());
        let ra = Rescaler::fit(&a, -1.0, 1.0).unwrap().apply(&a);
        let rb = Rescaler::fit(&b, -1.0, 1.0).unwrap().apply(&b);
        for (x, y) in ra.features.iter().zip(rb.features.iter()) {
            prop_assert!((x - y).abs() <= 1e-9);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(x));
        }
    }
}
