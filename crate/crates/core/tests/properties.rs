use std::path::Path;

use edgemtl::baselines::{models_to_csv, parse_models_csv, train_global};
use edgemtl::metrics::adjusted_rand_index;
use edgemtl::model::{accuracy, hinge_objective, hinge_subgradient, Dataset, InnerSolveOpts, LinearModel, LossConfig};
use edgemtl::topology::{build_knn_graph, laplacian, Site};
use nalgebra::DVector;
use proptest::prelude::*;

fn model(dim: usize) -> impl Strategy<Value = LinearModel> {
    (prop::collection::vec(-3.0..3.0f64, dim), -2.0..2.0f64).prop_map(|(w, b)| LinearModel::new(w, b))
}

fn dataset(dim: usize, n: std::ops::Range<usize>) -> impl Strategy<Value = Dataset> {
    prop::collection::vec((prop::collection::vec(-2.0..2.0f64, dim), any::<bool>()), n).prop_map(|rows| {
        Dataset::from_pairs(rows.into_iter().map(|(x, y)| (x, if y { 1.0 } else { -1.0 }))).unwrap()
    })
}

fn sites(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Site>> {
    prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), n)
        .prop_map(|pts| pts.into_iter().enumerate().map(|(id, (x, y))| Site { id, x, y }).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn subgradient_matches_central_differences(
        (m, d) in (1usize..4).prop_flat_map(|dim| (model(dim), dataset(dim, 3..12)))
    ) {
        let kink = d.iter().any(|s| (s.label * m.margin(&s.features) - 1.0).abs() < 1e-3);
        prop_assume!(!kink);
        let cfg = LossConfig::new(0.1);
        let g = hinge_subgradient(&m, &d, &cfg).unwrap();
        let base = m.augmented();
        let h = 1e-6;
        for j in 0..base.len() {
            let mut up = base.clone();
            up[j] += h;
            let mut down = base.clone();
            down[j] -= h;
            let fd = (hinge_objective(&LinearModel::from_augmented(&up), &d, &cfg).unwrap()
                - hinge_objective(&LinearModel::from_augmented(&down), &d, &cfg).unwrap()) / (2.0 * h);
            prop_assert!((fd - g[j]).abs() <= 1e-5);
        }
    }

    #[test]
    fn model_and_negation_accuracies_sum_to_one(
        (m, d) in (1usize..4).prop_flat_map(|dim| (model(dim), dataset(dim, 1..20)))
    ) {
        prop_assume!(d.iter().all(|s| m.margin(&s.features).abs() > 1e-9));
        let a = accuracy(&m, &d).unwrap() + accuracy(&m.negated(), &d).unwrap();
        prop_assert!((a - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn laplacian_is_psd_with_zero_row_sums(pts in sites(2..25), k in 1usize..5, x in prop::collection::vec(-5.0..5.0f64, 25)) {
        prop_assume!(k < pts.len());
        let l = laplacian(&build_knn_graph(&pts, k).unwrap());
        let n = pts.len();
        let v = DVector::from_column_slice(&x[..n]);
        prop_assert!((v.transpose() * &l * &v)[(0, 0)] >= -1e-10);
        prop_assert!(l == l.transpose());
        for r in 0..n {
            prop_assert!(l.row(r).sum().abs() <= 1e-12);
        }
    }

    #[test]
    fn knn_graph_has_no_isolated_nodes(pts in sites(2..40), k in 1usize..6) {
        prop_assume!(k < pts.len());
        let g = build_knn_graph(&pts, k).unwrap();
        prop_assert!((0..g.n_nodes()).all(|t| g.degree(t) >= 1));
    }

    #[test]
    fn ari_ignores_relabelling(a in prop::collection::vec(0usize..4, 2..30), perm in Just([2usize, 0, 3, 1])) {
        let b: Vec<usize> = a.iter().map(|c| perm[*c]).collect();
        let same = adjusted_rand_index(&a, &b).unwrap();
        prop_assert!((same - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn ari_is_symmetric(a in prop::collection::vec(0usize..3, 2..30), seed in any::<u64>()) {
        let b: Vec<usize> = a.iter().enumerate().map(|(i, _)| ((seed >> (i % 60)) & 1) as usize).collect();
        prop_assert_eq!(adjusted_rand_index(&a, &b).unwrap(), adjusted_rand_index(&b, &a).unwrap());
    }

    #[test]
    fn models_csv_round_trips(models in prop::collection::vec(model(3), 1..6)) {
        let rows: Vec<(String, LinearModel)> = models.into_iter().enumerate().map(|(i, m)| (i.to_string(), m)).collect();
        let back = parse_models_csv(&models_to_csv(&rows), Path::new("models.csv")).unwrap();
        prop_assert_eq!(back, rows);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn global_model_ignores_shard_boundaries(d in dataset(2, 6..30), cut in 1usize..5) {
        let samples = d.samples().to_vec();
        let cut = cut.min(samples.len() - 1);
        let a = Dataset::new(samples[..cut].to_vec(), 2).unwrap();
        let b = Dataset::new(samples[cut..].to_vec(), 2).unwrap();
        let cfg = LossConfig::new(0.1);
        let opts = InnerSolveOpts::default();
        let split = train_global(&[&a, &b], &cfg, &opts).unwrap();
        let swapped = train_global(&[&b, &a], &cfg, &opts).unwrap();
        let whole = train_global(&[&d], &cfg, &opts).unwrap();
        prop_assert_eq!(&split, &swapped);
        prop_assert_eq!(&split, &whole);
    }
}
