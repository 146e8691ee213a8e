use ntk_core::kreg::{
    accuracy, argmax_rows, fit, gen_synthetic, one_hot, parse_csv_dataset, predict, relative_jitter,
    run_experiment, scores, split, write_csv, ArchGrid, Dataset, DatasetConfig, ExperimentConfig,
    KernelSource, SyntheticConfig,
};
use ntk_core::limit::limit_gram;
use ntk_core::ntk::GramMatrix;
use ntk_core::numerics::{dot, Matrix};
use ntk_core::variance::{AlphaRule, ArchFamily};
use ntk_core::{ArchKind, ArchitectureSpec, Error, RngStream};
use proptest::prelude::*;

fn limit_dense_gram(ds: &Dataset) -> GramMatrix<f64> {
    let spec = ArchitectureSpec::densenet(ds.dim(), 3, 1, 0.5).unwrap();
    limit_gram(&spec, &ds.rows()).unwrap()
}

#[test]
fn csv_labels_and_normalization() {
    let text = "x,y,label\n3,4,a\n1,0,b\n0,-2,a\n";
    let ds = parse_csv_dataset(text.as_bytes(), "label").unwrap();
    assert_eq!(ds.class_count, 2);
    assert_eq!(ds.labels, vec![0, 1, 0]);
    assert_eq!(ds.label_names, vec!["a", "b"]);
    assert_eq!(ds.features.row(0), &[0.6, 0.8]);
    assert_eq!(ds.features.row(2), &[0.0, -1.0]);
    // label column may sit anywhere
    let ds2 = parse_csv_dataset("label,x,y\nq,3,4\n".as_bytes(), "label").unwrap();
    assert_eq!(ds2.features.row(0), &[0.6, 0.8]);
}

#[test]
fn csv_errors() {
    let bad = "x,y,label\n1,2,a\n1,oops,b\n";
    match parse_csv_dataset(bad.as_bytes(), "label") {
        Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (3, 2)),
        other => panic!("{other:?}"),
    }
    match parse_csv_dataset("x,y,label\n1,2,a\n0,0,b\n".as_bytes(), "label") {
        Err(Error::ZeroRow { line }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        parse_csv_dataset("x,y\n1,2\n".as_bytes(), "label"),
        Err(Error::Parse { line: 1, .. })
    ));
    assert!(parse_csv_dataset("x,label\n".as_bytes(), "label").is_err());
    assert!(parse_csv_dataset("x,y,label\n1,nan,a\n".as_bytes(), "label").is_err());
}

#[test]
fn csv_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    std::fs::write(&p, "a,b,c,cls\n1,1,1,x\n2,0,0,y\n").unwrap();
    let ds = ntk_core::kreg::load_csv_dataset(&p, "cls").unwrap();
    assert_eq!(ds.len(), 2);
    assert!((dot(ds.features.row(0), ds.features.row(0)) - 1.0).abs() < 1e-15);
    assert!(ntk_core::kreg::load_csv_dataset(&dir.path().join("missing.csv"), "cls").is_err());
}

#[test]
fn synthetic_rows_and_determinism() {
    let s = RngStream::new(1, 0);
    let a = gen_synthetic(3, 8, 10, 1.0, &s).unwrap();
    let b = gen_synthetic(3, 8, 10, 1.0, &s).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 30);
    assert_eq!(a.class_count, 3);
    for i in 0..a.len() {
        assert!((dot(a.features.row(i), a.features.row(i)) - 1.0).abs() < 1e-10);
    }
    assert!(gen_synthetic(1, 8, 10, 1.0, &s).is_err());
    assert!(gen_synthetic(3, 2, 10, 1.0, &s).is_err());
    assert_ne!(a, gen_synthetic(3, 8, 10, 1.0, &RngStream::new(2, 0)).unwrap());
}

/// Nearest-centroid classifier by cosine to the class means of the training rows.
fn nearest_centroid(train: &Dataset, test: &Dataset) -> f64 {
    let d = train.dim();
    let mut means = vec![vec![0.0; d]; train.class_count];
    for i in 0..train.len() {
        for (m, v) in means[train.labels[i]].iter_mut().zip(train.features.row(i)) {
            *m += v;
        }
    }
    let pred: Vec<usize> = (0..test.len())
        .map(|i| {
            let x = test.features.row(i);
            let dist = |m: &Vec<f64>| {
                let s: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
                -dot(m, x) / s
            };
            (0..means.len())
                .min_by(|&a, &b| dist(&means[a]).partial_cmp(&dist(&means[b])).unwrap())
                .unwrap()
        })
        .collect();
    accuracy(&pred, &test.labels)
}

fn holdout_accuracy(ds: &Dataset, s: &RngStream) -> (f64, f64) {
    let (train, test) = split(ds, 0.7, s).unwrap();
    let mut rows = train.rows();
    rows.extend(test.rows());
    let spec = ArchitectureSpec::densenet(ds.dim(), 3, 1, 0.5).unwrap();
    let g = limit_gram(&spec, &rows).unwrap();
    let acc = ntk_core::kreg::evaluate_joint(&g, &train, &test, 1e-8).unwrap();
    (acc, nearest_centroid(&train, &test))
}

#[test]
fn separated_classes_are_learned() {
    let ds = gen_synthetic(2, 32, 100, 1.0, &RngStream::new(3, 0)).unwrap();
    let (acc, baseline) = holdout_accuracy(&ds, &RngStream::new(3, 1));
    assert!(baseline >= 0.95, "{baseline}");
    assert!(acc >= 0.95, "{acc}");
}

#[test]
fn zero_separation_is_chance() {
    let accs: Vec<f64> = (0..5)
        .map(|i| {
            let ds = gen_synthetic(2, 32, 100, 0.0, &RngStream::new(4, i)).unwrap();
            holdout_accuracy(&ds, &RngStream::new(5, i)).0
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / 5.0;
    // 60 test points per split: se of the 5-split mean ≈ 0.03
    assert!((mean - 0.5).abs() < 0.12, "{accs:?}");
}

#[test]
fn split_partitions_rows() {
    let ds = gen_synthetic(2, 4, 10, 1.0, &RngStream::new(6, 0)).unwrap();
    let (a, b) = split(&ds, 0.7, &RngStream::new(6, 1)).unwrap();
    assert_eq!((a.len(), b.len()), (14, 6));
    let mut all: Vec<Vec<u64>> = a
        .rows()
        .into_iter()
        .chain(b.rows())
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    let mut orig: Vec<Vec<u64>> = ds.rows().into_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    all.sort();
    orig.sort();
    assert_eq!(all, orig);
    assert_eq!(split(&ds, 0.7, &RngStream::new(6, 1)).unwrap(), (a, b));
    assert!(split(&ds, 1.0, &RngStream::new(6, 1)).is_err());
    assert!(split(&ds, 0.01, &RngStream::new(6, 1)).is_err());
}

#[test]
fn identity_gram_returns_targets() {
    let labels = vec![0, 1, 2];
    let g = GramMatrix::from_matrix(Matrix::identity(3)).unwrap();
    let m = fit(&g, &labels, 3, 0.0).unwrap();
    assert_eq!(m.dual_weights, one_hot(&labels, 3));
    assert_eq!(m.kernel_source, None);
    // a test point equal to training point 1
    let cross = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap();
    assert_eq!(predict(&m, &cross).unwrap(), vec![1, 0]);
    assert!(matches!(predict(&m, &Matrix::zeros(1, 2)), Err(Error::ShapeMismatch(_))));
    let m = m.with_source(KernelSource::Limit(ArchKind::DenseNet));
    assert_eq!(m.kernel_source, Some(KernelSource::Limit(ArchKind::DenseNet)));
}

#[test]
fn duplicated_point_needs_jitter() {
    let ds = gen_synthetic(2, 6, 3, 1.0, &RngStream::new(7, 0)).unwrap();
    let mut rows = ds.rows();
    rows.push(rows[0].clone());
    let mut labels = ds.labels.clone();
    labels.push(labels[0]);
    let spec = ArchitectureSpec::resnet(6, 1, 2, vec![0.3; 2]).unwrap();
    let g = limit_gram(&spec, &rows).unwrap();
    assert!(matches!(fit(&g, &labels, 2, 0.0), Err(Error::NotPositiveDefinite { .. })));
    assert!(fit(&g, &labels, 2, 1e-6).is_ok());
    let msg = fit(&g, &labels, 2, 0.0).unwrap_err().to_string();
    assert!(msg.contains("jitter"), "{msg}");
}

#[test]
fn small_set_is_interpolated() {
    let ds = gen_synthetic(2, 8, 10, 0.5, &RngStream::new(8, 0)).unwrap();
    let g = limit_dense_gram(&ds);
    let m = fit(&g, &ds.labels, 2, 1e-8).unwrap();
    assert_eq!(predict(&m, g.matrix()).unwrap(), ds.labels);
    let err = scores(&m, g.matrix()).unwrap().max_abs_diff(&one_hot(&ds.labels, 2));
    assert!(err < 1e-5, "{err}");
}

#[test]
fn interpolation_error_shrinks_with_jitter() {
    let ds = gen_synthetic(3, 8, 6, 0.5, &RngStream::new(9, 0)).unwrap();
    let g = limit_dense_gram(&ds);
    let y = one_hot(&ds.labels, 3);
    let errs: Vec<f64> = [1e-1, 1e-3, 1e-5, 1e-7]
        .iter()
        .map(|&j| {
            let m = fit(&g, &ds.labels, 3, relative_jitter(&g, j)).unwrap();
            scores(&m, g.matrix()).unwrap().max_abs_diff(&y)
        })
        .collect();
    for w in errs.windows(2) {
        assert!(w[1] < w[0], "{errs:?}");
    }
    assert!(errs[3] < 1e-4, "{errs:?}");
}

#[test]
fn empirical_kernel_regression_runs_and_is_deterministic() {
    let cfg = ExperimentConfig {
        dataset: DatasetConfig::Synthetic(SyntheticConfig {
            classes: 2,
            dim: 8,
            per_class: 15,
            separation: 1.0,
        }),
        archs: vec![
            ArchGrid {
                family: ArchFamily::resnet(2, AlphaRule::OverDepth(0.1)),
                depths: vec![2, 3],
                widths: vec![8],
                limit: true,
            },
            ArchGrid {
                family: ArchFamily::vanilla(),
                depths: vec![2],
                widths: vec![8, 16],
                limit: false,
            },
        ],
        draws: 2,
        repeats: 3,
        jitter: 1e-8,
        split: 0.7,
        seed: 11,
    };
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.train_size, a.test_size), (21, 9));
    assert_eq!(a.cells.len(), 6);
    let lim = a.cell(ArchKind::ResNet, None, 3).unwrap();
    assert_eq!((lim.repeat_count, lim.std_accuracy, lim.draws), (1, 0.0, None));
    let emp = a.cell(ArchKind::Vanilla, Some(16), 2).unwrap();
    assert_eq!(emp.accuracies.len(), 3);
    for c in &a.cells {
        assert!((0.0..=1.0).contains(&c.mean_accuracy));
    }
    let mut buf = Vec::new();
    write_csv(&a, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "kind,n,L,T,repeat_count,mean_accuracy,std_accuracy");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("resnet,inf,2,-,1,"), "{}", lines[1]);

    let mut other = cfg.clone();
    other.seed = 12;
    assert_ne!(run_experiment(&other).unwrap(), a);
    other.repeats = 0;
    assert!(run_experiment(&other).is_err());
}

#[test]
fn config_json_round_trip() {
    let text = r#"{
        "dataset": {"synthetic": {"classes": 2, "dim": 32, "per_class": 100, "separation": 1.0}},
        "archs": [{"kind": "densenet", "alpha": {"constant": 0.5}, "depths": [3], "limit": true}],
        "T": 10, "repeats": 20, "seed": 5
    }"#;
    let cfg: ExperimentConfig = serde_json::from_str(text).unwrap();
    assert_eq!(cfg.draws, 10);
    assert_eq!(cfg.jitter, 1e-8);
    assert_eq!(cfg.split, 0.7);
    assert_eq!(cfg.archs[0].family, ArchFamily::densenet(0.5));
    let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
    let path: ExperimentConfig =
        serde_json::from_str(r#"{"dataset": {"path": {"path": "d.csv"}}, "archs": []}"#).unwrap();
    assert!(matches!(path.dataset, DatasetConfig::Path { ref label_column, .. } if label_column == "label"));
    assert!(path.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn one_hot_round_trips(labels in prop::collection::vec(0usize..5, 1..30)) {
        prop_assert_eq!(argmax_rows(&one_hot(&labels, 5)), labels);
    }

    #[test]
    fn accuracy_invariant_under_gram_scaling(seed in 0u64..1000, scale in 1e-3f64..1e3) {
        let ds = gen_synthetic(2, 6, 8, 0.3, &RngStream::new(seed, 0)).unwrap();
        let (train, test) = split(&ds, 0.7, &RngStream::new(seed, 1)).unwrap();
        let mut rows = train.rows();
        rows.extend(test.rows());
        let spec = ArchitectureSpec::vanilla(6, 2, 1).unwrap();
        let g = limit_gram(&spec, &rows).unwrap();
        let tr: Vec<usize> = (0..train.len()).collect();
        let te: Vec<usize> = (train.len()..rows.len()).collect();
        let run = |g: &GramMatrix<f64>| {
            let h = g.principal(&tr);
            let m = fit(&h, &train.labels, 2, relative_jitter(&h, 1e-6)).unwrap();
            predict(&m, &g.block(&te, &tr)).unwrap()
        };
        prop_assert_eq!(run(&g), run(&g.scaled(scale)));
    }
}
