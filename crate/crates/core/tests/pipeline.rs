use gpmkl::{
    cross_validate, generate_synthetic, ova_predict, ova_train, relevance_scores, CvOptions, KernelKind, KernelSpec,
    LayoutKind, SyntheticConfig, TrainOptions, VolumeDims,
};

fn config(effect_size: f64, n_classes: usize) -> SyntheticConfig {
    SyntheticConfig {
        dims: VolumeDims::new(4, 4, 4).unwrap(),
        n_per_class: 100,
        n_classes,
        layout: LayoutKind::Cubes { edge: 2 },
        informative_bags: vec![5],
        effect_size,
        noise_std: 1.0,
        seed: 31,
    }
}

#[test]
fn null_signal_gives_chance_accuracy() {
    let ds = generate_synthetic(&config(0.0, 2)).unwrap();
    let y = ds.binary_labels().unwrap();
    let spec = KernelSpec::single(KernelKind::Lin, ds.dims.len()).unwrap();
    let opts = CvOptions {
        folds: 5,
        seed: 1,
        jobs: Some(1),
        ..Default::default()
    };
    let report = cross_validate(&ds.x, &y, &spec, None, &opts).unwrap();
    assert!(report.failures.is_empty());
    assert!((report.accuracy.mean - 0.5).abs() <= 0.15, "{:?}", report.accuracy);
}

#[test]
fn planted_cube_is_found_and_reported_consistently() {
    let mut cfg = config(2.0, 2);
    cfg.n_per_class = 50;
    let ds = generate_synthetic(&cfg).unwrap();
    let y = ds.binary_labels().unwrap();
    let spec = KernelSpec::new(KernelKind::Lin, ds.subspace_layout().unwrap()).unwrap();
    let opts = CvOptions {
        folds: 5,
        seed: 2,
        pooled_auc: true,
        jobs: Some(1),
        ..Default::default()
    };
    let report = cross_validate(&ds.x, &y, &spec, None, &opts).unwrap();
    assert!(report.accuracy.mean >= 0.9, "{:?}", report.accuracy);
    assert!(report.pooled_auc.unwrap() >= 0.95);

    let relevance = report.relevance().unwrap();
    assert_eq!(relevance.ranking[0], 5);
    assert_eq!(relevance.scores[5], 5.0);
    // the report's weights feed the scorer unchanged
    assert_eq!(relevance, relevance_scores(&report.fold_weights()).unwrap());

    // metric means lie within the per-fold range
    let per_fold: Vec<f64> = report.folds.iter().map(|f| f.accuracy).collect();
    let lo = per_fold.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = per_fold.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(lo <= report.accuracy.mean && report.accuracy.mean <= hi);
}

#[test]
fn cross_validation_ignores_the_job_count() {
    let mut cfg = config(1.5, 2);
    cfg.n_per_class = 30;
    let ds = generate_synthetic(&cfg).unwrap();
    let y = ds.binary_labels().unwrap();
    let spec = KernelSpec::new(KernelKind::Lin, ds.subspace_layout().unwrap()).unwrap();
    let run = |jobs| {
        let opts = CvOptions {
            folds: 3,
            seed: 4,
            jobs: Some(jobs),
            ..Default::default()
        };
        cross_validate(&ds.x, &y, &spec, None, &opts).unwrap()
    };
    let (one, three) = (run(1), run(3));
    assert_eq!(one.fold_weights(), three.fold_weights());
    assert_eq!(one.accuracy, three.accuracy);
    assert_eq!(one.auc, three.auc);
}

#[test]
fn one_vs_all_separates_three_classes() {
    let mut cfg = config(4.0, 3);
    cfg.n_per_class = 20;
    let train_set = generate_synthetic(&cfg).unwrap();
    cfg.seed = 32;
    let test_set = generate_synthetic(&cfg).unwrap();
    let spec = KernelSpec::single(KernelKind::Lin, train_set.dims.len()).unwrap();
    let model = ova_train(&train_set.x, &train_set.labels, 3, &spec, &TrainOptions::default()).unwrap();
    assert_eq!(model.models.len(), 3);
    let hits = test_set
        .x
        .iter()
        .zip(&test_set.labels)
        .filter(|(row, &c)| ova_predict(&model, row).unwrap().0 == c)
        .count();
    assert!(hits as f64 / test_set.len() as f64 >= 0.95, "{hits}/{}", test_set.len());
}
