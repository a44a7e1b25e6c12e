use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gpmkl::{initial_hyperparams, train, InferenceMethod, KernelKind, KernelSpec, Task, TrainOptions};
use gpmkl_cli::dataset::{encode_volume, read_dataset, MANIFEST};
use gpmkl_cli::model::{predict, Classifier, ModelFile};

fn gpmkl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpmkl")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Value of `key` in `key: value` output.
fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("{key} missing from\n{text}"))
        .to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 4×4×4 volumes, cubes of edge 2 (8 bags), signal in bag 5.
fn planted(dir: &Path, name: &str, classes: &str, n: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    let o = gpmkl(&[
        "generate", "--dims", "4,4,4", "--classes", classes, "--n", n, "--layout", "cube:2", "--informative", "5",
        "--effect", "3", "--noise", "1", "--seed", seed, "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn train_then_predict_own_training_point() {
    let dir = tempfile::tempdir().unwrap();
    let data = planted(dir.path(), "data", "2", "15", "1");
    let model = dir.path().join("model.json");
    let o = gpmkl(&["train", "--data", s(&data), "--kernel", "lin", "--layout", "single", "--out", s(&model)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&stdout(&o), "classifiers"), "1");

    // instance 1 belongs to class 1, instance 0 to class 0
    let o = gpmkl(&["predict", "--model", s(&model), "--input", s(&data.join("vol_00001.gpmk"))]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(field(&text, "probability").parse::<f64>().unwrap() > 0.5, "{text}");
    assert_eq!(field(&text, "label"), "1");
    let o = gpmkl(&["predict", "--model", s(&model), "--input", s(&data.join("vol_00000.gpmk"))]);
    assert!(field(&stdout(&o), "probability").parse::<f64>().unwrap() < 0.5);
    assert_eq!(field(&stdout(&o), "label"), "0");
}

#[test]
fn three_classes_train_one_model_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let data = planted(dir.path(), "data", "3", "10", "2");
    let model = dir.path().join("model.json");
    let o = gpmkl(&["train", "--data", s(&data), "--kernel", "lin", "--layout", "single", "--out", s(&model)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&stdout(&o), "classifiers"), "3");
    // instance 5 has class 5 % 3 = 2
    let o = gpmkl(&["predict", "--model", s(&model), "--input", s(&data.join("vol_00005.gpmk"))]);
    let text = stdout(&o);
    assert_eq!(field(&text, "label"), "2", "{text}");
    for c in 0..3 {
        field(&text, &format!("probability.{c}"));
    }
}

#[test]
fn cross_validation_report_and_relevance() {
    let dir = tempfile::tempdir().unwrap();
    let data = planted(dir.path(), "data", "2", "20", "3");
    let report = dir.path().join("report.txt");
    let o = gpmkl(&[
        "cv", "--data", s(&data), "--kernel", "lin", "--folds", "10", "--seed", "4", "--report", s(&report),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = stdout(&o);
    assert!(field(&summary, "accuracy.mean").parse::<f64>().unwrap() >= 0.9, "{summary}");

    let text = fs::read_to_string(&report).unwrap();
    assert!(text.lines().all(|l| l.contains(": ")));
    assert_eq!(field(&text, "layout"), "cube:2");
    assert_eq!(text.lines().filter(|l| l.contains(".weights: ")).count(), 10);

    let o = gpmkl(&["relevance", "--report", s(&report)]);
    assert_eq!(o.status.code(), Some(0));
    let rel = stdout(&o);
    assert_eq!(field(&rel, "folds"), "10");
    assert_eq!(field(&rel, "score.5"), "10");
    assert!(field(&rel, "ranking").starts_with("5 "), "{rel}");
}

#[test]
fn outputs_are_deterministic_and_ignore_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let a = planted(dir.path(), "a", "2", "8", "9");
    let b = planted(dir.path(), "b", "2", "8", "9");
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
    let run = |jobs: &str, name: &str| {
        let report = dir.path().join(name);
        let o = gpmkl(&[
            "cv", "--data", s(&a), "--kernel", "se", "--folds", "3", "--seed", "1", "--jobs", jobs, "--report",
            s(&report),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (stdout(&o), fs::read(report).unwrap())
    };
    assert_eq!(run("1", "r1.txt"), run("3", "r3.txt"));
}

#[test]
fn reloaded_models_predict_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = planted(dir.path(), "data", "2", "10", "5");
    let ds = read_dataset(&data).unwrap();
    let y = ds.binary_labels().unwrap();
    let spec = KernelSpec::new(KernelKind::Se, ds.subspace_layout().unwrap()).unwrap();
    let init = initial_hyperparams(&ds.x, &y, &spec, Task::Classification).unwrap();
    for method in [InferenceMethod::Ep, InferenceMethod::Laplace] {
        let opts = TrainOptions {
            inference: method,
            ..Default::default()
        };
        let trained = train(&ds.x, &y, &spec, &init, Task::Classification, &opts).unwrap();
        let file = ModelFile::new(
            spec.kind,
            ds.layout,
            ds.dims,
            2,
            vec![Classifier::from_trained(&trained, 1).unwrap()],
            ds.x.clone(),
        );
        let path = dir.path().join("m.json");
        file.save(&path).unwrap();
        let loaded = ModelFile::load(&path).unwrap();
        assert_eq!(loaded, file);
        // write→read→write is byte-identical
        let again = dir.path().join("m2.json");
        loaded.save(&again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());

        let posteriors = loaded.posteriors().unwrap();
        for (i, row) in ds.x.iter().enumerate() {
            let shifted: Vec<f64> = row.iter().map(|v| v + 0.1 * i as f64).collect();
            let (_, from_disk) = predict(&loaded, &posteriors, &shifted).unwrap();
            let in_memory = trained.predict_proba(&shifted).unwrap();
            assert_eq!(from_disk[0].probability.to_bits(), in_memory.probability.to_bits(), "{method:?}");
            assert_eq!(from_disk[0].latent_var.to_bits(), in_memory.latent_var.to_bits());
        }
    }
}

#[test]
fn bad_files_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = gpmkl(&["train", "--data", s(&missing), "--kernel", "se", "--out", s(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(2));

    let data = planted(dir.path(), "data", "2", "6", "6");
    let volume = data.join("vol_00003.gpmk");
    let bytes = fs::read(&volume).unwrap();
    fs::write(&volume, &bytes[..bytes.len() - 4]).unwrap();
    let o = gpmkl(&["train", "--data", s(&data), "--kernel", "se", "--out", s(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("vol_00003"));
    fs::write(&volume, &bytes).unwrap();

    let model = dir.path().join("m.json");
    let o = gpmkl(&["train", "--data", s(&data), "--kernel", "se", "--inference", "la", "--out", s(&model)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let wrong_dims = dir.path().join("small.gpmk");
    fs::write(&wrong_dims, encode_volume(gpmkl::VolumeDims::new(2, 2, 2).unwrap(), &[0.0; 8]).unwrap()).unwrap();
    let o = gpmkl(&["predict", "--model", s(&model), "--input", s(&wrong_dims)]);
    assert_eq!(o.status.code(), Some(2));

    let text = fs::read_to_string(&model).unwrap();
    fs::write(&model, text.replace("\"version\":1", "\"version\":99")).unwrap();
    let o = gpmkl(&["predict", "--model", s(&model), "--input", s(&volume)]);
    assert_eq!(o.status.code(), Some(2));

    let o = gpmkl(&["relevance", "--report", s(&data.join(MANIFEST))]);
    assert_eq!(o.status.code(), Some(2));

    let three = planted(dir.path(), "three", "3", "6", "7");
    let o = gpmkl(&["cv", "--data", s(&three), "--kernel", "lin", "--report", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_one() {
    let o = gpmkl(&["train", "--kernel", "se"]);
    assert_eq!(o.status.code(), Some(1));
    let o = gpmkl(&["cv", "--data", "d", "--kernel", "se", "--layout", "hexagons", "--report", "r"]);
    assert_eq!(o.status.code(), Some(1));
    let o = gpmkl(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("relevance"));
}
