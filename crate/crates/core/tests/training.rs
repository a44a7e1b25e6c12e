use gpmkl::{
    gram, initial_hyperparams, log_marginal_likelihood, train, GpError, HyperParams, InferenceMethod, InferenceUsed,
    KernelKind, KernelSpec, SubspaceLayout, Task, TrainOptions,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn uniform_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn accuracy(model: &gpmkl::TrainedModel, x: &[Vec<f64>], y: &[f64]) -> f64 {
    let hits = x
        .iter()
        .zip(y)
        .filter(|(row, &label)| model.predict_proba(row).unwrap().label() == label)
        .count();
    hits as f64 / y.len() as f64
}

/// Draws `y = f + ε` with `f ~ GP(m, K)` at the given hyperparameters.
fn sample_from_prior(x: &[Vec<f64>], spec: &KernelSpec, hp: &HyperParams, seed: u64) -> Vec<f64> {
    let n = x.len();
    let k = gram(x, spec, hp).unwrap().into_inner() + DMatrix::identity(n, n) * 1e-10;
    let l = k.cholesky().unwrap().l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let f = l * z;
    let sn = hp.noise_variance().sqrt();
    (0..n)
        .map(|i| {
            let e: f64 = StandardNormal.sample(&mut rng);
            hp.mean_const + f[i] + sn * e
        })
        .collect()
}

#[test]
fn regression_optimum_beats_generating_hyperparameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = uniform_rows(&mut rng, 30, 2);
    let spec = KernelSpec::single(KernelKind::Se, 2).unwrap();
    let truth = HyperParams {
        log_sigma_f: vec![0.3],
        log_ell: vec![-0.4],
        log_sigma_n: Some((0.1f64).ln()),
        mean_const: 0.5,
    };
    let y = sample_from_prior(&x, &spec, &truth, 3);
    let init = initial_hyperparams(&x, &y, &spec, Task::Regression).unwrap();
    let model = train(&x, &y, &spec, &init, Task::Regression, &TrainOptions::default()).unwrap();
    let (at_truth, _) = log_marginal_likelihood(&x, &y, &spec, &truth).unwrap();
    assert_eq!(model.inference_used, InferenceUsed::Exact);
    assert!(model.lml >= at_truth - 1e-6, "optimum {} < truth {}", model.lml, at_truth);
    // the reported lml is the one at the reported hyperparameters
    let (again, _) = log_marginal_likelihood(&x, &y, &spec, &model.hp).unwrap();
    assert_eq!(again, model.lml);
}

#[test]
fn separable_toy_is_fit_exactly_with_linear_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = uniform_rows(&mut rng, 20, 2);
    let y: Vec<f64> = x.iter().map(|r| if r[0] - 0.5 * r[1] > 0.0 { 1.0 } else { -1.0 }).collect();
    let spec = KernelSpec::single(KernelKind::Lin, 2).unwrap();
    let init = initial_hyperparams(&x, &y, &spec, Task::Classification).unwrap();
    for method in [InferenceMethod::Ep, InferenceMethod::Laplace] {
        let opts = TrainOptions {
            inference: method,
            ..Default::default()
        };
        let model = train(&x, &y, &spec, &init, Task::Classification, &opts).unwrap();
        assert!(!model.fallback_triggered);
        assert_eq!(accuracy(&model, &x, &y), 1.0, "{method:?}");
        assert!(model.lml.is_finite() && model.lml < 0.0);
    }
}

#[test]
fn planted_bag_gets_the_largest_weight() {
    // five bags of three features; only bag 2 carries the label
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 40;
    let bags: Vec<Vec<usize>> = (0..5).map(|s| (3 * s..3 * s + 3).collect()).collect();
    let layout = SubspaceLayout::from_bags(15, bags).unwrap();
    let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let x: Vec<Vec<f64>> = y
        .iter()
        .map(|&label| {
            (0..15)
                .map(|j| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    if (6..9).contains(&j) {
                        noise + 1.5 * label
                    } else {
                        noise
                    }
                })
                .collect()
        })
        .collect();
    for kind in [KernelKind::Lin, KernelKind::Se] {
        let spec = KernelSpec::new(kind, layout.clone()).unwrap();
        let init = initial_hyperparams(&x, &y, &spec, Task::Classification).unwrap();
        let model = train(&x, &y, &spec, &init, Task::Classification, &TrainOptions::default()).unwrap();
        let w = model.mixing_weights();
        let top = (0..5).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
        assert_eq!(top, 2, "{kind:?} weights {w:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform_rows(&mut rng, 16, 3);
    let y: Vec<f64> = x.iter().map(|r| if r[1] + r[2] > 0.2 { 1.0 } else { -1.0 }).collect();
    let spec = KernelSpec::single(KernelKind::Nn, 3).unwrap();
    let init = initial_hyperparams(&x, &y, &spec, Task::Classification).unwrap();
    let mut opts = TrainOptions::default();
    opts.optimizer.restarts = 2;
    opts.optimizer.seed = Some(17);
    let a = train(&x, &y, &spec, &init, Task::Classification, &opts).unwrap();
    let b = train(&x, &y, &spec, &init, Task::Classification, &opts).unwrap();
    assert_eq!(a.hp, b.hp);
    assert_eq!(a.lml.to_bits(), b.lml.to_bits());
    let probe = [0.1, -0.3, 0.7];
    assert_eq!(a.predict_proba(&probe).unwrap(), b.predict_proba(&probe).unwrap());
}

#[test]
fn restarts_never_worsen_the_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = uniform_rows(&mut rng, 18, 2);
    let y: Vec<f64> = x.iter().map(|r| (3.0 * r[0]).sin() + 0.1 * r[1]).collect();
    let spec = KernelSpec::single(KernelKind::Se, 2).unwrap();
    let init = initial_hyperparams(&x, &y, &spec, Task::Regression).unwrap();
    let plain = train(&x, &y, &spec, &init, Task::Regression, &TrainOptions::default()).unwrap();
    let mut opts = TrainOptions::default();
    opts.optimizer.restarts = 3;
    opts.optimizer.seed = Some(5);
    let restarted = train(&x, &y, &spec, &init, Task::Regression, &opts).unwrap();
    assert!(restarted.lml >= plain.lml);
}

#[test]
fn ep_failure_at_the_start_falls_back_to_laplace() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = uniform_rows(&mut rng, 20, 4);
    let y: Vec<f64> = x.iter().map(|r| if r[0] + 0.3 * r[1] > 0.0 { 1.0 } else { -1.0 }).collect();
    let spec = KernelSpec::single(KernelKind::Se, 4).unwrap();
    let mut init = initial_hyperparams(&x, &y, &spec, Task::Classification).unwrap();
    init.log_sigma_f[0] = 50.0;
    let model = train(&x, &y, &spec, &init, Task::Classification, &TrainOptions::default()).unwrap();
    assert!(model.fallback_triggered);
    assert_eq!(model.inference_used, InferenceUsed::Laplace);
    assert!(model.lml.is_finite());
    assert!(model.hp.log_sigma_f[0] < 50.0);
    assert_eq!(accuracy(&model, &x, &y), 1.0);
}

#[test]
fn task_and_hyperparameters_must_agree() {
    let x = vec![vec![0.0], vec![1.0]];
    let spec = KernelSpec::single(KernelKind::Lin, 1).unwrap();
    let with_noise = HyperParams::unit(&spec, Some(0.0));
    let without = HyperParams::unit(&spec, None);
    let opts = TrainOptions::default();
    assert!(matches!(
        train(&x, &[1.0, -1.0], &spec, &with_noise, Task::Classification, &opts),
        Err(GpError::InvalidArgument(_))
    ));
    assert!(matches!(
        train(&x, &[0.3, 0.1], &spec, &without, Task::Regression, &opts),
        Err(GpError::InvalidArgument(_))
    ));
    assert!(train(&x, &[1.0], &spec, &without, Task::Classification, &opts).is_err());
}
