//! Cross-validation, binary metrics, ROC AUC and one-vs-all multiclass.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::kernels::{GramCache, HyperParams, KernelSpec};
use crate::optimize::{initial_hyperparams_with_cache, train_with_cache, InferenceUsed, Task, TrainOptions, TrainedModel};
use crate::subspaces::{relevance_scores, RelevanceReport};

/// Assigns each instance a fold in `0..k`, stratified by class.
///
/// Members of each class are shuffled and dealt round-robin; the dealing
/// continues where the previous class stopped so total fold sizes also stay
/// within one of each other.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(GpError::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    if labels.is_empty() {
        return Err(GpError::Empty("labels"));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(GpError::InvalidArgument(format!(
                "class {c} has {} members, fewer than {k} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for i in members {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(folds)
}

/// Maps `±1` labels to class indices (`-1 → 0`, `+1 → 1`).
pub fn binary_classes(y: &[f64]) -> Result<Vec<usize>> {
    y.iter()
        .map(|&v| match v {
            1.0 => Ok(1),
            -1.0 => Ok(0),
            v => Err(GpError::InvalidArgument(format!("labels must be -1 or +1, got {v}"))),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    /// Counts from predicted and true `±1` labels.
    pub fn from_labels(predicted: &[f64], truth: &[f64]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(GpError::DimensionMismatch {
                expected: truth.len(),
                got: predicted.len(),
            });
        }
        let mut c = Self::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p > 0.0, t > 0.0) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> Result<f64> {
        ratio(self.tp + self.tn, self.total(), "accuracy")
    }

    pub fn sensitivity(&self) -> Result<f64> {
        ratio(self.tp, self.tp + self.fn_, "sensitivity")
    }

    pub fn specificity(&self) -> Result<f64> {
        ratio(self.tn, self.tn + self.fp, "specificity")
    }
}

fn ratio(num: usize, den: usize, what: &str) -> Result<f64> {
    if den == 0 {
        return Err(GpError::InvalidArgument(format!("{what} undefined: no cases in its denominator")));
    }
    Ok(num as f64 / den as f64)
}

/// `(accuracy, sensitivity, specificity)`.
pub fn confusion_metrics(counts: &ConfusionCounts) -> Result<(f64, f64, f64)> {
    Ok((counts.accuracy()?, counts.sensitivity()?, counts.specificity()?))
}

/// Area under the ROC curve for `±1` labels, with tied scores counted as
/// half-concordant (Mann–Whitney with mid-ranks).
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(GpError::DimensionMismatch {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(GpError::NonFinite("scores"));
    }
    let classes = binary_classes(labels)?;
    let n_pos = classes.iter().filter(|&&c| c == 1).count();
    let n_neg = classes.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(GpError::InvalidArgument("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (1-based) mid-ranks of the positives, doubled to stay integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        let pos = order[i..=j].iter().filter(|&&o| classes[o] == 1).count() as u128;
        twice_rank_sum += pos * twice_mid;
        i = j + 1;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * q) as f64)
}

/// One binary model per class, each separating that class from the rest.
#[derive(Clone, Debug)]
pub struct OvaModel {
    pub classes: Vec<usize>,
    pub models: Vec<TrainedModel>,
}

/// Trains `n_classes` one-vs-all classifiers; class indices are `0..n_classes`.
pub fn ova_train(
    x: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    spec: &KernelSpec,
    opts: &TrainOptions,
) -> Result<OvaModel> {
    if n_classes < 2 {
        return Err(GpError::InvalidArgument(format!("need at least 2 classes, got {n_classes}")));
    }
    if labels.len() != x.len() {
        return Err(GpError::DimensionMismatch {
            expected: x.len(),
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= n_classes) {
        return Err(GpError::IndexOutOfRange {
            index: bad,
            len: n_classes,
        });
    }
    let cache = GramCache::new(x, spec)?;
    let models = (0..n_classes)
        .into_par_iter()
        .map(|c| {
            let y: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            let init = initial_hyperparams_with_cache(&cache, &y, spec, Task::Classification)?;
            train_with_cache(&cache, x, &y, spec, &init, Task::Classification, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OvaModel {
        classes: (0..n_classes).collect(),
        models,
    })
}

/// Predicted class (first maximum of the per-class probabilities) and the
/// probabilities themselves.
pub fn ova_predict(model: &OvaModel, x_star: &[f64]) -> Result<(usize, Vec<f64>)> {
    let probs = model
        .models
        .iter()
        .map(|m| m.predict_proba(x_star).map(|p| p.probability))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = c;
        }
    }
    Ok((model.classes[best], probs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    pub train: TrainOptions,
    /// Also compute one AUC over all held-out predictions.
    pub pooled_auc: bool,
    /// Concurrent folds; `None` uses every processor.
    pub jobs: Option<usize>,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 10,
            seed: 0,
            train: TrainOptions::default(),
            pooled_auc: false,
            jobs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub auc: f64,
    /// Learned mixing weights `β_s`.
    pub weights: Vec<f64>,
    pub lml: f64,
    pub inference_used: InferenceUsed,
    pub fallback_triggered: bool,
    #[serde(skip)]
    pub held_out: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub fold: usize,
    pub error: String,
    /// Both EP and Laplace failed, as opposed to bad input.
    pub numerical: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; zero for fewer than two folds.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub n_folds: usize,
    pub seed: u64,
    pub folds: Vec<FoldReport>,
    pub failures: Vec<FoldFailure>,
    pub accuracy: Summary,
    pub sensitivity: Summary,
    pub specificity: Summary,
    pub auc: Summary,
    pub pooled_auc: Option<f64>,
    pub fallback_count: usize,
}

impl CvReport {
    pub fn fold_weights(&self) -> Vec<Vec<f64>> {
        self.folds.iter().map(|f| f.weights.clone()).collect()
    }

    pub fn relevance(&self) -> Result<RelevanceReport> {
        relevance_scores(&self.fold_weights())
    }
}

#[allow(clippy::too_many_arguments)]
fn run_fold(
    cache: &GramCache,
    x: &[Vec<f64>],
    y: &[f64],
    spec: &KernelSpec,
    init: Option<&HyperParams>,
    folds: &[usize],
    fold: usize,
    opts: &TrainOptions,
) -> Result<FoldReport> {
    let train_rows: Vec<usize> = (0..x.len()).filter(|&i| folds[i] != fold).collect();
    let test_rows: Vec<usize> = (0..x.len()).filter(|&i| folds[i] == fold).collect();
    let sub = cache.subset(&train_rows)?;
    let tx: Vec<Vec<f64>> = train_rows.iter().map(|&i| x[i].clone()).collect();
    let ty: Vec<f64> = train_rows.iter().map(|&i| y[i]).collect();
    let init = match init {
        Some(hp) => hp.clone(),
        None => initial_hyperparams_with_cache(&sub, &ty, spec, Task::Classification)?,
    };
    let model = train_with_cache(&sub, &tx, &ty, spec, &init, Task::Classification, opts)?;
    let mut probs = Vec::with_capacity(test_rows.len());
    for &i in &test_rows {
        probs.push(model.predict_proba(&x[i])?.probability);
    }
    let truth: Vec<f64> = test_rows.iter().map(|&i| y[i]).collect();
    let predicted: Vec<f64> = probs.iter().map(|&p| if p >= 0.5 { 1.0 } else { -1.0 }).collect();
    let counts = ConfusionCounts::from_labels(&predicted, &truth)?;
    let (accuracy, sensitivity, specificity) = confusion_metrics(&counts)?;
    Ok(FoldReport {
        fold,
        counts,
        accuracy,
        sensitivity,
        specificity,
        auc: roc_auc(&probs, &truth)?,
        weights: model.mixing_weights(),
        lml: model.lml,
        inference_used: model.inference_used,
        fallback_triggered: model.fallback_triggered,
        held_out: test_rows.into_iter().zip(probs).collect(),
    })
}

/// Stratified k-fold cross-validation of a binary classifier (`±1` labels).
///
/// Every fold starts from the conventional initial hyperparameters of its
/// training part unless `init` is given. A fold whose training fails is
/// listed in `failures`; summaries cover the remaining folds. The call
/// errors only when every fold fails.
pub fn cross_validate(
    x: &[Vec<f64>],
    y: &[f64],
    spec: &KernelSpec,
    init: Option<&HyperParams>,
    opts: &CvOptions,
) -> Result<CvReport> {
    if x.len() != y.len() {
        return Err(GpError::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let classes = binary_classes(y)?;
    let folds = stratified_kfold(&classes, opts.folds, opts.seed)?;
    let cache = GramCache::new(x, spec)?;
    let run = || -> Vec<Result<FoldReport>> {
        (0..opts.folds)
            .into_par_iter()
            .map(|k| run_fold(&cache, x, y, spec, init, &folds, k, &opts.train))
            .collect()
    };
    let outcomes = match opts.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| GpError::InvalidArgument(e.to_string()))?
            .install(run),
        None => run(),
    };

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut first_error = None;
    for (fold, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(r) => reports.push(r),
            Err(e) => {
                log::warn!("fold {fold} failed: {e}");
                failures.push(FoldFailure {
                    fold,
                    error: e.to_string(),
                    numerical: matches!(e, GpError::InferenceFailed { .. }),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    if reports.is_empty() {
        return Err(first_error.unwrap_or(GpError::Empty("folds")));
    }
    let pick = |f: fn(&FoldReport) -> f64| Summary::of(&reports.iter().map(f).collect::<Vec<_>>());
    let pooled_auc = if opts.pooled_auc {
        let (scores, truth): (Vec<f64>, Vec<f64>) =
            reports.iter().flat_map(|r| r.held_out.iter().map(|&(i, p)| (p, y[i]))).unzip();
        Some(roc_auc(&scores, &truth)?)
    } else {
        None
    };
    Ok(CvReport {
        n_folds: opts.folds,
        seed: opts.seed,
        accuracy: pick(|r| r.accuracy),
        sensitivity: pick(|r| r.sensitivity),
        specificity: pick(|r| r.specificity),
        auc: pick(|r| r.auc),
        fallback_count: reports.iter().filter(|r| r.fallback_triggered).count(),
        pooled_auc,
        folds: reports,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelKind;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_auc(scores: &[f64], labels: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] > 0.0 && labels[j] < 0.0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn kfold_exact_division() {
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let folds = stratified_kfold(&labels, 10, 3).unwrap();
        for f in 0..10 {
            for c in 0..2 {
                let n = (0..40).filter(|&i| folds[i] == f && labels[i] == c).count();
                assert_eq!(n, 2);
            }
        }
    }

    #[test]
    fn kfold_uneven_classes() {
        let labels: Vec<usize> = (0..41).map(|i| usize::from(i >= 21)).collect();
        let folds = stratified_kfold(&labels, 10, 3).unwrap();
        for c in 0..2 {
            let sizes: Vec<usize> = (0..10)
                .map(|f| (0..41).filter(|&i| folds[i] == f && labels[i] == c).count())
                .collect();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
        let totals: Vec<usize> = (0..10).map(|f| folds.iter().filter(|&&g| g == f).count()).collect();
        assert!(totals.iter().max().unwrap() - totals.iter().min().unwrap() <= 1);
    }

    #[test]
    fn kfold_deterministic_and_validated() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        assert_eq!(stratified_kfold(&labels, 5, 9).unwrap(), stratified_kfold(&labels, 5, 9).unwrap());
        assert!(stratified_kfold(&labels, 11, 9).is_err());
        assert!(stratified_kfold(&labels, 1, 9).is_err());
    }

    #[test]
    fn metrics_examples() {
        let perfect = ConfusionCounts { tp: 10, tn: 10, fp: 0, fn_: 0 };
        assert_eq!(confusion_metrics(&perfect).unwrap(), (1.0, 1.0, 1.0));
        let c = ConfusionCounts { tp: 9, tn: 8, fp: 2, fn_: 1 };
        let (a, se, sp) = confusion_metrics(&c).unwrap();
        assert!((a - 0.85).abs() < 1e-15 && (se - 0.9).abs() < 1e-15 && (sp - 0.8).abs() < 1e-15);
        let all_pos = ConfusionCounts::from_labels(&[1.0; 4], &[1.0, 1.0, -1.0, -1.0]).unwrap();
        assert_eq!(all_pos.sensitivity().unwrap(), 1.0);
        assert_eq!(all_pos.specificity().unwrap(), 0.0);
        let no_neg = ConfusionCounts { tp: 3, tn: 0, fp: 0, fn_: 1 };
        assert!(no_neg.specificity().is_err());
        assert!(no_neg.sensitivity().is_ok());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[-1.0, -1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 6], &[-1.0, 1.0, -1.0, 1.0, 1.0, -1.0]).unwrap(), 0.5);
        assert!(roc_auc(&[0.5, 0.6], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let n = rng.random_range(2..=12);
            let mut labels: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
            labels[0] = 1.0;
            labels[1] = -1.0;
            // coarse grid forces ties
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
            let got = roc_auc(&scores, &labels).unwrap();
            assert!((got - brute_auc(&scores, &labels)).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            scores in proptest::collection::vec(-3.0f64..3.0, 4..20),
            flips in proptest::collection::vec(any::<bool>(), 20),
        ) {
            let mut labels: Vec<f64> = scores.iter().zip(&flips).map(|(_, &b)| if b { 1.0 } else { -1.0 }).collect();
            labels[0] = 1.0;
            labels[1] = -1.0;
            let transformed: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 1.0).collect();
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&transformed, &labels).unwrap());
        }

        #[test]
        fn accuracy_between_rates_when_balanced(tp in 0usize..20, tn in 0usize..20) {
            let c = ConfusionCounts { tp, tn, fp: 20 - tn, fn_: 20 - tp };
            let (a, se, sp) = confusion_metrics(&c).unwrap();
            prop_assert!(a >= se.min(sp) - 1e-15 && a <= se.max(sp) + 1e-15);
        }
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-15);
        assert_eq!(Summary::of(&[4.0]).std, 0.0);
    }

    #[test]
    fn duplicated_points_are_memorized() {
        // two distinct points, each repeated; every fold sees both in training
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..20 {
            if i % 2 == 0 {
                x.push(vec![1.0, 0.5, -0.5]);
                y.push(1.0);
            } else {
                x.push(vec![-1.0, -0.5, 0.5]);
                y.push(-1.0);
            }
        }
        let spec = KernelSpec::single(KernelKind::Lin, 3).unwrap();
        let opts = CvOptions {
            folds: 5,
            seed: 1,
            ..CvOptions::default()
        };
        let report = cross_validate(&x, &y, &spec, None, &opts).unwrap();
        assert!(report.failures.is_empty());
        assert!(report.folds.iter().all(|f| f.accuracy == 1.0));
        let r = report.relevance().unwrap();
        assert_eq!(r.scores, vec![5.0]);
    }
}
