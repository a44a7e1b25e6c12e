//! Line-oriented `key: value` cross-validation reports.
//!
//! Per-fold metrics come first, then means and standard deviations, then the
//! learned mixing weights of every fold, which is all `relevance` needs.

use gpmkl::{CvReport, InferenceUsed, RelevanceReport, Summary};

use crate::error::{CliError, CliResult};
use crate::format::sig6;

const FORMAT: &str = "gpmkl-cv-report";

pub struct ReportHeader<'a> {
    pub kernel: &'a str,
    pub layout: &'a str,
    pub inference: &'a str,
}

fn inference_name(used: InferenceUsed) -> &'static str {
    match used {
        InferenceUsed::Exact => "exact",
        InferenceUsed::Ep => "ep",
        InferenceUsed::Laplace => "laplace",
    }
}

fn push(out: &mut String, key: &str, value: impl std::fmt::Display) {
    out.push_str(&format!("{key}: {value}\n"));
}

/// The mean and standard deviation lines, also printed by `cv`.
pub fn summary_text(report: &CvReport) -> String {
    let mut out = String::new();
    let rows: [(&str, Summary); 4] = [
        ("accuracy", report.accuracy),
        ("sensitivity", report.sensitivity),
        ("specificity", report.specificity),
        ("auc", report.auc),
    ];
    for (name, s) in rows {
        push(&mut out, &format!("{name}.mean"), sig6(s.mean));
        push(&mut out, &format!("{name}.std"), sig6(s.std));
    }
    if let Some(p) = report.pooled_auc {
        push(&mut out, "pooled_auc", sig6(p));
    }
    push(&mut out, "folds_failed", report.failures.len());
    push(&mut out, "fallbacks", report.fallback_count);
    out
}

pub fn report_text(report: &CvReport, header: &ReportHeader) -> String {
    let mut out = String::new();
    push(&mut out, "format", FORMAT);
    push(&mut out, "kernel", header.kernel);
    push(&mut out, "layout", header.layout);
    push(&mut out, "inference", header.inference);
    push(&mut out, "folds", report.n_folds);
    push(&mut out, "seed", report.seed);
    for f in &report.folds {
        let key = |k: &str| format!("fold.{}.{k}", f.fold);
        push(&mut out, &key("n"), f.counts.total());
        push(&mut out, &key("accuracy"), sig6(f.accuracy));
        push(&mut out, &key("sensitivity"), sig6(f.sensitivity));
        push(&mut out, &key("specificity"), sig6(f.specificity));
        push(&mut out, &key("auc"), sig6(f.auc));
        push(&mut out, &key("lml"), sig6(f.lml));
        push(&mut out, &key("inference"), inference_name(f.inference_used));
        push(&mut out, &key("fallback"), f.fallback_triggered);
    }
    for f in &report.failures {
        push(&mut out, &format!("failure.{}.numerical", f.fold), f.numerical);
        push(&mut out, &format!("failure.{}.error", f.fold), f.error.replace('\n', " "));
    }
    out.push_str(&summary_text(report));
    for f in &report.folds {
        let w: Vec<String> = f.weights.iter().map(|&w| sig6(w)).collect();
        push(&mut out, &format!("fold.{}.weights", f.fold), w.join(" "));
    }
    out
}

/// Per-fold mixing weights, in fold order, from a report's text.
pub fn parse_fold_weights(text: &str) -> CliResult<Vec<Vec<f64>>> {
    let bad = |msg: String| CliError::data(format!("report: {msg}"));
    let mut lines = text.lines();
    match lines.next().and_then(|l| l.split_once(": ")) {
        Some(("format", FORMAT)) => {}
        _ => return Err(bad("not a gpmkl cross-validation report".into())),
    }
    let mut weights = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (key, value) = line.split_once(':').ok_or_else(|| bad(format!("not a key: value line: {line:?}")))?;
        let Some(fold) = key.strip_prefix("fold.").and_then(|k| k.strip_suffix(".weights")) else {
            continue;
        };
        let fold: usize = fold.parse().map_err(|_| bad(format!("bad fold index in {key:?}")))?;
        let w = value
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad weight {v:?} in fold {fold}"))))
            .collect::<CliResult<Vec<f64>>>()?;
        weights.push((fold, w));
    }
    if weights.is_empty() {
        return Err(bad("no fold weights".into()));
    }
    weights.sort_by_key(|&(fold, _)| fold);
    Ok(weights.into_iter().map(|(_, w)| w).collect())
}

pub fn relevance_text(r: &RelevanceReport) -> String {
    let mut out = String::new();
    push(&mut out, "folds", r.n_folds);
    push(&mut out, "bags", r.scores.len());
    for (bag, &s) in r.scores.iter().enumerate() {
        push(&mut out, &format!("score.{bag}"), sig6(s));
    }
    let ranking: Vec<String> = r.ranking.iter().map(usize::to_string).collect();
    push(&mut out, "ranking", ranking.join(" "));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use gpmkl::{relevance_scores, ConfusionCounts, FoldReport};

    fn fold(i: usize, weights: Vec<f64>) -> FoldReport {
        FoldReport {
            fold: i,
            counts: ConfusionCounts::from_labels(&[1.0, -1.0], &[1.0, -1.0]).unwrap(),
            accuracy: 1.0,
            sensitivity: 1.0,
            specificity: 1.0,
            auc: 1.0,
            weights,
            lml: -3.25318765,
            inference_used: InferenceUsed::Ep,
            fallback_triggered: false,
            held_out: Vec::new(),
        }
    }

    fn report() -> CvReport {
        CvReport {
            n_folds: 3,
            seed: 7,
            folds: vec![fold(0, vec![0.5, 2.0, 1e-9]), fold(2, vec![0.25, 4.0, 0.0])],
            failures: vec![gpmkl::FoldFailure {
                fold: 1,
                error: "inference failed".into(),
                numerical: true,
            }],
            accuracy: Summary::of(&[1.0, 1.0]),
            sensitivity: Summary::of(&[1.0, 1.0]),
            specificity: Summary::of(&[1.0, 1.0]),
            auc: Summary::of(&[1.0, 1.0]),
            pooled_auc: Some(0.987654321),
            fallback_count: 0,
        }
    }

    fn header() -> ReportHeader<'static> {
        ReportHeader {
            kernel: "se",
            layout: "cube:8",
            inference: "ep",
        }
    }

    #[test]
    fn sections_come_in_order() {
        let text = report_text(&report(), &header());
        let at = |needle: &str| text.find(needle).unwrap_or_else(|| panic!("{needle} missing"));
        assert!(at("fold.0.accuracy") < at("accuracy.mean"));
        assert!(at("accuracy.mean") < at("fold.0.weights"));
        assert!(text.contains("fold.0.lml: -3.25319\n"));
        assert!(text.contains("pooled_auc: 0.987654\n"));
        assert!(text.contains("failure.1.numerical: true\n"));
        assert!(text.contains("fold.2.weights: 0.25 4 0\n"));
        assert!(text.lines().all(|l| l.contains(": ")));
    }

    #[test]
    fn weights_read_back_feed_the_scorer() {
        let r = report();
        let text = report_text(&r, &header());
        let parsed = parse_fold_weights(&text).unwrap();
        assert_eq!(parsed, r.fold_weights());
        let rel = relevance_scores(&parsed).unwrap();
        assert_eq!(rel.scores[1], 2.0);
        let out = relevance_text(&rel);
        assert!(out.contains("score.1: 2\n"));
        assert!(out.ends_with("ranking: 1 0 2\n"));
    }

    #[test]
    fn rejects_foreign_text() {
        assert!(parse_fold_weights("hello: world\n").is_err());
        assert!(parse_fold_weights("format: gpmkl-cv-report\nfolds: 3\n").is_err());
        assert!(parse_fold_weights("format: gpmkl-cv-report\nfold.0.weights: 1 x\n").is_err());
    }
}
