//! Command-line front end: synthetic data generation, training,
//! cross-validation, prediction and relevance reporting.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
//! failure (EP and Laplace both failed).

pub mod dataset;
pub mod error;
pub mod format;
pub mod model;
pub mod report;

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gpmkl::{
    cross_validate, generate_synthetic, initial_hyperparams, ova_train, relevance_scores, train, CvOptions, Dataset,
    InferenceMethod, KernelKind, KernelSpec, LayoutKind, SubspaceLayout, SyntheticConfig, Task, TrainOptions,
    TrainedModel, VolumeDims,
};

use crate::dataset::{read_dataset, read_volume, write_dataset};
use crate::error::{io_context, CliError, CliResult};
use crate::format::{layout_name, parse_dims, parse_layout, sig6};
use crate::model::{Classifier, ModelFile};
use crate::report::{parse_fold_weights, relevance_text, report_text, summary_text, ReportHeader};

#[derive(Parser, Debug)]
#[command(name = "gpmkl", version, about = "Gaussian process classifiers with per-subspace kernel relevance")]
struct Cli {
    /// More log output on standard error (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with signal planted in chosen bags.
    Generate(GenerateArgs),
    /// Train a classifier on a dataset and save it.
    Train(TrainArgs),
    /// Stratified k-fold cross-validation of a two-class dataset.
    Cv(CvArgs),
    /// Class probability for one volume.
    Predict(PredictArgs),
    /// Relevance scores and ranking of bags from a cross-validation report.
    Relevance(RelevanceArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Volume shape NX,NY,NZ.
    #[arg(long, value_parser = parse_dims)]
    dims: VolumeDims,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(2..=3))]
    classes: u64,
    /// Instances per class.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// slices or cube:E.
    #[arg(long, value_parser = parse_layout)]
    layout: LayoutKind,
    /// Comma-separated indices of the bags carrying signal.
    #[arg(long, value_delimiter = ',')]
    informative: Vec<usize>,
    /// Mean shift of the last class on informative voxels.
    #[arg(long, default_value_t = 1.0)]
    effect: f64,
    /// Standard deviation of the background noise.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Dataset directory holding manifest.txt.
    #[arg(long)]
    data: PathBuf,
    /// Basis kernel: lin, se or nn.
    #[arg(long, value_parser = parse_kernel)]
    kernel: KernelKind,
    /// single, slices or cube:E; defaults to the dataset's layout.
    #[arg(long, value_parser = parse_layout)]
    layout: Option<LayoutKind>,
    /// Approximate inference: ep (falls back to la) or la.
    #[arg(long, default_value = "ep", value_parser = parse_inference)]
    inference: InferenceMethod,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(2..))]
    folds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also report one AUC over all held-out predictions.
    #[arg(long)]
    pooled_auc: bool,
    /// Folds run concurrently; defaults to the number of processors.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: Option<u64>,
    /// Report file to write.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// GPMK volume file.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args, Debug)]
struct RelevanceArgs {
    /// Report written by `cv`.
    #[arg(long)]
    report: PathBuf,
}

fn parse_kernel(s: &str) -> Result<KernelKind, String> {
    match s {
        "lin" => Ok(KernelKind::Lin),
        "se" => Ok(KernelKind::Se),
        "nn" => Ok(KernelKind::Nn),
        _ => Err(format!("expected lin, se or nn, got {s:?}")),
    }
}

fn parse_inference(s: &str) -> Result<InferenceMethod, String> {
    match s {
        "ep" => Ok(InferenceMethod::Ep),
        "la" => Ok(InferenceMethod::Laplace),
        _ => Err(format!("expected ep or la, got {s:?}")),
    }
}

fn inference_flag(m: InferenceMethod) -> &'static str {
    match m {
        InferenceMethod::Ep => "ep",
        InferenceMethod::Laplace => "la",
    }
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();

    let outcome = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => single_threaded(|| train_cmd(a)),
        Command::Cv(a) => cv(a),
        Command::Predict(a) => single_threaded(|| predict(a)),
        Command::Relevance(a) => relevance(a),
    };
    match outcome {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("gpmkl: {e}");
            e.exit_code()
        }
    }
}

fn single_threaded(f: impl FnOnce() -> CliResult<String> + Send) -> CliResult<String> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| CliError::Numerical(e.to_string()))?
        .install(f)
}

fn generate(a: GenerateArgs) -> CliResult<String> {
    if !matches!(a.layout, LayoutKind::Slices | LayoutKind::Cubes { .. }) {
        return Err(CliError::Usage("generate needs --layout slices or cube:E".into()));
    }
    let cfg = SyntheticConfig {
        dims: a.dims,
        n_per_class: a.n as usize,
        n_classes: a.classes as usize,
        layout: a.layout,
        informative_bags: a.informative,
        effect_size: a.effect,
        noise_std: a.noise,
        seed: a.seed,
    };
    // every config problem is a flag problem here
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let ds = generate_synthetic(&cfg)?;
    write_dataset(&a.out, &ds)?;
    Ok(format!(
        "instances: {}\nbags: {}\nout: {}\n",
        ds.len(),
        ds.subspace_layout()?.num_bags(),
        a.out.display()
    ))
}

struct Loaded {
    ds: Dataset,
    layout: LayoutKind,
    spec: KernelSpec,
}

fn load(a: &ModelArgs) -> CliResult<Loaded> {
    let ds = read_dataset(&a.data)?;
    let layout = a.layout.unwrap_or(ds.layout);
    let spec = KernelSpec::new(a.kernel, SubspaceLayout::for_volume(ds.dims, layout)?)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Loaded { ds, layout, spec })
}

fn train_options(a: &ModelArgs) -> TrainOptions {
    TrainOptions {
        inference: a.inference,
        ..Default::default()
    }
}

fn report_fallback(model: &TrainedModel, what: &str) {
    if model.fallback_triggered {
        eprintln!("gpmkl: EP did not converge for {what}; retrained with the Laplace approximation");
    }
}

/// Trains the classifiers a dataset needs: one for two classes, else one
/// per class against the rest.
pub fn train_model(ds: &Dataset, spec: &KernelSpec, layout: LayoutKind, opts: &TrainOptions) -> CliResult<ModelFile> {
    let classifiers = if ds.n_classes == 2 {
        let y = ds.binary_labels()?;
        let init = initial_hyperparams(&ds.x, &y, spec, Task::Classification)?;
        let model = train(&ds.x, &y, spec, &init, Task::Classification, opts)?;
        report_fallback(&model, "the classifier");
        vec![Classifier::from_trained(&model, 1)?]
    } else {
        let ova = ova_train(&ds.x, &ds.labels, ds.n_classes, spec, opts)?;
        ova.models
            .iter()
            .zip(&ova.classes)
            .map(|(m, &c)| {
                report_fallback(m, &format!("class {c}"));
                Classifier::from_trained(m, c)
            })
            .collect::<CliResult<_>>()?
    };
    Ok(ModelFile::new(spec.kind, layout, ds.dims, ds.n_classes, classifiers, ds.x.clone()))
}

fn train_cmd(a: TrainArgs) -> CliResult<String> {
    let Loaded { ds, layout, spec } = load(&a.model)?;
    let model = train_model(&ds, &spec, layout, &train_options(&a.model))?;
    model.save(&a.out)?;
    let mut out = format!("classifiers: {}\n", model.classifiers.len());
    for (i, c) in model.classifiers.iter().enumerate() {
        out += &format!("classifier.{i}.positive_class: {}\n", c.positive_class);
        out += &format!("classifier.{i}.inference: {}\n", c.inference_name());
        out += &format!("classifier.{i}.fallback: {}\n", c.fallback_triggered);
        out += &format!("classifier.{i}.lml: {}\n", sig6(c.lml));
    }
    out += &format!("model: {}\n", a.out.display());
    Ok(out)
}

fn cv(a: CvArgs) -> CliResult<String> {
    let Loaded { ds, layout, spec } = load(&a.model)?;
    if ds.n_classes != 2 {
        return Err(CliError::data(format!(
            "cv needs a two-class dataset, this one has {} classes",
            ds.n_classes
        )));
    }
    let y = ds.binary_labels()?;
    let opts = CvOptions {
        folds: a.folds as usize,
        seed: a.seed,
        train: train_options(&a.model),
        pooled_auc: a.pooled_auc,
        jobs: a.jobs.map(|j| j as usize),
    };
    let report = cross_validate(&ds.x, &y, &spec, None, &opts)?;
    for f in report.folds.iter().filter(|f| f.fallback_triggered) {
        eprintln!("gpmkl: EP did not converge in fold {}; retrained with the Laplace approximation", f.fold);
    }
    for f in &report.failures {
        eprintln!("gpmkl: fold {} failed: {}", f.fold, f.error);
    }
    let header = ReportHeader {
        kernel: a.model.kernel.name(),
        layout: &layout_name(layout),
        inference: inference_flag(a.model.inference),
    };
    fs::write(&a.report, report_text(&report, &header)).map_err(io_context(&a.report))?;
    Ok(summary_text(&report))
}

fn predict(a: PredictArgs) -> CliResult<String> {
    let model = ModelFile::load(&a.model)?;
    let (dims, x) = read_volume(&a.input)?;
    if dims != model.volume_dims()? {
        return Err(CliError::data(format!(
            "volume is {}x{}x{}, model expects {}x{}x{}",
            dims.nx, dims.ny, dims.nz, model.dims[0], model.dims[1], model.dims[2]
        )));
    }
    let posteriors = model.posteriors()?;
    let (label, preds) = model::predict(&model, &posteriors, &x)?;
    let mut out = String::new();
    if model.n_classes == 2 {
        out += &format!("probability: {}\n", sig6(preds[0].probability));
    } else {
        for (c, p) in model.classifiers.iter().zip(&preds) {
            out += &format!("probability.{}: {}\n", c.positive_class, sig6(p.probability));
        }
    }
    out += &format!("label: {label}\n");
    Ok(out)
}

fn relevance(a: RelevanceArgs) -> CliResult<String> {
    let text = fs::read_to_string(&a.report).map_err(io_context(&a.report))?;
    let weights = parse_fold_weights(&text)?;
    Ok(relevance_text(&relevance_scores(&weights)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["gpmkl"]), 1);
        assert_eq!(run(["gpmkl", "frobnicate"]), 1);
        assert_eq!(run(["gpmkl", "train", "--data", "d", "--kernel", "rbf", "--out", "m"]), 1);
        assert_eq!(run(["gpmkl", "generate", "--dims", "4,4", "--n", "3", "--layout", "slices", "--out", "o"]), 1);
        assert_eq!(run(["gpmkl", "cv", "--data", "d", "--kernel", "se", "--report", "r", "--jobs", "0"]), 1);
    }

    #[test]
    fn help_exits_with_zero() {
        assert_eq!(run(["gpmkl", "--help"]), 0);
        assert_eq!(run(["gpmkl", "--version"]), 0);
    }

    #[test]
    fn generate_rejects_bad_configs_as_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        let out = out.to_str().unwrap();
        let base = ["gpmkl", "generate", "--dims", "4,4,4", "--n", "3", "--out", out];
        let with = |extra: &[&str]| run(base.iter().chain(extra).copied().collect::<Vec<_>>());
        assert_eq!(with(&["--layout", "cube:2", "--informative", "99"]), 1);
        assert_eq!(with(&["--layout", "single"]), 1);
        assert_eq!(with(&["--layout", "slices", "--noise", "0"]), 1);
        assert_eq!(with(&["--layout", "slices", "--informative", "1,3"]), 0);
    }
}
