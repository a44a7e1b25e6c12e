//! Versioned JSON model files.
//!
//! A full GP predicts from every training point, so the file embeds the
//! training inputs next to the optimized hyperparameters and the posterior
//! state: EP site parameters, or the Laplace mode in the `a = K⁻¹(f̂ - m)`
//! form. Numbers are written in shortest round-trip form, so a reloaded
//! model predicts exactly what the trained one did.

use std::fs;
use std::path::Path;

use gpmkl::{
    HyperParams, InferenceUsed, KernelKind, KernelSpec, LatentPosterior, LayoutKind, Posterior, PredictiveClass,
    SubspaceLayout, TrainedModel, VolumeDims,
};
use serde::{Deserialize, Serialize};

use crate::error::{io_context, CliError, CliResult};
use crate::format::{layout_name, parse_layout};

const FORMAT: &str = "gpmkl-model";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum PosteriorState {
    Ep { tau: Vec<f64>, nu: Vec<f64> },
    Laplace { a: Vec<f64> },
}

/// One binary classifier separating `positive_class` from the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub positive_class: usize,
    /// Training labels in `{-1, +1}`.
    pub labels: Vec<f64>,
    pub hyperparameters: HyperParams,
    pub lml: f64,
    pub fallback_triggered: bool,
    pub posterior: PosteriorState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub kernel: KernelKind,
    pub layout: String,
    pub dims: [usize; 3],
    pub n_classes: usize,
    /// One classifier for two classes, else one per class (one-vs-all).
    pub classifiers: Vec<Classifier>,
    pub train_x: Vec<Vec<f64>>,
}

impl Classifier {
    pub fn from_trained(model: &TrainedModel, positive_class: usize) -> CliResult<Self> {
        let Posterior::Latent(post) = &model.posterior else {
            return Err(CliError::data("only classification models can be saved"));
        };
        let posterior = match (model.inference_used, &post.sites) {
            (InferenceUsed::Ep, Some(sites)) => PosteriorState::Ep {
                tau: sites.tau.clone(),
                nu: sites.nu.clone(),
            },
            (InferenceUsed::Laplace, _) => PosteriorState::Laplace {
                a: post.alpha.iter().copied().collect(),
            },
            _ => return Err(CliError::data("classifier is missing its posterior state")),
        };
        Ok(Self {
            positive_class,
            labels: post.labels.clone(),
            hyperparameters: model.hp.clone(),
            lml: model.lml,
            fallback_triggered: model.fallback_triggered,
            posterior,
        })
    }

    pub fn inference_name(&self) -> &'static str {
        match self.posterior {
            PosteriorState::Ep { .. } => "ep",
            PosteriorState::Laplace { .. } => "laplace",
        }
    }
}

impl ModelFile {
    pub fn new(
        kernel: KernelKind,
        layout: LayoutKind,
        dims: VolumeDims,
        n_classes: usize,
        classifiers: Vec<Classifier>,
        train_x: Vec<Vec<f64>>,
    ) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kernel,
            layout: layout_name(layout),
            dims: [dims.nx, dims.ny, dims.nz],
            n_classes,
            classifiers,
            train_x,
        }
    }

    pub fn volume_dims(&self) -> CliResult<VolumeDims> {
        let [nx, ny, nz] = self.dims;
        VolumeDims::new(nx, ny, nz).map_err(|e| CliError::data(e.to_string()))
    }

    pub fn spec(&self) -> CliResult<KernelSpec> {
        let kind = parse_layout(&self.layout).map_err(CliError::Data)?;
        let layout = SubspaceLayout::for_volume(self.volume_dims()?, kind)?;
        Ok(KernelSpec::new(self.kernel, layout)?)
    }

    fn check(&self) -> CliResult<()> {
        if self.format != FORMAT {
            return Err(CliError::data("not a gpmkl model file"));
        }
        if self.version != VERSION {
            return Err(CliError::data(format!("unsupported model version {}", self.version)));
        }
        let expected = if self.n_classes == 2 { 1 } else { self.n_classes };
        if self.n_classes < 2 || self.classifiers.len() != expected {
            return Err(CliError::data(format!(
                "{} classes need {expected} classifiers, file has {}",
                self.n_classes,
                self.classifiers.len()
            )));
        }
        Ok(())
    }

    /// Rebuilds every classifier's posterior from the stored state.
    pub fn posteriors(&self) -> CliResult<Vec<LatentPosterior>> {
        let spec = self.spec()?;
        self.classifiers
            .iter()
            .map(|c| {
                let hp = &c.hyperparameters;
                let post = match &c.posterior {
                    PosteriorState::Ep { tau, nu } => {
                        LatentPosterior::from_ep_sites(&self.train_x, &c.labels, &spec, hp, tau, nu)?
                    }
                    PosteriorState::Laplace { a } => {
                        LatentPosterior::from_laplace_mode(&self.train_x, &c.labels, &spec, hp, a)?
                    }
                };
                Ok(post)
            })
            .collect()
    }

    pub fn to_json(&self) -> CliResult<String> {
        serde_json::to_string(self).map_err(|e| CliError::data(e.to_string()))
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let model: Self = serde_json::from_str(text).map_err(|e| CliError::data(format!("model file: {e}")))?;
        model.check()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.to_json()?).map_err(io_context(path))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(io_context(path))?;
        Self::from_json(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}

/// Class prediction from rebuilt posteriors: the positive-class probability
/// for two classes, or the one-vs-all probabilities and their first argmax.
pub fn predict(model: &ModelFile, posteriors: &[LatentPosterior], x_star: &[f64]) -> CliResult<(usize, Vec<PredictiveClass>)> {
    let preds = posteriors
        .iter()
        .map(|p| gpmkl::predict_proba(p, x_star))
        .collect::<gpmkl::Result<Vec<_>>>()?;
    let label = if model.n_classes == 2 {
        if preds[0].label() > 0.0 {
            model.classifiers[0].positive_class
        } else {
            1 - model.classifiers[0].positive_class
        }
    } else {
        let mut best = 0;
        for (c, p) in preds.iter().enumerate() {
            if p.probability > preds[best].probability {
                best = c;
            }
        }
        model.classifiers[best].positive_class
    };
    Ok((label, preds))
}
