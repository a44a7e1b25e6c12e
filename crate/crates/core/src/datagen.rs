//! Synthetic volumes with class-dependent signal planted in chosen bags.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::subspaces::{LayoutKind, SubspaceLayout, VolumeDims};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub dims: VolumeDims,
    pub n_per_class: usize,
    /// 2 or 3.
    pub n_classes: usize,
    /// `Slices` or `Cubes { edge }`.
    pub layout: LayoutKind,
    pub informative_bags: Vec<usize>,
    /// Mean shift of the last class on every informative voxel.
    pub effect_size: f64,
    pub noise_std: f64,
    pub seed: u64,
}

/// Labelled volumes, each flattened x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: VolumeDims,
    pub layout: LayoutKind,
    pub x: Vec<Vec<f64>>,
    /// Class index in `0..n_classes`.
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Bags carrying signal, if known.
    pub ground_truth_bags: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn subspace_layout(&self) -> Result<SubspaceLayout> {
        SubspaceLayout::for_volume(self.dims, self.layout)
    }

    /// Labels as `±1`, class 1 being positive. Only for two-class data.
    pub fn binary_labels(&self) -> Result<Vec<f64>> {
        if self.n_classes != 2 {
            return Err(GpError::InvalidArgument(format!(
                "binary labels need 2 classes, dataset has {}",
                self.n_classes
            )));
        }
        Ok(self.labels.iter().map(|&c| if c == 1 { 1.0 } else { -1.0 }).collect())
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<SubspaceLayout> {
        if !(2..=3).contains(&self.n_classes) {
            return Err(GpError::InvalidArgument(format!(
                "n_classes must be 2 or 3, got {}",
                self.n_classes
            )));
        }
        if self.n_per_class == 0 {
            return Err(GpError::InvalidArgument("n_per_class must be positive".into()));
        }
        if !(self.effect_size >= 0.0) || !self.effect_size.is_finite() {
            return Err(GpError::InvalidArgument("effect_size must be finite and non-negative".into()));
        }
        if !(self.noise_std > 0.0) || !self.noise_std.is_finite() {
            return Err(GpError::InvalidArgument("noise_std must be finite and positive".into()));
        }
        if !matches!(self.layout, LayoutKind::Slices | LayoutKind::Cubes { .. }) {
            return Err(GpError::InvalidArgument("layout must be slices or cubes".into()));
        }
        let layout = SubspaceLayout::for_volume(self.dims, self.layout)?;
        for &b in &self.informative_bags {
            if b >= layout.num_bags() {
                return Err(GpError::IndexOutOfRange {
                    index: b,
                    len: layout.num_bags(),
                });
            }
        }
        Ok(layout)
    }
}

/// Background voxels are `N(0, noise_std²)`; voxels in informative bags of
/// an instance of class `c` are shifted by `c·effect_size/(n_classes-1)`.
/// Instance `i` belongs to class `i % n_classes`. Values are rounded to
/// `f32` so they survive the on-disk format unchanged.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    let layout = cfg.validate()?;
    let d = cfg.dims.len();
    let mut informative = vec![false; d];
    for &b in &cfg.informative_bags {
        for &i in layout.bag(b)? {
            informative[i] = true;
        }
    }
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| GpError::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_per_class * cfg.n_classes;
    let mut x = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % cfg.n_classes;
        let shift = c as f64 * cfg.effect_size / (cfg.n_classes - 1) as f64;
        let row = (0..d)
            .map(|v| {
                let base = noise.sample(&mut rng);
                let value = if informative[v] { base + shift } else { base };
                value as f32 as f64
            })
            .collect();
        x.push(row);
        labels.push(c);
    }
    let mut ground_truth_bags = cfg.informative_bags.clone();
    ground_truth_bags.sort_unstable();
    ground_truth_bags.dedup();
    Ok(Dataset {
        dims: cfg.dims,
        layout: cfg.layout,
        x,
        labels,
        n_classes: cfg.n_classes,
        ground_truth_bags,
    })
}
