//! Partitions of voxel volumes into feature bags and relevance scoring.
//!
//! A volume of `nx × ny × nz` voxels is flattened with `x` varying fastest,
//! then `y`, then `z`:
//!
//! ```text
//! index(x, y, z) = x + nx * (y + ny * z)
//! ```
//!
//! Every layout in this module is a partition of `0..D`: bags are non-empty,
//! pairwise disjoint, and together cover every voxel exactly once.

use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};

/// Voxel counts along each axis of a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VolumeDims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl VolumeDims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(GpError::InvalidArgument(format!(
                "volume dimensions must be positive, got {nx}x{ny}x{nz}"
            )));
        }
        Ok(Self { nx, ny, nz })
    }

    /// Flattened feature length `D = nx·ny·nz`.
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }
}

/// How a layout was constructed. Carried along so models and reports can
/// rebuild the same partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayoutKind {
    /// One bag holding every feature (plain single-kernel model).
    Single,
    /// One bag per axial (`z`) slice.
    Slices,
    /// Non-overlapping cubes of the given edge; boundary cubes are truncated.
    Cubes { edge: usize },
    /// Arbitrary user-supplied partition.
    Custom,
}

/// An ordered partition of feature indices `0..D` into `S` bags.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceLayout {
    bags: Vec<Vec<usize>>,
    kind: LayoutKind,
    dim: usize,
}

impl SubspaceLayout {
    /// Single bag over all `dim` features, in ascending order.
    pub fn single(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(GpError::Empty("feature vector"));
        }
        Ok(Self {
            bags: vec![(0..dim).collect()],
            kind: LayoutKind::Single,
            dim,
        })
    }

    /// Builds a layout from explicit bags, checking the partition property.
    pub fn from_bags(dim: usize, bags: Vec<Vec<usize>>) -> Result<Self> {
        let layout = Self {
            bags,
            kind: LayoutKind::Custom,
            dim,
        };
        layout.check_partition()?;
        Ok(layout)
    }

    /// Builds the layout described by `kind` for a volume of shape `dims`.
    pub fn for_volume(dims: VolumeDims, kind: LayoutKind) -> Result<Self> {
        match kind {
            LayoutKind::Single => Self::single(dims.len()),
            LayoutKind::Slices => Ok(slice_layout(dims)),
            LayoutKind::Cubes { edge } => cube_layout(dims, edge),
            LayoutKind::Custom => Err(GpError::InvalidArgument(
                "a custom layout cannot be rebuilt from volume dimensions".into(),
            )),
        }
    }

    pub fn num_bags(&self) -> usize {
        self.bags.len()
    }

    /// Feature length `D` the layout partitions.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> LayoutKind {
        self.kind
    }

    pub fn bags(&self) -> &[Vec<usize>] {
        &self.bags
    }

    pub fn bag(&self, s: usize) -> Result<&[usize]> {
        self.bags
            .get(s)
            .map(Vec::as_slice)
            .ok_or(GpError::IndexOutOfRange {
                index: s,
                len: self.bags.len(),
            })
    }

    /// Verifies that bags are non-empty, disjoint and cover `0..dim`.
    pub fn check_partition(&self) -> Result<()> {
        if self.bags.is_empty() {
            return Err(GpError::Empty("layout"));
        }
        let mut seen = vec![false; self.dim];
        let mut covered = 0usize;
        for (s, bag) in self.bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(GpError::InvalidArgument(format!("bag {s} is empty")));
            }
            for &i in bag {
                if i >= self.dim {
                    return Err(GpError::IndexOutOfRange {
                        index: i,
                        len: self.dim,
                    });
                }
                if seen[i] {
                    return Err(GpError::InvalidArgument(format!(
                        "feature {i} appears in more than one bag"
                    )));
                }
                seen[i] = true;
                covered += 1;
            }
        }
        if covered != self.dim {
            return Err(GpError::InvalidArgument(format!(
                "layout covers {covered} of {} features",
                self.dim
            )));
        }
        Ok(())
    }

    /// Upper bound on the number of basis kernels: the total hyperparameter
    /// count `S·h` must stay below the `D + 1` a per-dimension ARD model
    /// needs. With `h = 2` this is `S < (D + 1)/2`.
    pub fn check_parameter_budget(&self, params_per_kernel: usize) -> Result<()> {
        let total = self.num_bags() * params_per_kernel;
        if total < self.dim + 1 {
            Ok(())
        } else {
            Err(GpError::InvalidArgument(format!(
                "{} basis kernels with {params_per_kernel} parameters each exceed the \
                 budget of fewer than {} hyperparameters",
                self.num_bags(),
                self.dim + 1
            )))
        }
    }
}

/// One bag per axial slice; bag `z` holds the `nx·ny` voxels with that `z`.
pub fn slice_layout(dims: VolumeDims) -> SubspaceLayout {
    let plane = dims.nx * dims.ny;
    let bags = (0..dims.nz)
        .map(|z| (z * plane..(z + 1) * plane).collect())
        .collect();
    SubspaceLayout {
        bags,
        kind: LayoutKind::Slices,
        dim: dims.len(),
    }
}

/// Non-overlapping cubes of side `edge`, truncated at the volume boundary.
///
/// Produces `⌈nx/e⌉·⌈ny/e⌉·⌈nz/e⌉` bags, ordered with the cube `x` index
/// varying fastest. Voxels inside a bag are listed in ascending flat index.
pub fn cube_layout(dims: VolumeDims, edge: usize) -> Result<SubspaceLayout> {
    if edge == 0 {
        return Err(GpError::InvalidArgument("cube edge must be positive".into()));
    }
    let (cx, cy, cz) = (
        dims.nx.div_ceil(edge),
        dims.ny.div_ceil(edge),
        dims.nz.div_ceil(edge),
    );
    let mut bags = Vec::with_capacity(cx * cy * cz);
    for bz in 0..cz {
        for by in 0..cy {
            for bx in 0..cx {
                let xs = bx * edge..((bx + 1) * edge).min(dims.nx);
                let ys = by * edge..((by + 1) * edge).min(dims.ny);
                let zs = bz * edge..((bz + 1) * edge).min(dims.nz);
                let mut bag = Vec::with_capacity(xs.len() * ys.len() * zs.len());
                for z in zs {
                    for y in ys.clone() {
                        for x in xs.clone() {
                            bag.push(dims.index(x, y, z));
                        }
                    }
                }
                bags.push(bag);
            }
        }
    }
    Ok(SubspaceLayout {
        bags,
        kind: LayoutKind::Cubes { edge },
        dim: dims.len(),
    })
}

/// Values of `x` on bag `s`, in the bag's stored order.
pub fn extract_subvector(x: &[f64], layout: &SubspaceLayout, s: usize) -> Result<Vec<f64>> {
    if x.len() != layout.dim() {
        return Err(GpError::DimensionMismatch {
            expected: layout.dim(),
            got: x.len(),
        });
    }
    Ok(layout.bag(s)?.iter().map(|&i| x[i]).collect())
}

/// Accumulated per-fold relevance of each bag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    /// One score per bag, in `[0, n_folds]`.
    pub scores: Vec<f64>,
    /// Bag indices by descending score; ties keep ascending bag order.
    pub ranking: Vec<usize>,
    pub n_folds: usize,
}

/// Scores bags from the mixing weights learned in each fold.
///
/// Each fold's weights are divided by that fold's largest weight, so every
/// normalized weight is at most 1, and the normalized vectors are summed over
/// folds. A bag that carries the largest weight in every fold scores exactly
/// `n_folds`.
pub fn relevance_scores(per_fold_weights: &[Vec<f64>]) -> Result<RelevanceReport> {
    let first = per_fold_weights
        .first()
        .ok_or(GpError::Empty("fold weights"))?;
    let s = first.len();
    if s == 0 {
        return Err(GpError::Empty("mixing weights"));
    }
    let mut scores = vec![0.0; s];
    for (fold, weights) in per_fold_weights.iter().enumerate() {
        if weights.len() != s {
            return Err(GpError::DimensionMismatch {
                expected: s,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(GpError::NonFinite("mixing weights"));
        }
        if let Some(&w) = weights.iter().find(|&&w| w < 0.0) {
            return Err(GpError::InvalidArgument(format!(
                "negative mixing weight {w} in fold {fold}"
            )));
        }
        let max = weights.iter().copied().fold(0.0_f64, f64::max);
        if max <= 0.0 {
            return Err(GpError::DegenerateFold(fold));
        }
        for (acc, &w) in scores.iter_mut().zip(weights) {
            *acc += w / max;
        }
    }
    let mut ranking: Vec<usize> = (0..s).collect();
    // stable sort keeps ascending index among ties
    ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(RelevanceReport {
        scores,
        ranking,
        n_folds: per_fold_weights.len(),
    })
}
