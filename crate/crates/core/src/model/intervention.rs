//! Applying an [`InterventionSpec`] to an image embedding block.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::grid_neighbors;
use crate::seeds::derive_seed;

use super::{InterventionSpec, ModelError, Strategy};

/// What actually happened while applying a spec: positions that had to fall
/// back to the zero replacement.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InterventionReport {
    pub fallback_to_zero: BTreeSet<usize>,
}

/// Seeded uniform choice of a replacement source for `position` among the
/// non-selected entries. Shared with the scripted oracle so both backends
/// agree on what the random strategy samples.
pub fn random_source(spec_seed: u64, position: usize, candidates: &[usize]) -> Option<usize> {
    if candidates.is_empty() {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec_seed, position as u64));
    Some(candidates[rng.gen_range(0..candidates.len())])
}

/// First existing non-selected grid neighbor of `position`, in the
/// precedence order left, right, up, down.
pub fn neighbor_source(
    position: usize,
    grid_w: usize,
    grid_h: usize,
    selected: &BTreeSet<usize>,
) -> Option<usize> {
    grid_neighbors(position, grid_w, grid_h)
        .into_iter()
        .flatten()
        .find(|q| !selected.contains(q))
}

/// Replace the selected rows of an `N x width` image block per the spec.
///
/// Non-selected rows are bit-identical to the input; every replacement reads
/// from the original block, never from an already-replaced row.
pub fn apply_intervention(
    block: &Array2<f64>,
    spec: &InterventionSpec,
    grid_w: usize,
    grid_h: usize,
) -> Result<(Array2<f64>, InterventionReport), ModelError> {
    let n = block.nrows();
    if grid_w * grid_h != n {
        return Err(ModelError::InvalidIntervention(format!(
            "grid {grid_w}x{grid_h} does not match block of {n} rows"
        )));
    }
    spec.validate(n)?;

    let mut out = block.clone();
    let mut report = InterventionReport::default();
    let non_selected: Vec<usize> = (0..n).filter(|p| !spec.positions.contains(p)).collect();
    let mean: Option<Array1<f64>> = match spec.strategy {
        Strategy::Average => Some(block.mean_axis(Axis(0)).expect("N >= 1")),
        _ => None,
    };

    for &p in &spec.positions {
        match spec.strategy {
            Strategy::Zero => out.row_mut(p).fill(0.0),
            Strategy::Average => out.row_mut(p).assign(mean.as_ref().expect("computed")),
            Strategy::Random => match random_source(spec.seed, p, &non_selected) {
                Some(src) => {
                    let src_row = block.row(src).to_owned();
                    out.row_mut(p).assign(&src_row);
                }
                None => {
                    out.row_mut(p).fill(0.0);
                    report.fallback_to_zero.insert(p);
                }
            },
            Strategy::Neighbor => match neighbor_source(p, grid_w, grid_h, &spec.positions) {
                Some(src) => {
                    let src_row = block.row(src).to_owned();
                    out.row_mut(p).assign(&src_row);
                }
                None => {
                    out.row_mut(p).fill(0.0);
                    report.fallback_to_zero.insert(p);
                }
            },
        }
    }
    Ok((out, report))
}
