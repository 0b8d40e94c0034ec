//! Synthetic image grids: patch indexing, object boxes, adjacency.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::ClassId;

/// Set of patch indices forming an object's region.
pub type PatchSet = BTreeSet<usize>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("grid must contain at least one patch")]
    EmptyGrid,
    #[error("patch {patch} out of range for {n} image tokens")]
    PatchOutOfRange { patch: usize, n: usize },
    #[error("object box for class {0} is empty")]
    EmptyBox(ClassId),
}

/// One object's ground-truth region on the grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub class: ClassId,
    pub patches: PatchSet,
}

/// Patch grid with ground-truth object boxes. Boxes may overlap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub grid_w: usize,
    pub grid_h: usize,
    pub objects: Vec<PlacedObject>,
}

impl ImageSpec {
    pub fn new(grid_w: usize, grid_h: usize, objects: Vec<PlacedObject>) -> Result<Self, ImageError> {
        let spec = ImageSpec {
            grid_w,
            grid_h,
            objects,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Image-token count `N = grid_w * grid_h`.
    pub fn n_patches(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        if self.grid_w == 0 || self.grid_h == 0 {
            return Err(ImageError::EmptyGrid);
        }
        let n = self.n_patches();
        for obj in &self.objects {
            if obj.patches.is_empty() {
                return Err(ImageError::EmptyBox(obj.class));
            }
            for &p in &obj.patches {
                if p >= n {
                    return Err(ImageError::PatchOutOfRange { patch: p, n });
                }
            }
        }
        Ok(())
    }

    pub fn object_box(&self, class: ClassId) -> Option<&PatchSet> {
        self.objects
            .iter()
            .find(|o| o.class == class)
            .map(|o| &o.patches)
    }

    pub fn contains(&self, class: ClassId, patch: usize) -> bool {
        self.object_box(class).is_some_and(|b| b.contains(&patch))
    }
}

/// Grid neighbors of a patch in precedence order: left, right, up, down.
/// `None` where the patch sits on the corresponding edge.
pub fn grid_neighbors(patch: usize, grid_w: usize, grid_h: usize) -> [Option<usize>; 4] {
    let (x, y) = (patch % grid_w, patch / grid_w);
    [
        (x > 0).then(|| patch - 1),
        (x + 1 < grid_w).then(|| patch + 1),
        (y > 0).then(|| patch - grid_w),
        (y + 1 < grid_h).then(|| patch + grid_w),
    ]
}

/// All patches of an axis-aligned rectangle with top-left corner `(x, y)`.
pub fn rect_patches(x: usize, y: usize, w: usize, h: usize, grid_w: usize) -> PatchSet {
    let mut set = PatchSet::new();
    for dy in 0..h {
        for dx in 0..w {
            set.insert((y + dy) * grid_w + (x + dx));
        }
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn membership_is_stable() {
        let spec = ImageSpec::new(
            2,
            2,
            vec![PlacedObject {
                class: ClassId(0),
                patches: [0, 1].into_iter().collect(),
            }],
        )
        .unwrap();
        assert!(spec.contains(ClassId(0), 0));
        assert!(!spec.contains(ClassId(0), 2));
        assert!(!spec.contains(ClassId(1), 0));
    }

    #[test]
    fn out_of_range_box_rejected() {
        let err = ImageSpec::new(
            2,
            2,
            vec![PlacedObject {
                class: ClassId(0),
                patches: [4].into_iter().collect(),
            }],
        )
        .unwrap_err();
        assert_eq!(err, ImageError::PatchOutOfRange { patch: 4, n: 4 });
    }

    #[test]
    fn neighbor_precedence() {
        // 3x3 grid, center patch 4: left 3, right 5, up 1, down 7.
        assert_eq!(
            grid_neighbors(4, 3, 3),
            [Some(3), Some(5), Some(1), Some(7)]
        );
        // Top-left corner: no left, no up.
        assert_eq!(grid_neighbors(0, 3, 3), [None, Some(1), None, Some(3)]);
    }

    #[test]
    fn rect_covers_expected_patches() {
        let set = rect_patches(1, 1, 2, 2, 4);
        assert_eq!(set, [5, 6, 9, 10].into_iter().collect());
    }
}
