//! Exact nearest-neighbour queries and point-set distances.

use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Read-only kd-tree over a point set.
pub struct PointIndex {
    tree: ImmutableKdTree<f64, 3>,
    len: usize,
}

impl PointIndex {
    pub fn new(points: &[[f64; 3]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud("cannot index an empty point set".into()));
        }
        Ok(Self {
            tree: ImmutableKdTree::new_from_slice(points),
            len: points.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Euclidean distance to the closest indexed point.
    pub fn nearest_distance(&self, q: &[f64; 3]) -> f64 {
        self.tree.nearest_one::<SquaredEuclidean>(q).distance.sqrt()
    }

    /// Distances to the `n` closest indexed points, ascending.
    pub fn nearest_distances(&self, q: &[f64; 3], n: usize) -> Vec<f64> {
        let Some(n) = NonZero::new(n.min(self.len)) else {
            return Vec::new();
        };
        self.tree
            .nearest_n::<SquaredEuclidean>(q, n)
            .into_iter()
            .map(|nn| nn.distance.sqrt())
            .collect()
    }
}

fn directed(from: &[[f64; 3]], to: &PointIndex) -> Vec<f64> {
    from.par_iter().map(|p| to.nearest_distance(p)).collect()
}

fn check_nonempty(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud("distance between point sets needs both non-empty".into()));
    }
    Ok(())
}

/// `½ mean_a min_b ‖a − b‖ + ½ mean_b min_a ‖b − a‖`, unsquared.
pub fn chamfer_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    check_nonempty(a, b)?;
    let (ia, ib) = (PointIndex::new(a)?, PointIndex::new(b)?);
    let ab: f64 = directed(a, &ib).iter().sum::<f64>() / a.len() as f64;
    let ba: f64 = directed(b, &ia).iter().sum::<f64>() / b.len() as f64;
    Ok(0.5 * ab + 0.5 * ba)
}

/// Largest nearest-neighbour distance in either direction.
pub fn hausdorff_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    check_nonempty(a, b)?;
    let (ia, ib) = (PointIndex::new(a)?, PointIndex::new(b)?);
    let ab = directed(a, &ib).into_iter().fold(0.0, f64::max);
    let ba = directed(b, &ia).into_iter().fold(0.0, f64::max);
    Ok(ab.max(ba))
}
