//! Rebar node extraction.
//!
//! Near a crossing of two bars, the directions from a point to its neighbors
//! fall along two orthogonal lines, so the absolute dot product of two such
//! directions is close to either 0 or 1. The orthogonal feature filter pairs
//! up the neighbor directions at random and keeps a point when at least half
//! of the pairs are near-perpendicular (`< r_res`) and at least a third are
//! near-parallel (`> p_res`). Surviving points are clustered once more to
//! split them per node.

use crate::cloud::PointCloud;
use crate::clustering::{dbscan, ClusterError, DbscanParams};
use crate::kdtree::KdTree;
use crate::se3::Vec3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NodeError {
    #[error("invalid orthogonal filter parameters: {0}")]
    InvalidFilter(String),
    #[error("crop radius must be positive, got {0}")]
    InvalidCropRadius(f64),
    #[error("no rebar nodes found")]
    NoNodesFound,
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrthoFilterParams {
    /// Neighborhood radius.
    pub r_eps: f64,
    /// Upper bound on |dot| for a near-perpendicular pair.
    pub r_res: f64,
    /// Lower bound on |dot| for a near-parallel pair.
    pub p_res: f64,
    /// Points with fewer neighbors are rejected outright.
    pub min_neighbors: usize,
    pub rng_seed: u64,
}

impl Default for OrthoFilterParams {
    fn default() -> Self {
        Self {
            r_eps: 0.04,
            r_res: 0.6,
            p_res: 0.62,
            min_neighbors: 8,
            rng_seed: 0,
        }
    }
}

impl OrthoFilterParams {
    pub fn validate(&self) -> Result<(), NodeError> {
        let bad = |m: &str| Err(NodeError::InvalidFilter(m.to_string()));
        if !(self.r_eps > 0.0 && self.r_eps.is_finite()) {
            return bad("r_eps must be positive");
        }
        if !(0.0 <= self.r_res && self.r_res < self.p_res && self.p_res <= 1.0) {
            return bad("need 0 <= r_res < p_res <= 1");
        }
        if self.min_neighbors < 4 {
            return bad("min_neighbors must be at least 4");
        }
        Ok(())
    }
}

/// Per-point RNG stream, independent of evaluation order.
fn point_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index as u64)
}

/// Pair statistics of one point: `(pairs, near_perpendicular, near_parallel)`.
pub(crate) fn pair_counts(
    center: &Vec3,
    neighbors: &[Vec3],
    params: &OrthoFilterParams,
    rng: &mut ChaCha8Rng,
) -> (usize, usize, usize) {
    let mut dirs: Vec<Vec3> = neighbors
        .iter()
        .filter_map(|n| {
            let v = n - center;
            let len = v.norm();
            (len > 0.0).then(|| v / len)
        })
        .collect();
    dirs.shuffle(rng);
    let half = dirs.len() / 2;
    let (a, b) = dirs.split_at(half);
    let mut perp = 0;
    let mut par = 0;
    for (u, v) in a.iter().zip(b) {
        let d = u.dot(v).abs();
        if d < params.r_res {
            perp += 1;
        }
        if d > params.p_res {
            par += 1;
        }
    }
    (half, perp, par)
}

fn passes(pairs: usize, perp: usize, par: usize) -> bool {
    pairs > 0 && 2 * perp >= pairs && 3 * par >= pairs
}

/// Orthogonal feature mask, one flag per point.
///
/// Each point draws its own RNG stream from `rng_seed ^ index`, so the
/// parallel evaluation is identical to a sequential one. Neighbor lists are
/// visited in index order, which makes the mask invariant under rigid
/// motions of the cloud.
pub fn orthogonal_feature_mask(cloud: &PointCloud, params: &OrthoFilterParams) -> Result<Vec<bool>, NodeError> {
    params.validate()?;
    let tree = KdTree::new(&cloud.points);
    let pts = &cloud.points;
    Ok((0..pts.len())
        .into_par_iter()
        .map_init(Vec::new, |buf, i| {
            tree.within_radius_into(&pts[i], params.r_eps, buf);
            let neighbors: Vec<Vec3> = buf
                .iter()
                .filter(|&&j| j != i && pts[j] != pts[i])
                .map(|&j| pts[j])
                .collect();
            if neighbors.len() < params.min_neighbors {
                return false;
            }
            let mut rng = point_rng(params.rng_seed, i);
            let (pairs, perp, par) = pair_counts(&pts[i], &neighbors, params, &mut rng);
            passes(pairs, perp, par)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RebarNode {
    /// Mean of `members`.
    pub centroid: Vec3,
    /// Filtered points assigned to this node.
    pub members: PointCloud,
    /// Points of the input cloud within the crop radius of `centroid`.
    pub crop: PointCloud,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeSet {
    pub nodes: Vec<RebarNode>,
}

impl NodeSet {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn centroids(&self) -> Vec<Vec3> {
        self.nodes.iter().map(|n| n.centroid).collect()
    }

    pub fn crops(&self) -> Vec<PointCloud> {
        self.nodes.iter().map(|n| n.crop.clone()).collect()
    }
}

/// Filter, split the survivors per node, and crop each node from `cloud`.
pub fn extract_nodes(
    cloud: &PointCloud,
    filter: &OrthoFilterParams,
    split: &DbscanParams,
    crop_radius: f64,
) -> Result<NodeSet, NodeError> {
    if !(crop_radius > 0.0) {
        return Err(NodeError::InvalidCropRadius(crop_radius));
    }
    split.validate()?;
    let mask = orthogonal_feature_mask(cloud, filter)?;
    extract_nodes_masked(cloud, &mask, split, crop_radius)
}

/// [`extract_nodes`] with a precomputed orthogonal feature mask.
pub fn extract_nodes_masked(
    cloud: &PointCloud,
    mask: &[bool],
    split: &DbscanParams,
    crop_radius: f64,
) -> Result<NodeSet, NodeError> {
    if !(crop_radius > 0.0) {
        return Err(NodeError::InvalidCropRadius(crop_radius));
    }
    assert_eq!(mask.len(), cloud.len(), "one mask flag per point");
    split.validate()?;
    let kept: Vec<usize> = (0..cloud.len()).filter(|&i| mask[i]).collect();
    if kept.is_empty() {
        return Err(NodeError::NoNodesFound);
    }
    let filtered = cloud.select(&kept);
    let labeling = dbscan(&filtered, split)?;
    if labeling.n_clusters == 0 {
        return Err(NodeError::NoNodesFound);
    }

    let tree = KdTree::new(&cloud.points);
    let nodes: Vec<RebarNode> = (0..labeling.n_clusters)
        .filter_map(|c| {
            let members = filtered.select(&labeling.members(c));
            let centroid = members.centroid()?;
            let crop = cloud.select(&tree.within_radius(&centroid, crop_radius));
            (!crop.is_empty()).then_some(RebarNode {
                centroid,
                members,
                crop,
            })
        })
        .collect();
    if nodes.is_empty() {
        return Err(NodeError::NoNodesFound);
    }
    Ok(NodeSet { nodes })
}
