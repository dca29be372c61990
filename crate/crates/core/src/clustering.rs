//! Density-based clustering and selection of the rebar cluster against a
//! reference patch taken near the pre-detected grasp position.

use crate::cloud::PointCloud;
use crate::kdtree::KdTree;
use crate::se3::{Pose, Vec3};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

/// Label of points that belong to no cluster.
pub const NOISE: i32 = -1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("cannot cluster an empty cloud")]
    EmptyCloud,
    #[error("invalid DBSCAN parameters: eps={eps}, min_pts={min_pts}")]
    InvalidParams { eps: f64, min_pts: usize },
    #[error("radius must be positive, got {0}")]
    InvalidRadius(f64),
    #[error("no scene point lies within {radius} of the grasp position")]
    EmptyReference { radius: f64 },
    #[error("labeling contains no clusters")]
    NoClusters,
    #[error("no cluster overlaps the reference cloud")]
    AllZeroCounts,
}

/// How eps-neighborhoods are enumerated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborSearch {
    #[default]
    KdTree,
    /// Quadratic scan; slow, kept for cross-checking the tree.
    BruteForce,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DbscanParams {
    /// Neighborhood radius (inclusive).
    pub eps: f64,
    /// Neighborhood size, counting the point itself, at which a point is core.
    pub min_pts: usize,
    #[serde(default)]
    pub search: NeighborSearch,
}

impl DbscanParams {
    pub fn new(eps: f64, min_pts: usize) -> Self {
        Self {
            eps,
            min_pts,
            search: NeighborSearch::KdTree,
        }
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        if !(self.eps > 0.0 && self.eps.is_finite()) || self.min_pts == 0 {
            return Err(ClusterError::InvalidParams {
                eps: self.eps,
                min_pts: self.min_pts,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterLabeling {
    /// Cluster id per point, or [`NOISE`].
    pub labels: Vec<i32>,
    pub n_clusters: usize,
    /// Core-point flag per point.
    pub core: Vec<bool>,
}

/// JSON summary of a labeling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelingSummary {
    pub cluster_sizes: Vec<usize>,
    pub n_noise: usize,
}

impl ClusterLabeling {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for &l in &self.labels {
            if l >= 0 {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }

    pub fn n_noise(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == cluster as i32)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn summary(&self) -> LabelingSummary {
        LabelingSummary {
            cluster_sizes: self.cluster_sizes(),
            n_noise: self.n_noise(),
        }
    }
}

fn neighborhoods(points: &[Vec3], params: &DbscanParams) -> Vec<Vec<usize>> {
    use rayon::prelude::*;
    match params.search {
        NeighborSearch::KdTree => {
            let tree = KdTree::new(points);
            points
                .par_iter()
                .map(|p| {
                    let mut out = Vec::new();
                    tree.within_radius_unsorted_into(p, params.eps, &mut out);
                    out
                })
                .collect()
        }
        NeighborSearch::BruteForce => {
            let e2 = params.eps * params.eps;
            points
                .par_iter()
                .map(|p| {
                    (0..points.len())
                        .filter(|&j| (points[j] - p).norm_squared() <= e2)
                        .collect()
                })
                .collect()
        }
    }
}

/// DBSCAN with inclusive neighborhoods.
///
/// Clusters are the connected components of core points under the
/// eps-neighbor relation, numbered by their lowest point index. A border point
/// joins the cluster of its nearest core neighbor (lowest index on exact
/// ties), so the partition does not depend on input order.
pub fn dbscan(cloud: &PointCloud, params: &DbscanParams) -> Result<ClusterLabeling, ClusterError> {
    params.validate()?;
    if cloud.is_empty() {
        return Err(ClusterError::EmptyCloud);
    }
    let pts = &cloud.points;
    let nbrs = neighborhoods(pts, params);
    let core: Vec<bool> = nbrs.iter().map(|n| n.len() >= params.min_pts).collect();

    let mut labels = vec![NOISE; pts.len()];
    let mut n_clusters = 0usize;
    let mut queue = VecDeque::new();
    for seed in 0..pts.len() {
        if !core[seed] || labels[seed] != NOISE {
            continue;
        }
        let id = n_clusters as i32;
        n_clusters += 1;
        labels[seed] = id;
        queue.push_back(seed);
        while let Some(i) = queue.pop_front() {
            for &j in &nbrs[i] {
                if core[j] && labels[j] == NOISE {
                    labels[j] = id;
                    queue.push_back(j);
                }
            }
        }
    }

    for i in 0..pts.len() {
        if core[i] {
            continue;
        }
        let nearest_core = nbrs[i].iter().copied().filter(|&j| core[j]).min_by(|&a, &b| {
            let da = (pts[a] - pts[i]).norm_squared();
            let db = (pts[b] - pts[i]).norm_squared();
            da.total_cmp(&db).then(a.cmp(&b))
        });
        if let Some(j) = nearest_core {
            labels[i] = labels[j];
        }
    }

    Ok(ClusterLabeling {
        labels,
        n_clusters,
        core,
    })
}

/// Grasp position implied by an end-effector pose: the point `standoff`
/// ahead along the tool's forward (+y) axis.
pub fn grasp_point(pose: &Pose, standoff: f64) -> Vec3 {
    pose.transform_point(&Vec3::new(0.0, standoff, 0.0))
}

/// Scene points within `radius` of the grasp position of `pose_prev`
/// (its translation when `standoff` is zero).
pub fn extract_reference_cloud(
    scene: &PointCloud,
    pose_prev: &Pose,
    standoff: f64,
    radius: f64,
) -> Result<PointCloud, ClusterError> {
    if !(radius > 0.0) {
        return Err(ClusterError::InvalidRadius(radius));
    }
    let center = grasp_point(pose_prev, standoff);
    let r2 = radius * radius;
    let idx: Vec<usize> = (0..scene.len())
        .filter(|&i| (scene.points[i] - center).norm_squared() <= r2)
        .collect();
    if idx.is_empty() {
        return Err(ClusterError::EmptyReference { radius });
    }
    Ok(scene.select(&idx))
}

/// Per cluster, the number of reference points that have at least one
/// cluster member within `search_radius`.
pub fn reference_overlap_counts(
    cloud: &PointCloud,
    labeling: &ClusterLabeling,
    reference: &PointCloud,
    search_radius: f64,
) -> Vec<usize> {
    let tree = KdTree::new(&cloud.points);
    let mut counts = vec![0usize; labeling.n_clusters];
    let mut seen = vec![usize::MAX; labeling.n_clusters];
    let mut buf = Vec::new();
    for (r, p) in reference.points.iter().enumerate() {
        tree.within_radius_into(p, search_radius, &mut buf);
        for &i in &buf {
            let l = labeling.labels[i];
            if l >= 0 && seen[l as usize] != r {
                seen[l as usize] = r;
                counts[l as usize] += 1;
            }
        }
    }
    counts
}

/// Cluster with the highest reference overlap; ties go to the lower id.
pub fn select_rebar_cluster(
    cloud: &PointCloud,
    labeling: &ClusterLabeling,
    reference: &PointCloud,
    search_radius: f64,
) -> Result<usize, ClusterError> {
    if labeling.n_clusters == 0 {
        return Err(ClusterError::NoClusters);
    }
    if !(search_radius > 0.0) {
        return Err(ClusterError::InvalidRadius(search_radius));
    }
    let counts = reference_overlap_counts(cloud, labeling, reference, search_radius);
    let (best, &count) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("at least one cluster");
    if count == 0 {
        return Err(ClusterError::AllZeroCounts);
    }
    Ok(best)
}
