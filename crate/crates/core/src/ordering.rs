//! Node ordering: principal axes of the rebar cloud, a coordinate frame built
//! from them, and a lexicographic ranking of node centroids in that frame.
//!
//! Frame rules: `z` is the principal direction closest to the world up
//! vector, `y` the remaining direction closest to the line from the
//! pre-detected end-effector position to the rebar mean, `x = y × z`.
//!
//! A cross of two equal bars, or a square mesh, has two equal in-plane
//! variances, and the eigenvectors of that pair are arbitrary. Eigenvalues
//! whose relative gap is below `isotropy_tol` are therefore grouped into one
//! eigenspace, and a reference direction is projected into the eigenspace
//! instead of snapping to an arbitrary eigenvector. With `isotropy_tol = 0`
//! the rules reduce to picking single eigenvectors.

use crate::cloud::PointCloud;
use crate::nodes::NodeSet;
use crate::se3::{Pose, Vec3};
use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative eigenvalue gap under which `PcaResult::degenerate` is set.
pub const DEGENERACY_TOL: f64 = 1e-9;
/// Alignment scores closer than this are treated as a tie.
pub const AXIS_TIE_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrderingError {
    #[error("PCA needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("cannot choose the {axis} axis: candidates are tied")]
    AmbiguousAxis { axis: char },
    #[error("reference direction is zero")]
    ZeroReference,
    #[error("all {0} crops are degenerate")]
    AllCropsDegenerate(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    pub mean: Vec3,
    /// Unit eigenvectors, ordered like `eigenvalues`.
    pub axes: [Vec3; 3],
    /// Descending.
    pub eigenvalues: [f64; 3],
    /// Two eigenvalues agree within [`DEGENERACY_TOL`] (relative).
    pub degenerate: bool,
}

impl PcaResult {
    pub fn covariance(&self) -> Matrix3<f64> {
        (0..3).fold(Matrix3::zeros(), |acc, i| {
            acc + self.eigenvalues[i] * self.axes[i] * self.axes[i].transpose()
        })
    }
}

/// Flip `v` so its largest-magnitude component is positive.
fn canonical_sign(v: Vec3) -> Vec3 {
    if v[v.iamax()] < 0.0 {
        -v
    } else {
        v
    }
}

pub fn covariance(points: &[Vec3], mean: &Vec3) -> Matrix3<f64> {
    let n = points.len() as f64;
    points.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p - mean;
        acc + d * d.transpose()
    }) / n
}

/// Mean, population covariance, and its eigendecomposition.
pub fn pca(cloud: &PointCloud) -> Result<PcaResult, OrderingError> {
    if cloud.len() < 4 {
        return Err(OrderingError::TooFewPoints(cloud.len()));
    }
    let mean = cloud.centroid().expect("non-empty");
    let c = covariance(&cloud.points, &mean);
    let eig = SymmetricEigen::new(c);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = order.map(|i| eig.eigenvalues[i].max(0.0));
    let axes = order.map(|i| canonical_sign(eig.eigenvectors.column(i).into_owned().normalize()));
    let scale = eigenvalues[0].max(f64::MIN_POSITIVE);
    let degenerate = (0..2).any(|i| (eigenvalues[i] - eigenvalues[i + 1]) <= DEGENERACY_TOL * scale);
    Ok(PcaResult {
        mean,
        axes,
        eigenvalues,
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub origin: Vec3,
    pub x: Vec3,
    pub y: Vec3,
    pub z: Vec3,
}

impl Frame {
    pub fn world() -> Self {
        Self {
            origin: Vec3::zeros(),
            x: Vec3::x(),
            y: Vec3::y(),
            z: Vec3::z(),
        }
    }

    /// Coordinates of `p` in this frame.
    pub fn project(&self, p: &Vec3) -> Vec3 {
        let d = p - self.origin;
        Vec3::new(d.dot(&self.x), d.dot(&self.y), d.dot(&self.z))
    }

    /// Pose mapping frame coordinates to world coordinates.
    pub fn to_pose(&self) -> Pose {
        Pose::new(crate::se3::rotation_from_axes(&self.x, &self.y, &self.z), self.origin)
    }

    /// Builds a right-handed frame from approximate `z` and `y`
    /// (z kept, y orthogonalized, `x = y × z`).
    pub fn orthonormalized(origin: Vec3, y: Vec3, z: Vec3) -> Self {
        let z = z.normalize();
        let y = (y - y.dot(&z) * z).normalize();
        let x = y.cross(&z);
        Self { origin, x, y, z }
    }
}

/// Groups of indices into the descending eigenvalues whose adjacent relative
/// gaps are below `tol`.
fn eigen_groups(eigenvalues: &[f64; 3], tol: f64) -> Vec<Vec<usize>> {
    let mut groups = vec![vec![0]];
    for i in 1..3 {
        let hi = eigenvalues[i - 1];
        let gap = hi - eigenvalues[i];
        let tied = hi > 0.0 && gap < tol * hi;
        if tied {
            groups.last_mut().unwrap().push(i);
        } else {
            groups.push(vec![i]);
        }
    }
    groups
}

/// Projection of `dir` onto the span of the orthonormal `basis`.
fn project_onto(basis: &[Vec3], dir: &Vec3) -> Vec3 {
    basis.iter().fold(Vec3::zeros(), |acc, b| acc + b.dot(dir) * b)
}

/// Picks the subspace with the largest projection of `dir` and returns the
/// normalized projection. The best score must beat the runner-up by more
/// than [`AXIS_TIE_TOL`].
fn best_direction(subspaces: &[Vec<Vec3>], dir: &Vec3, axis: char) -> Result<Vec3, OrderingError> {
    let mut scored: Vec<(f64, Vec3)> = subspaces
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let p = project_onto(s, dir);
            (p.norm(), p)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (best, proj) = scored[0];
    if best < AXIS_TIE_TOL || (scored.len() > 1 && best - scored[1].0 <= AXIS_TIE_TOL) {
        return Err(OrderingError::AmbiguousAxis { axis });
    }
    Ok(proj / best)
}

/// Frame from principal axes.
///
/// `z` is the principal direction closest to `up`, signed toward it; `y` the
/// remaining direction closest to `cloud_mean - pose_prev.translation`,
/// signed toward it; `x = y × z`. The origin is `cloud_mean`.
pub fn build_frame(
    pca: &PcaResult,
    pose_prev: &Pose,
    cloud_mean: Vec3,
    up: Vec3,
    isotropy_tol: f64,
) -> Result<Frame, OrderingError> {
    let up = up.try_normalize(0.0).ok_or(OrderingError::ZeroReference)?;
    let toward = (cloud_mean - pose_prev.translation)
        .try_normalize(0.0)
        .ok_or(OrderingError::ZeroReference)?;
    let groups = eigen_groups(&pca.eigenvalues, isotropy_tol);
    let spaces: Vec<Vec<Vec3>> = groups
        .iter()
        .map(|g| g.iter().map(|&i| pca.axes[i]).collect())
        .collect();

    let z = best_direction(&spaces, &up, 'z')?;

    // Remove z from whichever eigenspace it came from.
    let reduced: Vec<Vec<Vec3>> = spaces
        .iter()
        .map(|basis| {
            let mut rest = Vec::new();
            for b in basis {
                let r = b - b.dot(&z) * z;
                let r = rest.iter().fold(r, |acc: Vec3, q: &Vec3| acc - acc.dot(q) * q);
                if r.norm() > 1e-6 {
                    rest.push(r.normalize());
                }
            }
            rest
        })
        .collect();
    let y = best_direction(&reduced, &toward, 'y')?;
    Ok(Frame::orthonormalized(cloud_mean, y, z))
}

/// Averages per-crop frames into one.
///
/// Each crop contributes a frame from its own principal axes; the `y`
/// reference for every crop is the direction from `pose_prev` to the mean of
/// all crop means. Crops that are too small or whose axes are ambiguous are
/// skipped. Axis vectors are averaged and re-orthonormalized in z, y, x
/// order; the origin is the mean of the crop means.
pub fn refine_frame(
    crops: &[PointCloud],
    pose_prev: &Pose,
    up: Vec3,
    isotropy_tol: f64,
) -> Result<Frame, OrderingError> {
    let means: Vec<Vec3> = crops.iter().filter_map(|c| c.centroid()).collect();
    if means.is_empty() {
        return Err(OrderingError::AllCropsDegenerate(crops.len()));
    }
    let origin = means.iter().sum::<Vec3>() / means.len() as f64;
    // x is rebuilt from the averaged y and z
    let (mut sy, mut sz) = (Vec3::zeros(), Vec3::zeros());
    let mut used = 0;
    for crop in crops {
        let Ok(p) = pca(crop) else { continue };
        let Ok(f) = build_frame(&p, pose_prev, origin, up, isotropy_tol) else {
            continue;
        };
        sy += f.y;
        sz += f.z;
        used += 1;
    }
    if used == 0 {
        return Err(OrderingError::AllCropsDegenerate(crops.len()));
    }
    Ok(Frame::orthonormalized(origin, sy, sz))
}

/// Rank of each value after merging sorted neighbors closer than `tol`.
fn tolerance_levels(values: &[f64], tol: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut levels = vec![0; values.len()];
    let mut level = 0;
    for w in 0..idx.len() {
        if w > 0 && values[idx[w]] - values[idx[w - 1]] > tol {
            level += 1;
        }
        levels[idx[w]] = level;
    }
    levels
}

/// Sorting key order: descending y, then ascending z, then ascending x.
///
/// Each coordinate is first quantized into levels: sorted values closer
/// than `tol` to their neighbor share a level, so nodes on one row compare
/// equal despite small coordinate noise. The sort is stable.
pub fn lexicographic_order(coords: &[Vec3], tol: f64) -> Vec<usize> {
    let neg_y: Vec<f64> = coords.iter().map(|c| -c.y).collect();
    let z: Vec<f64> = coords.iter().map(|c| c.z).collect();
    let x: Vec<f64> = coords.iter().map(|c| c.x).collect();
    let (ly, lz, lx) = (
        tolerance_levels(&neg_y, tol),
        tolerance_levels(&z, tol),
        tolerance_levels(&x, tol),
    );
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by_key(|&i| (ly[i], lz[i], lx[i]));
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderedNodes {
    pub nodes: NodeSet,
    /// `order[k]` is the index into `nodes` of the k-th node to tie.
    pub order: Vec<usize>,
    pub frame: Frame,
    /// Centroids in frame coordinates, indexed like `nodes`.
    pub frame_coords: Vec<Vec3>,
}

/// JSON export layout of [`OrderedNodes`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrderedNodesJson {
    pub frame: FrameJson,
    pub order: Vec<usize>,
    pub centroids_frame_coords: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameJson {
    pub origin: [f64; 3],
    pub x: [f64; 3],
    pub y: [f64; 3],
    pub z: [f64; 3],
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl From<&Frame> for FrameJson {
    fn from(f: &Frame) -> Self {
        Self {
            origin: arr(&f.origin),
            x: arr(&f.x),
            y: arr(&f.y),
            z: arr(&f.z),
        }
    }
}

impl OrderedNodes {
    pub fn to_json(&self) -> OrderedNodesJson {
        OrderedNodesJson {
            frame: (&self.frame).into(),
            order: self.order.clone(),
            centroids_frame_coords: self.frame_coords.iter().map(arr).collect(),
        }
    }

    /// Nodes in tying order.
    pub fn ordered(&self) -> impl Iterator<Item = &crate::nodes::RebarNode> {
        self.order.iter().map(|&i| &self.nodes.nodes[i])
    }
}

pub fn order_nodes(nodes: NodeSet, frame: &Frame, tol: f64) -> OrderedNodes {
    let frame_coords: Vec<Vec3> = nodes.nodes.iter().map(|n| frame.project(&n.centroid)).collect();
    let order = lexicographic_order(&frame_coords, tol);
    OrderedNodes {
        nodes,
        order,
        frame: *frame,
        frame_coords,
    }
}
