#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rebar_core::se3::{exp_se3, Pose, Twist, Vec3};
use rebar_core::{ClusterLabeling, PointCloud};
use std::collections::HashMap;

/// Textbook DBSCAN over a full distance scan. Border points take the label
/// of their closest core neighbor.
pub struct OracleLabels {
    pub core: Vec<bool>,
    pub labels: Vec<i64>,
}

pub fn oracle_dbscan(points: &[Vec3], eps: f64, min_pts: usize) -> OracleLabels {
    let n = points.len();
    let near = |i: usize, j: usize| (points[i] - points[j]).norm() <= eps;
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts)
        .collect();
    let mut labels = vec![-1i64; n];
    let mut next = 0;
    for s in 0..n {
        if !core[s] || labels[s] >= 0 {
            continue;
        }
        let mut stack = vec![s];
        labels[s] = next;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if core[j] && labels[j] < 0 && near(i, j) {
                    labels[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for j in 0..n {
            if core[j] && near(i, j) {
                let d = (points[i] - points[j]).norm_squared();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
        }
        if let Some((_, j)) = best {
            labels[i] = labels[j];
        }
    }
    OracleLabels { core, labels }
}

/// True when the two labelings induce the same partition and the same noise
/// set.
pub fn same_partition(a: &[i64], b: &[i64]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut fwd: HashMap<i64, i64> = HashMap::new();
    let mut back: HashMap<i64, i64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if (x < 0) != (y < 0) {
            return false;
        }
        if x < 0 {
            continue;
        }
        if *fwd.entry(x).or_insert(y) != y || *back.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

pub fn labels_of(l: &ClusterLabeling) -> Vec<i64> {
    l.labels.iter().map(|&x| x as i64).collect()
}

pub fn random_cloud(rng: &mut impl Rng, n: usize, extent: f64) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| Vec3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()) * extent)
            .collect(),
    )
}

/// Gaussian blobs so that random instances have several clusters, borders
/// and noise.
pub fn blobby_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
    let centers: Vec<Vec3> = (0..rng.random_range(1..5))
        .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
        .collect();
    let pts = (0..n)
        .map(|i| {
            if i % 5 == 0 {
                Vec3::new(rng.random(), rng.random(), rng.random())
            } else {
                let c = centers[i % centers.len()];
                c + Vec3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ) * 0.2
            }
        })
        .collect();
    PointCloud::new(pts)
}

pub fn random_pose(rng: &mut impl Rng, max_angle: f64, max_trans: f64) -> Pose {
    let axis = loop {
        let v = Vec3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        if v.norm() > 1e-3 {
            break v.normalize();
        }
    };
    let angle = rng.random::<f64>() * max_angle;
    let t = Vec3::new(
        rng.random::<f64>() - 0.5,
        rng.random::<f64>() - 0.5,
        rng.random::<f64>() - 0.5,
    ) * 2.0
        * max_trans;
    exp_se3(&Twist::new(axis * angle, Vec3::zeros())) * Pose::from_translation(t)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
