//! Pose success rate, mean pose error, node detection rate and threshold
//! sweeps.

use crate::se3::{GeometryError, Pose, PoseMetric, Vec3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub gamma: f64,
    /// Success threshold on the pose distance.
    pub t_g: f64,
    /// Largest distance at which a detection counts for a true node.
    pub match_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            t_g: 0.1,
            match_radius: 0.025,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.gamma >= 0.0) || !(self.t_g > 0.0) || !(self.match_radius > 0.0) {
            return Err(EvalError::InvalidConfig(
                "need gamma >= 0, t_g > 0 and match_radius > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub n_success: usize,
    /// Poses in this demo.
    pub l: usize,
    pub distances: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r_s: f64,
    pub e_r: f64,
    pub per_demo: Vec<DemoReport>,
}

fn check_shapes(preds: &[Vec<Pose>], truths: &[Vec<Pose>]) -> Result<(), EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} predicted demos vs {} ground-truth demos",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(EvalError::ShapeMismatch("no demos".into()));
    }
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        if p.len() != t.len() || t.is_empty() {
            return Err(EvalError::ShapeMismatch(format!(
                "demo {i}: {} predictions vs {} truths",
                p.len(),
                t.len()
            )));
        }
    }
    Ok(())
}

/// Pose distances per demo.
pub fn pose_distances(preds: &[Vec<Pose>], truths: &[Vec<Pose>], gamma: f64) -> Result<Vec<Vec<f64>>, EvalError> {
    check_shapes(preds, truths)?;
    let metric = PoseMetric::new(gamma)?;
    Ok(preds
        .iter()
        .zip(truths)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| metric.distance(a, b)).collect())
        .collect())
}

fn rate_from(dists: &[Vec<f64>], t_g: f64) -> f64 {
    let n = dists.len() as f64;
    dists
        .iter()
        .map(|d| d.iter().filter(|&&x| x < t_g).count() as f64 / d.len() as f64)
        .sum::<f64>()
        / n
}

/// Mean over demos of the fraction of poses with `D_g < t_g`.
pub fn success_rate(preds: &[Vec<Pose>], truths: &[Vec<Pose>], config: &EvalConfig) -> Result<f64, EvalError> {
    config.validate()?;
    Ok(rate_from(&pose_distances(preds, truths, config.gamma)?, config.t_g))
}

/// Mean over demos of the mean pose distance.
pub fn prediction_error(preds: &[Vec<Pose>], truths: &[Vec<Pose>], gamma: f64) -> Result<f64, EvalError> {
    let d = pose_distances(preds, truths, gamma)?;
    let n = d.len() as f64;
    Ok(d.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).sum::<f64>() / n)
}

pub fn evaluate(preds: &[Vec<Pose>], truths: &[Vec<Pose>], config: &EvalConfig) -> Result<EvalReport, EvalError> {
    config.validate()?;
    let d = pose_distances(preds, truths, config.gamma)?;
    let per_demo = d
        .iter()
        .map(|v| DemoReport {
            n_success: v.iter().filter(|&&x| x < config.t_g).count(),
            l: v.len(),
            distances: v.clone(),
        })
        .collect();
    let n = d.len() as f64;
    Ok(EvalReport {
        r_s: rate_from(&d, config.t_g),
        e_r: d.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).sum::<f64>() / n,
        per_demo,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub rate: f64,
    pub matched: usize,
    /// Set when either input list is empty.
    pub empty_input: bool,
    /// For each true node, the matched detection index.
    pub assignment: Vec<Option<usize>>,
}

/// One-to-one greedy matching of detections to true nodes by ascending
/// distance, up to `match_radius`. The rate is matched truths over all
/// truths.
pub fn node_detection_rate(detected: &[Vec3], truth_nodes: &[Vec3], match_radius: f64) -> DetectionResult {
    let mut assignment = vec![None; truth_nodes.len()];
    if detected.is_empty() || truth_nodes.is_empty() {
        return DetectionResult {
            rate: 0.0,
            matched: 0,
            empty_input: true,
            assignment,
        };
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (ti, t) in truth_nodes.iter().enumerate() {
        for (di, d) in detected.iter().enumerate() {
            let dist = (t - d).norm();
            if dist <= match_radius {
                pairs.push((dist, ti, di));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used = vec![false; detected.len()];
    let mut matched = 0;
    for (_, ti, di) in pairs {
        if assignment[ti].is_none() && !used[di] {
            assignment[ti] = Some(di);
            used[di] = true;
            matched += 1;
        }
    }
    DetectionResult {
        rate: matched as f64 / truth_nodes.len() as f64,
        matched,
        empty_input: false,
        assignment,
    }
}

/// Predicted and true poses of the nodes that were detected, in truth order.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchedPoses {
    pub preds: Vec<Pose>,
    pub truths: Vec<Pose>,
    /// True nodes with no detection inside the match radius.
    pub unmatched: usize,
}

/// Pairs each predicted pose with the true pose of the node its detection
/// was matched to. `poses[k]` belongs to `detected[k]`, `truth_poses[i]` to
/// `truth_nodes[i]`.
pub fn match_poses(
    detected: &[Vec3],
    poses: &[Pose],
    truth_nodes: &[Vec3],
    truth_poses: &[Pose],
    match_radius: f64,
) -> Result<MatchedPoses, EvalError> {
    if detected.len() != poses.len() || truth_nodes.len() != truth_poses.len() {
        return Err(EvalError::ShapeMismatch("every node needs exactly one pose".into()));
    }
    let det = node_detection_rate(detected, truth_nodes, match_radius);
    let mut out = MatchedPoses {
        preds: Vec::new(),
        truths: Vec::new(),
        unmatched: 0,
    };
    for (i, a) in det.assignment.iter().enumerate() {
        match a {
            Some(k) => {
                out.preds.push(poses[*k]);
                out.truths.push(truth_poses[i]);
            }
            None => out.unmatched += 1,
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub t_g: f64,
    pub r_s: f64,
}

/// Success rate at each threshold, sorted by threshold.
pub fn sweep_thresholds(
    preds: &[Vec<Pose>],
    truths: &[Vec<Pose>],
    gamma: f64,
    t_g_values: &[f64],
) -> Result<Vec<SweepPoint>, EvalError> {
    if t_g_values.is_empty() || t_g_values.iter().any(|t| !(*t > 0.0)) {
        return Err(EvalError::InvalidConfig(
            "thresholds must be non-empty and positive".into(),
        ));
    }
    let d = pose_distances(preds, truths, gamma)?;
    let mut ts = t_g_values.to_vec();
    ts.sort_by(f64::total_cmp);
    Ok(ts
        .into_iter()
        .map(|t_g| SweepPoint {
            t_g,
            r_s: rate_from(&d, t_g),
        })
        .collect())
}

/// `t_g,r_s` CSV.
pub fn write_sweep_csv<W: std::io::Write>(curve: &[SweepPoint], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
