//! End-to-end detection: pre-detection of one node, rebar cluster
//! selection, node extraction, ordering, and one tying pose per node.

use crate::cloud::PointCloud;
use crate::clustering::{
    dbscan, extract_reference_cloud, select_rebar_cluster, ClusterError, DbscanParams, LabelingSummary, NOISE,
};
use crate::eval::EvalConfig;
use crate::kdtree::KdTree;
use crate::nodes::{extract_nodes, extract_nodes_masked, orthogonal_feature_mask, NodeError, OrthoFilterParams};
use crate::ordering::{
    build_frame, covariance, order_nodes, pca, refine_frame, Frame, OrderedNodes, OrderedNodesJson, OrderingError,
};
use crate::sampling::{analytic_gaussian_score, anneal_sample, predict_tying_pose, SamplerConfig, SamplingError};
use crate::se3::{rotation_from_axes, Pose, Vec3};
use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::time::Instant;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    PreDetect,
    Cluster,
    Select,
    Extract,
    Frame,
    Order,
    Predict,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::PreDetect => "pre_detect",
            Stage::Cluster => "cluster",
            Stage::Select => "select",
            Stage::Extract => "extract",
            Stage::Frame => "frame",
            Stage::Order => "order",
            Stage::Predict => "predict",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageError {
    #[error("no node-like point passes the orthogonal feature filter")]
    NoCandidateNode,
    #[error("empty scene")]
    EmptyScene,
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Ordering(#[from] OrderingError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{stage} failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

fn tag<E: Into<StageError>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        source: e.into(),
    }
}

/// Every tunable of the pipeline. Defaults suit grids with 0.1 m spacing
/// and 6 mm bar radius seen from about a meter away.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Scene clustering that separates the rebar from the background.
    pub dbscan: DbscanParams,
    pub filter: OrthoFilterParams,
    /// Clustering of filtered points into nodes.
    pub split: DbscanParams,
    pub crop_radius: f64,
    /// Pre-detection only trusts filtered clusters at least this large
    /// and no wider than `candidate_max_extent` around their centroid.
    pub candidate_min_size: usize,
    pub candidate_max_extent: f64,
    /// ...and whose surroundings have a median linearity of at least
    /// `candidate_min_linearity`, measured over `candidate_line_radius`.
    pub candidate_line_radius: f64,
    pub candidate_min_linearity: f64,
    /// Radius of the reference patch around the pre-detected grasp point.
    pub reference_radius: f64,
    /// Distance at which a reference point counts for a cluster.
    pub search_radius: f64,
    /// Distance from the tool frame origin to the tied node.
    pub standoff: f64,
    pub up: Vec3,
    /// Tool forward direction used by pre-detection.
    pub approach: Vec3,
    /// End-effector pose the sampler starts from.
    pub home: Pose,
    /// Relative eigenvalue gap below which principal axes are treated as
    /// one eigenspace.
    pub isotropy_tol: f64,
    /// Coordinates closer than this share a sorting level.
    pub order_tol: f64,
    /// Spread of the pre-detection score around its target pose.
    pub score_sigma_rot: f64,
    pub score_sigma_trans: f64,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dbscan: DbscanParams::new(0.045, 5),
            filter: OrthoFilterParams::default(),
            split: DbscanParams::new(0.015, 10),
            crop_radius: 0.045,
            candidate_min_size: 20,
            candidate_max_extent: 0.04,
            candidate_line_radius: 0.02,
            candidate_min_linearity: 0.55,
            reference_radius: 0.05,
            search_radius: 0.01,
            standoff: 0.3,
            up: Vec3::z(),
            approach: Vec3::y(),
            home: Pose::from_translation(Vec3::new(0.0, -1.0, 0.0)),
            isotropy_tol: 0.3,
            order_tol: 0.025,
            score_sigma_rot: 0.3,
            score_sigma_trans: 0.3,
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |m: &str| PipelineError {
            stage: Stage::Config,
            source: StageError::Config(m.to_string()),
        };
        self.dbscan.validate().map_err(tag(Stage::Config))?;
        self.split.validate().map_err(tag(Stage::Config))?;
        self.filter.validate().map_err(tag(Stage::Config))?;
        self.sampler.validate().map_err(tag(Stage::Config))?;
        self.eval.validate().map_err(|e| cfg(&e.to_string()))?;
        let radii = [
            self.crop_radius,
            self.reference_radius,
            self.search_radius,
            self.candidate_max_extent,
            self.candidate_line_radius,
        ];
        if radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(cfg("crop, reference, search and candidate radii must be positive"));
        }
        if !(self.standoff >= 0.0) || !(self.isotropy_tol >= 0.0) || !(self.order_tol >= 0.0) {
            return Err(cfg("standoff, isotropy_tol and order_tol must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.candidate_min_linearity) {
            return Err(cfg("candidate_min_linearity must lie in [0, 1]"));
        }
        if !(self.score_sigma_rot > 0.0 && self.score_sigma_trans > 0.0) {
            return Err(cfg("score sigmas must be positive"));
        }
        let up = self.up.try_normalize(1e-12).ok_or_else(|| cfg("up must be non-zero"))?;
        let fwd = self
            .approach
            .try_normalize(1e-12)
            .ok_or_else(|| cfg("approach must be non-zero"))?;
        if up.cross(&fwd).norm() < 1e-6 {
            return Err(cfg("approach must not be parallel to up"));
        }
        Ok(())
    }

    /// Filter settings with the run seed mixed in.
    pub fn seeded_filter(&self) -> OrthoFilterParams {
        OrthoFilterParams {
            rng_seed: self.filter.rng_seed ^ self.seed,
            ..self.filter
        }
    }

    pub fn seeded_sampler(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.sampler.seed ^ self.seed,
            ..self.sampler
        }
    }

    /// Tool orientation looking along `approach` with `up` as its z axis.
    pub fn approach_rotation(&self) -> crate::se3::UnitQuaternion {
        let y = self.approach.normalize();
        let f = Frame::orthonormalized(Vec3::zeros(), y, self.up);
        rotation_from_axes(&f.x, &f.y, &f.z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreDetection {
    /// Motion from the home pose to `pose_prev`.
    pub t_prev: Pose,
    /// End-effector pose after pre-detection.
    pub pose_prev: Pose,
    /// Scene index of the node point the sampler was aimed at.
    pub candidate: usize,
}

/// Median over the points within `radius` of `center` of the linearity
/// `(l1 - l2) / l1` of their `line_radius` neighborhoods.
fn median_linearity(scene: &PointCloud, tree: &KdTree, center: &Vec3, radius: f64, line_radius: f64) -> f64 {
    let mut idx = Vec::new();
    tree.within_radius_unsorted_into(center, radius, &mut idx);
    let mut nb = Vec::new();
    let mut values: Vec<f64> = idx
        .iter()
        .map(|&i| {
            tree.within_radius_unsorted_into(&scene.points[i], line_radius, &mut nb);
            if nb.len() < 4 {
                return 0.0;
            }
            let pts: Vec<Vec3> = nb.iter().map(|&j| scene.points[j]).collect();
            let mean = pts.iter().sum::<Vec3>() / pts.len() as f64;
            let mut ev: Vec<f64> = SymmetricEigen::new(covariance(&pts, &mean))
                .eigenvalues
                .iter()
                .copied()
                .collect();
            ev.sort_by(|a, b| b.total_cmp(a));
            if ev[0] <= 0.0 {
                0.0
            } else {
                (ev[0] - ev[1]) / ev[0]
            }
        })
        .collect();
    if values.is_empty() {
        return 0.0;
    }
    let mid = values.len() / 2;
    *values.select_nth_unstable_by(mid, f64::total_cmp).1
}

/// Picks a node point and samples an end-effector pose in front of it.
///
/// Points passing the orthogonal feature filter are clustered with the split
/// parameters. Candidates are core points of clusters that look like a single
/// crossing (enough members, small extent, line-like surroundings); the one
/// nearest the scene centroid wins.
pub fn pre_detect(
    scene: &PointCloud,
    tool: &PointCloud,
    config: &PipelineConfig,
) -> Result<PreDetection, PipelineError> {
    let mask = orthogonal_feature_mask(scene, &config.seeded_filter()).map_err(tag(Stage::PreDetect))?;
    pre_detect_masked(scene, tool, &mask, config)
}

/// [`pre_detect`] with a precomputed orthogonal feature mask of `scene`.
pub fn pre_detect_masked(
    scene: &PointCloud,
    tool: &PointCloud,
    mask: &[bool],
    config: &PipelineConfig,
) -> Result<PreDetection, PipelineError> {
    let stage = Stage::PreDetect;
    if scene.is_empty() {
        return Err(PipelineError {
            stage,
            source: StageError::EmptyScene,
        });
    }
    let kept: Vec<usize> = (0..scene.len()).filter(|&i| mask[i]).collect();
    let no_candidate = || PipelineError {
        stage,
        source: StageError::NoCandidateNode,
    };
    if kept.is_empty() {
        return Err(no_candidate());
    }
    let masked = scene.select(&kept);
    let labels = dbscan(&masked, &config.split).map_err(tag(stage))?;
    // keep compact blobs; long edges and wide patches are rarely nodes
    let blob_centers: Vec<Option<Vec3>> = (0..labels.n_clusters)
        .map(|c| {
            let members = labels.members(c);
            if members.len() < config.candidate_min_size {
                return None;
            }
            let blob = masked.select(&members);
            let mid = blob.centroid().expect("non-empty");
            blob.points
                .iter()
                .all(|p| (p - mid).norm() <= config.candidate_max_extent)
                .then_some(mid)
        })
        .collect();
    let centroid = scene.centroid().expect("non-empty");
    let dist = |k: usize| (masked.points[k] - centroid).norm_squared();
    let mut nearest: Vec<Option<usize>> = vec![None; labels.n_clusters];
    for k in 0..kept.len() {
        let l = labels.labels[k];
        if !labels.core[k] || l == NOISE || blob_centers[l as usize].is_none() {
            continue;
        }
        let slot = &mut nearest[l as usize];
        if slot.is_none_or(|j| dist(k) < dist(j)) {
            *slot = Some(k);
        }
    }
    let mut ranked: Vec<usize> = nearest.into_iter().flatten().collect();
    ranked.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
    // the surroundings of a crossing are made of bars, so mostly line-like
    let tree = KdTree::new(&scene.points);
    let candidate = ranked
        .into_iter()
        .find(|&k| {
            let mid = blob_centers[labels.labels[k] as usize].expect("compact cluster");
            median_linearity(scene, &tree, &mid, config.crop_radius, config.candidate_line_radius)
                >= config.candidate_min_linearity
        })
        .map(|k| kept[k])
        .ok_or_else(no_candidate)?;

    let rotation = config.approach_rotation();
    let forward = rotation.rotate(&Vec3::y());
    let target = Pose::new(rotation, scene.points[candidate] - config.standoff * forward);
    let score = analytic_gaussian_score(target, config.score_sigma_rot, config.score_sigma_trans)
        .map_err(tag(stage))?
        .with_gamma(config.eval.gamma);
    let out = anneal_sample(&config.home, &score, &config.seeded_sampler(), scene, tool).map_err(tag(stage))?;
    Ok(PreDetection {
        t_prev: config.home.inverse() * out.best,
        pose_prev: out.best,
        candidate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineResult {
    pub pre: PreDetection,
    pub selected_cluster: usize,
    pub clusters: LabelingSummary,
    pub ordered_nodes: OrderedNodes,
    /// One pose per node, in tying order.
    pub tying_poses: Vec<Pose>,
    /// Set when per-crop frames all failed and the whole rebar cloud was
    /// used instead.
    pub frame_fallback: bool,
    pub timings: Vec<StageTiming>,
}

/// JSON export layout of [`PipelineResult`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineResultJson {
    pub t_prev: Pose,
    pub pose_prev: Pose,
    pub selected_cluster: usize,
    pub clusters: LabelingSummary,
    pub ordered_nodes: OrderedNodesJson,
    /// Node centroids in tying order.
    pub nodes: Vec<[f64; 3]>,
    pub tying_poses: Vec<Pose>,
    pub frame_fallback: bool,
    pub timings: Vec<StageTiming>,
}

impl PipelineResult {
    /// Node centroids in tying order.
    pub fn ordered_centroids(&self) -> Vec<Vec3> {
        self.ordered_nodes.ordered().map(|n| n.centroid).collect()
    }

    pub fn to_json(&self) -> PipelineResultJson {
        PipelineResultJson {
            t_prev: self.pre.t_prev,
            pose_prev: self.pre.pose_prev,
            selected_cluster: self.selected_cluster,
            clusters: self.clusters.clone(),
            ordered_nodes: self.ordered_nodes.to_json(),
            nodes: self.ordered_centroids().iter().map(|c| [c.x, c.y, c.z]).collect(),
            tying_poses: self.tying_poses.clone(),
            frame_fallback: self.frame_fallback,
            timings: self.timings.clone(),
        }
    }
}

/// Node extraction, ordering and pose prediction on an already isolated
/// rebar cloud. `mask` is its orthogonal feature mask, computed here when
/// absent. Returns the ordered nodes, the poses in tying order and whether
/// the whole-cloud frame fallback was used.
pub fn process_rebar_cloud(
    rebar: &PointCloud,
    mask: Option<&[bool]>,
    pose_prev: &Pose,
    config: &PipelineConfig,
    timings: &mut Vec<StageTiming>,
) -> Result<(OrderedNodes, Vec<Pose>, bool), PipelineError> {
    let mut clock = Instant::now();
    let mut lap = |stage: Stage, timings: &mut Vec<StageTiming>| {
        timings.push(StageTiming {
            stage,
            ms: clock.elapsed().as_secs_f64() * 1e3,
        });
        clock = Instant::now();
    };

    let nodes = match mask {
        Some(m) => extract_nodes_masked(rebar, m, &config.split, config.crop_radius),
        None => extract_nodes(rebar, &config.seeded_filter(), &config.split, config.crop_radius),
    }
    .map_err(tag(Stage::Extract))?;
    lap(Stage::Extract, timings);

    let (frame, fallback) = match refine_frame(&nodes.crops(), pose_prev, config.up, config.isotropy_tol) {
        Ok(f) => (f, false),
        Err(_) => {
            let p = pca(rebar).map_err(tag(Stage::Frame))?;
            let f = build_frame(&p, pose_prev, p.mean, config.up, config.isotropy_tol).map_err(tag(Stage::Frame))?;
            (f, true)
        }
    };
    lap(Stage::Frame, timings);

    let ordered = order_nodes(nodes, &frame, config.order_tol);
    lap(Stage::Order, timings);

    let poses = ordered
        .ordered()
        .map(|n| predict_tying_pose(&n.crop, &frame, config.standoff))
        .collect::<Result<Vec<_>, _>>()
        .map_err(tag(Stage::Predict))?;
    lap(Stage::Predict, timings);
    Ok((ordered, poses, fallback))
}

pub fn run_pipeline(
    scene: &PointCloud,
    tool: &PointCloud,
    config: &PipelineConfig,
) -> Result<PipelineResult, PipelineError> {
    config.validate()?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |stage: Stage, timings: &mut Vec<StageTiming>| {
        timings.push(StageTiming {
            stage,
            ms: clock.elapsed().as_secs_f64() * 1e3,
        });
        clock = Instant::now();
    };

    let mask = orthogonal_feature_mask(scene, &config.seeded_filter()).map_err(tag(Stage::PreDetect))?;
    let pre = pre_detect_masked(scene, tool, &mask, config)?;
    lap(Stage::PreDetect, &mut timings);

    let labeling = dbscan(scene, &config.dbscan).map_err(tag(Stage::Cluster))?;
    lap(Stage::Cluster, &mut timings);

    let reference = extract_reference_cloud(scene, &pre.pose_prev, config.standoff, config.reference_radius)
        .map_err(tag(Stage::Select))?;
    let selected =
        select_rebar_cluster(scene, &labeling, &reference, config.search_radius).map_err(tag(Stage::Select))?;
    let members = labeling.members(selected);
    let rebar = scene.select(&members);
    let rebar_mask: Vec<bool> = members.iter().map(|&i| mask[i]).collect();
    lap(Stage::Select, &mut timings);

    let (ordered_nodes, tying_poses, frame_fallback) =
        process_rebar_cloud(&rebar, Some(&rebar_mask), &pre.pose_prev, config, &mut timings)?;
    Ok(PipelineResult {
        pre,
        selected_cluster: selected,
        clusters: labeling.summary(),
        ordered_nodes,
        tying_poses,
        frame_fallback,
        timings,
    })
}
