//! Perception for rebar-tying robots: synthetic rebar scenes, node detection
//! on point clouds, tying order, and pose sampling on SE(3).

// `!(x > 0.0)` is used on purpose so that NaN parameters are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cloud;
pub mod clustering;
pub mod eval;
pub mod kdtree;
pub mod nodes;
pub mod ordering;
pub mod pipeline;
pub mod sampling;
pub mod scene;
pub mod se3;

pub use cloud::PointCloud;
pub use clustering::{dbscan, ClusterLabeling, DbscanParams, NeighborSearch, NOISE};
pub use eval::{
    match_poses, node_detection_rate, prediction_error, success_rate, sweep_thresholds, EvalConfig, EvalReport,
};
pub use nodes::{extract_nodes, orthogonal_feature_mask, NodeSet, OrthoFilterParams, RebarNode};
pub use ordering::{build_frame, order_nodes, pca, refine_frame, Frame, OrderedNodes, PcaResult};
pub use pipeline::{pre_detect, run_pipeline, PipelineConfig, PipelineError, PipelineResult, Stage};
pub use sampling::{
    analytic_gaussian_score, anneal_sample, diffuse_forward, langevin_step, predict_tying_pose, AnnealSchedule,
    SamplerConfig, ScoreField,
};
pub use scene::{generate_scene, GeneratedScene, GroundTruth, RebarGridSpec, SceneSpec};
pub use se3::{exp_se3, log_se3, pose_distance, Pose, Twist, UnitQuaternion, Vec3};
