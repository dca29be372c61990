use rebar_core::eval::node_detection_rate;
use rebar_core::pipeline::{pre_detect, process_rebar_cloud, Stage};
use rebar_core::scene::{generate_scene, GeneratedScene, PointSource, RebarGridSpec, SceneSpec};
use rebar_core::se3::{Pose, UnitQuaternion, Vec3};
use rebar_core::{run_pipeline, PipelineConfig, PipelineResult};

fn scene(nodes: usize, obstacles: usize, seed: u64) -> GeneratedScene {
    generate_scene(&SceneSpec {
        grid: RebarGridSpec::for_node_count(nodes),
        n_obstacles: obstacles,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn same_result(a: &PipelineResult, b: &PipelineResult) -> bool {
    a.pre == b.pre
        && a.selected_cluster == b.selected_cluster
        && a.clusters == b.clusters
        && a.ordered_nodes == b.ordered_nodes
        && a.tying_poses == b.tying_poses
        && a.frame_fallback == b.frame_fallback
}

/// Detected order expressed in ground-truth node indices.
fn order_in_truth(res: &PipelineResult, s: &GeneratedScene, radius: f64) -> Vec<Option<usize>> {
    let det = node_detection_rate(&res.ordered_centroids(), &s.truth.node_positions, radius);
    (0..res.tying_poses.len())
        .map(|k| det.assignment.iter().position(|a| *a == Some(k)))
        .collect()
}

#[test]
fn repeated_runs_are_identical() {
    let s = scene(8, 2, 3);
    let cfg = PipelineConfig {
        seed: 3,
        ..Default::default()
    };
    let a = run_pipeline(&s.scene, &s.tool, &cfg).unwrap();
    let b = run_pipeline(&s.scene, &s.tool, &cfg).unwrap();
    assert!(same_result(&a, &b));
    assert_eq!(a.tying_poses.len(), a.ordered_nodes.nodes.len());
}

#[test]
fn clean_four_node_scene_in_truth_order() {
    let s = scene(4, 0, 0);
    let cfg = PipelineConfig::default();
    let res = run_pipeline(&s.scene, &s.tool, &cfg).unwrap();
    let want: Vec<Option<usize>> = s.truth.canonical_order.iter().map(|&i| Some(i)).collect();
    assert_eq!(order_in_truth(&res, &s, cfg.eval.match_radius), want);
    // pose k belongs to the k-th node in tying order
    for (pose, node) in res.tying_poses.iter().zip(res.ordered_nodes.ordered()) {
        let ahead = pose.transform_point(&Vec3::new(0.0, cfg.standoff, 0.0));
        assert!((ahead - node.crop.centroid().unwrap()).norm() < 1e-9);
    }
}

#[test]
fn bare_rebar_cloud_gives_the_same_nodes() {
    for seed in 0..5 {
        let s = scene(8, 0, seed);
        let cfg = PipelineConfig {
            seed,
            ..Default::default()
        };
        let full = run_pipeline(&s.scene, &s.tool, &cfg).unwrap();
        let bars: Vec<usize> = (0..s.scene.len())
            .filter(|&i| matches!(s.sources[i], PointSource::Bar(_)))
            .collect();
        let rebar = s.scene.select(&bars);
        let (ordered, poses, _) =
            process_rebar_cloud(&rebar, None, &full.pre.pose_prev, &cfg, &mut Vec::new()).unwrap();
        assert_eq!(ordered, full.ordered_nodes);
        assert_eq!(poses, full.tying_poses);
    }
}

#[test]
fn order_survives_turning_the_scene_about_up() {
    for seed in 0..5 {
        let turn = Pose::from_rotation(UnitQuaternion::from_axis_angle(&Vec3::z(), 30f64.to_radians()));
        let mut spec = SceneSpec {
            grid: RebarGridSpec::for_node_count(16),
            seed,
            ..Default::default()
        };
        spec.grid.scene_pose = turn;
        let s = generate_scene(&spec).unwrap();
        let base = PipelineConfig {
            seed,
            ..Default::default()
        };
        let cfg = PipelineConfig {
            home: turn * base.home,
            approach: turn.transform_vector(&base.approach),
            ..base
        };
        let res = run_pipeline(&s.scene, &s.tool, &cfg).unwrap();
        let want: Vec<Option<usize>> = s.truth.canonical_order.iter().map(|&i| Some(i)).collect();
        assert_eq!(order_in_truth(&res, &s, cfg.eval.match_radius), want, "seed {seed}");
    }
}

#[test]
fn pre_detection_lands_in_front_of_a_node() {
    for seed in 0..10 {
        let s = scene(4, 0, seed);
        let cfg = PipelineConfig {
            seed,
            ..Default::default()
        };
        let pre = pre_detect(&s.scene, &s.tool, &cfg).unwrap();
        let limit = 2.0 * s.truth.spec.grid.bar_radius + cfg.standoff;
        let d = s
            .truth
            .node_positions
            .iter()
            .map(|n| (pre.pose_prev.translation - n).norm())
            .fold(f64::INFINITY, f64::min);
        assert!(d <= limit, "seed {seed}: {d}");
        assert_eq!(pre, pre_detect(&s.scene, &s.tool, &cfg).unwrap());
        assert!(pre.t_prev == cfg.home.inverse() * pre.pose_prev);
    }
}

#[test]
fn rebar_cluster_chosen_with_obstacles() {
    let mut ok = 0;
    for seed in 0..50 {
        let s = scene(4, 4, seed);
        let cfg = PipelineConfig {
            seed,
            ..Default::default()
        };
        let Ok(res) = run_pipeline(&s.scene, &s.tool, &cfg) else {
            continue;
        };
        let on_bars = res
            .ordered_nodes
            .nodes
            .nodes
            .iter()
            .flat_map(|n| n.crop.points.iter())
            .all(|p| {
                s.scene
                    .points
                    .iter()
                    .zip(&s.sources)
                    .any(|(q, src)| q == p && matches!(src, PointSource::Bar(_)))
            });
        if on_bars {
            ok += 1;
        }
    }
    assert!(ok >= 45, "{ok}/50");
}

#[test]
fn obstacles_alone_raise_an_error() {
    for seed in 0..5 {
        let s = scene(4, 4, seed);
        let keep: Vec<usize> = (0..s.scene.len())
            .filter(|&i| matches!(s.sources[i], PointSource::Obstacle(_)))
            .collect();
        let only = s.scene.select(&keep);
        let err = run_pipeline(&only, &s.tool, &PipelineConfig::default()).unwrap_err();
        assert!(
            matches!(err.stage, Stage::PreDetect | Stage::Select | Stage::Extract),
            "{err}"
        );
    }
}
