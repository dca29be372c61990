mod common;

use common::*;
use rand::Rng;
use rebar_core::nodes::{NodeSet, RebarNode};
use rebar_core::ordering::{build_frame, lexicographic_order};
use rebar_core::scene::{generate_scene, RebarGridSpec, SceneSpec};
use rebar_core::se3::{Pose, UnitQuaternion, Vec3};
use rebar_core::{order_nodes, pca, refine_frame, Frame, PointCloud};

fn node_set(centroids: &[Vec3]) -> NodeSet {
    NodeSet {
        nodes: centroids
            .iter()
            .map(|&c| RebarNode {
                centroid: c,
                members: PointCloud::new(vec![c]),
                crop: PointCloud::new(vec![c]),
            })
            .collect(),
    }
}

fn jittered_grid(r: &mut impl Rng, spacing: f64) -> Vec<Vec3> {
    let mut out = Vec::new();
    for l in 0..2 {
        for i in 0..3 {
            for j in 0..4 {
                let jit = Vec3::new(
                    r.random::<f64>() - 0.5,
                    r.random::<f64>() - 0.5,
                    r.random::<f64>() - 0.5,
                ) * spacing
                    * 0.05;
                out.push(Vec3::new(j as f64 * spacing, l as f64 * spacing * 0.6, i as f64 * spacing) + jit);
            }
        }
    }
    out
}

#[test]
fn order_invariant_under_scaling() {
    let mut r = rng(4);
    for _ in 0..50 {
        let pts = jittered_grid(&mut r, 0.1);
        let frame = Frame::world();
        let base = order_nodes(node_set(&pts), &frame, 0.025).order;
        let exact = order_nodes(node_set(&pts), &frame, 0.0).order;
        let s = r.random_range(0.1..10.0);
        let scaled: Vec<Vec3> = pts.iter().map(|p| p * s).collect();
        // level tolerance is a length, so it scales with the coordinates
        assert_eq!(order_nodes(node_set(&scaled), &frame, 0.025 * s).order, base);
        assert_eq!(order_nodes(node_set(&scaled), &frame, 0.0).order, exact);
    }
}

#[test]
fn order_invariant_under_translation() {
    let mut r = rng(5);
    let pts = jittered_grid(&mut r, 0.1);
    let base = order_nodes(node_set(&pts), &Frame::world(), 0.025).order;
    for _ in 0..20 {
        let t = Vec3::new(r.random(), r.random(), r.random()) * 10.0;
        let moved: Vec<Vec3> = pts.iter().map(|p| p + t).collect();
        let frame = Frame {
            origin: t,
            ..Frame::world()
        };
        assert_eq!(order_nodes(node_set(&moved), &frame, 0.025).order, base);
    }
}

#[test]
fn order_matches_plain_sort_on_separated_levels() {
    let mut r = rng(6);
    let pts = jittered_grid(&mut r, 0.1);
    let mut want: Vec<usize> = (0..pts.len()).collect();
    let key = |p: &Vec3| {
        (
            (-p.y * 10.0).round() as i64,
            (p.z * 10.0).round() as i64,
            (p.x * 10.0).round() as i64,
        )
    };
    want.sort_by_key(|&i| key(&pts[i]));
    assert_eq!(lexicographic_order(&pts, 0.025), want);
}

#[test]
fn grid_normal_is_the_weakest_axis() {
    let s = generate_scene(&SceneSpec {
        grid: RebarGridSpec::for_node_count(16),
        ..Default::default()
    })
    .unwrap();
    let p = pca(&s.scene).unwrap();
    let normal = p.axes[2];
    let err = normal.dot(&Vec3::y()).abs().acos().to_degrees();
    assert!(err < 5.0, "normal off by {err} degrees");
}

fn crops_around_nodes(seed: u64, sigma: f64) -> (Vec<PointCloud>, Pose) {
    let s = generate_scene(&SceneSpec {
        grid: RebarGridSpec::for_node_count(16),
        noise_range: [sigma, sigma],
        seed,
        ..Default::default()
    })
    .unwrap();
    let crops = s
        .truth
        .node_positions
        .iter()
        .map(|n| {
            PointCloud::new(
                s.scene
                    .points
                    .iter()
                    .copied()
                    .filter(|p| (p - n).norm() <= 0.045)
                    .collect(),
            )
        })
        .collect();
    (crops, Pose::from_translation(Vec3::new(0.0, -1.0, 0.0)))
}

fn axis_error(f: &Frame) -> f64 {
    f.y.dot(&Vec3::y()).clamp(-1.0, 1.0).acos() + f.z.dot(&Vec3::z()).clamp(-1.0, 1.0).acos()
}

#[test]
fn refined_frame_beats_typical_single_crop() {
    let mut wins = 0;
    for seed in 0..50 {
        let (crops, prev) = crops_around_nodes(seed, 3.0);
        let refined = refine_frame(&crops, &prev, Vec3::z(), 0.3).unwrap();
        let origin = refined.origin;
        let mut singles: Vec<f64> = crops
            .iter()
            .filter_map(|c| build_frame(&pca(c).ok()?, &prev, origin, Vec3::z(), 0.3).ok())
            .map(|f| axis_error(&f))
            .collect();
        singles.sort_by(f64::total_cmp);
        let median = singles[singles.len() / 2];
        if axis_error(&refined) <= median {
            wins += 1;
        }
    }
    assert!(
        wins >= 45,
        "refined frame better than the median crop in {wins}/50 seeds"
    );
}

#[test]
fn refine_skips_degenerate_crop() {
    let (mut crops, prev) = crops_around_nodes(1, 0.0);
    let full = refine_frame(&crops[1..], &prev, Vec3::z(), 0.3).unwrap();
    crops[0] = PointCloud::new(vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.01, 0.0, 0.0)]);
    let skipped = refine_frame(&crops, &prev, Vec3::z(), 0.3).unwrap();
    assert!((skipped.y - full.y).norm() < 1e-9 && (skipped.z - full.z).norm() < 1e-9);
}

#[test]
fn frame_turns_with_the_scene() {
    let (crops, prev) = crops_around_nodes(2, 0.0);
    let base = refine_frame(&crops, &prev, Vec3::z(), 0.3).unwrap();
    let g = Pose::from_rotation(UnitQuaternion::from_axis_angle(&Vec3::z(), 30f64.to_radians()));
    let moved: Vec<PointCloud> = crops.iter().map(|c| c.transformed(&g)).collect();
    let turned = refine_frame(&moved, &(g * prev), Vec3::z(), 0.3).unwrap();
    for (a, b) in [(base.x, turned.x), (base.y, turned.y), (base.z, turned.z)] {
        assert!((g.transform_vector(&a) - b).norm() < 1e-9);
    }
}
