//! Synthetic rebar scenes with ground truth.
//!
//! A scene is a wall of rebar meshes. In scene coordinates `x` is
//! horizontal, `z` is up and `y` points away from the viewer into the wall.
//! Each layer has `rows` horizontal bars (along `x`) in front and `cols`
//! vertical bars (along `z`) directly behind them, touching. Layers are
//! stacked in depth, `layer_pitch` apart. A node is the contact point of a
//! horizontal and a vertical bar.

use crate::cloud::PointCloud;
use crate::kdtree::KdTree;
use crate::ordering::lexicographic_order;
use crate::se3::{Pose, UnitQuaternion, Vec3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

const MAX_PLACEMENT_TRIES: usize = 2000;
const AXIS_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    SpecInvalid(String),
    #[error("bar axis must be a unit vector, |axis| = {0}")]
    DegenerateAxis(f64),
    #[error("could not place obstacle {index} after {tries} attempts")]
    ObstaclePlacement { index: usize, tries: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RebarGridSpec {
    /// Horizontal bars per layer.
    pub rows: usize,
    /// Vertical bars per layer.
    pub cols: usize,
    pub layers: usize,
    /// Center distance between parallel bars.
    pub spacing: f64,
    pub bar_radius: f64,
    /// Bar length beyond the outermost crossing, on each end.
    pub overhang: f64,
    /// Depth distance between consecutive layers.
    pub layer_pitch: f64,
    /// Surface samples per meter of bar length.
    pub points_per_meter: f64,
    pub scene_pose: Pose,
}

impl Default for RebarGridSpec {
    fn default() -> Self {
        Self {
            rows: 2,
            cols: 2,
            layers: 1,
            spacing: 0.10,
            bar_radius: 0.006,
            overhang: 0.05,
            layer_pitch: 0.06,
            points_per_meter: 3000.0,
            scene_pose: Pose::identity(),
        }
    }
}

impl RebarGridSpec {
    pub fn with_layout(rows: usize, cols: usize, layers: usize) -> Self {
        Self {
            rows,
            cols,
            layers,
            ..Self::default()
        }
    }

    /// Standard layouts for the benchmark node counts (4, 8, 16, 32, 36).
    /// Other counts fall back to a single row.
    pub fn for_node_count(n: usize) -> Self {
        match n {
            4 => Self::with_layout(2, 2, 1),
            8 => Self::with_layout(2, 4, 1),
            16 => Self::with_layout(4, 4, 1),
            32 => Self::with_layout(4, 4, 2),
            36 => Self::with_layout(6, 6, 1),
            _ => Self::with_layout(1, n, 1),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.rows * self.cols * self.layers
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::SpecInvalid(m.to_string()));
        if self.n_nodes() == 0 {
            return bad("rows, cols and layers must all be at least 1");
        }
        let positive = [self.spacing, self.bar_radius, self.points_per_meter, self.layer_pitch];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("spacing, bar_radius, layer_pitch and points_per_meter must be positive");
        }
        if !(self.overhang >= 0.0) {
            return bad("overhang must be non-negative");
        }
        if self.spacing <= 2.0 * self.bar_radius {
            return bad("spacing must exceed the bar diameter");
        }
        if self.layers > 1 && self.layer_pitch <= 4.0 * self.bar_radius {
            return bad("layer_pitch must exceed two bar diameters");
        }
        Ok(())
    }

    /// Node positions in scene coordinates, in (layer, row, col) order.
    pub fn local_nodes(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.n_nodes());
        for l in 0..self.layers {
            for i in 0..self.rows {
                for j in 0..self.cols {
                    out.push(Vec3::new(
                        centered(j, self.cols, self.spacing),
                        centered(l, self.layers, self.layer_pitch),
                        centered(i, self.rows, self.spacing),
                    ));
                }
            }
        }
        out
    }
}

fn centered(k: usize, n: usize, step: f64) -> f64 {
    (k as f64 - (n as f64 - 1.0) / 2.0) * step
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub grid: RebarGridSpec,
    /// The per-scene noise level is drawn uniformly from this range...
    pub noise_range: [f64; 2],
    /// ...and multiplied by this many meters.
    pub noise_unit: f64,
    pub n_obstacles: usize,
    /// Edge length of boxes and diameter of spheres, in meters.
    pub obstacle_size_range: [f64; 2],
    /// Surface samples per square meter of obstacle.
    pub obstacle_density: f64,
    /// Minimum gap between obstacle points and bar points.
    pub obstacle_clearance: f64,
    pub tying_standoff: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            grid: RebarGridSpec::default(),
            noise_range: [0.0, 0.0],
            noise_unit: 0.001,
            n_obstacles: 0,
            obstacle_size_range: [0.05, 0.15],
            obstacle_density: 40_000.0,
            obstacle_clearance: 0.06,
            tying_standoff: 0.3,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        self.grid.validate()?;
        let bad = |m: &str| Err(SceneError::SpecInvalid(m.to_string()));
        let [lo, hi] = self.noise_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) || !(self.noise_unit >= 0.0) {
            return bad("noise range must satisfy 0 <= lo <= hi");
        }
        let [slo, shi] = self.obstacle_size_range;
        if self.n_obstacles > 0 && !(slo > 0.0 && shi >= slo && shi.is_finite()) {
            return bad("obstacle sizes must satisfy 0 < lo <= hi");
        }
        if self.n_obstacles > 0 && !(self.obstacle_density > 0.0) {
            return bad("obstacle density must be positive");
        }
        if !(self.obstacle_clearance >= 0.0 && self.tying_standoff >= 0.0) {
            return bad("clearance and standoff must be non-negative");
        }
        Ok(())
    }
}

/// What produced a scene point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    Bar(usize),
    Obstacle(usize),
}

impl PointSource {
    /// Bar index, or `-1 - k` for obstacle `k`.
    pub fn label(&self) -> i32 {
        match *self {
            PointSource::Bar(b) => b as i32,
            PointSource::Obstacle(k) => -1 - k as i32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Node positions in world coordinates.
    pub node_positions: Vec<Vec3>,
    pub tying_poses: Vec<Pose>,
    /// Node indices in tying order.
    pub canonical_order: Vec<usize>,
    pub up_axis: Vec3,
    pub noise_sigma: f64,
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedScene {
    pub scene: PointCloud,
    pub tool: PointCloud,
    pub truth: GroundTruth,
    /// Source of each scene point, indexed like `scene.points`.
    pub sources: Vec<PointSource>,
}

fn unit_perpendiculars(axis: &Vec3) -> (Vec3, Vec3) {
    let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = axis.cross(&helper).normalize();
    let v = axis.cross(&u);
    (u, v)
}

/// Uniform samples on the lateral surface of a cylinder starting at
/// `axis_origin`. The count is `density * length` rounded.
pub fn generate_bar<R: Rng + ?Sized>(
    axis_origin: Vec3,
    axis_dir: Vec3,
    length: f64,
    radius: f64,
    density: f64,
    rng: &mut R,
) -> Result<PointCloud, SceneError> {
    let n = axis_dir.norm();
    if !((n - 1.0).abs() <= AXIS_TOL) {
        return Err(SceneError::DegenerateAxis(n));
    }
    if !(length > 0.0 && radius > 0.0 && density > 0.0) {
        return Err(SceneError::SpecInvalid(
            "bar length, radius and density must be positive".into(),
        ));
    }
    let dir = axis_dir / n;
    let (u, v) = unit_perpendiculars(&dir);
    let count = (density * length).round() as usize;
    let points = (0..count)
        .map(|_| {
            let s = rng.random_range(0.0..=length);
            let theta = rng.random_range(0.0..2.0 * PI);
            axis_origin + s * dir + radius * (theta.cos() * u + theta.sin() * v)
        })
        .collect();
    Ok(PointCloud::new(points))
}

/// Adds i.i.d. `N(0, sigma^2 I)` to every point. `sigma = 0` leaves the
/// cloud untouched and consumes no randomness.
pub fn add_gaussian_noise<R: Rng + ?Sized>(cloud: PointCloud, sigma: f64, rng: &mut R) -> PointCloud {
    if sigma == 0.0 {
        return cloud;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
    let points = cloud
        .points
        .iter()
        .map(|p| p + Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng)))
        .collect();
    PointCloud {
        points,
        colors: cloud.colors,
    }
}

pub fn apply_rigid_transform(cloud: &PointCloud, g: &Pose) -> PointCloud {
    cloud.transformed(g)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Obstacle {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half: Vec3 },
}

impl Obstacle {
    fn area(&self) -> f64 {
        match *self {
            Obstacle::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Obstacle::Box { half, .. } => 8.0 * (half.x * half.y + half.y * half.z + half.x * half.z),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, density: f64, rng: &mut R) -> Vec<Vec3> {
        let n = (density * self.area()).round().max(1.0) as usize;
        match *self {
            Obstacle::Sphere { center, radius } => (0..n)
                .map(|_| {
                    let d = Vec3::from_fn(|_, _| StandardNormal.sample(rng));
                    center + radius * d.try_normalize(0.0).unwrap_or(Vec3::z())
                })
                .collect(),
            Obstacle::Box { center, half } => {
                // Face pairs normal to x, y, z, weighted by area.
                let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
                let total: f64 = areas.iter().sum();
                (0..n)
                    .map(|_| {
                        let mut pick = rng.random_range(0.0..total);
                        let mut axis = 2;
                        for (k, a) in areas.iter().enumerate() {
                            if pick < *a {
                                axis = k;
                                break;
                            }
                            pick -= a;
                        }
                        let mut local = Vec3::from_fn(|k, _| rng.random_range(-half[k]..=half[k]));
                        local[axis] = if rng.random_bool(0.5) { half[axis] } else { -half[axis] };
                        center + local
                    })
                    .collect()
            }
        }
    }
}

/// Fixed tying-gun tip template in the tool frame: a nozzle along +y ending
/// at the origin, and a jaw block behind it.
pub fn tool_template() -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7001);
    let mut cloud =
        generate_bar(Vec3::new(0.0, -0.08, 0.0), Vec3::y(), 0.08, 0.01, 2500.0, &mut rng).expect("valid template bar");
    let jaw = Obstacle::Box {
        center: Vec3::new(0.0, -0.11, -0.01),
        half: Vec3::new(0.02, 0.03, 0.03),
    };
    cloud.points.extend(jaw.sample(40_000.0, &mut rng));
    cloud
}

/// Generates the scene cloud, the tool cloud and the ground truth.
///
/// All randomness comes from `spec.seed`, so equal specs give bit-identical
/// output.
pub fn generate_scene(spec: &SceneSpec) -> Result<GeneratedScene, SceneError> {
    spec.validate()?;
    let g = &spec.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let r = g.bar_radius;

    let half_w = (g.cols as f64 - 1.0) / 2.0 * g.spacing + g.overhang;
    let half_h = (g.rows as f64 - 1.0) / 2.0 * g.spacing + g.overhang;
    let mut points = Vec::new();
    let mut sources = Vec::new();
    let mut bar = 0;
    for l in 0..g.layers {
        let y = centered(l, g.layers, g.layer_pitch);
        for i in 0..g.rows {
            let z = centered(i, g.rows, g.spacing);
            let c = generate_bar(
                Vec3::new(-half_w, y - r, z),
                Vec3::x(),
                2.0 * half_w.max(r),
                r,
                g.points_per_meter,
                &mut rng,
            )?;
            sources.extend(std::iter::repeat_n(PointSource::Bar(bar), c.len()));
            points.extend(c.points);
            bar += 1;
        }
        for j in 0..g.cols {
            let x = centered(j, g.cols, g.spacing);
            let c = generate_bar(
                Vec3::new(x, y + r, -half_h),
                Vec3::z(),
                2.0 * half_h.max(r),
                r,
                g.points_per_meter,
                &mut rng,
            )?;
            sources.extend(std::iter::repeat_n(PointSource::Bar(bar), c.len()));
            points.extend(c.points);
            bar += 1;
        }
    }

    let nodes = g.local_nodes();
    let bar_tree = KdTree::new(&points);
    let node_tree = KdTree::new(&nodes);
    let min_node_gap = 2.0 * g.spacing;
    let half_d = (g.layers as f64 - 1.0) / 2.0 * g.layer_pitch;
    let margin = 3.5 * g.spacing;
    let lo = Vec3::new(-half_w, -half_d, -half_h) - Vec3::repeat(margin);
    let hi = Vec3::new(half_w, half_d, half_h) + Vec3::repeat(margin);
    for k in 0..spec.n_obstacles {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let center = Vec3::from_fn(|i, _| rng.random_range(lo[i]..=hi[i]));
            let size = rng.random_range(spec.obstacle_size_range[0]..=spec.obstacle_size_range[1]);
            let ob = if rng.random_bool(0.5) {
                Obstacle::Sphere {
                    center,
                    radius: size / 2.0,
                }
            } else {
                let half = Vec3::from_fn(|_, _| rng.random_range(0.5..=1.0) * size / 2.0);
                Obstacle::Box { center, half }
            };
            let pts = ob.sample(spec.obstacle_density, &mut rng);
            let clear = pts.iter().all(|p| {
                node_tree.nearest(p).is_none_or(|(_, d)| d >= min_node_gap)
                    && bar_tree.nearest(p).is_none_or(|(_, d)| d >= spec.obstacle_clearance)
            });
            if clear {
                placed = Some(pts);
                break;
            }
        }
        let pts = placed.ok_or(SceneError::ObstaclePlacement {
            index: k,
            tries: MAX_PLACEMENT_TRIES,
        })?;
        sources.extend(std::iter::repeat_n(PointSource::Obstacle(k), pts.len()));
        points.extend(pts);
    }

    let [nlo, nhi] = spec.noise_range;
    let level = if nhi > nlo { rng.random_range(nlo..=nhi) } else { nlo };
    let noise_sigma = level * spec.noise_unit;
    let local = add_gaussian_noise(PointCloud::new(points), noise_sigma, &mut rng);
    let scene = local.transformed(&g.scene_pose);

    let tying_poses = nodes
        .iter()
        .map(|n| g.scene_pose * Pose::new(UnitQuaternion::IDENTITY, n - spec.tying_standoff * Vec3::y()))
        .collect();
    let truth = GroundTruth {
        node_positions: nodes.iter().map(|n| g.scene_pose.transform_point(n)).collect(),
        tying_poses,
        canonical_order: lexicographic_order(&nodes, g.spacing / 4.0),
        up_axis: g.scene_pose.transform_vector(&Vec3::z()),
        noise_sigma,
        spec: *spec,
    };
    Ok(GeneratedScene {
        scene,
        tool: tool_template(),
        truth,
        sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist_to_line(p: &Vec3, o: &Vec3, d: &Vec3) -> f64 {
        let w = p - o;
        (w - w.dot(d) * d).norm()
    }

    #[test]
    fn bar_points_on_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dir = Vec3::new(1.0, 2.0, -0.5).normalize();
        let o = Vec3::new(0.3, -0.1, 2.0);
        let c = generate_bar(o, dir, 1.0, 0.01, 1000.0, &mut rng).unwrap();
        assert!((c.len() as i64 - 1000).abs() <= 1);
        for p in &c.points {
            assert!((dist_to_line(p, &o, &dir) - 0.01).abs() < 1e-9);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(generate_bar(o, dir, 1.0, 0.01, 1000.0, &mut rng2).unwrap(), c);
    }

    #[test]
    fn bar_rejects_non_unit_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            generate_bar(Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0), 1.0, 0.01, 10.0, &mut rng),
            Err(SceneError::DegenerateAxis(_))
        ));
    }

    #[test]
    fn node_counts() {
        for (r, c, l, n) in [(2, 2, 1, 4), (6, 6, 1, 36), (2, 4, 2, 16), (1, 4, 1, 4)] {
            let spec = SceneSpec {
                grid: RebarGridSpec::with_layout(r, c, l),
                ..Default::default()
            };
            let s = generate_scene(&spec).unwrap();
            assert_eq!(s.truth.node_positions.len(), n);
            assert_eq!(s.truth.tying_poses.len(), n);
            let mut order = s.truth.canonical_order.clone();
            order.sort();
            assert_eq!(order, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn clean_points_lie_on_bars() {
        let spec = SceneSpec {
            grid: RebarGridSpec::with_layout(2, 3, 2),
            ..Default::default()
        };
        let s = generate_scene(&spec).unwrap();
        let r = spec.grid.bar_radius;
        for (p, src) in s.scene.points.iter().zip(&s.sources) {
            let PointSource::Bar(_) = src else {
                panic!("no obstacles requested")
            };
            // Horizontal bars have axes along x, vertical along z.
            let d = (0..spec.grid.layers)
                .flat_map(|l| {
                    let y = centered(l, spec.grid.layers, spec.grid.layer_pitch);
                    let hs = (0..spec.grid.rows).map(move |i| {
                        let z = centered(i, spec.grid.rows, spec.grid.spacing);
                        ((p.y - (y - r)).powi(2) + (p.z - z).powi(2)).sqrt()
                    });
                    let vs = (0..spec.grid.cols).map(move |j| {
                        let x = centered(j, spec.grid.cols, spec.grid.spacing);
                        ((p.y - (y + r)).powi(2) + (p.x - x).powi(2)).sqrt()
                    });
                    hs.chain(vs).collect::<Vec<_>>()
                })
                .map(|d| (d - r).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(d < 1e-12, "{d}");
        }
        // Every node has a clean point nearby.
        let tree = KdTree::new(&s.scene.points);
        for n in &s.truth.node_positions {
            assert!(tree.nearest(n).unwrap().1 <= r * 2f64.sqrt());
        }
    }

    #[test]
    fn deterministic_with_obstacles() {
        let spec = SceneSpec {
            grid: RebarGridSpec::with_layout(2, 4, 1),
            n_obstacles: 4,
            noise_range: [0.0, 0.5],
            seed: 11,
            ..Default::default()
        };
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a, b);
        let nodes = &a.truth.node_positions;
        for (p, src) in a.scene.points.iter().zip(&a.sources) {
            if let PointSource::Obstacle(_) = src {
                let d = nodes.iter().map(|n| (p - n).norm()).fold(f64::INFINITY, f64::min);
                // Placement is checked before noise; allow a few noise sigmas.
                assert!(d >= 2.0 * spec.grid.spacing - 5.0 * a.truth.noise_sigma);
            }
        }
        assert!(a.sources.iter().any(|s| matches!(s, PointSource::Obstacle(_))));
    }

    #[test]
    fn noise_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = PointCloud::new(vec![Vec3::zeros(); 100_000]);
        let noisy = add_gaussian_noise(c.clone(), 0.5, &mut rng);
        for axis in 0..3 {
            let vals: Vec<f64> = noisy.points.iter().map(|p| p[axis]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            assert!((var.sqrt() - 0.5).abs() < 0.01, "{}", var.sqrt());
        }
        assert_eq!(add_gaussian_noise(c.clone(), 0.0, &mut rng), c);
    }

    #[test]
    fn rigid_transform_roundtrip() {
        let c = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.5, 0.0)]);
        assert_eq!(apply_rigid_transform(&c, &Pose::identity()), c);
        let t = apply_rigid_transform(&c, &Pose::from_translation(Vec3::x()));
        assert_eq!(t.points[0], Vec3::new(2.0, 2.0, 3.0));
        let g = Pose::new(
            UnitQuaternion::from_axis_angle(&Vec3::new(1.0, -1.0, 2.0), 1.1),
            Vec3::new(0.2, 0.0, -3.0),
        );
        let back = apply_rigid_transform(&apply_rigid_transform(&c, &g), &g.inverse());
        for (a, b) in back.points.iter().zip(&c.points) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn truth_follows_scene_pose() {
        let pose = Pose::new(
            UnitQuaternion::from_axis_angle(&Vec3::z(), 0.5),
            Vec3::new(0.0, 1.0, 0.0),
        );
        let mut spec = SceneSpec::default();
        spec.grid.scene_pose = pose;
        let moved = generate_scene(&spec).unwrap();
        spec.grid.scene_pose = Pose::identity();
        let base = generate_scene(&spec).unwrap();
        assert_eq!(moved.truth.canonical_order, base.truth.canonical_order);
        for (a, b) in moved.truth.node_positions.iter().zip(&base.truth.node_positions) {
            assert!((a - pose.transform_point(b)).norm() < 1e-12);
        }
        assert!((moved.truth.up_axis - Vec3::z()).norm() < 1e-12);
        // Tying pose sits in front of the node, looking along +y.
        let t = base.truth.tying_poses[0];
        let n = base.truth.node_positions[0];
        assert!((t.translation - (n - 0.3 * Vec3::y())).norm() < 1e-12);
    }

    #[test]
    fn invalid_specs() {
        let mut spec = SceneSpec::default();
        spec.grid.rows = 0;
        assert!(matches!(generate_scene(&spec), Err(SceneError::SpecInvalid(_))));
        let mut spec = SceneSpec::default();
        spec.grid.spacing = 0.01;
        assert!(generate_scene(&spec).is_err());
        let spec = SceneSpec {
            noise_range: [0.5, 0.1],
            ..Default::default()
        };
        assert!(generate_scene(&spec).is_err());
    }
}
