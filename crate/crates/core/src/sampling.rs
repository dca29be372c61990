//! Diffusion and annealed Langevin sampling of poses on SE(3).
//!
//! A sampler step is `g <- g * exp(0.5 * s * dt + dW)` with `s` a body-frame
//! score twist and `dW` a Wiener increment whose scale shrinks as the
//! diffusion time is annealed toward `t_end`.

use crate::cloud::PointCloud;
use crate::ordering::Frame;
use crate::se3::{exp_se3, log_se3, rotation_from_axes, sample_wiener, GeometryError, Pose, PoseMetric, Twist};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("score field returned a non-finite twist at t = {t}")]
    NonFiniteScore { t: f64 },
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot predict a pose from an empty crop")]
    EmptyCrop,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Score of a diffused pose distribution conditioned on the scene and tool
/// clouds.
pub trait ScoreField: Sync {
    fn score(&self, g: &Pose, t: f64, scene: &PointCloud, tool: &PointCloud) -> Result<Twist, SamplingError>;

    /// Energy used to pick the best chain; lower is better.
    fn energy(&self, _g: &Pose) -> Option<f64> {
        None
    }
}

/// Score of an isotropic Gaussian on SE(3) centered at `target`:
/// `log(g^-1 target)` with rotation scaled by `1/sigma_rot^2` and
/// translation by `1/sigma_trans^2`. The clouds are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticGaussianScore {
    pub target: Pose,
    pub sigma_rot: f64,
    pub sigma_trans: f64,
    /// Weight of the rotation term in the selection energy.
    pub gamma: f64,
}

pub fn analytic_gaussian_score(
    target: Pose,
    sigma_rot: f64,
    sigma_trans: f64,
) -> Result<AnalyticGaussianScore, SamplingError> {
    if !(sigma_rot > 0.0 && sigma_trans > 0.0) {
        return Err(SamplingError::InvalidConfig("score sigmas must be positive".into()));
    }
    Ok(AnalyticGaussianScore {
        target,
        sigma_rot,
        sigma_trans,
        gamma: 1.0,
    })
}

impl AnalyticGaussianScore {
    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    fn displacement(&self, g: &Pose) -> Result<Twist, SamplingError> {
        if *g == self.target {
            return Ok(Twist::zero());
        }
        Ok(log_se3(&(g.inverse() * self.target))?)
    }
}

impl ScoreField for AnalyticGaussianScore {
    fn score(&self, g: &Pose, _t: f64, _scene: &PointCloud, _tool: &PointCloud) -> Result<Twist, SamplingError> {
        let xi = self.displacement(g)?;
        Ok(Twist::new(
            xi.omega / (self.sigma_rot * self.sigma_rot),
            xi.v / (self.sigma_trans * self.sigma_trans),
        ))
    }

    fn energy(&self, g: &Pose) -> Option<f64> {
        Some(PoseMetric::new(self.gamma).ok()?.distance(g, &self.target))
    }
}

/// Equal-weight mixture of isotropic Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixtureScore {
    pub components: Vec<AnalyticGaussianScore>,
}

impl ScoreField for GaussianMixtureScore {
    fn score(&self, g: &Pose, t: f64, scene: &PointCloud, tool: &PointCloud) -> Result<Twist, SamplingError> {
        let mut parts = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let xi = c.displacement(g)?;
            let log_w = -0.5
                * (xi.omega.norm_squared() / (c.sigma_rot * c.sigma_rot)
                    + xi.v.norm_squared() / (c.sigma_trans * c.sigma_trans));
            parts.push((log_w, c.score(g, t, scene, tool)?));
        }
        let max = parts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut acc = Twist::zero();
        for (lw, s) in parts {
            let w = (lw - max).exp();
            total += w;
            acc = acc + s.scale(w);
        }
        Ok(acc.scale(1.0 / total))
    }

    fn energy(&self, g: &Pose) -> Option<f64> {
        self.components
            .iter()
            .filter_map(|c| c.energy(g))
            .min_by(f64::total_cmp)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseDecay {
    /// Noise scale proportional to `t / t_start`.
    #[default]
    Linear,
    /// Noise scale `final_ratio^(k / (steps - 1))` at step `k`.
    Geometric { final_ratio: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealSchedule {
    pub steps: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
    pub sigma_rot: f64,
    pub sigma_trans: f64,
    pub decay: NoiseDecay,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            steps: 200,
            t_start: 1.0,
            t_end: 0.0,
            dt: 0.05,
            sigma_rot: 1.0,
            sigma_trans: 1.0,
            decay: NoiseDecay::Linear,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<(), SamplingError> {
        let bad = |m: &str| Err(SamplingError::InvalidConfig(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(self.t_start >= self.t_end && self.t_end >= 0.0 && self.t_start.is_finite()) {
            return bad("need t_start >= t_end >= 0");
        }
        if !(self.sigma_rot >= 0.0 && self.sigma_trans >= 0.0) {
            return bad("noise scales must be non-negative");
        }
        if let NoiseDecay::Geometric { final_ratio } = self.decay {
            if !(final_ratio > 0.0 && final_ratio <= 1.0) {
                return bad("geometric final_ratio must lie in (0, 1]");
            }
        }
        Ok(())
    }

    fn fraction(&self, k: usize) -> f64 {
        if self.steps == 1 {
            0.0
        } else {
            k as f64 / (self.steps - 1) as f64
        }
    }

    /// Diffusion time at step `k`, linear from `t_start` to `t_end`.
    pub fn time(&self, k: usize) -> f64 {
        self.t_start + (self.t_end - self.t_start) * self.fraction(k)
    }

    /// Multiplier of the noise scales at step `k`.
    pub fn noise_factor(&self, k: usize) -> f64 {
        match self.decay {
            NoiseDecay::Linear if self.t_start > 0.0 => self.time(k) / self.t_start,
            NoiseDecay::Linear => 0.0,
            NoiseDecay::Geometric { final_ratio } => final_ratio.powf(self.fraction(k)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub schedule: AnnealSchedule,
    pub n_chains: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            schedule: AnnealSchedule::default(),
            n_chains: 8,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.n_chains == 0 {
            return Err(SamplingError::InvalidConfig("n_chains must be at least 1".into()));
        }
        self.schedule.validate()
    }
}

/// Forward diffusion: `n_substeps` Wiener increments of length
/// `t / n_substeps`, applied on the right.
pub fn diffuse_forward<R: Rng + ?Sized>(
    g0: &Pose,
    t: f64,
    sigma_rot: f64,
    sigma_trans: f64,
    n_substeps: usize,
    rng: &mut R,
) -> Result<Pose, SamplingError> {
    if !(t >= 0.0) || n_substeps == 0 {
        return Err(SamplingError::InvalidConfig("need t >= 0 and n_substeps >= 1".into()));
    }
    if t == 0.0 || (sigma_rot == 0.0 && sigma_trans == 0.0) {
        return Ok(*g0);
    }
    let dt = t / n_substeps as f64;
    let mut g = *g0;
    for _ in 0..n_substeps {
        g = g * exp_se3(&sample_wiener(dt, sigma_rot, sigma_trans, rng)?);
    }
    Ok(g)
}

/// One Langevin update `g * exp(0.5 * s * dt + dW)`.
#[allow(clippy::too_many_arguments)]
pub fn langevin_step<S: ScoreField + ?Sized, R: Rng + ?Sized>(
    g: &Pose,
    score: &S,
    t: f64,
    dt: f64,
    sigma_rot: f64,
    sigma_trans: f64,
    scene: &PointCloud,
    tool: &PointCloud,
    rng: &mut R,
) -> Result<Pose, SamplingError> {
    let s = score.score(g, t, scene, tool)?;
    if !s.is_finite() {
        return Err(SamplingError::NonFiniteScore { t });
    }
    let dw = sample_wiener(dt, sigma_rot, sigma_trans, rng)?;
    let step = s.scale(0.5 * dt) + dw;
    if step == Twist::zero() {
        return Ok(*g);
    }
    Ok(*g * exp_se3(&step))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    /// Final pose of the lowest-energy chain, or of chain 0 when the score
    /// field defines no energy.
    pub best: Pose,
    pub best_chain: usize,
    /// Final pose of every chain, in chain order.
    pub finals: Vec<Pose>,
    /// Every pose of chain 0, starting with `init`.
    pub trajectory: Vec<Pose>,
}

fn run_chain<S: ScoreField + ?Sized>(
    init: &Pose,
    score: &S,
    config: &SamplerConfig,
    chain: usize,
    scene: &PointCloud,
    tool: &PointCloud,
    record: bool,
) -> Result<(Pose, Vec<Pose>), SamplingError> {
    let sch = &config.schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ chain as u64);
    let mut g = *init;
    let mut traj = if record { vec![g] } else { Vec::new() };
    for k in 0..sch.steps {
        let f = sch.noise_factor(k);
        g = langevin_step(
            &g,
            score,
            sch.time(k),
            sch.dt,
            sch.sigma_rot * f,
            sch.sigma_trans * f,
            scene,
            tool,
            &mut rng,
        )?;
        if record {
            traj.push(g);
        }
    }
    Ok((g, traj))
}

/// Annealed Langevin sampling from `init` with `n_chains` independent
/// chains seeded by `seed ^ chain`.
pub fn anneal_sample<S: ScoreField + ?Sized>(
    init: &Pose,
    score: &S,
    config: &SamplerConfig,
    scene: &PointCloud,
    tool: &PointCloud,
) -> Result<SampleOutcome, SamplingError> {
    config.validate()?;
    let runs: Vec<(Pose, Vec<Pose>)> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_chain(init, score, config, c, scene, tool, c == 0))
        .collect::<Result<_, _>>()?;
    let finals: Vec<Pose> = runs.iter().map(|r| r.0).collect();
    let energies: Option<Vec<f64>> = finals.iter().map(|g| score.energy(g)).collect();
    let best_chain = match energies {
        Some(e) => (0..e.len())
            .min_by(|&a, &b| e[a].total_cmp(&e[b]).then(a.cmp(&b)))
            .unwrap_or(0),
        None => 0,
    };
    let trajectory = runs.into_iter().next().map(|r| r.1).unwrap_or_default();
    Ok(SampleOutcome {
        best: finals[best_chain],
        best_chain,
        finals,
        trajectory,
    })
}

/// Tying pose of one node: the tool looks along `frame.y` with its up axis
/// on `frame.z`, backed off `standoff` from the crop centroid.
pub fn predict_tying_pose(node_crop: &PointCloud, frame: &Frame, standoff: f64) -> Result<Pose, SamplingError> {
    let c = node_crop.centroid().ok_or(SamplingError::EmptyCrop)?;
    Ok(Pose::new(
        rotation_from_axes(&frame.x, &frame.y, &frame.z),
        c - standoff * frame.y,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{UnitQuaternion, Vec3};

    struct ConstScore(Twist);
    impl ScoreField for ConstScore {
        fn score(&self, _: &Pose, _: f64, _: &PointCloud, _: &PointCloud) -> Result<Twist, SamplingError> {
            Ok(self.0)
        }
    }

    struct NanScore;
    impl ScoreField for NanScore {
        fn score(&self, _: &Pose, _: f64, _: &PointCloud, _: &PointCloud) -> Result<Twist, SamplingError> {
            Ok(Twist::new(Vec3::new(f64::NAN, 0.0, 0.0), Vec3::zeros()))
        }
    }

    fn empty() -> PointCloud {
        PointCloud::default()
    }

    fn some_pose() -> Pose {
        Pose::new(
            UnitQuaternion::from_axis_angle(&Vec3::new(0.3, -1.0, 0.2), 0.8),
            Vec3::new(0.4, -0.2, 1.5),
        )
    }

    #[test]
    fn diffusion_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = some_pose();
        assert_eq!(diffuse_forward(&g, 0.0, 1.0, 1.0, 10, &mut rng).unwrap(), g);
        assert_eq!(diffuse_forward(&g, 5.0, 0.0, 0.0, 10, &mut rng).unwrap(), g);
        assert!(diffuse_forward(&g, 1.0, 1.0, 1.0, 0, &mut rng).is_err());
    }

    #[test]
    fn langevin_closed_form_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = some_pose();
        let zero = ConstScore(Twist::zero());
        assert_eq!(
            langevin_step(&g, &zero, 1.0, 0.1, 0.0, 0.0, &empty(), &empty(), &mut rng).unwrap(),
            g
        );

        let xi = Twist::new(Vec3::new(0.2, 0.0, -0.4), Vec3::new(1.0, 2.0, 0.5));
        let out = langevin_step(&g, &ConstScore(xi), 1.0, 1.0, 0.0, 0.0, &empty(), &empty(), &mut rng).unwrap();
        let expect = g * exp_se3(&xi.scale(0.5));
        assert!(PoseMetric::default().distance(&out, &expect) < 1e-12);

        assert_eq!(
            langevin_step(&g, &NanScore, 0.5, 0.1, 0.0, 0.0, &empty(), &empty(), &mut rng),
            Err(SamplingError::NonFiniteScore { t: 0.5 })
        );
    }

    #[test]
    fn analytic_score_values() {
        let target = some_pose();
        let s = analytic_gaussian_score(target, 0.5, 1.0).unwrap();
        let at = s.score(&target, 0.0, &empty(), &empty()).unwrap();
        assert_eq!(at, Twist::zero());

        // Target one unit along world +x from g.
        let g = some_pose();
        let shifted = Pose::new(g.rotation, g.translation + Vec3::x());
        let s = analytic_gaussian_score(shifted, 1.0, 1.0).unwrap();
        let sc = s.score(&g, 0.0, &empty(), &empty()).unwrap();
        assert!(sc.omega.norm() < 1e-12);
        let body = g.rotation.inverse().rotate(&Vec3::x());
        assert!((sc.v - body).norm() < 1e-12);

        let s2 = analytic_gaussian_score(shifted, 1.0, 2.0).unwrap();
        let sc2 = s2.score(&g, 0.0, &empty(), &empty()).unwrap();
        assert!((sc2.v - sc.v / 4.0).norm() < 1e-12);

        assert!(analytic_gaussian_score(target, 0.0, 1.0).is_err());
    }

    #[test]
    fn single_step_without_noise_keeps_init() {
        let cfg = SamplerConfig {
            schedule: AnnealSchedule {
                steps: 1,
                sigma_rot: 0.0,
                sigma_trans: 0.0,
                ..Default::default()
            },
            n_chains: 1,
            seed: 3,
        };
        let g = some_pose();
        let out = anneal_sample(&g, &ConstScore(Twist::zero()), &cfg, &empty(), &empty()).unwrap();
        assert_eq!(out.best, g);
        assert_eq!(out.trajectory, vec![g, g]);
    }

    #[test]
    fn sampling_is_deterministic() {
        let target = some_pose();
        let score = analytic_gaussian_score(target, 0.3, 0.3).unwrap();
        let cfg = SamplerConfig::default();
        let a = anneal_sample(&Pose::identity(), &score, &cfg, &empty(), &empty()).unwrap();
        let b = anneal_sample(&Pose::identity(), &score, &cfg, &empty(), &empty()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.finals.len(), cfg.n_chains);
        assert_eq!(a.trajectory.len(), cfg.schedule.steps + 1);
    }

    #[test]
    fn schedule_shapes() {
        let s = AnnealSchedule::default();
        assert_eq!(s.time(0), 1.0);
        assert_eq!(s.time(s.steps - 1), 0.0);
        assert_eq!(s.noise_factor(s.steps - 1), 0.0);
        let g = AnnealSchedule {
            decay: NoiseDecay::Geometric { final_ratio: 0.01 },
            ..s
        };
        assert!((g.noise_factor(g.steps - 1) - 0.01).abs() < 1e-15);
        assert_eq!(g.noise_factor(0), 1.0);
        let bad = AnnealSchedule { t_end: 2.0, ..s };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn predicted_pose_in_world_frame() {
        let crop = PointCloud::new(vec![Vec3::new(0.1, 0.0, 0.0), Vec3::new(-0.1, 0.0, 0.0)]);
        let p = predict_tying_pose(&crop, &Frame::world(), 0.1).unwrap();
        assert!((p.translation - Vec3::new(0.0, -0.1, 0.0)).norm() < 1e-15);
        assert!(p.rotation.angle() < 1e-12);
        assert_eq!(
            predict_tying_pose(&empty(), &Frame::world(), 0.1),
            Err(SamplingError::EmptyCrop)
        );

        let q = UnitQuaternion::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2);
        let f = Frame {
            origin: Vec3::zeros(),
            x: q.rotate(&Vec3::x()),
            y: q.rotate(&Vec3::y()),
            z: Vec3::z(),
        };
        let pr = predict_tying_pose(&crop.transformed(&Pose::from_rotation(q)), &f, 0.1).unwrap();
        let expect = Pose::from_rotation(q) * p;
        assert!(PoseMetric::default().distance(&pr, &expect) < 1e-12);
    }
}
