use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use rebar_core::cloud::write_csv;
use rebar_core::eval::{evaluate, match_poses, write_sweep_csv};
use rebar_core::pipeline::{PipelineResultJson, Stage};
use rebar_core::scene::{generate_scene, tool_template, GeneratedScene, GroundTruth, RebarGridSpec, SceneSpec};
use rebar_core::se3::{Pose, Vec3};
use rebar_core::{node_detection_rate, run_pipeline, sweep_thresholds, PipelineConfig, PipelineError, PointCloud};
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "rebar",
    version,
    about = "Rebar node detection and tying-pose prediction on point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Ply,
    Csv,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Ply => "ply",
            Format::Csv => "csv",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic rebar scenes with ground truth.
    Gen {
        /// Scene spec JSON; defaults are used for missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Use the standard layout for this many nodes (4, 8, 16, 32, 36).
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        obstacles: Option<usize>,
        /// Noise level range `lo,hi` in millimeters.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        noise: Option<Vec<f64>>,
        /// First scene seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        scenes: u64,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Ply)]
        format: Format,
    },
    /// Run the detection pipeline on a PLY or CSV cloud.
    Detect {
        input: PathBuf,
        /// Tool cloud; the built-in tying gun template when omitted.
        #[arg(long)]
        tool: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Format of the per-node crop files.
        #[arg(long, value_enum, default_value_t = Format::Ply)]
        format: Format,
    },
    /// Pose and detection metrics for result/truth file pairs.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        result: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        truth: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the success threshold.
        #[arg(long)]
        t_g: Option<f64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Success rate as a function of the threshold, as CSV.
    Sweep {
        #[arg(long, required = true, num_args = 1..)]
        result: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        truth: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.02,0.05,0.1,0.2,0.5,1")]
        thresholds: Vec<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Generate, detect and score a batch of scenes.
    Demo {
        #[arg(long, default_value_t = 4)]
        nodes: usize,
        #[arg(long, default_value_t = 0)]
        obstacles: usize,
        #[arg(long, value_delimiter = ',', num_args = 2)]
        noise: Option<Vec<f64>>,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        scenes: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

enum Failure {
    /// Bad configuration or arguments.
    Config(String),
    /// A pipeline stage or I/O failed.
    Run(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Run(_) => 1,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.stage == Stage::Config {
            Failure::Config(e.to_string())
        } else {
            Failure::Run(e.to_string())
        }
    }
}

fn io<T, E: std::fmt::Display>(r: Result<T, E>, context: impl std::fmt::Display) -> Result<T, Failure> {
    r.map_err(|e| Failure::Run(format!("{context}: {e}")))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig, Failure> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn scene_spec(
    path: Option<&Path>,
    nodes: Option<usize>,
    obstacles: Option<usize>,
    noise: Option<&[f64]>,
) -> Result<SceneSpec, Failure> {
    let mut spec: SceneSpec = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => SceneSpec::default(),
    };
    if let Some(n) = nodes {
        let layout = RebarGridSpec::for_node_count(n);
        spec.grid.rows = layout.rows;
        spec.grid.cols = layout.cols;
        spec.grid.layers = layout.layers;
    }
    if let Some(k) = obstacles {
        spec.n_obstacles = k;
    }
    if let Some(&[lo, hi]) = noise {
        spec.noise_range = [lo, hi];
    }
    spec.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(spec)
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, Failure> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(Failure::Config("--jobs must be at least 1".into()));
        }
        b = b.num_threads(j);
    }
    b.build().map_err(|e| Failure::Run(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = io(serde_json::to_string_pretty(value), path.display())?;
    io(fs::write(path, text), path.display())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = io(fs::read_to_string(path), path.display())?;
    io(serde_json::from_str(&text), path.display())
}

fn write_scene(s: &GeneratedScene, dir: &Path, seed: u64, format: Format) -> Result<(), Failure> {
    let path = dir.join(format!("scene_{seed:04}.{}", format.ext()));
    match format {
        Format::Ply => io(s.scene.write_file(&path), path.display())?,
        Format::Csv => {
            // source label column: bar index, or -1 - k for obstacle k
            let labels: Vec<i32> = s.sources.iter().map(|x| x.label()).collect();
            let file = io(fs::File::create(&path), path.display())?;
            io(
                write_csv(&s.scene, Some(&labels), std::io::BufWriter::new(file)),
                path.display(),
            )?;
        }
    }
    write_json(&dir.join(format!("truth_{seed:04}.json")), &s.truth)
}

fn cmd_gen(
    spec: SceneSpec,
    seed: u64,
    scenes: u64,
    jobs: Option<usize>,
    out_dir: &Path,
    format: Format,
) -> Result<(), Failure> {
    io(fs::create_dir_all(out_dir), out_dir.display())?;
    let tool_path = out_dir.join(format!("tool.{}", format.ext()));
    io(tool_template().write_file(&tool_path), tool_path.display())?;
    pool(jobs)?.install(|| {
        (seed..seed + scenes).into_par_iter().try_for_each(|s| {
            let scene = generate_scene(&SceneSpec { seed: s, ..spec }).map_err(|e| Failure::Config(e.to_string()))?;
            write_scene(&scene, out_dir, s, format)
        })
    })?;
    println!("wrote {scenes} scene(s) to {}", out_dir.display());
    Ok(())
}

fn cmd_detect(
    input: &Path,
    tool: Option<&Path>,
    cfg: &PipelineConfig,
    out_dir: &Path,
    format: Format,
) -> Result<(), Failure> {
    let scene = io(PointCloud::read_file(input), input.display())?;
    let tool = match tool {
        Some(p) => io(PointCloud::read_file(p), p.display())?,
        None => tool_template(),
    };
    let res = run_pipeline(&scene, &tool, cfg)?;
    io(fs::create_dir_all(out_dir), out_dir.display())?;
    write_json(&out_dir.join("result.json"), &res.to_json())?;
    for (k, node) in res.ordered_nodes.ordered().enumerate() {
        let path = out_dir.join(format!("node_{k:03}.{}", format.ext()));
        io(node.crop.write_file(&path), path.display())?;
    }
    println!(
        "{} node(s) detected; results in {}",
        res.tying_poses.len(),
        out_dir.display()
    );
    Ok(())
}

struct Pairs {
    preds: Vec<Vec<Pose>>,
    truths: Vec<Vec<Pose>>,
    detection: Vec<f64>,
    unmatched: usize,
}

fn pair_files(results: &[PathBuf], truths: &[PathBuf], match_radius: f64) -> Result<Pairs, Failure> {
    if results.len() != truths.len() {
        return Err(Failure::Config(format!(
            "{} result files but {} truth files",
            results.len(),
            truths.len()
        )));
    }
    let mut out = Pairs {
        preds: Vec::new(),
        truths: Vec::new(),
        detection: Vec::new(),
        unmatched: 0,
    };
    for (rp, tp) in results.iter().zip(truths) {
        let r: PipelineResultJson = read_json(rp)?;
        let t: GroundTruth = read_json(tp)?;
        let found: Vec<Vec3> = r.nodes.iter().map(|c| Vec3::from(*c)).collect();
        out.detection
            .push(node_detection_rate(&found, &t.node_positions, match_radius).rate);
        let m = io(
            match_poses(&found, &r.tying_poses, &t.node_positions, &t.tying_poses, match_radius),
            rp.display(),
        )?;
        out.unmatched += m.unmatched;
        if !m.preds.is_empty() {
            out.preds.push(m.preds);
            out.truths.push(m.truths);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct EvalSummary {
    r_s: Option<f64>,
    e_r: Option<f64>,
    t_g: f64,
    gamma: f64,
    node_detection: Vec<f64>,
    mean_node_detection: f64,
    unmatched_nodes: usize,
    per_demo: Vec<rebar_core::eval::DemoReport>,
}

fn cmd_eval(
    results: &[PathBuf],
    truths: &[PathBuf],
    cfg: &PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<(), Failure> {
    let pairs = pair_files(results, truths, cfg.eval.match_radius)?;
    let report = if pairs.preds.is_empty() {
        None
    } else {
        Some(io(evaluate(&pairs.preds, &pairs.truths, &cfg.eval), "evaluation")?)
    };
    let summary = EvalSummary {
        r_s: report.as_ref().map(|r| r.r_s),
        e_r: report.as_ref().map(|r| r.e_r),
        t_g: cfg.eval.t_g,
        gamma: cfg.eval.gamma,
        mean_node_detection: pairs.detection.iter().sum::<f64>() / pairs.detection.len() as f64,
        node_detection: pairs.detection,
        unmatched_nodes: pairs.unmatched,
        per_demo: report.map(|r| r.per_demo).unwrap_or_default(),
    };
    let text = io(serde_json::to_string_pretty(&summary), "report")?;
    // a closed pipe is not worth a panic
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    if let Some(dir) = out_dir {
        io(fs::create_dir_all(dir), dir.display())?;
        write_json(&dir.join("eval.json"), &summary)?;
    }
    Ok(())
}

fn cmd_sweep(
    results: &[PathBuf],
    truths: &[PathBuf],
    thresholds: &[f64],
    cfg: &PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<(), Failure> {
    let pairs = pair_files(results, truths, cfg.eval.match_radius)?;
    if pairs.preds.is_empty() {
        return Err(Failure::Run("no detected node matches the ground truth".into()));
    }
    let curve = sweep_thresholds(&pairs.preds, &pairs.truths, cfg.eval.gamma, thresholds)
        .map_err(|e| Failure::Config(e.to_string()))?;
    match out_dir {
        Some(dir) => {
            io(fs::create_dir_all(dir), dir.display())?;
            let path = dir.join("sweep.csv");
            let file = io(fs::File::create(&path), path.display())?;
            io(write_sweep_csv(&curve, file), path.display())?;
        }
        None => io(write_sweep_csv(&curve, std::io::stdout().lock()), "stdout")?,
    }
    Ok(())
}

#[derive(Serialize)]
struct DemoRow {
    seed: u64,
    n_truth: usize,
    n_detected: usize,
    detection_rate: f64,
    order_ok: bool,
    n_matched: usize,
    r_s: Option<f64>,
    e_r: Option<f64>,
    ms: f64,
    error: String,
}

fn demo_scene(spec: &SceneSpec, cfg: &PipelineConfig, seed: u64, out_dir: &Path) -> Result<DemoRow, Failure> {
    let s = generate_scene(&SceneSpec { seed, ..*spec }).map_err(|e| Failure::Config(e.to_string()))?;
    let cfg = PipelineConfig { seed, ..*cfg };
    let start = Instant::now();
    let outcome = run_pipeline(&s.scene, &s.tool, &cfg);
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let n_truth = s.truth.node_positions.len();
    let res = match outcome {
        Ok(r) => r,
        Err(e) if e.stage == Stage::Config => return Err(e.into()),
        Err(e) => {
            return Ok(DemoRow {
                seed,
                n_truth,
                n_detected: 0,
                detection_rate: 0.0,
                order_ok: false,
                n_matched: 0,
                r_s: None,
                e_r: None,
                ms,
                error: e.to_string(),
            })
        }
    };
    write_json(&out_dir.join(format!("result_{seed:04}.json")), &res.to_json())?;
    write_json(&out_dir.join(format!("truth_{seed:04}.json")), &s.truth)?;
    let found = res.ordered_centroids();
    let r = cfg.eval.match_radius;
    let det = node_detection_rate(&found, &s.truth.node_positions, r);
    let in_truth: Vec<Option<usize>> = (0..found.len())
        .map(|k| det.assignment.iter().position(|a| *a == Some(k)))
        .collect();
    let order_ok = in_truth
        .iter()
        .copied()
        .eq(s.truth.canonical_order.iter().map(|&i| Some(i)));
    let m = io(
        match_poses(
            &found,
            &res.tying_poses,
            &s.truth.node_positions,
            &s.truth.tying_poses,
            r,
        ),
        "matching",
    )?;
    let n_matched = m.preds.len();
    let report = if m.preds.is_empty() {
        None
    } else {
        Some(io(evaluate(&[m.preds], &[m.truths], &cfg.eval), "evaluation")?)
    };
    Ok(DemoRow {
        seed,
        n_truth,
        n_detected: found.len(),
        detection_rate: det.rate,
        order_ok,
        n_matched,
        r_s: report.as_ref().map(|x| x.r_s),
        e_r: report.as_ref().map(|x| x.e_r),
        ms,
        error: String::new(),
    })
}

fn cmd_demo(
    spec: SceneSpec,
    cfg: &PipelineConfig,
    seed: u64,
    scenes: u64,
    jobs: Option<usize>,
    out_dir: &Path,
) -> Result<(), Failure> {
    io(fs::create_dir_all(out_dir), out_dir.display())?;
    let rows: Vec<DemoRow> = pool(jobs)?.install(|| {
        (seed..seed + scenes)
            .into_par_iter()
            .map(|s| demo_scene(&spec, cfg, s, out_dir))
            .collect::<Result<_, _>>()
    })?;
    let path = out_dir.join("demo.csv");
    let mut w = io(csv::Writer::from_path(&path), path.display())?;
    for row in &rows {
        io(w.serialize(row), path.display())?;
    }
    io(w.flush(), path.display())?;

    let n = rows.len().max(1) as f64;
    let detection = rows.iter().map(|r| r.detection_rate).sum::<f64>() / n;
    let ordered = rows.iter().filter(|r| r.order_ok).count();
    let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
    let scored: Vec<f64> = rows.iter().filter_map(|r| r.r_s).collect();
    let r_s = scored.iter().sum::<f64>() / scored.len().max(1) as f64;
    println!(
        "{} scenes, {} nodes each: mean detection {detection:.3}, order correct {ordered}, failed {failed}, R_s {r_s:.3} (T_g {})",
        rows.len(),
        spec.grid.n_nodes(),
        cfg.eval.t_g
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen {
            spec,
            nodes,
            obstacles,
            noise,
            seed,
            scenes,
            jobs,
            out_dir,
            format,
        } => {
            let spec = scene_spec(spec.as_deref(), nodes, obstacles, noise.as_deref())?;
            cmd_gen(spec, seed, scenes, jobs, &out_dir, format)
        }
        Command::Detect {
            input,
            tool,
            config,
            seed,
            out_dir,
            format,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            cmd_detect(&input, tool.as_deref(), &cfg, &out_dir, format)
        }
        Command::Eval {
            result,
            truth,
            config,
            t_g,
            out_dir,
        } => {
            let mut cfg = load_config(config.as_deref(), None)?;
            if let Some(t) = t_g {
                cfg.eval.t_g = t;
                cfg.validate()?;
            }
            cmd_eval(&result, &truth, &cfg, out_dir.as_deref())
        }
        Command::Sweep {
            result,
            truth,
            thresholds,
            config,
            out_dir,
        } => {
            let cfg = load_config(config.as_deref(), None)?;
            cmd_sweep(&result, &truth, &thresholds, &cfg, out_dir.as_deref())
        }
        Command::Demo {
            nodes,
            obstacles,
            noise,
            spec,
            scenes,
            seed,
            jobs,
            config,
            out_dir,
        } => {
            let spec = scene_spec(spec.as_deref(), Some(nodes), Some(obstacles), noise.as_deref())?;
            let cfg = load_config(config.as_deref(), None)?;
            cmd_demo(spec, &cfg, seed, scenes, jobs, &out_dir)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Config(m) => format!("config error: {m}"),
                Failure::Run(m) => format!("error: {m}"),
            };
            eprintln!("{msg}");
            ExitCode::from(f.code())
        }
    }
}
