//! `mapanchor`: reference session generation, query preparation, anchoring,
//! change detection and trajectory evaluation.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use mapanchor::change::detect_changes;
use mapanchor::geometry::ply::{read_cloud, read_mesh};
use mapanchor::session::{evaluate_ape, load_keyframes, load_session, read_tum, save_session, ApeOptions, Edge, LoadOptions};
use mapanchor::sim::{load_mesh, map_to_session, TriangleMesh};
use mapanchor::{PointCloud, Pose3};

use config::{Config, ConfigError};

#[derive(Parser, Debug)]
#[command(name = "mapanchor", version, about = "Map-anchored LiDAR session alignment and change detection")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for all randomness (simulated range noise).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker thread cap; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Overrides {
    /// Configuration overrides, `key=value`.
    #[arg(value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Reference session and occupancy map (PGM + YAML) from a map mesh.
    Map2sd {
        /// Mesh to simulate scans against (STL or PLY).
        #[arg(long)]
        mesh: PathBuf,
        /// Point cloud for the occupancy grid; the mesh is used when absent.
        #[arg(long)]
        cloud: Option<PathBuf>,
        /// Floor height of the map, meters.
        #[arg(long, allow_negative_numbers = true)]
        floor_z: f64,
        /// Receives the session, `map.pgm` and `map.yaml`.
        #[arg(long)]
        out_dir: PathBuf,
        /// Shorthand for `grid.resolution`.
        #[arg(long)]
        resolution: Option<f64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Query session with descriptors from keyframe scans and `poses.tum`.
    Mkquery {
        /// Holds `poses.tum` and one `<timestamp>.ply` scan per keyframe, directly or under `scans/`.
        #[arg(long)]
        keyframes_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Align a query session to a reference session and map.
    Anchor {
        /// Query session directory.
        #[arg(long)]
        query: PathBuf,
        /// Reference session directory.
        #[arg(long)]
        reference: PathBuf,
        /// Final ICP target: a PLY cloud, or a PLY/STL mesh sampled at `anchor.reference_sampling`.
        #[arg(long)]
        reference_cloud: PathBuf,
        /// Receives trajectories, graph, confidence classes and the aligned session under `aligned/`.
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Changes between an aligned session and the reference map.
    Diff {
        /// Session whose keyframe poses are world poses, e.g. `anchor`'s `aligned/`.
        #[arg(long)]
        aligned_session: PathBuf,
        /// A PLY cloud, or a PLY/STL mesh sampled at `anchor.reference_sampling`.
        #[arg(long)]
        reference_cloud: PathBuf,
        /// Receives clouds, the colored change mesh and `report.json`.
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Absolute pose error between two TUM trajectories.
    Eval {
        /// TUM trajectory.
        #[arg(long)]
        estimate: PathBuf,
        /// TUM trajectory.
        #[arg(long)]
        ground_truth: PathBuf,
        /// Rigidly align the estimate first.
        #[arg(long)]
        align: bool,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

enum Failure {
    Usage(String),
    Pipeline(mapanchor::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.0)
    }
}

impl From<mapanchor::Error> for Failure {
    fn from(e: mapanchor::Error) -> Self {
        Failure::Pipeline(e)
    }
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Pipeline(mapanchor::Error::Io { path: path.into(), source: e }))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Pipeline(mapanchor::Error::Io { path: dir.into(), source: e }))
}

fn load_target(path: &Path, spacing: f64) -> Result<PointCloud, Failure> {
    let is_ply = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if !is_ply {
        return Ok(load_mesh(path)?.sample_surface(spacing)?);
    }
    let (vertices, triangles) = read_mesh(path)?;
    if triangles.is_empty() {
        return Ok(read_cloud(path)?);
    }
    Ok(TriangleMesh::new(vertices, triangles)?.sample_surface(spacing)?)
}

fn map2sd(cfg: &Config, seed: u64, mesh: &Path, cloud: Option<&Path>, floor_z: f64, out: &Path) -> Result<(), Failure> {
    require(mesh, "mesh")?;
    if let Some(c) = cloud {
        require(c, "cloud")?;
    }
    let mesh = load_mesh(mesh)?;
    let cloud = cloud.map(read_cloud).transpose()?;
    let result = map_to_session(&mesh, cloud.as_ref(), floor_z, &cfg.map_to_session(seed))?;
    save_session(&result.session, out, Some(&cfg.isc))?;
    result.grid.write_map(out, "map")?;
    eprintln!(
        "map2sd: {} keyframes, grid {}x{} at {} m",
        result.session.len(),
        result.grid.width(),
        result.grid.height(),
        result.grid.resolution()
    );
    Ok(())
}

fn query_options(cfg: &Config, label: Option<&str>) -> LoadOptions {
    LoadOptions {
        min_time_gap: cfg.query.min_time_gap,
        odometry_information: Edge::isotropic_information(cfg.query.odometry_variance),
        label: label.map(str::to_string),
    }
}

fn mkquery(cfg: &Config, dir: &Path, out: &Path) -> Result<(), Failure> {
    require(dir, "keyframes directory")?;
    let mut session = load_keyframes(dir, &query_options(cfg, Some("query")))?;
    session.recompute_descriptors(&cfg.isc);
    save_session(&session, out, Some(&cfg.isc))?;
    eprintln!("mkquery: {} keyframes", session.len());
    Ok(())
}

fn anchor(cfg: &Config, query: &Path, reference: &Path, cloud: &Path, out: &Path) -> Result<(), Failure> {
    require(query, "query session")?;
    require(reference, "reference session")?;
    require(cloud, "reference cloud")?;
    let q = load_session(query, &query_options(cfg, None))?;
    let r = load_session(reference, &LoadOptions::default())?;
    let target = load_target(cloud, cfg.anchor.reference_sampling)?;
    let result = mapanchor::pipeline::run(&q, &r, &target, &cfg.anchor)?;
    result.write(out)?;
    save_session(&result.aligned_session(&q)?, out.join("aligned"), Some(&cfg.isc))?;
    let count = |c: &str| result.icp_log.iter().filter(|e| e.class.to_string() == c).count();
    eprintln!(
        "anchor: {} descriptor and {} neighbourhood encounters; Perfect {} Good {} Bad {} OutsideMap {}",
        result.isc_encounters.len(),
        result.knn_encounters.len(),
        count("Perfect"),
        count("Good"),
        count("Bad"),
        count("OutsideMap")
    );
    Ok(())
}

fn diff(cfg: &Config, aligned: &Path, cloud: &Path, out: &Path) -> Result<(), Failure> {
    require(aligned, "aligned session")?;
    require(cloud, "reference cloud")?;
    let session = load_keyframes(aligned, &LoadOptions::default())?;
    let reference = load_target(cloud, cfg.anchor.reference_sampling)?;
    let scans: Vec<(&PointCloud, Pose3)> = session.keyframes().iter().map(|k| (&k.scan, k.odom_pose)).collect();
    let report = detect_changes(&scans, &reference, &cfg.diff)?;
    report.write(out, cfg.diff.resolution)?;
    let s = report.summary();
    println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
    Ok(())
}

fn eval(cfg: &Config, estimate: &Path, truth: &Path, align: bool, out: Option<&Path>) -> Result<(), Failure> {
    require(estimate, "estimate")?;
    require(truth, "ground truth")?;
    let options = ApeOptions { align, max_time_diff: cfg.eval.max_time_diff };
    let report = evaluate_ape(&read_tum(estimate)?, &read_tum(truth)?, &options)?;
    println!(
        "pairs {}  translational RMSE {:.4} cm (max {:.4})  rotational RMSE {:.5} deg (max {:.5})",
        report.pairs.len(),
        report.translational_rmse,
        report.translational.max,
        report.rotational_rmse,
        report.rotational.max
    );
    if let Some(p) = out {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write_text(p, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot set thread count: {e}")))?;
    }
    let config_file = cli.config.as_deref();
    if let Some(p) = config_file {
        require(p, "config file")?;
    }
    let load = |o: &Overrides, extra: Vec<String>| -> Result<Config, Failure> {
        let all: Vec<String> = o.set.iter().cloned().chain(extra).collect();
        let c = Config::load(config_file, &all)?;
        c.validate()?;
        Ok(c)
    };
    match &cli.command {
        Command::Map2sd { mesh, cloud, floor_z, out_dir, resolution, overrides } => {
            let extra = resolution.map(|r| format!("grid.resolution={r}")).into_iter().collect();
            let cfg = load(overrides, extra)?;
            map2sd(&cfg, cli.seed, mesh, cloud.as_deref(), *floor_z, out_dir)
        }
        Command::Mkquery { keyframes_dir, out_dir, overrides } => mkquery(&load(overrides, vec![])?, keyframes_dir, out_dir),
        Command::Anchor { query, reference, reference_cloud, out_dir, overrides } => {
            anchor(&load(overrides, vec![])?, query, reference, reference_cloud, out_dir)
        }
        Command::Diff { aligned_session, reference_cloud, out_dir, overrides } => {
            diff(&load(overrides, vec![])?, aligned_session, reference_cloud, out_dir)
        }
        Command::Eval { estimate, ground_truth, align, out, overrides } => {
            eval(&load(overrides, vec![])?, estimate, ground_truth, *align, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let reference = config::key_reference();
    let mut command = Cli::command().after_long_help(reference.clone());
    for name in ["map2sd", "mkquery", "anchor", "diff", "eval"] {
        command = command.mut_subcommand(name, |c| c.after_long_help(reference.clone()));
    }
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e} [{}]", error_kind(&e));
            ExitCode::from(1)
        }
    }
}

// the variant name, for scripts matching on failures
fn error_kind(e: &mapanchor::Error) -> String {
    let d = format!("{e:?}");
    d.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string()
}
