use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use mains::array::ArrayGeometry;
use mains::dataio::{
    dataset_dir_name, load_dataset, load_with_geometry, read_trajectory, save_dataset,
    write_trajectory, Dataset,
};
use mains::eskf::{run_filter, FilterConfig};
use mains::eval::{compute_metrics, error_series, format_table, MetricsReport, SpeedError};
use mains::sim::{Scenario, TruthMode};

#[derive(Parser)]
#[command(name = "mains", version)]
#[command(about = "Magnetic-field aided inertial navigation: simulate, run, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset from a scenario
    Simulate {
        /// Scenario file (TOML); defaults to 120 s of square laps
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the scenario length, s
        #[arg(long)]
        duration: Option<f64>,
        /// Linear field with discrete-model truth instead of the scenario world
        #[arg(long)]
        exact_model: bool,
        /// Geometry preset name or file
        #[arg(long)]
        geometry: Option<String>,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the filter over a dataset and write the trajectory
    Run {
        #[command(flatten)]
        filter: FilterArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Output trajectory file
        #[arg(long, default_value = "trajectory.csv")]
        out: PathBuf,
    },
    /// Compare a trajectory with the dataset's ground truth
    Eval {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 60.0)]
        aiding_seconds: f64,
        #[arg(long, value_enum, default_value_t = Speed::Scalar)]
        speed: Speed,
        /// Machine-readable metrics (JSON)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also print both speed-error definitions
        #[arg(long, short)]
        verbose: bool,
    },
    /// Run and evaluate several datasets and print a results grid
    Table {
        #[command(flatten)]
        filter: FilterArgs,
        #[arg(long, required = true, num_args = 1..)]
        dataset: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Speed::Scalar)]
        speed: Speed,
        /// Write the grid here as well as to stdout; a .json extension writes the metrics
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write plot-ready columns: estimate, truth, errors, σ and field magnitude
    Plotdata {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "plot.csv")]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct FilterArgs {
    /// Filter configuration (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Geometry preset name or file, overriding the dataset's
    #[arg(long)]
    geometry: Option<String>,
    /// Polynomial order of the field model
    #[arg(long)]
    order: Option<usize>,
    /// Disable magnetometer updates (inertial navigation only)
    #[arg(long)]
    no_mag: bool,
    /// Length of the position-aided start, s
    #[arg(long)]
    aiding_seconds: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Speed {
    Scalar,
    Vector,
}

impl From<Speed> for SpeedError {
    fn from(s: Speed) -> Self {
        match s {
            Speed::Scalar => SpeedError::Scalar,
            Speed::Vector => SpeedError::Vector,
        }
    }
}

fn geometry_arg(spec: &str) -> Result<ArrayGeometry> {
    if let Some(g) = ArrayGeometry::preset(spec) {
        return Ok(g);
    }
    ArrayGeometry::load(Path::new(spec)).with_context(|| format!("loading geometry {spec:?}"))
}

impl FilterArgs {
    fn config(&self) -> Result<FilterConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                FilterConfig::from_toml(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => FilterConfig::default(),
        };
        if let Some(order) = self.order {
            cfg.order = order;
        }
        if self.no_mag {
            cfg.mag_updates = false;
        }
        if let Some(s) = self.aiding_seconds {
            cfg.aiding_seconds = s;
        }
        Ok(cfg)
    }

    fn load(&self, dir: &Path) -> Result<Dataset> {
        let ds = match &self.geometry {
            Some(spec) => load_with_geometry(dir, geometry_arg(spec)?),
            None => load_dataset(dir),
        };
        ds.with_context(|| format!("loading dataset {}", dir.display()))
    }
}

fn run_one(
    args: &FilterArgs,
    cfg: &FilterConfig,
    dir: &Path,
    speed: SpeedError,
) -> Result<MetricsReport> {
    let ds = args.load(dir)?;
    let truth = ds.truth.as_ref().context("dataset has no ground truth")?;
    let run = run_filter(&ds, &ds.geometry, cfg)
        .with_context(|| format!("filtering {}", dir.display()))?;
    Ok(compute_metrics(
        &run.trajectory(),
        truth,
        cfg.aiding_seconds,
        speed,
    )?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate {
            config,
            seed,
            duration,
            exact_model,
            geometry,
            out,
        } => {
            let mut scenario = match &config {
                Some(path) => {
                    let text = fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    Scenario::from_toml(&text)
                        .with_context(|| format!("parsing {}", path.display()))?
                }
                None => Scenario::default(),
            };
            if exact_model {
                let mut exact = Scenario::exact_model(scenario.trajectory.duration());
                exact.trajectory = scenario.trajectory.clone();
                exact.noise = scenario.noise.clone();
                exact.options.truth = TruthMode::Discrete;
                scenario = exact;
            }
            if let Some(d) = duration {
                let mains::sim::TrajectoryScript::SquareLaps(sq) = &mut scenario.trajectory else {
                    bail!("--duration only applies to square-lap scenarios");
                };
                sq.laps = sq.laps_for_duration(d);
            }
            let geo = geometry_arg(geometry.as_deref().unwrap_or(&scenario.geometry))?;
            let ds = scenario.generate(&geo, seed)?;
            save_dataset(&ds, &out).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "wrote {} ({} IMU samples, {} snapshots, {:.1} s)",
                out.display(),
                ds.imu.len(),
                ds.mag.len(),
                ds.duration()
            );
        }
        Command::Run {
            filter,
            dataset,
            out,
        } => {
            let cfg = filter.config()?;
            let ds = filter.load(&dataset)?;
            let run = run_filter(&ds, &ds.geometry, &cfg)?;
            write_trajectory(&out, &run.trajectory())?;
            if !run.rejected.is_empty() {
                eprintln!(
                    "warning: {} snapshots with non-finite readings skipped",
                    run.rejected.len()
                );
            }
            println!("wrote {} ({} epochs)", out.display(), run.epochs.len());
        }
        Command::Eval {
            trajectory,
            dataset,
            aiding_seconds,
            speed,
            out,
            verbose,
        } => {
            let traj = read_trajectory(&trajectory)?;
            let ds = load_dataset(&dataset)?;
            let truth = ds.truth.as_ref().context("dataset has no ground truth")?;
            let m = compute_metrics(&traj, truth, aiding_seconds, speed.into())?;
            print!(
                "{}",
                format_table(&[(dataset_dir_name(&dataset), m.clone())])
            );
            if verbose {
                println!("RMS speed difference (m/s): {:.3}", m.rms_speed_scalar);
                println!("RMS velocity error (m/s):   {:.3}", m.rms_velocity);
            }
            if let Some(path) = out {
                fs::write(&path, serde_json::to_string_pretty(&m)?)?;
            }
        }
        Command::Table {
            filter,
            dataset,
            speed,
            out,
        } => {
            let cfg = filter.config()?;
            let columns: Vec<(String, MetricsReport)> = dataset
                .par_iter()
                .map(|dir| {
                    Ok((
                        dataset_dir_name(dir),
                        run_one(&filter, &cfg, dir, speed.into())?,
                    ))
                })
                .collect::<Result<_>>()?;
            let table = format_table(&columns);
            print!("{table}");
            if let Some(path) = out {
                if path.extension().is_some_and(|e| e == "json") {
                    let map: serde_json::Map<String, serde_json::Value> = columns
                        .iter()
                        .map(|(k, m)| Ok((k.clone(), serde_json::to_value(m)?)))
                        .collect::<Result<_>>()?;
                    fs::write(&path, serde_json::to_string_pretty(&map)?)?;
                } else {
                    fs::write(&path, table)?;
                }
            }
        }
        Command::Plotdata {
            trajectory,
            dataset,
            out,
        } => {
            let traj = read_trajectory(&trajectory)?;
            let ds = load_dataset(&dataset)?;
            let truth = ds.truth.as_ref().context("dataset has no ground truth")?;
            let align = ds.align();
            let errors = error_series(&traj, truth);
            let mut text = String::from(
                "t,px,py,pz,gt_px,gt_py,gt_pz,err_h,err_v,sigma_px,sigma_py,sigma_pz,b_mean,b_min,b_max\n",
            );
            let imu_t: Vec<f64> = ds.imu.iter().map(|u| u.t).collect();
            for (pt, (t, dp, _)) in traj.iter().zip(&errors) {
                let gt = pt.p - dp;
                let sig = |i: usize| pt.cov_diag.get(i).map_or(f64::NAN, |v| v.sqrt());
                let k = imu_t.partition_point(|&x| x < *t).min(imu_t.len() - 1);
                let (mean, lo, hi) = match align.mag.get(k).copied().flatten() {
                    Some(j) => {
                        let mags: Vec<f64> = ds.mag[j]
                            .values
                            .as_slice()
                            .chunks(3)
                            .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
                            .collect();
                        let mean = mags.iter().sum::<f64>() / mags.len() as f64;
                        let lo = mags.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = mags.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        (mean, lo, hi)
                    }
                    None => (f64::NAN, f64::NAN, f64::NAN),
                };
                text.push_str(&format!(
                    "{t},{},{},{},{},{},{},{},{},{},{},{},{mean},{lo},{hi}\n",
                    pt.p.x,
                    pt.p.y,
                    pt.p.z,
                    gt.x,
                    gt.y,
                    gt.z,
                    dp.xy().norm(),
                    dp.z.abs(),
                    sig(0),
                    sig(1),
                    sig(2),
                ));
            }
            fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} ({} rows)", out.display(), traj.len());
        }
    }
    Ok(())
}
