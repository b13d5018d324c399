use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use rtfgo::engine::run_streams;
use rtfgo::eval::{self, EstimatePoint, EvaluationReport, TimingStats, DEFAULT_THRESHOLDS};
use rtfgo::io::{self, Dataset, GtSample};
use rtfgo::sim::Scenario;
use rtfgo::{EngineConfig, EngineError};

#[derive(Parser)]
#[command(name = "rtfgo", version, about = "Real-time GNSS/IMU factor graph fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset directory from a scenario.
    Simulate {
        /// Built-in scenario name or path to a scenario JSON file.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fuse a dataset and write the estimated trajectory.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        /// Smoothing latency in GNSS epochs.
        #[arg(long, default_value_t = 0)]
        tau: u64,
        /// Marginalization lag in seconds, or `inf`.
        #[arg(long, default_value = "inf", value_parser = parse_lag)]
        marg_lag: Lag,
        /// Longest IMU-only propagation, s.
        #[arg(long, default_value_t = 4.0)]
        max_imu_prop: f64,
        #[arg(long, value_enum, default_value_t = Mode::Rt)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trajectory CSV against ground truth.
    Evaluate {
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerun a dataset over several values of one parameter.
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma separated, e.g. `5,10,20,50,inf`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Rt,
    Batch,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Tau,
    MargLag,
}

#[derive(Clone, Copy, Debug)]
struct Lag(Option<f64>);

fn parse_lag(s: &str) -> Result<Lag, String> {
    if s.eq_ignore_ascii_case("inf") {
        return Ok(Lag(None));
    }
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(Lag(Some(v))),
        _ => Err(format!("expected a positive number of seconds or `inf`, got `{s}`")),
    }
}

/// Failure classes mapped onto the process exit code.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numerical(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Numerical(e) => e,
        }
    }
}

fn bad_data<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Data(e.into())
}

fn engine_failure(e: EngineError) -> Failure {
    match e {
        EngineError::Config(_) => Failure::Usage(e.into()),
        e if e.is_numerical() => Failure::Numerical(e.into()),
        e => Failure::Data(e.into()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Simulate { scenario, out, seed } => simulate(&scenario, &out, seed),
        Command::Run {
            dataset,
            tau,
            marg_lag,
            max_imu_prop,
            mode,
            out,
        } => {
            let data = Dataset::read(&dataset).map_err(bad_data)?;
            let config = engine_config(&data, tau, marg_lag, max_imu_prop, mode)?;
            run(&data, &config, &out).map(|_| ())
        }
        Command::Evaluate { estimates, gt, out } => evaluate(&estimates, &gt, &out),
        Command::Sweep {
            dataset,
            param,
            values,
            out,
        } => sweep(&dataset, param, &values, &out),
    }
}

fn simulate(scenario: &str, out: &Path, seed: u64) -> Result<(), Failure> {
    let scenario = Scenario::load(scenario).map_err(|e| match e {
        rtfgo::sim::SimError::UnknownScenario(_) => Failure::Usage(e.into()),
        e => Failure::Data(e.into()),
    })?;
    let sim = scenario.simulate(seed).map_err(bad_data)?;
    let dataset = Dataset {
        imu: sim.imu,
        gnss: sim.gnss,
        gt: sim.gt.states.iter().map(|s| GtSample::new(s.t, s.p)).collect(),
        anchor: sim.anchor,
        imu_params: sim.imu_params,
    };
    dataset.write(out).map_err(bad_data)?;
    info!(
        "scenario {} seed {seed}: {} IMU samples, {} fixes, {} ground-truth epochs -> {}",
        scenario.name,
        dataset.imu.len(),
        dataset.gnss.len(),
        dataset.gt.len(),
        out.display()
    );
    Ok(())
}

fn engine_config(data: &Dataset, tau: u64, lag: Lag, max_imu_prop: f64, mode: Mode) -> Result<EngineConfig, Failure> {
    let config = EngineConfig {
        smoothing_latency_tau: tau,
        marginalization_lag: lag.0,
        max_imu_propagation: max_imu_prop,
        imu_noise: data.imu_params,
        ..Default::default()
    };
    let config = match mode {
        Mode::Rt => config,
        Mode::Batch => config.batch(),
    };
    config.validate().map_err(engine_failure)?;
    Ok(config)
}

/// Runs the engine and writes the trajectory, timing and, when the dataset
/// has ground truth, the metrics.
fn run(data: &Dataset, config: &EngineConfig, out: &Path) -> Result<(Option<EvaluationReport>, Option<TimingStats>), Failure> {
    let output = run_streams(config, &data.imu, &data.gnss).map_err(engine_failure)?;
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(Failure::Data)?;
    io::write_trajectory(&out.join(eval::TRAJECTORY_FILE), &output.estimates).map_err(bad_data)?;
    let timing = TimingStats::from_samples(&output.optimize_ms);
    if let Some(t) = &timing {
        io::write_json(&out.join(eval::TIMING_FILE), t).map_err(bad_data)?;
    }
    info!("{} estimates written to {}", output.estimates.len(), out.display());
    if data.gt.is_empty() {
        return Ok((None, timing));
    }
    let points: Vec<EstimatePoint> = output.estimates.iter().map(EstimatePoint::from).collect();
    let report = eval::evaluate(&points, &data.gt, &DEFAULT_THRESHOLDS).map_err(bad_data)?;
    eval::emit_report(&report, None, out).map_err(bad_data)?;
    info!("3D RMSE {:.3} m", report.rmse_3d_m);
    Ok((Some(report), timing))
}

fn evaluate(estimates: &Path, gt: &Path, out: &Path) -> Result<(), Failure> {
    let rows = io::read_trajectory(estimates).map_err(bad_data)?;
    let gt = io::read_gt(gt).map_err(bad_data)?;
    let points: Vec<EstimatePoint> = rows.iter().map(EstimatePoint::from).collect();
    let report = eval::evaluate(&points, &gt, &DEFAULT_THRESHOLDS).map_err(bad_data)?;
    eval::emit_report(&report, None, out).map_err(bad_data)?;
    info!("3D RMSE {:.3} m over {} estimates", report.rmse_3d_m, report.counts.estimates);
    Ok(())
}

#[derive(serde::Serialize)]
struct SweepRow {
    param: &'static str,
    value: String,
    rmse_3d_m: Option<f64>,
    rmse_east_m: Option<f64>,
    rmse_north_m: Option<f64>,
    rmse_up_m: Option<f64>,
    availability_50m_pct: Option<f64>,
    mean_optimize_ms: Option<f64>,
    p95_optimize_ms: Option<f64>,
}

fn sweep(dataset: &Path, param: SweepParam, values: &[String], out: &Path) -> Result<(), Failure> {
    let data = Dataset::read(dataset).map_err(bad_data)?;
    let mut rows = Vec::with_capacity(values.len());
    for raw in values {
        let raw = raw.trim();
        let (name, config) = match param {
            SweepParam::Tau => {
                let tau = raw
                    .parse::<u64>()
                    .map_err(|_| Failure::Usage(anyhow::anyhow!("invalid tau `{raw}`")))?;
                ("tau", engine_config(&data, tau, Lag(None), 4.0, Mode::Rt)?)
            }
            SweepParam::MargLag => {
                let lag = parse_lag(raw).map_err(|e| Failure::Usage(anyhow::anyhow!(e)))?;
                ("marg_lag", engine_config(&data, 0, lag, 4.0, Mode::Rt)?)
            }
        };
        info!("{name} = {raw}");
        let (report, timing) = run(&data, &config, &out.join(format!("{name}_{raw}")))?;
        let a50 = report
            .as_ref()
            .and_then(|r| r.availability.iter().find(|a| a.theta_m == 50.0))
            .map(|a| a.availability_pct);
        rows.push(SweepRow {
            param: name,
            value: raw.to_string(),
            rmse_3d_m: report.as_ref().map(|r| r.rmse_3d_m),
            rmse_east_m: report.as_ref().map(|r| r.rmse_east_m),
            rmse_north_m: report.as_ref().map(|r| r.rmse_north_m),
            rmse_up_m: report.as_ref().map(|r| r.rmse_up_m),
            availability_50m_pct: a50,
            mean_optimize_ms: timing.map(|t| t.mean_ms),
            p95_optimize_ms: timing.map(|t| t.p95_ms),
        });
    }
    let path = out.join("sweep.csv");
    let file = File::create(&path).with_context(|| path.display().to_string()).map_err(Failure::Data)?;
    let mut w = csv::Writer::from_writer(file);
    for r in &rows {
        w.serialize(r).map_err(bad_data)?;
    }
    w.flush().map_err(bad_data)?;
    info!("sweep summary written to {}", path.display());
    Ok(())
}
