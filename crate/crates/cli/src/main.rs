use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use log::info;

use lora_mud::detector::calibrate_threshold;
use lora_mud::harness::{
    bound_curve, prepare_link, run_ser_experiment, sweep, write_bound_csv, write_ser_csv,
    DetectorMode, ExperimentConfig, SweepAxis,
};
use lora_mud::power_control::write_trace_csv;
use lora_mud::stats::ActiveBinStats;
use lora_mud::NetworkTopology;

/// Multi-gateway LoRa multi-user detection simulator.
#[derive(Parser, Debug)]
#[command(name = "lora-mud", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte Carlo SER over the reference-SNR grid.
    #[command(args_override_self = true)]
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        io: OutputArgs,
    },
    /// Stage-1 threshold and its error bound curve for one topology.
    #[command(args_override_self = true)]
    CalibrateThreshold {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        io: OutputArgs,
        #[command(flatten)]
        point: PointArgs,
        /// Points of the bound curve.
        #[arg(long, default_value_t = 200)]
        points: usize,
    },
    /// Power allocation and SCA trace for one topology.
    #[command(args_override_self = true)]
    PowerControl {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        io: OutputArgs,
        #[command(flatten)]
        point: PointArgs,
        /// Write the final allocation as CSV here.
        #[arg(long)]
        allocation_out: Option<PathBuf>,
    },
    /// Repeat the SER experiment over one axis with shared seeds.
    #[command(args_override_self = true)]
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        io: OutputArgs,
        /// n_antennas | alpha | snr
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        values: Vec<f64>,
    },
}

#[derive(Args, Debug)]
struct OutputArgs {
    /// Output CSV path; stdout when absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Save the first topology used as JSON.
    #[arg(long)]
    save_topology: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PointArgs {
    /// Reference SNR in dB; defaults to the first grid value.
    #[arg(long, allow_hyphen_values = true)]
    snr: Option<f64>,
    /// Which generated topology to use.
    #[arg(long, default_value_t = 0)]
    topology_index: usize,
}

/// Every field is optional so that only flags actually given override the
/// config file.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML file whose keys are ExperimentConfig field names.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    experiment_id: Option<String>,
    #[arg(long)]
    sf: Option<u32>,
    #[arg(long)]
    bandwidth_hz: Option<f64>,
    #[arg(long)]
    n_gateways: Option<usize>,
    #[arg(long)]
    n_devices: Option<usize>,
    #[arg(long)]
    n_antennas: Option<usize>,
    #[arg(long)]
    cell_radius_km: Option<f64>,
    #[arg(long)]
    gw_ring_radius_km: Option<f64>,
    #[arg(long)]
    gw_height_m: Option<f64>,
    #[arg(long)]
    ed_gw_min_distance_m: Option<f64>,
    #[arg(long)]
    ed_ed_min_distance_m: Option<f64>,
    #[arg(long)]
    shadowing_std_db: Option<f64>,
    #[arg(long)]
    noise_figure_db: Option<f64>,
    /// Comma-separated reference SNR grid in dB.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr_db: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_topologies: Option<usize>,
    /// JSON topology to use instead of random ones.
    #[arg(long)]
    topology_file: Option<String>,
    /// ml | two-stage
    #[arg(long)]
    detector: Option<DetectorMode>,
    #[arg(long, action = ArgAction::Set)]
    power_control: Option<bool>,
    #[arg(long, action = ArgAction::Set)]
    surjective: Option<bool>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    epsilon_db: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    p_max_dbm: Option<f64>,
    #[arg(long)]
    pc_tol: Option<f64>,
    #[arg(long)]
    pc_max_iter: Option<usize>,
}

macro_rules! override_fields {
    ($cfg:expr, $args:expr, $($field:ident),* $(,)?) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })*
    };
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        override_fields!(
            cfg, self, experiment_id, sf, bandwidth_hz, n_gateways, n_devices, n_antennas,
            cell_radius_km, gw_ring_radius_km, gw_height_m, ed_gw_min_distance_m,
            ed_ed_min_distance_m, shadowing_std_db, noise_figure_db, snr_db, trials, seed,
            n_topologies, detector, power_control, surjective, alpha, epsilon_db, pc_tol,
            pc_max_iter,
        );
        if self.topology_file.is_some() {
            cfg.topology_file = self.topology_file.clone();
        }
        if self.p_max_dbm.is_some() {
            cfg.p_max_dbm = self.p_max_dbm;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn save_topology(path: Option<&Path>, topo: &NetworkTopology) -> Result<()> {
    if let Some(p) = path {
        std::fs::write(p, topo.to_json()?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn pick_topology(cfg: &ExperimentConfig, index: usize) -> Result<NetworkTopology> {
    let mut topologies = cfg.topologies()?;
    if index >= topologies.len() {
        bail!("topology index {index} out of range ({} available)", topologies.len());
    }
    Ok(topologies.swap_remove(index))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { cfg, io } => {
            let cfg = cfg.resolve()?;
            save_topology(io.save_topology.as_deref(), &cfg.topologies()?[0])?;
            let records = run_ser_experiment(&cfg)?;
            let mut out = output(io.out.as_deref())?;
            write_ser_csv(&records, &mut out)?;
            out.flush()?;
        }
        Command::CalibrateThreshold { cfg, io, point, points } => {
            let cfg = cfg.resolve()?;
            let topo = pick_topology(&cfg, point.topology_index)?;
            save_topology(io.save_topology.as_deref(), &topo)?;
            let snr = point.snr.unwrap_or(cfg.snr_db[0]);
            let link = prepare_link(&cfg, &topo, snr)?;
            let stats = ActiveBinStats::new(&topo, &link.powers, cfg.spreading()?.m())?;
            let cal = calibrate_threshold(&stats)?;
            eprintln!(
                "p_th={:e} ({:.4} x noise) p_error_ub={:e}",
                cal.p_th,
                cal.p_th / topo.sigma2,
                cal.p_error_ub
            );
            let mut out = output(io.out.as_deref())?;
            write_bound_csv(&bound_curve(&stats, points)?, &mut out)?;
            out.flush()?;
        }
        Command::PowerControl { cfg, io, point, allocation_out } => {
            let mut cfg = cfg.resolve()?;
            cfg.power_control = true;
            if cfg.n_devices < 2 {
                bail!("power control needs at least two devices");
            }
            let topo = pick_topology(&cfg, point.topology_index)?;
            save_topology(io.save_topology.as_deref(), &topo)?;
            let snr = point.snr.unwrap_or(cfg.snr_db[0]);
            let link = prepare_link(&cfg, &topo, snr)?;
            let pc = link.power_control.as_ref().context("power control did not run")?;
            info!(
                "lambda {:.6} after {} iterations (converged: {})",
                pc.state.lambda_current, pc.state.iteration, pc.state.converged
            );
            if let Some(path) = allocation_out {
                let mut w = output(Some(&path))?;
                writeln!(w, "device,p_su_mw,p_sca_mw,p_final_mw")?;
                for g in 0..topo.n_devices() {
                    writeln!(
                        w,
                        "{},{:e},{:e},{:e}",
                        g, link.p_su[g], pc.allocation.p[g], link.powers[g]
                    )?;
                }
                w.flush()?;
            }
            let mut out = output(io.out.as_deref())?;
            write_trace_csv(&pc.state, &mut out)?;
            out.flush()?;
        }
        Command::Sweep { cfg, io, axis, values } => {
            let cfg = cfg.resolve()?;
            save_topology(io.save_topology.as_deref(), &cfg.topologies()?[0])?;
            let records = sweep(&cfg, axis, &values)?;
            let mut out = output(io.out.as_deref())?;
            write_ser_csv(&records, &mut out)?;
            out.flush()?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    run(Cli::parse())
}
