//! `chuteflow` command-line driver.

use std::path::PathBuf;
use std::process::ExitCode;

use chuteflow::nets::ModelKind;
use chuteflow::pipeline::{self, ObservationSpec, PipelineConfig, ReconRequest};
use chuteflow::report::report_archive;
use chuteflow::sampler::GuidanceMode;
use chuteflow::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "chuteflow", version, about = "Granular chute-flow simulation and guided flow-matching reconstruction")]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, env = "CHUTEFLOW_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the DEM for every instance and archive the snapshots.
    Simulate {
        /// Only these instances.
        #[arg(long = "instance")]
        instances: Vec<u32>,
    },
    /// Coarse-grain archived snapshots onto the Eulerian grid.
    Grid,
    /// Build the split and normalization statistics.
    Dataset,
    /// Train one model.
    Train {
        #[arg(long, value_parser = parse_kind)]
        kind: ModelKind,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Draw unguided samples for one slice.
    Sample {
        #[arg(long)]
        slice: usize,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Reconstruct interior slices of the test instance from its boundary.
    Reconstruct {
        #[arg(long)]
        coverage: Option<f64>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long = "slice")]
        slices: Vec<usize>,
        #[arg(long)]
        frame: Option<usize>,
        /// Ensemble size for mean/std estimates.
        #[arg(long, default_value_t = 1)]
        uq: usize,
        #[arg(long, value_parser = parse_mode, default_value = "sparse")]
        guidance: GuidanceMode,
        /// Also decode (p, q, T) from the reconstructed velocity.
        #[arg(long)]
        decode_physics: bool,
        /// Output subdirectory under `recon/`.
        #[arg(long)]
        label: Option<String>,
    },
    /// Coverage-ratio and stride sweeps.
    Sweep,
    /// SVG figures and a summary table for a reconstruction archive.
    Report {
        /// Reconstruction label under `recon/`.
        #[arg(long, conflicts_with = "archive")]
        recon: Option<String>,
        /// Any reconstruction archive directory.
        #[arg(long)]
        archive: Option<PathBuf>,
    },
    /// All desk-scale experiments on the test instance.
    Eval,
    /// Every stage from simulation to evaluation.
    Run,
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    ModelKind::parse(s).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<GuidanceMode, String> {
    GuidanceMode::parse(s).map_err(|e| e.to_string())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "undefined".into())
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::config("worker count must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    cfg.validate()?;
    match cli.command {
        Command::Simulate { instances } => {
            pipeline::simulate(&cfg, (!instances.is_empty()).then_some(&instances[..]))?;
        }
        Command::Grid => pipeline::grid(&cfg)?,
        Command::Dataset => {
            let ds = pipeline::build_dataset(&cfg)?;
            println!(
                "train {} / val {} samples, test instance {}",
                ds.split.train.len(),
                ds.split.val.len(),
                ds.split.test_instance
            );
        }
        Command::Train { kind, resume, epochs } => {
            if let Some(e) = epochs {
                let t = match kind {
                    ModelKind::Backbone => &mut cfg.backbone,
                    ModelKind::Forward => &mut cfg.forward,
                    ModelKind::Decoder => &mut cfg.decoder,
                    ModelKind::Baseline => &mut cfg.baseline,
                };
                t.epochs = e;
            }
            let log = pipeline::train_model(&cfg, kind, resume)?;
            if let Some(last) = log.rows.last() {
                println!("{}: epoch {} train {:.6e} val {}", kind.name(), last.epoch, last.train_loss, fmt_opt(last.val_loss));
            }
        }
        Command::Sample { slice, count } => {
            let out = pipeline::cmd_sample(&cfg, slice, count)?;
            println!("{} samples written for slice {slice}", out.len());
        }
        Command::Reconstruct {
            coverage,
            stride,
            slices,
            frame,
            uq,
            guidance,
            decode_physics,
            label,
        } => {
            let mut obs = ObservationSpec {
                frame: frame.or(cfg.observation.frame),
                ..cfg.observation.clone()
            };
            if let Some(c) = coverage {
                obs.coverage = c;
            }
            if let Some(k) = stride {
                obs.stride = k;
            }
            if !slices.is_empty() {
                obs.slices = slices;
            }
            if uq == 0 {
                return Err(Error::config("--uq must be at least 1"));
            }
            let label = label.unwrap_or_else(|| {
                let mode = match guidance {
                    GuidanceMode::None => "none",
                    GuidanceMode::SparsityAware => "sparse",
                    GuidanceMode::NormalizedBaseline => "baseline",
                };
                format!("rho{}_k{}_{mode}_uq{uq}", obs.coverage, obs.stride)
            });
            let req = ReconRequest {
                obs,
                mode: guidance,
                members: uq,
                decode_physics,
            };
            for r in pipeline::cmd_reconstruct(&cfg, &req, &label)? {
                let rmse = pipeline::velocity_rmse(&r.truth, &r.mean, &r.active).ok();
                let rx = chuteflow::metrics::masked_pearson(r.truth.channel(0), r.mean.channel(0), &r.active).ok();
                println!("slice {}: rmse {} m/s, r_x {}", r.slice, fmt_opt(rmse), fmt_opt(rx));
            }
            println!("written to {}", cfg.layout().recon(&label).display());
        }
        Command::Sweep => {
            for r in pipeline::cmd_sweep(&cfg)? {
                println!("{} {}: rmse {} r_x {}", r.variable, r.value, fmt_opt(r.rmse), fmt_opt(r.r_x));
            }
        }
        Command::Report { recon, archive } => {
            let (src, name) = match (recon, archive) {
                (Some(l), None) => (cfg.layout().recon(&l), l),
                (None, Some(p)) => {
                    let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "archive".into());
                    (p, name)
                }
                _ => return Err(Error::config("report needs --recon or --archive")),
            };
            let out = cfg.layout().report().join(name);
            for f in report_archive(&src, &out)? {
                println!("{}", out.join(f).display());
            }
        }
        Command::Eval => print_eval(&pipeline::evaluate(&cfg)?),
        Command::Run => print_eval(&pipeline::run_all(&cfg)?),
    }
    Ok(())
}

fn print_eval(r: &pipeline::EvalReport) {
    println!("test instance {}, frame {} (t = {:.3} s)", r.test_instance, r.frame, r.time);
    for s in &r.slices {
        println!(
            "slice {}: rmse guided {} unguided {} | r_x guided {} unguided {} | empty rmse sparse {} baseline {} | std {}",
            s.slice,
            fmt_opt(s.rmse_guided),
            fmt_opt(s.rmse_unguided),
            fmt_opt(s.r_x_guided),
            fmt_opt(s.r_x_unguided),
            fmt_opt(s.empty_rmse_sparse),
            fmt_opt(s.empty_rmse_baseline),
            fmt_opt(s.mean_std)
        );
    }
    println!("ks {:?}", r.ks);
    println!("coverage 2sigma {} 3sigma {}", fmt_opt(r.coverage_2sigma), fmt_opt(r.coverage_3sigma));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
