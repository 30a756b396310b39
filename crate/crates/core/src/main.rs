use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use diffrx::channel::{encode_dataset, make_dataset};
use diffrx::diffusion::{denoising_errors, write_training_csv, DiffusionSchedule};
use diffrx::harness::config::ExperimentConfig;
use diffrx::harness::report::write_report;
use diffrx::harness::sweep::{
    self, frame, load_or_make_dataset, load_or_train_diffusion, read_metrics_csv, receiver_seed, train_diffusion,
    workers_from_env, write_baseline_csv, write_metrics_csv, BaselineRow, Method, Models,
};
use diffrx::harness::{nmse, symbol_error_rate};
use diffrx::modem::{FrameSpec, Modulation};
use diffrx::receiver::{run_receiver, write_trace_csv};

/// Diffusion-based channel estimation and data detection for MIMO-OFDM.
#[derive(Parser)]
#[command(name = "diffrx", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Channel dataset tools.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Train the diffusion denoiser and write its checkpoint.
    Train(TrainArgs),
    /// Run the receiver on one test frame.
    Receive(ReceiveArgs),
    /// Compare the receiver with the baseline estimators.
    Baseline(Common),
    /// Evaluate every cell of the configured sweep.
    Sweep(Common),
    /// Split a metrics table into per-figure files.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Generate a channel dataset file.
    Gen(GenArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Test frames per cell.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    /// Channel generator seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
    /// Where to write the checkpoint; defaults to the configured path or
    /// `<output_dir>/diffusion.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ReceiveArgs {
    #[command(flatten)]
    common: Common,
    /// Test frame index.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, allow_hyphen_values = true)]
    snr_db: Option<f64>,
    #[arg(long)]
    n_pilots: Option<usize>,
    #[arg(long)]
    modulation: Option<Modulation>,
    /// Write the per-step trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics table written by `sweep`.
    #[arg(long)]
    input: PathBuf,
    /// Directory for the figure files; defaults to the input's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(f) = common.frames {
        cfg.frames = f;
    }
    if let Some(d) = &common.output_dir {
        cfg.output_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn dataset_gen(args: GenArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(c) = args.count {
        cfg.dataset.count = c;
    }
    if let Some(s) = args.seed {
        cfg.dataset.channel.seed = s;
    }
    let Some(out) = args.out.or(cfg.dataset.path.clone()) else {
        bail!("no output path: pass --out or set [dataset].path");
    };
    let ds = make_dataset(&cfg.dataset.channel, cfg.dataset.count, cfg.dataset.train_fraction)?;
    std::fs::write(&out, encode_dataset(&ds)?).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} channels ({} train) to {}", ds.len(), ds.train_count(), out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.model.train.epochs = e;
    }
    let ckpt = args
        .checkpoint
        .or(cfg.model.checkpoint.clone())
        .unwrap_or_else(|| cfg.output_dir.join("diffusion.ckpt"));
    std::fs::create_dir_all(&cfg.output_dir)?;
    let data = load_or_make_dataset(&cfg)?;
    let per_entry = (cfg.model.network.n_ant * cfg.model.network.n_car) as f64;
    let (net, stats) = train_diffusion(&cfg, &data, &mut |s| {
        log(&format!("epoch {} loss/entry {:.4} ({:.0} s)", s.epoch, s.mean_loss / per_entry, s.wall_seconds))
    })?;
    net.save_checkpoint(&ckpt)?;
    write_training_csv(cfg.output_dir.join("training.csv"), &stats)?;
    let schedule = DiffusionSchedule::for_network(&net)?;
    let t = schedule.n_steps() / 10;
    let (net_err, id_err) = denoising_errors(&net, data.test(), t, &schedule, cfg.seed)?;
    println!("checkpoint: {}", ckpt.display());
    println!("test error at t={t}: denoiser {:.4} identity {:.4} per entry", net_err / per_entry, id_err / per_entry);
    Ok(())
}

fn receive(args: ReceiveArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let data = load_or_make_dataset(&cfg)?;
    let (net, _) = load_or_train_diffusion(&cfg, &data, &mut |s| log(&format!("training epoch {}", s.epoch)))?;
    let spec = FrameSpec::pilot_grid(
        data.n_car(),
        args.n_pilots.unwrap_or(cfg.sweep.n_pilots()[0]),
        args.modulation.unwrap_or(cfg.sweep.modulation()[0]),
    )?;
    let snr = args.snr_db.unwrap_or(cfg.sweep.snr_db()[0]);
    let fr = frame(cfg.seed, data.test(), &spec, snr, args.frame)?;
    let out = run_receiver(&fr.y, &spec, fr.sigma_n, &net, &cfg.receiver, receiver_seed(cfg.seed, args.frame), Some(&fr.h))?;
    println!(
        "frame {}: nmse {:.4} ser {:.4} steps {} early_quit {} final_e {:.4e}",
        args.frame,
        nmse(&out.h, &fr.h)?,
        symbol_error_rate(&out.x, &fr.x, &spec)?,
        out.steps,
        out.early_quit,
        out.final_e
    );
    if let Some(p) = args.trace {
        write_trace_csv(&p, &out.trace)?;
    }
    Ok(())
}

fn evaluate(cfg: &ExperimentConfig) -> Result<Vec<sweep::CellResult>> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let models = Models::prepare(cfg, &mut log)?;
    if let Some(stats) = &models.training {
        write_training_csv(cfg.output_dir.join("training.csv"), stats)?;
    }
    std::fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml())?;
    log(&format!("config hash {}", cfg.hash()));
    let results = sweep::run_sweep(cfg, &models, workers_from_env())?;
    for r in &results {
        log(&format!(
            "{} snr {} np {} {} M{} N{} zeta {:?} rho {} -> nmse {:.4} ({:.1} s)",
            r.row.method,
            r.row.snr_db,
            r.row.n_pilots,
            r.row.modulation,
            r.row.survivors,
            r.row.imaginations,
            [r.row.zeta1, r.row.zeta2, r.row.zeta3],
            r.row.rho,
            r.row.nmse_mean,
            r.row.wall_seconds
        ));
    }
    Ok(results)
}

fn run_sweep(common: Common) -> Result<()> {
    let cfg = load_config(&common)?;
    let results = evaluate(&cfg)?;
    let path = cfg.output_dir.join("metrics.csv");
    write_metrics_csv(&path, &results.iter().map(|r| r.row.clone()).collect::<Vec<_>>())?;
    println!("{} rows written to {}", results.len(), path.display());
    Ok(())
}

fn baseline(common: Common) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if cfg.sweep.methods.is_none() {
        cfg.sweep.methods = Some(Method::ALL.to_vec());
    }
    cfg.sweep.screening = None;
    cfg.sweep.zeta = None;
    cfg.sweep.rho = None;
    cfg.sweep.n_gen = None;
    cfg.validate()?;
    let results = evaluate(&cfg)?;
    let rows: Vec<BaselineRow> = results.iter().map(|r| BaselineRow::from(&r.row)).collect();
    let path = cfg.output_dir.join("baselines.csv");
    write_baseline_csv(&path, &rows)?;
    for r in &rows {
        println!("{:<17} np {:>2} snr {:>5} nmse {:.4} ± {:.4}", r.method.to_string(), r.n_pilots, r.snr_db, r.nmse_mean, r.nmse_ci95);
    }
    println!("written to {}", path.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let rows = read_metrics_csv(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let dir = args
        .out
        .unwrap_or_else(|| args.input.parent().map(Path::to_path_buf).unwrap_or_default());
    for p in write_report(&rows, &dir)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let result = match Cli::parse().command {
        Command::Dataset { command: DatasetCommand::Gen(a) } => dataset_gen(a),
        Command::Train(a) => train(a),
        Command::Receive(a) => receive(a),
        Command::Baseline(a) => baseline(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one line: the first line of every cause
            let causes: Vec<String> = e.chain().map(|c| c.to_string().lines().next().unwrap_or("").to_owned()).collect();
            eprintln!("error: {}", causes.join(": "));
            ExitCode::FAILURE
        }
    }
}
