//! Sweep cells, model preparation and per-cell evaluation.
//!
//! Every cell sees the same test frames: frame `f` uses test channel
//! `f % len`, symbol stream `(seed, SYMBOLS, f)`, noise stream
//! `(seed, NOISE, f)` and receiver seed `stream_id(seed, RECEIVER, f)`.
//! Cells therefore share their random draws, which makes paired comparisons
//! between cells meaningful, and a cell's row depends only on the
//! configuration and the cell itself.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{diff_training_estimate, BaselineKind, DirectEstimator};
use crate::channel::{load_dataset, make_dataset, save_dataset, ChannelDataset};
use crate::diffusion::{EpochStats, Trainer};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::{nmse, symbol_error_rate};
use crate::mixnet::{MixerConfig, MixerNetwork};
use crate::modem::{demodulate, transmit, Frame, FrameSpec, Modulation};
use crate::numerics::{mean, stream_id, CMat, RngStream, Summary};
use crate::receiver::{run_receiver, ReceiverConfig, TraceRow};

const TAG_SYMBOLS: u64 = 0x5e01;
const TAG_NOISE: u64 = 0x5e02;
const TAG_RECEIVER: u64 = 0x5e03;
const TAG_DIRECT_INIT: u64 = 0x5e04;

/// Environment variable bounding the number of worker threads.
pub const WORKERS_ENV: &str = "DIFFRX_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Diffusion,
    DiffTraining,
    DirectDiff,
    DirectGaussian,
    DirectNoiseless,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Self::Diffusion, Self::DiffTraining, Self::DirectDiff, Self::DirectGaussian, Self::DirectNoiseless];

    pub fn name(self) -> &'static str {
        match self.baseline() {
            None => "diffusion",
            Some(k) => k.name(),
        }
    }

    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            Self::Diffusion => None,
            Self::DiffTraining => Some(BaselineKind::DiffTraining),
            Self::DirectDiff => Some(BaselineKind::DirectDiff),
            Self::DirectGaussian => Some(BaselineKind::DirectGaussian),
            Self::DirectNoiseless => Some(BaselineKind::DirectNoiseless),
        }
    }
}

impl From<BaselineKind> for Method {
    fn from(k: BaselineKind) -> Self {
        match k {
            BaselineKind::DiffTraining => Self::DiffTraining,
            BaselineKind::DirectDiff => Self::DirectDiff,
            BaselineKind::DirectGaussian => Self::DirectGaussian,
            BaselineKind::DirectNoiseless => Self::DirectNoiseless,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

/// One point of the sweep grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub snr_db: f64,
    pub n_pilots: usize,
    pub modulation: Modulation,
    /// For baselines only `init_power_fraction` matters.
    pub receiver: ReceiverConfig,
}

/// Cartesian product of the sweep axes in a fixed order: method, SNR, pilot
/// count, modulation, screening, zeta, rho, generation steps. Receiver axes
/// are collapsed for methods that ignore them: the one-step baseline only
/// varies `rho`, the direct baselines vary none.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let (axes, base) = (&cfg.sweep, &cfg.receiver);
    let mut out = Vec::new();
    for method in axes.methods() {
        let mut receivers = Vec::new();
        match method {
            Method::Diffusion => {
                for [survivors, imaginations] in axes.screening(base) {
                    for [zeta1, zeta2, zeta3] in axes.zeta(base) {
                        for init_power_fraction in axes.rho(base) {
                            for n_gen in axes.n_gen(base) {
                                receivers.push(ReceiverConfig {
                                    survivors,
                                    imaginations,
                                    zeta1,
                                    zeta2,
                                    zeta3,
                                    init_power_fraction,
                                    n_gen,
                                    ..base.clone()
                                });
                            }
                        }
                    }
                }
            }
            Method::DiffTraining => {
                for init_power_fraction in axes.rho(base) {
                    receivers.push(ReceiverConfig { init_power_fraction, ..base.clone() });
                }
            }
            _ => receivers.push(base.clone()),
        }
        for &snr_db in &axes.snr_db() {
            for &n_pilots in &axes.n_pilots() {
                for &modulation in &axes.modulation() {
                    for receiver in &receivers {
                        out.push(Cell { method, snr_db, n_pilots, modulation, receiver: receiver.clone() });
                    }
                }
            }
        }
    }
    out
}

/// Frame `f` of a cell: test channel `f % len` sent with the frame's own
/// symbol and noise streams.
pub fn frame(seed: u64, test: &[CMat], spec: &FrameSpec, snr_db: f64, f: usize) -> Result<Frame> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let h = &test[f % test.len()];
    let mut symbols = RngStream::keyed(seed, &[TAG_SYMBOLS, f as u64]);
    let mut noise = RngStream::keyed(seed, &[TAG_NOISE, f as u64]);
    transmit(spec, h, snr_db, &mut symbols, &mut noise)
}

pub fn receiver_seed(seed: u64, f: usize) -> u64 {
    stream_id(&[seed, TAG_RECEIVER, f as u64])
}

/// Worker count from the environment, defaulting to the available cores.
pub fn workers_from_env() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Dataset, diffusion network and pilot-specific baseline networks.
pub struct Models {
    pub data: ChannelDataset,
    pub net: MixerNetwork<f32>,
    pub direct: BTreeMap<(BaselineKind, usize), DirectEstimator>,
    /// Training log when the diffusion network was trained in this run.
    pub training: Option<Vec<EpochStats>>,
}

/// Loads the dataset from `[dataset].path` when present, otherwise generates
/// it (and saves it there when a path is configured).
pub fn load_or_make_dataset(cfg: &ExperimentConfig) -> Result<ChannelDataset> {
    let ds = &cfg.dataset;
    if let Some(path) = ds.path.as_ref().filter(|p| p.exists()) {
        let data = load_dataset(path)?;
        if (data.n_ant(), data.n_car()) != (ds.channel.n_ant, ds.channel.n_car) {
            return Err(Error::InvalidConfig(format!("dataset {} does not match [dataset.channel]", path.display())));
        }
        return Ok(data);
    }
    let data = make_dataset(&ds.channel, ds.count, ds.train_fraction)?;
    if let Some(path) = &ds.path {
        save_dataset(&data, path)?;
    }
    Ok(data)
}

fn same_architecture(a: &MixerConfig, b: &MixerConfig) -> bool {
    (a.n_ant, a.n_car, a.depth, a.token_hidden, a.channel_hidden, a.time_embed_dim, a.n_steps)
        == (b.n_ant, b.n_car, b.depth, b.token_hidden, b.channel_hidden, b.time_embed_dim, b.n_steps)
        && a.beta_max as f32 == b.beta_max as f32
}

/// Trains the diffusion network on the training split, reporting each epoch.
pub fn train_diffusion(
    cfg: &ExperimentConfig,
    data: &ChannelDataset,
    log: &mut dyn FnMut(&EpochStats),
) -> Result<(MixerNetwork<f32>, Vec<EpochStats>)> {
    let net = MixerNetwork::<f32>::new(cfg.model.network.clone(), cfg.model.train.seed)?;
    let mut trainer = Trainer::new(net, cfg.model.train.clone())?;
    let mut stats = Vec::with_capacity(cfg.model.train.epochs);
    for _ in 0..cfg.model.train.epochs {
        let s = trainer.train_epoch(data.train())?;
        log(&s);
        stats.push(s);
    }
    Ok((trainer.net, stats))
}

/// Loads `[model].checkpoint` when present, otherwise trains (and saves
/// when a path is configured).
pub fn load_or_train_diffusion(
    cfg: &ExperimentConfig,
    data: &ChannelDataset,
    log: &mut dyn FnMut(&EpochStats),
) -> Result<(MixerNetwork<f32>, Option<Vec<EpochStats>>)> {
    if let Some(path) = cfg.model.checkpoint.as_ref().filter(|p| p.exists()) {
        let net = MixerNetwork::<f32>::load_checkpoint(path)?;
        if !same_architecture(net.config(), &cfg.model.network) {
            return Err(Error::InvalidConfig(format!("checkpoint {} does not match [model.network]", path.display())));
        }
        return Ok((net, None));
    }
    let (net, stats) = train_diffusion(cfg, data, log)?;
    if let Some(path) = &cfg.model.checkpoint {
        net.save_checkpoint(path)?;
    }
    Ok((net, Some(stats)))
}

fn direct_path(dir: &Path, kind: BaselineKind, n_pilots: usize) -> PathBuf {
    dir.join(format!("{kind}-np{n_pilots}.drx"))
}

/// Loads or trains the direct baseline for `kind` on the `n_pilots` grid.
pub fn load_or_train_direct(
    cfg: &ExperimentConfig,
    data: &ChannelDataset,
    kind: BaselineKind,
    n_pilots: usize,
    log: &mut dyn FnMut(&EpochStats),
) -> Result<DirectEstimator> {
    let spec = FrameSpec::pilot_grid(data.n_car(), n_pilots, Modulation::Qpsk)?;
    let path = cfg.model.direct_dir.as_ref().map(|d| direct_path(d, kind, n_pilots));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        let est = DirectEstimator::load(p)?;
        let expected = MixerConfig { time_embed_dim: 0, ..cfg.model.network.clone() };
        if est.kind() != kind || est.pilots() != spec.pilot_indices() || !same_architecture(est.network().config(), &expected) {
            return Err(Error::InvalidConfig(format!("{} does not match the configuration", p.display())));
        }
        return Ok(est);
    }
    let init_seed = stream_id(&[cfg.model.train.seed, TAG_DIRECT_INIT, kind as u64, n_pilots as u64]);
    let mut est = DirectEstimator::new(kind, &spec, &cfg.model.network, init_seed)?;
    for s in est.train(data.train(), &cfg.model.train)? {
        log(&s);
    }
    if let Some(p) = &path {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        est.save(p)?;
    }
    Ok(est)
}

impl Models {
    /// Everything the cells of `cfg` need.
    pub fn prepare(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<Self> {
        let data = load_or_make_dataset(cfg)?;
        log(&format!("dataset: {} train / {} test channels", data.train_count(), data.len() - data.train_count()));
        let (net, training) = load_or_train_diffusion(cfg, &data, &mut |s| {
            log(&format!("diffusion epoch {} loss {:.3} ({:.0} s)", s.epoch, s.mean_loss, s.wall_seconds))
        })?;
        let mut direct = BTreeMap::new();
        for cell in cells(cfg) {
            let Some(kind) = cell.method.baseline().filter(|k| k.is_direct()) else { continue };
            if direct.contains_key(&(kind, cell.n_pilots)) {
                continue;
            }
            let est = load_or_train_direct(cfg, &data, kind, cell.n_pilots, &mut |s| {
                log(&format!("{kind} np{} epoch {} loss {:.3} ({:.0} s)", cell.n_pilots, s.epoch, s.mean_loss, s.wall_seconds))
            })?;
            direct.insert((kind, cell.n_pilots), est);
        }
        Ok(Self { data, net, direct, training })
    }
}

/// Result of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutcome {
    pub nmse: f64,
    pub ser: f64,
    /// Receiver iterations; 1 for the baselines.
    pub steps: usize,
    pub early_quit: bool,
    /// Receiver trace; empty for the baselines.
    pub trace: Vec<TraceRow>,
}

/// Per-cell summary row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: Method,
    pub snr_db: f64,
    pub n_pilots: usize,
    pub modulation: Modulation,
    pub survivors: usize,
    pub imaginations: usize,
    pub zeta1: f64,
    pub zeta2: f64,
    pub zeta3: f64,
    pub rho: f64,
    pub n_gen: usize,
    pub frames: usize,
    pub nmse_mean: f64,
    /// Two-sided 95% half-width; NaN for a single frame.
    pub nmse_ci95: f64,
    pub ser_mean: f64,
    pub steps_mean: f64,
    pub early_quit_rate: f64,
    /// Mean best error after each step, `;`-separated. A frame that stopped
    /// early contributes its final value to later steps.
    pub e_trace: String,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub row: MetricRow,
    pub frames: Vec<FrameOutcome>,
}

impl CellResult {
    pub fn nmse(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.nmse).collect()
    }
}

fn run_frame(cell: &Cell, models: &Models, spec: &FrameSpec, seed: u64, f: usize) -> Result<FrameOutcome> {
    let fr = frame(seed, models.data.test(), spec, cell.snr_db, f)?;
    let rx_seed = receiver_seed(seed, f);
    let baseline = |h_est: CMat| -> Result<FrameOutcome> {
        let x = demodulate(&h_est, &fr.y, 1.0, spec)?.x_tilde;
        Ok(FrameOutcome {
            nmse: nmse(&h_est, &fr.h)?,
            ser: symbol_error_rate(&x, &fr.x, spec)?,
            steps: 1,
            early_quit: false,
            trace: Vec::new(),
        })
    };
    match cell.method.baseline() {
        None => {
            let out = run_receiver(&fr.y, spec, fr.sigma_n, &models.net, &cell.receiver, rx_seed, Some(&fr.h))?;
            Ok(FrameOutcome {
                nmse: nmse(&out.h, &fr.h)?,
                ser: symbol_error_rate(&out.x, &fr.x, spec)?,
                steps: out.steps,
                early_quit: out.early_quit,
                trace: out.trace,
            })
        }
        Some(BaselineKind::DiffTraining) => {
            baseline(diff_training_estimate(&models.net, &fr.y, spec, cell.receiver.init_power_fraction, rx_seed)?)
        }
        Some(kind) => {
            let est = models
                .direct
                .get(&(kind, cell.n_pilots))
                .ok_or_else(|| Error::InvalidConfig(format!("no {kind} network for {} pilots", cell.n_pilots)))?;
            baseline(est.estimate(&fr.y, spec)?)
        }
    }
}

fn mean_trace(frames: &[FrameOutcome]) -> Vec<f64> {
    let len = frames.iter().map(|f| f.trace.len()).max().unwrap_or(0);
    (0..len)
        .map(|k| {
            let vals: Vec<f64> = frames
                .iter()
                .filter_map(|f| f.trace.get(k.min(f.trace.len().saturating_sub(1))).map(|r| r.best_e))
                .collect();
            mean(&vals)
        })
        .collect()
}

/// Evaluates one cell over `frames` test frames. Frames run in parallel on
/// the current rayon pool; results do not depend on the schedule.
pub fn run_cell(cell: &Cell, models: &Models, seed: u64, frames: usize) -> Result<CellResult> {
    if frames == 0 {
        return Err(Error::InvalidConfig("frames must be at least 1".into()));
    }
    let started = Instant::now();
    let spec = FrameSpec::pilot_grid(models.data.n_car(), cell.n_pilots, cell.modulation)?;
    let outcomes = (0..frames)
        .into_par_iter()
        .map(|f| run_frame(cell, models, &spec, seed, f))
        .collect::<Result<Vec<_>>>()?;
    let nmse = Summary::of(&outcomes.iter().map(|o| o.nmse).collect::<Vec<_>>());
    let r = &cell.receiver;
    let row = MetricRow {
        method: cell.method,
        snr_db: cell.snr_db,
        n_pilots: cell.n_pilots,
        modulation: cell.modulation,
        survivors: r.survivors,
        imaginations: r.imaginations,
        zeta1: r.zeta1,
        zeta2: r.zeta2,
        zeta3: r.zeta3,
        rho: r.init_power_fraction,
        n_gen: r.n_gen,
        frames,
        nmse_mean: nmse.mean,
        nmse_ci95: nmse.ci95,
        ser_mean: mean(&outcomes.iter().map(|o| o.ser).collect::<Vec<_>>()),
        steps_mean: mean(&outcomes.iter().map(|o| o.steps as f64).collect::<Vec<_>>()),
        early_quit_rate: outcomes.iter().filter(|o| o.early_quit).count() as f64 / frames as f64,
        e_trace: mean_trace(&outcomes).iter().map(|e| format!("{e:e}")).collect::<Vec<_>>().join(";"),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(CellResult { cell: cell.clone(), row, frames: outcomes })
}

/// Runs every cell on a pool of `workers` threads. Results come back in
/// cell order.
pub fn run_sweep(cfg: &ExperimentConfig, models: &Models, workers: usize) -> Result<Vec<CellResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let grid = cells(cfg);
    pool.install(|| grid.par_iter().map(|c| run_cell(c, models, cfg.seed, cfg.frames)).collect())
}

pub fn write_metrics<W: Write>(sink: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    write_metrics(std::fs::File::create(path)?, rows)
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?)
}

/// Row of the baseline comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub method: Method,
    pub n_pilots: usize,
    pub snr_db: f64,
    pub nmse_mean: f64,
    pub nmse_ci95: f64,
    pub frames: usize,
}

impl From<&MetricRow> for BaselineRow {
    fn from(r: &MetricRow) -> Self {
        Self {
            method: r.method,
            n_pilots: r.n_pilots,
            snr_db: r.snr_db,
            nmse_mean: r.nmse_mean,
            nmse_ci95: r.nmse_ci95,
            frames: r.frames,
        }
    }
}

pub fn write_baseline_csv(path: impl AsRef<Path>, rows: &[BaselineRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
