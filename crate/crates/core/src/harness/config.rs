//! Experiment configuration file.
//!
//! A single TOML document. Unknown keys anywhere are rejected. Sweep axes
//! that are left out fall back to the single value in `[receiver]` (or the
//! documented default for the frame axes).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelModelConfig;
use crate::diffusion::TrainConfig;
use crate::error::{Error, Result};
use crate::harness::sweep::Method;
use crate::mixnet::MixerConfig;
use crate::modem::Modulation;
use crate::receiver::ReceiverConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Test frames per sweep cell.
    pub frames: usize,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub receiver: ReceiverConfig,
    pub sweep: SweepAxes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Loaded when it exists, otherwise generated and written here.
    pub path: Option<PathBuf>,
    pub count: usize,
    pub train_fraction: f64,
    pub channel: ChannelModelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Diffusion checkpoint. Loaded when it exists, otherwise trained and
    /// written here.
    pub checkpoint: Option<PathBuf>,
    /// Directory caching the pilot-specific baseline networks.
    pub direct_dir: Option<PathBuf>,
    pub network: MixerConfig,
    pub train: TrainConfig,
}

/// Sweep axes. `None` means "the single configured value".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub methods: Option<Vec<Method>>,
    pub snr_db: Option<Vec<f64>>,
    pub n_pilots: Option<Vec<usize>>,
    pub modulation: Option<Vec<Modulation>>,
    /// `[survivors, imaginations]` pairs.
    pub screening: Option<Vec<[usize; 2]>>,
    /// `[zeta1, zeta2, zeta3]` triples.
    pub zeta: Option<Vec<[f64; 3]>>,
    pub rho: Option<Vec<f64>>,
    pub n_gen: Option<Vec<usize>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("out"),
            frames: 200,
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            receiver: ReceiverConfig::default(),
            sweep: SweepAxes::default(),
        }
    }
}

impl Default for DatasetSection {
    /// A compact scattering environment: short delay spread, one to three
    /// paths and a line-of-sight component.
    fn default() -> Self {
        Self {
            path: None,
            count: 6000,
            train_fraction: 0.8,
            channel: ChannelModelConfig {
                delay_spread_s: 3e-8,
                n_paths_range: (1, 3),
                rician_k_db: 5.0,
                seed: 7,
                ..ChannelModelConfig::default()
            },
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            direct_dir: None,
            network: MixerConfig { depth: 3, token_hidden: 64, channel_hidden: 64, ..MixerConfig::default() },
            train: TrainConfig::default(),
        }
    }
}

pub const DEFAULT_SNR_DB: f64 = 0.0;
pub const DEFAULT_N_PILOTS: usize = 4;
pub const DEFAULT_MODULATION: Modulation = Modulation::Qpsk;

impl SweepAxes {
    pub fn methods(&self) -> Vec<Method> {
        self.methods.clone().unwrap_or_else(|| vec![Method::Diffusion])
    }

    pub fn snr_db(&self) -> Vec<f64> {
        self.snr_db.clone().unwrap_or_else(|| vec![DEFAULT_SNR_DB])
    }

    pub fn n_pilots(&self) -> Vec<usize> {
        self.n_pilots.clone().unwrap_or_else(|| vec![DEFAULT_N_PILOTS])
    }

    pub fn modulation(&self) -> Vec<Modulation> {
        self.modulation.clone().unwrap_or_else(|| vec![DEFAULT_MODULATION])
    }

    pub fn screening(&self, base: &ReceiverConfig) -> Vec<[usize; 2]> {
        self.screening.clone().unwrap_or_else(|| vec![[base.survivors, base.imaginations]])
    }

    pub fn zeta(&self, base: &ReceiverConfig) -> Vec<[f64; 3]> {
        self.zeta.clone().unwrap_or_else(|| vec![[base.zeta1, base.zeta2, base.zeta3]])
    }

    pub fn rho(&self, base: &ReceiverConfig) -> Vec<f64> {
        self.rho.clone().unwrap_or_else(|| vec![base.init_power_fraction])
    }

    pub fn n_gen(&self, base: &ReceiverConfig) -> Vec<usize> {
        self.n_gen.clone().unwrap_or_else(|| vec![base.n_gen])
    }

    fn check_nonempty(&self) -> Result<()> {
        let lens = [
            ("methods", self.methods.as_ref().map(Vec::len)),
            ("snr_db", self.snr_db.as_ref().map(Vec::len)),
            ("n_pilots", self.n_pilots.as_ref().map(Vec::len)),
            ("modulation", self.modulation.as_ref().map(Vec::len)),
            ("screening", self.screening.as_ref().map(Vec::len)),
            ("zeta", self.zeta.as_ref().map(Vec::len)),
            ("rho", self.rho.as_ref().map(Vec::len)),
            ("n_gen", self.n_gen.as_ref().map(Vec::len)),
        ];
        for (name, len) in lens {
            if len == Some(0) {
                return Err(Error::InvalidConfig(format!("sweep axis {name} is empty")));
            }
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::InvalidConfig("frames must be at least 1".into()));
        }
        self.dataset.channel.validate()?;
        if self.dataset.count < 10 {
            return Err(Error::DatasetTooSmall(self.dataset.count));
        }
        if !(self.dataset.train_fraction > 0.0 && self.dataset.train_fraction < 1.0) {
            return Err(Error::InvalidConfig("train_fraction must lie in (0, 1)".into()));
        }
        self.model.network.validate()?;
        self.model.train.validate()?;
        let (net, ch) = (&self.model.network, &self.dataset.channel);
        if (net.n_ant, net.n_car) != (ch.n_ant, ch.n_car) {
            return Err(Error::InvalidConfig(format!(
                "network is {}x{} but channels are {}x{}",
                net.n_ant, net.n_car, ch.n_ant, ch.n_car
            )));
        }
        if net.time_embed_dim == 0 {
            return Err(Error::InvalidConfig("the diffusion network needs a time embedding".into()));
        }
        self.receiver.validate()?;
        self.sweep.check_nonempty()?;
        if self.sweep.snr_db().iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidConfig("snr_db must not be NaN".into()));
        }
        for cell in crate::harness::sweep::cells(self) {
            cell.receiver.validate()?;
            crate::modem::FrameSpec::pilot_grid(ch.n_car, cell.n_pilots, cell.modulation)?;
        }
        Ok(())
    }
}
