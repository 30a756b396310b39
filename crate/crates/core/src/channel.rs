//! Geometric multipath channel generator and the binary channel dataset.
//!
//! Each channel is a sum of `L` planar paths seen by a half-wavelength
//! uniform linear array:
//!
//! ```text
//! H[m, k] = sum_l g_l * exp(-j*pi*m*sin(theta_l)) * exp(-j*2*pi*k*spacing*tau_l)
//! ```
//!
//! Path delays are exponential with mean `delay_spread_s` and path powers
//! follow the exponential power-delay profile `exp(-tau / delay_spread_s)`,
//! scaled by the expected profile sum so that `E ||H||^2 = n_ant * n_car`
//! while the realized power still varies with the path count, the delays
//! and the Gaussian gains. Channels are deliberately left unnormalized.
//!
//! Dataset file layout (little endian): `b"CHD1"`, then `u32` fields
//! `version, count, n_ant, n_car, train_count`, then
//! `count * n_ant * n_car` interleaved `f32` pairs `(re, im)` in row-major
//! order, training items first.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CMat, RngStream, C64};

pub const DATASET_MAGIC: [u8; 4] = *b"CHD1";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 5 * 4;

const TAG_ITEM: u64 = 0xc4a1;
const TAG_SPLIT: u64 = 0xc4a2;

/// Parameters of the synthetic channel generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelModelConfig {
    pub n_ant: usize,
    pub n_car: usize,
    /// Frequency of the first subcarrier. Only enters as a per-path phase.
    pub carrier_hz: f64,
    pub spacing_hz: f64,
    /// Inclusive range for the number of scattered paths.
    pub n_paths_range: (usize, usize),
    pub delay_spread_s: f64,
    pub angle_range_rad: (f64, f64),
    /// Rician K-factor of an extra line-of-sight path; `-inf` disables it.
    pub rician_k_db: f64,
    pub seed: u64,
}

impl Default for ChannelModelConfig {
    fn default() -> Self {
        Self {
            n_ant: 32,
            n_car: 64,
            carrier_hz: 3.5e9,
            spacing_hz: 300e3,
            n_paths_range: (2, 8),
            delay_spread_s: 1e-6,
            angle_range_rad: (-PI / 2.0, PI / 2.0),
            rician_k_db: f64::NEG_INFINITY,
            seed: 0,
        }
    }
}

impl ChannelModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.n_ant == 0 || self.n_car == 0 {
            return bad("n_ant and n_car must be at least 1");
        }
        if !(self.spacing_hz > 0.0) {
            return bad("spacing_hz must be positive");
        }
        let (lo, hi) = self.n_paths_range;
        if lo == 0 || lo > hi {
            return bad("n_paths_range must be a nonempty range of positive counts");
        }
        if !(self.delay_spread_s >= 0.0) || !self.delay_spread_s.is_finite() {
            return bad("delay_spread_s must be finite and nonnegative");
        }
        let (a, b) = self.angle_range_rad;
        if !(a <= b) {
            return bad("angle_range_rad must satisfy lo <= hi");
        }
        if self.rician_k_db.is_nan() || self.rician_k_db == f64::INFINITY {
            return bad("rician_k_db must be finite or -inf");
        }
        Ok(())
    }
}

/// One propagation path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Path {
    pub gain: C64,
    pub angle_rad: f64,
    pub delay_s: f64,
}

/// Half-wavelength ULA response `exp(-j*pi*m*sin(theta))`.
pub fn steering_vector(n_ant: usize, angle_rad: f64) -> Vec<C64> {
    let s = angle_rad.sin();
    (0..n_ant).map(|m| C64::from_polar(1.0, -PI * m as f64 * s)).collect()
}

/// Per-subcarrier phase `exp(-j*2*pi*k*spacing*tau)`.
pub fn frequency_response(n_car: usize, spacing_hz: f64, delay_s: f64) -> Vec<C64> {
    (0..n_car).map(|k| C64::from_polar(1.0, -2.0 * PI * k as f64 * spacing_hz * delay_s)).collect()
}

/// Channel from an explicit path list.
pub fn channel_from_paths(n_ant: usize, n_car: usize, spacing_hz: f64, paths: &[Path]) -> CMat {
    let mut data = vec![C64::new(0.0, 0.0); n_ant * n_car];
    for p in paths {
        let a = steering_vector(n_ant, p.angle_rad);
        let f = frequency_response(n_car, spacing_hz, p.delay_s);
        for (m, am) in a.iter().enumerate() {
            let ga = p.gain * am;
            for (k, fk) in f.iter().enumerate() {
                data[m * n_car + k] += ga * fk;
            }
        }
    }
    CMat::raw(n_ant, n_car, data)
}

/// Draws the path list of one channel realization.
pub fn draw_paths(cfg: &ChannelModelConfig, rng: &mut RngStream) -> Vec<Path> {
    let (lo, hi) = cfg.n_paths_range;
    let n_paths = lo + rng.below(hi - lo + 1);
    let (a_lo, a_hi) = cfg.angle_range_rad;
    let k_lin = if cfg.rician_k_db == f64::NEG_INFINITY { 0.0 } else { 10f64.powf(cfg.rician_k_db / 10.0) };

    let mut delays = Vec::with_capacity(n_paths);
    let mut angles = Vec::with_capacity(n_paths);
    let mut powers = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        angles.push(rng.uniform_range(a_lo, a_hi));
        let tau = if cfg.delay_spread_s > 0.0 {
            // 1 - U is in (0, 1], so the log is finite
            -cfg.delay_spread_s * (1.0 - rng.uniform()).ln()
        } else {
            0.0
        };
        powers.push(if cfg.delay_spread_s > 0.0 { (-tau / cfg.delay_spread_s).exp() } else { 1.0 });
        delays.push(tau);
    }
    // Scale by the expected (not realized) profile sum so that the path
    // count and delay draws still spread the channel power.
    let mean_paths = (lo + hi) as f64 / 2.0;
    let mean_profile = if cfg.delay_spread_s > 0.0 { 0.5 } else { 1.0 };
    let total = mean_paths * mean_profile;
    let scatter_share = 1.0 / (1.0 + k_lin);

    let mut paths = Vec::with_capacity(n_paths + 1);
    if k_lin > 0.0 {
        let phase = rng.uniform_range(-PI, PI);
        paths.push(Path {
            gain: C64::from_polar((k_lin / (1.0 + k_lin)).sqrt(), phase),
            angle_rad: rng.uniform_range(a_lo, a_hi),
            delay_s: 0.0,
        });
    }
    for ((tau, theta), p) in delays.into_iter().zip(angles).zip(powers) {
        let g = rng.cnormal() * (scatter_share * p / total).sqrt();
        paths.push(Path { gain: g, angle_rad: theta, delay_s: tau });
    }
    for p in &mut paths {
        p.gain *= C64::from_polar(1.0, -2.0 * PI * cfg.carrier_hz * p.delay_s);
    }
    paths
}

/// One random channel realization.
pub fn synth_channel(cfg: &ChannelModelConfig, rng: &mut RngStream) -> CMat {
    let paths = draw_paths(cfg, rng);
    channel_from_paths(cfg.n_ant, cfg.n_car, cfg.spacing_hz, &paths)
}

/// Channel number `index` of the dataset generated with `seed`, rounded to
/// the `f32` precision used on disk.
pub fn dataset_item(cfg: &ChannelModelConfig, seed: u64, index: usize) -> CMat {
    let mut rng = RngStream::keyed(seed, &[TAG_ITEM, index as u64]);
    round_to_f32(&synth_channel(cfg, &mut rng))
}

fn round_to_f32(h: &CMat) -> CMat {
    let data = h.as_slice().iter().map(|z| C64::new(z.re as f32 as f64, z.im as f32 as f64)).collect();
    CMat::raw(h.rows(), h.cols(), data)
}

/// Deterministic train/test partition of `0..count`; both lists ascending.
pub fn split_indices(count: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_train = ((count as f64) * train_fraction).round() as usize;
    let n_train = n_train.min(count);
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = RngStream::keyed(seed, &[TAG_SPLIT]);
    for i in (1..count).rev() {
        let j = rng.below(i + 1);
        order.swap(i, j);
    }
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Channels with a train/test split. Training items come first.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDataset {
    n_ant: usize,
    n_car: usize,
    train_count: usize,
    channels: Vec<CMat>,
}

impl ChannelDataset {
    pub fn new(n_ant: usize, n_car: usize, train_count: usize, channels: Vec<CMat>) -> Result<Self> {
        if train_count > channels.len() {
            return Err(Error::InvalidConfig(format!(
                "train_count {train_count} exceeds dataset size {}",
                channels.len()
            )));
        }
        if let Some(h) = channels.iter().find(|h| h.shape() != (n_ant, n_car)) {
            return Err(Error::dims(format!("{n_ant}x{n_car}"), format!("{}x{}", h.rows(), h.cols())));
        }
        Ok(Self { n_ant, n_car, train_count, channels })
    }

    pub fn n_ant(&self) -> usize {
        self.n_ant
    }

    pub fn n_car(&self) -> usize {
        self.n_car
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn train(&self) -> &[CMat] {
        &self.channels[..self.train_count]
    }

    pub fn test(&self) -> &[CMat] {
        &self.channels[self.train_count..]
    }

    pub fn channels(&self) -> &[CMat] {
        &self.channels
    }

    pub fn train_count(&self) -> usize {
        self.train_count
    }
}

/// Generates `count` channels and splits them with `train_fraction`.
pub fn make_dataset(cfg: &ChannelModelConfig, count: usize, train_fraction: f64) -> Result<ChannelDataset> {
    cfg.validate()?;
    if count < 10 {
        return Err(Error::DatasetTooSmall(count));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidConfig(format!("train_fraction {train_fraction} outside [0, 1]")));
    }
    let (train, test) = split_indices(count, train_fraction, cfg.seed);
    let channels = train.iter().chain(&test).map(|&i| dataset_item(cfg, cfg.seed, i)).collect();
    ChannelDataset::new(cfg.n_ant, cfg.n_car, train.len(), channels)
}

pub fn encode_dataset(ds: &ChannelDataset) -> Result<Vec<u8>> {
    let fits = |v: usize| u32::try_from(v).map_err(|_| Error::DimensionOverflow(format!("{v} does not fit in u32")));
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * ds.n_ant * ds.n_car * 8);
    out.extend_from_slice(&DATASET_MAGIC);
    for v in [DATASET_VERSION, fits(ds.len())?, fits(ds.n_ant)?, fits(ds.n_car)?, fits(ds.train_count)?] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for h in &ds.channels {
        for z in h.as_slice() {
            out.extend_from_slice(&(z.re as f32).to_le_bytes());
            out.extend_from_slice(&(z.im as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<ChannelDataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { needed: HEADER_LEN as u64, found: bytes.len() as u64 });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic { expected: DATASET_MAGIC, found: magic });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (count, n_ant, n_car, train_count) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
    if n_ant == 0 || n_car == 0 {
        return Err(Error::DimensionOverflow(format!("zero dimension {n_ant}x{n_car}")));
    }
    if train_count > count {
        return Err(Error::DimensionOverflow(format!("train_count {train_count} > count {count}")));
    }
    let payload = (count as u64)
        .checked_mul(n_ant as u64)
        .and_then(|v| v.checked_mul(n_car as u64))
        .and_then(|v| v.checked_mul(8))
        .filter(|&v| usize::try_from(v).is_ok())
        .ok_or_else(|| Error::DimensionOverflow(format!("{count} x {n_ant} x {n_car} entries")))?;
    let needed = HEADER_LEN as u64 + payload;
    if (bytes.len() as u64) < needed {
        return Err(Error::Truncated { needed, found: bytes.len() as u64 });
    }
    if (bytes.len() as u64) > needed {
        return Err(Error::DimensionOverflow(format!(
            "{} trailing bytes after payload",
            bytes.len() as u64 - needed
        )));
    }
    let per = n_ant * n_car;
    let mut channels = Vec::with_capacity(count);
    let body = &bytes[HEADER_LEN..];
    for item in 0..count {
        let mut data = Vec::with_capacity(per);
        for e in 0..per {
            let off = (item * per + e) * 8;
            let re = f32::from_le_bytes(body[off..off + 4].try_into().unwrap());
            let im = f32::from_le_bytes(body[off + 4..off + 8].try_into().unwrap());
            data.push(C64::new(re as f64, im as f64));
        }
        channels.push(CMat::from_vec(n_ant, n_car, data)?);
    }
    ChannelDataset::new(n_ant, n_car, train_count, channels)
}

pub fn save_dataset(ds: &ChannelDataset, path: impl AsRef<FsPath>) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<FsPath>) -> Result<ChannelDataset> {
    decode_dataset(&fs::read(path)?)
}
