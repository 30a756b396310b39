//! Non-diffusion comparison estimators.
//!
//! `DiffTraining` runs the diffusion denoiser once on the pilot-seeded
//! initial state. The `Direct*` estimators are time-free Mixer networks that
//! map the pilot observation, zero-padded to full width, onto the full
//! normalized channel. They differ only in the input noise seen during
//! training, and each is tied to the pilot grid it was trained on.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{run_epoch, Denoiser, DiffusionSchedule, EpochStats, TrainConfig};
use crate::error::{Error, Result};
use crate::mixnet::{AdamState, MixerConfig, MixerNetwork};
use crate::modem::FrameSpec;
use crate::numerics::{gaussian_cmat, CMat, RngStream};
use crate::receiver::{estimate_sigma_h, init_candidate, init_plan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    DiffTraining,
    DirectDiff,
    DirectGaussian,
    DirectNoiseless,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [Self::DiffTraining, Self::DirectDiff, Self::DirectGaussian, Self::DirectNoiseless];

    pub fn name(self) -> &'static str {
        match self {
            Self::DiffTraining => "diff-training",
            Self::DirectDiff => "direct-diff",
            Self::DirectGaussian => "direct-gaussian",
            Self::DirectNoiseless => "direct-noiseless",
        }
    }

    pub fn is_direct(self) -> bool {
        self != Self::DiffTraining
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown baseline {s:?}")))
    }
}

/// One-step estimate: the receiver's initial state for candidate 0, passed
/// once through the denoiser at `t0` and rescaled by the gain estimate.
pub fn diff_training_estimate(net: &dyn Denoiser, y: &CMat, spec: &FrameSpec, rho: f64, seed: u64) -> Result<CMat> {
    let schedule = DiffusionSchedule::new(net.n_steps(), net.beta_max())?;
    let sigma_h = estimate_sigma_h(y)?;
    let plan = init_plan(y, spec, sigma_h, &schedule, rho)?;
    let state = init_candidate(&plan, seed, 0);
    Ok(net.denoise(&state, plan.t0)?.scale(sigma_h))
}

/// Keeps the pilot columns of `h`, zeroing the rest.
pub fn pilot_slice(h: &CMat, pilots: &[usize]) -> CMat {
    let n_car = h.cols();
    let mut out = CMat::zeros(h.rows(), n_car);
    let dst = out.as_mut_slice();
    for (k, v) in h.as_slice().iter().enumerate() {
        if pilots.binary_search(&(k % n_car)).is_ok() {
            dst[k] = *v;
        }
    }
    out
}

/// Network input built from a received frame: `y_i / (sigma_h x_i)` on
/// pilot columns, zero elsewhere.
pub fn pilot_observation(y: &CMat, spec: &FrameSpec, sigma_h: f64) -> Result<CMat> {
    if y.cols() != spec.n_car() {
        return Err(Error::dims(spec.n_car(), y.cols()));
    }
    let n_car = spec.n_car();
    let mut out = CMat::zeros(y.rows(), n_car);
    let dst = out.as_mut_slice();
    for (slot, &i) in spec.pilot_indices().iter().enumerate() {
        let scale = 1.0 / (sigma_h * spec.pilot_values()[slot]);
        for r in 0..y.rows() {
            dst[r * n_car + i] = y.as_slice()[r * n_car + i] * scale;
        }
    }
    Ok(out)
}

/// Training input for a `Direct*` network from a normalized channel.
fn direct_input(kind: BaselineKind, h: &CMat, pilots: &[usize], schedule: &DiffusionSchedule, rng: &mut RngStream) -> Result<CMat> {
    let noisy = match kind {
        BaselineKind::DirectNoiseless => h.clone(),
        // total noise power uniform on [0, ||H||^2]
        BaselineKind::DirectGaussian => {
            let power = rng.uniform_range(0.0, h.fro_norm_sqr());
            let per_entry = power / h.len() as f64;
            h.lincomb(1.0, &gaussian_cmat(h.rows(), h.cols(), rng), per_entry.sqrt())?
        }
        BaselineKind::DirectDiff => {
            let t = rng.below(schedule.n_steps() + 1);
            let ab = schedule.alpha_bar(t);
            h.lincomb(ab.sqrt(), &gaussian_cmat(h.rows(), h.cols(), rng), (1.0 - ab).sqrt())?
        }
        BaselineKind::DiffTraining => return Err(Error::InvalidConfig("diff-training has no direct network".into())),
    };
    Ok(pilot_slice(&noisy, pilots))
}

/// A time-free network trained for one pilot grid.
#[derive(Clone, Debug)]
pub struct DirectEstimator {
    kind: BaselineKind,
    pilots: Vec<usize>,
    net: MixerNetwork<f32>,
}

const DIRECT_MAGIC: [u8; 4] = *b"DRX1";

impl DirectEstimator {
    /// Untrained estimator; `net_cfg.time_embed_dim` is forced to 0.
    pub fn new(kind: BaselineKind, spec: &FrameSpec, net_cfg: &MixerConfig, seed: u64) -> Result<Self> {
        if !kind.is_direct() {
            return Err(Error::InvalidConfig("diff-training has no direct network".into()));
        }
        let cfg = MixerConfig { time_embed_dim: 0, n_car: spec.n_car(), ..net_cfg.clone() };
        Ok(Self { kind, pilots: spec.pilot_indices().to_vec(), net: MixerNetwork::new(cfg, seed)? })
    }

    pub fn kind(&self) -> BaselineKind {
        self.kind
    }

    pub fn pilots(&self) -> &[usize] {
        &self.pilots
    }

    pub fn network(&self) -> &MixerNetwork<f32> {
        &self.net
    }

    /// Trains on `train` for `cfg.epochs` epochs and returns the per-epoch log.
    pub fn train(&mut self, train: &[CMat], cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
        let schedule = DiffusionSchedule::new(self.net.config().n_steps, self.net.config().beta_max)?;
        let mut adam = AdamState::new(self.net.param_count(), cfg.lr);
        let (kind, pilots) = (self.kind, self.pilots.clone());
        let sample = |h: &CMat, rng: &mut RngStream| Ok((direct_input(kind, h, &pilots, &schedule, rng)?, 0));
        let started = std::time::Instant::now();
        let mut log = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let mean_loss = run_epoch(&mut self.net, &mut adam, train, cfg, epoch, &sample)?;
            log.push(EpochStats { epoch: epoch + 1, mean_loss, wall_seconds: started.elapsed().as_secs_f64() });
        }
        Ok(log)
    }

    /// Channel estimate for a received frame. Fails on any pilot grid other
    /// than the training grid.
    pub fn estimate(&self, y: &CMat, spec: &FrameSpec) -> Result<CMat> {
        if spec.pilot_indices() != self.pilots.as_slice() {
            return Err(Error::PilotGridMismatch { trained: self.pilots.clone(), requested: spec.pilot_indices().to_vec() });
        }
        let sigma_h = estimate_sigma_h(y)?;
        let input = pilot_observation(y, spec, sigma_h)?;
        Ok(self.net.forward(&input, 0)?.scale(sigma_h))
    }

    /// Mean per-sample loss of the training recipe over `channels`.
    pub fn loss_on(&self, channels: &[CMat], seed: u64) -> Result<f64> {
        if channels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let schedule = DiffusionSchedule::new(self.net.config().n_steps, self.net.config().beta_max)?;
        let mut total = 0.0;
        for (b, chunk) in channels.chunks(64).enumerate() {
            let mut rng = RngStream::keyed(seed, &[0xd1, b as u64]);
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            for h in chunk {
                let target = crate::diffusion::normalize_channel(h)?;
                inputs.push(direct_input(self.kind, &target, &self.pilots, &schedule, &mut rng)?);
                targets.push(target);
            }
            let outputs = self.net.forward_batch(&inputs, &vec![0; inputs.len()])?;
            total += outputs.iter().zip(&targets).map(|(o, t)| (o - t).fro_norm_sqr()).sum::<f64>();
        }
        Ok(total / channels.len() as f64)
    }

    /// Magic, kind, pilot count and indices (u32 little endian), then the
    /// network checkpoint.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = DIRECT_MAGIC.to_vec();
        let code = BaselineKind::ALL.iter().position(|k| *k == self.kind).expect("known kind") as u32;
        out.extend_from_slice(&code.to_le_bytes());
        out.extend_from_slice(&(self.pilots.len() as u32).to_le_bytes());
        for &p in &self.pilots {
            out.extend_from_slice(&(p as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.net.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<u32> {
            let s = bytes.get(4 * i..4 * i + 4).ok_or(Error::Truncated { needed: 4 * i as u64 + 4, found: bytes.len() as u64 })?;
            Ok(u32::from_le_bytes(s.try_into().expect("4 bytes")))
        };
        let magic: [u8; 4] = bytes.get(..4).ok_or(Error::Truncated { needed: 4, found: bytes.len() as u64 })?.try_into().expect("4 bytes");
        if magic != DIRECT_MAGIC {
            return Err(Error::BadMagic { expected: DIRECT_MAGIC, found: magic });
        }
        let kind = *BaselineKind::ALL
            .get(word(1)? as usize)
            .filter(|k| k.is_direct())
            .ok_or_else(|| Error::InvalidConfig("bad baseline kind code".into()))?;
        let n = word(2)? as usize;
        if n > bytes.len() / 4 {
            return Err(Error::DimensionOverflow(format!("pilot count {n} exceeds file size")));
        }
        let pilots = (0..n).map(|i| word(3 + i).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let net = MixerNetwork::from_bytes(&bytes[4 * (3 + n)..])?;
        if net.config().time_embed_dim != 0 || pilots.iter().any(|&p| p >= net.config().n_car) || !pilots.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig("inconsistent direct estimator file".into()));
        }
        Ok(Self { kind, pilots, net })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modem::{transmit, Modulation};
    use crate::receiver::{run_receiver, ReceiverConfig};

    fn small_net() -> MixerConfig {
        MixerConfig { n_ant: 4, n_car: 16, depth: 1, token_hidden: 16, channel_hidden: 16, time_embed_dim: 8, n_steps: 1000, beta_max: 0.2 }
    }

    fn channels(n: usize) -> Vec<CMat> {
        let cfg = crate::channel::ChannelModelConfig { n_ant: 4, n_car: 16, ..Default::default() };
        (0..n).map(|i| crate::channel::dataset_item(&cfg, 1, i)).collect()
    }

    #[test]
    fn kind_names_round_trip() {
        for k in BaselineKind::ALL {
            assert_eq!(k.to_string().parse::<BaselineKind>().unwrap(), k);
        }
        assert!("direct".parse::<BaselineKind>().is_err());
    }

    #[test]
    fn diff_training_is_the_one_step_receiver() {
        let net = MixerNetwork::<f32>::new(small_net(), 3).unwrap();
        let spec = FrameSpec::pilot_grid(16, 4, Modulation::Qam16).unwrap();
        let cfg = ReceiverConfig { n_gen: 1, survivors: 1, imaginations: 1, zeta1: 0.0, xi: f64::INFINITY, ..Default::default() };
        for (i, h) in channels(3).iter().enumerate() {
            let f = transmit(&spec, h, -4.0, &mut RngStream::new(i as u64, 1), &mut RngStream::new(i as u64, 2)).unwrap();
            let one = diff_training_estimate(&net, &f.y, &spec, 0.9, 11).unwrap();
            let rx = run_receiver(&f.y, &spec, f.sigma_n, &net, &cfg, 11, None).unwrap();
            assert_eq!(rx.steps, 1);
            assert_eq!(one, rx.h);
            assert_eq!(one, diff_training_estimate(&net, &f.y, &spec, 0.9, 11).unwrap());
        }
    }

    #[test]
    fn gaussian_noise_power_stays_in_support() {
        let s = DiffusionSchedule::new(1000, 0.2).unwrap();
        let h = crate::diffusion::normalize_channel(&channels(1)[0]).unwrap();
        let all: Vec<usize> = (0..16).collect();
        let mut rng = RngStream::new(4, 0);
        let mut powers = Vec::new();
        for _ in 0..500 {
            let x = direct_input(BaselineKind::DirectGaussian, &h, &all, &s, &mut rng).unwrap();
            powers.push((&x - &h).fro_norm_sqr() / h.fro_norm_sqr());
        }
        // realized noise energy tracks the drawn power, which is uniform on [0, 1] x ||H||^2
        let m = crate::numerics::mean(&powers);
        assert!((m - 0.5).abs() < 0.05, "{m}");
        assert!(powers.iter().all(|p| *p < 1.5));
    }

    #[test]
    fn inputs_are_zero_off_the_pilot_grid() {
        let s = DiffusionSchedule::new(1000, 0.2).unwrap();
        let spec = FrameSpec::pilot_grid(16, 4, Modulation::Qpsk).unwrap();
        let h = channels(1).remove(0);
        for kind in [BaselineKind::DirectDiff, BaselineKind::DirectGaussian, BaselineKind::DirectNoiseless] {
            let x = direct_input(kind, &h, spec.pilot_indices(), &s, &mut RngStream::new(0, 0)).unwrap();
            for &d in spec.data_indices() {
                assert!(x.column(d).iter().all(|v| v.norm() == 0.0));
            }
        }
        let x = direct_input(BaselineKind::DirectNoiseless, &h, spec.pilot_indices(), &s, &mut RngStream::new(0, 0)).unwrap();
        for &p in spec.pilot_indices() {
            assert_eq!(x.column(p), h.column(p));
        }
    }

    #[test]
    fn noiseless_pilot_observation_is_the_sliced_channel() {
        let spec = FrameSpec::pilot_grid(16, 4, Modulation::Qpsk).unwrap();
        let h = channels(1).remove(0);
        let f = transmit(&spec, &h, f64::INFINITY, &mut RngStream::new(0, 1), &mut RngStream::new(0, 2)).unwrap();
        let obs = pilot_observation(&f.y, &spec, 2.0).unwrap();
        assert!(obs.max_abs_diff(&pilot_slice(&h, spec.pilot_indices()).scale(0.5)) < 1e-12);
    }

    #[test]
    fn direct_estimator_rejects_other_grids() {
        let spec4 = FrameSpec::pilot_grid(16, 4, Modulation::Qpsk).unwrap();
        let spec8 = FrameSpec::pilot_grid(16, 8, Modulation::Qpsk).unwrap();
        let est = DirectEstimator::new(BaselineKind::DirectGaussian, &spec4, &small_net(), 0).unwrap();
        let h = channels(1).remove(0);
        let f = transmit(&spec8, &h, 0.0, &mut RngStream::new(0, 1), &mut RngStream::new(0, 2)).unwrap();
        assert!(matches!(est.estimate(&f.y, &spec8), Err(Error::PilotGridMismatch { .. })));
        let f4 = transmit(&spec4, &h, 0.0, &mut RngStream::new(0, 1), &mut RngStream::new(0, 2)).unwrap();
        assert!(est.estimate(&f4.y, &spec4).unwrap().is_finite());
        assert!(DirectEstimator::new(BaselineKind::DiffTraining, &spec4, &small_net(), 0).is_err());
    }

    #[test]
    fn direct_estimator_round_trips() {
        let spec = FrameSpec::pilot_grid(16, 4, Modulation::Qpsk).unwrap();
        let est = DirectEstimator::new(BaselineKind::DirectDiff, &spec, &small_net(), 5).unwrap();
        let bytes = est.to_bytes();
        let back = DirectEstimator::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.pilots(), spec.pilot_indices());
        assert!(DirectEstimator::from_bytes(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(DirectEstimator::from_bytes(&bad), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn training_reduces_direct_loss() {
        let spec = FrameSpec::pilot_grid(16, 4, Modulation::Qpsk).unwrap();
        let data = channels(128);
        let mut est = DirectEstimator::new(BaselineKind::DirectNoiseless, &spec, &small_net(), 1).unwrap();
        let before = est.loss_on(&data, 0).unwrap();
        let log = est.train(&data, &TrainConfig { epochs: 10, batch_size: 16, lr: 3e-3, seed: 2 }).unwrap();
        assert_eq!(log.len(), 10);
        let after = est.loss_on(&data, 0).unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
    }
}
