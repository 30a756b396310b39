//! Linear-beta noise schedule, channel normalization, forward noising and
//! the x0-prediction training loop.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixnet::{AdamState, MixerNetwork, Real};
use crate::numerics::{gaussian_cmat, CMat, RngStream};

const TAG_SHUFFLE: u64 = 0xd1f1;
const TAG_BATCH: u64 = 0xd1f2;
const TAG_EVAL: u64 = 0xd1f3;

/// `beta_t = beta_max * t / T`, `alpha_t = 1 - beta_t`,
/// `alpha_bar_t = prod_{s=1..t} alpha_s`, tabulated for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    n_steps: usize,
    beta_max: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(n_steps: usize, beta_max: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        if !(beta_max > 0.0 && beta_max < 1.0) {
            return Err(Error::InvalidConfig("beta_max must lie in (0, 1)".into()));
        }
        let beta: Vec<f64> = (0..=n_steps).map(|t| beta_max * t as f64 / n_steps as f64).collect();
        let mut alpha_bar = Vec::with_capacity(n_steps + 1);
        let mut acc = 1.0;
        alpha_bar.push(acc);
        for b in &beta[1..] {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { n_steps, beta_max, beta, alpha_bar })
    }

    /// Schedule a network was trained with.
    pub fn for_network<R: Real>(net: &MixerNetwork<R>) -> Result<Self> {
        Self::new(net.config().n_steps, net.config().beta_max)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Step whose `alpha_bar` is closest to `target`; ties go to the
    /// smaller step.
    pub fn nearest_step(&self, target: f64) -> usize {
        let mut best = 0;
        for t in 1..=self.n_steps {
            if (self.alpha_bar[t] - target).abs() < (self.alpha_bar[best] - target).abs() {
                best = t;
            }
        }
        best
    }
}

/// `sqrt(n_ant * n_car) * H / ||H||`.
pub fn normalize_channel(h: &CMat) -> Result<CMat> {
    let norm = h.fro_norm();
    if !(norm > 0.0) {
        return Err(Error::ZeroChannel);
    }
    Ok(h.scale((h.len() as f64).sqrt() / norm))
}

/// `sqrt(alpha_bar_t) * H + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise(h: &CMat, t: usize, schedule: &DiffusionSchedule, rng: &mut RngStream) -> Result<CMat> {
    if t > schedule.n_steps {
        return Err(Error::StepOutOfRange { t, max: schedule.n_steps });
    }
    let ab = schedule.alpha_bar(t);
    if t == 0 {
        return Ok(h.clone());
    }
    let eps = gaussian_cmat(h.rows(), h.cols(), rng);
    h.lincomb(ab.sqrt(), &eps, (1.0 - ab).sqrt())
}

/// Predicts the clean normalized channel from a noisy state.
pub trait Denoiser: Sync {
    /// Number of diffusion steps `T` the denoiser accepts.
    fn n_steps(&self) -> usize;
    /// Noise schedule upper end.
    fn beta_max(&self) -> f64;
    /// Outputs for a batch of states at one step.
    fn denoise_batch(&self, hs: &[CMat], t: usize) -> Result<Vec<CMat>>;

    fn denoise(&self, h: &CMat, t: usize) -> Result<CMat> {
        Ok(self.denoise_batch(std::slice::from_ref(h), t)?.pop().expect("one output"))
    }
}

impl<R: Real> Denoiser for MixerNetwork<R> {
    fn n_steps(&self) -> usize {
        self.config().n_steps
    }

    fn beta_max(&self) -> f64 {
        self.config().beta_max
    }

    fn denoise_batch(&self, hs: &[CMat], t: usize) -> Result<Vec<CMat>> {
        self.forward_batch(hs, &vec![t; hs.len()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 64, lr: 1e-3, epochs: 20, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample summed squared error over the epoch's batches.
    pub mean_loss: f64,
    /// Seconds since training started.
    pub wall_seconds: f64,
}

/// Builds one training pair `(input, t)` from a normalized clean channel.
pub type SampleFn<'a> = dyn Fn(&CMat, &mut RngStream) -> Result<(CMat, usize)> + 'a;

/// One shuffled pass over `train`, regressing onto normalized channels.
/// Batch `b` of epoch `e` draws its noise from stream `(seed, batch, e, b)`.
pub fn run_epoch<R: Real>(
    net: &mut MixerNetwork<R>,
    adam: &mut AdamState<R>,
    train: &[CMat],
    cfg: &TrainConfig,
    epoch: usize,
    sample: &SampleFn<'_>,
) -> Result<f64> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut RngStream::keyed(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
    let mut total = 0.0;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let mut rng = RngStream::keyed(cfg.seed, &[TAG_BATCH, epoch as u64, b as u64]);
        let mut inputs = Vec::with_capacity(chunk.len());
        let mut ts = Vec::with_capacity(chunk.len());
        let mut targets = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let target = normalize_channel(&train[i])?;
            let (input, t) = sample(&target, &mut rng)?;
            inputs.push(input);
            ts.push(t);
            targets.push(target);
        }
        let (loss, grad) = net.loss_and_grad(&inputs, &ts, &targets)?;
        adam.step(net, &grad)?;
        total += loss;
    }
    Ok(total / train.len() as f64)
}

/// Noisy-input recipe of the diffusion objective: `t` uniform on `0..=T`.
pub fn diffusion_sample(schedule: &DiffusionSchedule) -> impl Fn(&CMat, &mut RngStream) -> Result<(CMat, usize)> + '_ {
    move |h: &CMat, rng: &mut RngStream| {
        let t = rng.below(schedule.n_steps() + 1);
        Ok((forward_noise(h, t, schedule, rng)?, t))
    }
}

/// Training driver for the diffusion denoiser.
pub struct Trainer<R: Real> {
    pub net: MixerNetwork<R>,
    pub adam: AdamState<R>,
    pub schedule: DiffusionSchedule,
    pub cfg: TrainConfig,
    epoch: usize,
    started: Instant,
}

impl<R: Real> Trainer<R> {
    pub fn new(net: MixerNetwork<R>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = DiffusionSchedule::for_network(&net)?;
        let adam = AdamState::new(net.param_count(), cfg.lr);
        Ok(Self { net, adam, schedule, cfg, epoch: 0, started: Instant::now() })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn train_epoch(&mut self, train: &[CMat]) -> Result<EpochStats> {
        let sample = diffusion_sample(&self.schedule);
        let mean_loss = run_epoch(&mut self.net, &mut self.adam, train, &self.cfg, self.epoch, &sample)?;
        self.epoch += 1;
        Ok(EpochStats { epoch: self.epoch, mean_loss, wall_seconds: self.started.elapsed().as_secs_f64() })
    }
}

/// Mean squared distance to the clean normalized channel of the denoiser
/// output and of the noisy input itself, over `channels` noised to step `t`.
pub fn denoising_errors(net: &dyn Denoiser, channels: &[CMat], t: usize, schedule: &DiffusionSchedule, seed: u64) -> Result<(f64, f64)> {
    if channels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut clean = Vec::with_capacity(channels.len());
    let mut noisy = Vec::with_capacity(channels.len());
    for (i, h) in channels.iter().enumerate() {
        let h0 = normalize_channel(h)?;
        noisy.push(forward_noise(&h0, t, schedule, &mut RngStream::keyed(seed, &[TAG_EVAL, i as u64]))?);
        clean.push(h0);
    }
    let mut net_err = 0.0;
    let mut id_err = 0.0;
    for (chunk_c, chunk_n) in clean.chunks(64).zip(noisy.chunks(64)) {
        let out = net.denoise_batch(chunk_n, t)?;
        for ((c, n), o) in chunk_c.iter().zip(chunk_n).zip(&out) {
            net_err += (o - c).fro_norm_sqr();
            id_err += (n - c).fro_norm_sqr();
        }
    }
    let n = channels.len() as f64;
    Ok((net_err / n, id_err / n))
}

pub fn write_training_csv(path: impl AsRef<Path>, rows: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixnet::MixerConfig;

    #[test]
    fn alpha_bar_matches_direct_product() {
        let s = DiffusionSchedule::new(1000, 0.2).unwrap();
        for t in 0..=1000 {
            let direct: f64 = (1..=t).map(|tau| 1.0 - 0.2 * tau as f64 / 1000.0).product();
            assert!((s.alpha_bar(t) - direct).abs() <= 1e-15 * direct.max(1e-300), "t={t}");
        }
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.beta(1000) - 0.2).abs() < 1e-15);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1000).sqrt() < 0.01);
    }

    #[test]
    fn nearest_step_scan() {
        let s = DiffusionSchedule::new(1000, 0.2).unwrap();
        let t = s.nearest_step(0.9);
        let oracle = (0..=1000usize)
            .min_by(|&a, &b| (s.alpha_bar(a) - 0.9).abs().total_cmp(&(s.alpha_bar(b) - 0.9).abs()))
            .unwrap();
        assert_eq!(t, oracle);
        assert_eq!(t, 32);
        assert_eq!(s.nearest_step(1.0), 0);
        assert_eq!(s.nearest_step(0.0), 1000);
    }

    #[test]
    fn normalization_examples() {
        let mut rng = RngStream::new(1, 0);
        let h = gaussian_cmat(4, 8, &mut rng);
        let n = normalize_channel(&h).unwrap();
        assert!((n.fro_norm_sqr() - 32.0).abs() < 1e-9 * 32.0);
        assert!(normalize_channel(&h.scale(7.0)).unwrap().max_abs_diff(&n) < 1e-14);
        assert!(normalize_channel(&n).unwrap().max_abs_diff(&n) < 1e-14);
        assert!(matches!(normalize_channel(&CMat::zeros(2, 2)), Err(Error::ZeroChannel)));
    }

    #[test]
    fn forward_noise_is_identity_at_zero() {
        let s = DiffusionSchedule::new(1000, 0.2).unwrap();
        let h = normalize_channel(&gaussian_cmat(3, 5, &mut RngStream::new(2, 0))).unwrap();
        assert_eq!(forward_noise(&h, 0, &s, &mut RngStream::new(2, 1)).unwrap(), h);
        assert!(matches!(forward_noise(&h, 1001, &s, &mut RngStream::new(2, 1)), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn forward_noise_preserves_energy() {
        let s = DiffusionSchedule::new(1000, 0.2).unwrap();
        let h = normalize_channel(&gaussian_cmat(4, 8, &mut RngStream::new(3, 0))).unwrap();
        for t in [1, 50, 300, 1000] {
            let e: Vec<f64> = (0..1000)
                .map(|i| forward_noise(&h, t, &s, &mut RngStream::new(3, 1 + i)).unwrap().fro_norm_sqr())
                .collect();
            let mean = crate::numerics::mean(&e);
            // var of ||sqrt(ab) h + sqrt(1-ab) eps||^2 = 2 ab (1-ab) ||h||^2 + (1-ab)^2 N
            let ab = s.alpha_bar(t);
            let var = 2.0 * ab * (1.0 - ab) * 32.0 + (1.0 - ab).powi(2) * 32.0;
            let tol = 3.0 * (var / 1000.0).sqrt() + 1e-9;
            assert!((mean - 32.0).abs() < tol, "t={t}: {mean}");
        }
    }

    fn small_net(seed: u64) -> MixerNetwork<f32> {
        let cfg = MixerConfig { n_ant: 4, n_car: 8, depth: 2, token_hidden: 16, channel_hidden: 16, time_embed_dim: 8, n_steps: 1000, beta_max: 0.2 };
        MixerNetwork::new(cfg, seed).unwrap()
    }

    fn small_data(n: usize) -> Vec<CMat> {
        let cfg = crate::channel::ChannelModelConfig { n_ant: 4, n_car: 8, ..Default::default() };
        (0..n).map(|i| crate::channel::dataset_item(&cfg, 5, i)).collect()
    }

    #[test]
    fn initial_loss_is_output_power_plus_target_energy() {
        // An untrained output is uncorrelated with the target, so the
        // per-entry loss is E|f|^2 + E|target|^2 = E|f|^2 + 1.
        let net = small_net(1);
        let s = DiffusionSchedule::for_network(&net).unwrap();
        let data = small_data(256);
        let mut rng = RngStream::new(9, 0);
        let mut inputs = Vec::new();
        let mut ts = Vec::new();
        let mut targets = Vec::new();
        for h in &data {
            let h0 = normalize_channel(h).unwrap();
            let t = rng.below(1001);
            inputs.push(forward_noise(&h0, t, &s, &mut rng).unwrap());
            ts.push(t);
            targets.push(h0);
        }
        let entries = (256 * 32) as f64;
        let (loss, _) = net.loss_and_grad(&inputs, &ts, &targets).unwrap();
        let out_power: f64 = net.forward_batch(&inputs, &ts).unwrap().iter().map(|o| o.fro_norm_sqr()).sum::<f64>() / entries;
        let per_entry = loss / entries;
        assert!(per_entry.is_finite());
        assert!((per_entry - (out_power + 1.0)).abs() < 0.15 * per_entry, "{per_entry} vs {out_power}");
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = small_data(256);
        let cfg = TrainConfig { batch_size: 32, lr: 1e-3, epochs: 3, seed: 4 };
        let run = || {
            let mut tr = Trainer::new(small_net(2), cfg.clone()).unwrap();
            let losses: Vec<f64> = (0..6).map(|_| tr.train_epoch(&data).unwrap().mean_loss).collect();
            (losses, tr.net)
        };
        let (a, net_a) = run();
        let (b, net_b) = run();
        assert_eq!(a, b);
        assert_eq!(net_a.params(), net_b.params());
        assert!(a[5] < a[0], "{a:?}");
    }

    #[test]
    fn time_embedding_is_alive_after_training() {
        let data = small_data(200);
        let mut tr = Trainer::new(small_net(3), TrainConfig { batch_size: 2, lr: 1e-3, epochs: 1, seed: 5 }).unwrap();
        tr.train_epoch(&data).unwrap();
        let h = normalize_channel(&data[0]).unwrap();
        let a = tr.net.forward(&h, 10).unwrap().fro_norm();
        let b = tr.net.forward(&h, 900).unwrap().fro_norm();
        assert!((a - b).abs() > 1e-6, "{a} vs {b}");
    }

    #[test]
    fn empty_train_split_is_an_error() {
        let mut tr = Trainer::new(small_net(1), TrainConfig::default()).unwrap();
        assert!(matches!(tr.train_epoch(&[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn training_csv_has_expected_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.csv");
        write_training_csv(&p, &[EpochStats { epoch: 1, mean_loss: 2.0, wall_seconds: 0.5 }]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,mean_loss,wall_seconds");
    }
}
