//! Diffusion receiver: pilot-seeded initialization, generation, memorized
//! screening, imagination and early termination.
//!
//! Each step runs the denoiser on all `M * N` candidate states, decides the
//! data symbols for every clean prediction, scores it by the
//! reconstruction error `e = ||sigma_h * H_tilde ⊙ x_tilde - Y||^2`, rolls a
//! candidate back to its lineage's previous prediction when `e` grew, keeps
//! the best `M`, and spawns `N` children per survivor along a DDIM step with
//! optional fresh noise, likelihood guidance and pilot reinforcement.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::harness::nmse;
use crate::modem::{demodulate, recon_error, soft_symbol_error, FrameSpec};
use crate::numerics::{gaussian_cmat, CMat, RngStream, C64};

const TAG_INIT: u64 = 0x7e01;
const TAG_IMAGINE: u64 = 0x7e02;
const TAG_QUARANTINE: u64 = 0x7e03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReceiverConfig {
    /// Share `rho` of the initial state's energy carried by the pilot
    /// observation, in `[0, 1)`.
    pub init_power_fraction: f64,
    /// Fresh-noise weight.
    pub zeta1: f64,
    /// Likelihood-gradient weight.
    pub zeta2: f64,
    /// Pilot-reinforcement weight.
    pub zeta3: f64,
    /// Early-quit slack.
    pub xi: f64,
    /// Survivors kept per step (`M`).
    pub survivors: usize,
    /// Children per survivor (`N`).
    pub imaginations: usize,
    /// Maximum generation steps.
    pub n_gen: usize,
    /// Roll back a candidate whose error grew.
    pub memory: bool,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        Self {
            init_power_fraction: 0.9,
            zeta1: 0.4,
            zeta2: 0.0,
            zeta3: 0.0,
            xi: 0.0,
            survivors: 16,
            imaginations: 8,
            n_gen: 100,
            memory: true,
        }
    }
}

impl ReceiverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.survivors == 0 || self.imaginations == 0 || self.n_gen == 0 {
            return bad("survivors, imaginations and n_gen must be at least 1");
        }
        let zetas = [self.zeta1, self.zeta2, self.zeta3];
        if zetas.iter().any(|z| !(*z >= 0.0)) || !(zetas.iter().sum::<f64>() <= 1.0) {
            return bad("zeta weights must be nonnegative and sum to at most 1");
        }
        if !(self.xi >= 0.0) {
            return bad("xi must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.init_power_fraction) {
            return Err(Error::InfeasibleInit { rho: self.init_power_fraction, bound: 1.0 });
        }
        Ok(())
    }

    pub fn population(&self) -> usize {
        self.survivors * self.imaginations
    }
}

/// `||Y|| / sqrt(n_ant * n_car)`.
pub fn estimate_sigma_h(y: &CMat) -> Result<f64> {
    let s = y.fro_norm() / (y.len() as f64).sqrt();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::ZeroSignal);
    }
    Ok(s)
}

/// Initialization constants derived from the received frame.
#[derive(Clone, Debug)]
pub struct InitPlan {
    pub gamma: f64,
    pub delta: f64,
    pub t0: usize,
    /// Noise-free part of the initial state: `gamma * y_i / (sigma_h * x_i)`
    /// on pilot columns, zero elsewhere.
    pub pilot_estimate: CMat,
}

/// Chooses `gamma`, `delta` and `t0` so that the pilot observation carries
/// the share `rho` of the initial state's unit entry energy:
/// `gamma^2 = rho (P + D) / P`, `delta = sqrt(1 - rho)`, and `t0` is the
/// step whose `alpha_bar` is nearest to `gamma^2 P / (P + D) = rho`. The
/// gain estimate includes the receiver noise, so `y_i / (sigma_h x_i)` has
/// unit entry power at any SNR.
pub fn init_plan(y: &CMat, spec: &FrameSpec, sigma_h: f64, schedule: &DiffusionSchedule, rho: f64) -> Result<InitPlan> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InfeasibleInit { rho, bound: 1.0 });
    }
    if y.cols() != spec.n_car() {
        return Err(Error::dims(spec.n_car(), y.cols()));
    }
    let p = spec.n_pilots() as f64;
    let n = spec.n_car() as f64;
    let gamma = (rho * n / p).sqrt();
    let delta = (1.0 - rho).sqrt();
    let t0 = schedule.nearest_step(gamma * gamma * p / n);
    let n_car = spec.n_car();
    let mut h0 = CMat::zeros(y.rows(), n_car);
    {
        let out = h0.as_mut_slice();
        let ys = y.as_slice();
        for (slot, &i) in spec.pilot_indices().iter().enumerate() {
            let scale = gamma / (sigma_h * spec.pilot_values()[slot]);
            for r in 0..y.rows() {
                out[r * n_car + i] = ys[r * n_car + i] * scale;
            }
        }
    }
    Ok(InitPlan { gamma, delta, t0, pilot_estimate: h0 })
}

/// Initial state of candidate `j`, noise from stream `(seed, init, j)`.
pub fn init_candidate(plan: &InitPlan, seed: u64, j: usize) -> CMat {
    let h = &plan.pilot_estimate;
    let eps = gaussian_cmat(h.rows(), h.cols(), &mut RngStream::keyed(seed, &[TAG_INIT, j as u64]));
    h + &eps.scale(plan.delta)
}

/// `sqrt((1 - ab_next) / (1 - ab_t)) * sqrt(1 - ab_t / ab_next)`.
pub fn ddim_sigma(ab_t: f64, ab_next: f64) -> f64 {
    ((1.0 - ab_next) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_next).max(0.0).sqrt()
}

/// Ascent direction of the Gaussian log-likelihood of `Y` in the channel:
/// column `i` is `(y_i - x_i sigma_h h_i) conj(x_i) / (sigma_h^2 eps_i +
/// sigma_n^2)`, where `eps_i` is the soft symbol error of the decision
/// (zero on pilots). Without noise the columns are left unweighted.
pub fn guidance_gradient(h_tilde: &CMat, x_tilde: &[C64], x_hat: &[C64], y: &CMat, sigma_h: f64, sigma_n: f64, spec: &FrameSpec) -> Result<CMat> {
    if h_tilde.shape() != y.shape() || x_tilde.len() != y.cols() || x_hat.len() != y.cols() {
        return Err(Error::dims(format!("{}x{}", y.rows(), y.cols()), format!("{}x{}", h_tilde.rows(), h_tilde.cols())));
    }
    let n_car = y.cols();
    let eps0 = (sigma_n / sigma_h).powi(2);
    let mut weights = Vec::with_capacity(n_car);
    for i in 0..n_car {
        let w = if sigma_n > 0.0 {
            let eps = if spec.is_pilot(i) { 0.0 } else { soft_symbol_error(x_hat[i], spec.constellation(), eps0)? };
            x_tilde[i].conj() / (sigma_h * sigma_h * eps + sigma_n * sigma_n)
        } else {
            x_tilde[i].conj()
        };
        weights.push(w);
    }
    let hs = h_tilde.as_slice();
    let ys = y.as_slice();
    let data = (0..hs.len())
        .map(|k| {
            let i = k % n_car;
            (ys[k] - x_tilde[i] * hs[k] * sigma_h) * weights[i]
        })
        .collect();
    CMat::from_vec(y.rows(), n_car, data)
}

/// Per-step trace row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// Diffusion step reached after this iteration.
    pub t: usize,
    pub best_e: f64,
    /// NaN unless the true channel was supplied.
    pub best_nmse: f64,
    /// Survivors whose clean prediction was updated rather than rolled back.
    pub survivors_changed: usize,
    pub early_quit: bool,
}

#[derive(Clone, Debug)]
pub struct ReceiverOutput {
    pub h: CMat,
    pub x: Vec<C64>,
    pub final_e: f64,
    pub sigma_h: f64,
    pub t0: usize,
    pub steps: usize,
    pub early_quit: bool,
    /// Non-finite candidates replaced by fresh noise.
    pub quarantined: usize,
    /// A selected decision hit a zero channel column.
    pub degenerate: bool,
    pub trace: Vec<TraceRow>,
}

#[derive(Clone)]
struct Estimate {
    h_tilde: CMat,
    x_tilde: Vec<C64>,
    x_hat: Vec<C64>,
    e: f64,
    degenerate: bool,
}

/// Runs the receiver on one frame. Randomness is drawn from streams keyed
/// by `seed`, the step and the candidate index, so results do not depend
/// on evaluation order. `truth` only feeds the trace.
#[allow(clippy::too_many_arguments)]
pub fn run_receiver(
    y: &CMat,
    spec: &FrameSpec,
    sigma_n: f64,
    net: &dyn Denoiser,
    cfg: &ReceiverConfig,
    seed: u64,
    truth: Option<&CMat>,
) -> Result<ReceiverOutput> {
    cfg.validate()?;
    if y.cols() != spec.n_car() {
        return Err(Error::dims(spec.n_car(), y.cols()));
    }
    if !(sigma_n >= 0.0) {
        return Err(Error::InvalidConfig("noise level must be nonnegative".into()));
    }
    let schedule = DiffusionSchedule::new(net.n_steps(), net.beta_max())?;
    let sigma_h = estimate_sigma_h(y)?;
    let plan = init_plan(y, spec, sigma_h, &schedule, cfg.init_power_fraction)?;
    let pop = cfg.population();
    let mut states: Vec<CMat> = (0..pop).map(|j| init_candidate(&plan, seed, j)).collect();
    let mut memory: Vec<Option<Estimate>> = vec![None; pop];
    let decrement = ((plan.t0 as f64 / cfg.n_gen as f64).round() as usize).max(1);
    let gate = cfg.xi * cfg.xi + sigma_n * sigma_n * y.len() as f64;
    let mut t = plan.t0;
    let mut trace = Vec::new();
    let mut quarantined = 0;

    for step in 1.. {
        let t_next = t.saturating_sub(decrement);
        let outputs = net.denoise_batch(&states, t)?;
        let mut current = Vec::with_capacity(pop);
        let mut updated = Vec::with_capacity(pop);
        for (j, h_tilde) in outputs.into_iter().enumerate() {
            let fresh = if h_tilde.is_finite() {
                let d = demodulate(&h_tilde, y, sigma_h, spec)?;
                let e = recon_error(&h_tilde, &d.x_tilde, y, sigma_h)?;
                Estimate { h_tilde, x_tilde: d.x_tilde, x_hat: d.x_hat, e: if e.is_finite() { e } else { f64::INFINITY }, degenerate: d.degenerate }
            } else {
                quarantined += 1;
                Estimate { x_tilde: vec![C64::new(0.0, 0.0); y.cols()], x_hat: vec![C64::new(0.0, 0.0); y.cols()], h_tilde, e: f64::INFINITY, degenerate: true }
            };
            match memory[j].take() {
                Some(prev) if cfg.memory && fresh.e > prev.e => {
                    current.push(prev);
                    updated.push(false);
                }
                _ => {
                    current.push(fresh);
                    updated.push(true);
                }
            }
        }
        let mut order: Vec<usize> = (0..pop).collect();
        order.sort_by(|&a, &b| current[a].e.total_cmp(&current[b].e).then(a.cmp(&b)));
        let best = &current[order[0]];
        let early_quit = best.e <= gate;
        let best_nmse = match truth {
            Some(h) if best.h_tilde.is_finite() => nmse(&best.h_tilde.scale(sigma_h), h)?,
            _ => f64::NAN,
        };
        let kept = &order[..cfg.survivors.min(pop)];
        trace.push(TraceRow {
            step,
            t: t_next,
            best_e: best.e,
            best_nmse,
            survivors_changed: kept.iter().filter(|&&j| updated[j]).count(),
            early_quit,
        });
        if early_quit || t_next == 0 {
            if !best.e.is_finite() {
                return Err(Error::NonFinite(0));
            }
            return Ok(ReceiverOutput {
                h: best.h_tilde.scale(sigma_h),
                x: best.x_tilde.clone(),
                final_e: best.e,
                sigma_h,
                t0: plan.t0,
                steps: step,
                early_quit,
                quarantined,
                degenerate: best.degenerate,
                trace,
            });
        }

        // imagination
        let ab_t = schedule.alpha_bar(t);
        let ab_next = schedule.alpha_bar(t_next);
        let sigma_t = ddim_sigma(ab_t, ab_next);
        let zeta_sum = cfg.zeta1 + cfg.zeta2 + cfg.zeta3;
        let carry = (1.0 - ab_next - zeta_sum * sigma_t * sigma_t).max(0.0).sqrt();
        let mut next_states = Vec::with_capacity(pop);
        let mut next_memory = Vec::with_capacity(pop);
        for (rank, &parent) in kept.iter().enumerate() {
            let est = &current[parent];
            let eps_tilde = states[parent].lincomb(1.0 / (1.0 - ab_t).sqrt(), &est.h_tilde, -(ab_t / (1.0 - ab_t)).sqrt())?;
            let mut base = est.h_tilde.lincomb(ab_next.sqrt(), &eps_tilde, carry)?;
            if cfg.zeta2 > 0.0 && est.e.is_finite() {
                let g = guidance_gradient(&est.h_tilde, &est.x_tilde, &est.x_hat, y, sigma_h, sigma_n, spec)?;
                let norm = g.fro_norm();
                if norm > 0.0 {
                    base.axpy(sigma_t * cfg.zeta2 / norm, &g)?;
                }
            }
            if cfg.zeta3 > 0.0 {
                base.axpy(cfg.zeta3, &plan.pilot_estimate)?;
            }
            for i in 0..cfg.imaginations {
                let child = rank * cfg.imaginations + i;
                let mut h = base.clone();
                if cfg.zeta1 > 0.0 {
                    let mut rng = RngStream::keyed(seed, &[TAG_IMAGINE, step as u64, child as u64]);
                    h.axpy(cfg.zeta1 * sigma_t, &gaussian_cmat(y.rows(), y.cols(), &mut rng))?;
                }
                if !h.is_finite() {
                    quarantined += 1;
                    let mut rng = RngStream::keyed(seed, &[TAG_QUARANTINE, step as u64, child as u64]);
                    h = gaussian_cmat(y.rows(), y.cols(), &mut rng);
                }
                next_states.push(h);
                next_memory.push(Some(est.clone()));
            }
        }
        states = next_states;
        memory = next_memory;
        t = t_next;
    }
    unreachable!("the step loop only exits by returning")
}

pub fn write_trace_csv(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the trace as CSV to any sink.
pub fn write_trace<W: Write>(sink: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::normalize_channel;
    use crate::modem::{transmit, Modulation};
    use crate::numerics::mean;

    /// Returns the normalized true channel regardless of its input.
    struct Oracle {
        h: CMat,
    }

    impl Denoiser for Oracle {
        fn n_steps(&self) -> usize {
            1000
        }
        fn beta_max(&self) -> f64 {
            0.2
        }
        fn denoise_batch(&self, hs: &[CMat], _t: usize) -> Result<Vec<CMat>> {
            Ok(hs.iter().map(|_| self.h.clone()).collect())
        }
    }

    /// Shrinks its input toward zero; a weak but deterministic denoiser.
    struct Shrink;

    impl Denoiser for Shrink {
        fn n_steps(&self) -> usize {
            1000
        }
        fn beta_max(&self) -> f64 {
            0.2
        }
        fn denoise_batch(&self, hs: &[CMat], t: usize) -> Result<Vec<CMat>> {
            let k = 1.0 / (1.0 + t as f64 / 200.0);
            Ok(hs.iter().map(|h| h.scale(k)).collect())
        }
    }

    fn frame(seed: u64, snr_db: f64, n_pilots: usize, m: Modulation) -> (FrameSpec, crate::modem::Frame) {
        let cfg = crate::channel::ChannelModelConfig { n_ant: 4, n_car: 16, ..Default::default() };
        let h = crate::channel::dataset_item(&cfg, 3, seed as usize);
        let spec = FrameSpec::pilot_grid(16, n_pilots, m).unwrap();
        let f = transmit(&spec, &h, snr_db, &mut RngStream::new(seed, 1), &mut RngStream::new(seed, 2)).unwrap();
        (spec, f)
    }

    #[test]
    fn sigma_h_examples() {
        let ones = CMat::from_vec(2, 3, vec![C64::new(1.0, 0.0); 6]).unwrap();
        assert_eq!(estimate_sigma_h(&ones).unwrap(), 1.0);
        let (_, f) = frame(1, f64::INFINITY, 4, Modulation::Qpsk);
        let s = estimate_sigma_h(&f.y).unwrap();
        assert!((s - f.h.fro_norm() / 8.0).abs() < 1e-12);
        assert!(matches!(estimate_sigma_h(&CMat::zeros(2, 2)), Err(Error::ZeroSignal)));
    }

    #[test]
    fn sigma_h_adds_noise_power() {
        let h = gaussian_cmat(4, 16, &mut RngStream::new(5, 0));
        let spec = FrameSpec::pilot_grid(16, 4, Modulation::Qpsk).unwrap();
        let sigma_h2 = h.fro_norm_sqr() / 64.0;
        let mut vals = Vec::new();
        let mut sn2 = 0.0;
        for i in 0..1000 {
            let f = transmit(&spec, &h, 0.0, &mut RngStream::new(i, 1), &mut RngStream::new(i, 2)).unwrap();
            sn2 = f.sigma_n * f.sigma_n;
            vals.push(estimate_sigma_h(&f.y).unwrap().powi(2));
        }
        let m = mean(&vals);
        let sd = crate::numerics::sample_std(&vals);
        assert!((m - (sigma_h2 + sn2)).abs() < 3.0 * sd / (1000f64).sqrt(), "{m} vs {}", sigma_h2 + sn2);
    }

    #[test]
    fn init_examples() {
        let s = DiffusionSchedule::new(1000, 0.2).unwrap();
        let (spec, f) = frame(2, f64::INFINITY, 4, Modulation::Qpsk);
        let sh = estimate_sigma_h(&f.y).unwrap();
        let p = init_plan(&f.y, &spec, sh, &s, 0.9).unwrap();
        assert!((p.delta - 0.1f64.sqrt()).abs() < 1e-9);
        assert!((p.delta - 0.31623).abs() < 1e-5);
        assert_eq!(p.t0, 32);
        assert!((p.gamma - (0.9f64 * 16.0 / 4.0).sqrt()).abs() < 1e-12);
        let p0 = init_plan(&f.y, &spec, sh, &s, 0.0).unwrap();
        assert_eq!((p0.gamma, p0.delta), (0.0, 1.0));
        assert!(p0.pilot_estimate.fro_norm() == 0.0);
        assert!(matches!(init_plan(&f.y, &spec, sh, &s, 1.0), Err(Error::InfeasibleInit { .. })));
        assert!(matches!(init_plan(&f.y, &spec, sh, &s, -0.1), Err(Error::InfeasibleInit { .. })));
    }

    #[test]
    fn init_energy_matches_unit_entry_power() {
        let s = DiffusionSchedule::new(1000, 0.2).unwrap();
        let mut energies = Vec::new();
        for i in 0..1000 {
            let (spec, f) = frame(100 + i, 0.0, 4, Modulation::Qpsk);
            let sh = estimate_sigma_h(&f.y).unwrap();
            let p = init_plan(&f.y, &spec, sh, &s, 0.9).unwrap();
            energies.push(init_candidate(&p, i, 0).fro_norm_sqr());
        }
        let m = mean(&energies);
        let sd = crate::numerics::sample_std(&energies);
        assert!((m - 64.0).abs() < 3.0 * sd / (1000f64).sqrt(), "{m} +- {sd}");
    }

    #[test]
    fn ddim_sigma_examples() {
        assert!((ddim_sigma(0.81, 0.9) - (0.1f64 / 0.19).sqrt() * 0.1f64.sqrt()).abs() < 1e-15);
        assert!((ddim_sigma(0.81, 0.9) - 0.22942).abs() < 1e-4);
        assert_eq!(ddim_sigma(0.5, 0.5), 0.0);
    }

    #[test]
    fn oracle_denoiser_stops_after_one_step() {
        // unit-modulus symbols make the gain estimate exact; the slack only
        // absorbs rounding
        let (spec, f) = frame(3, f64::INFINITY, 4, Modulation::Qpsk);
        let oracle = Oracle { h: normalize_channel(&f.h).unwrap() };
        let cfg = ReceiverConfig { init_power_fraction: 0.99, xi: 1e-6, survivors: 2, imaginations: 2, ..Default::default() };
        let out = run_receiver(&f.y, &spec, 0.0, &oracle, &cfg, 1, Some(&f.h)).unwrap();
        assert_eq!(out.steps, 1);
        assert!(out.early_quit);
        assert!(out.final_e < 1e-20);
        assert_eq!(out.x, f.x);
        assert!(nmse(&out.h, &f.h).unwrap() < 1e-20);
    }

    #[test]
    fn large_slack_quits_after_one_step() {
        let (spec, f) = frame(4, 0.0, 4, Modulation::Qpsk);
        let cfg = ReceiverConfig { xi: 1e6, survivors: 2, imaginations: 2, ..Default::default() };
        let out = run_receiver(&f.y, &spec, f.sigma_n, &Shrink, &cfg, 1, None).unwrap();
        assert_eq!(out.steps, 1);
        assert!(out.early_quit);
        assert!(out.trace[0].best_nmse.is_nan());
    }

    #[test]
    fn step_count_is_bounded_by_t0_and_n_gen() {
        let (spec, f) = frame(5, 0.0, 4, Modulation::Qpsk);
        for n_gen in [1, 5, 1000] {
            let cfg = ReceiverConfig { n_gen, survivors: 1, imaginations: 1, ..Default::default() };
            let out = run_receiver(&f.y, &spec, f.sigma_n, &Shrink, &cfg, 1, None).unwrap();
            assert!(out.steps <= n_gen.min(out.t0).max(1) + 1, "{} steps, t0 {}", out.steps, out.t0);
            let ts: Vec<usize> = out.trace.iter().map(|r| r.t).collect();
            assert!(ts.windows(2).all(|w| w[1] < w[0]));
            if !out.early_quit {
                assert_eq!(*ts.last().unwrap(), 0);
            }
        }
    }

    #[test]
    fn best_error_never_increases_with_memory() {
        for seed in 0..5 {
            let (spec, f) = frame(10 + seed, -2.0, 4, Modulation::Qam16);
            let cfg = ReceiverConfig { survivors: 4, imaginations: 3, n_gen: 20, ..Default::default() };
            let out = run_receiver(&f.y, &spec, f.sigma_n, &Shrink, &cfg, seed, Some(&f.h)).unwrap();
            assert!(out.trace.windows(2).all(|w| w[1].best_e <= w[0].best_e), "{:?}", out.trace);
        }
    }

    #[test]
    fn receiver_is_deterministic() {
        let (spec, f) = frame(6, 0.0, 4, Modulation::Qpsk);
        let cfg = ReceiverConfig { survivors: 3, imaginations: 2, n_gen: 10, ..Default::default() };
        let a = run_receiver(&f.y, &spec, f.sigma_n, &Shrink, &cfg, 9, Some(&f.h)).unwrap();
        let b = run_receiver(&f.y, &spec, f.sigma_n, &Shrink, &cfg, 9, Some(&f.h)).unwrap();
        assert_eq!(a.h, b.h);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn joint_gain_scales_channel_only() {
        let (spec, f) = frame(7, 0.0, 4, Modulation::Qam16);
        let cfg = ReceiverConfig { survivors: 3, imaginations: 2, n_gen: 10, ..Default::default() };
        let base = run_receiver(&f.y, &spec, f.sigma_n, &Shrink, &cfg, 2, None).unwrap();
        for c in [4.0, 0.37] {
            let out = run_receiver(&f.y.scale(c), &spec, f.sigma_n * c, &Shrink, &cfg, 2, None).unwrap();
            assert_eq!(out.x, base.x);
            assert!(out.h.max_abs_diff(&base.h.scale(c)) <= 1e-9 * c * base.h.fro_norm());
        }
    }

    #[test]
    fn guidance_examples() {
        let (spec, f) = frame(8, f64::INFINITY, 4, Modulation::Qpsk);
        let sh = estimate_sigma_h(&f.y).unwrap();
        let ht = f.h.scale(1.0 / sh);
        let g = guidance_gradient(&ht, &f.x, &f.x, &f.y, sh, 0.0, &spec).unwrap();
        assert!(g.fro_norm() < 1e-12);

        // a larger soft error shrinks the column weight
        let h = gaussian_cmat(4, 16, &mut RngStream::new(8, 3));
        let near = f.x.clone();
        let mut far = f.x.clone();
        let d = spec.data_indices()[0];
        far[d] = C64::new(0.0, 0.0);
        let gn = guidance_gradient(&h, &f.x, &near, &f.y, sh, 0.5, &spec).unwrap();
        let gf = guidance_gradient(&h, &f.x, &far, &f.y, sh, 0.5, &spec).unwrap();
        let col = |m: &CMat| m.column(d).iter().map(|v| v.norm_sqr()).sum::<f64>();
        assert!(col(&gf) < col(&gn));
    }

    #[test]
    fn guidance_points_along_likelihood_gradient() {
        // finite differences of L(h) = -||y - x sigma h||^2 on one 2x1 column
        let spec = FrameSpec::pilot_grid(1, 1, Modulation::Qpsk).unwrap();
        let mut rng = RngStream::new(12, 0);
        let h = gaussian_cmat(2, 1, &mut rng);
        let y = gaussian_cmat(2, 1, &mut rng);
        let x = [C64::new(1.0, 0.0)];
        let sigma = 1.3;
        let g = guidance_gradient(&h, &x, &x, &y, sigma, 0.4, &spec).unwrap();
        let loss = |h: &CMat| -> f64 { (0..2).map(|r| (y.get(r, 0) - x[0] * h.get(r, 0) * sigma).norm_sqr()).sum::<f64>() * -1.0 };
        let step = 1e-6;
        let mut fd = Vec::new();
        for k in 0..2 {
            for part in [C64::new(1.0, 0.0), C64::new(0.0, 1.0)] {
                let mut hp = h.clone();
                hp.as_mut_slice()[k] += part * step;
                let mut hm = h.clone();
                hm.as_mut_slice()[k] -= part * step;
                fd.push((loss(&hp) - loss(&hm)) / (2.0 * step));
            }
        }
        // real gradient (d/dRe, d/dIm) against the returned complex direction
        let dir: Vec<f64> = g.as_slice().iter().flat_map(|v| [v.re, v.im]).collect();
        let ratio = fd[0] / dir[0];
        assert!(ratio > 0.0);
        for (a, b) in fd.iter().zip(&dir) {
            assert!((a - ratio * b).abs() < 1e-6 * (1.0 + a.abs()), "{fd:?} vs {dir:?}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (spec, f) = frame(9, 0.0, 4, Modulation::Qpsk);
        for cfg in [
            ReceiverConfig { survivors: 0, ..Default::default() },
            ReceiverConfig { zeta1: 0.6, zeta2: 0.6, ..Default::default() },
            ReceiverConfig { init_power_fraction: 1.0, ..Default::default() },
        ] {
            assert!(run_receiver(&f.y, &spec, f.sigma_n, &Shrink, &cfg, 0, None).is_err());
        }
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        write_trace(&mut buf, &[TraceRow { step: 1, t: 5, best_e: 1.0, best_nmse: 0.5, survivors_changed: 2, early_quit: false }]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "step,t,best_e,best_nmse,survivors_changed,early_quit");
    }
}
