//! Constellations, pilot layout, the AWGN link and per-subcarrier hard
//! decisions.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CMat, RngStream, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modulation {
    #[serde(rename = "qpsk", alias = "QPSK")]
    Qpsk,
    #[serde(rename = "qam16", alias = "QAM16", alias = "16qam")]
    Qam16,
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modulation::Qpsk => "qpsk",
            Modulation::Qam16 => "qam16",
        })
    }
}

impl FromStr for Modulation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qpsk" => Ok(Modulation::Qpsk),
            "qam16" | "16qam" | "16-qam" => Ok(Modulation::Qam16),
            other => Err(Error::InvalidConfig(format!("unknown modulation {other:?}"))),
        }
    }
}

/// Unit average power symbol alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct Constellation {
    modulation: Modulation,
    points: Vec<C64>,
}

impl Constellation {
    pub fn new(modulation: Modulation) -> Self {
        let points = match modulation {
            Modulation::Qpsk => [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
                .iter()
                .map(|&(a, b)| C64::new(a, b) * FRAC_1_SQRT_2)
                .collect(),
            Modulation::Qam16 => {
                let levels = [-3.0, -1.0, 1.0, 3.0];
                let s = 1.0 / 10f64.sqrt();
                levels.iter().flat_map(|&a| levels.iter().map(move |&b| C64::new(a * s, b * s))).collect()
            }
        };
        Self { modulation, points }
    }

    pub fn modulation(&self) -> Modulation {
        self.modulation
    }

    pub fn points(&self) -> &[C64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the nearest point; ties go to the lowest index.
    pub fn nearest_index(&self, x: C64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (x - p).norm_sqr();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    /// Nearest constellation point in Euclidean distance.
    pub fn quantize(&self, x: C64) -> C64 {
        self.points[self.nearest_index(x)]
    }
}

/// Pilot/data layout of one OFDM symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSpec {
    n_car: usize,
    pilot_indices: Vec<usize>,
    data_indices: Vec<usize>,
    pilot_values: Vec<C64>,
    /// `pilot_slot[i]` is the position of subcarrier `i` in `pilot_indices`.
    pilot_slot: Vec<Option<usize>>,
    constellation: Constellation,
}

impl FrameSpec {
    /// Evenly spaced pilots at `k * n_car / n_pilots`, all with value 1.
    pub fn pilot_grid(n_car: usize, n_pilots: usize, modulation: Modulation) -> Result<Self> {
        if n_pilots == 0 || n_pilots > n_car || n_car % n_pilots != 0 {
            return Err(Error::PilotSpacing { n_car, n_pilots });
        }
        let spacing = n_car / n_pilots;
        let pilots: Vec<usize> = (0..n_pilots).map(|k| k * spacing).collect();
        Self::with_pilots(n_car, pilots, vec![C64::new(1.0, 0.0); n_pilots], modulation)
    }

    pub fn with_pilots(
        n_car: usize,
        pilot_indices: Vec<usize>,
        pilot_values: Vec<C64>,
        modulation: Modulation,
    ) -> Result<Self> {
        if pilot_indices.len() != pilot_values.len() {
            return Err(Error::dims(pilot_indices.len(), pilot_values.len()));
        }
        if pilot_indices.is_empty() {
            return Err(Error::InvalidConfig("at least one pilot is required".into()));
        }
        if pilot_values.iter().any(|v| (v.norm() - 1.0).abs() > 1e-12) {
            return Err(Error::InvalidConfig("pilot values must have unit modulus".into()));
        }
        let mut pilot_slot = vec![None; n_car];
        for (slot, &i) in pilot_indices.iter().enumerate() {
            if i >= n_car || pilot_slot[i].is_some() {
                return Err(Error::InvalidConfig(format!("invalid or repeated pilot index {i}")));
            }
            pilot_slot[i] = Some(slot);
        }
        let data_indices = (0..n_car).filter(|&i| pilot_slot[i].is_none()).collect();
        Ok(Self {
            n_car,
            pilot_indices,
            data_indices,
            pilot_values,
            pilot_slot,
            constellation: Constellation::new(modulation),
        })
    }

    pub fn n_car(&self) -> usize {
        self.n_car
    }

    pub fn pilot_indices(&self) -> &[usize] {
        &self.pilot_indices
    }

    pub fn data_indices(&self) -> &[usize] {
        &self.data_indices
    }

    pub fn pilot_values(&self) -> &[C64] {
        &self.pilot_values
    }

    pub fn n_pilots(&self) -> usize {
        self.pilot_indices.len()
    }

    pub fn constellation(&self) -> &Constellation {
        &self.constellation
    }

    /// Known pilot symbol at subcarrier `i`, if `i` is a pilot.
    pub fn pilot_value(&self, i: usize) -> Option<C64> {
        self.pilot_slot[i].map(|s| self.pilot_values[s])
    }

    pub fn is_pilot(&self, i: usize) -> bool {
        self.pilot_slot[i].is_some()
    }
}

/// One transmitted and received OFDM symbol.
#[derive(Clone, Debug)]
pub struct Frame {
    pub x: Vec<C64>,
    pub h: CMat,
    pub y: CMat,
    pub sigma_n: f64,
}

/// Noise standard deviation giving `snr_db` relative to the mean entry
/// power of `h`.
pub fn noise_std_for(h: &CMat, snr_db: f64) -> f64 {
    let signal = h.fro_norm_sqr() / h.len() as f64;
    (signal / 10f64.powf(snr_db / 10.0)).sqrt()
}

/// Draws data symbols from `symbols`, noise from `noise`, and returns
/// `Y = H ⊙ x + N`. `snr_db = +inf` gives a noiseless frame.
pub fn transmit(
    spec: &FrameSpec,
    h: &CMat,
    snr_db: f64,
    symbols: &mut RngStream,
    noise: &mut RngStream,
) -> Result<Frame> {
    if h.cols() != spec.n_car {
        return Err(Error::dims(spec.n_car, h.cols()));
    }
    let points = spec.constellation.points();
    let x: Vec<C64> = (0..spec.n_car)
        .map(|i| spec.pilot_value(i).unwrap_or_else(|| points[symbols.below(points.len())]))
        .collect();
    let sigma_n = noise_std_for(h, snr_db);
    let mut y = h.colwise_mul(&x)?;
    if sigma_n > 0.0 {
        for v in y.as_mut_slice() {
            *v += noise.cnormal() * sigma_n;
        }
    }
    Ok(Frame { x, h: h.clone(), y, sigma_n })
}

/// Least-squares symbol estimate on one subcarrier for the channel
/// `sigma_h * h` and its hard decision: `x_hat = h^H y / (sigma_h * h^H h)`,
/// `x_tilde` is the pilot value on pilot subcarriers and the nearest
/// constellation point elsewhere.
pub fn hard_decide(h: &[C64], y: &[C64], sigma_h_hat: f64, spec: &FrameSpec, i: usize) -> Result<(C64, C64)> {
    if h.len() != y.len() {
        return Err(Error::dims(h.len(), y.len()));
    }
    let mut hy = C64::new(0.0, 0.0);
    let mut hh = 0.0;
    for (a, b) in h.iter().zip(y) {
        hy += a.conj() * b;
        hh += a.norm_sqr();
    }
    decide_from_sums(hy, hh, sigma_h_hat, spec, i)
}

fn decide_from_sums(hy: C64, hh: f64, sigma_h_hat: f64, spec: &FrameSpec, i: usize) -> Result<(C64, C64)> {
    if !(hh > 0.0) {
        return Err(Error::DegenerateChannel(i));
    }
    let x_hat = hy / (sigma_h_hat * hh);
    let x_tilde = spec.pilot_value(i).unwrap_or_else(|| spec.constellation.quantize(x_hat));
    Ok((x_hat, x_tilde))
}

/// Hard decisions for every subcarrier of a normalized channel candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Demodulated {
    pub x_hat: Vec<C64>,
    pub x_tilde: Vec<C64>,
    /// At least one column was zero and fell back to the first point.
    pub degenerate: bool,
}

pub fn demodulate(h_tilde: &CMat, y: &CMat, sigma_h_hat: f64, spec: &FrameSpec) -> Result<Demodulated> {
    if h_tilde.shape() != y.shape() || h_tilde.cols() != spec.n_car {
        return Err(Error::dims(
            format!("{}x{}", y.rows(), spec.n_car),
            format!("{}x{}", h_tilde.rows(), h_tilde.cols()),
        ));
    }
    let n_car = spec.n_car;
    let mut hy = vec![C64::new(0.0, 0.0); n_car];
    let mut hh = vec![0.0; n_car];
    for (hrow, yrow) in h_tilde.as_slice().chunks_exact(n_car).zip(y.as_slice().chunks_exact(n_car)) {
        for k in 0..n_car {
            hy[k] += hrow[k].conj() * yrow[k];
            hh[k] += hrow[k].norm_sqr();
        }
    }
    let mut out = Demodulated { x_hat: Vec::with_capacity(n_car), x_tilde: Vec::with_capacity(n_car), degenerate: false };
    for i in 0..n_car {
        match decide_from_sums(hy[i], hh[i], sigma_h_hat, spec, i) {
            Ok((xh, xt)) => {
                out.x_hat.push(xh);
                out.x_tilde.push(xt);
            }
            Err(Error::DegenerateChannel(_)) => {
                out.degenerate = true;
                out.x_hat.push(C64::new(0.0, 0.0));
                out.x_tilde.push(spec.pilot_value(i).unwrap_or(spec.constellation.points()[0]));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Reconstruction error `||sigma_h * H_tilde ⊙ x_tilde - Y||_F^2`.
pub fn recon_error(h_tilde: &CMat, x_tilde: &[C64], y: &CMat, sigma_h_hat: f64) -> Result<f64> {
    if h_tilde.shape() != y.shape() {
        return Err(Error::dims(
            format!("{}x{}", y.rows(), y.cols()),
            format!("{}x{}", h_tilde.rows(), h_tilde.cols()),
        ));
    }
    if x_tilde.len() != y.cols() {
        return Err(Error::dims(y.cols(), x_tilde.len()));
    }
    let n_car = y.cols();
    let mut e = 0.0;
    for (hrow, yrow) in h_tilde.as_slice().chunks_exact(n_car).zip(y.as_slice().chunks_exact(n_car)) {
        for k in 0..n_car {
            e += (hrow[k] * x_tilde[k] * sigma_h_hat - yrow[k]).norm_sqr();
        }
    }
    Ok(e)
}

/// Expected squared symbol error of the hard decision given the soft
/// estimate, with a Gaussian posterior of per-component variance `eps0`
/// over the constellation points.
pub fn soft_symbol_error(x_hat: C64, c: &Constellation, eps0: f64) -> Result<f64> {
    if !(eps0 > 0.0) {
        return Err(Error::NonPositiveScale(eps0));
    }
    let logits: Vec<f64> = c.points().iter().map(|p| -(x_hat - p).norm_sqr() / (2.0 * eps0)).collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    let q = c.quantize(x_hat);
    Ok(c.points().iter().zip(&weights).map(|(p, w)| (q - p).norm_sqr() * w / total).sum())
}
