//! Complex dense matrices, counter-based random streams and the small amount
//! of statistics the experiment code needs.
//!
//! `CMat` is row-major. Rows index receive antennas and columns index
//! subcarriers everywhere in this crate, so "column `i`" is the channel seen
//! by subcarrier `i`.

use std::f64::consts::FRAC_1_SQRT_2;
use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Complex matrix with finite entries, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CMat {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMat {
    /// Validating constructor: rejects empty shapes, length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::dims(rows * cols, data.len()));
        }
        if let Some(i) = data.iter().position(|z| !z.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix shape must be positive");
        Self { rows, cols, data: vec![C64::new(0.0, 0.0); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = C64::new(1.0, 0.0);
        }
        m
    }

    /// Unchecked constructor for results of arithmetic on already valid
    /// matrices. Overflow can still produce non-finite entries; callers that
    /// care test [`CMat::is_finite`].
    pub(crate) fn raw(rows: usize, cols: usize, data: Vec<C64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<C64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.is_finite())
    }

    pub fn fro_norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Frobenius norm, `sqrt(sum |h|^2)`.
    pub fn fro_norm(&self) -> f64 {
        self.fro_norm_sqr().sqrt()
    }

    pub fn scale(&self, a: f64) -> CMat {
        CMat::raw(self.rows, self.cols, self.data.iter().map(|z| z * a).collect())
    }

    pub fn scale_c(&self, a: C64) -> CMat {
        CMat::raw(self.rows, self.cols, self.data.iter().map(|z| z * a).collect())
    }

    /// `self * a + other * b`, entrywise.
    pub fn lincomb(&self, a: f64, other: &CMat, b: f64) -> Result<CMat> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(x, y)| x * a + y * b).collect();
        Ok(CMat::raw(self.rows, self.cols, data))
    }

    /// Adds `a * other` in place.
    pub fn axpy(&mut self, a: f64, other: &CMat) -> Result<()> {
        self.check_same_shape(other)?;
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += y * a;
        }
        Ok(())
    }

    /// Column-wise multiplication `H ⊙ x`: column `i` of the result is
    /// `x[i]` times column `i` of `self`.
    pub fn colwise_mul(&self, x: &[C64]) -> Result<CMat> {
        if x.len() != self.cols {
            return Err(Error::dims(self.cols, x.len()));
        }
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.cols) {
            for (h, xi) in row.iter_mut().zip(x) {
                *h *= xi;
            }
        }
        Ok(CMat::raw(self.rows, self.cols, data))
    }

    /// Largest entrywise modulus of `self - other`.
    pub fn max_abs_diff(&self, other: &CMat) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    fn check_same_shape(&self, other: &CMat) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }
}

impl Add for &CMat {
    type Output = CMat;
    fn add(self, rhs: &CMat) -> CMat {
        self.lincomb(1.0, rhs, 1.0).expect("shape mismatch in CMat addition")
    }
}

impl Sub for &CMat {
    type Output = CMat;
    fn sub(self, rhs: &CMat) -> CMat {
        self.lincomb(1.0, rhs, -1.0).expect("shape mismatch in CMat subtraction")
    }
}

impl Mul<f64> for &CMat {
    type Output = CMat;
    fn mul(self, a: f64) -> CMat {
        self.scale(a)
    }
}

/// Mixes a list of keys into a single 64-bit stream id (splitmix64 finalizer
/// chained over the keys).
pub fn stream_id(keys: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let mut h = 0x9e37_79b9_7f4a_7c15_u64 ^ keys.len() as u64;
    for &k in keys {
        h = mix(h ^ mix(k.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

/// Seedable random stream. The same `(seed, stream)` pair always yields the
/// same sequence, independent of which thread draws from it.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Stream keyed by a tuple of indices, e.g. `(tag, step, candidate)`.
    pub fn keyed(seed: u64, keys: &[u64]) -> Self {
        Self::new(seed, stream_id(keys))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Real standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// CN(0, 1): each component has variance 1/2.
    pub fn cnormal(&mut self) -> C64 {
        let re: f64 = self.rng.sample(StandardNormal);
        let im: f64 = self.rng.sample(StandardNormal);
        C64::new(re * FRAC_1_SQRT_2, im * FRAC_1_SQRT_2)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Matrix of i.i.d. CN(0, 1) entries.
pub fn gaussian_cmat(rows: usize, cols: usize, rng: &mut RngStream) -> CMat {
    assert!(rows > 0 && cols > 0, "matrix shape must be positive");
    let data = (0..rows * cols).map(|_| rng.cnormal()).collect();
    CMat::raw(rows, cols, data)
}

/// Sample summary with a two-sided 95% confidence half-width for the mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub ci95: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        let n = xs.len();
        let mean = mean(xs);
        let std = sample_std(xs);
        let ci95 = if n >= 2 { t_quantile(0.975, n - 1) * std / (n as f64).sqrt() } else { f64::NAN };
        Summary { n, mean, std, ci95 }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample standard deviation (NaN for fewer than two samples).
pub fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Quantile of Student's t distribution with `dof` degrees of freedom.
pub fn t_quantile(p: f64, dof: usize) -> f64 {
    StudentsT::new(0.0, 1.0, dof as f64)
        .expect("degrees of freedom must be positive")
        .inverse_cdf(p)
}

/// One-sided 95% confidence bounds `(lower, upper)` for the mean of `xs`.
pub fn one_sided_bounds_95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    assert!(n >= 2, "need at least two samples for a confidence bound");
    let half = t_quantile(0.95, n - 1) * sample_std(xs) / (n as f64).sqrt();
    let m = mean(xs);
    (m - half, m + half)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn colwise_mul_identity_case() {
        let h = CMat::identity(2);
        let out = h.colwise_mul(&[c(1.0, 0.0), c(0.0, 1.0)]).unwrap();
        assert_eq!(out.column(0), vec![c(1.0, 0.0), c(0.0, 0.0)]);
        assert_eq!(out.column(1), vec![c(0.0, 0.0), c(0.0, 1.0)]);
    }

    #[test]
    fn colwise_mul_matches_scalar_loop() {
        let mut rng = RngStream::new(3, 0);
        let h = gaussian_cmat(3, 4, &mut rng);
        let x: Vec<C64> = (0..4).map(|_| rng.cnormal()).collect();
        let out = h.colwise_mul(&x).unwrap();
        for r in 0..3 {
            for k in 0..4 {
                assert_eq!(out.get(r, k), h.get(r, k) * x[k]);
            }
        }
    }

    #[test]
    fn colwise_mul_rejects_length_mismatch() {
        let h = CMat::zeros(2, 3);
        assert!(matches!(h.colwise_mul(&[c(1.0, 0.0); 2]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn fro_norm_examples() {
        assert_eq!(CMat::zeros(3, 2).fro_norm(), 0.0);
        assert!((CMat::identity(2).fro_norm() - 2f64.sqrt()).abs() < 1e-15);
        let ones = CMat::from_vec(2, 2, vec![c(1.0, 1.0); 4]).unwrap();
        assert!((ones.fro_norm() - 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constructors_reject_bad_input() {
        assert!(matches!(CMat::from_vec(0, 2, vec![]), Err(Error::EmptyShape { .. })));
        assert!(matches!(CMat::from_vec(1, 2, vec![c(0.0, 0.0)]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(
            CMat::from_vec(1, 2, vec![c(0.0, 0.0), c(f64::NAN, 0.0)]),
            Err(Error::NonFinite(1))
        ));
        assert!(matches!(
            CMat::from_vec(1, 1, vec![c(f64::INFINITY, 0.0)]),
            Err(Error::NonFinite(0))
        ));
    }

    #[test]
    fn gaussian_entries_have_unit_power() {
        let mut rng = RngStream::new(11, 1);
        let g = gaussian_cmat(100, 1000, &mut rng);
        let p = g.fro_norm_sqr() / g.len() as f64;
        assert!((p - 1.0).abs() < 0.02, "mean power {p}");
        let re_var = g.as_slice().iter().map(|z| z.re * z.re).sum::<f64>() / g.len() as f64;
        assert!((re_var - 0.5).abs() < 0.01, "real-part variance {re_var}");
    }

    #[test]
    fn same_stream_is_reproducible() {
        let a = gaussian_cmat(4, 8, &mut RngStream::new(5, 9));
        let b = gaussian_cmat(4, 8, &mut RngStream::new(5, 9));
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let n = 20_000;
        let a = gaussian_cmat(1, n, &mut RngStream::new(5, 1));
        let b = gaussian_cmat(1, n, &mut RngStream::new(5, 2));
        let corr: C64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y.conj()).sum::<C64>()
            / (a.fro_norm() * b.fro_norm());
        assert!(corr.norm() < 0.05, "correlation {corr}");
    }

    #[test]
    fn keyed_streams_differ_by_key_order() {
        assert_ne!(stream_id(&[1, 2]), stream_id(&[2, 1]));
        assert_ne!(stream_id(&[0]), stream_id(&[0, 0]));
        assert_eq!(stream_id(&[7, 3, 1]), stream_id(&[7, 3, 1]));
    }

    #[test]
    fn summary_and_bounds() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let s = Summary::of(&xs);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - 1.290_994_448_735_805_6).abs() < 1e-12);
        // t_{0.975, 3} = 3.182446305
        assert!((s.ci95 - 3.182_446_305 * s.std / 2.0).abs() < 1e-6);
        let (lo, hi) = one_sided_bounds_95(&xs);
        assert!(lo < 2.5 && hi > 2.5);
        assert!((hi - 2.5 - 2.353_363_435 * s.std / 2.0).abs() < 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn colwise_mul_by_ones_is_identity(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
                let h = gaussian_cmat(rows, cols, &mut RngStream::new(seed, 0));
                let out = h.colwise_mul(&vec![C64::new(1.0, 0.0); cols]).unwrap();
                prop_assert_eq!(out, h);
            }

            #[test]
            fn fro_norm_is_absolutely_homogeneous(seed in any::<u64>(), re in -10.0f64..10.0, im in -10.0f64..10.0) {
                let h = gaussian_cmat(3, 5, &mut RngStream::new(seed, 1));
                let a = C64::new(re, im);
                let lhs = h.scale_c(a).fro_norm();
                let rhs = a.norm() * h.fro_norm();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
            }
        }
    }
}
