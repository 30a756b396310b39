//! Time-conditioned MLP-Mixer denoiser with hand-written reverse mode
//! gradients, Adam, and a binary checkpoint format.
//!
//! A complex `n_ant x n_car` matrix is packed into `n_car` tokens of
//! `2 * n_ant` features (real parts first, then imaginary parts). Each block
//! applies
//!
//! ```text
//! x = x + W2 gelu(W1 LN1(x) + b1) + b2      token mixing across subcarriers
//! x = x + time_bias(t)                      per-block projection of the embedding
//! x = x + gelu(LN2(x) C1^T + c1) C2^T + c2  channel mixing across features
//! ```
//!
//! followed by a linear head. The embedding of `t` is a sinusoid of
//! `1000 * t / T` passed through a two-layer GELU perceptron. A network with
//! `time_embed_dim = 0` has no time path and ignores `t`.
//!
//! Parameters live in one flat vector in canonical order: the time
//! perceptron, then per block `norm1, token1, token2, time, norm2, channel1,
//! channel2` (weight before bias, gain before shift), then the head.
//!
//! Checkpoint layout (little endian): `b"MXW1"`, `u32` fields `version,
//! depth, token_hidden, channel_hidden, time_embed_dim, n_ant, n_car, T`,
//! `f32 beta_max`, `u64 param_count`, then the `f32` parameters.

use std::fmt::Debug;
use std::fs;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, LinalgScalar, ScalarOperand, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CMat, RngStream, C64};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MXW1";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_HEADER_LEN: usize = 4 + 8 * 4 + 4 + 8;
const TAG_INIT: u64 = 0x31a1;
const LN_EPS: f64 = 1e-5;
/// Samples per pass; small passes keep activations in cache.
const FORWARD_CHUNK: usize = 4;
const GRAD_CHUNK: usize = 2;

/// Floating point type the network computes in.
pub trait Real:
    num_traits::Float
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Send
    + Sync
    + Debug
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// Hyperbolic tangent used by the activations.
    #[inline]
    fn act_tanh(self) -> Self {
        self.tanh()
    }
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }

    /// Branch-free rational approximation (max error about 1e-7), which the
    /// compiler vectorizes; the library `tanh` dominates training time.
    #[inline]
    fn act_tanh(self) -> Self {
        const CLAMP: f32 = 7.905_311;
        const A: [f32; 7] = [4.893_524_6e-3, 6.372_619_3e-4, 1.485_722_4e-5, 5.122_297e-8, -8.604_671_5e-11, 2.000_187_9e-13, -2.760_768_5e-16];
        const B: [f32; 4] = [4.893_525e-3, 2.268_434_6e-3, 1.185_347_1e-4, 1.198_258_4e-6];
        let x = self.clamp(-CLAMP, CLAMP);
        let x2 = x * x;
        let mut p = A[6];
        for a in A[..6].iter().rev() {
            p = p * x2 + a;
        }
        let q = ((B[3] * x2 + B[2]) * x2 + B[1]) * x2 + B[0];
        x * p / q
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
}

/// Network dimensions and the diffusion schedule it was trained for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixerConfig {
    pub n_ant: usize,
    pub n_car: usize,
    pub depth: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    /// Even; 0 disables time conditioning.
    pub time_embed_dim: usize,
    /// Number of diffusion steps `T`.
    pub n_steps: usize,
    pub beta_max: f64,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            n_ant: 32,
            n_car: 64,
            depth: 4,
            token_hidden: 256,
            channel_hidden: 256,
            time_embed_dim: 64,
            n_steps: 1000,
            beta_max: 0.2,
        }
    }
}

impl MixerConfig {
    pub fn features(&self) -> usize {
        2 * self.n_ant
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_ant", self.n_ant),
            ("n_car", self.n_car),
            ("depth", self.depth),
            ("token_hidden", self.token_hidden),
            ("channel_hidden", self.channel_hidden),
            ("n_steps", self.n_steps),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
            if u32::try_from(v).is_err() {
                return Err(Error::InvalidConfig(format!("{name} does not fit in 32 bits")));
            }
        }
        if self.time_embed_dim % 2 != 0 || u32::try_from(self.time_embed_dim).is_err() {
            return Err(Error::InvalidConfig("time_embed_dim must be even".into()));
        }
        if !(self.beta_max > 0.0 && self.beta_max < 1.0) {
            return Err(Error::InvalidConfig("beta_max must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (f, t, ht, hc, e) = (self.features(), self.n_car, self.token_hidden, self.channel_hidden, self.time_embed_dim);
        let time = if e > 0 { 2 * (e * e + e) } else { 0 };
        let time_bias = if e > 0 { e * f + f } else { 0 };
        let block = 2 * f + ht * t + ht + t * ht + t + time_bias + 2 * f + hc * f + hc + f * hc + f;
        time + self.depth * block + f * f + f
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
    out: usize,
    inp: usize,
}

impl Dense {
    fn w<'a, R: Real>(&self, p: &'a [R]) -> ArrayView2<'a, R> {
        ArrayView2::from_shape((self.out, self.inp), &p[self.w..self.w + self.out * self.inp]).expect("layout")
    }
    fn b<'a, R: Real>(&self, p: &'a [R]) -> ArrayView1<'a, R> {
        ArrayView1::from(&p[self.b..self.b + self.out])
    }
    fn w_mut<'a, R: Real>(&self, p: &'a mut [R]) -> ArrayViewMut2<'a, R> {
        ArrayViewMut2::from_shape((self.out, self.inp), &mut p[self.w..self.w + self.out * self.inp]).expect("layout")
    }
    fn b_mut<'a, R: Real>(&self, p: &'a mut [R]) -> ArrayViewMut1<'a, R> {
        ArrayViewMut1::from(&mut p[self.b..self.b + self.out])
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
    n: usize,
}

impl Norm {
    fn g<'a, R: Real>(&self, p: &'a [R]) -> &'a [R] {
        &p[self.g..self.g + self.n]
    }
    fn b<'a, R: Real>(&self, p: &'a [R]) -> &'a [R] {
        &p[self.b..self.b + self.n]
    }
}

#[derive(Clone, Debug)]
struct BlockLayout {
    norm1: Norm,
    token1: Dense,
    token2: Dense,
    time: Option<Dense>,
    norm2: Norm,
    channel1: Dense,
    channel2: Dense,
}

#[derive(Clone, Debug)]
struct Layout {
    time1: Option<Dense>,
    time2: Option<Dense>,
    blocks: Vec<BlockLayout>,
    head: Dense,
    len: usize,
}

impl Layout {
    fn new(cfg: &MixerConfig) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let at = off;
            off += n;
            at
        };
        let dense = |take: &mut dyn FnMut(usize) -> usize, out: usize, inp: usize| {
            let w = take(out * inp);
            Dense { w, b: take(out), out, inp }
        };
        let (f, t, ht, hc, e) = (cfg.features(), cfg.n_car, cfg.token_hidden, cfg.channel_hidden, cfg.time_embed_dim);
        let time1 = (e > 0).then(|| dense(&mut take, e, e));
        let time2 = (e > 0).then(|| dense(&mut take, e, e));
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            let norm1 = Norm { g: take(f), b: take(f), n: f };
            let token1 = dense(&mut take, ht, t);
            let token2 = dense(&mut take, t, ht);
            let time = (e > 0).then(|| dense(&mut take, f, e));
            let norm2 = Norm { g: take(f), b: take(f), n: f };
            let channel1 = dense(&mut take, hc, f);
            let channel2 = dense(&mut take, f, hc);
            blocks.push(BlockLayout { norm1, token1, token2, time, norm2, channel1, channel2 });
        }
        let head = dense(&mut take, f, f);
        Self { time1, time2, blocks, head, len: off }
    }
}

#[inline]
fn gelu<R: Real>(z: R) -> R {
    let c = R::of((2.0 / std::f64::consts::PI).sqrt());
    let k = R::of(0.044715);
    let half = R::of(0.5);
    half * z * (R::one() + (c * (z + k * z * z * z)).act_tanh())
}

#[inline]
fn gelu_grad<R: Real>(z: R) -> R {
    let c = R::of((2.0 / std::f64::consts::PI).sqrt());
    let k = R::of(0.044715);
    let half = R::of(0.5);
    let th = (c * (z + k * z * z * z)).act_tanh();
    half * (R::one() + th) + half * z * (R::one() - th * th) * c * (R::one() + R::of(3.0) * k * z * z)
}

/// `x W^T + b` over the rows of `x`.
fn linear_rows<R: Real>(x: ArrayView2<R>, d: &Dense, p: &[R]) -> Array2<R> {
    let mut y = Array2::zeros((x.nrows(), d.out));
    y += &d.b(p);
    general_mat_mul(R::one(), &x, &d.w(p).t(), R::one(), &mut y);
    y
}

struct NormOut<R> {
    y: Array2<R>,
    xhat: Array2<R>,
    rstd: Vec<R>,
}

fn layer_norm<R: Real>(x: ArrayView2<R>, g: &[R], b: &[R]) -> NormOut<R> {
    let (rows, f) = x.dim();
    let mut xhat = Array2::zeros((rows, f));
    let mut y = Array2::zeros((rows, f));
    let mut rstd = Vec::with_capacity(rows);
    let inv_f = R::of(1.0 / f as f64);
    for ((xr, mut hr), mut yr) in x.rows().into_iter().zip(xhat.rows_mut()).zip(y.rows_mut()) {
        let mean = xr.sum() * inv_f;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_f;
        let r = R::one() / (var + R::of(LN_EPS)).sqrt();
        rstd.push(r);
        for j in 0..f {
            let h = (xr[j] - mean) * r;
            hr[j] = h;
            yr[j] = g[j] * h + b[j];
        }
    }
    NormOut { y, xhat, rstd }
}

/// Returns the input gradient and accumulates gain and shift gradients.
fn layer_norm_backward<R: Real>(dy: ArrayView2<R>, n: &NormOut<R>, g: &[R], dg: &mut [R], db: &mut [R]) -> Array2<R> {
    let (rows, f) = dy.dim();
    let mut dx = Array2::zeros((rows, f));
    let inv_f = R::of(1.0 / f as f64);
    let mut dxhat = vec![R::zero(); f];
    for (i, (dyr, mut dxr)) in dy.rows().into_iter().zip(dx.rows_mut()).enumerate() {
        let hr = n.xhat.row(i);
        let mut s1 = R::zero();
        let mut s2 = R::zero();
        for j in 0..f {
            dg[j] += dyr[j] * hr[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * hr[j];
        }
        s1 *= inv_f;
        s2 *= inv_f;
        let r = n.rstd[i];
        for j in 0..f {
            dxr[j] = r * (dxhat[j] - s1 - hr[j] * s2);
        }
    }
    dx
}

struct TimeTape<R> {
    sin: Array2<R>,
    h1: Array2<R>,
    a1: Array2<R>,
}

struct BlockTape<R> {
    norm1: NormOut<R>,
    z1: Array2<R>,
    a1: Array2<R>,
    norm2: NormOut<R>,
    z2: Array2<R>,
    a2: Array2<R>,
}

struct Tape<R> {
    time: Option<TimeTape<R>>,
    temb: Array2<R>,
    blocks: Vec<BlockTape<R>>,
    last: Array2<R>,
}

/// Mixer network with a flat parameter vector.
#[derive(Clone, Debug)]
pub struct MixerNetwork<R: Real> {
    config: MixerConfig,
    layout: Layout,
    params: Vec<R>,
}

impl<R: Real> MixerNetwork<R> {
    /// Xavier-uniform weights from stream `(seed, init)`, zero biases, unit
    /// layer-norm gains. `beta_max` is rounded to `f32` so that the config
    /// survives a checkpoint round trip unchanged.
    pub fn new(mut config: MixerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        config.beta_max = config.beta_max as f32 as f64;
        let layout = Layout::new(&config);
        let mut params = vec![R::zero(); layout.len];
        let mut rng = RngStream::keyed(seed, &[TAG_INIT]);
        let mut denses: Vec<Dense> = Vec::new();
        denses.extend(layout.time1);
        denses.extend(layout.time2);
        for bl in &layout.blocks {
            denses.extend([bl.token1, bl.token2]);
            denses.extend(bl.time);
            denses.extend([bl.channel1, bl.channel2]);
            for n in [bl.norm1, bl.norm2] {
                params[n.g..n.g + n.n].fill(R::one());
            }
        }
        denses.push(layout.head);
        for d in denses {
            let a = (6.0 / (d.inp + d.out) as f64).sqrt();
            for w in &mut params[d.w..d.w + d.out * d.inp] {
                *w = R::of(rng.uniform_range(-a, a));
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &MixerConfig {
        &self.config
    }

    pub fn params(&self) -> &[R] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [R] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Same network in another float width.
    pub fn cast<S: Real>(&self) -> MixerNetwork<S> {
        MixerNetwork {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| S::of(v.f64())).collect(),
        }
    }

    /// Errors unless the network expects `n_ant x n_car` inputs.
    pub fn ensure_shape(&self, n_ant: usize, n_car: usize) -> Result<()> {
        if (self.config.n_ant, self.config.n_car) != (n_ant, n_car) {
            return Err(Error::dims(
                format!("{}x{}", self.config.n_ant, self.config.n_car),
                format!("{n_ant}x{n_car}"),
            ));
        }
        Ok(())
    }

    fn check_inputs(&self, hs: &[CMat], ts: &[usize]) -> Result<()> {
        if hs.len() != ts.len() {
            return Err(Error::dims(hs.len(), ts.len()));
        }
        for h in hs {
            self.ensure_shape(h.rows(), h.cols())?;
        }
        for &t in ts {
            if t > self.config.n_steps {
                return Err(Error::StepOutOfRange { t, max: self.config.n_steps });
            }
        }
        Ok(())
    }

    /// Packs matrices into the `(n_car, batch * 2 * n_ant)` activation layout.
    fn pack(&self, hs: &[CMat]) -> Array2<R> {
        let (na, nc, f) = (self.config.n_ant, self.config.n_car, self.config.features());
        let mut x = Array2::zeros((nc, hs.len() * f));
        for (b, h) in hs.iter().enumerate() {
            let d = h.as_slice();
            for a in 0..na {
                for k in 0..nc {
                    let v = d[a * nc + k];
                    x[[k, b * f + a]] = R::of(v.re);
                    x[[k, b * f + na + a]] = R::of(v.im);
                }
            }
        }
        x
    }

    fn unpack(&self, x: &Array2<R>, batch: usize) -> Vec<CMat> {
        let (na, nc, f) = (self.config.n_ant, self.config.n_car, self.config.features());
        (0..batch)
            .map(|b| {
                let mut data = Vec::with_capacity(na * nc);
                for a in 0..na {
                    for k in 0..nc {
                        data.push(C64::new(x[[k, b * f + a]].f64(), x[[k, b * f + na + a]].f64()));
                    }
                }
                CMat::raw(na, nc, data)
            })
            .collect()
    }

    fn time_forward(&self, ts: &[usize], keep: bool) -> (Array2<R>, Option<TimeTape<R>>) {
        let (Some(d1), Some(d2)) = (self.layout.time1, self.layout.time2) else {
            return (Array2::zeros((ts.len(), 0)), None);
        };
        let e = self.config.time_embed_dim;
        let half = e / 2;
        let mut sin = Array2::zeros((ts.len(), e));
        for (b, &t) in ts.iter().enumerate() {
            let pos = 1000.0 * t as f64 / self.config.n_steps as f64;
            for i in 0..half {
                let w = 10000f64.powf(-(i as f64) / half as f64);
                sin[[b, i]] = R::of((pos * w).sin());
                sin[[b, half + i]] = R::of((pos * w).cos());
            }
        }
        let p = &self.params;
        let h1 = linear_rows(sin.view(), &d1, p);
        let a1 = h1.mapv(gelu);
        let temb = linear_rows(a1.view(), &d2, p);
        (temb, keep.then_some(TimeTape { sin, h1, a1 }))
    }

    fn block_forward(&self, bl: &BlockLayout, x: Array2<R>, temb: &Array2<R>, batch: usize, keep: bool) -> (Array2<R>, Option<BlockTape<R>>) {
        let p = &self.params;
        let (nc, f) = (self.config.n_car, self.config.features());
        let rows = nc * batch;
        let norm1 = layer_norm(x.view().into_shape_with_order((rows, f)).expect("layout"), bl.norm1.g(p), bl.norm1.b(p));
        let u1 = norm1.y.view().into_shape_with_order((nc, batch * f)).expect("layout");
        let mut z1 = Array2::zeros((bl.token1.out, batch * f));
        z1 += &bl.token1.b(p).insert_axis(Axis(1));
        general_mat_mul(R::one(), &bl.token1.w(p), &u1, R::one(), &mut z1);
        let a1 = z1.mapv(gelu);
        let mut x = x;
        x += &bl.token2.b(p).insert_axis(Axis(1));
        general_mat_mul(R::one(), &bl.token2.w(p), &a1, R::one(), &mut x);
        if let Some(d) = &bl.time {
            let tb = linear_rows(temb.view(), d, p).into_shape_with_order(batch * f).expect("layout");
            x += &tb;
        }
        let mut x = x.into_shape_with_order((rows, f)).expect("layout");
        let norm2 = layer_norm(x.view(), bl.norm2.g(p), bl.norm2.b(p));
        let z2 = linear_rows(norm2.y.view(), &bl.channel1, p);
        let a2 = z2.mapv(gelu);
        x += &linear_rows(a2.view(), &bl.channel2, p);
        let x = x.into_shape_with_order((nc, batch * f)).expect("layout");
        (x, keep.then_some(BlockTape { norm1, z1, a1, norm2, z2, a2 }))
    }

    fn run(&self, hs: &[CMat], ts: &[usize], keep: bool) -> (Array2<R>, Option<Tape<R>>) {
        let batch = hs.len();
        let (nc, f) = (self.config.n_car, self.config.features());
        let (temb, time) = self.time_forward(ts, keep);
        let mut x = self.pack(hs);
        let mut blocks = Vec::new();
        for bl in &self.layout.blocks {
            let (next, tape) = self.block_forward(bl, x, &temb, batch, keep);
            blocks.extend(tape);
            x = next;
        }
        let xr = x.into_shape_with_order((nc * batch, f)).expect("layout");
        let out = linear_rows(xr.view(), &self.layout.head, &self.params)
            .into_shape_with_order((nc, batch * f))
            .expect("layout");
        let tape = keep.then(|| Tape { time, temb, blocks, last: xr });
        (out, tape)
    }

    /// Predicted clean normalized channel for one noisy input.
    pub fn forward(&self, h: &CMat, t: usize) -> Result<CMat> {
        Ok(self.forward_batch(std::slice::from_ref(h), &[t])?.pop().expect("one output"))
    }

    /// Batched [`forward`](Self::forward); item `i` uses step `ts[i]`.
    pub fn forward_batch(&self, hs: &[CMat], ts: &[usize]) -> Result<Vec<CMat>> {
        self.check_inputs(hs, ts)?;
        if hs.is_empty() {
            return Ok(Vec::new());
        }
        let mut outputs = Vec::with_capacity(hs.len());
        for (h, t) in hs.chunks(FORWARD_CHUNK).zip(ts.chunks(FORWARD_CHUNK)) {
            let (out, _) = self.run(h, t, false);
            outputs.extend(self.unpack(&out, h.len()));
        }
        Ok(outputs)
    }

    /// Summed squared error `sum_j ||f(h_j, t_j) - target_j||^2` and its
    /// gradient with respect to the flat parameter vector.
    pub fn loss_and_grad(&self, hs: &[CMat], ts: &[usize], targets: &[CMat]) -> Result<(f64, Vec<R>)> {
        self.check_inputs(hs, ts)?;
        if targets.len() != hs.len() {
            return Err(Error::dims(hs.len(), targets.len()));
        }
        for h in targets {
            self.ensure_shape(h.rows(), h.cols())?;
        }
        if hs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut grad = vec![R::zero(); self.params.len()];
        let mut loss = 0.0;
        for ((h, t), y) in hs.chunks(GRAD_CHUNK).zip(ts.chunks(GRAD_CHUNK)).zip(targets.chunks(GRAD_CHUNK)) {
            loss += self.accumulate_grad(h, t, y, &mut grad);
        }
        Ok((loss, grad))
    }

    /// Adds the gradient of one micro-batch to `grad` and returns its loss.
    fn accumulate_grad(&self, hs: &[CMat], ts: &[usize], targets: &[CMat], grad: &mut [R]) -> f64 {
        let batch = hs.len();
        let (nc, f) = (self.config.n_car, self.config.features());
        let (out, tape) = self.run(hs, ts, true);
        let tape = tape.expect("tape requested");
        let target = self.pack(targets);
        let diff = &out - &target;
        let loss = diff.iter().map(|v| v.f64() * v.f64()).sum::<f64>();
        let dout = (diff * R::of(2.0)).into_shape_with_order((nc * batch, f)).expect("layout");

        let p = &self.params;
        let head = &self.layout.head;
        general_mat_mul(R::one(), &dout.t(), &tape.last, R::one(), &mut head.w_mut(grad));
        head.b_mut(grad).scaled_add(R::one(), &dout.sum_axis(Axis(0)));
        let mut dx = dout.dot(&head.w(p)).into_shape_with_order((nc, batch * f)).expect("layout");

        let mut dtemb = Array2::<R>::zeros(tape.temb.dim());
        for (bl, bt) in self.layout.blocks.iter().zip(&tape.blocks).rev() {
            dx = self.block_backward(bl, bt, dx, &tape.temb, &mut dtemb, batch, grad);
        }
        if let (Some(tt), Some(d1), Some(d2)) = (&tape.time, self.layout.time1, self.layout.time2) {
            general_mat_mul(R::one(), &dtemb.t(), &tt.a1, R::one(), &mut d2.w_mut(grad));
            d2.b_mut(grad).scaled_add(R::one(), &dtemb.sum_axis(Axis(0)));
            let mut dh1 = dtemb.dot(&d2.w(p));
            Zip::from(&mut dh1).and(&tt.h1).for_each(|d, &z| *d = *d * gelu_grad(z));
            general_mat_mul(R::one(), &dh1.t(), &tt.sin, R::one(), &mut d1.w_mut(grad));
            d1.b_mut(grad).scaled_add(R::one(), &dh1.sum_axis(Axis(0)));
        }
        loss
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        bl: &BlockLayout,
        bt: &BlockTape<R>,
        dy: Array2<R>,
        temb: &Array2<R>,
        dtemb: &mut Array2<R>,
        batch: usize,
        grad: &mut [R],
    ) -> Array2<R> {
        let p = &self.params;
        let (nc, f) = (self.config.n_car, self.config.features());
        let rows = nc * batch;
        let dy = dy.into_shape_with_order((rows, f)).expect("layout");

        // channel mixing
        general_mat_mul(R::one(), &dy.t(), &bt.a2, R::one(), &mut bl.channel2.w_mut(grad));
        bl.channel2.b_mut(grad).scaled_add(R::one(), &dy.sum_axis(Axis(0)));
        let mut dz2 = dy.dot(&bl.channel2.w(p));
        Zip::from(&mut dz2).and(&bt.z2).for_each(|d, &z| *d = *d * gelu_grad(z));
        general_mat_mul(R::one(), &dz2.t(), &bt.norm2.y, R::one(), &mut bl.channel1.w_mut(grad));
        bl.channel1.b_mut(grad).scaled_add(R::one(), &dz2.sum_axis(Axis(0)));
        let du2 = dz2.dot(&bl.channel1.w(p));
        let (dg, db) = norm_grads(grad, &bl.norm2);
        let dln2 = layer_norm_backward(du2.view(), &bt.norm2, bl.norm2.g(p), dg, db);
        let dmid = (dy + dln2).into_shape_with_order((nc, batch * f)).expect("layout");

        // time bias
        if let Some(d) = &bl.time {
            let dtb = dmid.sum_axis(Axis(0)).into_shape_with_order((batch, f)).expect("layout");
            general_mat_mul(R::one(), &dtb.t(), temb, R::one(), &mut d.w_mut(grad));
            d.b_mut(grad).scaled_add(R::one(), &dtb.sum_axis(Axis(0)));
            general_mat_mul(R::one(), &dtb, &d.w(p), R::one(), dtemb);
        }

        // token mixing
        general_mat_mul(R::one(), &dmid, &bt.a1.t(), R::one(), &mut bl.token2.w_mut(grad));
        bl.token2.b_mut(grad).scaled_add(R::one(), &dmid.sum_axis(Axis(1)));
        let mut dz1 = bl.token2.w(p).t().dot(&dmid);
        Zip::from(&mut dz1).and(&bt.z1).for_each(|d, &z| *d = *d * gelu_grad(z));
        let u1 = bt.norm1.y.view().into_shape_with_order((nc, batch * f)).expect("layout");
        general_mat_mul(R::one(), &dz1, &u1.t(), R::one(), &mut bl.token1.w_mut(grad));
        bl.token1.b_mut(grad).scaled_add(R::one(), &dz1.sum_axis(Axis(1)));
        let du1 = bl.token1.w(p).t().dot(&dz1).into_shape_with_order((rows, f)).expect("layout");
        let (dg, db) = norm_grads(grad, &bl.norm1);
        let dln1 = layer_norm_backward(du1.view(), &bt.norm1, bl.norm1.g(p), dg, db);
        let dmid = dmid.into_shape_with_order((rows, f)).expect("layout");
        (dmid + dln1).into_shape_with_order((nc, batch * f)).expect("layout")
    }
}

/// Disjoint mutable gain and shift slices of a layer norm.
fn norm_grads<'a, R>(grad: &'a mut [R], n: &Norm) -> (&'a mut [R], &'a mut [R]) {
    debug_assert!(n.g + n.n <= n.b);
    let (lo, hi) = grad.split_at_mut(n.b);
    (&mut lo[n.g..n.g + n.n], &mut hi[..n.n])
}

/// Adam optimizer state.
#[derive(Clone, Debug)]
pub struct AdamState<R: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<R>,
    v: Vec<R>,
}

impl<R: Real> AdamState<R> {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![R::zero(); len], v: vec![R::zero(); len] }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `net` along `grad`.
    pub fn step(&mut self, net: &mut MixerNetwork<R>, grad: &[R]) -> Result<()> {
        if grad.len() != self.m.len() || net.params.len() != self.m.len() {
            return Err(Error::dims(self.m.len(), grad.len().max(net.params.len())));
        }
        self.step += 1;
        let (b1, b2) = (R::of(self.beta1), R::of(self.beta2));
        let c1 = R::of(1.0 - self.beta1.powf(self.step as f64));
        let c2 = R::of(1.0 - self.beta2.powf(self.step as f64));
        let (lr, eps) = (R::of(self.lr), R::of(self.eps));
        for (((theta, &g), m), v) in net.params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (R::one() - b1) * g;
            *v = b2 * *v + (R::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

impl MixerNetwork<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + 4 * self.params.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        for v in [CHECKPOINT_VERSION as usize, c.depth, c.token_hidden, c.channel_hidden, c.time_embed_dim, c.n_ant, c.n_car, c.n_steps] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(c.beta_max as f32).to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_HEADER_LEN {
            return Err(Error::Truncated { needed: CHECKPOINT_HEADER_LEN as u64, found: bytes.len() as u64 });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let version = u32_at(0);
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let beta_max = f32::from_le_bytes(bytes[36..40].try_into().expect("4 bytes"));
        let count = u64::from_le_bytes(bytes[40..48].try_into().expect("8 bytes"));
        let config = MixerConfig {
            depth: u32_at(1) as usize,
            token_hidden: u32_at(2) as usize,
            channel_hidden: u32_at(3) as usize,
            time_embed_dim: u32_at(4) as usize,
            n_ant: u32_at(5) as usize,
            n_car: u32_at(6) as usize,
            n_steps: u32_at(7) as usize,
            beta_max: beta_max as f64,
        };
        config.validate()?;
        let expected = config.param_count() as u64;
        if count != expected {
            return Err(Error::DimensionOverflow(format!("header declares {count} parameters, dimensions imply {expected}")));
        }
        let needed = count
            .checked_mul(4)
            .and_then(|n| n.checked_add(CHECKPOINT_HEADER_LEN as u64))
            .ok_or_else(|| Error::DimensionOverflow("parameter payload size overflows".into()))?;
        let found = bytes.len() as u64;
        if found < needed {
            return Err(Error::Truncated { needed, found });
        }
        if found > needed {
            return Err(Error::DimensionOverflow(format!("{} trailing bytes after parameters", found - needed)));
        }
        let params = bytes[CHECKPOINT_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let layout = Layout::new(&config);
        Ok(Self { config, layout, params })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
