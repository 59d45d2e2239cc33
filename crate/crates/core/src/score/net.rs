//! Small noise-conditioned convolutional score estimator with hand-written
//! backpropagation.
//!
//! Per sample, with `phi(sigma)` a Fourier embedding of the normalized log
//! noise level:
//!
//! ```text
//! a1  = conv1(x)  * (1 + G1 phi) + B1 phi      y1 = silu(a1)
//! a2  = conv2(y1) * (1 + G2 phi) + B2 phi      y2 = silu(a2)
//! out = conv3(y2) + (S phi) * x + (T phi)      score = out / sigma
//! ```
//!
//! The convolutions are 3x3 with circular padding, since k-space has no
//! natural border. `out` estimates `-z` for an input `x0 + sigma z`, so the
//! denoising loss is simply `|out + z|^2`.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{AugmentedTensor, ScoreEstimator, AUG_CHANNELS};
use crate::error::{Error, Result};

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    /// Feature channels of the two hidden layers.
    pub hidden: usize,
    /// Number of sine/cosine pairs in the noise embedding.
    pub frequencies: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl NetConfig {
    pub fn new(hidden: usize, sigma_min: f64, sigma_max: f64) -> Self {
        Self {
            hidden,
            frequencies: 4,
            sigma_min,
            sigma_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::param("hidden channel count must be positive"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::param(format!(
                "net noise range must satisfy 0 < sigma_min < sigma_max, got {}, {}",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        2 + 2 * self.frequencies
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }

    /// `[1, t, sin(k pi t), cos(k pi t)]` with `t` the position of
    /// `ln sigma` between `ln sigma_min` (0) and `ln sigma_max` (1).
    pub fn embed(&self, sigma: f64) -> Vec<f64> {
        let t = (sigma / self.sigma_min).ln() / (self.sigma_max / self.sigma_min).ln();
        let mut phi = Vec::with_capacity(self.embed_dim());
        phi.push(1.0);
        phi.push(t);
        for k in 1..=self.frequencies {
            let a = k as f64 * std::f64::consts::PI * t;
            phi.push(a.sin());
            phi.push(a.cos());
        }
        phi
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    g1: usize,
    b1: usize,
    w2: usize,
    g2: usize,
    b2: usize,
    w3: usize,
    s: usize,
    t: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &NetConfig) -> Self {
        let (f, e, c) = (cfg.hidden, cfg.embed_dim(), AUG_CHANNELS);
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let w1 = take(f * c * TAPS);
        let g1 = take(f * e);
        let b1 = take(f * e);
        let w2 = take(f * f * TAPS);
        let g2 = take(f * e);
        let b2 = take(f * e);
        let w3 = take(c * f * TAPS);
        let s = take(c * e);
        let t = take(c * e);
        Self {
            w1,
            g1,
            b1,
            w2,
            g2,
            b2,
            w3,
            s,
            t,
            total: at,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvScoreNet {
    config: NetConfig,
    params: Vec<f64>,
}

/// Activations kept from the forward pass for backpropagation.
struct Cache {
    phi: Vec<f64>,
    gamma1: Vec<f64>,
    gamma2: Vec<f64>,
    h1: Vec<f64>,
    a1: Vec<f64>,
    y1: Vec<f64>,
    h2: Vec<f64>,
    a2: Vec<f64>,
    y2: Vec<f64>,
}

impl ConvScoreNet {
    /// Random initialization: fan-in scaled normal weights for the first two
    /// convolutions, a tenfold smaller output convolution, and zero
    /// conditioning so the initial network is close to the zero score.
    pub fn init<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let lay = Layout::new(&config);
        let mut params = vec![0.0; lay.total];
        let f = config.hidden;
        let mut fill = |range: std::ops::Range<usize>, std: f64| {
            for p in &mut params[range] {
                let z: f64 = rng.sample(StandardNormal);
                *p = std * z;
            }
        };
        fill(lay.w1..lay.g1, (1.0 / (AUG_CHANNELS * TAPS) as f64).sqrt());
        fill(lay.w2..lay.g2, (1.0 / (f * TAPS) as f64).sqrt());
        fill(lay.w3..lay.s, 0.1 * (1.0 / (f * TAPS) as f64).sqrt());
        Ok(Self { config, params })
    }

    pub fn from_params(config: NetConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let want = config.param_count();
        if params.len() != want {
            return Err(Error::shape(params.len(), want));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::param("network parameters must be finite"));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `sigma * score`, i.e. the raw network output.
    pub fn forward(&self, x: &AugmentedTensor, sigma: f64) -> Result<AugmentedTensor> {
        let (c, h, w) = x.dim();
        if c != AUG_CHANNELS {
            return Err(Error::shape((c, h, w), (AUG_CHANNELS, h, w)));
        }
        let xs = flat(x);
        let (out, _) = self.forward_cached(&xs, h, w, sigma);
        Ok(AugmentedTensor::new(
            ndarray::Array3::from_shape_vec((c, h, w), out).expect("length matches"),
        ))
    }

    pub fn try_score(&self, x: &AugmentedTensor, sigma: f64) -> Result<AugmentedTensor> {
        if sigma.is_nan() || sigma <= 0.0 {
            return Err(Error::param(format!("score needs sigma > 0, got {sigma}")));
        }
        let mut out = self.forward(x, sigma)?;
        out.data_mut().mapv_inplace(|v| v / sigma);
        Ok(out)
    }

    fn forward_cached(&self, x: &[f64], h: usize, w: usize, sigma: f64) -> (Vec<f64>, Cache) {
        let cfg = &self.config;
        let lay = Layout::new(cfg);
        let (f, e, c) = (cfg.hidden, cfg.embed_dim(), AUG_CHANNELS);
        let hw = h * w;
        let p = &self.params;
        let phi = cfg.embed(sigma);
        let gamma1 = affine(&p[lay.g1..lay.b1], &phi, f, e);
        let beta1 = affine(&p[lay.b1..lay.w2], &phi, f, e);
        let gamma2 = affine(&p[lay.g2..lay.b2], &phi, f, e);
        let beta2 = affine(&p[lay.b2..lay.w3], &phi, f, e);
        let skip = affine(&p[lay.s..lay.t], &phi, c, e);
        let shift = affine(&p[lay.t..lay.total], &phi, c, e);

        let mut h1 = vec![0.0; f * hw];
        conv3x3(x, c, h, w, &p[lay.w1..lay.g1], f, &mut h1);
        let a1 = film(&h1, &gamma1, &beta1, hw);
        let y1: Vec<f64> = a1.iter().map(|&a| silu(a)).collect();

        let mut h2 = vec![0.0; f * hw];
        conv3x3(&y1, f, h, w, &p[lay.w2..lay.g2], f, &mut h2);
        let a2 = film(&h2, &gamma2, &beta2, hw);
        let y2: Vec<f64> = a2.iter().map(|&a| silu(a)).collect();

        let mut out = vec![0.0; c * hw];
        conv3x3(&y2, f, h, w, &p[lay.w3..lay.s], c, &mut out);
        for ch in 0..c {
            let (sc, sh) = (skip[ch], shift[ch]);
            for (o, &xv) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(&x[ch * hw..(ch + 1) * hw]) {
                *o += sc * xv + sh;
            }
        }
        let cache = Cache {
            phi,
            gamma1,
            gamma2,
            h1,
            a1,
            y1,
            h2,
            a2,
            y2,
        };
        (out, cache)
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d out`.
    fn backward(&self, x: &[f64], h: usize, w: usize, cache: &Cache, dout: &[f64], grad: &mut [f64]) {
        let cfg = &self.config;
        let lay = Layout::new(cfg);
        let (f, e, c) = (cfg.hidden, cfg.embed_dim(), AUG_CHANNELS);
        let hw = h * w;
        let p = &self.params;
        let phi = &cache.phi;

        for ch in 0..c {
            let d = &dout[ch * hw..(ch + 1) * hw];
            let dsk: f64 = d.iter().zip(&x[ch * hw..(ch + 1) * hw]).map(|(a, b)| a * b).sum();
            let dsh: f64 = d.iter().sum();
            for (k, &ph) in phi.iter().enumerate() {
                grad[lay.s + ch * e + k] += dsk * ph;
                grad[lay.t + ch * e + k] += dsh * ph;
            }
        }

        let mut dy2 = vec![0.0; f * hw];
        conv3x3_backward(
            &cache.y2,
            f,
            h,
            w,
            &p[lay.w3..lay.s],
            c,
            dout,
            &mut dy2,
            &mut grad[lay.w3..lay.s],
        );
        let dh2 = film_backward(
            &cache.h2,
            &cache.a2,
            &dy2,
            &cache.gamma2,
            phi,
            hw,
            &mut grad[lay.g2..lay.w3],
        );

        let mut dy1 = vec![0.0; f * hw];
        conv3x3_backward(
            &cache.y1,
            f,
            h,
            w,
            &p[lay.w2..lay.g2],
            f,
            &dh2,
            &mut dy1,
            &mut grad[lay.w2..lay.g2],
        );
        let dh1 = film_backward(
            &cache.h1,
            &cache.a1,
            &dy1,
            &cache.gamma1,
            phi,
            hw,
            &mut grad[lay.g1..lay.w2],
        );

        let mut dx = vec![0.0; c * hw];
        conv3x3_backward(
            x,
            c,
            h,
            w,
            &p[lay.w1..lay.g1],
            f,
            &dh1,
            &mut dx,
            &mut grad[lay.w1..lay.g1],
        );
    }

    /// Loss `|out + z|^2` for one sample and its parameter gradient,
    /// accumulated into `grad` with weight `scale`.
    pub(crate) fn sample_loss_grad(
        &self,
        x: &AugmentedTensor,
        z: &AugmentedTensor,
        sigma: f64,
        scale: f64,
        grad: &mut [f64],
    ) -> f64 {
        let (_, h, w) = x.dim();
        let xs = flat(x);
        let zs = flat(z);
        let (out, cache) = self.forward_cached(&xs, h, w, sigma);
        let resid: Vec<f64> = out.iter().zip(&zs).map(|(o, z)| o + z).collect();
        let loss: f64 = resid.iter().map(|r| r * r).sum();
        let dout: Vec<f64> = resid.iter().map(|r| 2.0 * scale * r).collect();
        self.backward(&xs, h, w, &cache, &dout, grad);
        loss
    }
}

impl ScoreEstimator for ConvScoreNet {
    fn score(&self, x: &AugmentedTensor, sigma: f64) -> AugmentedTensor {
        self.try_score(x, sigma).expect("six-channel input and positive sigma")
    }
}

fn flat(x: &AugmentedTensor) -> Vec<f64> {
    x.data().iter().copied().collect()
}

fn affine(m: &[f64], phi: &[f64], rows: usize, e: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| m[r * e..(r + 1) * e].iter().zip(phi).map(|(a, b)| a * b).sum())
        .collect()
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

fn silu(a: f64) -> f64 {
    a * sigmoid(a)
}

fn silu_grad(a: f64) -> f64 {
    let s = sigmoid(a);
    s * (1.0 + a * (1.0 - s))
}

fn film(h: &[f64], gamma: &[f64], beta: &[f64], hw: usize) -> Vec<f64> {
    let mut a = h.to_vec();
    for (ch, plane) in a.chunks_mut(hw).enumerate() {
        let (g, b) = (1.0 + gamma[ch], beta[ch]);
        for v in plane {
            *v = *v * g + b;
        }
    }
    a
}

/// Backpropagates through `silu(film(h))`; writes the conditioning
/// gradients into `grad_gb` (gamma block then beta block) and returns
/// `d loss / d h`.
fn film_backward(
    h: &[f64],
    a: &[f64],
    dy: &[f64],
    gamma: &[f64],
    phi: &[f64],
    hw: usize,
    grad_gb: &mut [f64],
) -> Vec<f64> {
    let f = gamma.len();
    let e = phi.len();
    let mut dh = vec![0.0; h.len()];
    for ch in 0..f {
        let range = ch * hw..(ch + 1) * hw;
        let mut dgamma = 0.0;
        let mut dbeta = 0.0;
        let g = 1.0 + gamma[ch];
        for ((dhv, (&hv, &av)), &dyv) in dh[range.clone()]
            .iter_mut()
            .zip(h[range.clone()].iter().zip(&a[range.clone()]))
            .zip(&dy[range])
        {
            let da = dyv * silu_grad(av);
            dgamma += da * hv;
            dbeta += da;
            *dhv = da * g;
        }
        for (k, &ph) in phi.iter().enumerate() {
            grad_gb[ch * e + k] += dgamma * ph;
            grad_gb[f * e + ch * e + k] += dbeta * ph;
        }
    }
    dh
}

/// `dst[j] += a * src[(j + d) mod n]` for `d` in `{-1, 0, 1}`.
fn axpy_shifted(dst: &mut [f64], src: &[f64], a: f64, d: isize) {
    let n = dst.len();
    match d {
        0 => {
            for (o, &s) in dst.iter_mut().zip(src) {
                *o += a * s;
            }
        }
        1 => {
            for (o, &s) in dst[..n - 1].iter_mut().zip(&src[1..]) {
                *o += a * s;
            }
            dst[n - 1] += a * src[0];
        }
        -1 => {
            dst[0] += a * src[n - 1];
            for (o, &s) in dst[1..].iter_mut().zip(&src[..n - 1]) {
                *o += a * s;
            }
        }
        _ => unreachable!("kernel offsets are -1, 0 or 1"),
    }
}

/// `sum_j u[j] * v[(j + d) mod n]`.
fn dot_shifted(u: &[f64], v: &[f64], d: isize) -> f64 {
    let n = u.len();
    match d {
        0 => u.iter().zip(v).map(|(a, b)| a * b).sum(),
        1 => u[..n - 1].iter().zip(&v[1..]).map(|(a, b)| a * b).sum::<f64>() + u[n - 1] * v[0],
        -1 => u[0] * v[n - 1] + u[1..].iter().zip(&v[..n - 1]).map(|(a, b)| a * b).sum::<f64>(),
        _ => unreachable!("kernel offsets are -1, 0 or 1"),
    }
}

fn wrap(i: usize, d: isize, n: usize) -> usize {
    ((i as isize + d).rem_euclid(n as isize)) as usize
}

/// Circular 3x3 convolution (cross-correlation), `out` overwritten.
fn conv3x3(input: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], cout: usize, out: &mut [f64]) {
    let hw = h * w;
    out.fill(0.0);
    for o in 0..cout {
        let oplane = &mut out[o * hw..(o + 1) * hw];
        for c in 0..cin {
            let iplane = &input[c * hw..(c + 1) * hw];
            let wk = &weight[(o * cin + c) * TAPS..(o * cin + c + 1) * TAPS];
            for ki in 0..KERNEL {
                let di = ki as isize - 1;
                for i in 0..h {
                    let si = wrap(i, di, h);
                    let orow = &mut oplane[i * w..(i + 1) * w];
                    let irow = &iplane[si * w..(si + 1) * w];
                    for kj in 0..KERNEL {
                        axpy_shifted(orow, irow, wk[ki * KERNEL + kj], kj as isize - 1);
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv3x3`]: accumulates into `grad_w` and writes
/// `d loss / d input` into `din`.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    dout: &[f64],
    din: &mut [f64],
    grad_w: &mut [f64],
) {
    let hw = h * w;
    din.fill(0.0);
    for o in 0..cout {
        let gplane = &dout[o * hw..(o + 1) * hw];
        for c in 0..cin {
            let iplane = &input[c * hw..(c + 1) * hw];
            let base = (o * cin + c) * TAPS;
            for ki in 0..KERNEL {
                let di = ki as isize - 1;
                for i in 0..h {
                    let si = wrap(i, di, h);
                    let grow = &gplane[i * w..(i + 1) * w];
                    let irow = &iplane[si * w..(si + 1) * w];
                    for kj in 0..KERNEL {
                        let d = kj as isize - 1;
                        grad_w[base + ki * KERNEL + kj] += dot_shifted(grow, irow, d);
                        let drow = &mut din[c * hw + si * w..c * hw + (si + 1) * w];
                        axpy_shifted(drow, grow, weight[base + ki * KERNEL + kj], -d);
                    }
                }
            }
        }
    }
}
