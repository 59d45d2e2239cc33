//! Score prior over weighted, channel-augmented k-space: the VE noise
//! schedule, forward perturbation, the 6-channel augmentation pair, the
//! estimator interface and its two implementations (a trainable conv net and
//! the closed-form Gaussian score).

mod model_file;
mod net;
mod train;

pub use model_file::{
    load_model, read_model, save_model, write_model, ModelFile, ScoreModel, ARCH_CONV, ARCH_ORACLE, MODEL_MAGIC,
};
pub use net::{ConvScoreNet, NetConfig};
pub use train::{
    dsm_loss, dsm_loss_and_grad, dsm_loss_with_draws, train_score, DsmDraw, TrainingConfig, TrainingReport,
};

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const DEFAULT_SIGMA_MIN: f64 = 0.01;
pub const DEFAULT_SIGMA_MAX: f64 = 1.0;
pub const DEFAULT_NUM_SCALES: usize = 1000;

/// Channels of the augmented representation: three `(re, im)` replicas.
pub const AUG_CHANNELS: usize = 6;

/// Noise levels in sampling order, largest first.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from levels given in sampling order. They must be
    /// positive and strictly decreasing.
    pub fn from_descending(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(Error::param("noise schedule needs at least two levels"));
        }
        if sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::param("noise levels must be positive and finite"));
        }
        if sigmas.windows(2).any(|p| p[1] >= p[0]) {
            return Err(Error::param("noise levels must strictly decrease"));
        }
        Ok(Self { sigmas })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[0]
    }

    pub fn sigma_min(&self) -> f64 {
        *self.sigmas.last().expect("schedule is nonempty")
    }
}

/// `sigma_i = sigma_min * (sigma_max / sigma_min)^(i / (N - 1))`, returned
/// largest first.
pub fn geometric_schedule(sigma_min: f64, sigma_max: f64, n: usize) -> Result<NoiseSchedule> {
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(Error::param(format!(
            "need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
        )));
    }
    if n < 2 {
        return Err(Error::param(format!("need at least 2 noise levels, got {n}")));
    }
    let ratio = sigma_max / sigma_min;
    let mut sigmas: Vec<f64> = (0..n)
        .rev()
        .map(|i| sigma_min * ratio.powf(i as f64 / (n - 1) as f64))
        .collect();
    // pin the endpoints exactly
    sigmas[0] = sigma_max;
    sigmas[n - 1] = sigma_min;
    NoiseSchedule::from_descending(sigmas)
}

/// Real tensor `[channels, H, W]`; in the reconstruction pipeline always
/// six channels of `(re, im)` replicas.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTensor {
    data: Array3<f64>,
}

impl AugmentedTensor {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::new(Array3::zeros((AUG_CHANNELS, h, w)))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn standard_normal<R: Rng + ?Sized>(dim: (usize, usize, usize), rng: &mut R) -> Self {
        let mut data = Array3::zeros(dim);
        for v in data.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        Self::new(data)
    }
}

/// Stacks `(re, im)` of a complex grid three times.
pub fn augment6(kw: &Array2<Complex64>) -> AugmentedTensor {
    let (h, w) = kw.dim();
    let mut data = Array3::zeros((AUG_CHANNELS, h, w));
    for rep in 0..3 {
        data.index_axis_mut(Axis(0), 2 * rep).assign(&kw.mapv(|c| c.re));
        data.index_axis_mut(Axis(0), 2 * rep + 1).assign(&kw.mapv(|c| c.im));
    }
    AugmentedTensor::new(data)
}

/// Averages channels `{0, 2, 4}` into the real part and `{1, 3, 5}` into the
/// imaginary part.
pub fn collapse6(t: &AugmentedTensor) -> Result<Array2<Complex64>> {
    let (ch, h, w) = t.dim();
    if ch != AUG_CHANNELS {
        return Err(Error::shape((ch, h, w), (AUG_CHANNELS, h, w)));
    }
    let d = &t.data;
    // Averaging as offsets from the first replica keeps equal replicas exact.
    let mean3 = |a: f64, b: f64, c: f64| a + ((b - a) + (c - a)) / 3.0;
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        let re = mean3(d[[0, i, j]], d[[2, i, j]], d[[4, i, j]]);
        let im = mean3(d[[1, i, j]], d[[3, i, j]], d[[5, i, j]]);
        Complex64::new(re, im)
    }))
}

/// `x0 + sigma * z` with `z` i.i.d. standard normal.
pub fn perturb<R: Rng + ?Sized>(x0: &AugmentedTensor, sigma: f64, rng: &mut R) -> Result<AugmentedTensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("perturbation sigma must be >= 0, got {sigma}")));
    }
    let z = AugmentedTensor::standard_normal(x0.dim(), rng);
    Ok(AugmentedTensor::new(&x0.data + &(z.data * sigma)))
}

/// Anything that maps a noisy augmented tensor and its noise level to an
/// estimate of the score of the perturbed data distribution.
pub trait ScoreEstimator: Sync {
    fn score(&self, x: &AugmentedTensor, sigma: f64) -> AugmentedTensor;

    /// Rejects inputs of a shape the estimator cannot evaluate.
    fn check_input(&self, dim: (usize, usize, usize)) -> Result<()> {
        if dim.0 != AUG_CHANNELS {
            return Err(Error::shape(dim, (AUG_CHANNELS, dim.1, dim.2)));
        }
        Ok(())
    }
}

impl<F> ScoreEstimator for F
where
    F: Fn(&AugmentedTensor, f64) -> AugmentedTensor + Sync,
{
    fn score(&self, x: &AugmentedTensor, sigma: f64) -> AugmentedTensor {
        self(x, sigma)
    }
}

/// Isotropic Gaussian data model `N(mean, var I)`; its perturbed score is
/// available in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    mean: Array3<f64>,
    var: f64,
}

impl GaussianOracle {
    pub fn new(mean: Array3<f64>, var: f64) -> Result<Self> {
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::param(format!("oracle data variance must be > 0, got {var}")));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("oracle mean must be finite"));
        }
        Ok(Self { mean, var })
    }

    /// Maximum-likelihood fit: entrywise sample mean and the pooled variance
    /// around it.
    pub fn fit(samples: &[AugmentedTensor]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::param("fitting an oracle needs at least two samples"));
        }
        let dim = samples[0].dim();
        if let Some(bad) = samples.iter().find(|s| s.dim() != dim) {
            return Err(Error::shape(dim, bad.dim()));
        }
        let n = samples.len() as f64;
        let mut mean = Array3::<f64>::zeros(dim);
        for s in samples {
            mean += s.data();
        }
        mean /= n;
        let mut ss = 0.0;
        for s in samples {
            ss += (s.data() - &mean).iter().map(|v| v * v).sum::<f64>();
        }
        let var = ss / (n * mean.len() as f64);
        Self::new(mean, var.max(f64::MIN_POSITIVE))
    }

    pub fn mean(&self) -> &Array3<f64> {
        &self.mean
    }

    pub fn var(&self) -> f64 {
        self.var
    }
}

/// `(mean - x) / (var + sigma^2)`.
pub fn gaussian_oracle_score(oracle: &GaussianOracle, x: &AugmentedTensor, sigma: f64) -> Result<AugmentedTensor> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::param(format!("sigma must be >= 0, got {sigma}")));
    }
    if x.dim() != oracle.mean.dim() {
        return Err(Error::shape(x.dim(), oracle.mean.dim()));
    }
    let denom = oracle.var + sigma * sigma;
    Ok(AugmentedTensor::new((&oracle.mean - &x.data) / denom))
}

impl ScoreEstimator for GaussianOracle {
    fn score(&self, x: &AugmentedTensor, sigma: f64) -> AugmentedTensor {
        gaussian_oracle_score(self, x, sigma).expect("input shape matches the oracle mean")
    }

    fn check_input(&self, dim: (usize, usize, usize)) -> Result<()> {
        if dim != self.mean.dim() {
            return Err(Error::shape(dim, self.mean.dim()));
        }
        Ok(())
    }
}
