//! Predictor-corrector reconstruction in weighted, augmented k-space.
//!
//! Each coil is an independent item for the single-coil prior. After every
//! predictor and corrector update the iterate is unweighted, collapsed to a
//! complex grid, made data consistent, then re-weighted and re-augmented.
//! The low-rank variant additionally projects all coils jointly onto a
//! low-rank Hankel structure after each corrector update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hankel::{sake_project, HankelSpec};
use crate::kspace::{MultiCoilKSpace, SamplingMask};
use crate::score::{augment6, collapse6, AugmentedTensor, NoiseSchedule, ScoreEstimator};
use crate::weighting::WeightMap;

pub const DEFAULT_SNR: f64 = 0.075;
pub const DEFAULT_CORRECTOR_STEPS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Corrector steps per outer iteration.
    pub corrector_steps: usize,
    pub snr: f64,
    /// Data-consistency blend; `f64::INFINITY` replaces sampled entries.
    pub lambda_dc: f64,
    pub seed: u64,
    /// Test hook: when false every injected noise draw is zero.
    pub noise: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            corrector_steps: DEFAULT_CORRECTOR_STEPS,
            snr: DEFAULT_SNR,
            lambda_dc: f64::INFINITY,
            seed: 0,
            noise: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(Error::param(format!("snr must be > 0, got {}", self.snr)));
        }
        if self.lambda_dc.is_nan() || self.lambda_dc <= 0.0 {
            return Err(Error::param(format!("lambda_dc must be > 0, got {}", self.lambda_dc)));
        }
        Ok(())
    }
}

fn draw_noise(dim: (usize, usize, usize), rng: Option<&mut ChaCha8Rng>) -> AugmentedTensor {
    match rng {
        Some(r) => AugmentedTensor::standard_normal(dim, r),
        None => AugmentedTensor::new(ndarray::Array3::zeros(dim)),
    }
}

/// `x + (s_cur^2 - s_next^2) s(x, s_cur) + sqrt(s_cur^2 - s_next^2) z`.
pub fn predictor_step<S: ScoreEstimator + ?Sized>(
    x: &AugmentedTensor,
    model: &S,
    sigma_next: f64,
    sigma_cur: f64,
    rng: &mut ChaCha8Rng,
) -> Result<AugmentedTensor> {
    let z = AugmentedTensor::standard_normal(x.dim(), rng);
    predictor_step_with_noise(x, model, sigma_next, sigma_cur, &z)
}

/// [`predictor_step`] with an explicit noise tensor.
pub fn predictor_step_with_noise<S: ScoreEstimator + ?Sized>(
    x: &AugmentedTensor,
    model: &S,
    sigma_next: f64,
    sigma_cur: f64,
    z: &AugmentedTensor,
) -> Result<AugmentedTensor> {
    if !(sigma_cur > sigma_next && sigma_next >= 0.0) {
        return Err(Error::param(format!(
            "predictor needs sigma_cur > sigma_next >= 0, got {sigma_cur} and {sigma_next}"
        )));
    }
    if z.dim() != x.dim() {
        return Err(Error::shape(z.dim(), x.dim()));
    }
    let dvar = sigma_cur * sigma_cur - sigma_next * sigma_next;
    let s = model.score(x, sigma_cur);
    Ok(AugmentedTensor::new(
        x.data() + &(s.data() * dvar) + &(z.data() * dvar.sqrt()),
    ))
}

/// One Langevin step with `eps = 2 (snr |z| / |s|)^2`. Returns the new
/// tensor and `eps`; a zero score gives `eps = 0` and leaves `x` unchanged.
pub fn corrector_step<S: ScoreEstimator + ?Sized>(
    x: &AugmentedTensor,
    model: &S,
    sigma: f64,
    snr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(AugmentedTensor, f64)> {
    let z = AugmentedTensor::standard_normal(x.dim(), rng);
    corrector_step_with_noise(x, model, sigma, snr, &z)
}

/// [`corrector_step`] with an explicit noise tensor.
pub fn corrector_step_with_noise<S: ScoreEstimator + ?Sized>(
    x: &AugmentedTensor,
    model: &S,
    sigma: f64,
    snr: f64,
    z: &AugmentedTensor,
) -> Result<(AugmentedTensor, f64)> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::param(format!("corrector needs sigma > 0, got {sigma}")));
    }
    if z.dim() != x.dim() {
        return Err(Error::shape(z.dim(), x.dim()));
    }
    let s = model.score(x, sigma);
    let s_norm = s.norm();
    if s_norm == 0.0 {
        return Ok((x.clone(), 0.0));
    }
    let eps = 2.0 * (snr * z.norm() / s_norm).powi(2);
    Ok((
        AugmentedTensor::new(x.data() + &(s.data() * eps) + &(z.data() * (2.0 * eps).sqrt())),
        eps,
    ))
}

/// Keeps `k_gen` off the sampled set and blends
/// `(k_gen + lambda y) / (1 + lambda)` on it; `lambda = inf` copies `y`.
pub fn data_consistency(
    k_gen: &MultiCoilKSpace,
    y: &MultiCoilKSpace,
    m: &SamplingMask,
    lambda_dc: f64,
) -> Result<MultiCoilKSpace> {
    if k_gen.dim() != y.dim() {
        return Err(Error::shape(k_gen.dim(), y.dim()));
    }
    if k_gen.grid_shape() != m.shape() {
        return Err(Error::shape(k_gen.dim(), m.shape()));
    }
    if lambda_dc.is_nan() || lambda_dc <= 0.0 {
        return Err(Error::param(format!("lambda_dc must be > 0, got {lambda_dc}")));
    }
    let mut out = k_gen.clone();
    apply_dc(&mut out, y, m, lambda_dc);
    Ok(out)
}

fn apply_dc(k: &mut MultiCoilKSpace, y: &MultiCoilKSpace, m: &SamplingMask, lambda_dc: f64) {
    let coils = k.coils();
    let data = k.data_mut();
    for ((i, j), &sampled) in m.entries().indexed_iter() {
        if !sampled {
            continue;
        }
        for c in 0..coils {
            let yv = y.data()[[c, i, j]];
            data[[c, i, j]] = if lambda_dc.is_infinite() {
                yv
            } else {
                (data[[c, i, j]] + yv * lambda_dc) / (1.0 + lambda_dc)
            };
        }
    }
}

/// Per-coil sampling state.
struct CoilState {
    x: AugmentedTensor,
    rng: ChaCha8Rng,
}

/// Reusable reconstruction driver. `reconstruct_wkgm` and
/// `reconstruct_svd_wkgm` are thin wrappers around it.
pub struct Sampler<'a, S: ScoreEstimator + ?Sized> {
    model: &'a S,
    weight: &'a WeightMap,
    schedule: &'a NoiseSchedule,
    cfg: SamplerConfig,
    hankel: Option<HankelSpec>,
    streams: Option<Vec<u64>>,
}

impl<'a, S: ScoreEstimator + ?Sized> Sampler<'a, S> {
    pub fn new(model: &'a S, weight: &'a WeightMap, schedule: &'a NoiseSchedule, cfg: SamplerConfig) -> Self {
        Self {
            model,
            weight,
            schedule,
            cfg,
            hankel: None,
            streams: None,
        }
    }

    /// Enables the joint low-rank Hankel projection in the corrector cycle.
    pub fn with_hankel(mut self, spec: HankelSpec) -> Self {
        self.hankel = Some(spec);
        self
    }

    /// Overrides the random stream of each coil (default: the coil index).
    pub fn with_coil_streams(mut self, streams: Vec<u64>) -> Self {
        self.streams = Some(streams);
        self
    }

    pub fn run(&self, y: &MultiCoilKSpace, m: &SamplingMask) -> Result<MultiCoilKSpace> {
        self.run_observed(y, m, |_, _| {})
    }

    /// Runs the sampler, calling `observer(i, k)` with the unweighted,
    /// data-consistent k-space after every outer iteration `i`.
    pub fn run_observed<F>(&self, y: &MultiCoilKSpace, m: &SamplingMask, mut observer: F) -> Result<MultiCoilKSpace>
    where
        F: FnMut(usize, &MultiCoilKSpace),
    {
        self.cfg.validate()?;
        let (coils, h, w) = y.dim();
        if m.shape() != (h, w) {
            return Err(Error::shape(y.dim(), m.shape()));
        }
        if self.weight.shape() != (h, w) {
            return Err(Error::shape(y.dim(), self.weight.shape()));
        }
        if let Some(spec) = &self.hankel {
            spec.validate(y.dim())?;
        }
        self.model.check_input((crate::score::AUG_CHANNELS, h, w))?;
        if !y.is_finite() {
            return Err(Error::param("measured k-space contains non-finite values"));
        }
        let streams: Vec<u64> = match &self.streams {
            Some(s) if s.len() != coils => return Err(Error::shape(s.len(), coils)),
            Some(s) => s.clone(),
            None => (0..coils as u64).collect(),
        };

        let sigmas = self.schedule.sigmas();
        let noise = self.cfg.noise;
        let dim = (crate::score::AUG_CHANNELS, h, w);
        let mut states: Vec<CoilState> = streams
            .iter()
            .map(|&stream| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                rng.set_stream(stream);
                let mut x = draw_noise(dim, noise.then_some(&mut rng));
                x.data_mut().mapv_inplace(|v| v * sigmas[0]);
                CoilState { x, rng }
            })
            .collect();

        let mut k = y.clone();
        for (idx, &sigma) in sigmas.iter().enumerate() {
            if idx > 0 {
                let sigma_prev = sigmas[idx - 1];
                states.par_iter_mut().try_for_each(|st| -> Result<()> {
                    let z = draw_noise(dim, noise.then_some(&mut st.rng));
                    st.x = predictor_step_with_noise(&st.x, self.model, sigma, sigma_prev, &z)?;
                    Ok(())
                })?;
                k = self.project(&mut states, y, m, None, idx)?;
            }
            for _ in 0..self.cfg.corrector_steps {
                states.par_iter_mut().try_for_each(|st| -> Result<()> {
                    let z = draw_noise(dim, noise.then_some(&mut st.rng));
                    st.x = corrector_step_with_noise(&st.x, self.model, sigma, self.cfg.snr, &z)?.0;
                    Ok(())
                })?;
                k = self.project(&mut states, y, m, self.hankel.as_ref(), idx)?;
            }
            if idx == 0 && self.cfg.corrector_steps == 0 {
                k = self.project(&mut states, y, m, None, idx)?;
            }
            observer(idx, &k);
        }
        Ok(k)
    }

    /// Remove weight, collapse, optional joint projection, data consistency,
    /// re-weight and re-augment.
    fn project(
        &self,
        states: &mut [CoilState],
        y: &MultiCoilKSpace,
        m: &SamplingMask,
        hankel: Option<&HankelSpec>,
        iteration: usize,
    ) -> Result<MultiCoilKSpace> {
        let (coils, h, w) = y.dim();
        let wv = self.weight.values();
        let mut data = ndarray::Array3::zeros((coils, h, w));
        for (c, st) in states.iter().enumerate() {
            let kw = collapse6(&st.x)?;
            let mut plane = data.index_axis_mut(ndarray::Axis(0), c);
            ndarray::Zip::from(&mut plane)
                .and(&kw)
                .and(wv)
                .for_each(|o, &v, &s| *o = v / s);
        }
        let mut k = MultiCoilKSpace::new(data).map_err(|_| Error::NonFinite {
            iteration,
            context: "sampler iterate became non-finite".into(),
        })?;
        if let Some(spec) = hankel {
            k = sake_project(&k, spec)?;
        }
        apply_dc(&mut k, y, m, self.cfg.lambda_dc);
        if !k.is_finite() {
            return Err(Error::NonFinite {
                iteration,
                context: "k-space after data consistency".into(),
            });
        }
        for (c, st) in states.iter_mut().enumerate() {
            let kw = ndarray::Zip::from(&k.coil(c)).and(wv).map_collect(|&v, &s| v * s);
            st.x = augment6(&kw);
        }
        Ok(k)
    }
}

/// Score-based reconstruction with independent per-coil sampling.
pub fn reconstruct_wkgm<S: ScoreEstimator + ?Sized>(
    y: &MultiCoilKSpace,
    m: &SamplingMask,
    model: &S,
    w: &WeightMap,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<MultiCoilKSpace> {
    Sampler::new(model, w, schedule, *cfg).run(y, m)
}

/// [`reconstruct_wkgm`] with a joint low-rank Hankel projection of all
/// coils after each corrector update.
pub fn reconstruct_svd_wkgm<S: ScoreEstimator + ?Sized>(
    y: &MultiCoilKSpace,
    m: &SamplingMask,
    model: &S,
    w: &WeightMap,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    spec: &HankelSpec,
) -> Result<MultiCoilKSpace> {
    Sampler::new(model, w, schedule, *cfg).with_hankel(*spec).run(y, m)
}
