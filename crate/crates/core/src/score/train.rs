//! Denoising score matching with `lambda(sigma) = sigma^2` and an Adam
//! training loop for [`ConvScoreNet`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::net::{ConvScoreNet, NetConfig};
use super::{AugmentedTensor, NoiseSchedule, ScoreEstimator};
use crate::error::{Error, Result};

/// One sampled noise level and noise tensor for a batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmDraw {
    pub sigma: f64,
    pub z: AugmentedTensor,
}

impl DsmDraw {
    /// Draws a noise level uniformly over the schedule indices, then `z`.
    pub fn sample<R: Rng + ?Sized>(x0: &AugmentedTensor, schedule: &NoiseSchedule, rng: &mut R) -> Self {
        let idx = rng.random_range(0..schedule.len());
        let sigma = schedule.sigmas()[idx];
        let z = AugmentedTensor::standard_normal(x0.dim(), rng);
        Self { sigma, z }
    }

    pub fn sample_batch<R: Rng + ?Sized>(
        batch: &[AugmentedTensor],
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Vec<Self> {
        batch.iter().map(|x0| Self::sample(x0, schedule, rng)).collect()
    }
}

/// Batch mean of `sigma^2 |s(x0 + sigma z, sigma) + z / sigma|^2` with fresh
/// draws from `rng`.
pub fn dsm_loss<M, R>(model: &M, batch: &[AugmentedTensor], schedule: &NoiseSchedule, rng: &mut R) -> Result<f64>
where
    M: ScoreEstimator + ?Sized,
    R: Rng + ?Sized,
{
    if batch.is_empty() {
        return Err(Error::param("denoising loss needs a nonempty batch"));
    }
    let draws = DsmDraw::sample_batch(batch, schedule, rng);
    dsm_loss_with_draws(model, batch, &draws)
}

/// The same loss with explicit draws, one per batch item.
pub fn dsm_loss_with_draws<M>(model: &M, batch: &[AugmentedTensor], draws: &[DsmDraw]) -> Result<f64>
where
    M: ScoreEstimator + ?Sized,
{
    check_batch(batch, draws)?;
    let mut total = 0.0;
    for (x0, d) in batch.iter().zip(draws) {
        let xt = AugmentedTensor::new(x0.data() + &(d.z.data() * d.sigma));
        let s = model.score(&xt, d.sigma);
        total += s
            .data()
            .iter()
            .zip(d.z.data().iter())
            .map(|(s, z)| (d.sigma * s + z).powi(2))
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Loss and its gradient with respect to the flat parameter vector.
pub fn dsm_loss_and_grad(net: &ConvScoreNet, batch: &[AugmentedTensor], draws: &[DsmDraw]) -> Result<(f64, Vec<f64>)> {
    check_batch(batch, draws)?;
    let refs: Vec<&AugmentedTensor> = batch.iter().collect();
    Ok(loss_and_grad(net, &refs, draws))
}

fn check_batch(batch: &[AugmentedTensor], draws: &[DsmDraw]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::param("denoising loss needs a nonempty batch"));
    }
    if batch.len() != draws.len() {
        return Err(Error::shape(batch.len(), draws.len()));
    }
    for (x0, d) in batch.iter().zip(draws) {
        if x0.dim() != d.z.dim() {
            return Err(Error::shape(x0.dim(), d.z.dim()));
        }
    }
    Ok(())
}

fn loss_and_grad(net: &ConvScoreNet, batch: &[&AugmentedTensor], draws: &[DsmDraw]) -> (f64, Vec<f64>) {
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; net.params().len()];
    let mut total = 0.0;
    for (x0, d) in batch.iter().zip(draws) {
        let xt = AugmentedTensor::new(x0.data() + &(d.z.data() * d.sigma));
        total += net.sample_loss_grad(&xt, &d.z, d.sigma, scale, &mut grad);
    }
    (total * scale, grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak Adam step size, cosine-annealed to a tenth over the run.
    pub learning_rate: f64,
    pub seed: u64,
    pub hidden: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 0,
            hidden: 16,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::param("epochs, batch size and hidden width must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    /// Loss of the initialized network on the fixed evaluation draws.
    pub initial_loss: f64,
    /// Loss of the trained network on the same draws.
    pub final_loss: f64,
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

// Cap on evaluation set size and number of draws per evaluated item.
const EVAL_ITEMS: usize = 256;
const EVAL_REPEATS: usize = 4;

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains a [`ConvScoreNet`] on `dataset`. Deterministic given `cfg.seed`.
pub fn train_score(
    dataset: &[AugmentedTensor],
    schedule: &NoiseSchedule,
    cfg: &TrainingConfig,
) -> Result<(ConvScoreNet, TrainingReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::param("training needs a nonempty dataset"));
    }
    let dim = dataset[0].dim();
    if let Some(bad) = dataset.iter().find(|x| x.dim() != dim) {
        return Err(Error::shape(dim, bad.dim()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net_cfg = NetConfig::new(cfg.hidden, schedule.sigma_min(), schedule.sigma_max());
    let mut net = ConvScoreNet::init(net_cfg, &mut rng)?;

    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eval_rng.set_stream(1);
    let eval_items: Vec<&AugmentedTensor> = dataset
        .iter()
        .take(EVAL_ITEMS)
        .flat_map(|x| std::iter::repeat_n(x, EVAL_REPEATS))
        .collect();
    let eval_draws: Vec<DsmDraw> = eval_items
        .iter()
        .map(|x| DsmDraw::sample(x, schedule, &mut eval_rng))
        .collect();
    let evaluate = |net: &ConvScoreNet| -> f64 {
        let mut total = 0.0;
        for (x0, d) in eval_items.iter().zip(&eval_draws) {
            let xt = AugmentedTensor::new(x0.data() + &(d.z.data() * d.sigma));
            let out = net.forward(&xt, d.sigma).expect("validated shape");
            total += out
                .data()
                .iter()
                .zip(d.z.data())
                .map(|(o, z)| (o + z).powi(2))
                .sum::<f64>();
        }
        total / eval_items.len() as f64
    };
    let initial_loss = evaluate(&net);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut adam = Adam::new(net.params().len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&AugmentedTensor> = chunk.iter().map(|&i| &dataset[i]).collect();
            let draws: Vec<DsmDraw> = batch.iter().map(|x| DsmDraw::sample(x, schedule, &mut rng)).collect();
            let (loss, grad) = loss_and_grad(&net, &batch, &draws);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { step, loss });
            }
            let progress = step as f64 / total_steps.max(1) as f64;
            let lr = cfg.learning_rate * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()));
            adam.step(net.params_mut(), &grad, lr);
            epoch_total += loss;
            step += 1;
        }
        epoch_losses.push(epoch_total / steps_per_epoch as f64);
    }

    let final_loss = evaluate(&net);
    if !final_loss.is_finite() {
        return Err(Error::Diverged { step, loss: final_loss });
    }
    Ok((
        net,
        TrainingReport {
            initial_loss,
            final_loss,
            epoch_losses,
        },
    ))
}
