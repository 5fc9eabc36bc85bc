//! Forward diffusion process: variance schedule, closed-form noising and the ε-prediction loss.

use candle_core::{DType, Tensor};

use crate::config::ScheduleKind;
use crate::error::{Error, Result};

/// Per-timestep variance increments and their cumulative products. Timesteps are zero-indexed.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(timesteps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear if timesteps == 1 => vec![beta_start],
            ScheduleKind::Linear => {
                let span = (beta_end - beta_start) / (timesteps - 1) as f64;
                (0..timesteps).map(|i| beta_start + span * i as f64).collect()
            }
        };
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidArgument("every beta must lie in (0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        if *alpha_bar.last().unwrap() <= 0.0 {
            return Err(Error::InvalidArgument("cumulative alpha underflows to zero".into()));
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `ᾱ_t`, with `ᾱ_{-1} = 1` for the terminal step of a sampler.
    pub fn alpha_bar_at(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bar[t])
    }

    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t] / (1.0 - self.alpha_bar[t])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.timesteps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [0, {})", self.timesteps())));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Closed-form sample of `q(x_t | x_0)`: `sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape(x0, eps, "q_sample")?;
    sched.check_t(t)?;
    let ab = sched.alpha_bar[t];
    Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// [`q_sample`] with one timestep per leading-dimension entry of `x0`.
pub fn q_sample_batch(x0: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape(x0, eps, "q_sample_batch")?;
    if x0.dim(0)? != ts.len() {
        return Err(Error::Shape(format!("{} timesteps for batch of {}", ts.len(), x0.dim(0)?)));
    }
    for &t in ts {
        sched.check_t(t)?;
    }
    let mut coef_shape = vec![ts.len()];
    coef_shape.extend(std::iter::repeat(1).take(x0.rank() - 1));
    let signal: Vec<f64> = ts.iter().map(|&t| sched.alpha_bar[t].sqrt()).collect();
    let noise: Vec<f64> = ts.iter().map(|&t| (1.0 - sched.alpha_bar[t]).sqrt()).collect();
    let signal = Tensor::from_vec(signal, coef_shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?;
    let noise = Tensor::from_vec(noise, coef_shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
}

/// Applies the single-step kernel `q(x_t | x_{t−1})` `t+1` times, consuming one noise tensor per step.
pub fn iterative_forward(x0: &Tensor, t: usize, noise_stream: &[Tensor], sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if noise_stream.len() != t + 1 {
        return Err(Error::InvalidArgument(format!("noise stream has {} entries, need {}", noise_stream.len(), t + 1)));
    }
    let mut x = x0.clone();
    for (step, noise) in noise_stream.iter().enumerate() {
        same_shape(x0, noise, "iterative_forward")?;
        let b = sched.beta[step];
        x = ((x * (1.0 - b).sqrt())? + (noise * b.sqrt())?)?;
    }
    Ok(x)
}

/// Differentiable mean squared error, returned as a scalar tensor.
pub fn mse(eps_true: &Tensor, eps_pred: &Tensor) -> Result<Tensor> {
    same_shape(eps_true, eps_pred, "mse")?;
    Ok((eps_true - eps_pred)?.sqr()?.mean_all()?)
}

/// Mean squared error between true and predicted noise, accumulated in 64-bit.
pub fn training_loss(eps_true: &Tensor, eps_pred: &Tensor) -> Result<f64> {
    same_shape(eps_true, eps_pred, "training_loss")?;
    let d = (eps_true.to_dtype(DType::F64)? - eps_pred.to_dtype(DType::F64)?)?;
    Ok(d.sqr()?.mean_all()?.to_scalar::<f64>()?)
}
