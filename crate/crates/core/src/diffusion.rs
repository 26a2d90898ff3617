//! Condition-agnostic DDPM machinery shared by both denoisers: noise
//! schedule construction, closed-form forward noising, and the ancestral
//! x0-prediction sampling loop.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Cosine => write!(f, "cosine"),
            ScheduleKind::Linear => write!(f, "linear"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Noised tensor at diffusion level `t`.
#[derive(Debug, Clone)]
pub struct NoisyMotion {
    pub x_t: Array2<f64>,
    pub t: usize,
}

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::BadStepCount(steps));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let (lo, hi) = (1e-4, 2e-2);
            (0..steps)
                .map(|t| lo + (hi - lo) * t as f64 / (steps - 1) as f64)
                .collect()
        }
        ScheduleKind::Cosine => {
            // squared-cosine alpha_bar, beta clipped at 0.999
            let s = 0.008;
            let f = |t: f64| {
                let v = ((t / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
                v.cos().powi(2)
            };
            (0..steps)
                .map(|t| {
                    let b = 1.0 - f((t + 1) as f64) / f(t as f64);
                    b.clamp(1e-8, 0.999)
                })
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        kind,
        steps,
        beta,
        alpha,
        alpha_bar,
    })
}

/// Closed-form t-step forward noising:
/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise`.
pub fn q_sample(
    x0: &Array2<f64>,
    t: usize,
    noise: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<NoisyMotion> {
    if x0.dim() != noise.dim() {
        return Err(Error::ShapeMismatch(format!(
            "x0 {:?} vs noise {:?}",
            x0.dim(),
            noise.dim()
        )));
    }
    let ab = sched.alpha_bar[t];
    Ok(NoisyMotion {
        x_t: x0 * ab.sqrt() + noise * (1.0 - ab).sqrt(),
        t,
    })
}

/// One ancestral step: sample from the Gaussian posterior
/// `q(x_{t-1} | x_t, x0_hat)` with the standard posterior variance
/// `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`. At t = 0 the mean
/// is returned with no noise.
pub fn posterior_step(
    noisy: &NoisyMotion,
    x0_hat: &Array2<f64>,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Array2<f64> {
    let t = noisy.t;
    let ab_t = sched.alpha_bar[t];
    let ab_prev = if t == 0 { 1.0 } else { sched.alpha_bar[t - 1] };
    let beta_t = sched.beta[t];
    let alpha_t = sched.alpha[t];
    let coef_x0 = ab_prev.sqrt() * beta_t / (1.0 - ab_t);
    let coef_xt = alpha_t.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let mean = x0_hat * coef_x0 + &noisy.x_t * coef_xt;
    if t == 0 {
        return mean;
    }
    let var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t);
    let sigma = var.max(0.0).sqrt();
    let noise = Array2::from_shape_fn(mean.dim(), |_| rng.sample::<f64, _>(StandardNormal));
    mean + noise * sigma
}

/// Run the full reverse chain from pure noise. `denoise_fn(x_t, t)` must
/// return an x0 estimate for every timestep. Deterministic for a seeded rng.
pub fn sample_loop<F>(
    mut denoise_fn: F,
    shape: (usize, usize),
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Array2<f64>>
where
    F: FnMut(&Array2<f64>, usize) -> Result<Array2<f64>>,
{
    let mut x = Array2::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal));
    for t in (0..sched.steps).rev() {
        let x0_hat = denoise_fn(&x, t)?;
        if x0_hat.dim() != shape {
            return Err(Error::ShapeMismatch(format!(
                "denoiser returned {:?}, expected {:?}",
                x0_hat.dim(),
                shape
            )));
        }
        let noisy = NoisyMotion { x_t: x, t };
        x = posterior_step(&noisy, &x0_hat, sched, rng);
    }
    Ok(x)
}
