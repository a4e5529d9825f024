//! Variance-preserving noise schedules for the two diffusion clocks and the
//! elementary forward/reverse steps built on them.

use crate::numkernel::StreamRng;

use super::PolicyError;

/// Latent-action clock training horizon T_z.
pub const LATENT_STEPS: usize = 1000;
/// Action-chunk clock training horizon T_a.
pub const ACTION_STEPS: usize = 100;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 2e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    Latent,
    Action,
}

impl Clock {
    pub fn steps(self) -> usize {
        match self {
            Clock::Latent => LATENT_STEPS,
            Clock::Action => ACTION_STEPS,
        }
    }
}

/// Precomputed VP coefficients. Index 0 is the clean convention: β_0 = 0,
/// ᾱ_0 = 1, σ_0 = 0.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub clock: Clock,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from 1e-4 to 2e-2 over the clock's step count.
    pub fn build(clock: Clock) -> Self {
        let t = clock.steps();
        let mut beta = Vec::with_capacity(t + 1);
        let mut alpha_bar = Vec::with_capacity(t + 1);
        let mut sigma = Vec::with_capacity(t + 1);
        beta.push(0.0);
        alpha_bar.push(1.0);
        sigma.push(0.0);
        let mut prod = 1.0;
        for i in 1..=t {
            let b = BETA_START + (i - 1) as f64 / (t - 1) as f64 * (BETA_END - BETA_START);
            prod *= 1.0 - b;
            beta.push(b);
            alpha_bar.push(prod);
            sigma.push((1.0 - prod).sqrt());
        }
        NoiseSchedule { clock, beta, alpha_bar, sigma }
    }

    pub fn steps(&self) -> usize {
        self.clock.steps()
    }

    fn check(&self, tau: usize) -> Result<(), PolicyError> {
        if tau > self.steps() {
            return Err(PolicyError::StepOutOfRange { tau, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, tau: usize) -> f64 {
        self.beta[tau]
    }

    pub fn alpha_bar(&self, tau: usize) -> f64 {
        self.alpha_bar[tau]
    }

    pub fn sigma(&self, tau: usize) -> f64 {
        self.sigma[tau]
    }

    /// Posterior std √β̃_τ of the ancestral reverse kernel; 0 at τ = 1.
    pub fn posterior_sigma(&self, tau: usize) -> f64 {
        if tau <= 1 {
            return 0.0;
        }
        let var = (1.0 - self.alpha_bar[tau - 1]) / (1.0 - self.alpha_bar[tau]) * self.beta[tau];
        var.sqrt()
    }
}

/// Forward process: x_τ = √ᾱ_τ·x_0 + σ_τ·ε. Returns the noised sample and
/// the drawn ε (the regression target).
pub fn add_noise(
    x0: &[f64],
    tau: usize,
    schedule: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
    schedule.check(tau)?;
    let eps = rng.normal_vec(x0.len());
    let x = mix_noise(x0, &eps, tau, schedule);
    Ok((x, eps))
}

/// Forward mix with caller-supplied noise.
pub fn mix_noise(x0: &[f64], eps: &[f64], tau: usize, schedule: &NoiseSchedule) -> Vec<f64> {
    let (a, s) = (schedule.alpha_bar(tau).sqrt(), schedule.sigma(tau));
    x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}

/// Deterministic DDIM step τ → τ′ (η = 0):
/// x̂_0 = (x_τ − σ_τ·ε̂)/√ᾱ_τ, then x_{τ′} = √ᾱ_{τ′}·x̂_0 + σ_{τ′}·ε̂.
pub fn ddim_step(
    x: &[f64],
    eps_hat: &[f64],
    tau: usize,
    tau_prime: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>, PolicyError> {
    schedule.check(tau)?;
    if tau_prime > tau {
        return Err(PolicyError::StepOutOfRange { tau: tau_prime, max: tau });
    }
    if tau_prime == tau {
        return Ok(x.to_vec());
    }
    let (a, s) = (schedule.alpha_bar(tau).sqrt(), schedule.sigma(tau));
    let (ap, sp) = (schedule.alpha_bar(tau_prime).sqrt(), schedule.sigma(tau_prime));
    Ok(x.iter()
        .zip(eps_hat)
        .map(|(xv, ev)| {
            let x0 = (xv - s * ev) / a;
            ap * x0 + sp * ev
        })
        .collect())
}

/// Unguided ancestral (DDPM) step τ → τ−1: posterior mean from ε̂ plus
/// posterior-scaled noise. Consumes one normal draw per coordinate.
pub fn ancestral_step(
    x: &[f64],
    eps_hat: &[f64],
    tau: usize,
    schedule: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<Vec<f64>, PolicyError> {
    let mean = posterior_mean(x, eps_hat, tau, schedule)?;
    let ps = schedule.posterior_sigma(tau);
    Ok(mean.iter().map(|m| m + ps * rng.standard_normal()).collect())
}

/// Standard VP posterior mean μ_θ = (x_τ − (β_τ/σ_τ)·ε̂)/√(1−β_τ).
pub fn posterior_mean(
    x: &[f64],
    eps_hat: &[f64],
    tau: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>, PolicyError> {
    schedule.check(tau)?;
    if tau == 0 {
        return Err(PolicyError::StepOutOfRange { tau: 0, max: 0 });
    }
    let beta = schedule.beta(tau);
    let alpha = 1.0 - beta;
    let coef = beta / schedule.sigma(tau);
    Ok(x.iter().zip(eps_hat).map(|(xv, ev)| (xv - coef * ev) / alpha.sqrt()).collect())
}
