//! Two-stage VP diffusion policy: schedules, denoisers, the noise-conditioned
//! evaluator Q_τ, classifier guidance in mean- and epsilon-space, and the
//! warm-start sampler.

pub mod denoiser;
pub mod sampler;
pub mod schedule;

pub use denoiser::{
    decode_action_chunk, denoise_loss_graph, encode_action_chunk, make_action_diff_batch,
    make_latent_diff_batch, ActionDenoiser, DenoiseBatch, LatentDenoiser, LatentNormalizer,
    ACTION_X_DIM, COND_DIM, POLICY_TIME_EMB,
};
pub use sampler::{
    guided_mean_step, sample_two_stage, stage1_warmstart, ChunkSample, Conditioning, PolicyNets,
    TraceRow,
};
pub use schedule::{
    add_noise, ancestral_step, ddim_step, mix_noise, posterior_mean, Clock, NoiseSchedule,
    ACTION_STEPS, LATENT_STEPS,
};

use thiserror::Error;

use crate::numkernel::{Graph, KernelError, Tensor};
use crate::progress::{ProgressError, ProgressNet};
use crate::worldmodel::{WorldModel, WorldModelError, LATENT_DIM};

/// L2 ceiling applied to the evaluator gradient before any guidance use.
pub const GUIDANCE_GRAD_CLIP: f64 = 5.0;
/// Default mean-space base strength; the applied shift is s·σ_τ·∇Q.
pub const DEFAULT_MEAN_STRENGTH: f64 = 20.0;
/// Default epsilon-space temperature α.
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("diffusion step {tau} outside [0, {max}]")]
    StepOutOfRange { tau: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("guidance requested but no evaluator supplied")]
    MissingEvaluator,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    World(#[from] WorldModelError),
    #[error(transparent)]
    Progress(#[from] ProgressError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuidanceMode {
    Off,
    MeanSpace,
    EpsilonSpace,
}

/// Guidance knob bundle. `strength` is the mean-space base s (the applied
/// shift is step-scaled by σ_τ); `alpha` is the epsilon-space temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub strength: f64,
    pub alpha: f64,
}

impl GuidanceConfig {
    pub fn off() -> Self {
        GuidanceConfig { mode: GuidanceMode::Off, strength: DEFAULT_MEAN_STRENGTH, alpha: DEFAULT_ALPHA }
    }

    pub fn mean_space(strength: f64) -> Self {
        assert!(strength >= 0.0, "guidance strength must be nonnegative");
        GuidanceConfig { mode: GuidanceMode::MeanSpace, strength, alpha: DEFAULT_ALPHA }
    }

    pub fn epsilon_space(alpha: f64) -> Self {
        assert!(alpha > 0.0, "temperature must be positive");
        GuidanceConfig { mode: GuidanceMode::EpsilonSpace, strength: DEFAULT_MEAN_STRENGTH, alpha }
    }

    pub fn is_active(&self) -> bool {
        self.mode != GuidanceMode::Off
    }
}

/// Clip a gradient to L2 norm ≤ `max_norm` (no-op below the ceiling).
pub fn clip_gradient(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for v in grad.iter_mut() {
            *v *= scale;
        }
    }
}

/// ε̃ = ε − (σ_τ/α)·∇Q — the guided noise target.
pub fn tilt_epsilon(eps: &[f64], grad_q: &[f64], sigma: f64, alpha: f64) -> Vec<f64> {
    let coef = sigma / alpha;
    eps.iter().zip(grad_q).map(|(e, g)| e - coef * g).collect()
}

/// The noise-aware evaluator: world model + progress estimator + the latent
/// standardization the policy samples under.
#[derive(Debug, Clone, Copy)]
pub struct Evaluator<'a> {
    pub wm: &'a WorldModel,
    pub prog: &'a ProgressNet,
    pub norm: &'a LatentNormalizer,
}

impl<'a> Evaluator<'a> {
    /// Q_τ(x_τ, τ, s) = P(l, F_0, D(F_t, x_τ, τ)) on the raw latent.
    pub fn q_tau(
        &self,
        x: &[f64],
        tau: usize,
        onehot: &[f64],
        f0: &[f64],
        ft: &[f64],
    ) -> Result<f64, PolicyError> {
        let future = self.wm.decode_future_noisy(ft, x, tau)?;
        Ok(self.prog.estimate(onehot, f0, &future)?)
    }

    /// Q(s, a) = P(l, F_0, D(F_t, a^z)) — the clean composition (identical
    /// to the joint progress score).
    pub fn q_score(
        &self,
        onehot: &[f64],
        f0: &[f64],
        ft: &[f64],
        z: &[f64],
    ) -> Result<f64, PolicyError> {
        Ok(crate::progress::joint_progress(self.prog, self.wm, onehot, f0, ft, z)?)
    }

    /// Value and ∇_{x_τ} of Q_τ on the raw latent (unclipped).
    pub fn q_tau_grad(
        &self,
        x: &[f64],
        tau: usize,
        onehot: &[f64],
        f0: &[f64],
        ft: &[f64],
    ) -> Result<(f64, Vec<f64>), PolicyError> {
        let mut g = Graph::new();
        let xid = g.input(Tensor::matrix(1, LATENT_DIM, x.to_vec())?)?;
        let q = self.q_tau_node(&mut g, xid, tau, onehot, f0, ft, false)?;
        let value = g.value(q).item()?;
        let bw = g.backward(q)?;
        let grad = bw.grad_of(&g, xid)?.data().to_vec();
        Ok((value, grad))
    }

    /// Value and gradient in the policy's standardized latent space: the
    /// tape includes the de-standardization, so the chain rule picks up the
    /// per-dimension scale.
    pub fn q_tau_grad_policy(
        &self,
        x_norm: &[f64],
        tau: usize,
        onehot: &[f64],
        f0: &[f64],
        ft: &[f64],
    ) -> Result<(f64, Vec<f64>), PolicyError> {
        let mut g = Graph::new();
        let xid = g.input(Tensor::matrix(1, LATENT_DIM, x_norm.to_vec())?)?;
        let q = self.q_tau_node(&mut g, xid, tau, onehot, f0, ft, true)?;
        let value = g.value(q).item()?;
        let bw = g.backward(q)?;
        let grad = bw.grad_of(&g, xid)?.data().to_vec();
        Ok((value, grad))
    }

    #[allow(clippy::too_many_arguments)]
    fn q_tau_node(
        &self,
        g: &mut Graph,
        xid: crate::numkernel::ValueId,
        tau: usize,
        onehot: &[f64],
        f0: &[f64],
        ft: &[f64],
        denormalize: bool,
    ) -> Result<crate::numkernel::ValueId, PolicyError> {
        let z = if denormalize {
            let std = g.input(Tensor::matrix(1, LATENT_DIM, self.norm.std.clone())?)?;
            let mean = g.input(Tensor::matrix(1, LATENT_DIM, self.norm.mean.clone())?)?;
            let scaled = g.mul(xid, std)?;
            g.add(scaled, mean)?
        } else {
            xid
        };
        let ftid = g.input(Tensor::matrix(1, ft.len(), ft.to_vec())?)?;
        let future = self.wm.decode_future_graph(g, ftid, z, Some(&[tau]))?;
        let ohid = g.input(Tensor::matrix(1, onehot.len(), onehot.to_vec())?)?;
        let f0id = g.input(Tensor::matrix(1, f0.len(), f0.to_vec())?)?;
        Ok(self.prog.score_graph(g, ohid, f0id, future)?)
    }

    /// ε̃ = ε̂ − (σ_τ/α)·clip(∇_{x_τ} Q_τ) on the raw latent.
    #[allow(clippy::too_many_arguments)]
    pub fn guided_epsilon(
        &self,
        eps_hat: &[f64],
        x: &[f64],
        tau: usize,
        onehot: &[f64],
        f0: &[f64],
        ft: &[f64],
        alpha: f64,
        schedule: &NoiseSchedule,
    ) -> Result<Vec<f64>, PolicyError> {
        let (_, mut grad) = self.q_tau_grad(x, tau, onehot, f0, ft)?;
        clip_gradient(&mut grad, GUIDANCE_GRAD_CLIP);
        Ok(tilt_epsilon(eps_hat, &grad, schedule.sigma(tau), alpha))
    }
}
