//! Two-stage inference: Stage 1 runs the latent clock from T_z down to T_a
//! (warm start), Stage 2 jointly denoises the latent and action chunks for
//! the remaining T_a steps. Guidance applies to the latent clock per config.

use crate::numkernel::StreamRng;
use crate::pushworld::Action;
use crate::worldmodel::LATENT_DIM;

use super::denoiser::{
    decode_action_chunk, ActionDenoiser, LatentDenoiser, LatentNormalizer, ACTION_X_DIM,
};
use super::schedule::{ddim_step, posterior_mean, Clock, NoiseSchedule, ACTION_STEPS, LATENT_STEPS};
use super::{
    clip_gradient, Evaluator, GuidanceConfig, GuidanceMode, PolicyError, GUIDANCE_GRAD_CLIP,
};

/// The trained sampling stack: both denoisers, the latent standardization,
/// and the two precomputed schedules.
#[derive(Debug, Clone)]
pub struct PolicyNets {
    pub latent: LatentDenoiser,
    pub action: ActionDenoiser,
    pub norm: LatentNormalizer,
    pub sched_z: NoiseSchedule,
    pub sched_a: NoiseSchedule,
}

impl PolicyNets {
    pub fn init(rng: &mut StreamRng) -> Self {
        PolicyNets {
            latent: LatentDenoiser::init(rng),
            action: ActionDenoiser::init(rng),
            norm: LatentNormalizer::identity(),
            sched_z: NoiseSchedule::build(Clock::Latent),
            sched_a: NoiseSchedule::build(Clock::Action),
        }
    }

    pub fn from_parts(latent: LatentDenoiser, action: ActionDenoiser, norm: LatentNormalizer) -> Self {
        PolicyNets {
            latent,
            action,
            norm,
            sched_z: NoiseSchedule::build(Clock::Latent),
            sched_a: NoiseSchedule::build(Clock::Action),
        }
    }
}

/// Per-chunk conditioning. The denoisers see (l, F_t); the evaluator
/// additionally sees F_0.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub onehot: &'a [f64],
    pub f0: &'a [f64],
    pub ft: &'a [f64],
}

impl<'a> Conditioning<'a> {
    pub fn denoiser_row(&self) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.onehot.len() + self.ft.len());
        row.extend_from_slice(self.onehot);
        row.extend_from_slice(self.ft);
        row
    }
}

/// Per-step diagnostics: (τ, ‖ε̂‖, Q_τ, ‖∇Q‖).
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub tau: usize,
    pub eps_norm: f64,
    pub q: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct ChunkSample {
    /// Clean latent in the policy's standardized space.
    pub latent_policy: Vec<f64>,
    /// The same latent mapped back to the world model's space.
    pub latent_raw: Vec<f64>,
    pub actions: Vec<Action>,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Evaluator gradient in policy space, clipped; returns (q, grad).
fn guidance_grad(
    eval: &Evaluator,
    x: &[f64],
    tau: usize,
    cond: &Conditioning,
) -> Result<(f64, Vec<f64>), PolicyError> {
    let (q, mut grad) = eval.q_tau_grad_policy(x, tau, cond.onehot, cond.f0, cond.ft)?;
    clip_gradient(&mut grad, GUIDANCE_GRAD_CLIP);
    Ok((q, grad))
}

/// Mean-space guided ancestral update with an externally supplied gradient:
/// x_{τ−1} = μ_θ(x_τ, ε̂) + s_eff·∇Q + σ̃_τ·z.
pub fn mean_step_with_grad(
    x: &[f64],
    eps_hat: &[f64],
    tau: usize,
    grad: &[f64],
    s_eff: f64,
    schedule: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<Vec<f64>, PolicyError> {
    let mean = posterior_mean(x, eps_hat, tau, schedule)?;
    let ps = schedule.posterior_sigma(tau);
    Ok(mean
        .iter()
        .zip(grad)
        .map(|(m, gq)| m + s_eff * gq + ps * rng.standard_normal())
        .collect())
}

/// Eq.-11-style guided ancestral step on the latent clock. The shift is the
/// step-scaled s·σ_τ·clip(∇Q); with s = 0 it reproduces the unguided
/// ancestral step bit-exactly under the same stream.
#[allow(clippy::too_many_arguments)]
pub fn guided_mean_step(
    nets: &PolicyNets,
    eval: &Evaluator,
    cond: &Conditioning,
    x: &[f64],
    tau: usize,
    strength: f64,
    rng: &mut StreamRng,
    trace: Option<&mut Vec<TraceRow>>,
) -> Result<Vec<f64>, PolicyError> {
    let eps = nets.latent.predict(x, tau, &cond.denoiser_row())?;
    let (q, grad) = guidance_grad(eval, x, tau, cond)?;
    if let Some(t) = trace {
        t.push(TraceRow { tau, eps_norm: l2(&eps), q, grad_norm: l2(&grad) });
    }
    let s_eff = strength * nets.sched_z.sigma(tau);
    mean_step_with_grad(x, &eps, tau, &grad, s_eff, &nets.sched_z, rng)
}

/// One reverse step of the latent clock under the configured guidance mode.
fn latent_reverse_step(
    nets: &PolicyNets,
    eval: Option<&Evaluator>,
    cond: &Conditioning,
    x: &[f64],
    tau: usize,
    guidance: &GuidanceConfig,
    rng: &mut StreamRng,
    trace: &mut Option<&mut Vec<TraceRow>>,
) -> Result<Vec<f64>, PolicyError> {
    match guidance.mode {
        GuidanceMode::Off => {
            let eps = nets.latent.predict(x, tau, &cond.denoiser_row())?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(TraceRow { tau, eps_norm: l2(&eps), q: 0.0, grad_norm: 0.0 });
            }
            ddim_step(x, &eps, tau, tau - 1, &nets.sched_z)
        }
        GuidanceMode::EpsilonSpace => {
            let eval = eval.ok_or(PolicyError::MissingEvaluator)?;
            let eps = nets.latent.predict(x, tau, &cond.denoiser_row())?;
            let (q, grad) = guidance_grad(eval, x, tau, cond)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(TraceRow { tau, eps_norm: l2(&eps), q, grad_norm: l2(&grad) });
            }
            let tilted = super::tilt_epsilon(&eps, &grad, nets.sched_z.sigma(tau), guidance.alpha);
            ddim_step(x, &tilted, tau, tau - 1, &nets.sched_z)
        }
        GuidanceMode::MeanSpace => {
            let eval = eval.ok_or(PolicyError::MissingEvaluator)?;
            guided_mean_step(nets, eval, cond, x, tau, guidance.strength, rng, trace.as_deref_mut())
        }
    }
}

/// Stage 1: run the latent clock from pure noise at τ = T_z down to exactly
/// τ = T_a. Returns the warm-started latent and the step it sits at.
pub fn stage1_warmstart(
    nets: &PolicyNets,
    eval: Option<&Evaluator>,
    cond: &Conditioning,
    guidance: &GuidanceConfig,
    rng: &mut StreamRng,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<(Vec<f64>, usize), PolicyError> {
    let mut x = rng.normal_vec(LATENT_DIM);
    let mut at = LATENT_STEPS;
    while at > ACTION_STEPS {
        x = latent_reverse_step(nets, eval, cond, &x, at, guidance, rng, &mut trace)?;
        at -= 1;
    }
    Ok((x, at))
}

/// Full two-stage sampler: warm start, then T_a steps of coupled latent and
/// action denoising. The action decoder is conditioned on the just-updated
/// latent at each step.
pub fn sample_two_stage(
    nets: &PolicyNets,
    eval: Option<&Evaluator>,
    cond: &Conditioning,
    guidance: &GuidanceConfig,
    rng: &mut StreamRng,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<ChunkSample, PolicyError> {
    if guidance.is_active() && eval.is_none() {
        return Err(PolicyError::MissingEvaluator);
    }
    let (mut x, at) = stage1_warmstart(nets, eval, cond, guidance, rng, trace.as_deref_mut())?;
    debug_assert_eq!(at, ACTION_STEPS);

    let cond_row = cond.denoiser_row();
    let mut xa = rng.normal_vec(ACTION_X_DIM);
    for tau in (1..=ACTION_STEPS).rev() {
        x = latent_reverse_step(nets, eval, cond, &x, tau, guidance, rng, &mut trace)?;
        let eps_a = nets.action.predict(&xa, &x, tau, &cond_row)?;
        xa = ddim_step(&xa, &eps_a, tau, tau - 1, &nets.sched_a)?;
    }

    if x.iter().chain(xa.iter()).any(|v| !v.is_finite()) {
        return Err(PolicyError::NonFinite("two-stage sample"));
    }
    let latent_raw = nets.norm.denormalize(&x);
    let actions = decode_action_chunk(&xa);
    Ok(ChunkSample { latent_policy: x, latent_raw, actions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::FEATURE_DIM;
    use crate::numkernel::StreamRng;
    use crate::progress::ProgressNet;
    use crate::pushworld::NUM_TASKS;
    use crate::worldmodel::WorldModel;

    fn fixture() -> (PolicyNets, WorldModel, ProgressNet) {
        let nets = PolicyNets::init(&mut StreamRng::from_seed(1));
        let wm = WorldModel::init(&mut StreamRng::from_seed(2));
        let prog = ProgressNet::init(&mut StreamRng::from_seed(3));
        (nets, wm, prog)
    }

    fn cond_buffers(seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = StreamRng::from_seed(seed);
        let mut oh = vec![0.0; NUM_TASKS];
        oh[0] = 1.0;
        let f0: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.uniform_in(-0.8, 0.8)).collect();
        let ft: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.uniform_in(-0.8, 0.8)).collect();
        (oh, f0, ft)
    }

    #[test]
    fn unguided_sampling_is_deterministic_per_seed() {
        let (nets, _, _) = fixture();
        let (oh, f0, ft) = cond_buffers(4);
        let cond = Conditioning { onehot: &oh, f0: &f0, ft: &ft };
        let run = || {
            let mut rng = StreamRng::from_seed(99).child("sample");
            sample_two_stage(&nets, None, &cond, &GuidanceConfig::off(), &mut rng, None).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.latent_policy, b.latent_policy);
        assert_eq!(a.actions, b.actions);
    }

    #[test]
    fn stage1_lands_exactly_on_the_action_clock() {
        let (nets, _, _) = fixture();
        let (oh, f0, ft) = cond_buffers(5);
        let cond = Conditioning { onehot: &oh, f0: &f0, ft: &ft };
        let mut rng = StreamRng::from_seed(7);
        let (x, at) = stage1_warmstart(&nets, None, &cond, &GuidanceConfig::off(), &mut rng, None).unwrap();
        assert_eq!(at, ACTION_STEPS);
        assert_eq!(x.len(), LATENT_DIM);
    }

    #[test]
    fn guidance_requires_an_evaluator() {
        let (nets, _, _) = fixture();
        let (oh, f0, ft) = cond_buffers(6);
        let cond = Conditioning { onehot: &oh, f0: &f0, ft: &ft };
        let mut rng = StreamRng::from_seed(8);
        let err = sample_two_stage(
            &nets,
            None,
            &cond,
            &GuidanceConfig::epsilon_space(0.5),
            &mut rng,
            None,
        );
        assert!(matches!(err, Err(PolicyError::MissingEvaluator)));
    }

    #[test]
    fn zero_strength_mean_step_equals_unguided_ancestral_step() {
        let (nets, wm, prog) = fixture();
        let eval = Evaluator { wm: &wm, prog: &prog, norm: &nets.norm };
        let (oh, f0, ft) = cond_buffers(9);
        let cond = Conditioning { onehot: &oh, f0: &f0, ft: &ft };
        let mut rng = StreamRng::from_seed(10);
        let x = rng.normal_vec(LATENT_DIM);
        let tau = 512;

        let guided =
            guided_mean_step(&nets, &eval, &cond, &x, tau, 0.0, &mut StreamRng::from_seed(11), None)
                .unwrap();
        let eps = nets.latent.predict(&x, tau, &cond.denoiser_row()).unwrap();
        // unguided ancestral with the same draws, via the zero-gradient path
        let unguided = mean_step_with_grad(
            &x,
            &eps,
            tau,
            &vec![0.0; LATENT_DIM],
            0.0,
            &nets.sched_z,
            &mut StreamRng::from_seed(11),
        )
        .unwrap();
        assert_eq!(
            guided.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            unguided.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn mean_step_shift_is_s_times_gradient() {
        let (nets, _, _) = fixture();
        let mut rng = StreamRng::from_seed(12);
        let x = rng.normal_vec(LATENT_DIM);
        let eps = rng.normal_vec(LATENT_DIM);
        let grad_fixture = rng.normal_vec(LATENT_DIM);
        let tau = 300;
        let s_eff = 2.5;
        let with = mean_step_with_grad(&x, &eps, tau, &grad_fixture, s_eff, &nets.sched_z, &mut StreamRng::from_seed(13)).unwrap();
        let without = mean_step_with_grad(&x, &eps, tau, &vec![0.0; LATENT_DIM], 0.0, &nets.sched_z, &mut StreamRng::from_seed(13)).unwrap();
        for i in 0..LATENT_DIM {
            let shift = with[i] - without[i];
            assert!((shift - s_eff * grad_fixture[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn trace_rows_cover_every_latent_step() {
        let (nets, wm, prog) = fixture();
        let eval = Evaluator { wm: &wm, prog: &prog, norm: &nets.norm };
        let (oh, f0, ft) = cond_buffers(14);
        let cond = Conditioning { onehot: &oh, f0: &f0, ft: &ft };
        let mut rng = StreamRng::from_seed(15);
        let mut trace = Vec::new();
        sample_two_stage(
            &nets,
            Some(&eval),
            &cond,
            &GuidanceConfig::epsilon_space(0.5),
            &mut rng,
            Some(&mut trace),
        )
        .unwrap();
        assert_eq!(trace.len(), LATENT_STEPS);
        assert_eq!(trace.first().unwrap().tau, LATENT_STEPS);
        assert_eq!(trace.last().unwrap().tau, 1);
        assert!(trace.iter().all(|r| r.grad_norm <= GUIDANCE_GRAD_CLIP + 1e-9));
    }

    #[test]
    fn actions_are_always_within_env_bounds() {
        let (nets, _, _) = fixture();
        let (oh, f0, ft) = cond_buffers(16);
        let cond = Conditioning { onehot: &oh, f0: &f0, ft: &ft };
        let mut rng = StreamRng::from_seed(17);
        let out = sample_two_stage(&nets, None, &cond, &GuidanceConfig::off(), &mut rng, None).unwrap();
        for a in &out.actions {
            assert!(a.dx.abs() <= crate::pushworld::V_MAX + 1e-15);
            assert!(a.dy.abs() <= crate::pushworld::V_MAX + 1e-15);
            assert!([-1i8, 0, 1].contains(&a.toggle));
        }
    }
}
