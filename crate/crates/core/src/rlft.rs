//! Online RL finetuning: rollout collection into a buffer, KL-motivated
//! Boltzmann reweighting, estimator finetuning with mined monotonicity
//! violations, and policy finetuning by guided-epsilon distillation.

use rayon::prelude::*;
use thiserror::Error;

use crate::encoder::Encoder;
use crate::evalkit::RolloutRecord;
use crate::numkernel::{Adam, AdamConfig, Graph, KernelError, StreamRng, Tensor};
use crate::policy::{
    clip_gradient, mix_noise, sample_two_stage, Conditioning, DenoiseBatch, Evaluator,
    GuidanceConfig, LatentDenoiser, PolicyError, PolicyNets, COND_DIM,
    GUIDANCE_GRAD_CLIP,
};
use crate::progress::{
    make_label, mine_anomalies, monotonicity_loss_graph, ProgressError, ProgressNet,
};
use crate::pushworld::{
    observe, oracle_progress, reset, step, Action, EnvError, Instruction, Task, CHUNK,
    MAX_EPISODE_STEPS, NUM_TASKS,
};
use crate::worldmodel::LATENT_DIM;

/// Rollouts terminate once predicted progress stays above this for
/// `STOP_CHUNKS` consecutive chunk boundaries.
pub const STOP_PROGRESS: f64 = 0.9;
pub const STOP_CHUNKS: usize = 3;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("environment failure: {0}")]
    EnvFailure(#[from] EnvError),
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("buffer holds no success episodes")]
    NoSuccessEpisodes,
    #[error("empty buffer")]
    EmptyBuffer,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Progress(#[from] ProgressError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("encoder: {0}")]
    Encoder(#[from] crate::encoder::EncoderError),
}

/// One executed chunk: conditioning snapshot, the sampled latent in both
/// spaces, the executed actions, and the estimator's score at the boundary.
#[derive(Debug, Clone)]
pub struct ChunkRecord {
    pub t: usize,
    pub ft: Vec<f64>,
    pub latent_raw: Vec<f64>,
    pub latent_policy: Vec<f64>,
    pub actions: Vec<Action>,
    pub p_hat: f64,
}

/// A full collected episode (Eq.-12-style buffer rows grouped by episode).
#[derive(Debug, Clone)]
pub struct EpisodeRollout {
    pub task: Task,
    pub onehot: Vec<f64>,
    pub f0: Vec<f64>,
    /// Raw observations at every executed step (length steps+1).
    pub observations: Vec<Vec<f64>>,
    /// Estimator output at every executed step (length steps+1).
    pub progress_steps: Vec<f64>,
    /// Ground-truth oracle progress at every executed step.
    pub oracle_steps: Vec<f64>,
    pub chunks: Vec<ChunkRecord>,
    pub steps: usize,
    pub success: bool,
    /// Q(s, a) of the final executed chunk under the collecting evaluator.
    pub final_q: f64,
}

impl EpisodeRollout {
    pub fn to_record(&self) -> RolloutRecord {
        RolloutRecord {
            progress: self.progress_steps.clone(),
            oracle: self.oracle_steps.clone(),
            chunks: self.chunks.len(),
            success: self.success,
        }
    }
}

pub struct RolloutBuffer {
    pub episodes: Vec<EpisodeRollout>,
}

impl RolloutBuffer {
    pub fn success_count(&self) -> usize {
        self.episodes.iter().filter(|e| e.success).count()
    }

    pub fn records(&self) -> Vec<RolloutRecord> {
        self.episodes.iter().map(EpisodeRollout::to_record).collect()
    }
}

/// Roll one episode with the current policy. Termination: env success, the
/// progress threshold held for `STOP_CHUNKS` consecutive chunks, or the step
/// cap.
#[allow(clippy::too_many_arguments)]
fn rollout_episode(
    task_id: usize,
    nets: &PolicyNets,
    eval: &Evaluator,
    encoder: &Encoder,
    guidance: &GuidanceConfig,
    env_rng: &mut StreamRng,
    policy_rng: &StreamRng,
) -> Result<EpisodeRollout, RlError> {
    let mut state = reset(task_id, env_rng)?;
    let instruction = Instruction::new(state.task);
    let onehot = instruction.embedding.data().to_vec();
    let f0 = encoder.encode(&observe(&state))?.0;

    let mut observations = vec![observe(&state)];
    let estimate = |obs: &[f64], eval: &Evaluator| -> Result<f64, RlError> {
        let ft = encoder.encode(obs)?.0;
        Ok(eval.prog.estimate(&onehot, &f0, &ft)?)
    };
    let mut progress_steps = vec![estimate(&observations[0], eval)?];
    let mut oracle_steps = vec![oracle_progress(&state, &instruction)];
    let mut chunks: Vec<ChunkRecord> = Vec::new();
    let mut steps = 0usize;
    let mut success = false;
    let mut above_threshold = 0usize;

    'outer: for chunk_idx in 0..(MAX_EPISODE_STEPS / CHUNK) {
        let ft = encoder.encode(&observe(&state))?.0;
        let p_hat = eval.prog.estimate(&onehot, &f0, &ft)?;
        let cond = Conditioning { onehot: &onehot, f0: &f0, ft: &ft };
        let mut rng = policy_rng.child_indexed("chunk", chunk_idx as u64);
        let use_eval = guidance.is_active().then_some(eval);
        let sample = sample_two_stage(nets, use_eval, &cond, guidance, &mut rng, None)?;

        chunks.push(ChunkRecord {
            t: steps,
            ft: ft.clone(),
            latent_raw: sample.latent_raw.clone(),
            latent_policy: sample.latent_policy.clone(),
            actions: sample.actions.clone(),
            p_hat,
        });

        for action in &sample.actions {
            let (next, ok, done) = step(&state, action);
            state = next;
            steps += 1;
            observations.push(observe(&state));
            progress_steps.push(estimate(observations.last().unwrap(), eval)?);
            oracle_steps.push(oracle_progress(&state, &instruction));
            if done {
                success = ok;
                break 'outer;
            }
        }

        let boundary_p = *progress_steps.last().unwrap();
        above_threshold = if boundary_p > STOP_PROGRESS { above_threshold + 1 } else { 0 };
        if above_threshold >= STOP_CHUNKS {
            break;
        }
    }

    let final_q = match chunks.last() {
        Some(c) => eval.q_score(&onehot, &f0, &c.ft, &c.latent_raw)?,
        None => 0.0,
    };
    Ok(EpisodeRollout {
        task: instruction.task,
        onehot,
        f0,
        observations,
        progress_steps,
        oracle_steps,
        chunks,
        steps,
        success,
        final_q,
    })
}

/// Collect `n` episodes (tasks round-robin), parallel across episodes with
/// disjoint streams derived from (seed, episode index).
pub fn collect_rollouts(
    nets: &PolicyNets,
    eval: &Evaluator,
    encoder: &Encoder,
    n: usize,
    guidance: &GuidanceConfig,
    seed: u64,
    label: &str,
) -> Result<RolloutBuffer, RlError> {
    let root = StreamRng::from_seed(seed).child(label);
    let episodes: Result<Vec<EpisodeRollout>, RlError> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut env_rng = root.child_indexed("env", i as u64);
            let policy_rng = root.child_indexed("policy", i as u64);
            rollout_episode(i % NUM_TASKS, nets, eval, encoder, guidance, &mut env_rng, &policy_rng)
        })
        .collect();
    Ok(RolloutBuffer { episodes: episodes? })
}

/// Normalized exp-tilted distribution π* ∝ π₀·exp(Q/α), log-sum-exp
/// stabilized. Zero-prior candidates keep zero mass.
pub fn boltzmann_weights(q: &[f64], prior: &[f64], alpha: f64) -> Result<Vec<f64>, RlError> {
    if q.is_empty() || q.len() != prior.len() {
        return Err(RlError::DegenerateInput("empty or mismatched candidate set"));
    }
    if alpha <= 0.0 {
        return Err(RlError::DegenerateInput("temperature must be positive"));
    }
    if prior.iter().all(|&p| p <= 0.0) {
        return Err(RlError::DegenerateInput("prior has no mass"));
    }
    let logits: Vec<f64> = q
        .iter()
        .zip(prior)
        .map(|(qi, pi)| if *pi > 0.0 { pi.ln() + qi / alpha } else { f64::NEG_INFINITY })
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / z).collect())
}

pub struct EstimatorFinetuneReport {
    pub epochs: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub mined_anomalies_initial: usize,
    pub mined_anomalies_final: usize,
}

/// Finetune P by minimizing L_prog + L_mono on the buffer: one gradient step
/// per episode per epoch, with anomalies re-mined from current predictions.
/// The monotonicity term applies to success episodes only; with no success
/// episodes the progress term still applies.
pub fn finetune_estimator(
    prog: &ProgressNet,
    buffer: &RolloutBuffer,
    encoder: &Encoder,
    delta: f64,
    epochs: usize,
    lr: f64,
) -> Result<(ProgressNet, EstimatorFinetuneReport), RlError> {
    if buffer.episodes.is_empty() {
        return Err(RlError::EmptyBuffer);
    }
    let mut prog = ProgressNet::from_params(prog.params.clone());
    let mut opt = Adam::new(AdamConfig::with_lr(lr));

    // precompute per-episode feature batches and time-proxy labels
    struct EpisodeBatch {
        input: Tensor,  // [T+1 × in]
        labels: Tensor, // [T+1 × 1]
        success: bool,
    }
    let mut batches = Vec::with_capacity(buffer.episodes.len());
    for ep in &buffer.episodes {
        let frames = ep.observations.len();
        let mut rows = Vec::with_capacity(frames * (NUM_TASKS + 2 * crate::encoder::FEATURE_DIM));
        let mut labels = Vec::with_capacity(frames);
        for (t, obs) in ep.observations.iter().enumerate() {
            let ft = encoder.encode(obs)?.0;
            rows.extend_from_slice(&ep.onehot);
            rows.extend_from_slice(&ep.f0);
            rows.extend_from_slice(&ft);
            labels.push(make_label(t, frames - 1)?.value);
        }
        batches.push(EpisodeBatch {
            input: Tensor::matrix(frames, NUM_TASKS + 2 * crate::encoder::FEATURE_DIM, rows)?,
            labels: Tensor::matrix(frames, 1, labels)?,
            success: ep.success,
        });
    }

    let mine_count = |p: &ProgressNet| -> Result<usize, RlError> {
        let mut count = 0;
        for (ep, b) in buffer.episodes.iter().zip(&batches) {
            if !ep.success {
                continue;
            }
            let preds = episode_predictions(p, &b.input)?;
            count += mine_anomalies(&preds, delta)?.len();
        }
        Ok(count)
    };

    let mined_initial = mine_count(&prog)?;
    let mut initial_objective = 0.0;
    let mut final_objective = 0.0;

    for epoch in 0..epochs {
        let mut total = 0.0;
        for b in &batches {
            let mut g = Graph::new();
            let input = g.input(b.input.clone())?;
            let preds = prog.net_forward(&mut g, input)?;
            let l_prog = prog.l1_loss_graph(&mut g, preds, &b.labels)?;
            let loss = if b.success {
                let values: Vec<f64> = g.value(preds).data().to_vec();
                let anomalies = mine_anomalies(&values, delta)?;
                let l_mono = monotonicity_loss_graph(&mut g, preds, &anomalies, delta)?;
                g.add(l_prog, l_mono)?
            } else {
                l_prog
            };
            total += g.value(loss).item()?;
            let bw = g.backward(loss)?;
            let grads = g.param_grads(&bw)?;
            opt.step(&mut prog.params, &grads)?;
        }
        if epoch == 0 {
            initial_objective = total / batches.len() as f64;
        }
        final_objective = total / batches.len() as f64;
    }

    let mined_final = mine_count(&prog)?;
    let report = EstimatorFinetuneReport {
        epochs,
        initial_objective,
        final_objective,
        mined_anomalies_initial: mined_initial,
        mined_anomalies_final: mined_final,
    };
    Ok((prog, report))
}

fn episode_predictions(prog: &ProgressNet, input: &Tensor) -> Result<Vec<f64>, RlError> {
    let mut g = Graph::new();
    let id = g.input(input.clone())?;
    let preds = prog.net_forward(&mut g, id)?;
    Ok(g.value(preds).data().to_vec())
}

/// Count mined anomalies over the success episodes of a buffer with a given
/// estimator (used as the held-out before/after oracle).
pub fn anomaly_count(
    prog: &ProgressNet,
    buffer: &RolloutBuffer,
    encoder: &Encoder,
    delta: f64,
) -> Result<usize, RlError> {
    let mut count = 0;
    for ep in &buffer.episodes {
        if !ep.success {
            continue;
        }
        let mut preds = Vec::with_capacity(ep.observations.len());
        for obs in &ep.observations {
            let ft = encoder.encode(obs)?.0;
            preds.push(prog.estimate(&ep.onehot, &ep.f0, &ft)?);
        }
        count += mine_anomalies(&preds, delta)?.len();
    }
    Ok(count)
}

pub struct PolicyFinetuneReport {
    pub epochs: usize,
    pub batches: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Trust-region proxy: mean ‖ε_new − ε_old‖² on a held-out probe set.
    pub drift_proxy: f64,
}

/// Distill guided targets into the latent expert: renoise stored clean
/// latents to a uniform τ, tilt the drawn noise by the (finetuned) evaluator
/// gradient, and regress. Targets are detached from the policy parameters.
#[allow(clippy::too_many_arguments)]
pub fn finetune_policy(
    nets: &PolicyNets,
    eval: &Evaluator,
    buffer: &RolloutBuffer,
    alpha: f64,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<(LatentDenoiser, PolicyFinetuneReport), RlError> {
    struct Item {
        x0: Vec<f64>,
        cond: Vec<f64>,
        onehot: Vec<f64>,
        f0: Vec<f64>,
        ft: Vec<f64>,
    }
    let mut items = Vec::new();
    for ep in &buffer.episodes {
        for c in &ep.chunks {
            let mut cond = Vec::with_capacity(COND_DIM);
            cond.extend_from_slice(&ep.onehot);
            cond.extend_from_slice(&c.ft);
            items.push(Item {
                x0: c.latent_policy.clone(),
                cond,
                onehot: ep.onehot.clone(),
                f0: ep.f0.clone(),
                ft: c.ft.clone(),
            });
        }
    }
    if items.is_empty() {
        return Err(RlError::EmptyBuffer);
    }

    let mut latent = LatentDenoiser::from_params(nets.latent.params.clone());
    let mut opt = Adam::new(AdamConfig::with_lr(lr));
    let rng = StreamRng::from_seed(seed).child("distill");
    let schedule = &nets.sched_z;

    // held-out probe set for the drift proxy
    let probe: Vec<(Vec<f64>, usize, Vec<f64>)> = (0..64)
        .map(|i| {
            let mut r = rng.child_indexed("probe", i as u64);
            let item = &items[r.below(items.len())];
            let tau = 1 + r.below(schedule.steps());
            let eps = r.normal_vec(LATENT_DIM);
            let x = mix_noise(&item.x0, &eps, tau, schedule);
            (x, tau, item.cond.clone())
        })
        .collect();
    let probe_predict = |net: &LatentDenoiser| -> Result<Vec<Vec<f64>>, RlError> {
        probe.iter().map(|(x, tau, cond)| Ok(net.predict(x, *tau, cond)?)).collect()
    };
    let before = probe_predict(&latent)?;

    let mut initial_loss = 0.0;
    let mut final_loss = 0.0;
    let mut batches = 0usize;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        // deterministic shuffle
        let mut shuffle_rng = rng.child_indexed("shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.below(i + 1));
        }
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let b = chunk.len();
            let mut x_tau = Vec::with_capacity(b * LATENT_DIM);
            let mut targets = Vec::with_capacity(b * LATENT_DIM);
            let mut taus = Vec::with_capacity(b);
            let mut cond = Vec::with_capacity(b * COND_DIM);
            for (j, &idx) in chunk.iter().enumerate() {
                let item = &items[idx];
                let mut r = rng.child_indexed("noise", (epoch * items.len() + batches * b + j) as u64);
                let tau = 1 + r.below(schedule.steps());
                let eps = r.normal_vec(LATENT_DIM);
                let x = mix_noise(&item.x0, &eps, tau, schedule);
                let (_, mut grad) =
                    eval.q_tau_grad_policy(&x, tau, &item.onehot, &item.f0, &item.ft)?;
                clip_gradient(&mut grad, GUIDANCE_GRAD_CLIP);
                let tilde = crate::policy::tilt_epsilon(&eps, &grad, schedule.sigma(tau), alpha);
                x_tau.extend_from_slice(&x);
                targets.extend_from_slice(&tilde);
                taus.push(tau);
                cond.extend_from_slice(&item.cond);
            }
            let batch = DenoiseBatch {
                x_tau: Tensor::matrix(b, LATENT_DIM, x_tau)?,
                taus,
                cond: Tensor::matrix(b, COND_DIM, cond)?,
                targets: Tensor::matrix(b, LATENT_DIM, targets)?,
                latents: None,
            };
            let mut g = Graph::new();
            let loss = crate::policy::denoise_loss_graph(&mut g, &batch, Some(&latent), None)?;
            let v = g.value(loss).item()?;
            epoch_loss += v;
            let bw = g.backward(loss)?;
            let grads = g.param_grads(&bw)?;
            opt.step(&mut latent.params, &grads)?;
            batches += 1;
            epoch_batches += 1;
        }
        let mean = epoch_loss / epoch_batches.max(1) as f64;
        if epoch == 0 {
            initial_loss = mean;
        }
        final_loss = mean;
    }

    let after = probe_predict(&latent)?;
    let drift_proxy = before
        .iter()
        .zip(&after)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
        .sum::<f64>()
        / probe.len() as f64;

    let report = PolicyFinetuneReport { epochs, batches, initial_loss, final_loss, drift_proxy };
    Ok((latent, report))
}
