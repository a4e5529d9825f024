//! Stage drivers: the shared run configuration and the training loops for
//! every pipeline stage, used verbatim by the CLI and the test suites.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoder::{Encoder, FEATURE_DIM};
use crate::evalkit::EvalReport;
use crate::numkernel::{Adam, AdamConfig, Graph, StreamRng, Tensor};
use crate::policy::{
    denoise_loss_graph, make_action_diff_batch, make_latent_diff_batch, ActionDenoiser, Clock,
    Evaluator, GuidanceConfig, GuidanceMode, LatentDenoiser, LatentNormalizer, NoiseSchedule,
    PolicyNets, COND_DIM,
};
use crate::progress::{ft_loss_graph, JointBatch, ProgressNet};
use crate::pushworld::{generate_demos, Trajectory, CHUNK, NUM_TASKS};
use crate::rlft::{
    collect_rollouts, finetune_estimator, finetune_policy, EstimatorFinetuneReport,
    PolicyFinetuneReport, RolloutBuffer,
};
use crate::worldmodel::{WorldModel, LATENT_DIM};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("env: {0}")]
    Env(#[from] crate::pushworld::EnvError),
    #[error("encoder: {0}")]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error("world model: {0}")]
    World(#[from] crate::worldmodel::WorldModelError),
    #[error("progress: {0}")]
    Progress(#[from] crate::progress::ProgressError),
    #[error("policy: {0}")]
    Policy(#[from] crate::policy::PolicyError),
    #[error("rl: {0}")]
    Rl(#[from] crate::rlft::RlError),
    #[error("eval: {0}")]
    Eval(#[from] crate::evalkit::EvalError),
    #[error("kernel: {0}")]
    Kernel(#[from] crate::numkernel::KernelError),
}

/// Flat run configuration. Serialized as `key=value` lines; unknown keys are
/// rejected so typos fail loudly.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub demos: usize,
    pub heldout_demos: usize,
    pub chunk: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta_kl: f64,
    pub delta: f64,
    pub epochs_world: usize,
    pub epochs_progress: usize,
    pub epochs_joint: usize,
    pub epochs_policy: usize,
    pub epochs_estimator_ft: usize,
    pub epochs_distill: usize,
    pub guidance: String,
    pub strength: f64,
    pub alpha: f64,
    pub episodes: usize,
    pub stop_window: usize,
    pub stop_threshold: f64,
    pub drift_ceiling: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            demos: 500,
            heldout_demos: 100,
            chunk: CHUNK,
            batch_size: 128,
            lr: 1e-4,
            beta_kl: 1e-3,
            delta: 0.05,
            epochs_world: 40,
            epochs_progress: 30,
            epochs_joint: 12,
            epochs_policy: 60,
            epochs_estimator_ft: 2,
            epochs_distill: 4,
            guidance: "off".to_string(),
            strength: 20.0,
            alpha: 0.5,
            episodes: 100,
            stop_window: 10,
            stop_threshold: 0.9,
            drift_ceiling: 2.0,
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let bad = |e: String| PipelineError::Config(format!("key `{key}`: {e}"));
        macro_rules! parse {
            ($field:expr) => {
                $field = value.parse().map_err(|e| bad(format!("{e}")))?
            };
        }
        match key {
            "seed" => parse!(self.seed),
            "demos" => parse!(self.demos),
            "heldout_demos" => parse!(self.heldout_demos),
            "chunk" => parse!(self.chunk),
            "batch_size" => parse!(self.batch_size),
            "lr" => parse!(self.lr),
            "beta_kl" => parse!(self.beta_kl),
            "delta" => parse!(self.delta),
            "epochs_world" => parse!(self.epochs_world),
            "epochs_progress" => parse!(self.epochs_progress),
            "epochs_joint" => parse!(self.epochs_joint),
            "epochs_policy" => parse!(self.epochs_policy),
            "epochs_estimator_ft" => parse!(self.epochs_estimator_ft),
            "epochs_distill" => parse!(self.epochs_distill),
            "guidance" => {
                if !["off", "mean", "eps"].contains(&value) {
                    return Err(bad("must be off|mean|eps".into()));
                }
                self.guidance = value.to_string();
            }
            "s" | "strength" => parse!(self.strength),
            "alpha" => parse!(self.alpha),
            "episodes" => parse!(self.episodes),
            "stop_window" => parse!(self.stop_window),
            "stop_threshold" => parse!(self.stop_threshold),
            "drift_ceiling" => parse!(self.drift_ceiling),
            other => return Err(PipelineError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parse `key=value` lines (# comments allowed) over the defaults.
    pub fn parse_kv(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = RunConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("bad line `{line}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Canonical serialization (sorted keys) — the fingerprint input.
    pub fn to_kv_text(&self) -> String {
        let mut kv = BTreeMap::new();
        kv.insert("alpha", self.alpha.to_string());
        kv.insert("batch_size", self.batch_size.to_string());
        kv.insert("beta_kl", self.beta_kl.to_string());
        kv.insert("chunk", self.chunk.to_string());
        kv.insert("delta", self.delta.to_string());
        kv.insert("demos", self.demos.to_string());
        kv.insert("drift_ceiling", self.drift_ceiling.to_string());
        kv.insert("episodes", self.episodes.to_string());
        kv.insert("epochs_distill", self.epochs_distill.to_string());
        kv.insert("epochs_estimator_ft", self.epochs_estimator_ft.to_string());
        kv.insert("epochs_joint", self.epochs_joint.to_string());
        kv.insert("epochs_policy", self.epochs_policy.to_string());
        kv.insert("epochs_progress", self.epochs_progress.to_string());
        kv.insert("epochs_world", self.epochs_world.to_string());
        kv.insert("guidance", self.guidance.clone());
        kv.insert("heldout_demos", self.heldout_demos.to_string());
        kv.insert("lr", self.lr.to_string());
        kv.insert("seed", self.seed.to_string());
        kv.insert("stop_threshold", self.stop_threshold.to_string());
        kv.insert("stop_window", self.stop_window.to_string());
        kv.insert("strength", self.strength.to_string());
        let mut s = String::new();
        for (k, v) in kv {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_kv_text().as_bytes());
        hex_prefix(&h.finalize(), 12)
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        match self.guidance.as_str() {
            "mean" => GuidanceConfig::mean_space(self.strength),
            "eps" => GuidanceConfig::epsilon_space(self.alpha),
            _ => GuidanceConfig::off(),
        }
    }
}

pub fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_prefix(&h.finalize(), 12)
}

/// Demos with their frame features under the frozen encoder.
pub struct DemoSet {
    pub demos: Vec<Trajectory>,
    pub features: Vec<Vec<Vec<f64>>>,
}

impl DemoSet {
    pub fn encode(encoder: &Encoder, demos: Vec<Trajectory>) -> Result<Self, PipelineError> {
        let mut features = Vec::with_capacity(demos.len());
        for demo in &demos {
            let mut rows = Vec::with_capacity(demo.observations.len());
            for obs in &demo.observations {
                rows.push(encoder.encode(obs)?.0);
            }
            features.push(rows);
        }
        Ok(DemoSet { demos, features })
    }
}

/// Per-stage loss trace for reports and training-quality assertions.
#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    pub step_losses: Vec<f64>,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
}

fn deterministic_shuffle(n: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.below(i + 1));
    }
    order
}

/// Generate the training demo corpus for a config.
pub fn make_demos(cfg: &RunConfig) -> Result<Vec<Trajectory>, PipelineError> {
    Ok(generate_demos(cfg.demos, cfg.seed, cfg.chunk)?)
}

/// Held-out demos from a disjoint seed space.
pub fn make_heldout_demos(cfg: &RunConfig) -> Result<Vec<Trajectory>, PipelineError> {
    Ok(generate_demos(cfg.heldout_demos, cfg.seed.wrapping_add(1_000_003), cfg.chunk)?)
}

// ── world model pretraining ───────────────────────────────────────────────

pub fn train_world(
    cfg: &RunConfig,
    data: &DemoSet,
) -> Result<(WorldModel, TrainStats), PipelineError> {
    let rng = StreamRng::from_seed(cfg.seed).child("train-world");
    let mut wm = WorldModel::init(&mut rng.child("init"));
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));

    // all N-step transitions
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (d, demo) in data.demos.iter().enumerate() {
        for t in 0..=demo.len().saturating_sub(cfg.chunk) {
            pairs.push((d, t));
        }
    }
    let steps_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs_world;
    let warmup = (0.2 * total_steps as f64).max(1.0);

    let mut stats = TrainStats::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs_world {
        let order = deterministic_shuffle(pairs.len(), &mut rng.child_indexed("shuffle", epoch as u64));
        let mut epoch_loss = 0.0;
        for chunk_ids in order.chunks(cfg.batch_size) {
            let b = chunk_ids.len();
            let mut f_t = Vec::with_capacity(b * FEATURE_DIM);
            let mut f_n = Vec::with_capacity(b * FEATURE_DIM);
            for &i in chunk_ids {
                let (d, t) = pairs[i];
                f_t.extend_from_slice(&data.features[d][t]);
                f_n.extend_from_slice(&data.features[d][t + cfg.chunk]);
            }
            let mut eta_rng = rng.child_indexed("eta", step as u64);
            let eta = eta_rng.normal_vec(b * LATENT_DIM);
            let beta = cfg.beta_kl * ((step as f64 + 1.0) / warmup).min(1.0);

            let mut g = Graph::new();
            let nodes = wm.world_loss_graph(
                &mut g,
                &Tensor::matrix(b, FEATURE_DIM, f_t)?,
                &Tensor::matrix(b, FEATURE_DIM, f_n)?,
                &Tensor::matrix(b, LATENT_DIM, eta)?,
                beta,
            )?;
            let loss = g.value(nodes.loss).item()?;
            let bw = g.backward(nodes.loss)?;
            let grads = g.param_grads(&bw)?;
            opt.step(&mut wm.params, &grads)?;
            stats.step_losses.push(loss);
            epoch_loss += loss;
            step += 1;
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        if epoch == 0 {
            stats.first_epoch_loss = mean;
        }
        stats.last_epoch_loss = mean;
    }
    Ok((wm, stats))
}

// ── progress estimator pretraining ────────────────────────────────────────

fn progress_input_row(onehot: &[f64], f0: &[f64], ft: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(NUM_TASKS + 2 * FEATURE_DIM);
    row.extend_from_slice(onehot);
    row.extend_from_slice(f0);
    row.extend_from_slice(ft);
    row
}

pub fn train_progress(
    cfg: &RunConfig,
    data: &DemoSet,
) -> Result<(ProgressNet, TrainStats), PipelineError> {
    let rng = StreamRng::from_seed(cfg.seed).child("train-progress");
    let mut prog = ProgressNet::init(&mut rng.child("init"));
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));

    let mut items: Vec<(usize, usize)> = Vec::new();
    for (d, demo) in data.demos.iter().enumerate() {
        for t in 0..=demo.len() {
            items.push((d, t));
        }
    }
    let steps_per_epoch = items.len().div_ceil(cfg.batch_size);

    let mut stats = TrainStats::default();
    for epoch in 0..cfg.epochs_progress {
        let order = deterministic_shuffle(items.len(), &mut rng.child_indexed("shuffle", epoch as u64));
        let mut epoch_loss = 0.0;
        for chunk_ids in order.chunks(cfg.batch_size) {
            let b = chunk_ids.len();
            let in_dim = NUM_TASKS + 2 * FEATURE_DIM;
            let mut rows = Vec::with_capacity(b * in_dim);
            let mut labels = Vec::with_capacity(b);
            for &i in chunk_ids {
                let (d, t) = items[i];
                let demo = &data.demos[d];
                rows.extend(progress_input_row(
                    demo.instruction.embedding.data(),
                    &data.features[d][0],
                    &data.features[d][t],
                ));
                labels.push(t as f64 / demo.len() as f64);
            }
            let mut g = Graph::new();
            let input = g.input(Tensor::matrix(b, in_dim, rows)?)?;
            let preds = prog.net_forward(&mut g, input)?;
            let loss = prog.l1_loss_graph(&mut g, preds, &Tensor::matrix(b, 1, labels)?)?;
            let v = g.value(loss).item()?;
            let bw = g.backward(loss)?;
            let grads = g.param_grads(&bw)?;
            opt.step(&mut prog.params, &grads)?;
            stats.step_losses.push(v);
            epoch_loss += v;
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        if epoch == 0 {
            stats.first_epoch_loss = mean;
        }
        stats.last_epoch_loss = mean;
    }
    Ok((prog, stats))
}

// ── joint finetuning (world model + estimator, noise-aware) ───────────────

pub fn joint_finetune(
    cfg: &RunConfig,
    data: &DemoSet,
    world: &WorldModel,
    prog: &ProgressNet,
) -> Result<(WorldModel, ProgressNet, TrainStats), PipelineError> {
    let rng = StreamRng::from_seed(cfg.seed).child("joint-finetune");
    let sched = NoiseSchedule::build(Clock::Latent);

    // one combined parameter set; prefixes keep the names disjoint
    let mut params = world.params.clone();
    for (name, t) in prog.params.iter() {
        params.insert(name, t.clone())?;
    }
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));

    let mut items: Vec<(usize, usize)> = Vec::new();
    for (d, demo) in data.demos.iter().enumerate() {
        let mut t = 0;
        while t + cfg.chunk <= demo.len() {
            items.push((d, t));
            t += cfg.chunk;
        }
    }
    let steps_per_epoch = items.len().div_ceil(cfg.batch_size);

    let mut stats = TrainStats::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs_joint {
        let order = deterministic_shuffle(items.len(), &mut rng.child_indexed("shuffle", epoch as u64));
        let mut epoch_loss = 0.0;
        for chunk_ids in order.chunks(cfg.batch_size) {
            let wm = WorldModel::from_params(params.clone());
            let pn = ProgressNet::from_params(params.clone());
            let b = chunk_ids.len();
            let mut onehot = Vec::with_capacity(b * NUM_TASKS);
            let mut f0 = Vec::with_capacity(b * FEATURE_DIM);
            let mut ft = Vec::with_capacity(b * FEATURE_DIM);
            let mut fnext = Vec::with_capacity(b * FEATURE_DIM);
            let mut label_t = Vec::with_capacity(b);
            let mut label_n = Vec::with_capacity(b);
            for &i in chunk_ids {
                let (d, t) = items[i];
                let demo = &data.demos[d];
                onehot.extend_from_slice(demo.instruction.embedding.data());
                f0.extend_from_slice(&data.features[d][0]);
                ft.extend_from_slice(&data.features[d][t]);
                fnext.extend_from_slice(&data.features[d][t + cfg.chunk]);
                label_t.push(t as f64 / demo.len() as f64);
                label_n.push((t + cfg.chunk) as f64 / demo.len() as f64);
            }
            let mut step_rng = rng.child_indexed("draws", step as u64);
            let eta = step_rng.normal_vec(b * LATENT_DIM);
            let batch = JointBatch {
                onehot: Tensor::matrix(b, NUM_TASKS, onehot)?,
                f0: Tensor::matrix(b, FEATURE_DIM, f0)?,
                ft: Tensor::matrix(b, FEATURE_DIM, ft)?,
                fnext: Tensor::matrix(b, FEATURE_DIM, fnext)?,
                eta: Tensor::matrix(b, LATENT_DIM, eta)?,
                label_t: Tensor::matrix(b, 1, label_t)?,
                label_next: Tensor::matrix(b, 1, label_n.clone())?,
            };

            let mut g = Graph::new();
            let nodes = ft_loss_graph(&mut g, &wm, &pn, &batch, cfg.beta_kl)?;

            // noise-aware evaluator term: renoise the posterior sample to a
            // random step and supervise the τ-conditioned composition
            let mut taus = Vec::with_capacity(b);
            let mut scale_rows = Vec::with_capacity(b * LATENT_DIM);
            let mut noise_rows = Vec::with_capacity(b * LATENT_DIM);
            for _ in 0..b {
                let tau = step_rng.below(sched.steps() + 1);
                let a = sched.alpha_bar(tau).sqrt();
                let s = sched.sigma(tau);
                taus.push(tau);
                for _ in 0..LATENT_DIM {
                    scale_rows.push(a);
                    noise_rows.push(s * step_rng.standard_normal());
                }
            }
            let scale = g.input(Tensor::matrix(b, LATENT_DIM, scale_rows)?)?;
            let noise = g.input(Tensor::matrix(b, LATENT_DIM, noise_rows)?)?;
            let scaled = g.mul(nodes.sample, scale)?;
            let x_tau = g.add(scaled, noise)?;
            let pred_noisy = wm.decode_future_graph(&mut g, nodes.ft, x_tau, Some(&taus))?;
            let p_noisy = pn.score_graph(&mut g, nodes.onehot, nodes.f0, pred_noisy)?;
            let l_noisy = pn.l1_loss_graph(&mut g, p_noisy, &Tensor::matrix(b, 1, label_n)?)?;
            let total = g.add(nodes.total, l_noisy)?;

            let v = g.value(total).item()?;
            let bw = g.backward(total)?;
            let grads = g.param_grads(&bw)?;
            opt.step(&mut params, &grads)?;
            stats.step_losses.push(v);
            epoch_loss += v;
            step += 1;
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        if epoch == 0 {
            stats.first_epoch_loss = mean;
        }
        stats.last_epoch_loss = mean;
    }
    let world = WorldModel::from_params(params.filter_prefix("wm."));
    let prog = ProgressNet::from_params(params.filter_prefix("prog."));
    Ok((world, prog, stats))
}

// ── policy pretraining ────────────────────────────────────────────────────

pub struct PolicyTrainOutput {
    pub nets: PolicyNets,
    pub latent_stats: TrainStats,
    pub action_stats: TrainStats,
    /// Clean standardized latents of the training chunks (for marginal
    /// checks downstream).
    pub train_latents: Vec<Vec<f64>>,
}

pub fn train_policy(
    cfg: &RunConfig,
    data: &DemoSet,
    world: &WorldModel,
) -> Result<PolicyTrainOutput, PipelineError> {
    let rng = StreamRng::from_seed(cfg.seed).child("train-policy");

    // posterior-mean latents per chunk transition
    let mut raw_latents: Vec<Vec<f64>> = Vec::new();
    let mut conds: Vec<Vec<f64>> = Vec::new();
    let mut action_targets: Vec<Vec<f64>> = Vec::new();
    for (d, demo) in data.demos.iter().enumerate() {
        let mut t = 0;
        while t + cfg.chunk <= demo.len() {
            let (mean, _) = world.posterior(&data.features[d][t], &data.features[d][t + cfg.chunk])?;
            raw_latents.push(mean);
            let mut cond = Vec::with_capacity(COND_DIM);
            cond.extend_from_slice(demo.instruction.embedding.data());
            cond.extend_from_slice(&data.features[d][t]);
            conds.push(cond);
            action_targets.push(crate::policy::encode_action_chunk(&demo.actions[t..t + cfg.chunk]));
            t += cfg.chunk;
        }
    }
    let norm = LatentNormalizer::fit(&raw_latents)?;
    let latents: Vec<Vec<f64>> = raw_latents.iter().map(|z| norm.normalize(z)).collect();

    let sched_z = NoiseSchedule::build(Clock::Latent);
    let sched_a = NoiseSchedule::build(Clock::Action);

    // latent expert
    let mut latent_net = LatentDenoiser::init(&mut rng.child("init-latent"));
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut latent_stats = TrainStats::default();
    for epoch in 0..cfg.epochs_policy {
        let order = deterministic_shuffle(latents.len(), &mut rng.child_indexed("shuffle-z", epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (bi, chunk_ids) in order.chunks(cfg.batch_size).enumerate() {
            let x0: Vec<Vec<f64>> = chunk_ids.iter().map(|&i| latents[i].clone()).collect();
            let cond: Vec<Vec<f64>> = chunk_ids.iter().map(|&i| conds[i].clone()).collect();
            let mut brng = rng.child_indexed("zbatch", (epoch * 10_000 + bi) as u64);
            let batch = make_latent_diff_batch(&x0, &cond, &sched_z, &mut brng)?;
            let mut g = Graph::new();
            let loss = denoise_loss_graph(&mut g, &batch, Some(&latent_net), None)?;
            let v = g.value(loss).item()?;
            let bw = g.backward(loss)?;
            let grads = g.param_grads(&bw)?;
            opt.step(&mut latent_net.params, &grads)?;
            latent_stats.step_losses.push(v);
            epoch_loss += v;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        if epoch == 0 {
            latent_stats.first_epoch_loss = mean;
        }
        latent_stats.last_epoch_loss = mean;
    }

    // action decoder
    let mut action_net = ActionDenoiser::init(&mut rng.child("init-action"));
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut action_stats = TrainStats::default();
    for epoch in 0..cfg.epochs_policy {
        let order = deterministic_shuffle(latents.len(), &mut rng.child_indexed("shuffle-a", epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (bi, chunk_ids) in order.chunks(cfg.batch_size).enumerate() {
            let xa0: Vec<Vec<f64>> = chunk_ids.iter().map(|&i| action_targets[i].clone()).collect();
            let z0: Vec<Vec<f64>> = chunk_ids.iter().map(|&i| latents[i].clone()).collect();
            let cond: Vec<Vec<f64>> = chunk_ids.iter().map(|&i| conds[i].clone()).collect();
            let mut brng = rng.child_indexed("abatch", (epoch * 10_000 + bi) as u64);
            let batch = make_action_diff_batch(&xa0, &z0, &cond, &sched_a, &sched_z, &mut brng)?;
            let mut g = Graph::new();
            let loss = denoise_loss_graph(&mut g, &batch, None, Some(&action_net))?;
            let v = g.value(loss).item()?;
            let bw = g.backward(loss)?;
            let grads = g.param_grads(&bw)?;
            opt.step(&mut action_net.params, &grads)?;
            action_stats.step_losses.push(v);
            epoch_loss += v;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        if epoch == 0 {
            action_stats.first_epoch_loss = mean;
        }
        action_stats.last_epoch_loss = mean;
    }

    Ok(PolicyTrainOutput {
        nets: PolicyNets::from_parts(latent_net, action_net, norm),
        latent_stats,
        action_stats,
        train_latents: latents,
    })
}

// ── full stack ────────────────────────────────────────────────────────────

pub struct TrainedStack {
    pub encoder: Encoder,
    pub world: WorldModel,
    pub prog: ProgressNet,
    pub policy: PolicyNets,
}

impl TrainedStack {
    pub fn evaluator(&self) -> Evaluator<'_> {
        Evaluator { wm: &self.world, prog: &self.prog, norm: &self.policy.norm }
    }
}

pub struct PipelineReports {
    pub world: TrainStats,
    pub progress: TrainStats,
    pub joint: TrainStats,
    pub latent: TrainStats,
    pub action: TrainStats,
    pub train_latents: Vec<Vec<f64>>,
}

/// Demos → world → progress → joint finetune → policy, in the paper's stage
/// order (policy latents come from the finetuned world model).
pub fn train_stack(cfg: &RunConfig) -> Result<(TrainedStack, PipelineReports), PipelineError> {
    let encoder = Encoder::frozen();
    let demos = make_demos(cfg)?;
    let data = DemoSet::encode(&encoder, demos)?;
    let (world0, world_stats) = train_world(cfg, &data)?;
    let (prog0, prog_stats) = train_progress(cfg, &data)?;
    let (world, prog, joint_stats) = joint_finetune(cfg, &data, &world0, &prog0)?;
    let out = train_policy(cfg, &data, &world)?;
    let stack = TrainedStack { encoder, world, prog, policy: out.nets };
    let reports = PipelineReports {
        world: world_stats,
        progress: prog_stats,
        joint: joint_stats,
        latent: out.latent_stats,
        action: out.action_stats,
        train_latents: out.train_latents,
    };
    Ok((stack, reports))
}

// ── rollouts, evaluation, RL round ────────────────────────────────────────

/// Collect rollouts and aggregate the metric suite.
pub fn rollout_eval(
    cfg: &RunConfig,
    stack: &TrainedStack,
    guidance: &GuidanceConfig,
    episodes: usize,
    label: &str,
) -> Result<(RolloutBuffer, EvalReport), PipelineError> {
    let eval = stack.evaluator();
    let buffer = collect_rollouts(
        &stack.policy,
        &eval,
        &stack.encoder,
        episodes,
        guidance,
        cfg.seed,
        label,
    )?;
    let fingerprint = format!("{}:{}:{}", cfg.fingerprint(), label, guidance_tag(guidance));
    let report = crate::evalkit::rollout_metrics(
        &buffer.records(),
        cfg.stop_window,
        cfg.stop_threshold,
        &fingerprint,
    )?;
    Ok((buffer, report))
}

pub fn guidance_tag(g: &GuidanceConfig) -> &'static str {
    match g.mode {
        GuidanceMode::Off => "off",
        GuidanceMode::MeanSpace => "mean",
        GuidanceMode::EpsilonSpace => "eps",
    }
}

pub struct RlRoundReports {
    pub estimator: EstimatorFinetuneReport,
    pub policy: PolicyFinetuneReport,
    pub buffer_successes: usize,
    pub buffer_episodes: usize,
}

/// One RL round: collect a buffer with the configured guidance, finetune the
/// estimator on it (L_prog + L_mono), then distill guided targets into the
/// latent expert under the finetuned evaluator.
pub fn rl_finetune(
    cfg: &RunConfig,
    stack: &TrainedStack,
    buffer: &RolloutBuffer,
) -> Result<(TrainedStack, RlRoundReports), PipelineError> {
    let (prog2, est_report) = finetune_estimator(
        &stack.prog,
        buffer,
        &stack.encoder,
        cfg.delta,
        cfg.epochs_estimator_ft,
        cfg.lr,
    )?;
    let eval2 = Evaluator { wm: &stack.world, prog: &prog2, norm: &stack.policy.norm };
    let (latent2, pol_report) = finetune_policy(
        &stack.policy,
        &eval2,
        buffer,
        cfg.alpha,
        cfg.epochs_distill,
        cfg.batch_size,
        cfg.lr,
        cfg.seed,
    )?;
    let new_stack = TrainedStack {
        encoder: stack.encoder.clone(),
        world: WorldModel::from_params(stack.world.params.clone()),
        prog: prog2,
        policy: PolicyNets::from_parts(
            latent2,
            ActionDenoiser::from_params(stack.policy.action.params.clone()),
            stack.policy.norm.clone(),
        ),
    };
    let reports = RlRoundReports {
        estimator: est_report,
        policy: pol_report,
        buffer_successes: buffer.success_count(),
        buffer_episodes: buffer.episodes.len(),
    };
    Ok((new_stack, reports))
}

// ── held-out quality probes ───────────────────────────────────────────────

/// Estimator quality on held-out demos: mean per-demo MAE against t/T and
/// mean per-demo Pearson (degenerate episodes skipped).
pub fn estimator_quality(
    prog: &ProgressNet,
    data: &DemoSet,
) -> Result<(f64, f64), PipelineError> {
    let mut maes = Vec::new();
    let mut pearsons = Vec::new();
    for (d, demo) in data.demos.iter().enumerate() {
        let frames = demo.len() + 1;
        let mut preds = Vec::with_capacity(frames);
        let mut labels = Vec::with_capacity(frames);
        for t in 0..frames {
            preds.push(prog.estimate(
                demo.instruction.embedding.data(),
                &data.features[d][0],
                &data.features[d][t],
            )?);
            labels.push(t as f64 / demo.len() as f64);
        }
        maes.push(crate::evalkit::mae(&preds, &labels)?);
        if let Ok(r) = crate::evalkit::pearson_r(&preds, &labels) {
            pearsons.push(r);
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok((avg(&maes), avg(&pearsons)))
}

/// Reconstruction error split into identity transitions (hold segments) and
/// moving transitions, on held-out demos.
pub fn world_recon_split(
    world: &WorldModel,
    data: &DemoSet,
) -> Result<(f64, f64), PipelineError> {
    let mut id_errs = Vec::new();
    let mut mv_errs = Vec::new();
    for (d, demo) in data.demos.iter().enumerate() {
        let mut t = 0;
        while t + CHUNK <= demo.len() {
            let f_t = &data.features[d][t];
            let f_n = &data.features[d][t + CHUNK];
            let (mean, _) = world.posterior(f_t, f_n)?;
            let pred = world.decode_future(f_t, &mean)?;
            let err: f64 = pred.iter().zip(f_n).map(|(a, b)| (a - b).powi(2)).sum();
            if demo.observations[t] == demo.observations[t + CHUNK] {
                id_errs.push(err);
            } else {
                mv_errs.push(err);
            }
            t += CHUNK;
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok((avg(&id_errs), avg(&mv_errs)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse_kv(&cfg.to_kv_text()).unwrap();
        assert_eq!(cfg, parsed);
        assert!(RunConfig::parse_kv("bogus_key=3\n").is_err());
        assert!(RunConfig::parse_kv("guidance=sideways\n").is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn flag_style_overrides_apply() {
        let mut cfg = RunConfig::parse_kv("demos=40\nepochs_world=2\n").unwrap();
        cfg.set("s", "12.5").unwrap();
        assert_eq!(cfg.demos, 40);
        assert_eq!(cfg.strength, 12.5);
    }

    #[test]
    fn guidance_config_selection() {
        let mut cfg = RunConfig::default();
        assert!(!cfg.guidance_config().is_active());
        cfg.set("guidance", "eps").unwrap();
        assert!(cfg.guidance_config().is_active());
        cfg.set("guidance", "mean").unwrap();
        assert_eq!(cfg.guidance_config().mode, GuidanceMode::MeanSpace);
    }
}
