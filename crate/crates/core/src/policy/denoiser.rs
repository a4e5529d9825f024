//! Two-clock epsilon predictors and their denoising losses.
//!
//! The latent expert ε_θ^z(x_τ, τ, l, F_t) operates on the standardized
//! latent-action chunk; the action decoder ε_θ^a(x^a_τ, x^z, τ, l, F_t) is
//! additionally conditioned on the (noisy) latent. Both take a sinusoidal
//! step embedding concatenated to the input.

use crate::encoder::FEATURE_DIM;
use crate::numkernel::{
    Activation, Graph, Mlp, MlpSpec, ParamSet, StreamRng, Tensor, ValueId,
};
use crate::pushworld::{Action, NUM_TASKS, CHUNK, V_MAX};
use crate::worldmodel::{time_embedding, LATENT_DIM};

use super::schedule::NoiseSchedule;
use super::PolicyError;

/// Step-embedding width for the policy denoisers.
pub const POLICY_TIME_EMB: usize = 32;
/// Flattened action-chunk dimension (CHUNK × [dx, dy, toggle]).
pub const ACTION_X_DIM: usize = CHUNK * 3;
/// Denoiser conditioning: instruction one-hot ++ F_t.
pub const COND_DIM: usize = NUM_TASKS + FEATURE_DIM;
const HIDDEN: usize = 256;

/// Per-dimension standardization of latent-action chunks; the diffusion
/// variable lives in this normalized space.
#[derive(Debug, Clone)]
pub struct LatentNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentNormalizer {
    pub fn identity() -> Self {
        LatentNormalizer { mean: vec![0.0; LATENT_DIM], std: vec![1.0; LATENT_DIM] }
    }

    pub fn fit(latents: &[Vec<f64>]) -> Result<Self, PolicyError> {
        if latents.is_empty() {
            return Err(PolicyError::EmptyBatch);
        }
        let n = latents.len() as f64;
        let mut mean = vec![0.0; LATENT_DIM];
        for z in latents {
            for (m, v) in mean.iter_mut().zip(z) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; LATENT_DIM];
        for z in latents {
            for i in 0..LATENT_DIM {
                var[i] += (z[i] - mean[i]).powi(2) / n;
            }
        }
        let std = var.iter().map(|v| v.sqrt().max(1e-6)).collect();
        Ok(LatentNormalizer { mean, std })
    }

    pub fn normalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }

    pub fn store(&self, params: &mut ParamSet) {
        params.insert("latnorm.mean", Tensor::vector(self.mean.clone()).unwrap()).unwrap();
        params.insert("latnorm.std", Tensor::vector(self.std.clone()).unwrap()).unwrap();
    }

    pub fn load(params: &ParamSet) -> Result<Self, PolicyError> {
        let mean = params.get("latnorm.mean")?.data().to_vec();
        let std = params.get("latnorm.std")?.data().to_vec();
        Ok(LatentNormalizer { mean, std })
    }
}

fn denoiser_mlp(prefix: &str, x_dim: usize, extra_cond: usize) -> Mlp {
    Mlp::new(
        prefix,
        MlpSpec {
            in_dim: x_dim + extra_cond + POLICY_TIME_EMB + COND_DIM,
            hidden: vec![HIDDEN, HIDDEN, HIDDEN],
            out_dim: x_dim,
            hidden_act: Activation::Tanh,
            out_act: Activation::Linear,
            final_scale: 0.0, // ε̂ ≡ 0 at init, so the initial loss equals E‖ε‖²
        },
    )
}

fn assemble_row(x: &[f64], extra: &[f64], tau: usize, cond: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(x.len() + extra.len() + POLICY_TIME_EMB + cond.len());
    row.extend_from_slice(x);
    row.extend_from_slice(extra);
    row.extend_from_slice(&time_embedding(tau, POLICY_TIME_EMB));
    row.extend_from_slice(cond);
    row
}

/// Latent action expert ε_θ^z.
#[derive(Debug, Clone)]
pub struct LatentDenoiser {
    pub params: ParamSet,
    net: Mlp,
}

impl LatentDenoiser {
    fn mlp() -> Mlp {
        denoiser_mlp("eps_z", LATENT_DIM, 0)
    }

    pub fn init(rng: &mut StreamRng) -> Self {
        let net = Self::mlp();
        let mut params = ParamSet::new();
        net.init(&mut params, &mut rng.child("eps_z")).expect("init eps_z");
        LatentDenoiser { params, net }
    }

    pub fn from_params(params: ParamSet) -> Self {
        LatentDenoiser { params, net: Self::mlp() }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.net.param_names()
    }

    pub fn predict(&self, x: &[f64], tau: usize, cond: &[f64]) -> Result<Vec<f64>, PolicyError> {
        Ok(self.net.eval(&self.params, &assemble_row(x, &[], tau, cond))?)
    }

    /// Batched tape forward: `x` is `[B × d_z]`, one τ and one conditioning
    /// row per batch row.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: ValueId,
        taus: &[usize],
        cond: &Tensor,
    ) -> Result<ValueId, PolicyError> {
        let rows = g.value(x).rows();
        let emb: Vec<f64> = taus.iter().flat_map(|&t| time_embedding(t, POLICY_TIME_EMB)).collect();
        let emb = g.input(Tensor::matrix(rows, POLICY_TIME_EMB, emb)?)?;
        let cond = g.input(cond.clone())?;
        let input = g.concat_cols(&[x, emb, cond])?;
        Ok(self.net.forward(g, &self.params, input)?)
    }
}

/// Action decoder ε_θ^a, conditioned on the latent chunk.
#[derive(Debug, Clone)]
pub struct ActionDenoiser {
    pub params: ParamSet,
    net: Mlp,
}

impl ActionDenoiser {
    fn mlp() -> Mlp {
        denoiser_mlp("eps_a", ACTION_X_DIM, LATENT_DIM)
    }

    pub fn init(rng: &mut StreamRng) -> Self {
        let net = Self::mlp();
        let mut params = ParamSet::new();
        net.init(&mut params, &mut rng.child("eps_a")).expect("init eps_a");
        ActionDenoiser { params, net }
    }

    pub fn from_params(params: ParamSet) -> Self {
        ActionDenoiser { params, net: Self::mlp() }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.net.param_names()
    }

    /// extra_cond is laid out as `[x^a ; x^z ; e_τ ; cond]`.
    pub fn predict(
        &self,
        xa: &[f64],
        latent: &[f64],
        tau: usize,
        cond: &[f64],
    ) -> Result<Vec<f64>, PolicyError> {
        Ok(self.net.eval(&self.params, &assemble_row(xa, latent, tau, cond))?)
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        xa: ValueId,
        latents: &Tensor,
        taus: &[usize],
        cond: &Tensor,
    ) -> Result<ValueId, PolicyError> {
        let rows = g.value(xa).rows();
        let lat = g.input(latents.clone())?;
        let emb: Vec<f64> = taus.iter().flat_map(|&t| time_embedding(t, POLICY_TIME_EMB)).collect();
        let emb = g.input(Tensor::matrix(rows, POLICY_TIME_EMB, emb)?)?;
        let cond = g.input(cond.clone())?;
        let input = g.concat_cols(&[xa, lat, emb, cond])?;
        Ok(self.net.forward(g, &self.params, input)?)
    }
}

/// One denoising-regression batch with everything the loss needs, assembled
/// by the caller: noised samples, per-row steps, conditioning, and targets
/// (the drawn ε for L_diff, or guided targets ε̃ for distillation).
pub struct DenoiseBatch {
    pub x_tau: Tensor,   // [B × d]
    pub taus: Vec<usize>,
    pub cond: Tensor,    // [B × COND_DIM]
    pub targets: Tensor, // [B × d]
    /// Only for the action decoder: conditioning latents [B × d_z].
    pub latents: Option<Tensor>,
}

impl DenoiseBatch {
    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }
}

/// Mean over the batch of ‖target − ε_θ(x_τ, τ, ·)‖². With targets = drawn ε
/// this is L_diff; with guided targets it is the distillation objective.
pub fn denoise_loss_graph(
    g: &mut Graph,
    batch: &DenoiseBatch,
    latent_net: Option<&LatentDenoiser>,
    action_net: Option<&ActionDenoiser>,
) -> Result<ValueId, PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let x = g.input(batch.x_tau.clone())?;
    let pred = match (latent_net, action_net) {
        (Some(net), None) => net.forward_graph(g, x, &batch.taus, &batch.cond)?,
        (None, Some(net)) => {
            let latents = batch.latents.as_ref().ok_or(PolicyError::EmptyBatch)?;
            net.forward_graph(g, x, latents, &batch.taus, &batch.cond)?
        }
        _ => panic!("exactly one denoiser must be supplied"),
    };
    let target = g.input(batch.targets.clone())?;
    Ok(g.mse_rowsum(pred, target)?)
}

/// Draw per-item steps and noise, returning a ready L_diff batch for the
/// latent expert.
pub fn make_latent_diff_batch(
    x0: &[Vec<f64>],
    cond_rows: &[Vec<f64>],
    schedule: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<DenoiseBatch, PolicyError> {
    if x0.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let b = x0.len();
    let mut x_tau = Vec::with_capacity(b * LATENT_DIM);
    let mut targets = Vec::with_capacity(b * LATENT_DIM);
    let mut taus = Vec::with_capacity(b);
    let mut cond = Vec::with_capacity(b * COND_DIM);
    for (z, c) in x0.iter().zip(cond_rows) {
        let tau = 1 + rng.below(schedule.steps());
        let (x, eps) = super::schedule::add_noise(z, tau, schedule, rng)?;
        x_tau.extend_from_slice(&x);
        targets.extend_from_slice(&eps);
        taus.push(tau);
        cond.extend_from_slice(c);
    }
    Ok(DenoiseBatch {
        x_tau: Tensor::matrix(b, LATENT_DIM, x_tau)?,
        taus,
        cond: Tensor::matrix(b, COND_DIM, cond)?,
        targets: Tensor::matrix(b, LATENT_DIM, targets)?,
        latents: None,
    })
}

/// L_diff batch for the action decoder. The conditioning latent is renoised
/// to the latent-clock level τ−1, matching the level it has during stage-2
/// joint denoising.
#[allow(clippy::too_many_arguments)]
pub fn make_action_diff_batch(
    xa0: &[Vec<f64>],
    latents0: &[Vec<f64>],
    cond_rows: &[Vec<f64>],
    action_schedule: &NoiseSchedule,
    latent_schedule: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<DenoiseBatch, PolicyError> {
    if xa0.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let b = xa0.len();
    let mut x_tau = Vec::with_capacity(b * ACTION_X_DIM);
    let mut targets = Vec::with_capacity(b * ACTION_X_DIM);
    let mut taus = Vec::with_capacity(b);
    let mut cond = Vec::with_capacity(b * COND_DIM);
    let mut lat = Vec::with_capacity(b * LATENT_DIM);
    for ((xa, z), c) in xa0.iter().zip(latents0).zip(cond_rows) {
        let tau = 1 + rng.below(action_schedule.steps());
        let (x, eps) = super::schedule::add_noise(xa, tau, action_schedule, rng)?;
        let (zt, _) = super::schedule::add_noise(z, tau - 1, latent_schedule, rng)?;
        x_tau.extend_from_slice(&x);
        targets.extend_from_slice(&eps);
        taus.push(tau);
        cond.extend_from_slice(c);
        lat.extend_from_slice(&zt);
    }
    Ok(DenoiseBatch {
        x_tau: Tensor::matrix(b, ACTION_X_DIM, x_tau)?,
        taus,
        cond: Tensor::matrix(b, COND_DIM, cond)?,
        targets: Tensor::matrix(b, ACTION_X_DIM, targets)?,
        latents: Some(Tensor::matrix(b, LATENT_DIM, lat)?),
    })
}

// ── action chunk codec ────────────────────────────────────────────────────

/// Normalize an executed chunk into diffusion targets: velocities scaled to
/// [−1, 1], toggle kept as −1/0/+1.
pub fn encode_action_chunk(actions: &[Action]) -> Vec<f64> {
    let mut out = Vec::with_capacity(actions.len() * 3);
    for a in actions {
        out.push(a.dx / V_MAX);
        out.push(a.dy / V_MAX);
        out.push(a.toggle as f64);
    }
    out
}

/// Map a clean action-clock sample to executable actions: clip velocities,
/// threshold the gripper channel at ±0.5. Out-of-range values are clipped,
/// never rejected.
pub fn decode_action_chunk(x0: &[f64]) -> Vec<Action> {
    x0.chunks(3)
        .map(|row| {
            let dx = row[0].clamp(-1.0, 1.0) * V_MAX;
            let dy = row.get(1).copied().unwrap_or(0.0).clamp(-1.0, 1.0) * V_MAX;
            let t = row.get(2).copied().unwrap_or(0.0);
            let toggle = if t > 0.5 {
                1
            } else if t < -0.5 {
                -1
            } else {
                0
            };
            Action { dx, dy, toggle }
        })
        .collect()
}
