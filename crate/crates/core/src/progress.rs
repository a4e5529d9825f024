//! Progress estimator, time-proxy labels, joint world-model-coupled losses,
//! and anomaly-mining monotonicity machinery.

use thiserror::Error;

use crate::encoder::FEATURE_DIM;
use crate::numkernel::{
    Activation, Graph, KernelError, Mlp, MlpSpec, ParamSet, StreamRng, Tensor, ValueId,
};
use crate::pushworld::NUM_TASKS;
use crate::worldmodel::{WorldModel, WorldModelError};

/// Margin δ for anomaly mining and the monotonicity hinge.
pub const ANOMALY_MARGIN: f64 = 0.05;
const HIDDEN: usize = 128;
/// Input: instruction one-hot ++ F_0 ++ F_t.
const INPUT_DIM: usize = NUM_TASKS + 2 * FEATURE_DIM;

#[derive(Debug, Error)]
pub enum ProgressError {
    #[error("input has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label arguments out of range: t={t}, total={total}")]
    InvalidRange { t: usize, total: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("sequence too short for mining (len {0})")]
    TooShort(usize),
    #[error("anomaly set is inconsistent with the sequence")]
    MismatchedInputs,
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    World(#[from] WorldModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    TimeProxy,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgressLabel {
    pub value: f64,
    pub source: LabelSource,
}

/// p* = t/T, the normalized-timestep proxy label.
pub fn make_label(t: usize, total: usize) -> Result<ProgressLabel, ProgressError> {
    if total == 0 || t > total {
        return Err(ProgressError::InvalidRange { t, total });
    }
    Ok(ProgressLabel { value: t as f64 / total as f64, source: LabelSource::TimeProxy })
}

/// L_prog = mean |p − p*| over aligned slices.
pub fn progress_loss(predictions: &[f64], labels: &[f64]) -> Result<f64, ProgressError> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(ProgressError::EmptyBatch);
    }
    let sum: f64 = predictions.iter().zip(labels).map(|(p, l)| (p - l).abs()).sum();
    Ok(sum / predictions.len() as f64)
}

#[derive(Debug, Clone)]
pub struct ProgressNet {
    pub params: ParamSet,
    net: Mlp,
}

impl ProgressNet {
    fn spec() -> Mlp {
        Mlp::new(
            "prog",
            MlpSpec {
                in_dim: INPUT_DIM,
                hidden: vec![HIDDEN, HIDDEN],
                out_dim: 1,
                hidden_act: Activation::Tanh,
                out_act: Activation::Sigmoid,
                final_scale: 1.0,
            },
        )
    }

    pub fn init(rng: &mut StreamRng) -> Self {
        let net = Self::spec();
        let mut params = ParamSet::new();
        net.init(&mut params, &mut rng.child("prog")).expect("init prog");
        ProgressNet { params, net }
    }

    pub fn from_params(params: ParamSet) -> Self {
        ProgressNet { params, net: Self::spec() }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.net.param_names()
    }

    fn input_row(onehot: &[f64], f0: &[f64], ft: &[f64]) -> Result<Vec<f64>, ProgressError> {
        if onehot.len() != NUM_TASKS || f0.len() != FEATURE_DIM || ft.len() != FEATURE_DIM {
            return Err(ProgressError::DimensionMismatch {
                expected: INPUT_DIM,
                got: onehot.len() + f0.len() + ft.len(),
            });
        }
        let mut row = Vec::with_capacity(INPUT_DIM);
        row.extend_from_slice(onehot);
        row.extend_from_slice(f0);
        row.extend_from_slice(ft);
        Ok(row)
    }

    /// p = P(l, F_0, F_t), strictly in (0, 1).
    pub fn estimate(&self, onehot: &[f64], f0: &[f64], ft: &[f64]) -> Result<f64, ProgressError> {
        let row = Self::input_row(onehot, f0, ft)?;
        Ok(self.net.eval(&self.params, &row)?[0])
    }

    /// Tape version over `[B × K]`, `[B × d_F]`, `[B × d_F]` nodes → `[B × 1]`.
    /// The third argument may be any feature-shaped node (e.g. a decoded
    /// future), which is what makes the score differentiable through D.
    pub fn score_graph(
        &self,
        g: &mut Graph,
        onehot: ValueId,
        f0: ValueId,
        ft: ValueId,
    ) -> Result<ValueId, ProgressError> {
        let input = g.concat_cols(&[onehot, f0, ft])?;
        Ok(self.net.forward(g, &self.params, input)?)
    }

    /// Tape forward over pre-assembled input rows `[B × (K + 2·d_F)]`.
    pub fn net_forward(&self, g: &mut Graph, input: ValueId) -> Result<ValueId, ProgressError> {
        Ok(self.net.forward(g, &self.params, input)?)
    }

    /// L_prog on the tape: mean |p − p*| with constant labels `[B × 1]`.
    pub fn l1_loss_graph(
        &self,
        g: &mut Graph,
        predictions: ValueId,
        labels: &Tensor,
    ) -> Result<ValueId, ProgressError> {
        if labels.numel() == 0 {
            return Err(ProgressError::EmptyBatch);
        }
        let lab = g.input(labels.clone())?;
        Ok(g.mae_all(predictions, lab)?)
    }
}

/// p_{t+N} = P(l, F_0, D(F_t, a^z)) — the estimator applied to the world
/// model's imagined future.
pub fn joint_progress(
    prog: &ProgressNet,
    wm: &WorldModel,
    onehot: &[f64],
    f0: &[f64],
    ft: &[f64],
    z: &[f64],
) -> Result<f64, ProgressError> {
    let future = wm.decode_future(ft, z)?;
    prog.estimate(onehot, f0, &future)
}

/// Tape version of [`joint_progress`] for a batch; differentiable in `z`.
pub fn joint_progress_graph(
    prog: &ProgressNet,
    wm: &WorldModel,
    g: &mut Graph,
    onehot: ValueId,
    f0: ValueId,
    ft: ValueId,
    z: ValueId,
) -> Result<ValueId, ProgressError> {
    let future = wm.decode_future_graph(g, ft, z, None)?;
    prog.score_graph(g, onehot, f0, future)
}

/// One aligned joint-finetune batch. All rows index the same transitions.
pub struct JointBatch {
    pub onehot: Tensor,     // [B × K]
    pub f0: Tensor,         // [B × d_F]
    pub ft: Tensor,         // [B × d_F]
    pub fnext: Tensor,      // [B × d_F]
    pub eta: Tensor,        // [B × d_z]
    pub label_t: Tensor,    // [B × 1] p* at t
    pub label_next: Tensor, // [B × 1] p* at t+N
}

pub struct FtLossNodes {
    pub total: ValueId,
    pub world: ValueId,
    pub prog: ValueId,
    pub joint: ValueId,
    /// Posterior sample node, reusable for the noise-conditioned term.
    pub sample: ValueId,
    pub onehot: ValueId,
    pub f0: ValueId,
    pub ft: ValueId,
}

/// L_ft = L_world + L_prog + L_joint (unit weights).
pub fn ft_loss_graph(
    g: &mut Graph,
    wm: &WorldModel,
    prog: &ProgressNet,
    batch: &JointBatch,
    beta_kl: f64,
) -> Result<FtLossNodes, ProgressError> {
    if batch.onehot.rows() == 0 {
        return Err(ProgressError::EmptyBatch);
    }
    let onehot = g.input(batch.onehot.clone())?;
    let f0 = g.input(batch.f0.clone())?;
    let ft = g.input(batch.ft.clone())?;
    let fnext = g.input(batch.fnext.clone())?;
    let eta = g.input(batch.eta.clone())?;

    let (world_nodes, sample, pred) = wm.world_loss_nodes(g, ft, fnext, eta, beta_kl)?;
    let p_t = prog.score_graph(g, onehot, f0, ft)?;
    let l_prog = prog.l1_loss_graph(g, p_t, &batch.label_t)?;
    let p_next = prog.score_graph(g, onehot, f0, pred)?;
    let l_joint = prog.l1_loss_graph(g, p_next, &batch.label_next)?;

    let partial = g.add(world_nodes.loss, l_prog)?;
    let total = g.add(partial, l_joint)?;
    Ok(FtLossNodes {
        total,
        world: world_nodes.loss,
        prog: l_prog,
        joint: l_joint,
        sample,
        onehot,
        f0,
        ft,
    })
}

// ── anomaly mining (monotonicity of progress on success episodes) ────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Anomaly {
    pub t: usize,
    /// argmin_{k>t} p̂_k (first occurrence on ties).
    pub t_prime: usize,
}

/// Mark t as anomalous iff p̂_t > p̂_{t'} + δ where t' is the index of the
/// smallest later prediction. O(T) via a suffix minimum.
pub fn mine_anomalies(seq: &[f64], delta: f64) -> Result<Vec<Anomaly>, ProgressError> {
    if seq.len() < 2 {
        return Err(ProgressError::TooShort(seq.len()));
    }
    let n = seq.len();
    // suffix_min[t] = (value, index) of the min over k >= t, leftmost on ties
    let mut suffix: Vec<(f64, usize)> = vec![(0.0, 0); n];
    suffix[n - 1] = (seq[n - 1], n - 1);
    for t in (0..n - 1).rev() {
        let (mv, mi) = suffix[t + 1];
        suffix[t] = if seq[t] <= mv { (seq[t], t) } else { (mv, mi) };
    }
    let mut out = Vec::new();
    for t in 0..n - 1 {
        let (mv, mi) = suffix[t + 1];
        if seq[t] > mv + delta {
            out.push(Anomaly { t, t_prime: mi });
        }
    }
    Ok(out)
}

/// L_mono = Σ_{t ∈ anomalies} max(0, δ − (p̂_{t'} − p̂_t)). Zero iff the
/// anomaly set is empty.
pub fn monotonicity_loss(
    seq: &[f64],
    anomalies: &[Anomaly],
    delta: f64,
) -> Result<f64, ProgressError> {
    let mut loss = 0.0;
    for a in anomalies {
        if a.t >= seq.len() || a.t_prime >= seq.len() || a.t_prime <= a.t {
            return Err(ProgressError::MismatchedInputs);
        }
        loss += (delta - (seq[a.t_prime] - seq[a.t])).max(0.0);
    }
    Ok(loss)
}

/// Tape version of the hinge over a `[T × 1]` prediction column. The anomaly
/// index pairs are baked into a constant selection matrix, so gradients flow
/// into both p̂_t and p̂_{t'}.
pub fn monotonicity_loss_graph(
    g: &mut Graph,
    predictions: ValueId,
    anomalies: &[Anomaly],
    delta: f64,
) -> Result<ValueId, ProgressError> {
    let rows = g.value(predictions).rows();
    if anomalies.is_empty() {
        return Ok(g.input(Tensor::scalar(0.0)?)?);
    }
    let mut sel = vec![0.0; anomalies.len() * rows];
    for (i, a) in anomalies.iter().enumerate() {
        if a.t >= rows || a.t_prime >= rows || a.t_prime <= a.t {
            return Err(ProgressError::MismatchedInputs);
        }
        sel[i * rows + a.t_prime] = 1.0;
        sel[i * rows + a.t] = -1.0;
    }
    let sel = g.input(Tensor::matrix(anomalies.len(), rows, sel)?)?;
    let diffs = g.matmul(sel, predictions)?; // [n_anom × 1] of p̂_{t'} − p̂_t
    let neg = g.scale(diffs, -1.0)?;
    let shifted = g.add_scalar(neg, delta)?;
    let hinge = g.relu(shifted)?;
    Ok(g.sum_all(hinge)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::fdcheck::{central_diff_grad, max_rel_error};
    use crate::worldmodel::LATENT_DIM;
    use proptest::prelude::*;

    fn net(seed: u64) -> ProgressNet {
        ProgressNet::init(&mut StreamRng::from_seed(seed))
    }

    fn onehot(task: usize) -> Vec<f64> {
        let mut v = vec![0.0; NUM_TASKS];
        v[task] = 1.0;
        v
    }

    #[test]
    fn estimate_is_strictly_inside_unit_interval() {
        let p = net(1);
        let mut rng = StreamRng::from_seed(2);
        for i in 0..20 {
            let f0: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let ft: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let v = p.estimate(&onehot(i % NUM_TASKS), &f0, &ft).unwrap();
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn estimate_rejects_bad_dims() {
        let p = net(1);
        assert!(matches!(
            p.estimate(&[1.0], &[0.0; FEATURE_DIM], &[0.0; FEATURE_DIM]),
            Err(ProgressError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn time_proxy_labels() {
        assert_eq!(make_label(0, 40).unwrap().value, 0.0);
        assert_eq!(make_label(40, 40).unwrap().value, 1.0);
        assert_eq!(make_label(10, 40).unwrap().value, 0.25);
        assert_eq!(make_label(10, 40).unwrap().source, LabelSource::TimeProxy);
        assert!(matches!(make_label(5, 0), Err(ProgressError::InvalidRange { .. })));
        assert!(matches!(make_label(41, 40), Err(ProgressError::InvalidRange { .. })));
    }

    #[test]
    fn l1_loss_cases() {
        assert_eq!(progress_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((progress_loss(&[0.6], &[0.5]).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(progress_loss(&[], &[]), Err(ProgressError::EmptyBatch)));
    }

    #[test]
    fn score_graph_matches_eval_with_identity_decode_standin() {
        // composing with an identity D must reproduce estimate() exactly
        let p = net(3);
        let mut rng = StreamRng::from_seed(4);
        let f0: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let ft: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let oh = onehot(2);
        let direct = p.estimate(&oh, &f0, &ft).unwrap();

        let mut g = Graph::new();
        let ohid = g.input(Tensor::matrix(1, NUM_TASKS, oh.clone()).unwrap()).unwrap();
        let f0id = g.input(Tensor::matrix(1, FEATURE_DIM, f0.clone()).unwrap()).unwrap();
        let ftid = g.input(Tensor::matrix(1, FEATURE_DIM, ft.clone()).unwrap()).unwrap();
        let score = p.score_graph(&mut g, ohid, f0id, ftid).unwrap();
        assert!((g.value(score).data()[0] - direct).abs() < 1e-6);
    }

    #[test]
    fn joint_progress_gradient_wrt_latent_matches_fd() {
        let p = net(5);
        let wm = WorldModel::init(&mut StreamRng::from_seed(6));
        let mut rng = StreamRng::from_seed(7);
        let f0: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.uniform_in(-0.8, 0.8)).collect();
        let ft: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.uniform_in(-0.8, 0.8)).collect();
        let oh = onehot(0);
        let z0 = Tensor::matrix(1, LATENT_DIM, rng.normal_vec(LATENT_DIM)).unwrap();

        let analytic = {
            let mut g = Graph::new();
            let ohid = g.input(Tensor::matrix(1, NUM_TASKS, oh.clone()).unwrap()).unwrap();
            let f0id = g.input(Tensor::matrix(1, FEATURE_DIM, f0.clone()).unwrap()).unwrap();
            let ftid = g.input(Tensor::matrix(1, FEATURE_DIM, ft.clone()).unwrap()).unwrap();
            let zid = g.input(z0.clone()).unwrap();
            let score = joint_progress_graph(&p, &wm, &mut g, ohid, f0id, ftid, zid).unwrap();
            let s = g.sum_all(score).unwrap();
            let bw = g.backward(s).unwrap();
            bw.grad_of(&g, zid).unwrap()
        };
        let numeric = central_diff_grad(
            |z| joint_progress(&p, &wm, &oh, &f0, &ft, z.data()).unwrap(),
            &z0,
            1e-5,
        );
        let err = max_rel_error(&analytic, &numeric, 1e-8);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn joint_progress_stays_in_unit_interval() {
        let p = net(8);
        let wm = WorldModel::init(&mut StreamRng::from_seed(9));
        let mut rng = StreamRng::from_seed(10);
        for task in 0..NUM_TASKS {
            let f0: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let ft: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let z = rng.normal_vec(LATENT_DIM);
            let v = joint_progress(&p, &wm, &onehot(task), &f0, &ft, &z).unwrap();
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn ft_loss_sums_components() {
        let p = net(11);
        let wm = WorldModel::init(&mut StreamRng::from_seed(12));
        let mut rng = StreamRng::from_seed(13);
        let b = 3;
        let batch = JointBatch {
            onehot: Tensor::matrix(b, NUM_TASKS, (0..b).flat_map(|i| onehot(i % NUM_TASKS)).collect()).unwrap(),
            f0: Tensor::matrix(b, FEATURE_DIM, (0..b * FEATURE_DIM).map(|_| rng.uniform_in(-0.5, 0.5)).collect()).unwrap(),
            ft: Tensor::matrix(b, FEATURE_DIM, (0..b * FEATURE_DIM).map(|_| rng.uniform_in(-0.5, 0.5)).collect()).unwrap(),
            fnext: Tensor::matrix(b, FEATURE_DIM, (0..b * FEATURE_DIM).map(|_| rng.uniform_in(-0.5, 0.5)).collect()).unwrap(),
            eta: Tensor::matrix(b, LATENT_DIM, rng.normal_vec(b * LATENT_DIM)).unwrap(),
            label_t: Tensor::matrix(b, 1, vec![0.2, 0.5, 0.8]).unwrap(),
            label_next: Tensor::matrix(b, 1, vec![0.4, 0.7, 1.0]).unwrap(),
        };
        let mut g = Graph::new();
        let nodes = ft_loss_graph(&mut g, &wm, &p, &batch, 1e-3).unwrap();
        let total = g.value(nodes.total).item().unwrap();
        let parts = g.value(nodes.world).item().unwrap()
            + g.value(nodes.prog).item().unwrap()
            + g.value(nodes.joint).item().unwrap();
        assert!((total - parts).abs() < 1e-12);
    }

    #[test]
    fn mining_matches_hand_worked_examples() {
        assert!(mine_anomalies(&[0.1, 0.2, 0.3], 0.05).unwrap().is_empty());

        let found = mine_anomalies(&[0.5, 0.2, 0.6], 0.05).unwrap();
        assert_eq!(found, vec![Anomaly { t: 0, t_prime: 1 }]);

        let found = mine_anomalies(&[0.9, 0.5, 0.1], 0.05).unwrap();
        assert_eq!(found, vec![Anomaly { t: 0, t_prime: 2 }, Anomaly { t: 1, t_prime: 2 }]);

        assert!(matches!(mine_anomalies(&[0.5], 0.05), Err(ProgressError::TooShort(1))));
    }

    #[test]
    fn monotonicity_loss_hand_case() {
        // p̂_t = 0.5, p̂_{t'} = 0.2, δ = 0.05 → max(0, 0.05 − (0.2 − 0.5)) = 0.35
        let seq = [0.5, 0.2];
        let anomalies = mine_anomalies(&seq, 0.05).unwrap();
        assert_eq!(anomalies, vec![Anomaly { t: 0, t_prime: 1 }]);
        let loss = monotonicity_loss(&seq, &anomalies, 0.05).unwrap();
        assert!((loss - 0.35).abs() < 1e-15);
        assert_eq!(monotonicity_loss(&seq, &[], 0.05).unwrap(), 0.0);
    }

    #[test]
    fn monotonicity_loss_graph_matches_plain() {
        let seq = vec![0.7, 0.2, 0.65, 0.3, 0.9];
        let anomalies = mine_anomalies(&seq, ANOMALY_MARGIN).unwrap();
        assert!(!anomalies.is_empty());
        let plain = monotonicity_loss(&seq, &anomalies, ANOMALY_MARGIN).unwrap();
        let mut g = Graph::new();
        let pred = g.input(Tensor::matrix(seq.len(), 1, seq.clone()).unwrap()).unwrap();
        let node = monotonicity_loss_graph(&mut g, pred, &anomalies, ANOMALY_MARGIN).unwrap();
        assert!((g.value(node).item().unwrap() - plain).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn positive_loss_implies_anomaly_and_terms_exceed_margin(
            seq in proptest::collection::vec(0.0f64..1.0, 2..40),
        ) {
            let anomalies = mine_anomalies(&seq, ANOMALY_MARGIN).unwrap();
            let loss = monotonicity_loss(&seq, &anomalies, ANOMALY_MARGIN).unwrap();
            if loss > 0.0 {
                prop_assert!(!anomalies.is_empty());
            }
            if anomalies.is_empty() {
                prop_assert_eq!(loss, 0.0);
            }
            for a in &anomalies {
                let term = ANOMALY_MARGIN - (seq[a.t_prime] - seq[a.t]);
                prop_assert!(term > ANOMALY_MARGIN);
            }
        }

        #[test]
        fn mining_agrees_with_quadratic_brute_force(
            seq in proptest::collection::vec(0.0f64..1.0, 2..30),
        ) {
            let fast = mine_anomalies(&seq, ANOMALY_MARGIN).unwrap();
            let mut brute = Vec::new();
            for t in 0..seq.len() - 1 {
                let mut best = (f64::INFINITY, 0usize);
                for k in t + 1..seq.len() {
                    if seq[k] < best.0 {
                        best = (seq[k], k);
                    }
                }
                if seq[t] > best.0 + ANOMALY_MARGIN {
                    brute.push(Anomaly { t, t_prime: best.1 });
                }
            }
            prop_assert_eq!(fast, brute);
        }
    }
}
