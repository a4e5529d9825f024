//! Frozen random feature map standing in for pretrained visual features.
//!
//! A two-layer tanh projection with orthogonal-initialized weights, drawn
//! once from a fixed seed and never updated. World model, progress estimator,
//! and evaluator all operate in this shared feature space.

use thiserror::Error;

use crate::numkernel::{matmul_raw, CheckpointHeader, StreamRng, Tensor};
use crate::pushworld::OBS_DIM;

pub const FEATURE_DIM: usize = 64;
pub const ENCODER_SEED: u64 = 7;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("observation has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Feature vector F = φ(o); produced only by [`Encoder::encode`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVec(pub Vec<f64>);

impl FeatureVec {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(1, self.0.len(), self.0.clone()).expect("feature tensor")
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    seed: u64,
    w1: Vec<f64>, // [OBS_DIM × FEATURE_DIM]
    b1: Vec<f64>,
    w2: Vec<f64>, // [FEATURE_DIM × FEATURE_DIM]
    b2: Vec<f64>,
}

impl Encoder {
    /// The canonical frozen encoder (seed 7).
    pub fn frozen() -> Self {
        Encoder::with_seed(ENCODER_SEED)
    }

    pub fn with_seed(seed: u64) -> Self {
        let mut rng = StreamRng::from_seed(seed).child("encoder");
        let w1 = orthogonal_rows(OBS_DIM, FEATURE_DIM, &mut rng);
        let b1 = (0..FEATURE_DIM).map(|_| 0.2 * rng.standard_normal()).collect();
        let w2 = orthogonal_rows(FEATURE_DIM, FEATURE_DIM, &mut rng);
        let b2 = (0..FEATURE_DIM).map(|_| 0.2 * rng.standard_normal()).collect();
        Encoder { seed, w1, b1, w2, b2 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// F = tanh(W₂·tanh(W₁·o + b₁) + b₂). Deterministic; output in (−1, 1).
    pub fn encode(&self, obs: &[f64]) -> Result<FeatureVec, EncoderError> {
        if obs.len() != OBS_DIM {
            return Err(EncoderError::DimensionMismatch { expected: OBS_DIM, got: obs.len() });
        }
        let mut h = matmul_raw(obs, &self.w1, 1, OBS_DIM, FEATURE_DIM);
        for (v, b) in h.iter_mut().zip(&self.b1) {
            *v = (*v + b).tanh();
        }
        let mut out = matmul_raw(&h, &self.w2, 1, FEATURE_DIM, FEATURE_DIM);
        for (v, b) in out.iter_mut().zip(&self.b2) {
            *v = (*v + b).tanh();
        }
        Ok(FeatureVec(out))
    }

    /// Largest observed ‖φ(o)−φ(o′)‖ / ‖o−o′‖ over the given pairs.
    pub fn empirical_lipschitz(&self, pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in pairs {
            let num = l2_diff(self.encode(a).expect("dim").as_slice(), self.encode(b).expect("dim").as_slice());
            let den = l2_diff(a, b);
            if den > 1e-12 {
                worst = worst.max(num / den);
            }
        }
        worst
    }

    /// Record the frozen-encoder identity in a checkpoint header.
    pub fn stamp_header(&self, header: &mut CheckpointHeader) {
        header.set("encoder_seed", &self.seed.to_string());
        header.set("obs_dim", &OBS_DIM.to_string());
        header.set("d_f", &FEATURE_DIM.to_string());
    }

    /// Verify that a checkpoint was produced against this encoder.
    pub fn verify_header(&self, header: &CheckpointHeader) -> Result<(), crate::numkernel::CheckpointError> {
        header.expect("encoder_seed", &self.seed.to_string())?;
        header.expect("obs_dim", &OBS_DIM.to_string())?;
        header.expect("d_f", &FEATURE_DIM.to_string())?;
        Ok(())
    }
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Row-orthonormal `[rows × cols]` matrix (rows ≤ cols): Gaussian draws then
/// modified Gram-Schmidt on the rows.
fn orthogonal_rows(rows: usize, cols: usize, rng: &mut StreamRng) -> Vec<f64> {
    assert!(rows <= cols, "orthogonal_rows needs rows <= cols");
    let mut m: Vec<Vec<f64>> = (0..rows).map(|_| rng.normal_vec(cols)).collect();
    for i in 0..rows {
        for j in 0..i {
            let dot: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
            for k in 0..cols {
                m[i][k] -= dot * m[j][k];
            }
        }
        let norm = m[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in m[i].iter_mut() {
            *v /= norm;
        }
    }
    m.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::StreamRng;
    use crate::pushworld::{observe, reset};

    #[test]
    fn encode_is_frozen_and_deterministic() {
        let e1 = Encoder::frozen();
        let e2 = Encoder::frozen();
        let obs = vec![0.5; OBS_DIM];
        assert_eq!(e1.encode(&obs).unwrap(), e2.encode(&obs).unwrap());
        assert_eq!(e1.encode(&obs).unwrap(), e1.encode(&obs).unwrap());
    }

    #[test]
    fn output_is_in_open_unit_interval() {
        let e = Encoder::frozen();
        let mut rng = StreamRng::from_seed(2);
        for _ in 0..50 {
            let obs: Vec<f64> = (0..OBS_DIM).map(|_| rng.uniform()).collect();
            let f = e.encode(&obs).unwrap();
            assert!(f.as_slice().iter().all(|v| v.abs() < 1.0));
            assert_eq!(f.as_slice().len(), FEATURE_DIM);
        }
    }

    #[test]
    fn wrong_dimension_rejected() {
        let e = Encoder::frozen();
        assert!(matches!(
            e.encode(&[0.0; 3]),
            Err(EncoderError::DimensionMismatch { expected: _, got: 3 })
        ));
    }

    #[test]
    fn distinct_observations_stay_distinct() {
        // injectivity sweep with the fixed seed over real reset states
        let e = Encoder::frozen();
        let mut feats: Vec<Vec<f64>> = Vec::new();
        for i in 0..1000 {
            let task = i % crate::pushworld::NUM_TASKS;
            let s = reset(task, &mut StreamRng::from_seed(21).child_indexed("inj", i as u64)).unwrap();
            feats.push(e.encode(&observe(&s)).unwrap().0);
        }
        // nearest-neighbor distance check on a subsample to keep this O(n·k)
        let mut min_pair = f64::INFINITY;
        for i in 0..feats.len() {
            for j in (i + 1)..(i + 50).min(feats.len()) {
                min_pair = min_pair.min(l2_diff(&feats[i], &feats[j]));
            }
        }
        assert!(min_pair > 1e-6, "feature collision: min pairwise L2 {min_pair}");
    }

    #[test]
    fn lipschitz_estimate_is_reported() {
        let e = Encoder::frozen();
        let mut rng = StreamRng::from_seed(5);
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..200)
            .map(|_| {
                let a: Vec<f64> = (0..OBS_DIM).map(|_| rng.uniform()).collect();
                let b: Vec<f64> = a.iter().map(|v| v + 0.01 * rng.standard_normal()).collect();
                (a, b)
            })
            .collect();
        let l = e.empirical_lipschitz(&pairs);
        println!("encoder empirical Lipschitz constant: {l:.4}");
        assert!(l.is_finite() && l > 0.0);
    }

    #[test]
    fn header_stamp_and_verify() {
        let e = Encoder::frozen();
        let mut h = CheckpointHeader::new("test", "x", 0);
        e.stamp_header(&mut h);
        assert!(e.verify_header(&h).is_ok());
        let other = Encoder::with_seed(8);
        assert!(other.verify_header(&h).is_err());
    }

    #[test]
    fn rows_are_orthonormal() {
        let mut rng = StreamRng::from_seed(1);
        let m = orthogonal_rows(4, 8, &mut rng);
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..8).map(|k| m[i * 8 + k] * m[j * 8 + k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }
}
