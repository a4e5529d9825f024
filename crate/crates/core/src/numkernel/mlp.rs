//! Dense feed-forward stacks over [`ParamSet`] weights.
//!
//! `forward` records onto a tape for training and guidance gradients; `eval`
//! is the allocation-light inference path. Both share the same accumulation
//! order, so they agree bit-for-bit.

use super::tape::{matmul_raw, sigmoid, Graph, ValueId};
use super::tensor::Tensor;
use super::{KernelError, ParamSet, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    Linear,
}

impl Activation {
    fn apply_graph(self, g: &mut Graph, x: ValueId) -> Result<ValueId, KernelError> {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Relu => g.relu(x),
            Activation::Linear => Ok(x),
        }
    }

    fn apply_slice(self, xs: &mut [f64]) {
        match self {
            Activation::Tanh => xs.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Sigmoid => xs.iter_mut().for_each(|v| *v = sigmoid(*v)),
            Activation::Relu => xs.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Linear => {}
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub hidden_act: Activation,
    pub out_act: Activation,
    /// Scale applied to the final layer's weight init; 0.0 makes the net
    /// output exactly zero at init (useful for noise predictors).
    pub final_scale: f64,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layer_names: Vec<(String, String)>,
}

impl Mlp {
    pub fn new(prefix: &str, spec: MlpSpec) -> Self {
        let n_layers = spec.hidden.len() + 1;
        let layer_names = (0..n_layers)
            .map(|i| (format!("{prefix}.w{i}"), format!("{prefix}.b{i}")))
            .collect();
        Mlp { spec, layer_names }
    }

    pub fn in_dim(&self) -> usize {
        self.spec.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.spec.in_dim];
        d.extend_from_slice(&self.spec.hidden);
        d.push(self.spec.out_dim);
        d
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layer_names.iter().flat_map(|(w, b)| [w.clone(), b.clone()]).collect()
    }

    /// Insert freshly initialized weights into `params`.
    pub fn init(&self, params: &mut ParamSet, rng: &mut StreamRng) -> Result<(), KernelError> {
        let dims = self.dims();
        let last = self.layer_names.len() - 1;
        for (i, (wname, bname)) in self.layer_names.iter().enumerate() {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let gain = if i == last { self.spec.final_scale } else { 1.0 };
            let std = gain / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| std * rng.standard_normal()).collect();
            params.insert(wname, Tensor::matrix(fan_in, fan_out, w)?)?;
            params.insert(bname, Tensor::vector(vec![0.0; fan_out])?)?;
        }
        Ok(())
    }

    /// Tape forward over a `[batch, in_dim]` input node.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        x: ValueId,
    ) -> Result<ValueId, KernelError> {
        let last = self.layer_names.len() - 1;
        let mut h = x;
        for (i, (wname, bname)) in self.layer_names.iter().enumerate() {
            let w = g.param(params, wname)?;
            let b = g.param(params, bname)?;
            let mm = g.matmul(h, w)?;
            let pre = g.add_row(mm, b)?;
            let act = if i == last { self.spec.out_act } else { self.spec.hidden_act };
            h = act.apply_graph(g, pre)?;
        }
        Ok(h)
    }

    /// Inference path for a single input row. Bit-identical to `forward`.
    pub fn eval(&self, params: &ParamSet, x: &[f64]) -> Result<Vec<f64>, KernelError> {
        if x.len() != self.spec.in_dim {
            return Err(KernelError::ShapeMismatch {
                context: "mlp_eval",
                expected: format!("{}", self.spec.in_dim),
                got: format!("{}", x.len()),
            });
        }
        let dims = self.dims();
        let last = self.layer_names.len() - 1;
        let mut h = x.to_vec();
        for (i, (wname, bname)) in self.layer_names.iter().enumerate() {
            let w = params.get(wname)?;
            let b = params.get(bname)?;
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let mut y = matmul_raw(&h, w.data(), 1, fan_in, fan_out);
            for (v, bv) in y.iter_mut().zip(b.data()) {
                *v += bv;
            }
            let act = if i == last { self.spec.out_act } else { self.spec.hidden_act };
            act.apply_slice(&mut y);
            h = y;
        }
        Ok(h)
    }
}
