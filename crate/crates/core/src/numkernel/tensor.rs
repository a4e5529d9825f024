//! Dense row-major f64 tensors.
//!
//! Rank is 1 or 2 in practice (vectors and batched matrices); the shape is
//! stored explicitly so checkpoints round-trip arbitrary ranks. NaN/Inf is a
//! hard error at op boundaries, enforced by [`Tensor::validate_finite`].

use std::sync::Arc;

use super::KernelError;

/// Storage is `Arc`-shared so cloning a tensor (e.g. a parameter leaf onto a
/// tape) is O(1); mutation copies on write.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, KernelError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(KernelError::ShapeMismatch {
                context: "Tensor::new",
                expected: format!("{numel} elements for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        let t = Tensor { shape, data: Arc::new(data) };
        t.validate_finite("Tensor::new")?;
        Ok(t)
    }

    /// Vector constructor, shape `[len]`.
    pub fn vector(data: Vec<f64>) -> Result<Self, KernelError> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// Matrix constructor, shape `[rows, cols]`, row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, KernelError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![0.0; numel]) }
    }

    pub fn scalar(v: f64) -> Result<Self, KernelError> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view; copies if the storage is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f64, KernelError> {
        if self.numel() != 1 {
            return Err(KernelError::NonScalarRoot { shape: self.shape.clone() });
        }
        Ok(self.data[0])
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rank-{} tensor has no row view", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("rank-{} tensor has no column view", self.shape.len()),
        }
    }

    pub fn validate_finite(&self, context: &'static str) -> Result<(), KernelError> {
        for &v in &self.data {
            if !v.is_finite() {
                return Err(KernelError::NonFiniteInput { context });
            }
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_length_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(KernelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_rejected_at_construction() {
        assert!(matches!(
            Tensor::vector(vec![1.0, f64::NAN]),
            Err(KernelError::NonFiniteInput { .. })
        ));
        assert!(matches!(
            Tensor::vector(vec![f64::INFINITY]),
            Err(KernelError::NonFiniteInput { .. })
        ));
    }

    #[test]
    fn item_requires_scalar() {
        assert_eq!(Tensor::scalar(4.5).unwrap().item().unwrap(), 4.5);
        assert!(Tensor::vector(vec![1.0, 2.0]).unwrap().item().is_err());
    }
}
