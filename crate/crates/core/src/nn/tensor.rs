//! Plain host-side tensors and the scalar trait shared by f32/f64 graphs.

use num_traits::{Float, FromPrimitive};

/// Scalar type the graph can differentiate through.
pub trait Real:
    Float + FromPrimitive + std::ops::AddAssign + std::fmt::Debug + Send + Sync + 'static
{
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }
    fn to_f64c(self) -> f64;
}

impl Real for f32 {
    fn to_f64c(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64c(self) -> f64 {
        self
    }
}

/// Dense row-major array with shape. Graph inputs and extracted outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> TensorData<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        TensorData { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        TensorData { shape, data: vec![F::zero(); n] }
    }

    pub fn scalar(v: F) -> Self {
        TensorData { shape: vec![1], data: vec![v] }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        TensorData::new(shape, data.iter().map(|&v| F::from_f64c(v)).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Element at a multi-index; test convenience.
    pub fn at(&self, idx: &[usize]) -> F {
        assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for dim {i} ({dim})");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn cast<G: Real>(&self) -> TensorData<G> {
        TensorData {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::from_f64c(v.to_f64c())).collect(),
        }
    }
}
