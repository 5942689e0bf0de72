use std::sync::Arc;

use rand::Rng;

use super::Scalar;

/// Dense row-major matrix with shared storage. Cloning is O(1); mutation
/// copies on write if the buffer is shared.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Arc<Vec<Scalar>>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<Scalar>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match shape {rows}x{cols}",
            data.len()
        );
        Self {
            rows,
            cols,
            data: Arc::new(data),
        }
    }

    pub fn from_shared(rows: usize, cols: usize, data: Arc<Vec<Scalar>>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(x: Scalar) -> Self {
        Self::new(1, 1, vec![x])
    }

    pub fn row(xs: &[Scalar]) -> Self {
        Self::new(1, xs.len(), xs.to_vec())
    }

    pub fn column(xs: &[Scalar]) -> Self {
        Self::new(xs.len(), 1, xs.to_vec())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Scalar) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: Scalar, hi: Scalar) -> Self {
        let data = (0..rows * cols)
            .map(|_| lo + (hi - lo) * rng.random::<Scalar>())
            .collect();
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn shared(&self) -> Arc<Vec<Scalar>> {
        Arc::clone(&self.data)
    }

    /// Mutable access; copies the buffer if it is shared with a tape.
    pub fn data_mut(&mut self) -> &mut Vec<Scalar> {
        Arc::make_mut(&mut self.data)
    }

    pub fn get(&self, i: usize, j: usize) -> Scalar {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, x: Scalar) {
        let cols = self.cols;
        self.data_mut()[i * cols + j] = x;
    }
}
