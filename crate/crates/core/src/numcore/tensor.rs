use super::{check_finite, NumError};

/// A dense f64 tensor that owns its data and, when marked trainable, a
/// gradient buffer accumulated across backward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// A constant tensor. The empty shape `[]` denotes a scalar with one
    /// element.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumError::ShapeDataMismatch { shape, len: data.len() });
        }
        check_finite("tensor", &data)?;
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    /// A trainable tensor with a zeroed gradient buffer.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumError> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        t.grad = Some(vec![0.0; t.data.len()]);
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Result<Self, NumError> {
        Tensor::new(Vec::new(), vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if on && self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        if !on {
            self.grad = None;
        }
    }

    /// Replaces the contents, keeping the shape. Rejects non-finite values.
    pub fn set_data(&mut self, data: &[f64]) -> Result<(), NumError> {
        if data.len() != self.data.len() {
            return Err(NumError::ShapeDataMismatch {
                shape: self.shape.clone(),
                len: data.len(),
            });
        }
        check_finite("set_data", data)?;
        self.data.copy_from_slice(data);
        Ok(())
    }

    /// In-place elementwise update used by optimizers. The closure receives
    /// (value, gradient) per element and returns the new value.
    pub fn update(&mut self, f: impl Fn(f64, f64) -> f64) -> Result<(), NumError> {
        let grad = self.grad.as_ref().cloned().unwrap_or_else(|| vec![0.0; self.data.len()]);
        for (v, g) in self.data.iter_mut().zip(grad.iter()) {
            *v = f(*v, *g);
        }
        check_finite("update", &self.data)
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer. Gradients accumulate across
    /// backward passes until `zero_grad`.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<(), NumError> {
        if !self.requires_grad {
            return Ok(());
        }
        if delta.len() != self.data.len() {
            return Err(NumError::ShapeDataMismatch {
                shape: self.shape.clone(),
                len: delta.len(),
            });
        }
        check_finite("accumulate_grad", delta)?;
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (gi, di) in g.iter_mut().zip(delta.iter()) {
            *gi += di;
        }
        Ok(())
    }

    /// Appends rows to a rank-2 tensor, preserving existing entries bitwise.
    pub fn append_rows(&mut self, rows: &[f64], n_rows: usize) -> Result<(), NumError> {
        if self.shape.len() != 2 {
            return Err(NumError::BadShape {
                op: "append_rows",
                shape: self.shape.clone(),
                expected: "rank-2 tensor".into(),
            });
        }
        let cols = self.shape[1];
        if rows.len() != n_rows * cols {
            return Err(NumError::ShapeDataMismatch {
                shape: vec![n_rows, cols],
                len: rows.len(),
            });
        }
        check_finite("append_rows", rows)?;
        self.data.extend_from_slice(rows);
        self.shape[0] += n_rows;
        if let Some(g) = self.grad.as_mut() {
            g.resize(self.data.len(), 0.0);
        }
        Ok(())
    }

    /// One row of a rank-2 tensor.
    pub fn row(&self, i: usize) -> Result<&[f64], NumError> {
        if self.shape.len() != 2 {
            return Err(NumError::BadShape {
                op: "row",
                shape: self.shape.clone(),
                expected: "rank-2 tensor".into(),
            });
        }
        let (n, d) = (self.shape[0], self.shape[1]);
        if i >= n {
            return Err(NumError::IndexOutOfBounds { op: "row", index: i, len: n });
        }
        Ok(&self.data[i * d..(i + 1) * d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        let err = Tensor::new(vec![2, 2], vec![1.0, 2.0]).unwrap_err();
        assert!(matches!(err, NumError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert_eq!(err, NumError::NonFinite { op: "tensor" });
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 1.0]).unwrap();
        t.accumulate_grad(&[0.5, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0, 2.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn append_rows_preserves_prefix_bitwise() {
        let mut t = Tensor::param(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let before = t.data()[..4].to_vec();
        t.append_rows(&[5.0, 6.0], 1).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(&t.data()[..4], before.as_slice());
        assert_eq!(t.grad().unwrap().len(), 6);
    }
}
