use crate::error::{invalid, DiffError, Result};

/// Dense row-major float64 array.
///
/// `grad` is filled in by the training loop after a backward pass and read
/// by the optimizer; it always has the same length as `data` when present.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffArray {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(invalid("array", "shape must have at least one extent"));
    }
    if shape.contains(&0) {
        return Err(invalid("array", format!("extents must be positive, got {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl DiffArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = check_shape(&shape)?;
        if expected != data.len() {
            return Err(DiffError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = check_shape(&shape)?;
        Self::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = check_shape(&shape)?;
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a 2-D array from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(DiffError::ShapeMismatch {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Marks the array as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(DiffError::DataLength {
                shape: self.shape.clone(),
                expected: self.data.len(),
                actual: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Values and gradient borrowed together, for in-place optimizer updates.
    pub fn data_and_grad_mut(&mut self) -> (&mut [f64], Option<&[f64]>) {
        (&mut self.data, self.grad.as_deref())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Row `i` of a 2-D array.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1..].iter().product::<usize>();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        let err = DiffArray::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, DiffError::DataLength { expected: 6, actual: 5, .. }));
    }

    #[test]
    fn rejects_zero_extent() {
        assert!(DiffArray::zeros(vec![2, 0]).is_err());
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(DiffArray::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn grad_must_match_shape() {
        let mut a = DiffArray::zeros(vec![2, 2]).unwrap();
        assert!(a.set_grad(vec![1.0; 3]).is_err());
        a.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(a.grad().unwrap().len(), 4);
    }
}
