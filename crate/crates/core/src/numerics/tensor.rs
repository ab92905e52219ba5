use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MistError, Result};

/// Dense row-major tensor of `f64` values.
///
/// Graph operations treat a tensor as a matrix whose column count is the
/// last extent and whose row count is the product of the leading extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err("tensor", format!("extents must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn scalar(value: f64) -> Self {
        Self::vector(vec![value])
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// View as a `rows × cols` matrix without copying.
    pub fn as_matrix(&self) -> Self {
        Self {
            shape: vec![self.rows(), self.cols()],
            data: self.data.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(MistError::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Split shape into (outer, axis extent, inner) strides for `axis`.
    fn axis_layout(&self, op: &'static str, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.shape.len() {
            return Err(MistError::EmptyAxis {
                op,
                axis,
                shape: self.shape.clone(),
            });
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax(v: &Tensor, axis: usize) -> Result<Tensor> {
    v.ensure_finite("softmax")?;
    let (outer, len, inner) = v.axis_layout("softmax", axis)?;
    let mut out = v.clone();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| v.data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (v.data[at(j)] - max).exp();
                out.data[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out.data[at(j)] /= total;
            }
        }
    }
    Ok(out)
}

/// Arithmetic mean along `axis`; the axis is removed from the shape
/// (a rank-1 input yields a length-1 vector).
pub fn mean_pool(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = x.axis_layout("mean_pool", axis)?;
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = &x.data[(o * len + j) * inner..(o * len + j + 1) * inner];
            for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let scale = 1.0 / len as f64;
    data.iter_mut().for_each(|d| *d *= scale);
    let mut shape = x.shape.clone();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(shape, data)
}

/// Numerically stable `−log softmax(scores)[label]`.
pub fn cross_entropy(scores: &Tensor, label: usize) -> Result<f64> {
    let n = scores.numel();
    if label >= n {
        return Err(MistError::LabelOutOfRange { label, classes: n });
    }
    scores.ensure_finite("cross_entropy")?;
    let max = scores.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.data.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - scores.data[label])
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Indices of the `k` largest values in descending order, ties to the lowest
/// index. `k` is clamped to the length of `values`.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn softmax_uniform_and_forced() {
        let s = softmax(&Tensor::vector(vec![0.0; 4]), 0).unwrap();
        for v in s.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let s = softmax(&Tensor::vector(vec![1f64.ln(), 3f64.ln()]), 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let t = Tensor::matrix(2, 3, vec![0.0, 1.0, 2.0, 2.0, 1.0, 0.0]).unwrap();
        let s = softmax(&t, 0).unwrap();
        for c in 0..3 {
            let total = s.data()[c] + s.data()[3 + c];
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!((s.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_bad_axis_is_error() {
        let t = Tensor::vector(vec![1.0, 2.0]);
        assert!(matches!(softmax(&t, 1), Err(MistError::EmptyAxis { .. })));
    }

    #[test]
    fn mean_pool_examples() {
        let ones = Tensor::filled(&[2, 3], 1.0);
        assert_eq!(mean_pool(&ones, 0).unwrap().data(), &[1.0, 1.0, 1.0]);
        let v = Tensor::vector(vec![1.0, 3.0]);
        assert_eq!(mean_pool(&v, 0).unwrap().data(), &[2.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let loss = cross_entropy(&Tensor::vector(vec![0.3; 4]), 2).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let loss = cross_entropy(&Tensor::vector(vec![0.0, 50.0, 0.0]), 1).unwrap();
        assert!((0.0..1e-20).contains(&loss));
        assert!(matches!(
            cross_entropy(&Tensor::vector(vec![0.0, 1.0]), 2),
            Err(MistError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax(&[2.0, 2.0]), Some(0));
        assert_eq!(argmax(&[]), None);
        assert_eq!(top_k_indices(&[0.5, 0.9, 0.9, 0.1], 3), vec![1, 2, 0]);
    }
}
