//! Dense 64-bit tensors: scalars, vectors and row-major matrices.

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Shape::Scalar, data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor { shape: Shape::Vector(n), data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Tensor { shape: Shape::Matrix(rows, cols), data }
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(other.shape.clone())
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn as_scalar(&self) -> f64 {
        assert!(matches!(self.shape, Shape::Scalar), "not a scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

/// Row-major matrix-vector product, `out = W x`.
///
/// Shared by the tape op and the no-grad evaluation path so both produce
/// bit-identical sums.
pub fn matvec(rows: usize, cols: usize, w: &[f64], x: &[f64], out: &mut [f64]) {
    assert_eq!(w.len(), rows * cols);
    assert_eq!(x.len(), cols);
    assert_eq!(out.len(), rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        out[r] = acc;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity of two raw slices. Errors on zero-norm input.
pub fn cosine(a: &[f64], b: &[f64]) -> crate::error::Result<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(crate::error::Error::Numeric(
            "cosine similarity of zero-norm vector".into(),
        ));
    }
    Ok(dot(a, b) / (na * nb))
}
