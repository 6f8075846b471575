//! Dense row-major matrices and the scalar abstraction shared by the model.
//!
//! Every tensor in the model is two-dimensional; vectors are `1 x n` rows.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type the model can be instantiated with (`f32` for
/// training, `f64` for gradient checks).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + std::iter::Sum + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: F) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match shape");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<F>) -> Self {
        let cols = data.len();
        Self::from_vec(1, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale_assign(&mut self, s: F) {
        for a in &mut self.data {
            *a = *a * s;
        }
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|a| *a = v);
    }

    pub fn sum_sq(&self) -> F {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self @ other`.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![F::zero(); n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == F::zero() {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Self::from_vec(n, m, out)
    }

    /// `self @ other^T`.
    pub fn matmul_bt(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_bt shape mismatch");
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = vec![F::zero(); n * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = dot(a, b);
            }
        }
        Self::from_vec(n, m, out)
    }

    /// `self^T @ other`.
    pub fn matmul_at(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "matmul_at shape mismatch");
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![F::zero(); n * m];
        for p in 0..k {
            let a_row = &self.data[p * n..(p + 1) * n];
            let b_row = &other.data[p * m..(p + 1) * m];
            for (i, &a) in a_row.iter().enumerate() {
                if a == F::zero() {
                    continue;
                }
                let out_row = &mut out[i * m..(i + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Self::from_vec(n, m, out)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| G::of(x.as_f64())).collect(),
        }
    }
}

pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Numerically stable softmax of a slice.
pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits
        .iter()
        .copied()
        .fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `ln(sum(exp(z)))`, computed stably.
pub fn log_sum_exp<F: Scalar>(logits: &[F]) -> F {
    let max = logits
        .iter()
        .copied()
        .fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
    let total: F = logits.iter().map(|&z| (z - max).exp()).sum();
    max + total.ln()
}

pub fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax<F: PartialOrd + Copy>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
