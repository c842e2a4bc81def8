use crate::error::{shape_err, Result};
use crate::half_float::Half;

/// Dense row-major 2-D buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

pub type HalfMatrix = Matrix<Half>;
pub type F32Matrix = Matrix<f32>;

impl<T: Copy + Default> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::default(); rows * cols] }
    }
}

impl<T> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!("{} elements cannot form a {rows}x{cols} matrix", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        (0..self.rows).map(move |r| self.row(r))
    }
}

impl<T: Copy> Matrix<T> {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// Gathers the listed rows, in order, into a new matrix.
    pub fn gather_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix { rows: rows.len(), cols: self.cols, data }
    }

    pub fn map<U>(&self, f: impl FnMut(T) -> U) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().copied().map(f).collect() }
    }
}

impl HalfMatrix {
    pub fn from_f32(rows: usize, cols: usize, values: &[f32]) -> Result<Self> {
        Self::from_vec(rows, cols, values.iter().copied().map(Half::from_f32).collect())
    }

    pub fn to_f32(&self) -> F32Matrix {
        self.map(Half::to_f32)
    }

    /// True when every element has the same bit pattern as `other`'s.
    pub fn bit_eq(&self, other: &HalfMatrix) -> bool {
        self.shape() == other.shape() && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Expert weight tensor of logical shape `(E, M, N)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertTensor<T> {
    experts: usize,
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// FP16 expert weights; also the output of dequantization.
pub type ExpertWeights = ExpertTensor<Half>;

impl<T> ExpertTensor<T> {
    pub fn from_vec(experts: usize, rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != experts * rows * cols {
            return Err(shape_err(format!("{} elements cannot form a ({experts}, {rows}, {cols}) tensor", data.len())));
        }
        Ok(ExpertTensor { experts, rows, cols, data })
    }

    #[inline]
    pub fn experts(&self) -> usize {
        self.experts
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.experts, self.rows, self.cols)
    }

    /// The `(M, N)` slab of one expert.
    #[inline]
    pub fn expert(&self, e: usize) -> &[T] {
        let n = self.rows * self.cols;
        &self.data[e * n..(e + 1) * n]
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T: Copy> ExpertTensor<T> {
    #[inline]
    pub fn get(&self, e: usize, m: usize, n: usize) -> T {
        self.data[(e * self.rows + m) * self.cols + n]
    }

    pub fn expert_matrix(&self, e: usize) -> Matrix<T> {
        Matrix { rows: self.rows, cols: self.cols, data: self.expert(e).to_vec() }
    }
}

impl ExpertWeights {
    pub fn from_f32(experts: usize, rows: usize, cols: usize, values: &[f32]) -> Result<Self> {
        Self::from_vec(experts, rows, cols, values.iter().copied().map(Half::from_f32).collect())
    }

    pub fn bit_eq(&self, other: &ExpertWeights) -> bool {
        self.shape() == other.shape() && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
