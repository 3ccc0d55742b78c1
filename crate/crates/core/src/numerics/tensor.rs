use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor of rank 1 or 2.
///
/// A rank-1 tensor of length `n` behaves as a `1 × n` row wherever a matrix
/// is expected.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(dim_err!("rank {} tensors are not supported", shape.len()));
        }
        if shape.contains(&0) && !data.is_empty() {
            return Err(dim_err!("shape {shape:?} has a zero extent but {} values", data.len()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(dim_err!("shape {shape:?} needs {expected} values, got {}", data.len()));
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// A `1 × n` matrix.
    pub fn row(data: Vec<T>) -> Result<Self> {
        Self::new(vec![1, data.len()], data)
    }

    pub fn scalar(v: T) -> Result<Self> {
        Self::new(vec![1, 1], vec![v])
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(dim_err!("cannot build a matrix from zero rows"));
        };
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(dim_err!("row {i} has length {}, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds without validation; callers guarantee the shape/data contract.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows() == other.rows() && self.cols() == other.cols()
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.data.len(), other.data.len());
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Reinterprets as `rows × cols` without copying.
    pub fn reshape(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} to [{rows}, {cols}]", self.shape));
        }
        self.shape = vec![rows, cols];
        Ok(self)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Tensor::from_parts(vec![c, r], out)
    }

    /// Matrix product with a fixed (i, k, j) accumulation order.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let out = self.matmul_unchecked(other)?;
        out.check_finite("matmul")?;
        Ok(out)
    }

    pub(crate) fn matmul_unchecked(&self, other: &Self) -> Result<Self> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(dim_err!("matmul inner extents differ: {m}x{k} by {k2}x{n}"));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == T::zero() {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub(crate) fn matmul_bt(&self, other: &Self) -> Result<Self> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (other.rows(), other.cols());
        if k != k2 {
            return Err(dim_err!("matmul_bt inner extents differ: {m}x{k} by ({n}x{k2})ᵀ"));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &other.data[j * k..(j + 1) * k];
                out.push(dot(a, b));
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub(crate) fn matmul_at(&self, other: &Self) -> Result<Self> {
        let (k, m) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(dim_err!("matmul_at inner extents differ: ({k}x{m})ᵀ by {k2}x{n}"));
        }
        let mut out = vec![T::zero(); m * n];
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &other.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// Converts the element type, e.g. to `f32` for storage.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossless()))
                .collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(dim_err!("cosine of lengths {} and {}", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    let c = dot(a, b) / (na * nb);
    // Rounding can push |c| a hair past 1.
    Ok(c.max(-T::one()).min(T::one()))
}

/// Softmax axis selector for [`softmax`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Normalize each row (reduce across columns).
    Rows,
    /// Normalize each column (reduce across rows).
    Cols,
}

/// Temperature softmax with max subtraction.
pub fn softmax<T: Scalar>(v: &Tensor<T>, axis: Axis, temperature: T) -> Result<Tensor<T>> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let out = match axis {
        Axis::Rows => softmax_rows(v, temperature),
        Axis::Cols => softmax_rows(&v.transpose(), temperature).transpose(),
    };
    let out = if v.shape().len() == 1 {
        Tensor::from_parts(v.shape().to_vec(), out.into_data())
    } else {
        out
    };
    out.check_finite("softmax")?;
    Ok(out)
}

pub(crate) fn softmax_rows<T: Scalar>(v: &Tensor<T>, temperature: T) -> Tensor<T> {
    let (r, c) = (v.rows(), v.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = v.row_slice(i);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &x in row {
            let e = ((x - m) / temperature).exp();
            total = total + e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e = *e / total;
        }
    }
    Tensor::from_parts(vec![r, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out[i * n + j] = s;
            }
        }
        Tensor::matrix(m, n, out).unwrap()
    }

    fn lcg_matrix(seed: &mut u64, r: usize, c: usize) -> Tensor<f64> {
        let data = (0..r * c)
            .map(|_| {
                *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::matrix(r, c, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_basis() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        let r = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let c = Tensor::matrix(2, 1, vec![5.0, 7.0]).unwrap();
        assert_eq!(r.matmul(&c).unwrap().data(), &[5.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut seed = 7;
        for (m, k, n) in [(3, 4, 2), (1, 1, 1), (32, 32, 32), (5, 17, 9)] {
            let a = lcg_matrix(&mut seed, m, k);
            let b = lcg_matrix(&mut seed, k, n);
            let fast = a.matmul(&b).unwrap();
            let slow = naive_matmul(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
            let bt = a.matmul_bt(&b.transpose()).unwrap();
            assert!(bt.max_abs_diff(&slow) < 1e-12);
            let at = a.transpose().matmul_at(&b).unwrap();
            assert!(at.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::<f64>::vector(vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn softmax_closed_forms() {
        let v = Tensor::<f64>::vector(vec![0.0, 0.0, 0.0]).unwrap();
        let s = softmax(&v, Axis::Rows, 1.0).unwrap();
        for &x in s.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let v = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let s = softmax(&v, Axis::Rows, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((s.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!(matches!(softmax(&v, Axis::Rows, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn softmax_column_axis() {
        let m = Tensor::<f64>::matrix(2, 2, vec![1.0, 5.0, 1.0, -5.0]).unwrap();
        let s = softmax(&m, Axis::Cols, 1.0).unwrap();
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.get(0, 1) + s.get(1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 2.0, 3.0], &[-1.0, 0.0, 2.0]).unwrap();
        assert!((c - 5.0 / (14f64.sqrt() * 5f64.sqrt())).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }
}
