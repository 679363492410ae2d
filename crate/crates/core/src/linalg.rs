//! Dense row-major matrices, vectors, and seeded Gaussian sampling.
//!
//! Everything downstream (adapters, gradients, Monte Carlo estimates, toy
//! training) is built on these types. All arithmetic is f64; values are
//! immutable after construction and operations are pure functions, so
//! sharing across threads is safe.

use crate::error::{CoreError, Result};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seed for a deterministic sample stream. Same seed, same bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngSeed(pub u64);

impl RngSeed {
    /// Derive a child seed for an independent sub-stream.
    ///
    /// Mixing is splitmix64 over `seed XOR tag * golden-ratio`, which keeps
    /// derived streams stable across platforms and worker counts. Tags
    /// identify the consumer (split index, layer index, sweep cell, ...).
    pub fn child(self, tag: u64) -> RngSeed {
        RngSeed(splitmix64(self.0 ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded generator with a pinned Gaussian algorithm.
///
/// Uniform doubles come from the top 53 bits of ChaCha8 output; normals use
/// the Marsaglia polar method. Both are fixed by this crate (not delegated
/// to a distribution library), so a seed reproduces the same stream on any
/// build of the same version.
pub struct SeededRng {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: RngSeed) -> Self {
        SeededRng {
            rng: ChaCha8Rng::seed_from_u64(seed.0),
            spare: None,
        }
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the polar method.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let m = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * m);
                return u * m;
            }
        }
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize % n.max(1)
    }
}

/// Dense row-major matrix of finite f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if rows == 0 || cols == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(CoreError::Dimension {
                op: "Matrix::new",
                left: format!("{rows}x{cols}"),
                right: format!("data length {}", data.len()),
            });
        }
        let m = Matrix { rows, cols, data };
        m.check_finite("Matrix::new")?;
        Ok(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from nested rows; test and example convenience.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(CoreError::InvalidArgument("ragged rows".into()));
        }
        Matrix::new(r, c, rows.concat())
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn check_finite(&self, op: &'static str) -> Result<()> {
        for (k, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(CoreError::NonFinite {
                    op,
                    detail: format!("entry ({}, {}) = {v}", k / self.cols, k % self.cols),
                });
            }
        }
        Ok(())
    }

    /// Matrix product; shapes must conform.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(CoreError::Dimension {
                op: "matmul",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in a_row.iter().enumerate() {
                let b_row = other.row(k);
                for (j, &bkj) in b_row.iter().enumerate() {
                    o[j] += aik * bkj;
                }
            }
        }
        out.check_finite("matmul")?;
        Ok(out)
    }

    /// Matrix-vector product.
    pub fn matvec(&self, x: &Vector) -> Result<Vector> {
        if self.cols != x.len() {
            return Err(CoreError::Dimension {
                op: "matvec",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("vector length {}", x.len()),
            });
        }
        let mut out = vec![0.0; self.rows];
        for (i, oi) in out.iter_mut().enumerate() {
            *oi = dot(self.row(i), x.as_slice());
        }
        Vector::new(out)
    }

    /// Transposed matrix-vector product: self^T * y.
    pub fn matvec_t(&self, y: &Vector) -> Result<Vector> {
        if self.rows != y.len() {
            return Err(CoreError::Dimension {
                op: "matvec_t",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("vector length {}", y.len()),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.as_slice().iter().enumerate() {
            for (j, &mij) in self.row(i).iter().enumerate() {
                out[j] += mij * yi;
            }
        }
        Vector::new(out)
    }

    /// self + factor * other, elementwise.
    pub fn add_scaled(&self, other: &Matrix, factor: f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(CoreError::Dimension {
                op: "add_scaled",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + factor * b)
            .collect();
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Bit-level equality; used by frozen-weight checks.
    pub fn bits_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Dense vector of finite f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Vector> {
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(CoreError::NonFinite {
                    op: "Vector::new",
                    detail: format!("entry {i} = {v}"),
                });
            }
        }
        Ok(Vector { data })
    }

    pub fn zeros(len: usize) -> Vector {
        Vector {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(CoreError::Dimension {
                op: "dot",
                left: format!("length {}", self.len()),
                right: format!("length {}", other.len()),
            });
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(CoreError::Dimension {
                op: "add",
                left: format!("length {}", self.len()),
                right: format!("length {}", other.len()),
            });
        }
        Vector::new(self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect())
    }

    pub fn scale(&self, factor: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn bits_eq(&self, other: &Vector) -> bool {
        self.len() == other.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard matrix product (free-function form of [`Matrix::matmul`]).
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Euclidean norm; 0 for the zero vector.
pub fn l2_norm(v: &Vector) -> f64 {
    v.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Matrix with i.i.d. N(mean, std^2) entries, filled row-major from the
/// seeded stream.
pub fn gaussian_matrix(
    rows: usize,
    cols: usize,
    mean: f64,
    std: f64,
    seed: RngSeed,
) -> Result<Matrix> {
    let mut rng = SeededRng::new(seed);
    gaussian_matrix_from(rows, cols, mean, std, &mut rng)
}

/// As [`gaussian_matrix`] but drawing from an existing stream.
pub fn gaussian_matrix_from(
    rows: usize,
    cols: usize,
    mean: f64,
    std: f64,
    rng: &mut SeededRng,
) -> Result<Matrix> {
    if std < 0.0 || !std.is_finite() || !mean.is_finite() {
        return Err(CoreError::InvalidArgument(format!(
            "gaussian_matrix: mean {mean}, std {std} (std must be finite and >= 0)"
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(CoreError::InvalidArgument(format!(
            "matrix dimensions must be positive, got {rows}x{cols}"
        )));
    }
    let data = (0..rows * cols).map(|_| rng.normal(mean, std)).collect();
    Matrix::new(rows, cols, data)
}

/// Vector with i.i.d. N(mean, std^2) entries from an existing stream.
pub fn gaussian_vector_from(len: usize, mean: f64, std: f64, rng: &mut SeededRng) -> Result<Vector> {
    if std < 0.0 || !std.is_finite() || !mean.is_finite() {
        return Err(CoreError::InvalidArgument(format!(
            "gaussian_vector: mean {mean}, std {std} (std must be finite and >= 0)"
        )));
    }
    Vector::new((0..len).map(|_| rng.normal(mean, std)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        let scale = 1.0_f64.max(a.abs()).max(b.abs());
        assert!(
            (a - b).abs() <= tol * scale,
            "expected {a} ~ {b} within {tol} (scaled)"
        );
    }

    #[test]
    fn matmul_identity_preserves() {
        let m = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap();
        let id = Matrix::identity(2);
        let out = matmul(&id, &m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = SeededRng::new(RngSeed(7));
        let a = gaussian_matrix_from(5, 7, 0.0, 1.0, &mut rng).unwrap();
        let b = gaussian_matrix_from(7, 3, 0.0, 1.0, &mut rng).unwrap();
        let out = matmul(&a, &b).unwrap();
        // independent naive oracle
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert_close(out.get(i, j), acc, 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "message was: {msg}");
    }

    #[test]
    fn l2_norm_zero_and_pythagorean() {
        assert_eq!(l2_norm(&Vector::zeros(3)), 0.0);
        let v = Vector::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(l2_norm(&v), 5.0);
    }

    #[test]
    fn l2_norm_matches_summation_oracle() {
        let mut rng = SeededRng::new(RngSeed(11));
        let v = gaussian_vector_from(10, 0.0, 2.0, &mut rng).unwrap();
        let mut sq = 0.0;
        for &x in v.as_slice() {
            sq += x * x;
        }
        assert_close(l2_norm(&v), sq.sqrt(), 1e-12);
    }

    #[test]
    fn gaussian_zero_std_is_constant() {
        let m = gaussian_matrix(4, 5, 2.5, 0.0, RngSeed(3)).unwrap();
        assert!(m.as_slice().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn gaussian_negative_std_rejected() {
        assert!(gaussian_matrix(2, 2, 0.0, -1.0, RngSeed(0)).is_err());
    }

    #[test]
    fn gaussian_sample_moments_match_law_of_large_numbers() {
        let m = gaussian_matrix(1000, 1000, 0.0, 1.0, RngSeed(42)).unwrap();
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.01, "sample mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "sample variance {var}");
    }

    #[test]
    fn gaussian_same_seed_bit_identical() {
        let a = gaussian_matrix(13, 9, 0.5, 1.5, RngSeed(99)).unwrap();
        let b = gaussian_matrix(13, 9, 0.5, 1.5, RngSeed(99)).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn child_seeds_are_stable_and_distinct() {
        let s = RngSeed(123);
        assert_eq!(s.child(1), s.child(1));
        assert_ne!(s.child(1), s.child(2));
        assert_ne!(s.child(1).0, s.0);
    }

    proptest! {
        #[test]
        fn matmul_associative(seed in 0u64..1000, n in 1usize..6, m in 1usize..6, k in 1usize..6, l in 1usize..6) {
            let mut rng = SeededRng::new(RngSeed(seed));
            let a = gaussian_matrix_from(n, m, 0.0, 1.0, &mut rng).unwrap();
            let b = gaussian_matrix_from(m, k, 0.0, 1.0, &mut rng).unwrap();
            let c = gaussian_matrix_from(k, l, 0.0, 1.0, &mut rng).unwrap();
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
                let scale = 1.0_f64.max(x.abs()).max(y.abs());
                prop_assert!((x - y).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn l2_norm_absolutely_homogeneous(seed in 0u64..1000, c in -100.0f64..100.0, len in 1usize..32) {
            let mut rng = SeededRng::new(RngSeed(seed));
            let v = gaussian_vector_from(len, 0.0, 3.0, &mut rng).unwrap();
            let lhs = l2_norm(&v.scale(c));
            let rhs = c.abs() * l2_norm(&v);
            let scale = 1.0_f64.max(lhs.abs()).max(rhs.abs());
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
        }
    }
}
