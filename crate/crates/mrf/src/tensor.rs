//! Dense row-major `f64` tensors.
//!
//! Storage is a flat `Vec<f64>`; no views or strides — slicing copies,
//! which is fine at the scales this crate targets. Shape violations are
//! programming errors and panic. Gradient bookkeeping lives in
//! [`crate::tape`]; `Tensor` itself is a plain value type.

use crate::rng::SeedRng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "shape {shape:?} does not match {} values", data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut SeedRng) -> Self {
        let mut t = Tensor::zeros(shape);
        rng.fill_normal(&mut t.data, std);
        t
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

    /// Rows of a 2-D tensor (a 1-D tensor counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    /// Columns of a 1-D or 2-D tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product `[r,s] x [s,t] -> [r,t]`.
    ///
    /// The k-outer loop keeps per-element accumulation in ascending-k
    /// order (bit-identical to the naive triple loop) while the inner loop
    /// over `t` auto-vectorizes.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (r, s) = mat_dims(self);
        let (s2, t) = mat_dims(other);
        assert_eq!(s, s2, "matmul inner dims {s} vs {s2}");
        let mut out = vec![0.0; r * t];
        matmul_into(&self.data, &other.data, &mut out, r, s, t);
        Tensor::new(vec![r, t], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = mat_dims(self);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }
}

fn mat_dims(t: &Tensor) -> (usize, usize) {
    match t.shape.len() {
        1 => (1, t.shape[0]),
        2 => (t.shape[0], t.shape[1]),
        _ => panic!("matrix op on rank-{} tensor", t.shape.len()),
    }
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], r: usize, s: usize, t: usize) {
    for i in 0..r {
        let orow = &mut out[i * t..(i + 1) * t];
        let arow = &a[i * s..(i + 1) * s];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * t..(k + 1) * t];
            for j in 0..t {
                orow[j] += aik * brow[j];
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot length {} vs {}", a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity of two equal-length vectors. Panics on zero-norm
/// input. Identical vectors return exactly 1.0 (cos(x, x) = 1 by
/// definition, with no rounding detour).
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    assert!(na > 0.0, "cosine_similarity on zero-norm vector");
    if a == b {
        return 1.0;
    }
    let nb = norm(b);
    assert!(nb > 0.0, "cosine_similarity on zero-norm vector");
    dot(a, b) / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(i2.matmul(&b).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]);
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]);
        assert_eq!(a.matmul(&b).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop_exactly() {
        let mut rng = SeedRng::new(42);
        let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::randn(vec![4, 2], 1.0, &mut rng);
        let got = a.matmul(&b);
        // Independent oracle: i,j,k dot products.
        let mut want = vec![0.0; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                want[i * 2 + j] = acc;
            }
        }
        assert_eq!(got.data(), &want[..], "kernel must be bit-identical to naive order");
    }

    #[test]
    #[should_panic(expected = "matmul inner dims")]
    fn matmul_shape_mismatch_panics() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = SeedRng::new(1);
        let a = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn cosine_basics() {
        let a = [1.0, 1.0];
        assert!((cosine_similarity(&a, &a) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]);
        assert!((c - 0.70711).abs() < 1e-5, "got {c}");
    }

    #[test]
    #[should_panic(expected = "zero-norm")]
    fn cosine_zero_vector_panics() {
        cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Tensor::randn(vec![4, 4], 0.02, &mut SeedRng::new(9));
        let b = Tensor::randn(vec![4, 4], 0.02, &mut SeedRng::new(9));
        assert_eq!(a, b);
    }
}
