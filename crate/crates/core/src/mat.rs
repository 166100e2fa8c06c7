//! Minimal dense row-major matrix used by synthetic models and
//! transformation networks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `rows x cols` matrix, row-major storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::invalid_config("matrix must be non-empty"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in &rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dim mismatch");
        let mut y = vec![0.0; self.rows];
        for (r, out) in y.iter_mut().enumerate() {
            let row = self.row(r);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            *out = acc;
        }
        y
    }

    /// `y = A^T x`.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "matvec_t dim mismatch");
        let mut y = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            let row = self.row(r);
            for (out, a) in y.iter_mut().zip(row) {
                *out += a * xr;
            }
        }
        y
    }

    /// Fill with N(0, std^2) entries drawn row-major from `rng`.
    pub fn fill_gaussian<R: Rng>(&mut self, rng: &mut R, std: f64) {
        for v in self.data.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = z * std;
        }
    }
}

/// Draw a `rows x cols` Gaussian matrix and orthonormalize its rows with
/// two passes of modified Gram-Schmidt. Requires `rows <= cols`. The result
/// satisfies `Q Q^T = I`, so `x -> Qx` preserves inner products between
/// vectors in the row space and in particular maps unit vectors to unit
/// vectors.
pub fn orthonormal_rows<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Result<Mat> {
    if rows > cols {
        return Err(Error::invalid_config(format!(
            "orthonormal_rows requires rows <= cols, got {rows}x{cols}"
        )));
    }
    let mut q = Mat::zeros(rows, cols);
    q.fill_gaussian(rng, 1.0);
    for _pass in 0..2 {
        for i in 0..rows {
            for j in 0..i {
                let proj = dot_slices(q.row(i), q.row(j));
                let (head, tail) = q.data.split_at_mut(i * cols);
                let prev = &head[j * cols..(j + 1) * cols];
                let cur = &mut tail[..cols];
                for (c, p) in cur.iter_mut().zip(prev) {
                    *c -= proj * p;
                }
            }
            let norm = dot_slices(q.row(i), q.row(i)).sqrt();
            if norm < 1e-12 {
                return Err(Error::invalid_config(
                    "rank collapse during orthonormalization",
                ));
            }
            for v in q.row_mut(i) {
                *v /= norm;
            }
        }
    }
    Ok(q)
}

#[inline]
pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matvec_known_values() {
        let a = Mat::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(a.matvec(&[1.0, 1.0]), vec![3.0, 7.0, 11.0]);
        assert_eq!(a.matvec_t(&[1.0, 0.0, 1.0]), vec![6.0, 8.0]);
    }

    #[test]
    fn orthonormal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(r, c) in &[(4usize, 4usize), (8, 16), (16, 64), (64, 64)] {
            let q = orthonormal_rows(&mut rng, r, c).unwrap();
            for i in 0..r {
                for j in 0..r {
                    let want = if i == j { 1.0 } else { 0.0 };
                    let got = dot_slices(q.row(i), q.row(j));
                    assert!(
                        (got - want).abs() < 1e-10,
                        "Q Q^T[{i}][{j}] = {got}, want {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn orthonormal_rows_preserve_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = orthonormal_rows(&mut rng, 6, 12).unwrap();
        // Q Q^T = I: lifting y through Q^T and mapping back is the identity,
        // and the lift preserves the Euclidean norm.
        let y: Vec<f64> = (0..6).map(|i| ((i * 13 + 5) % 7) as f64 / 7.0).collect();
        let z = q.matvec_t(&y);
        let back = q.matvec(&z);
        for (a, b) in y.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
        let ny = dot_slices(&y, &y).sqrt();
        let nz = dot_slices(&z, &z).sqrt();
        assert!((ny - nz).abs() < 1e-10);
    }

    #[test]
    fn orthonormal_rows_rejects_tall() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(orthonormal_rows(&mut rng, 8, 4).is_err());
    }
}
