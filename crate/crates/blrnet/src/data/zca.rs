//! ZCA whitening, `x -> (x - mean) U (L + eps I)^(-1/2) U^T`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct Zca {
    mean: Vec<f64>,
    transform: DMatrix<f64>,
}

impl Zca {
    /// Fits on row-major samples of dimension `dim`.
    pub fn fit(data: &[f64], dim: usize, eps: f64) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 || data.len() / dim < 2 {
            return Err(Error::Config(format!("cannot fit ZCA on {} values of dimension {}", data.len(), dim)));
        }
        if !(eps >= 0.0) {
            return Err(Error::Config("ZCA epsilon must be non-negative".into()));
        }
        let n = data.len() / dim;
        let x = DMatrix::from_row_slice(n, dim, data);
        let mean: Vec<f64> = (0..dim).map(|j| x.column(j).sum() / n as f64).collect();
        let mut centered = x;
        for j in 0..dim {
            centered.column_mut(j).add_scalar_mut(-mean[j]);
        }
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let inv_sqrt = eig.eigenvalues.map(|l| {
            let v = l.max(0.0) + eps;
            if v > 0.0 {
                1.0 / v.sqrt()
            } else {
                0.0
            }
        });
        let u = &eig.eigenvectors;
        let transform = u * DMatrix::from_diagonal(&inv_sqrt) * u.transpose();
        Ok(Self { mean, transform })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Whitens row-major samples in place.
    pub fn apply(&self, data: &mut [f64]) {
        let d = self.dim();
        let n = data.len() / d;
        let mut x = DMatrix::from_row_slice(n, d, data);
        for j in 0..d {
            x.column_mut(j).add_scalar_mut(-self.mean[j]);
        }
        let y = x * &self.transform;
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] = y[(i, j)];
            }
        }
    }
}
