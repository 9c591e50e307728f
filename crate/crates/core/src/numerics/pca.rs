use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{symmetric_eigen, Matrix};

/// Principal directions of a fitted data set.
///
/// `components` is `k x d` with orthonormal rows ordered by descending
/// `explained_variance` (covariance eigenvalues with an `n - 1` denominator).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
}

/// Fits PCA through the eigendecomposition of the sample covariance.
///
/// `k` is clamped to `min(k, n - 1, d)`. Each component is flipped so its
/// largest-magnitude entry is positive, which makes stored models
/// reproducible.
pub fn pca_fit(data: &Matrix, k: usize) -> Result<PcaModel> {
    let (n, d) = (data.rows(), data.cols());
    if n < 2 {
        return Err(Error::invalid(format!("PCA needs at least 2 samples, got {n}")));
    }
    if k == 0 || d == 0 {
        return Err(Error::invalid("PCA needs k >= 1 and d >= 1"));
    }
    if data.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("PCA input contains non-finite values"));
    }
    let k = k.min(n - 1).min(d);

    let mean = data.column_means();
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for row in data.iter_rows() {
        for (c, (x, m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centered[i];
            let cov_row = cov.row_mut(i);
            for j in i..d {
                cov_row[j] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / denom;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }

    let (values, vectors) = symmetric_eigen(&cov)?;
    let mut components = Matrix::zeros(k, d);
    for r in 0..k {
        let src = vectors.row(r);
        let mut pivot = 0;
        for (j, v) in src.iter().enumerate() {
            if v.abs() > src[pivot].abs() {
                pivot = j;
            }
        }
        let sign = if src[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (dst, v) in components.row_mut(r).iter_mut().zip(src) {
            *dst = sign * v;
        }
    }
    let explained_variance = values[..k].iter().map(|v| v.max(0.0)).collect();
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.components.rows()
    }

    /// Projects mean-centred rows onto the components.
    pub fn transform(&self, data: &Matrix) -> Result<Matrix> {
        if data.cols() != self.dim() {
            return Err(Error::invalid(format!(
                "PCA model expects {} columns, got {}",
                self.dim(),
                data.cols()
            )));
        }
        let k = self.n_components();
        let mut out = Matrix::zeros(data.rows(), k);
        let mut centered = vec![0.0; self.dim()];
        for (i, row) in data.iter_rows().enumerate() {
            for (c, (x, m)) in centered.iter_mut().zip(row.iter().zip(&self.mean)) {
                *c = x - m;
            }
            for r in 0..k {
                let comp = self.components.row(r);
                out.set(i, r, comp.iter().zip(&centered).map(|(a, b)| a * b).sum());
            }
        }
        Ok(out)
    }

    /// Maps reduced coordinates back to the input space.
    pub fn inverse_transform(&self, reduced: &Matrix) -> Result<Matrix> {
        if reduced.cols() != self.n_components() {
            return Err(Error::invalid("reduced data has wrong width"));
        }
        let mut out = Matrix::zeros(reduced.rows(), self.dim());
        for i in 0..reduced.rows() {
            let row = out.row_mut(i);
            row.copy_from_slice(&self.mean);
            for r in 0..self.n_components() {
                let z = reduced.get(i, r);
                for (o, c) in row.iter_mut().zip(self.components.row(r)) {
                    *o += z * c;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn diagonal_covariance_gives_axis_vectors() {
        // Mean-zero columns with variances 1, 9, 4.
        let data = Matrix::from_rows(&[
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 3.0, 0.0],
            [0.0, -3.0, 0.0],
            [0.0, 0.0, 2.0],
            [0.0, 0.0, -2.0],
        ])
        .unwrap();
        let model = pca_fit(&data, 3).unwrap();
        assert_eq!(model.components.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(model.components.row(1), &[0.0, 0.0, 1.0]);
        assert_eq!(model.components.row(2), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn diagonal_line_component() {
        let data = Matrix::from_rows(&[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]).unwrap();
        let model = pca_fit(&data, 1).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((model.components.get(0, 0) - h).abs() < 1e-12);
        assert!((model.components.get(0, 1) - h).abs() < 1e-12);
        assert!((model.explained_variance[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn transform_of_mean_is_zero_and_roundtrip_is_exact() {
        let data = random_matrix(12, 5, 3);
        let model = pca_fit(&data, 5).unwrap();
        let mean = Matrix::new(1, 5, model.mean.clone()).unwrap();
        let z = model.transform(&mean).unwrap();
        assert!(z.as_slice().iter().all(|v| v.abs() < 1e-15));
        let back = model.inverse_transform(&model.transform(&data).unwrap()).unwrap();
        for (a, b) in back.as_slice().iter().zip(data.as_slice()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn identity_model_is_passthrough() {
        let model = PcaModel {
            mean: vec![0.0; 3],
            components: Matrix::identity(3),
            explained_variance: vec![1.0; 3],
        };
        let data = random_matrix(4, 3, 9);
        assert_eq!(model.transform(&data).unwrap(), data);
    }

    #[test]
    fn k_is_clamped_and_errors_reported() {
        let data = random_matrix(4, 6, 1);
        assert_eq!(pca_fit(&data, 50).unwrap().n_components(), 3);
        assert!(pca_fit(&random_matrix(1, 3, 1), 1).is_err());
        let model = pca_fit(&data, 2).unwrap();
        assert!(model.transform(&random_matrix(2, 5, 1)).is_err());
    }

    #[test]
    fn components_orthonormal_and_variance_sorted() {
        let data = random_matrix(30, 8, 5);
        let model = pca_fit(&data, 8).unwrap();
        let gram = model.components.matmul(&model.components.transpose()).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram.get(i, j) - expect).abs() < 1e-8);
            }
        }
        assert!(model.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        assert!(model.explained_variance.iter().all(|v| *v >= 0.0));
    }
}
