//! Principal component analysis over small sample sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Fitted PCA: mean, principal axes (columns, by decreasing variance) and the
/// per-axis variances.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: DVector<f64>,
    pub components: DMatrix<f64>,
    pub variances: Vec<f64>,
}

impl Pca {
    /// Fits on `rows` (all the same length). Variances use the population
    /// convention (divide by the number of rows).
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let dim = rows[0].len();
        let data = DMatrix::from_fn(n, dim, |i, j| rows[i][j]);
        let mean = DVector::from_fn(dim, |j, _| data.column(j).mean());
        let mut centred = data;
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centred.transpose() * &centred / n as f64;
        let eig = SymmetricEigen::new(cov);

        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let components = DMatrix::from_fn(dim, dim, |i, j| eig.eigenvectors[(i, order[j])]);
        let variances = order
            .iter()
            .map(|&k| eig.eigenvalues[k].max(0.0))
            .collect();
        Self {
            mean,
            components,
            variances,
        }
    }

    pub fn total_variance(&self) -> f64 {
        self.variances.iter().sum()
    }

    /// Cumulative explained-variance ratio of the first `k` components. A
    /// sample set with no variance is fully explained by any count.
    pub fn explained_ratio(&self, k: usize) -> f64 {
        let total = self.total_variance();
        if total <= 0.0 {
            return 1.0;
        }
        self.variances[..k].iter().sum::<f64>() / total
    }

    /// Smallest count (at least one) whose explained ratio reaches `target`.
    pub fn components_for(&self, target: f64) -> usize {
        (1..=self.variances.len())
            .find(|&k| self.explained_ratio(k) >= target)
            .unwrap_or(self.variances.len())
    }

    /// Projects `x` onto the first `k` axes and maps back.
    pub fn reconstruct(&self, x: &[f64], k: usize) -> Vec<f64> {
        let x = DVector::from_column_slice(x);
        let basis = self.components.columns(0, k);
        let coeffs = basis.transpose() * (&x - &self.mean);
        let out = &self.mean + basis * coeffs;
        out.iter().copied().collect()
    }
}
