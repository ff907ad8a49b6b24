//! Small dense linear algebra on row-major `Vec<Vec<f64>>` matrices.

use nalgebra::{DMatrix, DVector};

/// Singular values below `REL_SINGULAR_TOL · σ_max` are treated as zero.
pub const REL_SINGULAR_TOL: f64 = 1e-10;
/// Absolute floor on the zero threshold for singular values.
pub const ABS_SINGULAR_FLOOR: f64 = 1e-14;

fn to_square(rows: &[Vec<f64>], cols: usize) -> DMatrix<f64> {
    // Zero rows are appended so the SVD yields a full set of right singular vectors.
    let r = rows.len().max(cols);
    DMatrix::from_fn(r, cols, |i, j| rows.get(i).map_or(0.0, |row| row[j]))
}

fn threshold(singular: &[f64]) -> f64 {
    let max = singular.iter().cloned().fold(0.0, f64::max);
    (REL_SINGULAR_TOL * max).max(ABS_SINGULAR_FLOOR)
}

/// Orthonormal basis of `{v ∈ ℝ^cols : rows·v = 0}`.
pub fn null_space(rows: &[Vec<f64>], cols: usize) -> Vec<Vec<f64>> {
    if cols == 0 {
        return Vec::new();
    }
    let svd = to_square(rows, cols).svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
    let tol = threshold(&sv);
    sv.iter()
        .enumerate()
        .filter(|(_, s)| **s <= tol)
        .map(|(i, _)| v_t.row(i).iter().cloned().collect())
        .collect()
}

/// Numerical rank with the same singular-value threshold as [`null_space`].
pub fn rank(rows: &[Vec<f64>], cols: usize) -> usize {
    if cols == 0 || rows.is_empty() {
        return 0;
    }
    let sv: Vec<f64> = to_square(rows, cols).singular_values().iter().cloned().collect();
    let tol = threshold(&sv);
    sv.iter().filter(|s| **s > tol).count()
}

/// `y = M·x`
pub fn mat_vec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// `y = Mᵀ·x`
pub fn mat_t_vec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let cols = m.first().map_or(0, Vec::len);
    (0..cols)
        .map(|j| m.iter().zip(x).map(|(row, xi)| row[j] * xi).sum())
        .collect()
}

/// Damped normal-equation step: solves `(JᵀJ + λI) δ = -Jᵀr`.
pub fn damped_least_squares_step(jac: &[Vec<f64>], residual: &[f64], lambda: f64) -> Option<Vec<f64>> {
    let cols = jac.first().map_or(0, Vec::len);
    let j = DMatrix::from_fn(jac.len(), cols, |i, k| jac[i][k]);
    let r = DVector::from_column_slice(residual);
    let mut normal = j.transpose() * &j;
    for i in 0..cols {
        normal[(i, i)] += lambda;
    }
    let rhs = -(j.transpose() * r);
    normal.cholesky().map(|c| c.solve(&rhs).iter().cloned().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::dot;

    #[test]
    fn kernel_of_row_vector() {
        let k = null_space(&[vec![0.0, -2.0]], 2);
        assert_eq!(k.len(), 1);
        assert!((k[0][0].abs() - 1.0).abs() < 1e-15);
        assert!(k[0][1].abs() < 1e-15);
    }

    #[test]
    fn kernel_of_zero_matrix_is_everything() {
        let k = null_space(&[vec![0.0, 0.0]], 2);
        assert_eq!(k.len(), 2);
        let gram = [
            [dot(&k[0], &k[0]), dot(&k[0], &k[1])],
            [dot(&k[1], &k[0]), dot(&k[1], &k[1])],
        ];
        assert!((gram[0][0] - 1.0).abs() < 1e-14 && (gram[1][1] - 1.0).abs() < 1e-14);
        assert!(gram[0][1].abs() < 1e-14);
    }

    #[test]
    fn kernel_full_rank_is_empty() {
        assert!(null_space(&[vec![1.0, 0.0], vec![1.0, 1.0]], 2).is_empty());
        assert_eq!(rank(&[vec![1.0, 0.0], vec![1.0, 1.0]], 2), 2);
    }

    #[test]
    fn wide_matrix_kernel() {
        let rows = vec![vec![1.0, 1.0, 0.0]];
        let k = null_space(&rows, 3);
        assert_eq!(k.len(), 2);
        for v in &k {
            assert!(mat_vec(&rows, v)[0].abs() < 1e-14);
        }
    }

    #[test]
    fn rank_threshold_is_relative() {
        assert_eq!(rank(&[vec![1.0, 0.0], vec![0.0, 1e-12]], 2), 1);
        assert_eq!(rank(&[vec![1e-13, 0.0], vec![0.0, 1e-13]], 2), 2);
        assert_eq!(rank(&[vec![1e-15, 0.0]], 2), 0);
    }

    #[test]
    fn damped_step_solves_square_system() {
        let step = damped_least_squares_step(&[vec![2.0, 0.0], vec![0.0, 4.0]], &[2.0, 4.0], 0.0).unwrap();
        assert!((step[0] + 1.0).abs() < 1e-15 && (step[1] + 1.0).abs() < 1e-15);
    }
}
