//! Regularized normal equations for the per-pixel 3-parameter linear fit.

use super::MAX_CHANNELS;

/// Running `XᵀX` and `XᵀY` for rows `[du, dv, 1]` with per-channel targets.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalEquations {
    xtx: [[f64; 3]; 3],
    xty: [[f64; MAX_CHANNELS]; 3],
    rows: usize,
}

impl NormalEquations {
    #[inline]
    pub fn add(&mut self, du: f64, dv: f64, dy: &[f64]) {
        let x = [du, dv, 1.0];
        for i in 0..3 {
            for j in i..3 {
                self.xtx[i][j] += x[i] * x[j];
            }
            for (ch, &y) in dy.iter().enumerate() {
                self.xty[i][ch] += x[i] * y;
            }
        }
        self.rows += 1;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// `XᵀX + εE` (full symmetric matrix).
    pub fn regularized_gram(&self, epsilon: f64) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in i..3 {
                m[i][j] = self.xtx[i][j];
                m[j][i] = self.xtx[i][j];
            }
            m[i][i] += epsilon;
        }
        m
    }

    pub fn rhs(&self) -> [[f64; MAX_CHANNELS]; 3] {
        self.xty
    }

    /// `A = (XᵀX + εE)⁻¹ XᵀY`, one column per channel.
    pub fn solve(&self, epsilon: f64, channels: usize) -> [[f64; MAX_CHANNELS]; 3] {
        let m = self.regularized_gram(epsilon);
        let mut a = [[0.0; MAX_CHANNELS]; 3];
        if self.rows == 0 {
            return a;
        }
        let l = cholesky3(&m);
        for ch in 0..channels {
            let x = cholesky3_solve(&l, [self.xty[0][ch], self.xty[1][ch], self.xty[2][ch]]);
            for r in 0..3 {
                a[r][ch] = x[r];
            }
        }
        a
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite 3x3 matrix.
fn cholesky3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let l00 = m[0][0].sqrt();
    let l10 = m[1][0] / l00;
    let l20 = m[2][0] / l00;
    let l11 = (m[1][1] - l10 * l10).sqrt();
    let l21 = (m[2][1] - l20 * l10) / l11;
    let l22 = (m[2][2] - l20 * l20 - l21 * l21).sqrt();
    [[l00, 0.0, 0.0], [l10, l11, 0.0], [l20, l21, l22]]
}

fn cholesky3_solve(l: &[[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let y0 = b[0] / l[0][0];
    let y1 = (b[1] - l[1][0] * y0) / l[1][1];
    let y2 = (b[2] - l[2][0] * y0 - l[2][1] * y1) / l[2][2];
    let x2 = y2 / l[2][2];
    let x1 = (y1 - l[2][1] * x2) / l[1][1];
    let x0 = (y0 - l[1][0] * x1 - l[2][0] * x2) / l[0][0];
    [x0, x1, x2]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat_vec(m: &[[f64; 3]; 3], x: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|i| (0..3).map(|j| m[i][j] * x[j]).sum())
    }

    #[test]
    fn solve_residual_is_tiny() {
        let mut ne = NormalEquations::default();
        let pts = [(0.1, 0.02, 0.3), (-0.05, 0.07, -0.1), (0.03, -0.09, 0.2), (0.0, 0.04, 0.05)];
        for &(u, v, y) in &pts {
            ne.add(u, v, &[y]);
        }
        let eps = 1e-6;
        let a = ne.solve(eps, 1);
        let m = ne.regularized_gram(eps);
        let r = mat_vec(&m, [a[0][0], a[1][0], a[2][0]]);
        for i in 0..3 {
            assert!((r[i] - ne.rhs()[i][0]).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_system_gives_zero() {
        let ne = NormalEquations::default();
        assert_eq!(ne.solve(1e-6, 3), [[0.0; MAX_CHANNELS]; 3]);
    }

    #[test]
    fn regularization_bounds_smallest_eigenvalue() {
        // x^T M x >= eps |x|^2 for a rank-deficient gram (all rows identical)
        let mut ne = NormalEquations::default();
        for _ in 0..5 {
            ne.add(0.2, 0.2, &[0.0]);
        }
        let eps = 1e-6;
        let m = ne.regularized_gram(eps);
        for x in [[1.0, -1.0, 0.0], [1.0, 1.0, -0.4], [0.0, 0.0, 1.0]] {
            let q: f64 = x.iter().zip(mat_vec(&m, x)).map(|(a, b)| a * b).sum();
            let n2: f64 = x.iter().map(|v| v * v).sum();
            assert!(q >= eps * n2 * (1.0 - 1e-9));
        }
    }
}
