//! Householder QR with access to the full orthogonal factor.
//!
//! `nalgebra`'s QR only exposes the thin Q, which is not enough for
//! null-space computations, so the factorization is implemented here.
//! For a tall matrix A (m >= n, full column rank) we store the
//! Householder reflectors in-place and provide:
//!
//! * least-norm solutions of `A^T x = b`,
//! * an orthonormal basis of the null space of `A^T`,
//! * least-squares solutions of `A y = r`.

use nalgebra::{DMatrix, DVector};

/// QR factorization of a tall matrix (`m >= n`) via Householder reflectors.
pub struct HouseholderQr {
    /// m x n; upper triangle holds R, columns below the diagonal hold the
    /// reflector vectors (with implicit unit leading entry).
    factors: DMatrix<f64>,
    /// Reflector coefficients; `beta[k] == 0.0` marks an identity reflector.
    betas: Vec<f64>,
    m: usize,
    n: usize,
}

/// Rank deficiency detected during factorization or solve.
#[derive(Debug, Clone, PartialEq)]
pub struct RankDeficient {
    pub column: usize,
    pub pivot: f64,
}

impl HouseholderQr {
    pub fn new(a: DMatrix<f64>) -> Self {
        let (m, n) = a.shape();
        assert!(m >= n, "HouseholderQr requires a tall matrix, got {m}x{n}");
        let mut factors = a;
        let mut betas = vec![0.0; n];

        for k in 0..n {
            // Build the reflector annihilating column k below the diagonal.
            let mut norm2 = 0.0;
            for i in k..m {
                let v = factors[(i, k)];
                norm2 += v * v;
            }
            let norm = norm2.sqrt();
            if norm == 0.0 {
                betas[k] = 0.0;
                continue;
            }
            let akk = factors[(k, k)];
            let alpha = if akk >= 0.0 { -norm } else { norm };
            let v0 = akk - alpha;
            // Normalize so the leading entry of v is 1.
            for i in (k + 1)..m {
                factors[(i, k)] /= v0;
            }
            betas[k] = -v0 / alpha;
            factors[(k, k)] = alpha;

            // Apply H_k = I - beta v v^T to the trailing columns.
            for j in (k + 1)..n {
                let mut dot = factors[(k, j)];
                for i in (k + 1)..m {
                    dot += factors[(i, k)] * factors[(i, j)];
                }
                let s = betas[k] * dot;
                factors[(k, j)] -= s;
                for i in (k + 1)..m {
                    let vik = factors[(i, k)];
                    factors[(i, j)] -= s * vik;
                }
            }
        }

        Self { factors, betas, m, n }
    }

    fn check_rank(&self) -> Result<(), RankDeficient> {
        let scale = (0..self.n)
            .map(|k| self.factors[(k, k)].abs())
            .fold(0.0, f64::max)
            .max(1.0);
        for k in 0..self.n {
            let pivot = self.factors[(k, k)].abs();
            if pivot <= 1e-12 * scale {
                return Err(RankDeficient { column: k, pivot });
            }
        }
        Ok(())
    }

    /// x <- Q x (apply H_1 ... H_n in reverse order).
    pub fn apply_q(&self, x: &mut DVector<f64>) {
        assert_eq!(x.len(), self.m);
        for k in (0..self.n).rev() {
            let beta = self.betas[k];
            if beta == 0.0 {
                continue;
            }
            let mut dot = x[k];
            for i in (k + 1)..self.m {
                dot += self.factors[(i, k)] * x[i];
            }
            let s = beta * dot;
            x[k] -= s;
            for i in (k + 1)..self.m {
                x[i] -= s * self.factors[(i, k)];
            }
        }
    }

    /// x <- Q^T x (apply H_1 ... H_n in order).
    pub fn apply_q_transpose(&self, x: &mut DVector<f64>) {
        assert_eq!(x.len(), self.m);
        for k in 0..self.n {
            let beta = self.betas[k];
            if beta == 0.0 {
                continue;
            }
            let mut dot = x[k];
            for i in (k + 1)..self.m {
                dot += self.factors[(i, k)] * x[i];
            }
            let s = beta * dot;
            x[k] -= s;
            for i in (k + 1)..self.m {
                x[i] -= s * self.factors[(i, k)];
            }
        }
    }

    /// Least-norm solution of `A^T x = b` where `A = Q R` is the factored
    /// matrix: `x = Q [R^{-T} b; 0]`.
    pub fn least_norm_solve_transposed(&self, b: &DVector<f64>) -> Result<DVector<f64>, RankDeficient> {
        assert_eq!(b.len(), self.n);
        self.check_rank()?;
        // Forward substitution with R^T (lower triangular).
        let mut w = DVector::zeros(self.m);
        for i in 0..self.n {
            let mut s = b[i];
            for j in 0..i {
                s -= self.factors[(j, i)] * w[j];
            }
            w[i] = s / self.factors[(i, i)];
        }
        self.apply_q(&mut w);
        Ok(w)
    }

    /// Least-squares solution of `A y = r`: `y = R^{-1} (Q^T r)[..n]`.
    pub fn least_squares_solve(&self, r: &DVector<f64>) -> Result<DVector<f64>, RankDeficient> {
        assert_eq!(r.len(), self.m);
        self.check_rank()?;
        let mut qtr = r.clone();
        self.apply_q_transpose(&mut qtr);
        let mut y = DVector::zeros(self.n);
        for i in (0..self.n).rev() {
            let mut s = qtr[i];
            for j in (i + 1)..self.n {
                s -= self.factors[(i, j)] * y[j];
            }
            y[i] = s / self.factors[(i, i)];
        }
        Ok(y)
    }

    /// Orthonormal basis of the null space of `A^T` as an `m x (m - n)`
    /// matrix: the trailing columns of the full Q.
    pub fn null_space_basis(&self) -> DMatrix<f64> {
        let cols = self.m - self.n;
        let mut z = DMatrix::zeros(self.m, cols);
        let mut work = DVector::zeros(self.m);
        for c in 0..cols {
            work.fill(0.0);
            work[self.n + c] = 1.0;
            self.apply_q(&mut work);
            z.set_column(c, &work);
        }
        z
    }
}
