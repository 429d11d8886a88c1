//! Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! Orthogonalizes the columns of `A` in place while accumulating the same
//! rotations into `V`; at convergence the column norms are the singular
//! values. One-sided Jacobi computes small singular values to high relative
//! accuracy, which the rank tests of rank-n gradient sums depend on.

use alloc::vec;
use alloc::vec::Vec;

use super::Matrix;
use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 80;

/// Thin SVD `A = U · diag(s) · Vᵀ` with `k = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows x k`, orthonormal columns (columns for zero singular values are zero).
    pub u: Matrix,
    /// Singular values, descending.
    pub s: Vec<f64>,
    /// `cols x k`, orthonormal columns.
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let (m, k) = self.u.shape();
        let n = self.v.rows();
        let mut out = Matrix::zeros(m, n);
        for j in 0..k {
            if self.s[j] == 0.0 {
                continue;
            }
            let uj = self.u.col(j);
            let vj = self.v.col(j);
            out.add_outer(self.s[j], &uj, &vj);
        }
        out
    }
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    if !a.is_finite() {
        return Err(Error::NonFinite { what: "svd input" });
    }
    if a.rows() >= a.cols() {
        jacobi(a)
    } else {
        let t = jacobi(&a.transpose())?;
        Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        })
    }
}

pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(a)?.s)
}

/// Number of singular values above `tol`, defaulting to
/// `max(rows, cols) · ε · σ_max`.
pub fn numerical_rank(a: &Matrix, tol: Option<f64>) -> Result<usize> {
    let s = singular_values(a)?;
    let smax = s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return Ok(0);
    }
    let tol = tol.unwrap_or_else(|| a.rows().max(a.cols()) as f64 * f64::EPSILON * smax);
    Ok(s.iter().filter(|&&sv| sv > tol).count())
}

// Requires rows >= cols.
fn jacobi(a: &Matrix) -> Result<Svd> {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| a.col(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    // Columns below ε·‖A‖_F are rounding residue: their norms sit under any
    // rank tolerance, and rotating them against each other never settles.
    let frob = a.frobenius_norm();
    let negligible = (f64::EPSILON * frob) * (f64::EPSILON * frob);

    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(Error::SvdNoConvergence { sweeps });
        }
        sweeps += 1;
        converged = true;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = gram(&cols[p], &cols[q]);
                if gamma == 0.0 || alpha <= negligible || beta <= negligible {
                    continue;
                }
                if gamma.abs() <= f64::EPSILON * libm::sqrt(alpha) * libm::sqrt(beta) {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, col)| (super::l2_norm(col), j))
        .collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

    let mut u_out = Matrix::zeros(m, n);
    let mut v_out = Matrix::zeros(n, n);
    let mut s_out = Vec::with_capacity(n);
    for (k, &(sigma, j)) in order.iter().enumerate() {
        s_out.push(sigma);
        if sigma > 0.0 {
            for r in 0..m {
                u_out[(r, k)] = cols[j][r] / sigma;
            }
        }
        for r in 0..n {
            v_out[(r, k)] = v[j][r];
        }
    }
    Ok(Svd {
        u: u_out,
        s: s_out,
        v: v_out,
    })
}

fn gram(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut a = 0.0;
    let mut b = 0.0;
    let mut g = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        a += xi * xi;
        b += yi * yi;
        g += xi * yi;
    }
    (a, b, g)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (xp, xq) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *xp;
        let b = *xq;
        *xp = c * a - s * b;
        *xq = s * a + c * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::outer;
    use crate::rng::Gaussian;

    #[test]
    fn rank_one_with_sparse_factor_converges() {
        let x = [
            -1.187606828248443e-5,
            -2.2407001791777183e-5,
            3.979885728600856e-5,
            1.8750872947891085e-5,
            -1.3099263952643252e-5,
            1.379185683362126e-5,
            9.11986891723572e-6,
            -9.116395512240347e-6,
        ];
        let mut d = [0.0; 16];
        d[2] = 1.0;
        d[6] = 0.9630222;
        d[10] = 0.300064;
        d[11] = 0.005252638;
        assert_eq!(numerical_rank(&outer(&x, &d), None).unwrap(), 1);
        assert_eq!(numerical_rank(&outer(&d, &x), None).unwrap(), 1);
    }

    #[test]
    fn rank_examples() {
        assert_eq!(
            numerical_rank(&outer(&[1.0, 2.0], &[3.0, 4.0]), None).unwrap(),
            1
        );
        assert_eq!(numerical_rank(&Matrix::zeros(4, 4), None).unwrap(), 0);
    }

    #[test]
    fn three_random_outer_products_have_rank_three() {
        let mut g = Gaussian::new(7, 1.0);
        let mut m = Matrix::zeros(16, 64);
        for _ in 0..3 {
            let x = g.vector(16);
            let d = g.vector(64);
            m.add_outer(1.0, &x, &d);
        }
        assert_eq!(numerical_rank(&m, None).unwrap(), 3);
        assert_eq!(numerical_rank(&m.transpose(), None).unwrap(), 3);
    }

    #[test]
    fn known_singular_values() {
        let a = Matrix::from_vec(3, 2, vec![3.0, 0.0, 0.0, -2.0, 0.0, 0.0]).unwrap();
        let s = singular_values(&a).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-15 && (s[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_256() {
        let mut g = Gaussian::new(11, 1.0);
        let a = Matrix::from_fn(256, 256, |_, _| g.sample());
        let d = svd(&a).unwrap();
        let err = d.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
        assert!(err <= 1e-12, "relative reconstruction error {err}");
        let utu = d.u.transpose().matmul(&d.u).unwrap();
        assert!(utu.sub(&Matrix::identity(256)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let mut a = Matrix::zeros(2, 2);
        a.data_mut()[0] = f64::INFINITY;
        assert!(svd(&a).is_err());
    }
}
