//! Singular value decomposition via one-sided Jacobi, plus spectral and
//! nuclear norms.
//!
//! One-sided Jacobi orthogonalizes the columns of the working matrix with
//! cyclic plane rotations; adequate and very accurate at desk scale. The
//! spectral norm uses power iteration on AᵀA; the nuclear norm sums all
//! singular values of a full decomposition.

use crate::tensor::{Error, Result, Tensor};

/// Iteration cap for Jacobi sweeps.
const MAX_SWEEPS: usize = 60;
/// A column pair counts as orthogonal once |⟨bₚ,b_q⟩| ≤ JACOBI_TOL·‖bₚ‖‖b_q‖.
const JACOBI_TOL: f64 = 1e-12;

/// Top-r singular triplets of a matrix.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// m×r, orthonormal columns.
    pub left: Tensor,
    /// Nonincreasing, nonnegative.
    pub singular_values: Vec<f64>,
    /// n×r, orthonormal columns.
    pub right: Tensor,
}

impl SvdResult {
    /// left·diag(s)·rightᵀ.
    pub fn reconstruct(&self) -> Tensor {
        let r = self.singular_values.len();
        let m = self.left.rows();
        let n = self.right.rows();
        let mut out = Tensor::zeros(vec![m, n]);
        for k in 0..r {
            let s = self.singular_values[k];
            for i in 0..m {
                let u = self.left.at2(i, k) * s;
                if u == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let v = out.at2(i, j) + u * self.right.at2(j, k);
                    out.set2(i, j, v);
                }
            }
        }
        out
    }

    fn truncate(&self, r: usize) -> SvdResult {
        let m = self.left.rows();
        let n = self.right.rows();
        let mut left = Tensor::zeros(vec![m, r]);
        let mut right = Tensor::zeros(vec![n, r]);
        for k in 0..r {
            for i in 0..m {
                left.set2(i, k, self.left.at2(i, k));
            }
            for j in 0..n {
                right.set2(j, k, self.right.at2(j, k));
            }
        }
        SvdResult {
            left,
            singular_values: self.singular_values[..r].to_vec(),
            right,
        }
    }
}

/// Top-r SVD. Sign convention: the largest-magnitude entry of each left
/// singular vector is nonnegative, ties broken by lowest index.
pub fn svd(a: &Tensor, r: usize) -> Result<SvdResult> {
    let (m, n) = (a.rows(), a.cols());
    if r < 1 || r > m.min(n) {
        return Err(Error::InvalidArg(format!(
            "rank {r} out of range for {m}×{n} matrix (valid: 1..={})",
            m.min(n)
        )));
    }
    Ok(svd_full(a)?.truncate(r))
}

/// Full SVD with min(m,n) triplets.
pub fn svd_full(a: &Tensor) -> Result<SvdResult> {
    let (m, n) = (a.rows(), a.cols());
    let mut res = if m >= n {
        jacobi_tall(a)?
    } else {
        let t = jacobi_tall(&a.transpose())?;
        SvdResult {
            left: t.right,
            singular_values: t.singular_values,
            right: t.left,
        }
    };
    fix_signs(&mut res);
    Ok(res)
}

/// One-sided Jacobi on a tall (m ≥ n) matrix.
fn jacobi_tall(a: &Tensor) -> Result<SvdResult> {
    let (m, n) = (a.rows(), a.cols());
    debug_assert!(m >= n);
    // Column-major working copies: b[j] is the j-th column of A, v[j] the
    // j-th column of the accumulated right factor.
    let mut b: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at2(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut residual = 0.0f64;
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        converged = true;
        residual = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    alpha += b[p][i] * b[p][i];
                    beta += b[q][i] * b[q][i];
                    gamma += b[p][i] * b[q][i];
                }
                let scale = (alpha * beta).sqrt();
                if scale == 0.0 {
                    continue;
                }
                let off = gamma.abs() / scale;
                residual = residual.max(off);
                if off <= JACOBI_TOL {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let bp = b[p][i];
                    let bq = b[q][i];
                    b[p][i] = c * bp - s * bq;
                    b[q][i] = s * bp + c * bq;
                }
                for i in 0..n {
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps: MAX_SWEEPS, residual });
    }

    let mut sigma: Vec<f64> = b
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
    let b: Vec<Vec<f64>> = order.iter().map(|&j| b[j].clone()).collect();
    let v: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();
    sigma = order.iter().map(|&j| sigma[j]).collect();

    // Normalize columns into U; complete zero columns to an orthonormal set.
    let mut left = Tensor::zeros(vec![m, n]);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let tiny = f64::MIN_POSITIVE.sqrt();
    for j in 0..n {
        if sigma[j] > tiny {
            ucols.push(b[j].iter().map(|x| x / sigma[j]).collect());
        } else {
            sigma[j] = 0.0;
            ucols.push(complete_column(m, &ucols));
        }
    }
    for (j, col) in ucols.iter().enumerate() {
        for i in 0..m {
            left.set2(i, j, col[i]);
        }
    }
    let mut right = Tensor::zeros(vec![n, n]);
    for (j, col) in v.iter().enumerate() {
        for i in 0..n {
            right.set2(i, j, col[i]);
        }
    }
    Ok(SvdResult { left, singular_values: sigma, right })
}

/// Unit vector orthogonal to all of `existing`, found by Gram–Schmidt on
/// canonical basis vectors.
fn complete_column(m: usize, existing: &[Vec<f64>]) -> Vec<f64> {
    for k in 0..m {
        let mut cand = vec![0.0; m];
        cand[k] = 1.0;
        for col in existing {
            let proj: f64 = cand.iter().zip(col).map(|(a, b)| a * b).sum();
            for i in 0..m {
                cand[i] -= proj * col[i];
            }
        }
        let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            return cand.iter().map(|x| x / norm).collect();
        }
    }
    unreachable!("orthonormal completion always exists for fewer than m columns");
}

fn fix_signs(res: &mut SvdResult) {
    let m = res.left.rows();
    let n = res.right.rows();
    for k in 0..res.singular_values.len() {
        let mut best = 0usize;
        let mut best_abs = res.left.at2(0, k).abs();
        for i in 1..m {
            let a = res.left.at2(i, k).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if res.left.at2(best, k) < 0.0 {
            for i in 0..m {
                let v = -res.left.at2(i, k);
                res.left.set2(i, k, v);
            }
            for j in 0..n {
                let v = -res.right.at2(j, k);
                res.right.set2(j, k, v);
            }
        }
    }
}

/// Largest singular value via power iteration on AᵀA, relative tolerance
/// 1e-10.
pub fn spectral_norm(a: &Tensor) -> f64 {
    let (m, n) = (a.rows(), a.cols());
    // Deterministic, slightly tilted start so it is never orthogonal to the
    // top singular direction by symmetry.
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 1e-3 * i as f64).collect();
    let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut x {
        *v /= norm;
    }
    let mut sigma = 0.0f64;
    for _ in 0..100_000 {
        // y = A x (x is unit, so ‖y‖ estimates σ₁)
        let mut y = vec![0.0; m];
        for i in 0..m {
            let mut s = 0.0;
            for j in 0..n {
                s += a.at2(i, j) * x[j];
            }
            y[i] = s;
        }
        let ynorm: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if ynorm == 0.0 {
            return 0.0;
        }
        // x ← Aᵀ y / ‖Aᵀ y‖
        let mut z = vec![0.0; n];
        for i in 0..m {
            let yi = y[i];
            for j in 0..n {
                z[j] += a.at2(i, j) * yi;
            }
        }
        let znorm: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if znorm == 0.0 {
            return ynorm;
        }
        for j in 0..n {
            x[j] = z[j] / znorm;
        }
        if (ynorm - sigma).abs() <= 1e-10 * ynorm {
            return ynorm;
        }
        sigma = ynorm;
    }
    sigma
}

/// Sum of all singular values.
pub fn nuclear_norm(a: &Tensor) -> f64 {
    let res = svd_full(a).expect("svd convergence");
    res.singular_values.iter().sum()
}
