//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Used only to initialize factorized layers, never differentiated through.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 80;

/// `a = u · diag(sigma) · vᵀ` with `u: h×r`, `v: w×r`, `r = min(h, w)`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Tensor,
    pub sigma: Vec<f64>,
    pub v: Tensor,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `u · diag(sigma) · vᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let h = self.u.shape()[0];
        let w = self.v.shape()[0];
        let r = self.sigma.len();
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                out[i * w + j] = (0..r)
                    .map(|g| self.u.get2(i, g) * self.sigma[g] * self.v.get2(j, g))
                    .sum();
            }
        }
        Tensor::from_parts(vec![h, w], out)
    }
}

/// Computes the thin SVD of an `h×w` matrix.
///
/// Singular values come back sorted descending; each left singular vector is
/// signed so that its largest-magnitude entry is non-negative.
pub fn svd(a: &Tensor) -> Result<SvdResult> {
    let (h, w) = a.matrix_dims("svd")?;
    if !a.is_finite() {
        return Err(Error::Numeric("svd input contains non-finite values".into()));
    }
    if h >= w {
        let cols = columns(a.data(), h, w);
        let (u, sigma, v) = jacobi_tall(cols, h)?;
        Ok(finish(u, sigma, v, h, w))
    } else {
        // A = U S Vᵀ  <=>  Aᵀ = V S Uᵀ
        let mut at = vec![Vec::with_capacity(w); h];
        for (i, col) in at.iter_mut().enumerate() {
            col.extend_from_slice(&a.data()[i * w..(i + 1) * w]);
        }
        let (v, sigma, u) = jacobi_tall(at, w)?;
        Ok(finish(u, sigma, v, h, w))
    }
}

fn columns(data: &[f64], h: usize, w: usize) -> Vec<Vec<f64>> {
    (0..w)
        .map(|j| (0..h).map(|i| data[i * w + j]).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-sided Jacobi on the columns of a tall `m×n` matrix (`m ≥ n`).
/// Returns left vectors (n columns of length m), singular values, right vectors (n columns of length n).
#[allow(clippy::type_complexity)]
fn jacobi_tall(mut cols: Vec<Vec<f64>>, m: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let n = cols.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * (m as f64).sqrt();
    // columns this small are rounding noise of a rank-deficient input; rotating them never settles
    let total: f64 = cols.iter().map(|c| dot(c, c)).sum();
    let negligible = total * f64::EPSILON * f64::EPSILON * (m * n) as f64;
    let mut converged = n < 2;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        residual = 0.0_f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let smax = sigma.iter().copied().fold(0.0, f64::max);
    let cutoff = smax * f64::EPSILON * (m.max(n) as f64);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));

    let mut u: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sig = Vec::with_capacity(n);
    let mut vv = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for &j in &order {
        if sigma[j] > cutoff && sigma[j] > 0.0 {
            u.push(cols[j].iter().map(|x| x / sigma[j]).collect());
            sig.push(sigma[j]);
        } else {
            deficient.push(u.len());
            u.push(Vec::new());
            sig.push(0.0);
        }
        vv.push(v[j].clone());
    }
    complete_basis(&mut u, &deficient, m);
    Ok((u, sig, vv))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the listed (empty) columns with unit vectors orthogonal to every other column.
fn complete_basis(u: &mut [Vec<f64>], missing: &[usize], m: usize) {
    let mut candidate = 0;
    for &slot in missing {
        loop {
            assert!(candidate < m, "basis completion ran out of candidates");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of Gram-Schmidt for stability
            for _ in 0..2 {
                for (k, col) in u.iter().enumerate() {
                    if k == slot || col.is_empty() {
                        continue;
                    }
                    let proj = dot(&e, col);
                    for (x, c) in e.iter_mut().zip(col) {
                        *x -= proj * c;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                u[slot] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

fn finish(mut u: Vec<Vec<f64>>, sigma: Vec<f64>, mut v: Vec<Vec<f64>>, h: usize, w: usize) -> SvdResult {
    let r = sigma.len();
    for (uc, vc) in u.iter_mut().zip(v.iter_mut()) {
        let lead = uc
            .iter()
            .copied()
            .fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if lead < 0.0 {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let to_matrix = |cols: &[Vec<f64>], rows: usize| {
        let mut data = vec![0.0; rows * r];
        for (j, col) in cols.iter().enumerate() {
            for (i, &x) in col.iter().enumerate() {
                data[i * r + j] = x;
            }
        }
        Tensor::from_parts(vec![rows, r], data)
    };
    SvdResult {
        u: to_matrix(&u, h),
        sigma,
        v: to_matrix(&v, w),
    }
}
