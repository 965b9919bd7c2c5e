//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{numerical, Error, Result};

/// Symmetric eigendecomposition with eigenvalues sorted ascending and the
/// eigenvector columns permuted to match.
pub fn sym_eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(numerical(format!("eigendecomposition of non-square {}x{} matrix", n, m.ncols())));
    }
    if n == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(numerical("eigendecomposition input has non-finite entries"));
    }
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    let norm = m.norm();
    if norm > 0.0 {
        let recon = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        let rel = (recon - m).norm() / norm;
        if !(rel <= 1e-10) {
            return Err(numerical(format!(
                "eigendecomposition reconstruction error {rel:.3e} (matrix norm {norm:.3e}, eigenvalue range [{:.3e}, {:.3e}])",
                vals[0],
                vals[n - 1]
            )));
        }
    }
    Ok((vals, vecs))
}

/// Thin SVD `X = U diag(σ) Vᵀ` with singular values descending.
/// Returns `(U, σ, V)` where `V` is `p × r`, `r = min(n, p)`.
pub fn thin_svd(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let (n, p) = x.shape();
    let r = n.min(p);
    if r == 0 {
        return Ok((DMatrix::zeros(n, 0), DVector::zeros(0), DMatrix::zeros(p, 0)));
    }
    let svd = x.clone().svd(true, true);
    let u = svd.u.ok_or_else(|| numerical("SVD did not return U"))?;
    let vt = svd.v_t.ok_or_else(|| numerical("SVD did not return Vᵀ"))?;
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let sigma = DVector::from_iterator(r, order.iter().map(|&i| sv[i]));
    let mut uu = DMatrix::zeros(n, r);
    let mut vv = DMatrix::zeros(p, r);
    for (dst, &src) in order.iter().enumerate() {
        uu.set_column(dst, &u.column(src));
        vv.set_column(dst, &vt.row(src).transpose());
    }
    let norm = x.norm();
    if norm > 0.0 {
        let recon = &uu * DMatrix::from_diagonal(&sigma) * vv.transpose();
        let rel = (recon - x).norm() / norm;
        if !(rel <= 1e-10) {
            return Err(numerical(format!("SVD reconstruction error {rel:.3e}")));
        }
    }
    Ok((uu, sigma, vv))
}

/// Gram–Schmidt on the given vectors. `names` label the inputs in the error
/// raised when one is (numerically) in the span of the previous ones.
pub fn orthonormalize(vectors: &[&DVector<f64>], names: &[&str]) -> Result<Vec<DVector<f64>>> {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(vectors.len());
    for (k, v) in vectors.iter().enumerate() {
        let scale = v.norm();
        let mut w = (*v).clone();
        for q in &out {
            let c = q.dot(&w);
            w.axpy(-c, q, 1.0);
        }
        // re-orthogonalize once
        for q in &out {
            let c = q.dot(&w);
            w.axpy(-c, q, 1.0);
        }
        let r = w.norm();
        if scale == 0.0 || r <= 1e-10 * scale {
            let name = names.get(k).copied().unwrap_or("vector");
            let prev: Vec<&str> = names.iter().take(k).copied().collect();
            return Err(Error::DegenerateSpan(if scale == 0.0 {
                format!("{name} is the zero vector")
            } else {
                format!("{name} lies in the span of {}", prev.join(", "))
            }));
        }
        out.push(w / r);
    }
    Ok(out)
}

/// A Householder reflection `H = I - 2 v vᵀ` with unit `v`.
#[derive(Clone, Debug)]
pub struct Reflection {
    v: DVector<f64>,
}

impl Reflection {
    /// Reflection sending the unit vector `u` to `sign · e_j`; returns the sign.
    /// `u` must vanish on coordinates `< j` for the earlier coordinates to be
    /// left untouched.
    pub fn to_axis(u: &DVector<f64>, j: usize) -> (Self, f64) {
        let sign = if u[j] >= 0.0 { -1.0 } else { 1.0 };
        let mut w = u.clone();
        w[j] -= sign;
        let nw = w.norm();
        (Reflection { v: w / nw }, sign)
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let c = 2.0 * self.v.dot(x);
        x - &self.v * c
    }

    /// `A ↦ A H`, i.e. reflect every row of `A`.
    pub fn apply_right(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let av = a * &self.v;
        a - 2.0 * av * self.v.transpose()
    }

    /// `M ↦ H M H` for symmetric `M`.
    pub fn conjugate(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mv = m * &self.v;
        let c = self.v.dot(&mv);
        let mut out = m.clone();
        out.ger(-2.0, &self.v, &mv, 1.0);
        out.ger(-2.0, &mv, &self.v, 1.0);
        out.ger(4.0 * c, &self.v, &self.v, 1.0);
        out
    }
}

/// Compression of symmetric `m` onto the orthogonal complement of the span of
/// `basis` (orthonormal). The result is `(p-k) × (p-k)` in a basis of the
/// complement built from `k` Householder reflections.
pub fn compress_to_complement(m: &DMatrix<f64>, basis: &[DVector<f64>]) -> DMatrix<f64> {
    let k = basis.len();
    let mut cur = m.clone();
    let mut reflections: Vec<Reflection> = Vec::with_capacity(k);
    for (j, q) in basis.iter().enumerate() {
        let mut u = q.clone();
        for r in &reflections {
            u = r.apply(&u);
        }
        for i in 0..j {
            u[i] = 0.0;
        }
        let nu = u.norm();
        let (r, _) = Reflection::to_axis(&(u / nu), j);
        cur = r.conjugate(&cur);
        reflections.push(r);
    }
    let n = m.nrows();
    cur.view((k, k), (n - k, n - k)).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0]);
        let (vals, vecs) = sym_eigen(&m).unwrap();
        assert!(vals[0] <= vals[1] && vals[1] <= vals[2]);
        let recon = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!((recon - m).norm() < 1e-12);
    }

    #[test]
    fn svd_descending() {
        let x = DMatrix::from_row_slice(4, 3, &[3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        let (_, s, _) = thin_svd(&x).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-12 && (s[1] - 2.0).abs() < 1e-12 && (s[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compression_of_principal_minor() {
        let m = DMatrix::from_fn(5, 5, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        let e = |i: usize| DVector::from_fn(5, |k, _| if k == i { 1.0 } else { 0.0 });
        let c = compress_to_complement(&m, &[e(0), e(1)]);
        let minor = m.view((2, 2), (3, 3)).into_owned();
        let (a, _) = sym_eigen(&c).unwrap();
        let (b, _) = sym_eigen(&minor).unwrap();
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn gram_schmidt_reports_collisions() {
        let a = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let b = &a * 2.0;
        let err = orthonormalize(&[&a, &b], &["a", "field"]).unwrap_err();
        assert!(err.to_string().contains("field lies in the span of a"));
    }
}
