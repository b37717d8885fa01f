//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Thin SVD `M = U diag(sigma) Vᵀ` with singular values in descending order.
///
/// `u` is `rows × r`, `v` is `cols × r` (not transposed), `r = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl Svd {
    pub fn new(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let r = rows.min(cols);
        if r == 0 {
            return Svd { u: DMatrix::zeros(rows, 0), sigma: DVector::zeros(0), v: DMatrix::zeros(cols, 0) };
        }
        let svd = m.clone().svd(true, true);
        let u_raw = svd.u.expect("u requested");
        let vt_raw = svd.v_t.expect("v_t requested");
        let mut order: Vec<usize> = (0..r).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut u = DMatrix::zeros(rows, r);
        let mut v = DMatrix::zeros(cols, r);
        let mut sigma = DVector::zeros(r);
        for (dst, &src) in order.iter().enumerate() {
            sigma[dst] = svd.singular_values[src];
            u.set_column(dst, &u_raw.column(src));
            v.set_column(dst, &vt_raw.row(src).transpose());
        }
        Svd { u, sigma, v }
    }

    pub fn largest(&self) -> f64 {
        if self.sigma.is_empty() {
            0.0
        } else {
            self.sigma[0]
        }
    }
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Count singular values strictly above `max(rel_tol * sigma_max, abs_floor)`.
///
/// The zero matrix has rank 0.
pub fn rank_with_floor(m: &DMatrix<f64>, rel_tol: f64, abs_floor: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    let threshold = (rel_tol * smax).max(abs_floor);
    sv.iter().filter(|&&s| s > threshold).count()
}

/// Flip the sign of `v` so that its first entry of non-negligible magnitude is positive.
pub fn canonical_sign(v: &mut DVector<f64>) {
    let scale = v.amax();
    if scale == 0.0 {
        return;
    }
    if let Some(x) = v.iter().find(|x| x.abs() > 1e-12 * scale) {
        if *x < 0.0 {
            v.neg_mut();
        }
    }
}

/// Full `cols × cols` orthogonal matrix of right singular vectors, ordered by
/// descending singular value (zero-padded rows when `rows < cols`).
pub fn full_right_singular_vectors(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let (rows, cols) = m.shape();
    let square = if rows >= cols {
        m.clone()
    } else {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (rows, cols)).copy_from(m);
        p
    };
    let svd = Svd::new(&square);
    (svd.v, svd.sigma)
}

/// Max-entry relative discrepancy `max |a - b| / (1 + |a| + |b|)`.
pub fn rel_err_slices(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / (1.0 + x.abs() + y.abs())).fold(0.0, f64::max)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs() + b.abs())
}
