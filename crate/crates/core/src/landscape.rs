//! Critical-point analysis for the square case `d = K`.
//!
//! A critical point of the cross-entropy model is a global minimizer iff
//! `‖∇g(R)‖ ≤ √(λ_W λ_H)` (spectral norm); otherwise the direction
//! `(c·u aᵀ, −c⁻¹·a vᵀ, 0)`, with `c = (λ_H/λ_W)^{1/4}`, `u, v` the top
//! singular pair of `∇g(R)` and `a` a unit null vector of `W`, has curvature
//! `−2(‖∇g(R)‖ − √(λ_W λ_H)) < 0`.
//!
//! For the squared-error model the certificate is `‖WH − Ỹ‖ ≤ N√(λ_W λ_H)`
//! with `Ỹ = Y − b1ᵀ`. Saddles are escaped through a singular pair of `Ỹ`
//! not realized by any classifier/feature pair, with curvature
//! `−(2/N)(σ' − N√(λ_W λ_H))`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UfmError};
use crate::linalg::{canonical_sign, full_right_singular_vectors, rank_with_floor, spectral_norm, Svd};
use crate::losses::{
    f_ce_grad, f_mse_grad, g_grad, hess_quadform, mse_misfit, shifted_labels, DirectionTriple, GradientTriple,
};
use crate::model::{residual_unchecked, LossKind, ModelState, ProblemSpec};

const CRITICAL_FLOOR_FACTOR: f64 = 1e3;

/// Numerical thresholds used by the analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Gradient (max block Frobenius norm) below which a point counts as critical.
    pub crit: f64,
    /// Slack on the certificate margin.
    pub cert: f64,
    /// Relative singular-value threshold for rank and null-space detection.
    pub rank_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { crit: 1e-9, cert: 1e-7, rank_rel: 1e-10 }
    }
}

impl Tolerances {
    /// Singular values of `W` or `H` below this are indistinguishable from zero at
    /// a point whose gradient has norm `grad_norm`.
    ///
    /// For cross-entropy `W = (∇_W f − ∇g Hᵀ)/λ_W` with `rank(∇g) ≤ K − 1`, so
    /// `σ_K(W) ≤ ‖∇_W f‖/λ_W` by Weyl's inequality. A vanishing component whose
    /// restoring curvature is weaker than `λ` (squared error near the threshold)
    /// can be larger by the inverse of that curvature, hence the safety factor.
    pub fn critical_floor(&self, grad_norm: f64, spec: &ProblemSpec) -> f64 {
        CRITICAL_FLOOR_FACTOR * grad_norm / spec.lambda_w.min(spec.lambda_h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    GlobalMin,
    StrictSaddle,
    NotCritical,
}

/// Outcome of [`certify`]. Serializes to a flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub grad_norm: f64,
    pub is_critical: bool,
    /// Cross-entropy: `‖∇g(R)‖`; squared error: `‖WH − Ỹ‖`.
    pub certificate_lhs: f64,
    /// Cross-entropy: `√(λ_W λ_H)`; squared error: `N√(λ_W λ_H)`.
    pub certificate_rhs: f64,
    pub margin: f64,
    pub verdict: Verdict,
    pub balancedness_residual: f64,
    #[serde(rename = "rank_W")]
    pub rank_w: usize,
    #[serde(rename = "rank_H")]
    pub rank_h: usize,
    pub rank_bound: usize,
}

fn loss_gradient(state: &ModelState, spec: &ProblemSpec) -> GradientTriple {
    match spec.loss {
        LossKind::CrossEntropy => f_ce_grad(state, spec),
        LossKind::MeanSquaredError => f_mse_grad(state, spec),
    }
}

/// Classify `state` for the loss configured in `spec`.
///
/// The certificate fields are filled at every point; they only carry meaning
/// when `is_critical` holds.
pub fn certify(state: &ModelState, spec: &ProblemSpec, tol: &Tolerances) -> Result<CertificateReport> {
    state.check_shape(spec)?;
    let grad = loss_gradient(state, spec);
    let grad_norm = grad.max_block_norm();
    let is_critical = grad_norm <= tol.crit;
    let root = spec.sqrt_lambda_product();
    let (lhs, rhs, rank_bound) = match spec.loss {
        LossKind::CrossEntropy => {
            let r = residual_unchecked(state);
            (spectral_norm(&g_grad(&r, spec)), root, spec.k.saturating_sub(1))
        }
        LossKind::MeanSquaredError => {
            let misfit = mse_misfit(state, spec);
            let yt = shifted_labels(state, spec);
            (spectral_norm(&misfit), spec.total() as f64 * root, numerical_rank(&yt, tol.rank_rel))
        }
    };
    let margin = rhs - lhs;
    let verdict = if !is_critical {
        Verdict::NotCritical
    } else if margin >= -tol.cert {
        Verdict::GlobalMin
    } else {
        Verdict::StrictSaddle
    };
    let floor = if is_critical { tol.critical_floor(grad_norm, spec) } else { 0.0 };
    Ok(CertificateReport {
        grad_norm,
        is_critical,
        certificate_lhs: lhs,
        certificate_rhs: rhs,
        margin,
        verdict,
        balancedness_residual: check_balancedness(state, spec).residual,
        rank_w: rank_with_floor(&state.w, tol.rank_rel, floor),
        rank_h: rank_with_floor(&state.h, tol.rank_rel, floor),
        rank_bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Balancedness {
    /// `‖λ_W WᵀW − λ_H HHᵀ‖_F / max(1, ‖λ_W WᵀW‖_F)`.
    pub residual: f64,
    /// `|λ_W ‖W‖_F² − λ_H ‖H‖_F²|`.
    pub frobenius_residual: f64,
}

pub fn check_balancedness(state: &ModelState, spec: &ProblemSpec) -> Balancedness {
    let ww = state.w.transpose() * &state.w * spec.lambda_w;
    let hh = &state.h * state.h.transpose() * spec.lambda_h;
    Balancedness {
        residual: (&ww - &hh).norm() / ww.norm().max(1.0),
        frobenius_residual: (spec.lambda_w * state.w.norm_squared() - spec.lambda_h * state.h.norm_squared()).abs(),
    }
}

/// Number of singular values above `rel_tol · σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    rank_with_floor(m, rel_tol, 0.0)
}

/// Unit right singular vector of `w` for its smallest singular value.
///
/// Returns `e₁` for the zero matrix. Fails with [`UfmError::NoNullSpace`] when
/// the smallest singular value exceeds `rel_tol · σ_max`.
pub fn null_vector(w: &DMatrix<f64>, rel_tol: f64) -> Result<DVector<f64>> {
    null_vector_with_floor(w, rel_tol, 0.0)
}

/// [`null_vector`] with an absolute threshold `abs_floor` in addition to the relative one.
pub fn null_vector_with_floor(w: &DMatrix<f64>, rel_tol: f64, abs_floor: f64) -> Result<DVector<f64>> {
    let d = w.ncols();
    if d == 0 {
        return Err(UfmError::Domain("null vector of a matrix with no columns".into()));
    }
    let (v, sigma) = full_right_singular_vectors(w);
    let smax = sigma[0];
    if smax == 0.0 {
        let mut e1 = DVector::zeros(d);
        e1[0] = 1.0;
        return Ok(e1);
    }
    let smallest = sigma[d - 1];
    let threshold = (rel_tol * smax).max(abs_floor);
    if smallest > threshold {
        return Err(UfmError::NoNullSpace { smallest, threshold });
    }
    let mut a = v.column(d - 1).into_owned();
    canonical_sign(&mut a);
    Ok(a)
}

/// `(c·u αᵀ, sign·c⁻¹·α vᵀ, 0)` with `c = (λ_H/λ_W)^{1/4}`.
pub fn build_direction(
    u: &DVector<f64>,
    alpha: &DVector<f64>,
    v: &DVector<f64>,
    spec: &ProblemSpec,
    h_sign: f64,
) -> DirectionTriple {
    let c = (spec.lambda_h / spec.lambda_w).powf(0.25);
    DirectionTriple {
        delta_w: u * alpha.transpose() * c,
        delta_h: alpha * v.transpose() * (h_sign / c),
        delta_b: DVector::zeros(spec.k),
    }
}

/// A negative-curvature direction at a strict saddle.
#[derive(Debug, Clone, PartialEq)]
pub struct EscapeDirection {
    pub direction: DirectionTriple,
    pub predicted_curvature: f64,
    /// `∇²f[Δ, Δ]` evaluated by [`hess_quadform`].
    pub measured_curvature: f64,
    /// Unit null vector of `W` used in the construction.
    pub alpha: DVector<f64>,
    /// Left singular vector (length `K`).
    pub left: DVector<f64>,
    /// Right singular vector (length `N`).
    pub right: DVector<f64>,
}

fn require_saddle(report: &CertificateReport) -> Result<()> {
    if report.verdict == Verdict::StrictSaddle {
        Ok(())
    } else {
        Err(UfmError::NotSaddle { verdict: report.verdict })
    }
}

/// Escape direction for a cross-entropy strict saddle (requires `d = K`).
pub fn escape_direction_ce(state: &ModelState, spec: &ProblemSpec, tol: &Tolerances) -> Result<EscapeDirection> {
    let spec = spec.with_loss(LossKind::CrossEntropy);
    spec.require_square()?;
    let report = certify(state, &spec, tol)?;
    require_saddle(&report)?;

    let r = residual_unchecked(state);
    let svd = Svd::new(&g_grad(&r, &spec));
    let u = svd.u.column(0).into_owned();
    let v = svd.v.column(0).into_owned();
    let floor = tol.critical_floor(report.grad_norm, &spec);
    let alpha = null_vector_with_floor(&state.w, tol.rank_rel, floor)?;

    let direction = build_direction(&u, &alpha, &v, &spec, -1.0);
    let predicted_curvature = -2.0 * (svd.largest() - spec.sqrt_lambda_product());
    let measured_curvature = hess_quadform(state, &direction, &spec);
    Ok(EscapeDirection { direction, predicted_curvature, measured_curvature, alpha, left: u, right: v })
}

/// Escape direction for a squared-error strict saddle (requires `d = K`).
pub fn escape_direction_mse(state: &ModelState, spec: &ProblemSpec, tol: &Tolerances) -> Result<EscapeDirection> {
    let spec = spec.with_loss(LossKind::MeanSquaredError);
    spec.require_square()?;
    let report = certify(state, &spec, tol)?;
    require_saddle(&report)?;

    let floor = tol.critical_floor(report.grad_norm, &spec);
    let yt = shifted_labels(state, &spec);
    let (normalized, _) = rotation_normalize(state, &spec);
    let pairs = covered_pairs(&normalized, &yt, &spec, tol.rank_rel, floor);
    let (sigma, u, v) = top_uncovered_pair(&yt, &pairs);
    let threshold = spec.total() as f64 * spec.sqrt_lambda_product();
    if sigma <= threshold {
        return Err(UfmError::NoUncoveredSigma { largest: sigma, threshold });
    }
    let alpha = null_vector_with_floor(&state.w, tol.rank_rel, floor)?;

    let direction = build_direction(&u, &alpha, &v, &spec, 1.0);
    let predicted_curvature = -2.0 / spec.total() as f64 * (sigma - threshold);
    let measured_curvature = hess_quadform(state, &direction, &spec);
    Ok(EscapeDirection { direction, predicted_curvature, measured_curvature, alpha, left: u, right: v })
}

/// Dispatch on the configured loss.
pub fn escape_direction(state: &ModelState, spec: &ProblemSpec, tol: &Tolerances) -> Result<EscapeDirection> {
    match spec.loss {
        LossKind::CrossEntropy => escape_direction_ce(state, spec, tol),
        LossKind::MeanSquaredError => escape_direction_mse(state, spec, tol),
    }
}

/// Rotate the feature space by the right singular vectors `V_W` of `W`:
/// returns `(W V_W, V_Wᵀ H, b)` and `V_W`. The rotated `W` has pairwise
/// orthogonal columns ordered by decreasing norm; `WH`, the objective and
/// criticality are unchanged.
pub fn rotation_normalize(state: &ModelState, _spec: &ProblemSpec) -> (ModelState, DMatrix<f64>) {
    let (mut v, _) = full_right_singular_vectors(&state.w);
    let mut w = &state.w * &v;
    for j in 0..v.ncols() {
        let mut col = w.column(j).into_owned();
        let flip = if col.amax() > 0.0 {
            let before = col.clone();
            canonical_sign(&mut col);
            col != before
        } else {
            let mut vc = v.column(j).into_owned();
            let before = vc.clone();
            canonical_sign(&mut vc);
            vc != before
        };
        if flip {
            v.column_mut(j).neg_mut();
            w.column_mut(j).neg_mut();
        }
    }
    let h = v.transpose() * &state.h;
    (ModelState { w, h, b: state.b.clone() }, v)
}

/// A classifier column / feature row pair realizing a singular triple of `Ỹ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoveredPair {
    /// Column of the normalized `W` (0-based).
    pub column: usize,
    /// Index into the descending singular values of `Ỹ` it was matched to.
    pub sigma_index: usize,
    /// `uᵀ Ỹ v` for the pair's unit vectors.
    pub rayleigh_sigma: f64,
    /// `√(λ_W/λ_H)‖w_j‖² + N√(λ_W λ_H)`.
    pub predicted_sigma: f64,
    /// `max(‖Ỹv − σu‖, ‖Ỹᵀu − σv‖) / max(1, ‖Ỹ‖)`.
    pub pair_residual: f64,
    pub u: DVector<f64>,
    pub v: DVector<f64>,
}

/// Nonzero columns of a normalized `W` with `uᵀỸv` above `N√(λ_W λ_H)`, matched greedily (descending `σ`) to
/// singular values of `Ỹ`. The unit vectors come from `W` and `H` themselves,
/// which keeps the correspondence well-defined when `Ỹ` has repeated singular
/// values.
fn covered_pairs(
    normalized: &ModelState,
    yt: &DMatrix<f64>,
    spec: &ProblemSpec,
    rank_rel: f64,
    floor: f64,
) -> Vec<CoveredPair> {
    let sigma = yt.clone().singular_values();
    let mut sigma_sorted: Vec<f64> = sigma.iter().copied().collect();
    sigma_sorted.sort_by(|a, b| b.total_cmp(a));
    let ynorm = sigma_sorted.first().copied().unwrap_or(0.0).max(1.0);
    let offset = spec.total() as f64 * spec.sqrt_lambda_product();
    let ratio = (spec.lambda_w / spec.lambda_h).sqrt();

    let wmax = normalized.w.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let threshold = (rank_rel * wmax).max(floor);
    let mut pairs = Vec::new();
    for j in 0..normalized.w.ncols() {
        let wj = normalized.w.column(j);
        let hj = normalized.h.row(j).transpose();
        let (wn, hn) = (wj.norm(), hj.norm());
        if wn <= threshold || hn <= threshold || wn == 0.0 || hn == 0.0 {
            continue;
        }
        let u = wj / wn;
        let v = hj / hn;
        let s = (u.transpose() * yt * &v)[(0, 0)];
        if s <= offset {
            // a covered σ exceeds the threshold by √(λ_W/λ_H)‖w_j‖²; this column is still decaying
            continue;
        }
        let res_left = (yt * &v - &u * s).norm();
        let res_right = (yt.transpose() * &u - &v * s).norm();
        pairs.push(CoveredPair {
            column: j,
            sigma_index: usize::MAX,
            rayleigh_sigma: s,
            predicted_sigma: ratio * wn * wn + offset,
            pair_residual: res_left.max(res_right) / ynorm,
            u,
            v,
        });
    }
    pairs.sort_by(|a, b| b.rayleigh_sigma.total_cmp(&a.rayleigh_sigma));
    let mut taken = vec![false; sigma_sorted.len()];
    for p in pairs.iter_mut() {
        let best = (0..sigma_sorted.len()).filter(|&i| !taken[i]).min_by(|&a, &b| {
            (sigma_sorted[a] - p.rayleigh_sigma).abs().total_cmp(&(sigma_sorted[b] - p.rayleigh_sigma).abs())
        });
        if let Some(i) = best {
            taken[i] = true;
            p.sigma_index = i;
        }
    }
    pairs.sort_by_key(|p| p.column);
    pairs
}

/// Orthonormal basis (via QR) of the given unit vectors, as columns.
fn orthonormal_basis(vectors: &[&DVector<f64>], dim: usize) -> DMatrix<f64> {
    if vectors.is_empty() {
        return DMatrix::zeros(dim, 0);
    }
    let m = DMatrix::from_columns(&vectors.iter().map(|v| (*v).clone()).collect::<Vec<_>>());
    m.qr().q()
}

/// Largest singular triple of `Ỹ` orthogonal to all covered pairs.
fn top_uncovered_pair(yt: &DMatrix<f64>, pairs: &[CoveredPair]) -> (f64, DVector<f64>, DVector<f64>) {
    let (k, n) = yt.shape();
    let qu = orthonormal_basis(&pairs.iter().map(|p| &p.u).collect::<Vec<_>>(), k);
    let qv = orthonormal_basis(&pairs.iter().map(|p| &p.v).collect::<Vec<_>>(), n);
    let pu = DMatrix::identity(k, k) - &qu * qu.transpose();
    let pv = DMatrix::identity(n, n) - &qv * qv.transpose();
    let rest = &pu * yt * &pv;
    let svd = Svd::new(&rest);
    (svd.largest(), svd.u.column(0).into_owned(), svd.v.column(0).into_owned())
}

/// Singular-value structure of `Ỹ` at a squared-error critical point.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularStructure {
    /// Singular values of `Ỹ`, descending.
    pub sigma: Vec<f64>,
    /// Whether `sigma[i]` is realized by a classifier/feature pair.
    pub covered: Vec<bool>,
    /// `√(λ_W/λ_H)‖w_j‖² + N√(λ_W λ_H)` per covered pair (pair order).
    pub predicted_sigma_from_w: Vec<f64>,
    pub pairs: Vec<CoveredPair>,
    /// `N√(λ_W λ_H)`.
    pub threshold: f64,
    /// `‖WH − Σ_covered (σ_j − N√(λ_W λ_H)) u_j v_jᵀ‖_F`.
    pub reconstruction_residual: f64,
}

impl SingularStructure {
    /// Largest `|σ_j − predicted_j| / σ_j` over covered pairs.
    pub fn max_prediction_error(&self) -> f64 {
        self.pairs
            .iter()
            .map(|p| {
                (self.sigma[p.sigma_index] - p.predicted_sigma).abs() / self.sigma[p.sigma_index].max(f64::MIN_POSITIVE)
            })
            .fold(0.0, f64::max)
    }
}

/// Analyze a squared-error critical point. The state is rotation-normalized
/// internally, so any critical point may be passed.
pub fn singular_structure(state: &ModelState, spec: &ProblemSpec, tol: &Tolerances) -> Result<SingularStructure> {
    let spec = spec.with_loss(LossKind::MeanSquaredError);
    state.check_shape(&spec)?;
    let grad_norm = f_mse_grad(state, &spec).max_block_norm();
    if grad_norm > tol.crit {
        return Err(UfmError::NotCritical { grad_norm });
    }
    let yt = shifted_labels(state, &spec);
    let (normalized, _) = rotation_normalize(state, &spec);
    let pairs = covered_pairs(&normalized, &yt, &spec, tol.rank_rel, tol.critical_floor(grad_norm, &spec));
    let mut sigma: Vec<f64> = yt.clone().singular_values().iter().copied().collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    let threshold = spec.total() as f64 * spec.sqrt_lambda_product();

    let mut covered = vec![false; sigma.len()];
    let mut recon = &normalized.w * &normalized.h;
    for p in &pairs {
        if p.sigma_index < sigma.len() {
            covered[p.sigma_index] = true;
            recon -= &p.u * p.v.transpose() * (sigma[p.sigma_index] - threshold);
        }
    }
    Ok(SingularStructure {
        sigma,
        covered,
        predicted_sigma_from_w: pairs.iter().map(|p| p.predicted_sigma).collect(),
        reconstruction_residual: recon.norm(),
        pairs,
        threshold,
    })
}
