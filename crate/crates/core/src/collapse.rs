//! Neural-collapse diagnostics, simplex ETF frames and ETF-family global minimizers.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UfmError};
use crate::landscape::{certify, Tolerances, Verdict};
use crate::losses::{gradient, hess_quadform, objective, DirectionTriple};
use crate::model::{make_labels, LossKind, ModelState, ProblemSpec};

/// Ideal simplex-ETF Gram matrix: 1 on the diagonal, `−1/(K−1)` elsewhere.
pub fn etf_gram(k: usize) -> Result<DMatrix<f64>> {
    if k < 2 {
        return Err(UfmError::Domain(format!("simplex ETF needs K >= 2, got {k}")));
    }
    let off = -1.0 / (k as f64 - 1.0);
    Ok(DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { off }))
}

/// Canonical frame `√(K/(K−1)) (I − 11ᵀ/K)`: unit columns whose Gram is [`etf_gram`].
pub fn canonical_frame(k: usize) -> Result<DMatrix<f64>> {
    if k < 2 {
        return Err(UfmError::Domain(format!("simplex ETF needs K >= 2, got {k}")));
    }
    let kf = k as f64;
    let scale = (kf / (kf - 1.0)).sqrt();
    Ok(DMatrix::from_fn(k, k, |i, j| scale * (if i == j { 1.0 } else { 0.0 } - 1.0 / kf)))
}

/// `W = scale · (U M₀)ᵀ`: rows of norm `scale` with pairwise cosines `−1/(K−1)`.
pub fn make_etf(k: usize, scale: f64, rotation: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(UfmError::Domain(format!("ETF scale must be >= 0, got {scale}")));
    }
    if rotation.shape() != (k, k) {
        return Err(UfmError::Shape { what: "rotation".into(), expected: (k, k), found: rotation.shape() });
    }
    let defect = (rotation.transpose() * rotation - DMatrix::identity(k, k)).amax();
    if defect > 1e-10 {
        return Err(UfmError::Domain(format!("rotation is not orthogonal (max |UᵀU − I| = {defect:e})")));
    }
    Ok((rotation * canonical_frame(k)?).transpose() * scale)
}

/// Seeded Haar-distributed `k×k` orthogonal matrix (QR of a Gaussian matrix,
/// signs fixed so that `R` has a positive diagonal).
pub fn random_rotation(k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(k, k, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z
    });
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Neural-collapse residuals; all vanish at exact global minimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseMetrics {
    /// `max_k ‖w^k‖ − min_k ‖w^k‖` over rows of `W`.
    pub nc1_norm_spread: f64,
    /// `max_k b_k − min_k b_k`.
    pub nc1_bias_spread: f64,
    /// `‖H − √(λ_W/(nλ_H)) WᵀY‖_F / max(1, ‖H‖_F)`.
    pub nc2_duality_residual: f64,
    /// `max_j ‖(1/K) Σ_k h_{k,j}‖`.
    pub nc2_mean_residual: f64,
    /// `‖G − etf_gram(K)‖_F` for the cosine Gram `G` of the rows of `W`.
    /// `None` outside the square case `d = K` or for `K < 2`.
    pub nc3_etf_residual: Option<f64>,
}

pub fn collapse_metrics(state: &ModelState, spec: &ProblemSpec) -> CollapseMetrics {
    let row_norms: Vec<f64> = state.w.row_iter().map(|r| r.norm()).collect();
    let spread = |xs: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        if lo.is_finite() {
            hi - lo
        } else {
            0.0
        }
    };
    let nc1_norm_spread = spread(&mut row_norms.iter().copied());
    let nc1_bias_spread = spread(&mut state.b.iter().copied());

    let y = make_labels(spec);
    let c = (spec.lambda_w / (spec.n as f64 * spec.lambda_h)).sqrt();
    let dual = state.w.transpose() * &y * c;
    let nc2_duality_residual = (&state.h - dual).norm() / state.h.norm().max(1.0);

    let mut nc2_mean_residual: f64 = 0.0;
    for j in 0..spec.n {
        let mut mean = DVector::zeros(spec.d);
        for k in 0..spec.k {
            mean += state.h.column(k * spec.n + j);
        }
        nc2_mean_residual = nc2_mean_residual.max(mean.norm() / spec.k as f64);
    }

    let nc3_etf_residual = if spec.square_case() && spec.k >= 2 {
        let mut g = state.w.transpose();
        for (mut col, &nrm) in g.column_iter_mut().zip(&row_norms) {
            if nrm > 0.0 {
                col /= nrm;
            }
        }
        Some((g.transpose() * &g - etf_gram(spec.k).expect("K >= 2")).norm())
    } else {
        None
    };

    CollapseMetrics { nc1_norm_spread, nc1_bias_spread, nc2_duality_residual, nc2_mean_residual, nc3_etf_residual }
}

const GOLDEN_TOL: f64 = 1e-12;
const MAX_DOUBLINGS: usize = 60;

/// Golden-section search for the minimizer of `phi` on `[lo, hi]`.
fn golden_section(phi: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (phi(x1), phi(x2));
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = phi(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = phi(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Minimize a smooth scalar function of `t >= 0`: golden-section on a doubling
/// bracket `[0, t_max]`, then Newton polishing on the derivative (golden section
/// alone resolves the minimizer only to about the square root of machine precision).
fn minimize_nonnegative(phi: &dyn Fn(f64) -> f64, derivs: &dyn Fn(f64) -> (f64, f64), mut t_max: f64) -> Result<f64> {
    let mut t = f64::NAN;
    for _ in 0..=MAX_DOUBLINGS {
        t = golden_section(phi, 0.0, t_max, GOLDEN_TOL * t_max.max(1.0));
        if t < t_max * (1.0 - 1e-6) {
            break;
        }
        t_max *= 2.0;
        t = f64::NAN;
    }
    if t.is_nan() {
        return Err(UfmError::Bracket { t_max });
    }
    if phi(0.0) <= phi(t) {
        return Ok(0.0);
    }
    for _ in 0..50 {
        let (d1, d2) = derivs(t);
        if d2 <= 0.0 || d1 == 0.0 {
            break;
        }
        let next = (t - d1 / d2).max(0.0);
        let (n1, _) = derivs(next);
        if n1.abs() >= d1.abs() {
            break;
        }
        let done = (next - t).abs() <= 4.0 * f64::EPSILON * t;
        t = next;
        if done {
            break;
        }
    }
    Ok(t)
}

fn unit_ray(spec: &ProblemSpec, rotation: &DMatrix<f64>) -> Result<DirectionTriple> {
    let w = make_etf(spec.k, 1.0, rotation)?;
    let c = (spec.lambda_w / (spec.n as f64 * spec.lambda_h)).sqrt();
    let h = w.transpose() * make_labels(spec) * c;
    Ok(DirectionTriple { delta_w: w, delta_h: h, delta_b: DVector::zeros(spec.k) })
}

fn check_builder_preconditions(spec: &ProblemSpec) -> Result<()> {
    spec.require_square()?;
    if spec.k < 2 {
        return Err(UfmError::Domain("global-minimizer construction needs K >= 2".into()));
    }
    if spec.lambda_b <= 0.0 {
        return Err(UfmError::InvalidConfig {
            key: "lambda_b".into(),
            reason: "construction requires lambda_b > 0".into(),
        });
    }
    Ok(())
}

fn certify_global(state: &ModelState, spec: &ProblemSpec) -> Result<()> {
    let report = certify(state, spec, &Tolerances::default())?;
    if report.verdict == Verdict::GlobalMin {
        Ok(())
    } else {
        Err(UfmError::Certification(format!(
            "verdict {:?}, grad_norm {:e}, margin {:e}",
            report.verdict, report.grad_norm, report.margin
        )))
    }
}

fn initial_t_max(spec: &ProblemSpec) -> f64 {
    10.0 * (spec.k as f64).sqrt()
}

/// Scale `t` of the ray `(t W₁, t H₁, b)` minimizing the objective, with `b` fixed.
fn optimal_ray_scale(spec: &ProblemSpec, ray: &DirectionTriple, b: &DVector<f64>) -> Result<f64> {
    let base = ModelState { w: DMatrix::zeros(spec.k, spec.d), h: DMatrix::zeros(spec.d, spec.total()), b: b.clone() };
    let phi = |t: f64| objective(&base.shifted(ray, t), spec);
    let derivs = |t: f64| {
        let st = base.shifted(ray, t);
        (ray.dot_gradient(&gradient(&st, spec)), hess_quadform(&st, ray, spec))
    };
    minimize_nonnegative(&phi, &derivs, initial_t_max(spec))
}

/// Global minimizer of the cross-entropy model in the ETF family:
/// `W = t·(U M₀)ᵀ`, `h_{k,j} = √(λ_W/(nλ_H)) (w^k)ᵀ`, `b = 0`, with `t`
/// found by scalar minimization. The result is certified before returning.
pub fn build_global_min_ce(spec: &ProblemSpec, rotation: &DMatrix<f64>) -> Result<ModelState> {
    let spec = spec.with_loss(LossKind::CrossEntropy);
    check_builder_preconditions(&spec)?;
    let ray = unit_ray(&spec, rotation)?;
    let t = optimal_ray_scale(&spec, &ray, &DVector::zeros(spec.k))?;
    let state = ModelState::zeros(&spec).shifted(&ray, t);
    certify_global(&state, &spec)?;
    Ok(state)
}

/// Global minimizer of the squared-error model in the ETF family with bias
/// `b = s·1`. `(t, s)` found by alternating scalar minimization.
pub fn build_global_min_mse(spec: &ProblemSpec, rotation: &DMatrix<f64>) -> Result<ModelState> {
    let spec = spec.with_loss(LossKind::MeanSquaredError);
    check_builder_preconditions(&spec)?;
    let ray = unit_ray(&spec, rotation)?;
    let ones = DirectionTriple {
        delta_w: DMatrix::zeros(spec.k, spec.d),
        delta_h: DMatrix::zeros(spec.d, spec.total()),
        delta_b: DVector::from_element(spec.k, 1.0),
    };

    let (mut t, mut s) = (0.0, 0.0);
    let mut current = objective(&ModelState::zeros(&spec), &spec);
    for _ in 0..100 {
        // the objective is quadratic in s, so one Newton step is exact
        let st = ModelState::zeros(&spec).shifted(&ray, t).shifted(&ones, s);
        let d1 = ones.dot_gradient(&gradient(&st, &spec));
        let d2 = hess_quadform(&st, &ones, &spec);
        s -= d1 / d2;
        t = optimal_ray_scale(&spec, &ray, &DVector::from_element(spec.k, s))?;
        let value = objective(&ModelState::zeros(&spec).shifted(&ray, t).shifted(&ones, s), &spec);
        let decrease = current - value;
        current = value;
        if decrease.abs() < 1e-14 {
            break;
        }
    }
    let state = ModelState::zeros(&spec).shifted(&ray, t).shifted(&ones, s);
    certify_global(&state, &spec)?;
    Ok(state)
}
