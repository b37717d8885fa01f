//! Objectives, analytic derivatives and finite-difference oracles.
//!
//! Cross-entropy objective:
//! `f_C = g(R) + λ_W/2 ‖W‖² + λ_H/2 ‖H‖² + λ_b/2 ‖b‖²` with `g(R)` the mean
//! per-sample cross-entropy of the residual columns.
//!
//! Mean-squared-error objective:
//! `f_M = 1/(2N) ‖R − Y‖² + (same penalties)`.
//!
//! All sums run sequentially over columns in index order, so results are
//! bit-reproducible.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Result, UfmError};
use crate::model::{make_labels, residual_unchecked, LossKind, ModelState, ProblemSpec};

/// Partial derivatives of an objective with respect to `(W, H, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTriple {
    pub grad_w: DMatrix<f64>,
    pub grad_h: DMatrix<f64>,
    pub grad_b: DVector<f64>,
}

impl GradientTriple {
    /// Largest Frobenius norm among the three blocks.
    pub fn max_block_norm(&self) -> f64 {
        self.grad_w.norm().max(self.grad_h.norm()).max(self.grad_b.norm())
    }

    pub fn norm_squared(&self) -> f64 {
        self.grad_w.norm_squared() + self.grad_h.norm_squared() + self.grad_b.norm_squared()
    }

    /// The steepest-descent direction `−∇f`.
    pub fn descent(&self) -> DirectionTriple {
        DirectionTriple { delta_w: -&self.grad_w, delta_h: -&self.grad_h, delta_b: -&self.grad_b }
    }

    pub fn as_slice_vec(&self) -> Vec<f64> {
        self.grad_w.iter().chain(self.grad_h.iter()).chain(self.grad_b.iter()).copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice_vec().iter().all(|x| x.is_finite())
    }
}

/// A perturbation `Δ = (Δ_W, Δ_H, Δ_b)` of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionTriple {
    pub delta_w: DMatrix<f64>,
    pub delta_h: DMatrix<f64>,
    pub delta_b: DVector<f64>,
}

impl DirectionTriple {
    pub fn zeros(spec: &ProblemSpec) -> Self {
        DirectionTriple {
            delta_w: DMatrix::zeros(spec.k, spec.d),
            delta_h: DMatrix::zeros(spec.d, spec.total()),
            delta_b: DVector::zeros(spec.k),
        }
    }

    pub fn scaled(&self, t: f64) -> Self {
        DirectionTriple { delta_w: &self.delta_w * t, delta_h: &self.delta_h * t, delta_b: &self.delta_b * t }
    }

    pub fn norm_squared(&self) -> f64 {
        self.delta_w.norm_squared() + self.delta_h.norm_squared() + self.delta_b.norm_squared()
    }

    pub fn dot_gradient(&self, g: &GradientTriple) -> f64 {
        self.delta_w.dot(&g.grad_w) + self.delta_h.dot(&g.grad_h) + self.delta_b.dot(&g.grad_b)
    }

    /// Number of scalar coordinates.
    pub fn len(&self) -> usize {
        self.delta_w.len() + self.delta_h.len() + self.delta_b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unit coordinate vector `e_i` in the flattened `(W, H, b)` ordering
    /// (each block column-major).
    pub fn basis(spec: &ProblemSpec, i: usize) -> Self {
        let mut d = DirectionTriple::zeros(spec);
        let (nw, nh) = (d.delta_w.len(), d.delta_h.len());
        if i < nw {
            d.delta_w.as_mut_slice()[i] = 1.0;
        } else if i < nw + nh {
            d.delta_h.as_mut_slice()[i - nw] = 1.0;
        } else {
            d.delta_b[i - nw - nh] = 1.0;
        }
        d
    }

    /// Regularizer curvature `λ_W‖Δ_W‖² + λ_H‖Δ_H‖² + λ_b‖Δ_b‖²`.
    pub fn penalty_curvature(&self, spec: &ProblemSpec) -> f64 {
        spec.lambda_w * self.delta_w.norm_squared()
            + spec.lambda_h * self.delta_h.norm_squared()
            + spec.lambda_b * self.delta_b.norm_squared()
    }
}

/// Cross-entropy `log Σ_l exp(z_l) − z_k` of one logit vector, `k` 1-based.
pub fn ce_sample_loss(logits: &[f64], k: usize) -> f64 {
    assert!(k >= 1 && k <= logits.len(), "class index {k} out of range");
    log_sum_exp(logits.iter().copied()) - logits[k - 1]
}

fn log_sum_exp(z: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = z.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = z.map(|x| (x - m).exp()).sum();
    m + s.ln()
}

fn softmax(col: DVectorView<'_, f64>) -> DVector<f64> {
    let m = col.max();
    let mut p = col.map(|x| (x - m).exp());
    let s = p.sum();
    p /= s;
    p
}

fn check_residual(r: &DMatrix<f64>, spec: &ProblemSpec) {
    assert_eq!(r.shape(), (spec.k, spec.total()), "residual shape does not match problem");
}

/// Mean cross-entropy `g(R)` over all `N` residual columns.
pub fn g_value(r: &DMatrix<f64>, spec: &ProblemSpec) -> f64 {
    check_residual(r, spec);
    let mut total = 0.0;
    for (i, col) in r.column_iter().enumerate() {
        let class = i / spec.n;
        total += log_sum_exp(col.iter().copied()) - col[class];
    }
    total / spec.total() as f64
}

/// `∇g(R) = (P − Y)/N`, `P` the column-wise softmax of `R`. Columns sum to zero.
pub fn g_grad(r: &DMatrix<f64>, spec: &ProblemSpec) -> DMatrix<f64> {
    check_residual(r, spec);
    let inv_n = 1.0 / spec.total() as f64;
    let mut out = DMatrix::zeros(spec.k, spec.total());
    for (i, col) in r.column_iter().enumerate() {
        let mut p = softmax(col);
        p[i / spec.n] -= 1.0;
        out.set_column(i, &(p * inv_n));
    }
    out
}

/// `∇²g(R)[A, A] = (1/N) Σ_i a_iᵀ (diag(p_i) − p_i p_iᵀ) a_i`.
pub fn g_hess_quadform(r: &DMatrix<f64>, a: &DMatrix<f64>, spec: &ProblemSpec) -> f64 {
    check_residual(r, spec);
    assert_eq!(a.shape(), r.shape());
    let mut total = 0.0;
    for (rc, ac) in r.column_iter().zip(a.column_iter()) {
        let p = softmax(rc);
        let mean = p.dot(&ac);
        // Σ p_l (a_l − mean)²: the same quantity as a diag(p)a − (pᵀa)², without cancellation
        let mut var = 0.0;
        for (pl, al) in p.iter().zip(ac.iter()) {
            var += pl * (al - mean) * (al - mean);
        }
        total += var;
    }
    total / spec.total() as f64
}

fn penalty(state: &ModelState, spec: &ProblemSpec) -> f64 {
    0.5 * (spec.lambda_w * state.w.norm_squared()
        + spec.lambda_h * state.h.norm_squared()
        + spec.lambda_b * state.b.norm_squared())
}

/// Chain rule through `R = WH + b1ᵀ` given `∇_R` of the data term.
fn assemble_gradient(state: &ModelState, spec: &ProblemSpec, d_r: &DMatrix<f64>) -> GradientTriple {
    let mut grad_b = DVector::zeros(spec.k);
    for col in d_r.column_iter() {
        grad_b += col;
    }
    GradientTriple {
        grad_w: d_r * state.h.transpose() + &state.w * spec.lambda_w,
        grad_h: state.w.transpose() * d_r + &state.h * spec.lambda_h,
        grad_b: grad_b + &state.b * spec.lambda_b,
    }
}

pub fn f_ce_value(state: &ModelState, spec: &ProblemSpec) -> f64 {
    g_value(&residual_unchecked(state), spec) + penalty(state, spec)
}

pub fn f_ce_grad(state: &ModelState, spec: &ProblemSpec) -> GradientTriple {
    let r = residual_unchecked(state);
    assemble_gradient(state, spec, &g_grad(&r, spec))
}

/// `WH + b1ᵀ − Y`, i.e. `WH − Ỹ` with `Ỹ = Y − b1ᵀ`.
pub fn mse_misfit(state: &ModelState, spec: &ProblemSpec) -> DMatrix<f64> {
    residual_unchecked(state) - make_labels(spec)
}

/// `Ỹ = Y − b1ᵀ`.
pub fn shifted_labels(state: &ModelState, spec: &ProblemSpec) -> DMatrix<f64> {
    let mut y = make_labels(spec);
    for mut col in y.column_iter_mut() {
        col -= &state.b;
    }
    y
}

pub fn f_mse_value(state: &ModelState, spec: &ProblemSpec) -> f64 {
    mse_misfit(state, spec).norm_squared() / (2.0 * spec.total() as f64) + penalty(state, spec)
}

pub fn f_mse_grad(state: &ModelState, spec: &ProblemSpec) -> GradientTriple {
    let d_r = mse_misfit(state, spec) / spec.total() as f64;
    assemble_gradient(state, spec, &d_r)
}

/// Objective of the configured loss.
pub fn objective(state: &ModelState, spec: &ProblemSpec) -> f64 {
    match spec.loss {
        LossKind::CrossEntropy => f_ce_value(state, spec),
        LossKind::MeanSquaredError => f_mse_value(state, spec),
    }
}

/// Gradient of the configured loss.
pub fn gradient(state: &ModelState, spec: &ProblemSpec) -> GradientTriple {
    match spec.loss {
        LossKind::CrossEntropy => f_ce_grad(state, spec),
        LossKind::MeanSquaredError => f_mse_grad(state, spec),
    }
}

/// `E = W Δ_H + Δ_W H + Δ_b 1ᵀ`, the first-order change of the residual along `Δ`.
pub fn residual_change(state: &ModelState, delta: &DirectionTriple) -> DMatrix<f64> {
    let mut e = &state.w * &delta.delta_h + &delta.delta_w * &state.h;
    for mut col in e.column_iter_mut() {
        col += &delta.delta_b;
    }
    e
}

/// Second directional derivative `∇²f[Δ, Δ]` of the configured loss.
pub fn hess_quadform(state: &ModelState, delta: &DirectionTriple, spec: &ProblemSpec) -> f64 {
    let e = residual_change(state, delta);
    let cross = &delta.delta_w * &delta.delta_h;
    let reg = delta.penalty_curvature(spec);
    match spec.loss {
        LossKind::CrossEntropy => {
            let r = residual_unchecked(state);
            g_hess_quadform(&r, &e, spec) + 2.0 * g_grad(&r, spec).dot(&cross) + reg
        }
        LossKind::MeanSquaredError => {
            let inv_n = 1.0 / spec.total() as f64;
            inv_n * e.norm_squared() + 2.0 * inv_n * mse_misfit(state, spec).dot(&cross) + reg
        }
    }
}

/// Central-difference gradient of the configured loss.
pub fn fd_gradient(state: &ModelState, spec: &ProblemSpec, step: f64) -> GradientTriple {
    assert!(step > 0.0);
    let mut probe = state.clone();
    let mut diff = |get: &mut dyn FnMut(&mut ModelState) -> &mut f64| {
        let x0 = *get(&mut probe);
        *get(&mut probe) = x0 + step;
        let fp = objective(&probe, spec);
        *get(&mut probe) = x0 - step;
        let fm = objective(&probe, spec);
        *get(&mut probe) = x0;
        (fp - fm) / (2.0 * step)
    };
    let grad_w = DMatrix::from_fn(spec.k, spec.d, |i, j| diff(&mut |s| &mut s.w[(i, j)]));
    let grad_h = DMatrix::from_fn(spec.d, spec.total(), |i, j| diff(&mut |s| &mut s.h[(i, j)]));
    let grad_b = DVector::from_fn(spec.k, |i, _| diff(&mut |s| &mut s.b[i]));
    GradientTriple { grad_w, grad_h, grad_b }
}

/// Second-order central difference `(f(x+tΔ) − 2f(x) + f(x−tΔ))/t²`.
pub fn fd_quadform(state: &ModelState, delta: &DirectionTriple, spec: &ProblemSpec, step: f64) -> f64 {
    assert!(step > 0.0);
    let fp = objective(&state.shifted(delta, step), spec);
    let f0 = objective(state, spec);
    let fm = objective(&state.shifted(delta, -step), spec);
    (fp - 2.0 * f0 + fm) / (step * step)
}

/// Largest dimension for which [`dense_hessian`] will assemble a matrix.
pub const DENSE_HESSIAN_MAX_DIM: usize = 6;

/// Full Hessian assembled by polarization of [`hess_quadform`] over the
/// coordinate basis. Debug path for tiny problems only.
pub fn dense_hessian(state: &ModelState, spec: &ProblemSpec) -> Result<DMatrix<f64>> {
    if spec.k > DENSE_HESSIAN_MAX_DIM || spec.n > DENSE_HESSIAN_MAX_DIM || spec.d > DENSE_HESSIAN_MAX_DIM {
        return Err(UfmError::Domain(format!("dense Hessian limited to K, n, d <= {DENSE_HESSIAN_MAX_DIM}")));
    }
    state.check_shape(spec)?;
    let dim = DirectionTriple::zeros(spec).len();
    let basis: Vec<DirectionTriple> = (0..dim).map(|i| DirectionTriple::basis(spec, i)).collect();
    let diag: Vec<f64> = basis.iter().map(|e| hess_quadform(state, e, spec)).collect();
    let mut hm = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        hm[(i, i)] = diag[i];
        for j in 0..i {
            let sum = DirectionTriple {
                delta_w: &basis[i].delta_w + &basis[j].delta_w,
                delta_h: &basis[i].delta_h + &basis[j].delta_h,
                delta_b: &basis[i].delta_b + &basis[j].delta_b,
            };
            let v = 0.5 * (hess_quadform(state, &sum, spec) - diag[i] - diag[j]);
            hm[(i, j)] = v;
            hm[(j, i)] = v;
        }
    }
    Ok(hm)
}
