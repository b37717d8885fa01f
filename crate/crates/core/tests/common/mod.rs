#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ufm_core::losses::DirectionTriple;
use ufm_core::{run_from, DMatrix, DVector, LossKind, ModelState, OptimizerConfig, ProblemSpec};

pub const LOSSES: [LossKind; 2] = [LossKind::CrossEntropy, LossKind::MeanSquaredError];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

pub fn random_state(spec: &ProblemSpec, rng: &mut ChaCha8Rng, scale: f64) -> ModelState {
    ModelState {
        w: gaussian(rng, spec.k, spec.d, scale),
        h: gaussian(rng, spec.d, spec.total(), scale),
        b: DVector::from_iterator(spec.k, gaussian(rng, spec.k, 1, scale).iter().copied()),
    }
}

/// Gaussian direction scaled to unit norm.
pub fn random_direction(spec: &ProblemSpec, rng: &mut ChaCha8Rng) -> DirectionTriple {
    let s = random_state(spec, rng, 1.0);
    let d = DirectionTriple { delta_w: s.w, delta_h: s.h, delta_b: s.b };
    d.scaled(1.0 / d.norm_squared().sqrt())
}

pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    gaussian(rng, d, d, 1.0).qr().q()
}

pub fn spec(k: usize, n: usize, d: usize, lambda: f64, lambda_b: f64, loss: LossKind) -> ProblemSpec {
    ProblemSpec::new(k, n, d, lambda, lambda, lambda_b, loss).unwrap()
}

/// The parameters used for end-to-end runs.
pub fn reference_spec(k: usize, n: usize, loss: LossKind) -> ProblemSpec {
    spec(k, n, k, 5e-3, 1e-2, loss)
}

pub fn origin_saddle_spec() -> ProblemSpec {
    spec(4, 10, 4, 1e-3, 1e-3, LossKind::CrossEntropy)
}

pub fn bias_saddle(spec: &ProblemSpec) -> ModelState {
    let mut st = ModelState::zeros(spec);
    st.b.fill(1.0 / (spec.k as f64 * (1.0 + spec.lambda_b)));
    st
}

pub fn sweep_config(seed: u64) -> OptimizerConfig {
    OptimizerConfig { seed, max_iters: 2_000_000, ..Default::default() }
}

/// Converge with feature dimension `d_small < K`, then append zero features.
/// The padded point is critical for the `d = K` problem.
pub fn padded_critical_point(spec: &ProblemSpec, d_small: usize, seed: u64) -> Option<ModelState> {
    let small = spec.with_dim(d_small);
    let config = sweep_config(seed);
    let init = ufm_core::init_random(&small, &config);
    let out = run_from(&small, &OptimizerConfig { escape_enabled: false, ..config }, init).ok()?;
    if !out.certificate.is_critical {
        return None;
    }
    out.state.pad_features(spec.d).ok()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
