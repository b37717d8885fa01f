//! Flat JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use ufm_core::{LossKind, OptimizerConfig, ProblemSpec, Tolerances, UfmError};

fn default_step_size() -> f64 {
    OptimizerConfig::default().step_size
}
fn default_true() -> bool {
    true
}
fn default_max_iters() -> usize {
    OptimizerConfig::default().max_iters
}
fn default_grad_tol() -> f64 {
    OptimizerConfig::default().grad_tol
}
fn default_escape_step() -> f64 {
    OptimizerConfig::default().escape_step
}
fn default_init_scale() -> f64 {
    OptimizerConfig::default().init_scale
}
fn default_tol_cert() -> f64 {
    Tolerances::default().cert
}
fn default_rank_rel_tol() -> f64 {
    Tolerances::default().rank_rel
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct ExperimentConfig {
    pub K: usize,
    pub n: usize,
    pub d: usize,
    pub lambda_W: f64,
    pub lambda_H: f64,
    pub lambda_b: f64,
    pub loss_kind: LossKind,

    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default = "default_true")]
    pub use_backtracking: bool,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_true")]
    pub escape_enabled: bool,
    #[serde(default = "default_escape_step")]
    pub escape_step: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,

    /// Defaults to `grad_tol`.
    #[serde(default)]
    pub tol_crit: Option<f64>,
    #[serde(default = "default_tol_cert")]
    pub tol_cert: f64,
    #[serde(default = "default_rank_rel_tol")]
    pub rank_rel_tol: f64,

    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Seed of the rotation used by `build-min`; identity when absent.
    #[serde(default)]
    pub rotation_seed: Option<u64>,
}

/// A configuration problem, reported with exit code 64.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: UfmError| ConfigError(format!("config: {e}"));
        self.spec().validate().map_err(wrap)?;
        self.optimizer().validate().map_err(wrap)?;
        let tols =
            [("tol_crit", self.tolerances().crit), ("tol_cert", self.tol_cert), ("rank_rel_tol", self.rank_rel_tol)];
        for (key, v) in tols {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ConfigError(format!(
                    "config: invalid value for `{key}`: must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> ProblemSpec {
        ProblemSpec {
            k: self.K,
            n: self.n,
            d: self.d,
            lambda_w: self.lambda_W,
            lambda_h: self.lambda_H,
            lambda_b: self.lambda_b,
            loss: self.loss_kind,
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            step_size: self.step_size,
            use_backtracking: self.use_backtracking,
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            escape_enabled: self.escape_enabled,
            escape_step: self.escape_step,
            seed: self.seed,
            init_scale: self.init_scale,
        }
    }

    pub fn tolerances(&self) -> Tolerances {
        Tolerances { crit: self.tol_crit.unwrap_or(self.grad_tol), cert: self.tol_cert, rank_rel: self.rank_rel_tol }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    const MINIMAL: &str = r#"{"K": 3, "n": 2, "d": 3, "lambda_W": 0.005, "lambda_H": 0.005, "lambda_b": 0.01, "loss_kind": "CrossEntropy"}"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.optimizer(), OptimizerConfig::default());
        assert_eq!(cfg.tolerances(), Tolerances::default());
        assert_eq!(cfg.spec().total(), 6);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse(&MINIMAL.replace("\"K\"", "\"classes\": 3, \"K\"")).unwrap_err();
        assert!(err.0.contains("classes"), "{err}");
    }

    #[test]
    fn invalid_values_are_named() {
        let err = parse(&MINIMAL.replace("\"lambda_W\": 0.005", "\"lambda_W\": 0")).unwrap_err();
        assert!(err.0.contains("lambda_W") && err.0.contains("strictly positive"), "{err}");
        let err = parse(&MINIMAL.replace("\"d\": 3", "\"d\": 3, \"step_size\": -1")).unwrap_err();
        assert!(err.0.contains("step_size"), "{err}");
        let err = parse(&MINIMAL.replace("\"K\": 3,", "")).unwrap_err();
        assert!(err.0.contains("`K`"), "{err}");
    }
}
