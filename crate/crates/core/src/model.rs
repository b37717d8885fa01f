//! Problem definition, parameter state, label layout and the text file format.
//!
//! Samples are laid out class-major: column `(k-1)·n + j` (1-based) of `H`, `Y`
//! and the residual `R = WH + b1ᵀ` belongs to sample `j` of class `k`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UfmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    CrossEntropy,
    MeanSquaredError,
}

/// Dimensions and penalty weights of one unconstrained feature model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemSpec {
    /// Number of classes `K`.
    pub k: usize,
    /// Samples per class.
    pub n: usize,
    /// Feature dimension.
    pub d: usize,
    pub lambda_w: f64,
    pub lambda_h: f64,
    pub lambda_b: f64,
    pub loss: LossKind,
}

impl ProblemSpec {
    pub fn new(
        k: usize,
        n: usize,
        d: usize,
        lambda_w: f64,
        lambda_h: f64,
        lambda_b: f64,
        loss: LossKind,
    ) -> Result<Self> {
        let spec = ProblemSpec { k, n, d, lambda_w, lambda_h, lambda_b, loss };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("K", self.k), ("n", self.n), ("d", self.d)] {
            if v == 0 {
                return Err(UfmError::InvalidConfig { key: name.into(), reason: "must be a positive integer".into() });
            }
        }
        for (name, v) in [("lambda_W", self.lambda_w), ("lambda_H", self.lambda_h)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(UfmError::InvalidConfig {
                    key: name.into(),
                    reason: format!("weight decay must be strictly positive (> 0), got {v}"),
                });
            }
        }
        if !(self.lambda_b.is_finite() && self.lambda_b >= 0.0) {
            return Err(UfmError::InvalidConfig {
                key: "lambda_b".into(),
                reason: format!("must be finite and >= 0, got {}", self.lambda_b),
            });
        }
        Ok(())
    }

    /// Total sample count `N = n·K`.
    pub fn total(&self) -> usize {
        self.n * self.k
    }

    /// `d = K`, the setting in which the strict-saddle analysis applies.
    pub fn square_case(&self) -> bool {
        self.d == self.k
    }

    pub fn require_square(&self) -> Result<()> {
        if self.square_case() {
            Ok(())
        } else {
            Err(UfmError::NotSquareCase { k: self.k, d: self.d })
        }
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    pub fn with_dim(mut self, d: usize) -> Self {
        self.d = d;
        self
    }

    /// `√(λ_W λ_H)`.
    pub fn sqrt_lambda_product(&self) -> f64 {
        (self.lambda_w * self.lambda_h).sqrt()
    }
}

/// The optimization variables `(W, H, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// Classifier, `K × d`.
    pub w: DMatrix<f64>,
    /// Features, `d × N`.
    pub h: DMatrix<f64>,
    /// Bias, length `K`.
    pub b: DVector<f64>,
}

impl ModelState {
    pub fn zeros(spec: &ProblemSpec) -> Self {
        ModelState {
            w: DMatrix::zeros(spec.k, spec.d),
            h: DMatrix::zeros(spec.d, spec.total()),
            b: DVector::zeros(spec.k),
        }
    }

    pub fn check_shape(&self, spec: &ProblemSpec) -> Result<()> {
        let checks = [
            ("W", (spec.k, spec.d), self.w.shape()),
            ("H", (spec.d, spec.total()), self.h.shape()),
            ("b", (spec.k, 1), (self.b.len(), 1)),
        ];
        for (what, expected, found) in checks {
            if expected != found {
                return Err(UfmError::Shape { what: what.into(), expected, found });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(self.h.iter()).chain(self.b.iter()).all(|x| x.is_finite())
    }

    /// `self + t·delta`.
    pub fn shifted(&self, delta: &crate::losses::DirectionTriple, t: f64) -> Self {
        ModelState { w: &self.w + &delta.delta_w * t, h: &self.h + &delta.delta_h * t, b: &self.b + &delta.delta_b * t }
    }

    /// Embed into a larger feature dimension by appending zero columns to `W`
    /// and zero rows to `H`. Critical points stay critical under this embedding.
    pub fn pad_features(&self, d: usize) -> Result<Self> {
        let (k, d0) = self.w.shape();
        if d < d0 {
            return Err(UfmError::Domain(format!("cannot pad d = {d0} down to {d}")));
        }
        let mut w = DMatrix::zeros(k, d);
        w.view_mut((0, 0), (k, d0)).copy_from(&self.w);
        let mut h = DMatrix::zeros(d, self.h.ncols());
        h.view_mut((0, 0), (d0, self.h.ncols())).copy_from(&self.h);
        Ok(ModelState { w, h, b: self.b.clone() })
    }
}

/// Block one-hot label matrix `Y ∈ ℝ^{K×N}`.
pub fn make_labels(spec: &ProblemSpec) -> DMatrix<f64> {
    let n = spec.n;
    DMatrix::from_fn(spec.k, spec.total(), |row, col| if col / n == row { 1.0 } else { 0.0 })
}

/// `R = W H + b 1ᵀ`.
pub fn residual(state: &ModelState, spec: &ProblemSpec) -> Result<DMatrix<f64>> {
    state.check_shape(spec)?;
    Ok(residual_unchecked(state))
}

pub(crate) fn residual_unchecked(state: &ModelState) -> DMatrix<f64> {
    let mut r = &state.w * &state.h;
    for mut col in r.column_iter_mut() {
        col += &state.b;
    }
    r
}

/// Column of sample `j` of class `k`; all indices 1-based.
pub fn sample_column(k: usize, j: usize, spec: &ProblemSpec) -> Result<usize> {
    if k == 0 || k > spec.k {
        return Err(UfmError::Index(format!("class {k} not in 1..={}", spec.k)));
    }
    if j == 0 || j > spec.n {
        return Err(UfmError::Index(format!("sample {j} not in 1..={}", spec.n)));
    }
    Ok((k - 1) * spec.n + j)
}

/// Class (1-based) of a 1-based column index.
pub fn column_class(col: usize, spec: &ProblemSpec) -> Result<(usize, usize)> {
    if col == 0 || col > spec.total() {
        return Err(UfmError::Index(format!("column {col} not in 1..={}", spec.total())));
    }
    Ok(((col - 1) / spec.n + 1, (col - 1) % spec.n + 1))
}

// ---------------------------------------------------------------------------
// Text format: `rows cols` header, then one whitespace-separated line per row.
// Blocks of a triple are separated by a line `---`.

pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    writeln!(out, "{} {}", m.nrows(), m.ncols()).unwrap();
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    out
}

fn format_triple(w: &DMatrix<f64>, h: &DMatrix<f64>, b: &DVector<f64>) -> String {
    let b_col = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    format!("{}---\n{}---\n{}", format_matrix(w), format_matrix(h), format_matrix(&b_col))
}

pub fn parse_matrices(text: &str) -> Result<Vec<DMatrix<f64>>> {
    let mut blocks = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    loop {
        // skip blank lines between blocks
        while matches!(lines.peek(), Some((_, l)) if l.trim().is_empty()) {
            lines.next();
        }
        let Some((lineno, header)) = lines.next() else { break };
        let dims: Vec<&str> = header.split_whitespace().collect();
        let bad_header = || UfmError::Parse { line: lineno + 1, msg: format!("expected `rows cols`, got {header:?}") };
        if dims.len() != 2 {
            return Err(bad_header());
        }
        let rows: usize = dims[0].parse().map_err(|_| bad_header())?;
        let cols: usize = dims[1].parse().map_err(|_| bad_header())?;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let Some((ln, line)) = lines.next() else {
                return Err(UfmError::Parse {
                    line: lineno + 2 + r,
                    msg: format!("expected {rows} rows, file ended after {r}"),
                });
            };
            let before = data.len();
            for tok in line.split_whitespace() {
                let x: f64 =
                    tok.parse().map_err(|_| UfmError::Parse { line: ln + 1, msg: format!("bad number {tok:?}") })?;
                if !x.is_finite() {
                    return Err(UfmError::Parse { line: ln + 1, msg: format!("non-finite value {tok:?}") });
                }
                data.push(x);
            }
            let got = data.len() - before;
            if got != cols {
                return Err(UfmError::Shape {
                    what: format!("matrix row at line {}", ln + 1),
                    expected: (1, cols),
                    found: (1, got),
                });
            }
        }
        blocks.push(DMatrix::from_row_slice(rows, cols, &data));
        match lines.next() {
            None => break,
            Some((_, l)) if l.trim() == "---" => continue,
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((ln, l)) => {
                return Err(UfmError::Parse { line: ln + 1, msg: format!("expected `---` separator, got {l:?}") })
            }
        }
    }
    Ok(blocks)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    fs::write(path, format_matrix(m))?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let mut blocks = parse_matrices(&fs::read_to_string(path)?)?;
    if blocks.len() != 1 {
        return Err(UfmError::Parse { line: 0, msg: format!("expected 1 matrix block, found {}", blocks.len()) });
    }
    Ok(blocks.remove(0))
}

pub fn save_state(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(format_triple(&state.w, &state.h, &state.b).as_bytes())?;
    Ok(())
}

pub fn save_direction(delta: &crate::losses::DirectionTriple, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_triple(&delta.delta_w, &delta.delta_h, &delta.delta_b))?;
    Ok(())
}

/// Read a three-block state file. Only internal consistency (`W: K×d`,
/// `H: d×N`, `b: K×1`) is checked; use [`load_state_for`] to check against a spec.
pub fn load_state(path: impl AsRef<Path>) -> Result<ModelState> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut text = String::new();
    for line in reader.lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    state_from_blocks(parse_matrices(&text)?)
}

fn state_from_blocks(mut blocks: Vec<DMatrix<f64>>) -> Result<ModelState> {
    if blocks.len() != 3 {
        return Err(UfmError::Parse {
            line: 0,
            msg: format!("state file needs 3 blocks (W, H, b), found {}", blocks.len()),
        });
    }
    let b = blocks.pop().unwrap();
    let h = blocks.pop().unwrap();
    let w = blocks.pop().unwrap();
    if b.ncols() != 1 {
        return Err(UfmError::Shape { what: "b".into(), expected: (w.nrows(), 1), found: b.shape() });
    }
    if b.nrows() != w.nrows() {
        return Err(UfmError::Shape { what: "b".into(), expected: (w.nrows(), 1), found: b.shape() });
    }
    if h.nrows() != w.ncols() {
        return Err(UfmError::Shape { what: "H".into(), expected: (w.ncols(), h.ncols()), found: h.shape() });
    }
    Ok(ModelState { w, h, b: b.column(0).into_owned() })
}

pub fn load_state_for(path: impl AsRef<Path>, spec: &ProblemSpec) -> Result<ModelState> {
    let state = load_state(path)?;
    state.check_shape(spec)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(k: usize, n: usize, d: usize) -> ProblemSpec {
        ProblemSpec::new(k, n, d, 1e-3, 1e-3, 1e-3, LossKind::CrossEntropy).unwrap()
    }

    #[test]
    fn labels_small_cases() {
        assert_eq!(make_labels(&spec(2, 1, 2)), DMatrix::identity(2, 2));
        let y = make_labels(&spec(2, 2, 2));
        assert_eq!(y, DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]));
        let y = make_labels(&spec(4, 10, 4));
        assert_eq!(y.norm_squared(), 40.0);
        for row in y.row_iter() {
            assert_eq!(row.sum(), 10.0);
        }
    }

    #[test]
    fn residual_trivial_cases() {
        let s = spec(2, 1, 2);
        assert_eq!(residual(&ModelState::zeros(&s), &s).unwrap(), DMatrix::zeros(2, 2));
        let st = ModelState { w: DMatrix::identity(2, 2), h: DMatrix::identity(2, 2), b: DVector::zeros(2) };
        assert_eq!(residual(&st, &s).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn residual_matches_scalar_loop() {
        let s = spec(3, 2, 3);
        let w = DMatrix::from_fn(3, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        let h = DMatrix::from_fn(3, 6, |i, j| ((i * 6 + j) as f64 * 0.91).cos());
        let b = DVector::from_vec(vec![0.3, -1.2, 0.7]);
        let st = ModelState { w: w.clone(), h: h.clone(), b: b.clone() };
        let r = residual(&st, &s).unwrap();
        for k in 1..=3 {
            for kp in 1..=3 {
                for j in 1..=2 {
                    let col = sample_column(kp, j, &s).unwrap() - 1;
                    let mut acc = b[k - 1];
                    for l in 0..3 {
                        acc += w[(k - 1, l)] * h[(l, col)];
                    }
                    assert!((r[(k - 1, col)] - acc).abs() <= 1e-14 * (1.0 + acc.abs()));
                }
            }
        }
    }

    #[test]
    fn residual_rejects_bad_shapes() {
        let s = spec(2, 1, 2);
        let mut st = ModelState::zeros(&s);
        st.h = DMatrix::zeros(3, 2);
        assert!(matches!(residual(&st, &s), Err(UfmError::Shape { .. })));
    }

    #[test]
    fn sample_column_examples() {
        let s = spec(4, 10, 4);
        assert_eq!(sample_column(1, 1, &s).unwrap(), 1);
        assert_eq!(sample_column(2, 1, &s).unwrap(), 11);
        assert_eq!(sample_column(4, 10, &s).unwrap(), 40);
        assert!(sample_column(0, 1, &s).is_err());
        assert!(sample_column(5, 1, &s).is_err());
        assert!(sample_column(1, 11, &s).is_err());
        assert_eq!(column_class(11, &s).unwrap(), (2, 1));
    }

    #[test]
    fn spec_validation() {
        assert!(ProblemSpec::new(4, 10, 4, 0.0, 1e-3, 0.0, LossKind::CrossEntropy).is_err());
        assert!(ProblemSpec::new(4, 10, 4, 1e-3, -1.0, 0.0, LossKind::CrossEntropy).is_err());
        assert!(ProblemSpec::new(4, 10, 4, 1e-3, 1e-3, -1e-3, LossKind::CrossEntropy).is_err());
        assert!(ProblemSpec::new(0, 10, 4, 1e-3, 1e-3, 0.0, LossKind::CrossEntropy).is_err());
        let s = ProblemSpec::new(4, 10, 3, 1e-3, 1e-3, 0.0, LossKind::CrossEntropy).unwrap();
        assert!(!s.square_case());
        assert!(matches!(s.require_square(), Err(UfmError::NotSquareCase { k: 4, d: 3 })));
    }

    #[test]
    fn state_file_wrong_column_count_is_shape_error() {
        let text = "2 2\n1 2\n3\n---\n2 1\n1\n2\n---\n2 1\n0\n0\n";
        assert!(matches!(parse_matrices(text), Err(UfmError::Shape { .. })));
        let text = "2 2\n1 2\n3 4\n---\n3 1\n1\n2\n3\n---\n2 1\n0\n0\n";
        let blocks = parse_matrices(text).unwrap();
        assert!(matches!(state_from_blocks(blocks), Err(UfmError::Shape { .. })));
    }

    #[test]
    fn state_round_trip_is_exact() {
        let s = spec(4, 5, 4);
        let st = ModelState {
            w: DMatrix::from_fn(4, 4, |i, j| (i as f64 + 0.1) / (j as f64 + 3.0).sqrt() - 1e-300),
            h: DMatrix::from_fn(4, 20, |i, j| ((i * 20 + j) as f64).exp().recip() * 1e5),
            b: DVector::from_fn(4, |i, _| std::f64::consts::PI * i as f64 - 1.0 / 3.0),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.txt");
        save_state(&st, &path).unwrap();
        let back = load_state_for(&path, &s).unwrap();
        assert_eq!(back, st);
        let wrong = s.with_dim(3);
        assert!(matches!(load_state_for(&path, &wrong), Err(UfmError::Shape { .. })));
    }

    #[test]
    fn padding_keeps_product() {
        let st = ModelState {
            w: DMatrix::from_row_slice(3, 1, &[1.0, -1.0, 0.5]),
            h: DMatrix::from_row_slice(1, 3, &[2.0, 0.0, -1.0]),
            b: DVector::zeros(3),
        };
        let p = st.pad_features(3).unwrap();
        assert_eq!(&p.w * &p.h, &st.w * &st.h);
    }
}
