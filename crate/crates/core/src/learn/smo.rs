//! C-SVM dual solved by SMO over a precomputed kernel.
//!
//! Minimizes `f(a) = 1/2 a'Qa - e'a` with `Q_ij = y_i y_j K_ij`,
//! `0 <= a_i <= C` and `y'a = 0`. Each step updates the maximal violating
//! pair and stops once the violation gap drops below `tol`. Bias follows
//! the usual average over free vectors, or the midpoint of the feasible
//! interval when none is free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelMatrix;

/// Quadratic coefficient used when `K_ii + K_jj - 2 K_ij` is not positive.
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmParams {
    pub c: f64,
    pub tol: f64,
    pub max_updates: u64,
    /// Keep the dual objective after every pair update (tests only; costs O(n)).
    #[serde(skip)]
    pub record_objective: bool,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            c: 1000.0,
            tol: 1e-3,
            max_updates: 1_000_000,
            record_objective: false,
        }
    }
}

impl SvmParams {
    pub fn with_c(c: f64) -> Self {
        SvmParams {
            c,
            ..SvmParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidConfig(format!("C must be positive, got {}", self.c)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("SMO tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    /// Column manifest every prediction kernel must match.
    pub train_ids: Vec<String>,
    pub support_ids: Vec<String>,
    pub support_index: Vec<usize>,
    /// Signed dual coefficients `alpha_i * y_i`.
    pub alphas: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub updates: u64,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<String>,
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

impl SvmModel {
    /// Decision value for one kernel row against the full training manifest.
    pub fn decision(&self, row: &[f64]) -> f64 {
        self.support_index.iter().zip(&self.alphas).map(|(&s, a)| a * row[s]).sum::<f64>() + self.bias
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Result of one SMO run over a subset of the kernel's rows.
pub(crate) struct Solution {
    /// `alpha_i`, unsigned, one per selected sample.
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub updates: u64,
    pub converged: bool,
    pub trace: Vec<f64>,
}

/// SMO on the principal submatrix of `k` picked by `idx`.
pub(crate) fn solve(k: &KernelMatrix, idx: &[usize], y: &[i8], params: &SvmParams) -> Solution {
    let n = idx.len();
    let c = params.c;
    let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let mut alpha = vec![0.0f64; n];
    let mut grad = vec![-1.0f64; n];
    let diag: Vec<f64> = idx.iter().map(|&i| k.get(i, i)).collect();
    let mut trace = Vec::new();
    let objective = |alpha: &[f64], grad: &[f64]| -> f64 {
        // Dual objective to maximize: -(1/2 a'(G + e) - e'a).
        -alpha.iter().zip(grad).map(|(a, g)| 0.5 * a * (g - 1.0)).sum::<f64>()
    };
    if params.record_objective {
        trace.push(objective(&alpha, &grad));
    }

    let mut updates = 0u64;
    let mut converged = false;
    while updates < params.max_updates {
        // Maximal violating pair.
        let (mut gmax, mut gmin) = (f64::NEG_INFINITY, f64::INFINITY);
        let (mut i, mut j) = (usize::MAX, usize::MAX);
        for t in 0..n {
            let v = -yf[t] * grad[t];
            let up = if y[t] > 0 { alpha[t] < c } else { alpha[t] > 0.0 };
            let low = if y[t] > 0 { alpha[t] > 0.0 } else { alpha[t] < c };
            if up && v > gmax {
                gmax = v;
                i = t;
            }
            if low && v < gmin {
                gmin = v;
                j = t;
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < params.tol {
            converged = true;
            break;
        }

        let row_i = k.row(idx[i]);
        let row_j = k.row(idx[j]);
        let (ci, cj) = (c, c);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        // Same expression for both label cases since Q_ij = y_i y_j K_ij.
        let mut quad = diag[i] + diag[j] - 2.0 * row_i[idx[j]];
        if quad <= 0.0 {
            quad = TAU;
        }
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > ci - cj {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = ci - diff;
                }
            } else if alpha[j] > cj {
                alpha[j] = cj;
                alpha[i] = cj + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > ci {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = sum - ci;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > cj {
                if alpha[j] > cj {
                    alpha[j] = cj;
                    alpha[i] = sum - cj;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let di = (alpha[i] - old_i) * yf[i];
        let dj = (alpha[j] - old_j) * yf[j];
        for t in 0..n {
            let kt = idx[t];
            grad[t] += yf[t] * (row_i[kt] * di + row_j[kt] * dj);
        }
        updates += 1;
        if params.record_objective {
            trace.push(objective(&alpha, &grad));
        }
    }

    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut sum_free) = (0usize, 0.0f64);
    for t in 0..n {
        let yg = yf[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum_free += yg;
        }
    }
    let rho = if free > 0 { sum_free / free as f64 } else { (ub + lb) / 2.0 };

    Solution {
        alpha,
        bias: -rho,
        updates,
        converged,
        trace,
    }
}

pub(crate) fn check_binary(y: &[i8]) -> Result<()> {
    if let Some(bad) = y.iter().find(|&&v| v != 1 && v != -1) {
        return Err(Error::InvalidConfig(format!("binary labels must be +1 or -1, got {bad}")));
    }
    if !y.contains(&1) || !y.contains(&-1) {
        return Err(Error::DegenerateLabels("binary SVM needs both classes".into()));
    }
    Ok(())
}

/// Trains on the samples `idx` of a square kernel; `y` is aligned with `idx`.
pub(crate) fn train_subset(k: &KernelMatrix, idx: &[usize], y: &[i8], params: &SvmParams) -> Result<SvmModel> {
    params.validate()?;
    check_binary(y)?;
    let sol = solve(k, idx, y, params);
    let mut support_ids = Vec::new();
    let mut support_index = Vec::new();
    let mut alphas = Vec::new();
    for (t, &a) in sol.alpha.iter().enumerate() {
        if a > 0.0 {
            support_ids.push(k.row_ids()[idx[t]].clone());
            support_index.push(t);
            alphas.push(a * y[t] as f64);
        }
    }
    Ok(SvmModel {
        train_ids: idx.iter().map(|&i| k.row_ids()[i].clone()).collect(),
        support_ids,
        support_index,
        alphas,
        bias: sol.bias,
        c: params.c,
        updates: sol.updates,
        converged: sol.converged,
        kernel: None,
        objective_trace: sol.trace,
    })
}

pub fn svm_train(k: &KernelMatrix, y: &[i8], params: &SvmParams) -> Result<SvmModel> {
    if !k.is_square() || k.row_ids() != k.col_ids() {
        return Err(Error::ManifestMismatch("training kernel must be square with matching manifests".into()));
    }
    if y.len() != k.rows() {
        return Err(Error::DimMismatch {
            expected: k.rows(),
            got: y.len(),
        });
    }
    let idx: Vec<usize> = (0..k.rows()).collect();
    train_subset(k, &idx, y, params)
}

/// Labels (`+1` when the decision value is `>= 0`) and decision values for
/// every row of a test x train kernel.
pub fn svm_predict(model: &SvmModel, cross: &KernelMatrix) -> Result<(Vec<i8>, Vec<f64>)> {
    if cross.col_ids() != model.train_ids.as_slice() {
        return Err(Error::ManifestMismatch(
            "kernel columns do not match the model's training manifest".into(),
        ));
    }
    let values: Vec<f64> = (0..cross.rows()).map(|r| model.decision(cross.row(r))).collect();
    let labels = values.iter().map(|&f| if f >= 0.0 { 1 } else { -1 }).collect();
    Ok((labels, values))
}
