//! Kernel versions in dual coefficients: f = Σ_j α_j K(x_j, ·).
//!
//! KIIR is the incremental iteration carried to the RKHS. Inner step i only
//! moves α_i, so an epoch costs one Gram row per point. KIR is the batch
//! gradient counterpart and KRR the Tikhonov baseline.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::dot;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Linear,
    /// exp(−‖x − x'‖² / (2σ²))
    Gaussian {
        sigma: f64,
    },
    /// (⟨x, x'⟩ + c)^p
    Polynomial {
        degree: u32,
        offset: f64,
    },
    /// Σ_{k=1}^{d} φ_k(x) φ_k(x') with φ_k(x) = cos((k−1)x) + sin((k−1)x), scalar x.
    TrigDictionary {
        components: usize,
    },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Linear => Ok(()),
            KernelSpec::Gaussian { sigma } if sigma > 0.0 && sigma.is_finite() => Ok(()),
            KernelSpec::Gaussian { sigma } => {
                invalid(format!("gaussian width must be positive, got {sigma}"))
            }
            KernelSpec::Polynomial { degree, offset } => {
                if degree < 1 {
                    invalid("polynomial degree must be at least 1")
                } else if !(offset >= 0.0) || !offset.is_finite() {
                    invalid(format!(
                        "polynomial offset must be nonnegative, got {offset}"
                    ))
                } else {
                    Ok(())
                }
            }
            KernelSpec::TrigDictionary { components } if components >= 1 => Ok(()),
            KernelSpec::TrigDictionary { .. } => {
                invalid("trig dictionary needs at least one component")
            }
        }
    }

    /// Input dimension the kernel requires, if any.
    pub fn required_dim(&self) -> Option<usize> {
        match self {
            KernelSpec::TrigDictionary { .. } => Some(1),
            _ => None,
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            KernelSpec::Linear => dot(a, b),
            KernelSpec::Gaussian { sigma } => {
                let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
                (-sq / (2.0 * sigma * sigma)).exp()
            }
            KernelSpec::Polynomial { degree, offset } => (dot(a, b) + offset).powi(degree as i32),
            KernelSpec::TrigDictionary { components } => (0..components)
                .map(|k| {
                    let k = k as f64;
                    let fa = (k * a[0]).cos() + (k * a[0]).sin();
                    let fb = (k * b[0]).cos() + (k * b[0]).sin();
                    fa * fb
                })
                .sum(),
        }
    }

    fn check_points<P: AsRef<[f64]>>(&self, points: &[P]) -> Result<()> {
        self.validate()?;
        let d = points.first().map(|p| p.as_ref().len()).unwrap_or(0);
        for p in points {
            check_dim(d, p.as_ref().len())?;
        }
        if let Some(req) = self.required_dim() {
            if !points.is_empty() {
                check_dim(req, d)?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Linear => write!(f, "linear"),
            KernelSpec::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            KernelSpec::Polynomial { degree, offset } => write!(f, "polynomial:{degree},{offset}"),
            KernelSpec::TrigDictionary { components } => write!(f, "trig:{components}"),
        }
    }
}

/// Parses `linear`, `gaussian:<sigma>`, `polynomial:<degree>[,<offset>]`, `trig:<d>`.
impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        let bad = |what: &str| Error::InvalidParameter(format!("kernel '{s}': {what}"));
        let spec = match name {
            "linear" if args.is_empty() => KernelSpec::Linear,
            "gaussian" | "rbf" => KernelSpec::Gaussian {
                sigma: if args.is_empty() {
                    1.0
                } else {
                    args.parse().map_err(|_| bad("bad width"))?
                },
            },
            "polynomial" | "poly" => {
                let mut it = args.split(',');
                let degree = it
                    .next()
                    .filter(|a| !a.is_empty())
                    .ok_or_else(|| bad("missing degree"))?
                    .parse()
                    .map_err(|_| bad("bad degree"))?;
                let offset = match it.next() {
                    Some(o) => o.parse().map_err(|_| bad("bad offset"))?,
                    None => 1.0,
                };
                if it.next().is_some() {
                    return Err(bad("too many parameters"));
                }
                KernelSpec::Polynomial { degree, offset }
            }
            "trig" => KernelSpec::TrigDictionary {
                components: args.parse().map_err(|_| bad("bad component count"))?,
            },
            _ => return Err(bad("unknown kernel")),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// G_ij = K(x_i, x_j). Columns are built in parallel.
pub fn gram_matrix<P: AsRef<[f64]> + Sync>(
    kernel: &KernelSpec,
    points: &[P],
) -> Result<DMatrix<f64>> {
    if points.is_empty() {
        return invalid("gram matrix of an empty point set");
    }
    kernel.check_points(points)?;
    let n = points.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            (0..n)
                .map(|i| kernel.eval(points[i].as_ref(), points[j].as_ref()))
                .collect()
        })
        .collect();
    Ok(DMatrix::from_vec(n, n, cols.concat()))
}

/// C_ij = K(q_i, x_j) for queries q and training points x.
pub fn cross_gram<P: AsRef<[f64]> + Sync, Q: AsRef<[f64]> + Sync>(
    kernel: &KernelSpec,
    train: &[P],
    query: &[Q],
) -> Result<DMatrix<f64>> {
    kernel.check_points(train)?;
    kernel.check_points(query)?;
    if let (Some(a), Some(b)) = (train.first(), query.first()) {
        check_dim(a.as_ref().len(), b.as_ref().len())?;
    }
    let rows: Vec<Vec<f64>> = query
        .par_iter()
        .map(|q| {
            train
                .iter()
                .map(|x| kernel.eval(q.as_ref(), x.as_ref()))
                .collect()
        })
        .collect();
    Ok(DMatrix::from_row_iterator(
        query.len(),
        train.len(),
        rows.into_iter().flatten(),
    ))
}

/// γ = 1 / max_i G_ii, the kernel analogue of κ⁻¹.
pub fn default_step(gram: &DMatrix<f64>) -> Result<f64> {
    let kappa = gram.diagonal().iter().fold(0.0_f64, |m, &v| m.max(v));
    if kappa > 0.0 {
        Ok(1.0 / kappa)
    } else {
        Err(Error::InvalidData(
            "Gram matrix has no positive diagonal entry".into(),
        ))
    }
}

#[derive(Debug, Clone)]
pub struct DualState {
    pub alpha: DVector<f64>,
    pub gram: Arc<DMatrix<f64>>,
    pub epoch: usize,
    pub gamma: f64,
}

impl DualState {
    pub fn zero(gram: Arc<DMatrix<f64>>, gamma: f64) -> Result<Self> {
        if gram.nrows() != gram.ncols() {
            return invalid("Gram matrix must be square");
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return invalid(format!(
                "step size must be positive and finite, got {gamma}"
            ));
        }
        Ok(DualState {
            alpha: DVector::zeros(gram.nrows()),
            gram,
            epoch: 0,
            gamma,
        })
    }

    pub fn n(&self) -> usize {
        self.alpha.len()
    }

    /// Predictions at the training points, G α.
    pub fn fitted(&self) -> DVector<f64> {
        &*self.gram * &self.alpha
    }

    fn check(&self, y: &[f64]) -> Result<()> {
        check_dim(self.gram.nrows(), self.alpha.len())?;
        check_dim(self.alpha.len(), y.len())
    }
}

/// One KIIR epoch in place.
pub fn kiir_epoch_in_place(state: &mut DualState, y: &[f64]) -> Result<()> {
    state.check(y)?;
    let eta = state.gamma / state.n() as f64;
    for i in 0..state.n() {
        // G is symmetric, so column i is row i.
        let residual = state.gram.column(i).dot(&state.alpha) - y[i];
        state.alpha[i] -= eta * residual;
    }
    state.epoch += 1;
    Ok(())
}

pub fn kiir_epoch(state: &DualState, y: &[f64]) -> Result<DualState> {
    let mut next = state.clone();
    kiir_epoch_in_place(&mut next, y)?;
    Ok(next)
}

/// One KIR epoch in place: α ← α − (γ/n)(Gα − y).
pub fn kir_epoch_in_place(state: &mut DualState, y: &[f64]) -> Result<()> {
    state.check(y)?;
    let eta = state.gamma / state.n() as f64;
    let residual = state.fitted() - DVector::from_column_slice(y);
    state.alpha.axpy(-eta, &residual, 1.0);
    state.epoch += 1;
    Ok(())
}

pub fn kir_epoch(state: &DualState, y: &[f64]) -> Result<DualState> {
    let mut next = state.clone();
    kir_epoch_in_place(&mut next, y)?;
    Ok(next)
}

/// α = (G + nλI)⁻¹ y. Cholesky first; LU if round-off breaks definiteness.
pub fn krr_fit(gram: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<DVector<f64>> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return invalid(format!("ridge parameter must be positive, got {lambda}"));
    }
    if gram.nrows() != gram.ncols() {
        return invalid("Gram matrix must be square");
    }
    let n = gram.nrows();
    check_dim(n, y.len())?;
    let mut a = gram.clone();
    for i in 0..n {
        a[(i, i)] += n as f64 * lambda;
    }
    let rhs = DVector::from_column_slice(y);
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(&rhs));
    }
    a.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("ridge system is singular".into()))
}

/// f(q) = Σ_j α_j K(x_j, q) for each query q.
pub fn predict<P: AsRef<[f64]> + Sync, Q: AsRef<[f64]> + Sync>(
    kernel: &KernelSpec,
    train: &[P],
    alpha: &DVector<f64>,
    query: &[Q],
) -> Result<Vec<f64>> {
    check_dim(train.len(), alpha.len())?;
    let c = cross_gram(kernel, train, query)?;
    Ok((c * alpha).iter().copied().collect())
}

/// sign(a) with ties going to +1.
pub fn sign(a: f64) -> f64 {
    if a >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Fraction of points with sign(prediction) ≠ label; labels must be ±1.
pub fn classification_error(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    check_dim(labels.len(), predictions.len())?;
    if labels.is_empty() {
        return invalid("cannot score an empty prediction set");
    }
    if let Some(bad) = labels.iter().find(|&&l| l != 1.0 && l != -1.0) {
        return Err(Error::InvalidData(format!("label {bad} is not -1 or +1")));
    }
    let wrong = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| sign(**p) != **l)
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}
