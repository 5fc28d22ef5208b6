//! The incremental iteration in `R^d`.
//!
//! One epoch visits the points in data set order and takes a gradient step of
//! size γ/n on each single-point loss. Over an epoch this is an affine map
//! `w ↦ (I − γT̂ + γ²Â) w + γ(1/n)Σ x_j y_j − γ²b̂`, which [`build_epoch_map`]
//! assembles explicitly for verification.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::dot;
use crate::model::{DataSet, DiscreteDistribution};

/// Admissible step-size range. The learning-rate guarantees assume γ ≤ κ⁻¹; the
/// operator facts (contraction, norm bounds) hold up to γ ≤ nκ⁻¹.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GammaRange {
    #[default]
    Strict,
    Relaxed,
}

impl GammaRange {
    pub fn max_step(self, kappa: f64, n: usize) -> f64 {
        match self {
            GammaRange::Strict => 1.0 / kappa,
            GammaRange::Relaxed => n as f64 / kappa,
        }
    }
}

/// Checks `0 < γ ≤ max_step` with a relative slack of 1e-12 for round-off in κ.
pub fn validate_step(gamma: f64, kappa: f64, n: usize, range: GammaRange) -> Result<()> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return invalid(format!(
            "step size must be positive and finite, got {gamma}"
        ));
    }
    let max = range.max_step(kappa, n);
    if gamma > max * (1.0 + 1e-12) {
        let which = match range {
            GammaRange::Strict => "1/kappa",
            GammaRange::Relaxed => "n/kappa",
        };
        return invalid(format!("step size {gamma} exceeds {which} = {max}"));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        invalid(format!(
            "step size must be positive and finite, got {gamma}"
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterState {
    pub w: DVector<f64>,
    pub epoch: usize,
    pub gamma: f64,
}

impl IterState {
    pub fn zero(d: usize, gamma: f64) -> Self {
        IterState {
            w: DVector::zeros(d),
            epoch: 0,
            gamma,
        }
    }

    pub fn new(w: DVector<f64>, gamma: f64) -> Self {
        IterState { w, epoch: 0, gamma }
    }
}

/// One cyclic pass, in place: `u ← u − (γ/n)(⟨u, x_i⟩ − y_i) x_i` for i = 1..n.
pub fn epoch_in_place(w: &mut [f64], data: &DataSet, gamma: f64) {
    let eta = gamma / data.n() as f64;
    for (x, &y) in data.inputs().zip(data.outputs()) {
        let step = eta * (dot(w, x) - y);
        for (wk, xk) in w.iter_mut().zip(x) {
            *wk -= step * xk;
        }
    }
}

pub fn epoch_update(state: &IterState, data: &DataSet) -> Result<IterState> {
    check_dim(data.d(), state.w.len())?;
    check_gamma(state.gamma)?;
    let mut w = state.w.clone();
    epoch_in_place(w.as_mut_slice(), data, state.gamma);
    Ok(IterState {
        w,
        epoch: state.epoch + 1,
        gamma: state.gamma,
    })
}

/// The affine epoch map and its ingredients.
#[derive(Debug, Clone)]
pub struct EpochMap {
    pub gamma: f64,
    /// I − γT̂ + γ²Â
    pub contraction: DMatrix<f64>,
    /// γ(1/n)Σ x_j y_j − γ²b̂
    pub offset: DVector<f64>,
    pub t_hat: DMatrix<f64>,
    pub a_hat: DMatrix<f64>,
    pub b_hat: DVector<f64>,
}

impl EpochMap {
    pub fn apply(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.offset.len(), w.len())?;
        Ok(&self.contraction * w + &self.offset)
    }

    /// Fixed point (I − M)⁻¹c of the map, if I − M is invertible.
    pub fn fixed_point(&self) -> Option<DVector<f64>> {
        let d = self.offset.len();
        let lhs = DMatrix::identity(d, d) - &self.contraction;
        lhs.lu().solve(&self.offset)
    }
}

/// Assembles T̂, Â, b̂ and the affine epoch map for step γ.
///
/// With η = γ/n and P_k = Π_{i=k+1}^n (I − ηT_{x_i}) (the factor i = n applied
/// last), Â = (1/n²) Σ_{k=2}^n P_k T_{x_k} Σ_{j<k} T_{x_j} and b̂ is the same
/// with Σ_{j<k} x_j y_j in place of the operator sum. Each term is rank one,
/// so the whole construction costs O(n d²).
pub fn build_epoch_map(data: &DataSet, gamma: f64) -> Result<EpochMap> {
    check_gamma(gamma)?;
    let n = data.n();
    let d = data.d();
    let nf = n as f64;
    let eta = gamma / nf;
    let x = |i: usize| DVector::from_column_slice(data.input(i));

    // Running sums over j < k, starting at k = n.
    let mut s_op = DMatrix::zeros(d, d);
    let mut s_vec = DVector::zeros(d);
    for j in 0..n.saturating_sub(1) {
        let xj = x(j);
        s_op.ger(1.0, &xj, &xj, 1.0);
        s_vec.axpy(data.output(j), &xj, 1.0);
    }

    let mut p = DMatrix::<f64>::identity(d, d);
    let mut a_hat = DMatrix::zeros(d, d);
    let mut b_hat = DVector::zeros(d);
    // 0-based k runs n−1 down to 1 (1-based k = n..2).
    for k in (1..n).rev() {
        let xk = x(k);
        let pk_x = &p * &xk;
        let s_x = &s_op * &xk;
        a_hat.ger(1.0, &pk_x, &s_x, 1.0);
        b_hat.axpy(xk.dot(&s_vec), &pk_x, 1.0);

        let xprev = x(k - 1);
        s_op.ger(-1.0, &xprev, &xprev, 1.0);
        s_vec.axpy(-data.output(k - 1), &xprev, 1.0);
        // P_{k−1} = P_k (I − η x_k x_kᵀ)
        p.ger(-eta, &pk_x, &xk, 1.0);
    }
    a_hat /= nf * nf;
    b_hat /= nf * nf;

    let t_hat = data.second_moment();
    let contraction = DMatrix::identity(d, d) - &t_hat * gamma + &a_hat * (gamma * gamma);
    let offset = data.cross_moment() * gamma - &b_hat * (gamma * gamma);
    Ok(EpochMap {
        gamma,
        contraction,
        offset,
        t_hat,
        a_hat,
        b_hat,
    })
}

/// `steps` gradient steps `u ← u − η(Tu − h)` on the population risk.
pub fn population_gd(
    t: &DMatrix<f64>,
    h: &DVector<f64>,
    w: &DVector<f64>,
    eta: f64,
    steps: usize,
) -> DVector<f64> {
    let mut u = w.clone();
    for _ in 0..steps {
        let grad = t * &u - h;
        u.axpy(-eta, &grad, 1.0);
    }
    u
}

/// One epoch of the population iteration: n identical inner steps of size γ/n.
pub fn population_epoch_update(
    state: &IterState,
    dist: &DiscreteDistribution,
    n: usize,
) -> Result<IterState> {
    check_dim(dist.d(), state.w.len())?;
    check_gamma(state.gamma)?;
    if n == 0 {
        return invalid("population epoch needs n >= 1");
    }
    let eta = state.gamma / n as f64;
    let w = population_gd(dist.t(), dist.h(), &state.w, eta, n);
    Ok(IterState {
        w,
        epoch: state.epoch + 1,
        gamma: state.gamma,
    })
}

/// One full-gradient step of size γ on the empirical risk.
pub fn batch_gd_epoch(state: &IterState, data: &DataSet) -> Result<IterState> {
    check_dim(data.d(), state.w.len())?;
    check_gamma(state.gamma)?;
    let eta = state.gamma / data.n() as f64;
    let mut grad = vec![0.0; data.d()];
    for (x, &y) in data.inputs().zip(data.outputs()) {
        let r = dot(state.w.as_slice(), x) - y;
        for (g, xk) in grad.iter_mut().zip(x) {
            *g += r * xk;
        }
    }
    let w = DVector::from_iterator(
        data.d(),
        state.w.iter().zip(&grad).map(|(w, g)| w - eta * g),
    );
    Ok(IterState {
        w,
        epoch: state.epoch + 1,
        gamma: state.gamma,
    })
}

fn check_square_list(ops: &[DMatrix<f64>]) -> Result<usize> {
    let first = ops
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty operator list".into()))?;
    let m = first.nrows();
    for op in ops {
        if op.nrows() != m || op.ncols() != m {
            return Err(Error::InvalidParameter(format!(
                "operators must all be {m}x{m}, found {}x{}",
                op.nrows(),
                op.ncols()
            )));
        }
    }
    Ok(m)
}

/// Π_{i=from}^{n} (I − T_i), factor n applied last (0-based `from`).
fn tail_product(ops: &[DMatrix<f64>], from: usize) -> DMatrix<f64> {
    let m = ops[0].nrows();
    let id = DMatrix::<f64>::identity(m, m);
    ops[from..]
        .iter()
        .fold(id.clone(), |acc, t| (&id - t) * acc)
}

/// Both sides of Π(I − T_i) = I − Σ T_j + Σ_{k≥2} [Π_{i>k}(I − T_i)] T_k Σ_{j<k} T_j.
/// The left side is the plain product; the right side the expansion.
pub fn product_decomposition_check(ops: &[DMatrix<f64>]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let m = check_square_list(ops)?;
    let lhs = tail_product(ops, 0);
    let mut rhs = DMatrix::<f64>::identity(m, m);
    let mut prefix = DMatrix::<f64>::zeros(m, m);
    for (k, tk) in ops.iter().enumerate() {
        if k > 0 {
            rhs += tail_product(ops, k + 1) * tk * &prefix;
        }
        rhs -= tk;
        prefix += tk;
    }
    Ok((lhs, rhs))
}

/// Both sides of Σ_i [Π_{k>i}(I − T_k)] w_i = Σ w_i − Σ_{k≥2} [Π_{i>k}(I − T_i)] T_k Σ_{j<k} w_j.
pub fn sum_decomposition_check(
    ops: &[DMatrix<f64>],
    vecs: &[DVector<f64>],
) -> Result<(DVector<f64>, DVector<f64>)> {
    let m = check_square_list(ops)?;
    check_dim(ops.len(), vecs.len())?;
    for v in vecs {
        check_dim(m, v.len())?;
    }
    let mut lhs = DVector::zeros(m);
    for (i, w) in vecs.iter().enumerate() {
        lhs += tail_product(ops, i + 1) * w;
    }
    let mut rhs: DVector<f64> = vecs.iter().fold(DVector::zeros(m), |acc, w| acc + w);
    let mut prefix = DVector::zeros(m);
    for (k, tk) in ops.iter().enumerate() {
        if k > 0 {
            rhs -= tail_product(ops, k + 1) * (tk * &prefix);
        }
        prefix += &vecs[k];
    }
    Ok((lhs, rhs))
}

/// Runs `epochs` epochs from ŵ₀ = 0. With `trace` the result holds ŵ_0..ŵ_T,
/// otherwise only ŵ_T.
pub fn run_iir(data: &DataSet, gamma: f64, epochs: usize, trace: bool) -> Result<Vec<IterState>> {
    check_gamma(gamma)?;
    let mut state = IterState::zero(data.d(), gamma);
    let mut out = Vec::with_capacity(if trace { epochs + 1 } else { 1 });
    if trace {
        out.push(state.clone());
    }
    for _ in 0..epochs {
        epoch_in_place(state.w.as_mut_slice(), data, gamma);
        state.epoch += 1;
        if trace {
            out.push(state.clone());
        }
    }
    if !trace {
        out.push(state);
    }
    Ok(out)
}

/// A single epoch with γ = κ⁻¹ n^α, i.e. one pass of stochastic gradient with
/// step κ⁻¹ n^{α−1}. Requires 0 ≤ α < 1/4.
pub fn single_pass_sgd(data: &DataSet, alpha: f64) -> Result<DVector<f64>> {
    if !(0.0..0.25).contains(&alpha) {
        return invalid(format!("alpha must lie in [0, 1/4), got {alpha}"));
    }
    let gamma = (data.n() as f64).powf(alpha) / data.kappa_bound();
    let mut w = DVector::zeros(data.d());
    epoch_in_place(w.as_mut_slice(), data, gamma);
    Ok(w)
}
