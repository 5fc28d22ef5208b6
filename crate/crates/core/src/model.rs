//! Samples, exact discrete populations, and the risk functionals shared by the
//! rest of the crate.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::{dot, sym_pinv};
use crate::rng::Rng;

/// What the outputs of a data set mean, and therefore how errors are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Regression,
    /// Labels in {−1, +1}; scored by misclassification rate.
    Classification,
}

impl Task {
    /// RMSE for regression, misclassification rate for classification.
    pub fn score(self, predictions: &[f64], targets: &[f64]) -> Result<f64> {
        match self {
            Task::Regression => rmse(predictions, targets),
            Task::Classification => crate::kernel::classification_error(predictions, targets),
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            Task::Regression => "rmse",
            Task::Classification => "misclassification",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => invalid(format!("unknown task '{other}'")),
        }
    }
}

/// A finite sample `(x_i, y_i)`, `i = 1..n`, with inputs in `R^d`.
///
/// Inputs are stored row-major in one buffer. The sample order is meaningful:
/// the incremental iteration visits points in exactly this order.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    n: usize,
    d: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    task: Task,
}

impl DataSet {
    pub fn new(inputs: Vec<Vec<f64>>, outputs: Vec<f64>) -> Result<Self> {
        let d = inputs.first().map(Vec::len).unwrap_or(0);
        let mut x = Vec::with_capacity(inputs.len() * d);
        for row in &inputs {
            check_dim(d, row.len())?;
            x.extend_from_slice(row);
        }
        Self::from_flat(inputs.len(), d, x, outputs)
    }

    pub fn from_flat(n: usize, d: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidData(
                "data set must contain at least one point".into(),
            ));
        }
        if d == 0 {
            return Err(Error::InvalidData(
                "inputs must have dimension at least 1".into(),
            ));
        }
        check_dim(n * d, x.len())?;
        check_dim(n, y.len())?;
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite value in data".into()));
        }
        let data = DataSet {
            n,
            d,
            x,
            y,
            task: Task::Regression,
        };
        if data.kappa_bound() <= 0.0 {
            return Err(Error::InvalidData("all inputs are zero".into()));
        }
        Ok(data)
    }

    pub fn with_task(mut self, task: Task) -> Result<Self> {
        if task == Task::Classification && self.y.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::InvalidData(
                "classification labels must be -1 or +1".into(),
            ));
        }
        self.task = task;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn output(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn outputs(&self) -> &[f64] {
        &self.y
    }

    pub fn inputs(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.x.chunks_exact(self.d)
    }

    pub fn flat_inputs(&self) -> &[f64] {
        &self.x
    }

    /// `n × d` design matrix.
    pub fn design(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.x)
    }

    /// κ = max_i ‖x_i‖².
    pub fn kappa_bound(&self) -> f64 {
        self.inputs().map(|x| dot(x, x)).fold(0.0, f64::max)
    }

    /// M = max_i |y_i|.
    pub fn m_bound(&self) -> f64 {
        self.y.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Points at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut x = Vec::with_capacity(indices.len() * self.d);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n {
                return invalid(format!("index {i} out of range for {} points", self.n));
            }
            x.extend_from_slice(self.input(i));
            y.push(self.y[i]);
        }
        let mut out = Self::from_flat(indices.len(), self.d, x, y)?;
        out.task = self.task;
        Ok(out)
    }

    /// Predictions `⟨w, x_i⟩` for every point.
    pub fn predict(&self, w: &DVector<f64>) -> Result<Vec<f64>> {
        check_dim(self.d, w.len())?;
        Ok(self.inputs().map(|x| dot(x, w.as_slice())).collect())
    }

    /// Empirical second moment T̂ = (1/n) Σ x_i x_iᵀ.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let x = self.design();
        x.transpose() * &x / self.n as f64
    }

    /// (1/n) Σ y_i x_i.
    pub fn cross_moment(&self) -> DVector<f64> {
        let mut h = DVector::zeros(self.d);
        for (x, &y) in self.inputs().zip(&self.y) {
            for (hk, xk) in h.iter_mut().zip(x) {
                *hk += y * xk;
            }
        }
        h / self.n as f64
    }
}

/// Ê(w) = (1/n) Σ (⟨w, x_i⟩ − y_i)².
pub fn empirical_risk(w: &DVector<f64>, data: &DataSet) -> Result<f64> {
    check_dim(data.d(), w.len())?;
    let s: f64 = data
        .inputs()
        .zip(data.outputs())
        .map(|(x, y)| (dot(x, w.as_slice()) - y).powi(2))
        .sum();
    Ok(s / data.n() as f64)
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_dim(targets.len(), predictions.len())?;
    if targets.is_empty() {
        return invalid("cannot score an empty prediction set");
    }
    let s: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    Ok((s / targets.len() as f64).sqrt())
}

/// A probability distribution with finite support.
///
/// Outputs are `y = f(x_j) + N(0, noise_sd²)` when `x = x_j`; population
/// quantities use the regression values only, so they are noise-free.
#[derive(Debug, Clone)]
pub struct DiscreteDistribution {
    d: usize,
    support: Vec<f64>,
    weights: Vec<f64>,
    values: Vec<f64>,
    noise_sd: f64,
    t: DMatrix<f64>,
    h: DVector<f64>,
}

impl DiscreteDistribution {
    pub fn new(
        support: Vec<Vec<f64>>,
        weights: Vec<f64>,
        regression_values: Vec<f64>,
        noise_sd: f64,
    ) -> Result<Self> {
        let m = support.len();
        if m == 0 {
            return invalid("empty support");
        }
        let d = support[0].len();
        if d == 0 {
            return invalid("support points must have dimension at least 1");
        }
        check_dim(m, weights.len())?;
        check_dim(m, regression_values.len())?;
        let mut flat = Vec::with_capacity(m * d);
        for p in &support {
            check_dim(d, p.len())?;
            flat.extend_from_slice(p);
        }
        if weights.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return invalid("weights must be finite and nonnegative");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("weights sum to {total}, not 1"));
        }
        if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
            return invalid("noise_sd must be finite and nonnegative");
        }
        if flat
            .iter()
            .chain(&regression_values)
            .any(|v| !v.is_finite())
        {
            return invalid("non-finite support point or regression value");
        }

        let mut t = DMatrix::zeros(d, d);
        let mut h = DVector::zeros(d);
        for j in 0..m {
            let x = DVector::from_column_slice(&flat[j * d..(j + 1) * d]);
            t.ger(weights[j], &x, &x, 1.0);
            h.axpy(weights[j] * regression_values[j], &x, 1.0);
        }
        Ok(DiscreteDistribution {
            d,
            support: flat,
            weights,
            values: regression_values,
            noise_sd,
            t,
            h,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.support[j * self.d..(j + 1) * self.d]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn regression_values(&self) -> &[f64] {
        &self.values
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }

    /// Second-moment operator T = Σ p_j x_j x_jᵀ.
    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }

    /// h = S*g_ρ = Σ p_j f(x_j) x_j.
    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    /// max ‖x_j‖² over support points of positive weight.
    pub fn kappa(&self) -> f64 {
        (0..self.len())
            .filter(|&j| self.weights[j] > 0.0)
            .map(|j| dot(self.point(j), self.point(j)))
            .fold(0.0, f64::max)
    }

    /// A bound on |y| that holds except with negligible probability: exact when
    /// the noise is zero, otherwise max |f| plus five noise standard deviations.
    pub fn output_bound(&self) -> f64 {
        let fmax = (0..self.len())
            .filter(|&j| self.weights[j] > 0.0)
            .map(|j| self.values[j].abs())
            .fold(0.0, f64::max);
        fmax + 5.0 * self.noise_sd
    }

    /// The minimal-norm population minimizer T⁺h.
    pub fn least_squares_solution(&self) -> DVector<f64> {
        sym_pinv(&self.t, 1e-12) * &self.h
    }

    /// n i.i.d. draws in sampling order.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<DataSet> {
        if n == 0 {
            return invalid("sample size must be at least 1");
        }
        let index = WeightedIndex::new(&self.weights)
            .map_err(|e| Error::InvalidParameter(format!("weights: {e}")))?;
        let noise = Normal::new(0.0, self.noise_sd)
            .map_err(|e| Error::InvalidParameter(format!("noise: {e}")))?;
        let mut x = Vec::with_capacity(n * self.d);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let j = index.sample(rng);
            x.extend_from_slice(self.point(j));
            let eps = if self.noise_sd > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            y.push(self.values[j] + eps);
        }
        DataSet::from_flat(n, self.d, x, y)
    }
}

/// (T, h) of a discrete distribution.
pub fn population_operators(dist: &DiscreteDistribution) -> (DMatrix<f64>, DVector<f64>) {
    (dist.t().clone(), dist.h().clone())
}

/// Σ p_j (⟨w, x_j⟩ − f(x_j))², the population risk without the noise variance.
///
/// This equals ‖Sw − g_ρ‖²_ρ whenever the regression values are linear on the
/// support (every source problem); otherwise it also contains the part of the
/// regression function no linear predictor can reach. It always equals
/// wᵀTw − 2wᵀh + Σ p_j f(x_j)².
pub fn population_risk(w: &DVector<f64>, dist: &DiscreteDistribution) -> Result<f64> {
    check_dim(dist.d(), w.len())?;
    Ok((0..dist.len())
        .map(|j| dist.weights[j] * (dot(dist.point(j), w.as_slice()) - dist.values[j]).powi(2))
        .sum())
}

/// E(w) − inf E = (w − w_ls)ᵀ T (w − w_ls), with w_ls = T⁺h.
pub fn population_excess_risk(w: &DVector<f64>, dist: &DiscreteDistribution) -> Result<f64> {
    check_dim(dist.d(), w.len())?;
    let e = w - dist.least_squares_solution();
    Ok(e.dot(&(dist.t() * &e)).max(0.0))
}

/// A distribution satisfying the source condition g_ρ = L^r g with known
/// ground truth.
///
/// The eigenvectors of T are the standard basis, so `sigma[j]` is the
/// eigenvalue for coordinate `j` and `generator` holds the coordinates of g in
/// that basis (‖g‖_ρ = ‖generator‖).
#[derive(Debug, Clone)]
pub struct SourceProblem {
    pub distribution: DiscreteDistribution,
    pub r: f64,
    pub sigma: Vec<f64>,
    pub generator: DVector<f64>,
    pub g_norm: f64,
    /// T^{r−1/2}u, present when r ≥ 1/2.
    pub w_dagger: Option<DVector<f64>>,
    pub kappa: f64,
    pub m: f64,
}

impl SourceProblem {
    pub fn d(&self) -> usize {
        self.sigma.len()
    }

    /// Coordinates of g_ρ's linear part: σ_j^{r − 1/2} u_j (the population
    /// least-squares solution when it exists).
    pub fn target_coefficients(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.d(),
            self.sigma
                .iter()
                .zip(self.generator.iter())
                .map(|(s, u)| s.powf(self.r - 0.5) * u),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub empirical_risk: f64,
    pub excess_risk: Option<f64>,
    pub iterate_distance: Option<f64>,
}

pub fn risk_report(
    w: &DVector<f64>,
    data: &DataSet,
    dist: Option<&DiscreteDistribution>,
    w_dagger: Option<&DVector<f64>>,
) -> Result<RiskReport> {
    let empirical_risk = empirical_risk(w, data)?;
    let excess_risk = dist.map(|d| population_excess_risk(w, d)).transpose()?;
    let iterate_distance = match w_dagger {
        Some(wd) => {
            check_dim(wd.len(), w.len())?;
            Some((w - wd).norm())
        }
        None => None,
    };
    Ok(RiskReport {
        empirical_risk,
        excess_risk,
        iterate_distance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn orth2() -> DataSet {
        DataSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn empirical_risk_examples() {
        let one = DataSet::new(vec![vec![1.0]], vec![2.0]).unwrap();
        assert_eq!(empirical_risk(&DVector::zeros(1), &one).unwrap(), 4.0);
        let w = DVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(empirical_risk(&w, &orth2()).unwrap(), 0.0);
        let w = DVector::from_vec(vec![0.5, 0.5]);
        assert_relative_eq!(empirical_risk(&w, &orth2()).unwrap(), 0.25);
    }

    #[test]
    fn empirical_risk_dimension_mismatch() {
        let err = empirical_risk(&DVector::zeros(3), &orth2()).unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                expected: 2,
                found: 3
            }
        ));
    }

    #[test]
    fn zero_data_rejected() {
        assert!(DataSet::new(vec![vec![0.0, 0.0]], vec![1.0]).is_err());
        assert!(DataSet::new(vec![], vec![]).is_err());
        assert!(DataSet::new(vec![vec![1.0], vec![1.0, 2.0]], vec![1.0, 1.0]).is_err());
        assert!(DataSet::new(vec![vec![f64::NAN]], vec![1.0]).is_err());
    }

    #[test]
    fn excess_risk_examples() {
        let d = DiscreteDistribution::new(vec![vec![1.0]], vec![1.0], vec![3.0], 0.0).unwrap();
        assert_eq!(population_risk(&DVector::zeros(1), &d).unwrap(), 9.0);
        assert_eq!(population_excess_risk(&DVector::zeros(1), &d).unwrap(), 9.0);

        let d = DiscreteDistribution::new(
            vec![vec![1.0], vec![2.0]],
            vec![0.5, 0.5],
            vec![1.0, 2.0],
            0.0,
        )
        .unwrap();
        let w = DVector::from_vec(vec![1.0]);
        assert_eq!(population_risk(&w, &d).unwrap(), 0.0);
        assert!(population_excess_risk(&w, &d).unwrap() < 1e-24);
    }

    #[test]
    fn excess_risk_removes_unreachable_part() {
        // f is not linear on {1, 2}: the best slope leaves residual risk.
        let d = DiscreteDistribution::new(
            vec![vec![1.0], vec![2.0]],
            vec![0.5, 0.5],
            vec![1.0, 1.0],
            0.0,
        )
        .unwrap();
        let w_ls = d.least_squares_solution();
        assert_relative_eq!(w_ls[0], 0.6, epsilon = 1e-14);
        assert!(population_excess_risk(&w_ls, &d).unwrap() < 1e-24);
        assert!(population_risk(&w_ls, &d).unwrap() > 0.0);
    }

    #[test]
    fn operator_examples() {
        let d = DiscreteDistribution::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.5, 0.5],
            vec![1.0, 1.0],
            0.0,
        )
        .unwrap();
        let (t, h) = population_operators(&d);
        assert_eq!(
            t,
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.5]))
        );
        assert_eq!(h, DVector::from_vec(vec![0.5, 0.5]));

        let d = DiscreteDistribution::new(vec![vec![1.0]], vec![1.0], vec![0.0], 0.0).unwrap();
        let (t, h) = population_operators(&d);
        assert_eq!((t[(0, 0)], h[0]), (1.0, 0.0));

        let d = DiscreteDistribution::new(
            vec![vec![1.0], vec![5.0]],
            vec![1.0, 0.0],
            vec![2.0, 9.0],
            0.0,
        )
        .unwrap();
        let (t, h) = population_operators(&d);
        assert_eq!((t[(0, 0)], h[0]), (1.0, 2.0));
        assert_eq!(d.kappa(), 1.0);
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(DiscreteDistribution::new(vec![vec![1.0]], vec![0.9], vec![0.0], 0.0).is_err());
        assert!(DiscreteDistribution::new(
            vec![vec![1.0], vec![1.0]],
            vec![1.5, -0.5],
            vec![0.0, 0.0],
            0.0
        )
        .is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_noise_free_when_asked() {
        let d = DiscreteDistribution::new(
            vec![vec![1.0, 0.0], vec![0.0, 2.0]],
            vec![0.3, 0.7],
            vec![1.0, -1.0],
            0.0,
        )
        .unwrap();
        let a = d.sample(50, &mut seeded(3)).unwrap();
        let b = d.sample(50, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
        for i in 0..a.n() {
            let x = a.input(i);
            let expect = if x[0] == 1.0 { 1.0 } else { -1.0 };
            assert_eq!(a.output(i), expect);
        }
    }

    #[test]
    fn classification_task_requires_pm1() {
        let d = DataSet::new(vec![vec![1.0], vec![2.0]], vec![1.0, 0.0]).unwrap();
        assert!(d.clone().with_task(Task::Classification).is_err());
        let d = DataSet::new(vec![vec![1.0], vec![2.0]], vec![1.0, -1.0]).unwrap();
        assert_eq!(
            d.with_task(Task::Classification).unwrap().task(),
            Task::Classification
        );
    }

    fn random_dist(seed: u64, m: usize, d: usize) -> DiscreteDistribution {
        let mut rng = seeded(seed);
        let support: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let head: f64 = weights[..m - 1].iter().sum();
        weights[m - 1] = 1.0 - head;
        let values = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        DiscreteDistribution::new(support, weights, values, 0.0).unwrap()
    }

    proptest! {
        #[test]
        fn population_risk_quadratic_form(seed in 0u64..10_000, m in 1usize..12, d in 1usize..6) {
            let dist = random_dist(seed, m, d);
            let mut rng = seeded(seed ^ 0xabc);
            let w = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
            let (t, h) = population_operators(&dist);
            let c: f64 = dist.weights().iter().zip(dist.regression_values()).map(|(p, v)| p * v * v).sum();
            let quad = w.dot(&(&t * &w)) - 2.0 * w.dot(&h) + c;
            let direct = population_risk(&w, &dist).unwrap();
            prop_assert!((quad - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
            let excess = population_excess_risk(&w, &dist).unwrap();
            prop_assert!(excess <= direct + 1e-10);
        }

        #[test]
        fn empirical_risk_is_convex(seed in 0u64..10_000, lambda in 0.0f64..=1.0) {
            let mut rng = seeded(seed);
            let n = rng.random_range(1..20);
            let d = rng.random_range(1..6);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let data = DataSet::new(rows, y).unwrap();
            let w1 = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
            let w2 = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
            let mid = &w1 * lambda + &w2 * (1.0 - lambda);
            let lhs = empirical_risk(&mid, &data).unwrap();
            let rhs = lambda * empirical_risk(&w1, &data).unwrap()
                + (1.0 - lambda) * empirical_risk(&w2, &data).unwrap();
            prop_assert!(lhs <= rhs + 1e-10);
        }

        #[test]
        fn bounds_invariant_under_permutation(seed in 0u64..10_000) {
            let mut rng = seeded(seed);
            let n = rng.random_range(1..15);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0), 1.0]).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let data = DataSet::new(rows, y).unwrap();
            let mut idx: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
            let perm = data.subset(&idx).unwrap();
            prop_assert_eq!(data.kappa_bound(), perm.kappa_bound());
            prop_assert_eq!(data.m_bound(), perm.m_bound());
        }
    }
}
