//! Choosing the number of epochs: a priori rules t*(n) = ⌈n^e⌉ and hold-out
//! selection on a single seeded split.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::iir::{epoch_in_place, validate_step, GammaRange};
use crate::kernel::{self, cross_gram, gram_matrix, DualState, KernelSpec};
use crate::model::DataSet;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StoppingRule {
    Fixed {
        epochs: usize,
    },
    /// ⌈n^{1/(2r+1)}⌉, r > 1/2 (rate in norm).
    NormRule {
        r: f64,
    },
    /// ⌈n^{1/(2(1+r))}⌉, r > 1/2 (rate in risk).
    RiskAttainable {
        r: f64,
    },
    /// ⌈n^{1/3}⌉, for r in ]0, 1/2].
    RiskNonattainable,
    Holdout {
        validation_fraction: f64,
        max_epochs: usize,
    },
}

pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.2;

impl StoppingRule {
    /// Exponent e of an a priori rule t*(n) = ⌈n^e⌉.
    pub fn exponent(&self) -> Option<f64> {
        match *self {
            StoppingRule::NormRule { r } => Some(1.0 / (2.0 * r + 1.0)),
            StoppingRule::RiskAttainable { r } => Some(1.0 / (2.0 * (1.0 + r))),
            StoppingRule::RiskNonattainable => Some(1.0 / 3.0),
            StoppingRule::Fixed { .. } | StoppingRule::Holdout { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StoppingRule::NormRule { r } | StoppingRule::RiskAttainable { r } => {
                if r > 0.5 && r.is_finite() {
                    Ok(())
                } else {
                    invalid(format!("this rule needs r > 1/2, got {r}"))
                }
            }
            StoppingRule::Holdout {
                validation_fraction: f,
                max_epochs,
            } => {
                if !(f > 0.0 && f < 1.0) {
                    invalid(format!("validation fraction must lie in (0, 1), got {f}"))
                } else if max_epochs < 1 {
                    invalid("max_epochs must be at least 1")
                } else {
                    Ok(())
                }
            }
            StoppingRule::Fixed { .. } | StoppingRule::RiskNonattainable => Ok(()),
        }
    }
}

impl fmt::Display for StoppingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StoppingRule::Fixed { epochs } => write!(f, "fixed:{epochs}"),
            StoppingRule::NormRule { r } => write!(f, "norm:{r}"),
            StoppingRule::RiskAttainable { r } => write!(f, "risk:{r}"),
            StoppingRule::RiskNonattainable => write!(f, "nonattainable"),
            StoppingRule::Holdout {
                validation_fraction,
                max_epochs,
            } => {
                write!(f, "holdout:{validation_fraction},{max_epochs}")
            }
        }
    }
}

/// Parses `fixed:<T>`, `norm:<r>`, `risk:<r>`, `nonattainable`,
/// `holdout[:<fraction>[,<max_epochs>]]` (defaults 0.2 and 100).
impl FromStr for StoppingRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        let bad = |what: &str| Error::InvalidParameter(format!("rule '{s}': {what}"));
        let num = |a: &str| a.parse::<f64>().map_err(|_| bad("expected a number"));
        let rule = match name {
            "fixed" => StoppingRule::Fixed {
                epochs: args.parse().map_err(|_| bad("expected an epoch count"))?,
            },
            "norm" => StoppingRule::NormRule { r: num(args)? },
            "risk" => StoppingRule::RiskAttainable { r: num(args)? },
            "nonattainable" if args.is_empty() => StoppingRule::RiskNonattainable,
            "holdout" => {
                let mut parts = args.split(',').filter(|p| !p.is_empty());
                let validation_fraction = parts
                    .next()
                    .map(num)
                    .transpose()?
                    .unwrap_or(DEFAULT_VALIDATION_FRACTION);
                let max_epochs = parts
                    .next()
                    .map(|p| p.parse().map_err(|_| bad("expected an epoch count")))
                    .transpose()?
                    .unwrap_or(100);
                if parts.next().is_some() {
                    return Err(bad("too many parameters"));
                }
                StoppingRule::Holdout {
                    validation_fraction,
                    max_epochs,
                }
            }
            _ => return Err(bad("unknown rule")),
        };
        rule.validate()?;
        Ok(rule)
    }
}

/// ⌈v⌉ where v = n^e, robust to v landing a hair above an integer (for
/// instance 1000^{1/3} evaluates to 10.000000000000002).
fn ceil_power(n: usize, e: f64) -> usize {
    let v = (n as f64).powf(e);
    let c = v.ceil();
    let t = if c > 1.0 && v - (c - 1.0) <= 1e-12 * v {
        c - 1.0
    } else {
        c
    };
    (t as usize).max(1)
}

/// Number of epochs prescribed by `rule` for n samples. Hold-out returns its
/// epoch budget; the choice inside it is made by [`holdout_select`].
pub fn stopping_time(rule: &StoppingRule, n: usize) -> Result<usize> {
    rule.validate()?;
    if n < 1 {
        return invalid("n must be at least 1");
    }
    Ok(match *rule {
        StoppingRule::Fixed { epochs } => epochs,
        StoppingRule::Holdout { max_epochs, .. } => max_epochs,
        _ => ceil_power(n, rule.exponent().expect("a priori rule")),
    })
}

/// Whether t*(n) = ⌈n^e⌉ satisfies t* → ∞ and t*³ log n / n → 0, i.e.
/// 0 < e < 1/3 strictly. Fixed and hold-out rules report false.
pub fn check_consistency_rate(rule: &StoppingRule) -> bool {
    match rule.exponent() {
        Some(e) => e > 0.0 && e < 1.0 / 3.0 - 1e-15,
        None => false,
    }
}

/// 1-based epoch of the smallest error; ties go to the earliest epoch.
pub fn argmin_epoch(errors: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &e) in errors.iter().enumerate() {
        if e.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| e < b) {
            best = Some((i + 1, e));
        }
    }
    best.map(|(i, _)| i)
}

/// Seeded single split of 0..n into (train, validation), each sorted so that
/// the training part keeps the data set order.
pub fn split_indices(
    n: usize,
    validation_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return invalid(format!(
            "validation fraction must lie in (0, 1), got {validation_fraction}"
        ));
    }
    let n_val = (validation_fraction * n as f64).round() as usize;
    if n_val < 1 || n_val >= n {
        return Err(Error::InvalidData(format!(
            "cannot split {n} points with validation fraction {validation_fraction}: one side would be empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// How γ is picked from the training data (κ = max ‖x_i‖² or max G_ii).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "policy", content = "value", rename_all = "snake_case")]
pub enum StepPolicy {
    /// γ = κ⁻¹
    #[default]
    Auto,
    /// γ = c · κ⁻¹
    Scaled(f64),
    Fixed(f64),
}

impl StepPolicy {
    pub fn resolve(&self, kappa: f64) -> f64 {
        match *self {
            StepPolicy::Auto => 1.0 / kappa,
            StepPolicy::Scaled(c) => c / kappa,
            StepPolicy::Fixed(g) => g,
        }
    }
}

impl FromStr for StepPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(StepPolicy::Auto);
        }
        let bad = || {
            Error::InvalidParameter(format!(
                "step size '{s}': expected 'auto', a number, or '<c>/kappa'"
            ))
        };
        let policy = match s.strip_suffix("/kappa") {
            Some(c) => StepPolicy::Scaled(c.parse().map_err(|_| bad())?),
            None => StepPolicy::Fixed(s.parse().map_err(|_| bad())?),
        };
        match policy {
            StepPolicy::Scaled(v) | StepPolicy::Fixed(v) if !(v > 0.0) || !v.is_finite() => {
                Err(bad())
            }
            p => Ok(p),
        }
    }
}

/// Something that can be trained one epoch at a time and queried on the
/// training set and on data sets fixed in advance ("probes").
pub trait EpochTrainer {
    /// Resets to the zero iterate on `train`; `probes` are the sets that will
    /// be scored later.
    fn begin(&mut self, train: &DataSet, probes: &[&DataSet]) -> Result<()>;
    fn advance(&mut self) -> Result<()>;
    fn epoch(&self) -> usize;
    fn gamma(&self) -> f64;
    fn train_predictions(&self) -> Vec<f64>;
    fn probe_predictions(&self, probe: usize) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Cyclic incremental steps.
    Incremental,
    /// Full-gradient steps.
    Batch,
}

#[derive(Debug, Clone)]
enum TrainerState {
    Idle,
    Linear {
        train: DataSet,
        design: DMatrix<f64>,
        probes: Vec<DMatrix<f64>>,
        w: DVector<f64>,
        epoch: usize,
        gamma: f64,
    },
    Kernel {
        y: Vec<f64>,
        dual: DualState,
        probes: Vec<DMatrix<f64>>,
    },
}

/// The four learners: linear or kernel model, incremental or batch steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub kernel: Option<KernelSpec>,
    pub method: Method,
    pub step: StepPolicy,
    pub range: GammaRange,
    state: TrainerState,
}

impl Trainer {
    pub fn linear(method: Method) -> Self {
        Trainer {
            kernel: None,
            method,
            step: StepPolicy::Auto,
            range: GammaRange::Strict,
            state: TrainerState::Idle,
        }
    }

    pub fn kernel(kernel: KernelSpec, method: Method) -> Self {
        Trainer {
            kernel: Some(kernel),
            ..Self::linear(method)
        }
    }

    pub fn with_step(mut self, step: StepPolicy, range: GammaRange) -> Self {
        self.step = step;
        self.range = range;
        self
    }

    /// Coefficients of the current iterate: w for linear models, α for kernels.
    pub fn coefficients(&self) -> Option<DVector<f64>> {
        match &self.state {
            TrainerState::Idle => None,
            TrainerState::Linear { w, .. } => Some(w.clone()),
            TrainerState::Kernel { dual, .. } => Some(dual.alpha.clone()),
        }
    }

    fn idle() -> Error {
        Error::InvalidParameter("trainer used before begin()".into())
    }
}

impl EpochTrainer for Trainer {
    fn begin(&mut self, train: &DataSet, probes: &[&DataSet]) -> Result<()> {
        match self.kernel {
            None => {
                let kappa = train.kappa_bound();
                let gamma = self.step.resolve(kappa);
                validate_step(gamma, kappa, train.n(), self.range)?;
                for p in probes {
                    crate::error::check_dim(train.d(), p.d())?;
                }
                self.state = TrainerState::Linear {
                    train: train.clone(),
                    design: train.design(),
                    probes: probes.iter().map(|p| p.design()).collect(),
                    w: DVector::zeros(train.d()),
                    epoch: 0,
                    gamma,
                };
            }
            Some(k) => {
                let pts: Vec<&[f64]> = train.inputs().collect();
                let gram = gram_matrix(&k, &pts)?;
                let kappa = gram.diagonal().max();
                if !(kappa > 0.0) {
                    return Err(Error::InvalidData(
                        "kernel vanishes on the training points".into(),
                    ));
                }
                let gamma = self.step.resolve(kappa);
                validate_step(gamma, kappa, train.n(), self.range)?;
                let probes = probes
                    .iter()
                    .map(|p| {
                        let q: Vec<&[f64]> = p.inputs().collect();
                        cross_gram(&k, &pts, &q)
                    })
                    .collect::<Result<Vec<_>>>()?;
                self.state = TrainerState::Kernel {
                    y: train.outputs().to_vec(),
                    dual: DualState::zero(Arc::new(gram), gamma)?,
                    probes,
                };
            }
        }
        Ok(())
    }

    fn advance(&mut self) -> Result<()> {
        let method = self.method;
        match &mut self.state {
            TrainerState::Idle => return Err(Self::idle()),
            TrainerState::Linear {
                train,
                design,
                w,
                epoch,
                gamma,
                ..
            } => {
                match method {
                    Method::Incremental => epoch_in_place(w.as_mut_slice(), train, *gamma),
                    Method::Batch => {
                        let resid = &*design * &*w - DVector::from_column_slice(train.outputs());
                        let grad = design.tr_mul(&resid);
                        w.axpy(-*gamma / train.n() as f64, &grad, 1.0);
                    }
                }
                *epoch += 1;
            }
            TrainerState::Kernel { y, dual, .. } => match method {
                Method::Incremental => kernel::kiir_epoch_in_place(dual, y)?,
                Method::Batch => kernel::kir_epoch_in_place(dual, y)?,
            },
        }
        Ok(())
    }

    fn epoch(&self) -> usize {
        match &self.state {
            TrainerState::Idle => 0,
            TrainerState::Linear { epoch, .. } => *epoch,
            TrainerState::Kernel { dual, .. } => dual.epoch,
        }
    }

    fn gamma(&self) -> f64 {
        match &self.state {
            TrainerState::Idle => f64::NAN,
            TrainerState::Linear { gamma, .. } => *gamma,
            TrainerState::Kernel { dual, .. } => dual.gamma,
        }
    }

    fn train_predictions(&self) -> Vec<f64> {
        match &self.state {
            TrainerState::Idle => Vec::new(),
            TrainerState::Linear { design, w, .. } => (design * w).iter().copied().collect(),
            TrainerState::Kernel { dual, .. } => dual.fitted().iter().copied().collect(),
        }
    }

    fn probe_predictions(&self, probe: usize) -> Vec<f64> {
        match &self.state {
            TrainerState::Idle => Vec::new(),
            TrainerState::Linear { probes, w, .. } => {
                (&probes[probe] * w).iter().copied().collect()
            }
            TrainerState::Kernel { probes, dual, .. } => {
                (&probes[probe] * &dual.alpha).iter().copied().collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutResult {
    pub t_selected: usize,
    /// (epoch, validation error) for epochs 1..=max_epochs.
    pub curve: Vec<(usize, f64)>,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

/// Splits `data` once, trains on the training part for `max_epochs`, scores
/// the validation part after every epoch with the data set's task metric,
/// and returns the earliest epoch reaching the minimum.
pub fn holdout_select<T: EpochTrainer>(
    data: &DataSet,
    trainer: &mut T,
    rule: &StoppingRule,
    seed: u64,
) -> Result<HoldoutResult> {
    let StoppingRule::Holdout {
        validation_fraction,
        max_epochs,
    } = *rule
    else {
        return invalid(format!("holdout_select needs a holdout rule, got {rule}"));
    };
    rule.validate()?;
    let (train_idx, val_idx) = split_indices(data.n(), validation_fraction, seed)?;
    let train = data.subset(&train_idx)?;
    let val = data.subset(&val_idx)?;
    trainer.begin(&train, &[&val])?;
    let mut curve = Vec::with_capacity(max_epochs);
    for _ in 0..max_epochs {
        trainer.advance()?;
        let err = data
            .task()
            .score(&trainer.probe_predictions(0), val.outputs())?;
        curve.push((trainer.epoch(), err));
    }
    let errors: Vec<f64> = curve.iter().map(|c| c.1).collect();
    let t_selected = argmin_epoch(&errors)
        .ok_or_else(|| Error::Numerical("validation error is NaN at every epoch".into()))?;
    Ok(HoldoutResult {
        t_selected,
        curve,
        train_indices: train_idx,
        validation_indices: val_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iir::run_iir;
    use proptest::prelude::*;

    #[test]
    fn stopping_time_examples() {
        assert_eq!(
            stopping_time(&StoppingRule::NormRule { r: 1.5 }, 800).unwrap(),
            6
        );
        assert_eq!(
            stopping_time(&StoppingRule::RiskAttainable { r: 1.0 }, 64).unwrap(),
            3
        );
        assert_eq!(
            stopping_time(&StoppingRule::RiskNonattainable, 1000).unwrap(),
            10
        );
        assert_eq!(
            stopping_time(&StoppingRule::RiskNonattainable, 1001).unwrap(),
            11
        );
        assert_eq!(
            stopping_time(&StoppingRule::Fixed { epochs: 7 }, 5).unwrap(),
            7
        );
        assert_eq!(
            stopping_time(&StoppingRule::RiskNonattainable, 1).unwrap(),
            1
        );
        assert!(stopping_time(&StoppingRule::NormRule { r: 0.5 }, 10).is_err());
        assert!(stopping_time(&StoppingRule::RiskAttainable { r: 0.2 }, 10).is_err());
    }

    #[test]
    fn exact_powers_are_not_rounded_up() {
        // 2^12 under e = 1/4 (r = 1.5) is exactly 8.
        assert_eq!(
            stopping_time(&StoppingRule::NormRule { r: 1.5 }, 4096).unwrap(),
            8
        );
        assert_eq!(
            stopping_time(&StoppingRule::RiskAttainable { r: 1.0 }, 65536).unwrap(),
            16
        );
        assert_eq!(
            stopping_time(&StoppingRule::RiskNonattainable, 1_000_000).unwrap(),
            100
        );
    }

    #[test]
    fn consistency_examples() {
        assert!(!check_consistency_rate(&StoppingRule::RiskNonattainable));
        assert!(check_consistency_rate(&StoppingRule::NormRule { r: 2.0 }));
        assert!(!check_consistency_rate(&StoppingRule::NormRule { r: 1.0 }));
        assert!(!check_consistency_rate(&StoppingRule::Fixed { epochs: 10 }));
        assert!(check_consistency_rate(&StoppingRule::RiskAttainable {
            r: 0.75
        }));
    }

    #[test]
    fn norm_rule_exponent_is_recovered() {
        let rule = StoppingRule::NormRule { r: 1.5 };
        let t = stopping_time(&rule, 1_000_000).unwrap() as f64;
        assert!((t.ln() / 1e6f64.ln() - 0.25).abs() < 0.02);
    }

    #[test]
    fn argmin_examples() {
        assert_eq!(argmin_epoch(&[3.0, 2.0, 1.0, 2.0, 3.0]), Some(3));
        assert_eq!(argmin_epoch(&[2.0, 1.0, 1.0]), Some(2));
        assert_eq!(argmin_epoch(&[1.0, 2.0, 3.0, 4.0]), Some(1));
        assert_eq!(argmin_epoch(&[]), None);
    }

    #[test]
    fn rule_parsing() {
        assert_eq!(
            "norm:1.5".parse::<StoppingRule>().unwrap(),
            StoppingRule::NormRule { r: 1.5 }
        );
        assert_eq!(
            "holdout".parse::<StoppingRule>().unwrap(),
            StoppingRule::Holdout {
                validation_fraction: 0.2,
                max_epochs: 100
            }
        );
        assert_eq!(
            "holdout:0.3,40".parse::<StoppingRule>().unwrap(),
            StoppingRule::Holdout {
                validation_fraction: 0.3,
                max_epochs: 40
            }
        );
        assert!("norm:0.4".parse::<StoppingRule>().is_err());
        assert!("holdout:1.5".parse::<StoppingRule>().is_err());
        for s in ["fixed:5", "risk:1", "nonattainable", "holdout:0.25,12"] {
            let r: StoppingRule = s.parse().unwrap();
            assert_eq!(r.to_string().parse::<StoppingRule>().unwrap(), r);
        }
    }

    #[test]
    fn step_policy_parsing() {
        assert_eq!("auto".parse::<StepPolicy>().unwrap(), StepPolicy::Auto);
        assert_eq!("0.5".parse::<StepPolicy>().unwrap(), StepPolicy::Fixed(0.5));
        assert_eq!(
            "0.5/kappa".parse::<StepPolicy>().unwrap(),
            StepPolicy::Scaled(0.5)
        );
        assert!("-1".parse::<StepPolicy>().is_err());
        assert!("fast".parse::<StepPolicy>().is_err());
    }

    fn line_data(n: usize) -> DataSet {
        let rows = (0..n).map(|i| vec![1.0, (i as f64 * 0.7).sin()]).collect();
        let y = (0..n).map(|i| 0.5 + 2.0 * (i as f64 * 0.7).sin()).collect();
        DataSet::new(rows, y).unwrap()
    }

    #[test]
    fn split_edge_cases() {
        assert!(split_indices(1, 0.2, 0).is_err());
        assert!(split_indices(2, 0.2, 0).is_err());
        let (tr, va) = split_indices(10, 0.2, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
        let mut all = [tr, va].concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn holdout_is_deterministic() {
        let data = line_data(40);
        let rule = StoppingRule::Holdout {
            validation_fraction: 0.25,
            max_epochs: 30,
        };
        let a =
            holdout_select(&data, &mut Trainer::linear(Method::Incremental), &rule, 11).unwrap();
        let b =
            holdout_select(&data, &mut Trainer::linear(Method::Incremental), &rule, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.curve.len(), 30);
        assert_eq!(a.validation_indices.len(), 10);
        let c =
            holdout_select(&data, &mut Trainer::linear(Method::Incremental), &rule, 12).unwrap();
        assert_ne!(a.validation_indices, c.validation_indices);
        assert!(holdout_select(
            &data,
            &mut Trainer::linear(Method::Incremental),
            &StoppingRule::Fixed { epochs: 3 },
            0
        )
        .is_err());
    }

    #[test]
    fn trainer_matches_run_iir() {
        let data = line_data(25);
        let mut tr = Trainer::linear(Method::Incremental);
        tr.begin(&data, &[]).unwrap();
        for _ in 0..5 {
            tr.advance().unwrap();
        }
        let reference = run_iir(&data, 1.0 / data.kappa_bound(), 5, false).unwrap();
        assert_eq!(tr.coefficients().unwrap(), reference[0].w);
        assert_eq!(tr.epoch(), 5);
    }

    #[test]
    fn trainer_rejects_large_step() {
        let data = line_data(10);
        let mut tr = Trainer::linear(Method::Incremental)
            .with_step(StepPolicy::Scaled(2.0), GammaRange::Strict);
        assert!(tr.begin(&data, &[]).is_err());
        let mut tr = Trainer::linear(Method::Incremental)
            .with_step(StepPolicy::Scaled(2.0), GammaRange::Relaxed);
        assert!(tr.begin(&data, &[]).is_ok());
    }

    proptest! {
        #[test]
        fn stopping_time_monotone(n in 1usize..100_000, r in 0.51f64..4.0) {
            for rule in [StoppingRule::NormRule { r }, StoppingRule::RiskAttainable { r }, StoppingRule::RiskNonattainable] {
                prop_assert!(stopping_time(&rule, n).unwrap() <= stopping_time(&rule, n + 1).unwrap());
            }
        }
    }
}
