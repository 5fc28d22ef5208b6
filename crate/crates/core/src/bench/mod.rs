//! Experiment engine: learning curves, rate fits, verification suites and
//! baseline tables.
//!
//! Independent jobs (grid points, replicates, seeds) run on the rayon pool.
//! Each job draws from its own stream derived from `(seed, job index)` and
//! results are gathered in job order, so reports do not depend on the number
//! of threads.

mod baseline;
mod rates;
mod verify;

pub use baseline::{
    baseline_comparison, optimal_epoch_study, BaselineReport, BaselineRow, EpochStudy,
    EpochStudyRow, LAMBDA_GRID_LEN,
};
pub use rates::{
    estimate_rate, fit_loglog, RateConfig, RateEstimate, RateMode, RatePoint, RateReport,
};
pub use verify::{
    check_decompositions, check_epoch_map, check_population_epoch, check_primal_dual,
    concentration_frequencies, population_a_b, run_verification, verify_bounds, BoundCheck,
    BoundsReport, CheckStatus, ConcentrationReport, IdentityCheck, Inequality, VerifyConfig,
    VerifyReport,
};

use std::path::PathBuf;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::iir::GammaRange;
use crate::io::{load_csv, load_libsvm, TargetColumn};
use crate::kernel::KernelSpec;
use crate::model::{DataSet, Task};
use crate::rng;
use crate::stopping::{
    split_indices, EpochTrainer, Method, StepPolicy, StoppingRule, Trainer,
    DEFAULT_VALIDATION_FRACTION,
};
use crate::synth::{make_source_problem, sample_trig, Preset, TrigProblem};

/// One row of a learning curve. Errors use the data set's task metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

/// Where training and test data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Preset {
        preset: Preset,
    },
    Csv {
        path: PathBuf,
        target: TargetColumn,
        header: bool,
        task: Task,
    },
    Libsvm {
        path: PathBuf,
        task: Task,
    },
}

/// Training and test sets plus anything generated along the way that a report
/// should record (such as the trigonometric coefficients).
#[derive(Debug, Clone)]
pub struct Realized {
    pub train: DataSet,
    pub test: DataSet,
    pub metadata: serde_json::Value,
}

/// Fraction of a file data set held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

/// Test set size for synthetic presets.
pub const DEFAULT_TEST_SIZE: usize = 2000;

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    rng::stream(seed, stream).next_u64()
}

impl DataSource {
    /// Presets: the problem is built from `seed`, then n training points and
    /// `test_size` test points are drawn from separate streams. Files: a
    /// seeded 80/20 train/test split (n is ignored).
    pub fn realize(&self, n: usize, test_size: usize, seed: u64) -> Result<Realized> {
        match self {
            DataSource::Preset {
                preset: Preset::Trig { d, noise_sd },
            } => {
                let problem = TrigProblem::random(*d, *noise_sd, seed)?;
                let train = sample_trig(&problem, n, derive_seed(seed, 1))?;
                let test = sample_trig(&problem, test_size, derive_seed(seed, 2))?;
                let metadata =
                    serde_json::json!({ "w_star": problem.w_star, "noise_sd": noise_sd });
                Ok(Realized {
                    train,
                    test,
                    metadata,
                })
            }
            DataSource::Preset {
                preset: Preset::Source { spec, .. },
            } => {
                let problem = make_source_problem(spec, seed)?;
                let dist = &problem.distribution;
                let train = dist.sample(n, &mut rng::stream(seed, 1))?;
                let test = dist.sample(test_size, &mut rng::stream(seed, 2))?;
                let metadata = serde_json::json!({
                    "kappa": problem.kappa,
                    "output_bound": problem.m,
                    "g_norm": problem.g_norm,
                    "w_dagger": problem.w_dagger.as_ref().map(|w| w.as_slice().to_vec()),
                });
                Ok(Realized {
                    train,
                    test,
                    metadata,
                })
            }
            DataSource::Csv {
                path,
                target,
                header,
                task,
            } => split_file(load_csv(path, *target, *header)?.with_task(*task)?, seed),
            DataSource::Libsvm { path, task } => {
                split_file(load_libsvm(path)?.with_task(*task)?, seed)
            }
        }
    }
}

fn split_file(data: DataSet, seed: u64) -> Result<Realized> {
    let (train, test) = split_indices(data.n(), TEST_FRACTION, derive_seed(seed, 3))?;
    Ok(Realized {
        train: data.subset(&train)?,
        test: data.subset(&test)?,
        metadata: serde_json::json!({ "n_total": data.n() }),
    })
}

/// Settings shared by the experiment drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: DataSource,
    /// None for the linear model in `R^d`.
    pub kernel: Option<KernelSpec>,
    pub method: Method,
    pub step: StepPolicy,
    pub range: GammaRange,
    pub rule: StoppingRule,
    pub grid: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub test_size: usize,
}

impl ExperimentConfig {
    pub fn new(source: DataSource) -> Self {
        ExperimentConfig {
            source,
            kernel: None,
            method: Method::Incremental,
            step: StepPolicy::Auto,
            range: GammaRange::Strict,
            rule: StoppingRule::Holdout {
                validation_fraction: DEFAULT_VALIDATION_FRACTION,
                max_epochs: 100,
            },
            grid: vec![100],
            replicates: 1,
            seed: 0,
            epochs: 100,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            test_size: DEFAULT_TEST_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates < 1 {
            return invalid("replicates must be at least 1");
        }
        if self.grid.is_empty() {
            return invalid("grid of sample sizes is empty");
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) || self.grid[0] < 1 {
            return invalid("grid of sample sizes must be positive and strictly increasing");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return invalid("validation fraction must lie in (0, 1)");
        }
        if self.test_size < 1 {
            return invalid("test size must be at least 1");
        }
        if let Some(k) = &self.kernel {
            k.validate()?;
        }
        self.rule.validate()
    }

    pub fn trainer(&self) -> Trainer {
        let t = match self.kernel {
            Some(k) => Trainer::kernel(k, self.method),
            None => Trainer::linear(self.method),
        };
        t.with_step(self.step, self.range)
    }
}

/// Trains on `train` for `epochs` epochs and records training, validation
/// and test error after each one. A missing validation set reports NaN.
pub fn curve_on<T: EpochTrainer>(
    trainer: &mut T,
    train: &DataSet,
    validation: Option<&DataSet>,
    test: &DataSet,
    epochs: usize,
) -> Result<Vec<CurvePoint>> {
    let task = train.task();
    let probes: Vec<&DataSet> = std::iter::once(test).chain(validation).collect();
    trainer.begin(train, &probes)?;
    let mut out = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        trainer.advance()?;
        let validation = match validation {
            Some(v) => task.score(&trainer.probe_predictions(1), v.outputs())?,
            None => f64::NAN,
        };
        out.push(CurvePoint {
            epoch: trainer.epoch(),
            train: task.score(&trainer.train_predictions(), train.outputs())?,
            validation,
            test: task.score(&trainer.probe_predictions(0), test.outputs())?,
        });
    }
    Ok(out)
}

/// Learning curve for sample size `n` (the first grid entry when building
/// from a config). The training sample is split once into training and
/// validation parts; the test set is separate.
pub fn error_curve(
    config: &ExperimentConfig,
    n: usize,
) -> Result<(Vec<CurvePoint>, serde_json::Value)> {
    config.validate()?;
    let data = config.source.realize(n, config.test_size, config.seed)?;
    let (tr, va) = split_indices(
        data.train.n(),
        config.validation_fraction,
        derive_seed(config.seed, 4),
    )?;
    let train = data.train.subset(&tr)?;
    let val = data.train.subset(&va)?;
    let curve = curve_on(
        &mut config.trainer(),
        &train,
        Some(&val),
        &data.test,
        config.epochs,
    )?;
    Ok((curve, data.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SpectrumSpec;

    fn trig_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::new(DataSource::Preset {
            preset: Preset::Trig {
                d: 5,
                noise_sd: 1.0,
            },
        });
        c.seed = 7;
        c
    }

    #[test]
    fn curve_has_one_row_per_epoch() {
        let (curve, meta) = error_curve(&trig_config(), 80).unwrap();
        assert_eq!(curve.len(), 100);
        assert_eq!(curve[0].epoch, 1);
        assert_eq!(curve[99].epoch, 100);
        assert!(curve
            .iter()
            .all(|p| p.train.is_finite() && p.validation.is_finite() && p.test.is_finite()));
        assert_eq!(meta["w_star"].as_array().unwrap().len(), 5);
        assert_eq!(error_curve(&trig_config(), 80).unwrap().0, curve);
    }

    #[test]
    fn noise_free_realizable_curve_goes_to_zero() {
        let mut spec = SpectrumSpec::geometric(3, 0.7, 1.0);
        spec.noise_sd = 0.0;
        let mut c = ExperimentConfig::new(DataSource::Preset {
            preset: Preset::Source { spec, decay: 0.7 },
        });
        c.epochs = 3000;
        let (curve, _) = error_curve(&c, 60).unwrap();
        assert!(curve.last().unwrap().test < 1e-6);
    }

    #[test]
    fn train_error_decreases_with_half_step() {
        let mut c = trig_config();
        c.step = StepPolicy::Scaled(0.5);
        c.epochs = 200;
        let (curve, _) = error_curve(&c, 200).unwrap();
        assert!(curve.last().unwrap().train <= curve[0].train);
    }

    #[test]
    fn config_validation() {
        let mut c = trig_config();
        c.grid = vec![10, 10];
        assert!(c.validate().is_err());
        c.grid = vec![];
        assert!(c.validate().is_err());
        c.grid = vec![10, 20];
        c.replicates = 0;
        assert!(c.validate().is_err());
    }
}
