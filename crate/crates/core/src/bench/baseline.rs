//! Comparison with kernel ridge regression, and the dependence of the best
//! epoch on the sample size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{curve_on, derive_seed, ExperimentConfig};
use crate::error::{invalid, Result};
use crate::kernel::{cross_gram, gram_matrix, krr_fit, KernelSpec};
use crate::linalg::median;
use crate::model::DataSet;
use crate::stopping::{
    argmin_epoch, holdout_select, split_indices, EpochTrainer, Method, StoppingRule, Trainer,
};
use crate::synth::{sample_trig, TrigProblem};

pub const LAMBDA_GRID_LEN: usize = 19;

/// λ = 10^{−9}, 10^{−8.5}, …, 10^0.
pub fn lambda_grid() -> Vec<f64> {
    (0..LAMBDA_GRID_LEN)
        .map(|k| 10f64.powf(-9.0 + 0.5 * k as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub method: String,
    pub metric: String,
    pub median_error: f64,
    pub errors: Vec<f64>,
    /// Selected epoch (KIIR, KIR) or λ (KRR) per seed.
    pub selected: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub kernel: KernelSpec,
    pub seeds: Vec<u64>,
    pub n_train: Vec<usize>,
    pub rows: Vec<BaselineRow>,
}

struct SeedResult {
    n_train: usize,
    metric: &'static str,
    errors: [f64; 3],
    selected: [f64; 3],
}

fn iterative(
    config: &ExperimentConfig,
    kernel: KernelSpec,
    method: Method,
    train: &DataSet,
    test: &DataSet,
    split_seed: u64,
) -> Result<(f64, f64)> {
    let max_epochs = match config.rule {
        StoppingRule::Holdout { max_epochs, .. } => max_epochs,
        _ => config.epochs,
    };
    let rule = StoppingRule::Holdout {
        validation_fraction: config.validation_fraction,
        max_epochs,
    };
    let make = || Trainer::kernel(kernel, method).with_step(config.step, config.range);
    let sel = holdout_select(train, &mut make(), &rule, split_seed)?;
    let mut full = make();
    full.begin(train, &[test])?;
    for _ in 0..sel.t_selected {
        full.advance()?;
    }
    let err = train
        .task()
        .score(&full.probe_predictions(0), test.outputs())?;
    Ok((err, sel.t_selected as f64))
}

fn ridge(
    config: &ExperimentConfig,
    kernel: KernelSpec,
    train: &DataSet,
    test: &DataSet,
    split_seed: u64,
) -> Result<(f64, f64)> {
    let task = train.task();
    let (tr, va) = split_indices(train.n(), config.validation_fraction, split_seed)?;
    let sub = train.subset(&tr)?;
    let val = train.subset(&va)?;
    let sub_pts: Vec<&[f64]> = sub.inputs().collect();
    let val_pts: Vec<&[f64]> = val.inputs().collect();
    let g = gram_matrix(&kernel, &sub_pts)?;
    let c = cross_gram(&kernel, &sub_pts, &val_pts)?;
    let grid = lambda_grid();
    let mut val_err = Vec::with_capacity(grid.len());
    for &lam in &grid {
        let alpha = krr_fit(&g, sub.outputs(), lam)?;
        let pred: Vec<f64> = (&c * alpha).iter().copied().collect();
        val_err.push(task.score(&pred, val.outputs())?);
    }
    let best = argmin_epoch(&val_err).expect("nonempty grid") - 1;
    let lam = grid[best];

    let pts: Vec<&[f64]> = train.inputs().collect();
    let test_pts: Vec<&[f64]> = test.inputs().collect();
    let alpha = krr_fit(&gram_matrix(&kernel, &pts)?, train.outputs(), lam)?;
    let pred: Vec<f64> = (cross_gram(&kernel, &pts, &test_pts)? * alpha)
        .iter()
        .copied()
        .collect();
    Ok((task.score(&pred, test.outputs())?, lam))
}

/// Test error of hold-out-stopped KIIR and KIR and of KRR with λ chosen on the
/// same hold-out split, one run per seed, medians across seeds. The stopping
/// epoch or λ is picked on the split and the model is then refit on the whole
/// training part.
pub fn baseline_comparison(
    config: &ExperimentConfig,
    n: usize,
    seeds: &[u64],
) -> Result<BaselineReport> {
    config.validate()?;
    if seeds.is_empty() {
        return invalid("need at least one seed");
    }
    let kernel = config.kernel.unwrap_or(KernelSpec::Linear);
    let results = seeds
        .par_iter()
        .map(|&s| -> Result<SeedResult> {
            let data = config.source.realize(n, config.test_size, s)?;
            let split_seed = derive_seed(s, 5);
            let (e0, t0) = iterative(
                config,
                kernel,
                Method::Incremental,
                &data.train,
                &data.test,
                split_seed,
            )?;
            let (e1, t1) = iterative(
                config,
                kernel,
                Method::Batch,
                &data.train,
                &data.test,
                split_seed,
            )?;
            let (e2, l2) = ridge(config, kernel, &data.train, &data.test, split_seed)?;
            Ok(SeedResult {
                n_train: data.train.n(),
                metric: data.train.task().metric_name(),
                errors: [e0, e1, e2],
                selected: [t0, t1, l2],
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let metric = results[0].metric;
    let rows = ["kiir", "kir", "krr"]
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let errors: Vec<f64> = results.iter().map(|r| r.errors[m]).collect();
            BaselineRow {
                method: (*name).into(),
                metric: metric.into(),
                median_error: median(&errors),
                errors,
                selected: results.iter().map(|r| r.selected[m]).collect(),
            }
        })
        .collect();
    Ok(BaselineReport {
        kernel,
        seeds: seeds.to_vec(),
        n_train: results.iter().map(|r| r.n_train).collect(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStudyRow {
    pub n: usize,
    pub best_epochs: Vec<usize>,
    pub median_best_epoch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStudy {
    pub d: usize,
    pub noise_sd: f64,
    pub epochs: usize,
    pub seeds: usize,
    pub rows: Vec<EpochStudyRow>,
}

/// For each seed a trigonometric problem (w* ~ N(0, I)) is drawn; for each n
/// the linear model on the dictionary features is trained with γ = κ̂⁻¹ for
/// `epochs` epochs and the epoch of minimum test RMSE is recorded. All sample
/// sizes share the epoch budget and, per seed, the problem and test set.
pub fn optimal_epoch_study(
    d: usize,
    noise_sd: f64,
    ns: &[usize],
    seeds: usize,
    epochs: usize,
    test_size: usize,
    base_seed: u64,
) -> Result<EpochStudy> {
    if seeds < 1 || epochs < 1 || ns.is_empty() {
        return invalid("need at least one seed, one epoch and one sample size");
    }
    let jobs: Vec<(usize, usize)> = (0..ns.len())
        .flat_map(|i| (0..seeds).map(move |s| (i, s)))
        .collect();
    let best = jobs
        .par_iter()
        .map(|&(i, s)| -> Result<usize> {
            let seed = derive_seed(base_seed, s as u64);
            let problem = TrigProblem::random(d, noise_sd, seed)?;
            let train = sample_trig(&problem, ns[i], derive_seed(seed, 100 + ns[i] as u64))?;
            let test = sample_trig(&problem, test_size, derive_seed(seed, 2))?;
            let curve = curve_on(
                &mut Trainer::linear(Method::Incremental),
                &train,
                None,
                &test,
                epochs,
            )?;
            let errs: Vec<f64> = curve.iter().map(|p| p.test).collect();
            Ok(argmin_epoch(&errs).expect("nonempty curve"))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = ns
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let best_epochs = best[i * seeds..(i + 1) * seeds].to_vec();
            let as_f: Vec<f64> = best_epochs.iter().map(|&t| t as f64).collect();
            EpochStudyRow {
                n,
                median_best_epoch: median(&as_f),
                best_epochs,
            }
        })
        .collect();
    Ok(EpochStudy {
        d,
        noise_sd,
        epochs,
        seeds,
        rows,
    })
}
