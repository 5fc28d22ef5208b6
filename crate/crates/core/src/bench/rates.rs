//! Monte Carlo rate estimation on source problems.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::iir::{run_iir, validate_step, GammaRange};
use crate::linalg::{mean, median};
use crate::model::population_excess_risk;
use crate::rng;
use crate::stopping::{stopping_time, StepPolicy, StoppingRule};
use crate::synth::{make_source_problem, SpectrumSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateMode {
    /// ‖ŵ_{t*} − w†‖
    Norm,
    /// E(ŵ_{t*}) − inf E
    Risk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    /// (log n, log error)
    pub points: Vec<(f64, f64)>,
}

/// Least-squares line through (log n, log error). Needs at least three points
/// and positive errors.
pub fn fit_loglog(ns: &[usize], errors: &[f64]) -> Result<RateEstimate> {
    if ns.len() != errors.len() {
        return Err(Error::DimensionMismatch {
            expected: ns.len(),
            found: errors.len(),
        });
    }
    if ns.len() < 3 {
        return invalid(format!(
            "a rate needs at least 3 grid points, got {}",
            ns.len()
        ));
    }
    if errors.iter().any(|&e| !(e > 0.0) || !e.is_finite()) || ns.contains(&0) {
        return Err(Error::Numerical(
            "log-log fit needs positive finite errors and sample sizes".into(),
        ));
    }
    let points: Vec<(f64, f64)> = ns
        .iter()
        .zip(errors)
        .map(|(&n, &e)| ((n as f64).ln(), e.ln()))
        .collect();
    let m = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return invalid("grid sample sizes are all equal");
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = points
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let stderr = (ssr / (m - 2.0) / sxx).sqrt();
    Ok(RateEstimate {
        slope,
        intercept,
        stderr,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateConfig {
    pub spec: SpectrumSpec,
    pub grid: Vec<usize>,
    pub replicates: usize,
    pub mode: RateMode,
    /// Defaults to the rule matching the mode and r.
    pub rule: Option<StoppingRule>,
    pub step: StepPolicy,
    pub seed: u64,
}

impl RateConfig {
    pub fn new(spec: SpectrumSpec, mode: RateMode) -> Self {
        RateConfig {
            spec,
            grid: (6..=13).map(|k| 1usize << k).collect(),
            replicates: 50,
            mode,
            rule: None,
            step: StepPolicy::Auto,
            seed: 0,
        }
    }

    pub fn resolved_rule(&self) -> StoppingRule {
        let r = self.spec.r;
        self.rule.unwrap_or(match self.mode {
            RateMode::Norm => StoppingRule::NormRule { r },
            RateMode::Risk if r > 0.5 => StoppingRule::RiskAttainable { r },
            RateMode::Risk => StoppingRule::RiskNonattainable,
        })
    }

    /// Exponent the theory predicts for the default rules.
    pub fn theoretical_slope(&self) -> Option<f64> {
        let r = self.spec.r;
        match (self.mode, self.resolved_rule()) {
            (RateMode::Norm, StoppingRule::NormRule { .. }) => Some(-(r - 0.5) / (2.0 * r + 1.0)),
            (RateMode::Risk, StoppingRule::RiskAttainable { .. }) => Some(-r / (r + 1.0)),
            (RateMode::Risk, StoppingRule::RiskNonattainable) => Some(-2.0 * r / 3.0),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.replicates < 1 {
            return invalid("replicates must be at least 1");
        }
        if self.grid.len() < 3 {
            return invalid(format!(
                "a rate needs at least 3 grid points, got {}",
                self.grid.len()
            ));
        }
        if self.grid[0] < 1 || self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("grid of sample sizes must be positive and strictly increasing");
        }
        let decades = (*self.grid.last().unwrap() as f64 / self.grid[0] as f64).log10();
        if decades < 1.5 - 1e-12 {
            return invalid(format!(
                "grid spans {decades:.2} decades; at least 1.5 are needed"
            ));
        }
        if self.mode == RateMode::Norm && self.spec.r <= 0.5 {
            return invalid("norm mode needs r > 1/2 (w† must exist)");
        }
        let rule = self.resolved_rule();
        if matches!(rule, StoppingRule::Holdout { .. }) {
            return invalid("rate estimation needs an a priori stopping rule");
        }
        rule.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n: usize,
    pub epochs: usize,
    pub mean_error: f64,
    pub median_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub mode: RateMode,
    pub rule: StoppingRule,
    pub estimate: RateEstimate,
    pub theoretical_slope: Option<f64>,
    pub points: Vec<RatePoint>,
}

/// For each n in the grid, averages ‖ŵ_{t*(n)} − w†‖ (norm mode) or the
/// excess risk (risk mode) over replicates and fits the slope of log error
/// against log n. The problem is built once from the seed; replicate k at
/// grid index i samples from stream (i, k).
pub fn estimate_rate(config: &RateConfig) -> Result<RateReport> {
    config.validate()?;
    let problem = make_source_problem(&config.spec, config.seed)?;
    let rule = config.resolved_rule();
    let jobs: Vec<(usize, usize)> = (0..config.grid.len())
        .flat_map(|i| (0..config.replicates).map(move |k| (i, k)))
        .collect();
    let errors: Vec<f64> = jobs
        .par_iter()
        .map(|&(i, k)| -> Result<f64> {
            let n = config.grid[i];
            let data = problem
                .distribution
                .sample(n, &mut rng::job_stream(config.seed, i, k))?;
            let kappa = data.kappa_bound();
            let gamma = config.step.resolve(kappa);
            validate_step(gamma, kappa, n, GammaRange::Relaxed)?;
            let t = stopping_time(&rule, n)?;
            let w = run_iir(&data, gamma, t, false)?
                .pop()
                .expect("final iterate")
                .w;
            match config.mode {
                RateMode::Norm => {
                    let wd = problem.w_dagger.as_ref().expect("validated r > 1/2");
                    Ok((w - wd).norm())
                }
                RateMode::Risk => population_excess_risk(&w, &problem.distribution),
            }
        })
        .collect::<Result<_>>()?;

    let mut points = Vec::with_capacity(config.grid.len());
    for (i, &n) in config.grid.iter().enumerate() {
        let errs = &errors[i * config.replicates..(i + 1) * config.replicates];
        points.push(RatePoint {
            n,
            epochs: stopping_time(&rule, n)?,
            mean_error: mean(errs),
            median_error: median(errs),
        });
    }
    let means: Vec<f64> = points.iter().map(|p| p.mean_error).collect();
    let estimate = fit_loglog(&config.grid, &means)?;
    Ok(RateReport {
        mode: config.mode,
        rule,
        estimate,
        theoretical_slope: config.theoretical_slope(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exact_power_law_is_recovered() {
        let ns: Vec<usize> = (4..12).map(|k| 1 << k).collect();
        let errs: Vec<f64> = ns.iter().map(|&n| 3.0 * (n as f64).powf(-0.5)).collect();
        let est = fit_loglog(&ns, &errs).unwrap();
        assert_relative_eq!(est.slope, -0.5, epsilon = 1e-12);
        assert_relative_eq!(est.intercept, 3f64.ln(), epsilon = 1e-12);
        assert!(est.stderr < 1e-12);
    }

    #[test]
    fn fit_needs_three_positive_points() {
        assert!(fit_loglog(&[10, 100], &[1.0, 0.1]).is_err());
        assert!(fit_loglog(&[10, 100, 1000], &[1.0, 0.0, 0.1]).is_err());
    }

    #[test]
    fn config_rejects_narrow_grid() {
        let mut c = RateConfig::new(SpectrumSpec::geometric(4, 0.5, 1.5), RateMode::Norm);
        c.grid = vec![10, 20, 30];
        assert!(c.validate().is_err());
        c.grid = vec![10, 100, 400];
        assert!(c.validate().is_ok());
        let c = RateConfig::new(SpectrumSpec::geometric(4, 0.5, 0.3), RateMode::Norm);
        assert!(c.validate().is_err());
    }

    #[test]
    fn theoretical_exponents() {
        let c = RateConfig::new(SpectrumSpec::geometric(4, 0.5, 1.5), RateMode::Norm);
        assert_relative_eq!(c.theoretical_slope().unwrap(), -0.25);
        let c = RateConfig::new(SpectrumSpec::geometric(4, 0.5, 1.0), RateMode::Risk);
        assert_relative_eq!(c.theoretical_slope().unwrap(), -0.5);
    }

    #[test]
    fn small_rate_run_is_deterministic_and_decreasing() {
        let spec = SpectrumSpec::geometric(6, 0.5, 1.0).with_noise(0.25);
        let mut c = RateConfig::new(spec, RateMode::Risk);
        c.grid = vec![32, 128, 512, 2048];
        c.replicates = 8;
        c.seed = 5;
        let a = estimate_rate(&c).unwrap();
        let b = estimate_rate(&c).unwrap();
        assert_eq!(a, b);
        assert!(a.estimate.slope < 0.0);
        assert_eq!(a.points.len(), 4);
    }
}
