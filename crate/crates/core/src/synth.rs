//! Synthetic problems: regression on a trigonometric dictionary, and discrete
//! distributions with a prescribed spectrum and source exponent.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::iir::{validate_step, GammaRange};
use crate::model::{DataSet, DiscreteDistribution, SourceProblem};
use crate::rng;

/// φ_k(x) = cos((k−1)x) + sin((k−1)x), k = 1..d.
pub fn feature_map(x: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|k| {
            let a = k as f64 * x;
            a.cos() + a.sin()
        })
        .collect()
}

/// y = ⟨w*, Φ(x)⟩ + N(0, noise_sd²) with x uniform on [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigProblem {
    pub d: usize,
    pub w_star: Vec<f64>,
    pub noise_sd: f64,
}

impl TrigProblem {
    pub fn new(w_star: Vec<f64>, noise_sd: f64) -> Result<Self> {
        if w_star.is_empty() {
            return invalid("trig dictionary needs at least one component");
        }
        if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
            return invalid("noise_sd must be finite and nonnegative");
        }
        Ok(TrigProblem {
            d: w_star.len(),
            w_star,
            noise_sd,
        })
    }

    /// w* with i.i.d. standard normal coordinates drawn from `seed`.
    pub fn random(d: usize, noise_sd: f64, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, 0x7716);
        let w = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
        Self::new(w, noise_sd)
    }

    pub fn regression(&self, x: f64) -> f64 {
        crate::linalg::dot(&self.w_star, &feature_map(x, self.d))
    }

    fn draw(&self, n: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        if n < 1 {
            return invalid("sample size must be at least 1");
        }
        let mut r = rng::seeded(seed);
        let noise =
            Normal::new(0.0, self.noise_sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = r.random_range(0.0..1.0);
            let eps = if self.noise_sd > 0.0 {
                noise.sample(&mut r)
            } else {
                0.0
            };
            xs.push(x);
            ys.push(self.regression(x) + eps);
        }
        Ok((xs, ys))
    }
}

/// Features Φ(x_i) and outputs y_i. Deterministic in `seed`.
pub fn sample_trig(problem: &TrigProblem, n: usize, seed: u64) -> Result<DataSet> {
    let (xs, ys) = problem.draw(n, seed)?;
    let rows = xs.iter().map(|&x| feature_map(x, problem.d)).collect();
    DataSet::new(rows, ys)
}

/// The same draw as [`sample_trig`] with the scalar inputs x_i kept raw, for
/// use with the trigonometric-dictionary kernel.
pub fn sample_trig_raw(problem: &TrigProblem, n: usize, seed: u64) -> Result<DataSet> {
    let (xs, ys) = problem.draw(n, seed)?;
    DataSet::new(xs.into_iter().map(|x| vec![x]).collect(), ys)
}

/// How the support of a source problem realizes T = diag(σ).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SupportLayout {
    /// Points √κ e_j with weights σ_j/κ, κ = Σ σ_j.
    #[default]
    Trace,
    /// Points √(dσ_j) e_j with weights 1/d, κ = d · max σ_j.
    Uniform,
}

/// How the generator u of g = u (in the eigenbasis) is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorShape {
    /// |u_j| equal for all j, random signs: the mass of g is spread evenly
    /// over the spectrum.
    #[default]
    Balanced,
    /// u uniform on the sphere.
    Sphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSpec {
    /// σ_1 ≥ σ_2 ≥ … > 0
    pub eigenvalues: Vec<f64>,
    pub generator_norm: f64,
    pub r: f64,
    pub noise_sd: f64,
    pub layout: SupportLayout,
    #[serde(default)]
    pub generator: GeneratorShape,
}

impl SpectrumSpec {
    /// σ_j = decay^{j−1}, j = 1..d, with unit generator and no noise.
    pub fn geometric(d: usize, decay: f64, r: f64) -> Self {
        SpectrumSpec {
            eigenvalues: (0..d).map(|j| decay.powi(j as i32)).collect(),
            generator_norm: 1.0,
            r,
            noise_sd: 0.0,
            layout: SupportLayout::Trace,
            generator: GeneratorShape::Balanced,
        }
    }

    pub fn with_noise(mut self, noise_sd: f64) -> Self {
        self.noise_sd = noise_sd;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.eigenvalues.is_empty() {
            return invalid("spectrum is empty");
        }
        if self
            .eigenvalues
            .iter()
            .any(|&s| !(s > 0.0) || !s.is_finite())
        {
            return invalid("eigenvalues must be positive and finite");
        }
        if self.eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return invalid("eigenvalues must be sorted in decreasing order");
        }
        if !(self.r >= 0.0) || !self.r.is_finite() {
            return invalid(format!(
                "source exponent must be nonnegative, got {}",
                self.r
            ));
        }
        if !(self.generator_norm >= 0.0) || !self.generator_norm.is_finite() {
            return invalid("generator norm must be nonnegative");
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return invalid("noise_sd must be nonnegative");
        }
        Ok(())
    }
}

/// Builds a distribution with T = diag(σ) in the standard basis and regression
/// values f(x) = ⟨c, x⟩ with c_j = σ_j^{r−1/2} u_j, where u has norm
/// `generator_norm` and is shaped by `spec.generator`. Then g_ρ = L^r g with ‖g‖_ρ = ‖u‖, and
/// w† = c when r ≥ 1/2.
pub fn make_source_problem(spec: &SpectrumSpec, seed: u64) -> Result<SourceProblem> {
    spec.validate()?;
    let d = spec.eigenvalues.len();
    let mut r = rng::stream(seed, 0x5eed);
    let mut u: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut r));
    if spec.generator == GeneratorShape::Balanced {
        u.apply(|v| *v = if *v < 0.0 { -1.0 } else { 1.0 });
    }
    let nu = u.norm();
    u *= spec.generator_norm / nu;

    let sigma = &spec.eigenvalues;
    let c: Vec<f64> = sigma
        .iter()
        .zip(u.iter())
        .map(|(s, uj)| s.powf(spec.r - 0.5) * uj)
        .collect();
    let (kappa, scale, weights): (f64, Vec<f64>, Vec<f64>) = match spec.layout {
        SupportLayout::Trace => {
            let k: f64 = sigma.iter().sum();
            (k, vec![k.sqrt(); d], sigma.iter().map(|s| s / k).collect())
        }
        SupportLayout::Uniform => {
            let k = d as f64 * sigma[0];
            (
                k,
                sigma.iter().map(|s| (d as f64 * s).sqrt()).collect(),
                vec![1.0 / d as f64; d],
            )
        }
    };
    let mut weights = weights;
    let head: f64 = weights[..d - 1].iter().sum();
    weights[d - 1] = 1.0 - head;

    let support: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut x = vec![0.0; d];
            x[j] = scale[j];
            x
        })
        .collect();
    let values: Vec<f64> = (0..d).map(|j| c[j] * scale[j]).collect();
    let distribution = DiscreteDistribution::new(support, weights, values, spec.noise_sd)?;
    let m = distribution.output_bound();
    Ok(SourceProblem {
        distribution,
        r: spec.r,
        sigma: sigma.clone(),
        g_norm: spec.generator_norm,
        w_dagger: (spec.r >= 0.5).then(|| DVector::from_vec(c)),
        generator: u,
        kappa,
        m,
    })
}

/// Population iterates w_0..w_T in closed form: coordinate j of w_t is
/// (1 − (1 − ησ_j)^{nt}) σ_j^{r−1/2} u_j with η = γ/n.
pub fn exact_population_trajectory(
    problem: &SourceProblem,
    gamma: f64,
    n: usize,
    epochs: usize,
) -> Result<Vec<DVector<f64>>> {
    if n < 1 {
        return invalid("n must be at least 1");
    }
    validate_step(gamma, problem.kappa, n, GammaRange::Relaxed)?;
    let eta = gamma / n as f64;
    let target = problem.target_coefficients();
    let logs: Vec<f64> = problem.sigma.iter().map(|s| (-eta * s).ln_1p()).collect();
    Ok((0..=epochs)
        .map(|t| {
            if t == 0 {
                return DVector::zeros(problem.d());
            }
            let steps = (n * t) as f64;
            DVector::from_fn(problem.d(), |j, _| -(steps * logs[j]).exp_m1() * target[j])
        })
        .collect())
}

/// A named problem addressable from the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum Preset {
    /// `trig-d<d>[:noise=<sd>]`
    Trig { d: usize, noise_sd: f64 },
    /// `source:r=<r>[,decay=..][,d=..][,noise=..][,norm=..][,layout=trace|uniform][,generator=balanced|sphere]`
    Source { spec: SpectrumSpec, decay: f64 },
}

pub const SOURCE_DEFAULT_D: usize = 10;
pub const SOURCE_DEFAULT_DECAY: f64 = 0.5;
pub const SOURCE_DEFAULT_NOISE: f64 = 0.25;

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |what: String| Error::InvalidParameter(format!("preset '{s}': {what}"));
        let (head, args) = s.split_once(':').unwrap_or((s, ""));
        let mut pairs = Vec::new();
        for kv in args.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got '{kv}'")))?;
            pairs.push((k.trim(), v.trim()));
        }
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| bad(format!("'{v}' is not a number")))
        };

        if let Some(d) = head.strip_prefix("trig-d") {
            let d: usize = d.parse().map_err(|_| bad("expected trig-d<size>".into()))?;
            if d < 1 {
                return Err(bad("dictionary size must be at least 1".into()));
            }
            let mut noise_sd = 1.0;
            for (k, v) in pairs {
                match k {
                    "noise" => noise_sd = num(v)?,
                    _ => return Err(bad(format!("unknown key '{k}'"))),
                }
            }
            return Ok(Preset::Trig { d, noise_sd });
        }
        if head != "source" {
            return Err(bad(
                "unknown preset (expected trig-d<k> or source:r=..)".into()
            ));
        }
        let (mut r, mut decay, mut d) = (None, SOURCE_DEFAULT_DECAY, SOURCE_DEFAULT_D);
        let (mut noise, mut norm, mut layout) = (SOURCE_DEFAULT_NOISE, 1.0, SupportLayout::Trace);
        let mut generator = GeneratorShape::Balanced;
        for (k, v) in pairs {
            match k {
                "r" => r = Some(num(v)?),
                "decay" => decay = num(v)?,
                "d" => {
                    d = v
                        .parse()
                        .map_err(|_| bad(format!("'{v}' is not a dimension")))?
                }
                "noise" => noise = num(v)?,
                "norm" => norm = num(v)?,
                "layout" => {
                    layout = match v {
                        "trace" => SupportLayout::Trace,
                        "uniform" => SupportLayout::Uniform,
                        _ => return Err(bad(format!("unknown layout '{v}'"))),
                    }
                }
                "generator" => {
                    generator = match v {
                        "balanced" => GeneratorShape::Balanced,
                        "sphere" => GeneratorShape::Sphere,
                        _ => return Err(bad(format!("unknown generator '{v}'"))),
                    }
                }
                _ => return Err(bad(format!("unknown key '{k}'"))),
            }
        }
        let r = r.ok_or_else(|| bad("missing r".into()))?;
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(bad("decay must lie in (0, 1]".into()));
        }
        let mut spec = SpectrumSpec::geometric(d, decay, r).with_noise(noise);
        spec.generator_norm = norm;
        spec.layout = layout;
        spec.generator = generator;
        spec.validate()?;
        Ok(Preset::Source { spec, decay })
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::Trig { d, noise_sd } => write!(f, "trig-d{d}:noise={noise_sd}"),
            Preset::Source { spec, decay } => {
                let layout = match spec.layout {
                    SupportLayout::Trace => "trace",
                    SupportLayout::Uniform => "uniform",
                };
                let generator = match spec.generator {
                    GeneratorShape::Balanced => "balanced",
                    GeneratorShape::Sphere => "sphere",
                };
                write!(
                    f,
                    "source:r={},decay={decay},d={},noise={},norm={},layout={layout},generator={generator}",
                    spec.r,
                    spec.eigenvalues.len(),
                    spec.noise_sd,
                    spec.generator_norm
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iir::{population_epoch_update, IterState};
    use crate::linalg::{rel_gap, symmetric_eigenvalues};
    use crate::model::{population_excess_risk, population_operators, population_risk};
    use approx::assert_relative_eq;

    #[test]
    fn feature_examples() {
        let phi = feature_map(0.0, 4);
        assert_eq!(phi, vec![1.0, 1.0, 1.0, 1.0]);
        let phi = feature_map(0.7, 3);
        assert_eq!(phi[0], 1.0);
        assert_relative_eq!(phi[2], (1.4f64).cos() + (1.4f64).sin());
    }

    #[test]
    fn noiseless_constant_feature() {
        let p = TrigProblem::new(vec![1.0, 0.0, 0.0], 0.0).unwrap();
        let data = sample_trig(&p, 25, 4).unwrap();
        assert!(data.outputs().iter().all(|&y| y == 1.0));
    }

    #[test]
    fn trig_sampling_is_deterministic() {
        let p = TrigProblem::random(5, 1.0, 3).unwrap();
        assert_eq!(p, TrigProblem::random(5, 1.0, 3).unwrap());
        let a = sample_trig(&p, 40, 9).unwrap();
        let b = sample_trig(&p, 40, 9).unwrap();
        assert_eq!(a, b);
        let raw = sample_trig_raw(&p, 40, 9).unwrap();
        assert_eq!(raw.outputs(), a.outputs());
        for i in 0..40 {
            assert_eq!(feature_map(raw.input(i)[0], 5), a.input(i));
            assert!((0.0..1.0).contains(&raw.input(i)[0]));
        }
    }

    #[test]
    fn half_exponent_gives_identity() {
        let spec = SpectrumSpec::geometric(4, 0.5, 0.5);
        let p = make_source_problem(&spec, 1).unwrap();
        assert!((p.w_dagger.as_ref().unwrap() - &p.generator).norm() < 1e-15);
    }

    #[test]
    fn one_dimensional_example() {
        let spec = SpectrumSpec {
            eigenvalues: vec![1.0],
            generator_norm: 1.0,
            r: 1.5,
            noise_sd: 0.0,
            layout: SupportLayout::Trace,
            generator: GeneratorShape::Sphere,
        };
        let p = make_source_problem(&spec, 0).unwrap();
        let wd = p.w_dagger.clone().unwrap();
        assert_relative_eq!(wd[0].abs(), 1.0, epsilon = 1e-15);
        let x = p.distribution.point(0);
        assert_relative_eq!(p.distribution.regression_values()[0], wd[0] * x[0]);
        let (_, h) = population_operators(&p.distribution);
        assert_relative_eq!(h[0], wd[0], epsilon = 1e-15);
    }

    #[test]
    fn spectrum_round_trip_and_minimizer() {
        for layout in [SupportLayout::Trace, SupportLayout::Uniform] {
            for &r in &[0.0, 0.25, 0.75, 1.0, 2.0] {
                let mut spec = SpectrumSpec::geometric(6, 0.6, r);
                spec.layout = layout;
                let p = make_source_problem(&spec, 7).unwrap();
                let ev = symmetric_eigenvalues(p.distribution.t());
                let mut expect = spec.eigenvalues.clone();
                expect.reverse();
                for (a, b) in ev.iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-10);
                }
                assert!(p.kappa >= p.distribution.kappa() * (1.0 - 1e-12));
                assert_relative_eq!(p.generator.norm(), 1.0, epsilon = 1e-12);
                let target = p.target_coefficients();
                assert!(population_risk(&target, &p.distribution).unwrap() < 1e-24);
                if r > 0.5 {
                    let wd = p.w_dagger.as_ref().unwrap();
                    assert!(population_excess_risk(wd, &p.distribution).unwrap() < 1e-24);
                } else if r < 0.5 {
                    assert!(p.w_dagger.is_none());
                }
            }
        }
    }

    #[test]
    fn closed_form_trajectory_matches_iteration() {
        let spec = SpectrumSpec::geometric(5, 0.4, 1.0);
        let p = make_source_problem(&spec, 2).unwrap();
        let n = 10;
        let gamma = 1.0 / p.kappa;
        let path = exact_population_trajectory(&p, gamma, n, 100).unwrap();
        assert_eq!(path[0], DVector::zeros(5));
        let mut s = IterState::zero(5, gamma);
        for t in 1..=100 {
            s = population_epoch_update(&s, &p.distribution, n).unwrap();
            assert!(rel_gap(&path[t], &s.w) < 1e-10);
        }
        let far = exact_population_trajectory(&p, n as f64 / p.kappa, n, 100_000).unwrap();
        let wd = p.w_dagger.as_ref().unwrap();
        assert!((far.last().unwrap() - wd).norm() < 1e-6 * wd.norm());
        assert!(exact_population_trajectory(&p, 2.0 * n as f64 / p.kappa, n, 3).is_err());
    }

    #[test]
    fn nonpositive_spectrum_rejected() {
        let mut spec = SpectrumSpec::geometric(3, 0.5, 1.0);
        spec.eigenvalues[2] = 0.0;
        assert!(make_source_problem(&spec, 0).is_err());
        let spec = SpectrumSpec {
            eigenvalues: vec![0.5, 1.0],
            ..SpectrumSpec::geometric(2, 0.5, 1.0)
        };
        assert!(make_source_problem(&spec, 0).is_err());
    }

    #[test]
    fn presets_parse() {
        assert_eq!(
            "trig-d5".parse::<Preset>().unwrap(),
            Preset::Trig {
                d: 5,
                noise_sd: 1.0
            }
        );
        let Preset::Source { spec, decay } = "source:r=1.5".parse::<Preset>().unwrap() else {
            panic!()
        };
        assert_eq!((spec.r, decay, spec.eigenvalues.len()), (1.5, 0.5, 10));
        let p: Preset = "source:r=1,d=4,decay=0.3,noise=0,norm=2,layout=uniform,generator=sphere"
            .parse()
            .unwrap();
        assert_eq!(p.to_string().parse::<Preset>().unwrap(), p);
        for bad in [
            "source",
            "source:r=x",
            "trig-dx",
            "gauss",
            "source:r=1,foo=2",
            "source:r=1,decay=2",
        ] {
            assert!(bad.parse::<Preset>().is_err(), "{bad}");
        }
    }
}
