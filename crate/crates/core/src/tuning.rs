//! Finite-difference hyperparameter descent.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pipeline hyperparameters. Every σ is strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Consistency bandwidth per type code.
    pub sigma_per_type: [f64; 6],
    /// Smoothness bandwidth on normal differences.
    pub sigma_e: f64,
    /// Entropy bandwidths by feature role.
    pub sigma_semantic: f64,
    pub sigma_consistency: f64,
    pub sigma_smoothness: f64,
    /// Absolute mean-shift bandwidth; when absent it is `bandwidth_factor`
    /// times the median pairwise row distance.
    pub bandwidth: Option<f64>,
    pub bandwidth_factor: f64,
    pub d_min: usize,
    pub d_max: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            sigma_per_type: [0.02; 6],
            sigma_e: 0.2,
            sigma_semantic: 0.4,
            sigma_consistency: 0.01,
            sigma_smoothness: 0.8,
            bandwidth: None,
            bandwidth_factor: 0.25,
            d_min: 2,
            d_max: 12,
        }
    }
}

/// Names of the coordinates the tuner moves, in vector order.
pub const TUNED_NAMES: [&str; 8] = [
    "sigma_plane",
    "sigma_sphere",
    "sigma_cylinder",
    "sigma_cone",
    "sigma_e",
    "sigma_semantic",
    "sigma_consistency",
    "sigma_smoothness",
];

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let mut sig: Vec<f64> = self.sigma_per_type.to_vec();
        sig.extend([self.sigma_e, self.sigma_semantic, self.sigma_consistency, self.sigma_smoothness, self.bandwidth_factor]);
        if let Some(h) = self.bandwidth {
            sig.push(h);
        }
        if sig.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument("bandwidths must be finite and positive".into()));
        }
        if self.d_min == 0 || self.d_max < self.d_min {
            return Err(Error::InvalidArgument("need 1 <= d_min <= d_max".into()));
        }
        Ok(())
    }

    /// Log of the tuned bandwidths, ordered as [`TUNED_NAMES`].
    pub fn to_log_vector(&self) -> Vec<f64> {
        let s = &self.sigma_per_type;
        [s[0], s[1], s[2], s[3], self.sigma_e, self.sigma_semantic, self.sigma_consistency, self.sigma_smoothness]
            .iter()
            .map(|v| v.ln())
            .collect()
    }

    /// Copy of `self` with the tuned bandwidths replaced by `exp(x)`.
    pub fn with_log_vector(&self, x: &[f64]) -> Self {
        assert_eq!(x.len(), TUNED_NAMES.len());
        let mut hp = self.clone();
        for t in 0..4 {
            hp.sigma_per_type[t] = x[t].exp();
        }
        hp.sigma_e = x[4].exp();
        hp.sigma_semantic = x[5].exp();
        hp.sigma_consistency = x[6].exp();
        hp.sigma_smoothness = x[7].exp();
        hp
    }
}

/// Offsets of the finite-difference design: `+r e_i` for every axis, then
/// `-r e_i`, then the same pairs at half radius, and so on.
fn design_offsets(dim: usize, count: usize, radius: f64) -> Vec<DVector<f64>> {
    (0..count)
        .map(|s| {
            let round = s / (2 * dim);
            let within = s % (2 * dim);
            let sign = if within < dim { 1.0 } else { -1.0 };
            let mut v = DVector::zeros(dim);
            v[within % dim] = sign * radius / (1u64 << round.min(60)) as f64;
            v
        })
        .collect()
}

/// Local model of `f` around `x` from one finite-difference design.
#[derive(Debug, Clone)]
pub struct FiniteDiffModel {
    /// Slope of the best-fitting linear function.
    pub gradient: Vec<f64>,
    /// Central second differences along each axis, when the design holds a
    /// full `±radius` pair for every axis.
    pub curvature: Option<Vec<f64>>,
}

/// Fits a linear model through `samples` evaluations of `f` around `x` (the
/// centre plus axis perturbations of size `radius`).
pub fn finite_diff_model<F>(f: &F, x: &[f64], samples: usize, radius: f64) -> Result<FiniteDiffModel>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let dim = x.len();
    if dim == 0 || samples < dim + 1 || !(radius > 0.0) {
        return Err(Error::InsufficientSamples);
    }
    let offsets = design_offsets(dim, samples - 1, radius);
    let mut points: Vec<DVector<f64>> = vec![DVector::zeros(dim)];
    points.extend(offsets);
    let values: Vec<f64> = points
        .par_iter()
        .map(|o| {
            let p: Vec<f64> = x.iter().zip(o.iter()).map(|(a, b)| a + b).collect();
            f(&p)
        })
        .collect::<Result<_>>()?;
    let design = DMatrix::from_fn(samples, dim + 1, |r, c| if c == 0 { 1.0 } else { points[r][c - 1] });
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-12 * smax) {
        return Err(Error::InsufficientSamples);
    }
    let curvature = (samples > 2 * dim).then(|| {
        (0..dim)
            .map(|i| (values[1 + i] + values[1 + dim + i] - 2.0 * values[0]) / (radius * radius))
            .collect()
    });
    let rhs = DVector::from_vec(values);
    let coef = svd.solve(&rhs, 0.0).map_err(|_| Error::InsufficientSamples)?;
    Ok(FiniteDiffModel {
        gradient: coef.iter().skip(1).copied().collect(),
        curvature,
    })
}

/// Slope of the least-squares linear model through `samples` evaluations
/// of `f` around `x`; see [`finite_diff_model`].
pub fn finite_diff_gradient<F>(f: &F, x: &[f64], samples: usize, radius: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    finite_diff_model(f, x, samples, radius).map(|m| m.gradient)
}

/// Descent direction `g_i / h_i` with the curvature floored at a fraction of
/// the largest one, or the plain gradient without curvature.
fn scaled_direction(g: &[f64], curvature: Option<&[f64]>) -> Vec<f64> {
    let Some(h) = curvature else { return g.to_vec() };
    let hmax = h.iter().fold(0.0f64, |m, v| m.max(*v));
    if !(hmax > 0.0) {
        return g.to_vec();
    }
    let floor = CURVATURE_FLOOR * hmax;
    g.iter().zip(h).map(|(gi, hi)| gi / hi.max(floor)).collect()
}

/// Smallest curvature used for scaling, relative to the largest.
const CURVATURE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneOptions {
    pub max_iter: usize,
    /// Finite-difference sample count; `None` means 2·dim+1.
    pub samples: Option<usize>,
    /// Perturbation radius in log space.
    pub radius: f64,
    pub armijo_c: f64,
    pub max_halvings: usize,
    /// Termination threshold on the log-space step length.
    pub min_step: f64,
    /// Cap on the length of the first trial step of each line search.
    pub max_step: f64,
    /// Divide each gradient component by the measured curvature along its
    /// axis, so narrow valleys do not make the descent zig-zag.
    pub diagonal_scaling: bool,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            max_iter: 30,
            samples: None,
            radius: 0.05,
            armijo_c: 1e-4,
            max_halvings: 20,
            min_step: 1e-3,
            max_step: 1.0,
            diagonal_scaling: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    StepSize,
    MaxIter,
    /// An objective evaluation failed; the last accepted iterate is kept.
    ObjectiveFailed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    /// Log-space length of the accepted step.
    pub step: f64,
    pub hp: HyperParams,
}

#[derive(Debug, Clone)]
pub struct TuneReport {
    pub hp: HyperParams,
    pub objective: f64,
    /// Row 0 is the starting point; each later row is an accepted step.
    pub trace: Vec<TraceRow>,
    pub termination: Termination,
    /// Length of the last step taken or, after a failed line search, tried.
    pub final_step: f64,
    pub iterations: usize,
}

impl TuneReport {
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "iteration,objective,step")?;
        for name in TUNED_NAMES {
            write!(w, ",{name}")?;
        }
        writeln!(w)?;
        for row in &self.trace {
            write!(w, "{},{},{}", row.iteration, row.objective, row.step)?;
            for v in row.hp.to_log_vector() {
                write!(w, ",{}", v.exp())?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Gradient descent in log space on the tuned bandwidths of `hp0`, with a
/// finite-difference gradient (optionally scaled by diagonal curvature) and
/// an Armijo backtracking line search. Stops once the accepted or last tried
/// step is shorter than `min_step`.
pub fn tune_hyperparams<F>(objective: &F, hp0: &HyperParams, opts: &TuneOptions) -> Result<TuneReport>
where
    F: Fn(&HyperParams) -> Result<f64> + Sync,
{
    hp0.validate()?;
    let f = |x: &[f64]| -> Result<f64> {
        let v = objective(&hp0.with_log_vector(x))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Objective(format!("non-finite value {v}")))
        }
    };
    let mut x = hp0.to_log_vector();
    let dim = x.len();
    let samples = opts.samples.unwrap_or(2 * dim + 1);
    let mut fx = f(&x)?;
    let mut hp = hp0.clone();
    let mut trace = vec![TraceRow {
        iteration: 0,
        objective: fx,
        step: 0.0,
        hp: hp0.clone(),
    }];
    let mut final_step = 0.0;
    let mut iterations = 0;
    let termination = 'outer: loop {
        if iterations >= opts.max_iter {
            break Termination::MaxIter;
        }
        iterations += 1;
        let model = match finite_diff_model(&f, &x, samples, opts.radius) {
            Ok(m) => m,
            Err(e @ Error::InsufficientSamples) => return Err(e),
            Err(e) => break Termination::ObjectiveFailed(e.to_string()),
        };
        let g = &model.gradient;
        let curvature = if opts.diagonal_scaling { model.curvature.as_deref() } else { None };
        let d = scaled_direction(g, curvature);
        let dnorm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        if dnorm == 0.0 || !(slope > 0.0) {
            final_step = 0.0;
            break Termination::StepSize;
        }
        let mut t = (opts.max_step / dnorm).min(1.0);
        for _ in 0..=opts.max_halvings {
            let step = t * dnorm;
            final_step = step;
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - t * b).collect();
            let ft = match f(&trial) {
                Ok(v) => Some(v),
                Err(Error::Objective(msg)) => {
                    log::warn!("objective failed during line search: {msg}");
                    None
                }
                Err(e) => break 'outer Termination::ObjectiveFailed(e.to_string()),
            };
            if let Some(ft) = ft {
                if ft <= fx - opts.armijo_c * t * slope {
                    hp = hp0.with_log_vector(&trial);
                    x = trial;
                    fx = ft;
                    trace.push(TraceRow {
                        iteration: iterations,
                        objective: fx,
                        step,
                        hp: hp.clone(),
                    });
                    log::info!("iteration {iterations}: objective {fx:.6e}, step {step:.3e}");
                    if step < opts.min_step {
                        break 'outer Termination::StepSize;
                    }
                    continue 'outer;
                }
            }
            if step < opts.min_step {
                break 'outer Termination::StepSize;
            }
            t *= 0.5;
        }
        break Termination::StepSize;
    };
    if termination == Termination::StepSize {
        log::info!("step size {final_step:.3e} below {:.0e}; stopping", opts.min_step);
    }
    Ok(TuneReport {
        hp,
        objective: fx,
        trace,
        termination,
        final_step,
        iterations,
    })
}
