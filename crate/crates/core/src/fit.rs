//! Levenberg–Marquardt least squares with analytic Jacobians, and the two
//! model shapes used by the analyses: a Lorentzian line on a floor and an
//! exponential decay to a floor.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Model evaluated at `x` for parameters `p`: value and `∂value/∂p`.
pub trait Model {
    fn n_params(&self) -> usize;
    fn eval(&self, x: f64, p: &[f64], grad: &mut [f64]) -> f64;
}

/// Outcome of a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: Vec<f64>,
    /// One-sigma standard errors.
    pub errors: Vec<f64>,
    /// Weighted sum of squared residuals.
    pub chi2: f64,
    pub reduced_chi2: f64,
    /// Scaled gradient at the solution.
    pub gradient: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the scaled gradient.
    pub gradient_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_iterations: 500, gradient_tol: 1e-8 }
    }
}

struct Linearized {
    chi2: f64,
    jtj: DMatrix<f64>,
    jtr: DVector<f64>,
}

fn linearize<M: Model>(model: &M, x: &[f64], y: &[f64], w: &[f64], p: &[f64]) -> Linearized {
    let n = model.n_params();
    let mut jtj = DMatrix::zeros(n, n);
    let mut jtr = DVector::zeros(n);
    let mut grad = vec![0.0; n];
    let mut chi2 = 0.0;
    for i in 0..x.len() {
        let r = y[i] - model.eval(x[i], p, &mut grad);
        chi2 += w[i] * r * r;
        for a in 0..n {
            jtr[a] += w[i] * grad[a] * r;
            for b in 0..=a {
                jtj[(a, b)] += w[i] * grad[a] * grad[b];
            }
        }
    }
    for a in 0..n {
        for b in 0..a {
            jtj[(b, a)] = jtj[(a, b)];
        }
    }
    Linearized { chi2, jtj, jtr }
}

/// Largest gradient component, scaled by parameter magnitude and χ².
fn scaled_gradient(lin: &Linearized, p: &[f64], scale: f64) -> f64 {
    let denom = lin.chi2.max(scale);
    (0..p.len()).map(|a| (lin.jtr[a] * p[a].abs().max(1e-300)).abs() / denom).fold(0.0, f64::max)
}

/// Minimizes `Σ w_i (y_i − f(x_i; p))²` from `p0`. Weights default to 1.
pub fn levenberg_marquardt<M: Model>(
    model: &M,
    x: &[f64],
    y: &[f64],
    sigma: Option<&[f64]>,
    p0: &[f64],
    opts: FitOptions,
) -> Result<FitResult> {
    let n = model.n_params();
    if x.len() != y.len() || p0.len() != n || sigma.is_some_and(|s| s.len() != x.len()) {
        return Err(Error::Config("fit inputs have mismatched lengths".into()));
    }
    if x.len() <= n {
        return Err(Error::Config(format!("fit needs more than {n} points, got {}", x.len())));
    }
    let w: Vec<f64> = match sigma {
        Some(s) => s.iter().map(|v| 1.0 / (v * v)).collect(),
        None => vec![1.0; x.len()],
    };
    // Floor for χ² when scaling the gradient: exact data reach χ² ≈ 0.
    let scale = 1e-30 * y.iter().zip(&w).map(|(v, wi)| wi * v * v).sum::<f64>().max(f64::MIN_POSITIVE);

    let mut p = p0.to_vec();
    let mut lin = linearize(model, x, y, &w, &p);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    loop {
        let g = scaled_gradient(&lin, &p, scale);
        if g <= opts.gradient_tol || lin.chi2 <= scale {
            return finish(model, x, y, &w, sigma.is_some(), p, lin, g, iterations);
        }
        if iterations >= opts.max_iterations {
            return Err(Error::FitDiverged(lin.chi2));
        }
        iterations += 1;
        let mut improved = false;
        while lambda < 1e16 {
            let mut a = lin.jtj.clone();
            for d in 0..n {
                a[(d, d)] += lambda * lin.jtj[(d, d)].max(1e-300);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&lin.jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let trial_lin = linearize(model, x, y, &w, &trial);
            if trial_lin.chi2.is_finite() && trial_lin.chi2 <= lin.chi2 {
                let stalled = trial.iter().zip(&p).all(|(a, b)| a == b);
                p = trial;
                lin = trial_lin;
                lambda = (lambda * 0.1).max(1e-12);
                improved = !stalled;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // No further descent is representable: accept if the gradient is
            // as small as the arithmetic allows, otherwise report.
            let g = scaled_gradient(&lin, &p, scale);
            if g <= opts.gradient_tol.sqrt() {
                return finish(model, x, y, &w, sigma.is_some(), p, lin, g, iterations);
            }
            return Err(Error::FitDiverged(lin.chi2));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish<M: Model>(
    model: &M,
    x: &[f64],
    _y: &[f64],
    _w: &[f64],
    weighted: bool,
    params: Vec<f64>,
    lin: Linearized,
    gradient: f64,
    iterations: usize,
) -> Result<FitResult> {
    let n = model.n_params();
    let dof = (x.len() - n) as f64;
    let reduced_chi2 = lin.chi2 / dof;
    let cov = lin.jtj.clone().try_inverse().ok_or(Error::Singular)?;
    let factor = if weighted { 1.0 } else { reduced_chi2 };
    let errors = (0..n).map(|a| (cov[(a, a)] * factor).max(0.0).sqrt()).collect();
    Ok(FitResult { params, errors, chi2: lin.chi2, reduced_chi2, gradient, iterations })
}

/// `peak / (1 + ((x − center)/hwhm)²) + floor`; parameters
/// `[center, hwhm, peak, floor]`.
pub struct Lorentzian;

impl Model for Lorentzian {
    fn n_params(&self) -> usize {
        4
    }

    fn eval(&self, x: f64, p: &[f64], g: &mut [f64]) -> f64 {
        let (c, w, a) = (p[0], p[1], p[2]);
        let u = (x - c) / w;
        let d = 1.0 / (1.0 + u * u);
        g[0] = a * d * d * 2.0 * u / w;
        g[1] = a * d * d * 2.0 * u * u / w;
        g[2] = d;
        g[3] = 1.0;
        a * d + p[3]
    }
}

/// `amplitude · e^{−rate·t} + floor`; parameters `[amplitude, rate, floor]`.
pub struct ExpDecay;

impl Model for ExpDecay {
    fn n_params(&self) -> usize {
        3
    }

    fn eval(&self, t: f64, p: &[f64], g: &mut [f64]) -> f64 {
        let e = (-p[1] * t).exp();
        g[0] = e;
        g[1] = -p[0] * t * e;
        g[2] = 1.0;
        p[0] * e + p[2]
    }
}
