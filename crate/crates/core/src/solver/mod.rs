//! Damped nonlinear least squares (Levenberg-Marquardt) with dense or
//! block-structured Jacobians.
//!
//! Sign convention: residuals are `r = observed - predicted` style vectors as
//! returned by the problem, `J = dr/dx`, and a step solves
//! `(J^T J + lambda I) dx = -J^T r`.

mod grouped;
mod jacobian;

pub use grouped::{GroupLayout, GroupLinearization, GroupedLeastSquares, GroupedProblem};
pub use jacobian::{BlockJacobian, BlockNormal, Jacobian, NormalEquations, RowBlock};
pub(crate) use jacobian::solve_spd_multi;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("normal equations are singular")]
    RankDeficient,
    #[error("no convergence after {iterations} iterations (cost {cost})")]
    MaxIterations { iterations: usize, cost: f64 },
    #[error("non-finite residual")]
    NonFiniteResidual,
    #[error("invalid solver input: {0}")]
    InvalidInput(String),
    #[error("model evaluation failed: {0}")]
    Evaluation(String),
}

/// Robust loss applied to each scalar residual.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RobustKernel {
    #[default]
    None,
    /// `rho(r) = c^2/2 log(1 + r^2/c^2)`.
    Cauchy { scale: f64 },
}

impl RobustKernel {
    /// Loss of one residual, normalized so that it equals `r^2/2` without a kernel.
    pub fn rho(&self, r: f64) -> f64 {
        match *self {
            RobustKernel::None => 0.5 * r * r,
            RobustKernel::Cauchy { scale } => {
                let c2 = scale * scale;
                0.5 * c2 * (r * r / c2).ln_1p()
            }
        }
    }

    /// IRLS weight `rho'(r)/r`.
    pub fn weight(&self, r: f64) -> f64 {
        match *self {
            RobustKernel::None => 1.0,
            RobustKernel::Cauchy { scale } => 1.0 / (1.0 + r * r / (scale * scale)),
        }
    }
}

/// A nonlinear least-squares problem `min 1/2 sum rho(r_i(x))`.
pub trait LeastSquaresProblem {
    fn num_params(&self) -> usize;
    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>, SolverError>;
    /// Residuals and Jacobian at `x`.
    fn linearize(&self, x: &DVector<f64>) -> Result<(DVector<f64>, Jacobian), SolverError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Maximum number of trial steps (accepted or rejected).
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub cost_tolerance: f64,
    /// Stop when `|dx| < step_tolerance (|x| + step_tolerance)`.
    pub step_tolerance: f64,
    /// Bound on the scaled gradient (cosine between `r` and each column of `J`)
    /// required to report convergence.
    pub gradient_tolerance: f64,
    /// Residuals with RMS below this count as an exact fit, which also
    /// reports convergence.
    pub residual_tolerance: f64,
    /// `false` gives undamped Gauss-Newton.
    pub damping: bool,
    pub initial_lambda_factor: f64,
    pub kernel: RobustKernel,
    /// Block problems with more local blocks than this are solved by Schur
    /// elimination, smaller ones densely.
    pub schur_threshold: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            cost_tolerance: 1e-12,
            step_tolerance: 1e-12,
            gradient_tolerance: 1e-6,
            residual_tolerance: 1e-9,
            damping: true,
            initial_lambda_factor: 1e-3,
            kernel: RobustKernel::None,
            schur_threshold: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    CostTolerance,
    StepTolerance,
    ZeroResidual,
    Gradient,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub params: DVector<f64>,
    /// Unweighted residuals at `params`.
    pub residuals: DVector<f64>,
    /// Unweighted Jacobian at `params`.
    pub jacobian: Jacobian,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// `1/2 sum rho(r_i)` at `params`.
    pub cost: f64,
    /// `|J^T W r|_inf` at `params`.
    pub gradient_inf: f64,
    /// Largest cosine between the weighted residual and a Jacobian column.
    pub scaled_gradient: f64,
}

fn check_finite(r: &DVector<f64>) -> Result<(), SolverError> {
    if r.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SolverError::NonFiniteResidual)
    }
}

fn total_cost(kernel: &RobustKernel, r: &DVector<f64>) -> f64 {
    r.iter().map(|&v| kernel.rho(v)).sum()
}

struct Linearization {
    r: DVector<f64>,
    jac: Jacobian,
    normal: NormalEquations,
    gradient_inf: f64,
    scaled_gradient: f64,
}

fn linearize<P: LeastSquaresProblem + ?Sized>(problem: &P, x: &DVector<f64>, kernel: &RobustKernel) -> Result<Linearization, SolverError> {
    let (r, jac) = problem.linearize(x)?;
    check_finite(&r)?;
    if jac.nrows() != r.len() || jac.ncols() != x.len() {
        return Err(SolverError::InvalidInput(format!(
            "jacobian is {}x{}, expected {}x{}",
            jac.nrows(),
            jac.ncols(),
            r.len(),
            x.len()
        )));
    }
    let normal = match kernel {
        RobustKernel::None => jac.normal_equations(&r),
        k => {
            let sw = DVector::from_iterator(r.len(), r.iter().map(|&v| k.weight(v).sqrt()));
            let rw = r.component_mul(&sw);
            let mut jw = jac.clone();
            jw.scale_rows(&sw);
            jw.normal_equations(&rw)
        }
    };
    let g = normal.rhs();
    let gradient_inf = g.amax();
    let weighted_r_norm = match kernel {
        RobustKernel::None => r.norm(),
        k => r.iter().map(|&v| k.weight(v) * v * v).sum::<f64>().sqrt(),
    };
    let col = jac.column_norms_sq();
    let scaled_gradient = g
        .iter()
        .zip(col.iter())
        .map(|(gi, ci)| if *ci > 0.0 && weighted_r_norm > 0.0 { gi.abs() / (ci.sqrt() * weighted_r_norm) } else { 0.0 })
        .fold(0.0, f64::max);
    Ok(Linearization { r, jac, normal, gradient_inf, scaled_gradient })
}

/// Minimizes the problem's cost starting from `x0`.
pub fn solve<P: LeastSquaresProblem + ?Sized>(problem: &P, x0: &DVector<f64>, opts: &SolverOptions) -> Result<SolveReport, SolverError> {
    if x0.len() != problem.num_params() {
        return Err(SolverError::InvalidInput(format!("expected {} parameters, got {}", problem.num_params(), x0.len())));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::InvalidInput("non-finite initial parameters".into()));
    }
    let kernel = opts.kernel;
    let mut x = x0.clone();
    let mut lin = linearize(problem, &x, &kernel)?;
    let mut cost = total_cost(&kernel, &lin.r);
    let mut lambda = if opts.damping { opts.initial_lambda_factor * lin.normal.diagonal_mean() } else { 0.0 };
    let mut iterations = 0;

    let finish = |x: DVector<f64>, lin: Linearization, cost: f64, iterations: usize, termination: Termination| {
        let rms = if lin.r.is_empty() { 0.0 } else { lin.r.norm() / (lin.r.len() as f64).sqrt() };
        let converged = termination == Termination::ZeroResidual || lin.scaled_gradient <= opts.gradient_tolerance || rms <= opts.residual_tolerance;
        SolveReport {
            params: x,
            residuals: lin.r,
            jacobian: lin.jac,
            iterations,
            converged,
            termination,
            cost,
            gradient_inf: lin.gradient_inf,
            scaled_gradient: lin.scaled_gradient,
        }
    };

    if cost == 0.0 {
        return Ok(finish(x, lin, cost, 0, Termination::ZeroResidual));
    }
    if lin.scaled_gradient == 0.0 {
        return Ok(finish(x, lin, cost, 0, Termination::Gradient));
    }

    while iterations < opts.max_iterations {
        iterations += 1;
        let step = match lin.normal.solve(lambda, opts.schur_threshold) {
            Ok(s) => -s,
            Err(SolverError::RankDeficient) if opts.damping => {
                lambda = (lambda * 10.0).max(1e-12);
                continue;
            }
            Err(e) => return Err(e),
        };
        let step_small = step.norm() < opts.step_tolerance * (x.norm() + opts.step_tolerance);
        let trial = &x + &step;
        let trial_cost = match problem.residuals(&trial) {
            Ok(r) if r.iter().all(|v| v.is_finite()) => Some(total_cost(&kernel, &r)),
            Ok(_) | Err(_) if opts.damping => None,
            Ok(_) => return Err(SolverError::NonFiniteResidual),
            Err(e) => return Err(e),
        };
        match trial_cost {
            Some(tc) if tc < cost || !opts.damping => {
                let decrease = cost - tc;
                x = trial;
                lin = linearize(problem, &x, &kernel)?;
                let prev = cost;
                cost = tc;
                lambda /= 10.0;
                if cost == 0.0 {
                    return Ok(finish(x, lin, cost, iterations, Termination::ZeroResidual));
                }
                if decrease.abs() < opts.cost_tolerance * prev {
                    return Ok(finish(x, lin, cost, iterations, Termination::CostTolerance));
                }
                if step_small {
                    return Ok(finish(x, lin, cost, iterations, Termination::StepTolerance));
                }
                if lin.scaled_gradient < 1e-3 * opts.gradient_tolerance {
                    return Ok(finish(x, lin, cost, iterations, Termination::Gradient));
                }
            }
            _ => {
                if step_small {
                    return Ok(finish(x, lin, cost, iterations, Termination::StepTolerance));
                }
                lambda = (lambda * 10.0).max(1e-300);
            }
        }
    }
    Err(SolverError::MaxIterations { iterations, cost })
}

/// Undamped step `dx = -(J^T J)^-1 J^T r`, so that `x + dx` minimizes the
/// linearized cost.
pub fn gauss_newton_step(jacobian: &Jacobian, r: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
    if jacobian.nrows() != r.len() {
        return Err(SolverError::InvalidInput("jacobian rows do not match residual length".into()));
    }
    let ne = jacobian.normal_equations(r);
    Ok(-ne.solve(0.0, 50)?)
}

/// Dense problem defined by closures, handy for small problems and tests.
pub struct FnProblem<R, J> {
    pub n: usize,
    pub residual_fn: R,
    pub jacobian_fn: J,
}

impl<R, J> LeastSquaresProblem for FnProblem<R, J>
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> nalgebra::DMatrix<f64>,
{
    fn num_params(&self) -> usize {
        self.n
    }
    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
        Ok((self.residual_fn)(x))
    }
    fn linearize(&self, x: &DVector<f64>) -> Result<(DVector<f64>, Jacobian), SolverError> {
        Ok(((self.residual_fn)(x), Jacobian::Dense((self.jacobian_fn)(x))))
    }
}
