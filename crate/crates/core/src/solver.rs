//! Ball-constrained proximal iteration for the empirical and population
//! variational-inequality problems.
//!
//! Each step exactly minimizes
//! `(theta - theta_m)' (G + ridge I) (theta - theta_m) - 2 gamma c_m' (theta - theta_m)`
//! over the coefficient ball, where `G` is the (empirical or quadrature)
//! energy Gram matrix and `c_m` collects the bilinear form against each basis
//! function at the current iterate.

use crate::fnclass::{BasisSpec, ValueModel};
use crate::forms::{self, FormContext, Measure};
use crate::rewards::RewardSpec;
use crate::{dataset::ObservationDataset, diffusion::DiffusionSpec, Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Step size; `None` selects the data-driven default
    /// `0.5 min(alpha, lambda_min, 1) / L_hat` with `L_hat` a power-iteration
    /// estimate of the Gram-preconditioned bilinear operator norm.
    pub gamma: Option<f64>,
    pub max_iters: usize,
    pub ball_radius: f64,
    /// Ridge added to the Gram for conditioning; `None` selects
    /// `1e-8 trace(G) / p`.
    pub ridge: Option<f64>,
    /// Stop when the relative step G-norm falls below this.
    pub stop_tol: f64,
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gamma: None,
            max_iters: 500,
            ball_radius: 10.0,
            ridge: None,
            stop_tol: 1e-8,
            record_trace: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// `||theta_{m+1} - theta_m||_G`.
    pub step_norm: f64,
    /// Proximal objective value at the accepted step.
    pub objective: f64,
    pub theta_norm: f64,
    pub constraint_active: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations_run: usize,
    pub converged: bool,
    pub gamma: f64,
    pub ridge: f64,
    pub trace: Vec<IterationRecord>,
    /// Final residual scale `||c||` relative to the form magnitudes.
    pub final_residual: f64,
    pub config: SolverConfig,
    /// Excluded from serialized reports so identical runs produce identical
    /// bytes.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl FitReport {
    /// CSV trace with fixed columns: iter, step_norm, objective, theta_norm,
    /// constraint_active.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,step_norm,objective,theta_norm,constraint_active\n");
        for rec in &self.trace {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                rec.iter,
                crate::dataset::fmt_f64(rec.step_norm),
                crate::dataset::fmt_f64(rec.objective),
                crate::dataset::fmt_f64(rec.theta_norm),
                rec.constraint_active as u8
            ));
        }
        out
    }
}

/// The quadratic data of one VI problem: metric `G`, and the affine map
/// `c(theta) = v + M theta` giving the bilinear form against each feature.
pub struct ViProblem {
    pub gram: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub affine: DMatrix<f64>,
    /// `min(alpha, lambda_min, 1)`, the coercivity constant of the form.
    pub coercivity: f64,
}

impl ViProblem {
    pub fn from_context(ctx: &FormContext, diff: &DiffusionSpec) -> Self {
        let (lambda_min, _) = diff.lambda_bounds();
        Self {
            gram: ctx.gram.clone(),
            linear: ctx.linear.clone(),
            affine: ctx.affine.clone(),
            coercivity: ctx.alpha.min(lambda_min).min(1.0),
        }
    }

    fn c_at(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.linear + &self.affine * theta
    }
}

fn default_ridge(gram: &DMatrix<f64>) -> f64 {
    1e-8 * gram.trace() / gram.nrows() as f64
}

fn factorize(gram: &DMatrix<f64>, ridge: f64) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let p = gram.nrows();
    let mut shifted = gram.clone();
    for i in 0..p {
        shifted[(i, i)] += ridge;
    }
    Cholesky::new(shifted).ok_or(Error::GramFactorization { ridge })
}

/// Operator-norm estimate of `L^{-1} M L^{-T}` (Gram-preconditioned bilinear
/// operator) by power iteration on its normal operator, with a fixed start
/// vector for determinism.
fn preconditioned_norm(chol: &Cholesky<f64, nalgebra::Dyn>, affine: &DMatrix<f64>) -> f64 {
    let p = affine.nrows();
    let l = chol.l();
    let lt = l.transpose();
    // K x = L^{-1} M L^{-T} x; K^T x = L^{-1} M^T L^{-T} x.
    let apply = |m: &DMatrix<f64>, x: &DVector<f64>| -> DVector<f64> {
        let y = lt
            .solve_upper_triangular(x)
            .expect("Cholesky factor is nonsingular");
        let mut z = m * y;
        l.solve_lower_triangular_mut(&mut z);
        z
    };
    let m_t = affine.transpose();
    let mut v = DVector::from_element(p, 1.0 / (p as f64).sqrt());
    let mut norm = 0.0;
    for _ in 0..100 {
        let w = apply(&m_t, &apply(affine, &v));
        let n = w.norm();
        if n == 0.0 {
            return 0.0;
        }
        v = w / n;
        norm = n.sqrt();
    }
    norm
}

/// Default step size `0.5 min(alpha, lambda_min, 1) / L_hat`.
pub fn default_gamma(problem: &ViProblem, ridge: f64) -> Result<f64> {
    let chol = factorize(&problem.gram, ridge)?;
    let l_hat = preconditioned_norm(&chol, &problem.affine).max(1e-12);
    Ok(0.5 * problem.coercivity / l_hat)
}

/// One exact proximal step from `theta_m`.
pub fn prox_step(
    problem: &ViProblem,
    theta_m: &DVector<f64>,
    gamma: f64,
    ridge: f64,
    ball_radius: f64,
) -> Result<DVector<f64>> {
    let c = problem.c_at(theta_m);
    prox_step_with(problem, theta_m, &c, gamma, ridge, ball_radius)
}

fn prox_step_with(
    problem: &ViProblem,
    theta_m: &DVector<f64>,
    c: &DVector<f64>,
    gamma: f64,
    ridge: f64,
    ball_radius: f64,
) -> Result<DVector<f64>> {
    if gamma == 0.0 {
        return Ok(theta_m.clone());
    }
    let chol = factorize(&problem.gram, ridge)?;
    let unconstrained = theta_m + chol.solve(&(c * gamma));
    if unconstrained.norm() <= ball_radius {
        return Ok(unconstrained);
    }
    // KKT system: (G + ridge I + mu I) theta = (G + ridge I) theta_m + gamma c
    // with mu > 0 chosen so ||theta|| = ball_radius; ||theta(mu)|| is strictly
    // decreasing in mu, so bisect after bracketing by doubling.
    let p = problem.gram.nrows();
    let mut rhs = &problem.gram * theta_m + c * gamma;
    for i in 0..p {
        rhs[i] += ridge * theta_m[i];
    }
    let theta_at = |mu: f64| -> Result<DVector<f64>> {
        let mut shifted = problem.gram.clone();
        for i in 0..p {
            shifted[(i, i)] += ridge + mu;
        }
        let ch = Cholesky::new(shifted).ok_or(Error::GramFactorization { ridge })?;
        Ok(ch.solve(&rhs))
    };
    let mut lo = 0.0;
    let mut hi = problem.gram.trace().max(1.0);
    while theta_at(hi)?.norm() > ball_radius {
        lo = hi;
        hi *= 2.0;
        if hi > 1e18 {
            return Err(Error::GramFactorization { ridge });
        }
    }
    let mut theta = theta_at(hi)?;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        theta = theta_at(mid)?;
        let norm = theta.norm();
        if norm > ball_radius {
            lo = mid;
        } else {
            hi = mid;
        }
        if (norm - ball_radius).abs() <= 1e-10 * ball_radius {
            break;
        }
    }
    Ok(theta)
}

struct IterationOutcome {
    theta: DVector<f64>,
    report: FitReport,
}

fn iterate(problem: &ViProblem, cfg: &SolverConfig) -> Result<IterationOutcome> {
    let start = std::time::Instant::now();
    let ridge = cfg.ridge.unwrap_or_else(|| default_ridge(&problem.gram));
    let gamma = match cfg.gamma {
        Some(g) => {
            if !(g > 0.0) {
                return Err(Error::InvalidParameter("gamma must be positive".into()));
            }
            g
        }
        None => default_gamma(problem, ridge)?,
    };
    let p = problem.gram.nrows();
    let mut theta = DVector::zeros(p);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations_run = 0;
    for m in 0..cfg.max_iters {
        let c = problem.c_at(&theta);
        let next = prox_step_with(problem, &theta, &c, gamma, ridge, cfg.ball_radius)?;
        let step = &next - &theta;
        let step_norm = step.dot(&(&problem.gram * &step)).max(0.0).sqrt();
        let theta_norm = next.norm();
        // Proximal objective at the accepted point.
        let mut gq = &problem.gram * &step;
        for i in 0..p {
            gq[i] += ridge * step[i];
        }
        let objective = step.dot(&gq) - 2.0 * gamma * c.dot(&step);
        let active = theta_norm >= cfg.ball_radius * (1.0 - 1e-9);
        if cfg.record_trace {
            trace.push(IterationRecord {
                iter: m,
                step_norm,
                objective,
                theta_norm,
                constraint_active: active,
            });
        }
        let scale = theta_norm.max(1.0);
        theta = next;
        iterations_run = m + 1;
        if step_norm <= cfg.stop_tol * scale {
            converged = true;
            break;
        }
    }
    let final_residual = problem.c_at(&theta).norm();
    Ok(IterationOutcome {
        theta,
        report: FitReport {
            iterations_run,
            converged,
            gamma,
            ridge,
            trace,
            final_residual,
            config: cfg.clone(),
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    })
}

/// Fits the empirical VI problem on a dataset (Algorithm: assemble once,
/// proximal-iterate from zero).
pub fn fit(
    dataset: &ObservationDataset,
    basis: &BasisSpec,
    diff: &DiffusionSpec,
    alpha: f64,
    cfg: &SolverConfig,
) -> Result<(ValueModel, FitReport)> {
    let ctx = forms::assemble(dataset, basis, diff, alpha)?;
    fit_assembled(&ctx, diff, cfg)
}

/// Fits from a pre-assembled context.
pub fn fit_assembled(
    ctx: &FormContext,
    diff: &DiffusionSpec,
    cfg: &SolverConfig,
) -> Result<(ValueModel, FitReport)> {
    let problem = ViProblem::from_context(ctx, diff);
    let out = iterate(&problem, cfg)?;
    let model = ValueModel::new(
        ctx.basis.clone(),
        out.theta.as_slice().to_vec(),
        cfg.ball_radius,
    )?;
    Ok((model, out.report))
}

/// Population-level iteration against a known reference solution, using
/// quadrature forms. Returns the final model and the trace of distances
/// `||f^(m) - f_bar||_{S,T}` to the converged iterate.
pub fn fit_population(
    diff: &DiffusionSpec,
    reward: &RewardSpec,
    alpha: f64,
    fstar: &ValueModel,
    basis: &BasisSpec,
    cfg: &SolverConfig,
    measure: &Measure,
) -> Result<(ValueModel, FitReport, Vec<f64>)> {
    let pop = forms::assemble_population(basis, diff, reward, alpha, measure)?;
    let v = forms::population_linear(fstar, basis, diff, reward, alpha, measure)?;
    let (lambda_min, _) = diff.lambda_bounds();
    let problem = ViProblem {
        gram: pop.energy.clone(),
        linear: v,
        affine: -&pop.bilinear,
        coercivity: alpha.min(lambda_min).min(1.0),
    };
    // Re-run the iteration capturing iterates to measure distances.
    let ridge = cfg.ridge.unwrap_or_else(|| default_ridge(&problem.gram));
    let gamma = match cfg.gamma {
        Some(g) => g,
        None => default_gamma(&problem, ridge)?,
    };
    let p = problem.gram.nrows();
    let mut theta = DVector::zeros(p);
    let mut iterates = vec![theta.clone()];
    for _ in 0..cfg.max_iters {
        let next = prox_step(&problem, &theta, gamma, ridge, cfg.ball_radius)?;
        let step = &next - &theta;
        let step_norm = step.dot(&(&problem.gram * &step)).max(0.0).sqrt();
        theta = next;
        iterates.push(theta.clone());
        if step_norm <= cfg.stop_tol * theta.norm().max(1.0) {
            break;
        }
    }
    let final_theta = iterates.last().unwrap().clone();
    let distances: Vec<f64> = iterates
        .iter()
        .map(|th| {
            let d = th - &final_theta;
            d.dot(&(&problem.gram * &d)).max(0.0).sqrt()
        })
        .collect();
    let report = FitReport {
        iterations_run: iterates.len() - 1,
        converged: iterates.len() - 1 < cfg.max_iters,
        gamma,
        ridge,
        trace: Vec::new(),
        final_residual: problem.c_at(&final_theta).norm(),
        config: cfg.clone(),
        wall_time_secs: 0.0,
    };
    let model = ValueModel::new(basis.clone(), final_theta.as_slice().to_vec(), cfg.ball_radius)?;
    Ok((model, report, distances))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn identity_problem(p: usize, linear: DVector<f64>) -> ViProblem {
        ViProblem {
            gram: DMatrix::identity(p, p),
            linear,
            affine: DMatrix::zeros(p, p),
            coercivity: 1.0,
        }
    }

    #[test]
    fn zero_gamma_is_identity() {
        let prob = identity_problem(2, dvector![1.0, -2.0]);
        let theta = dvector![0.3, 0.4];
        let out = prox_step(&prob, &theta, 0.0, 0.0, 1.0).unwrap();
        assert_eq!(out, theta);
    }

    #[test]
    fn interior_step_is_gradient_step() {
        // G = I, ridge = 0: theta + gamma c.
        let prob = identity_problem(2, dvector![0.1, 0.2]);
        let theta = dvector![0.0, 0.0];
        let out = prox_step(&prob, &theta, 0.5, 0.0, 10.0).unwrap();
        assert_relative_eq!(out[0], 0.05, epsilon = 1e-12);
        assert_relative_eq!(out[1], 0.10, epsilon = 1e-12);
    }

    #[test]
    fn boundary_step_projects() {
        // G = I, theta_m = 0, gamma c = (3,4), rho = 1 -> (0.6, 0.8), mu = 4.
        let prob = identity_problem(2, dvector![3.0, 4.0]);
        let theta = dvector![0.0, 0.0];
        let out = prox_step(&prob, &theta, 1.0, 0.0, 1.0).unwrap();
        assert_relative_eq!(out[0], 0.6, epsilon = 1e-8);
        assert_relative_eq!(out[1], 0.8, epsilon = 1e-8);
    }

    #[test]
    fn boundary_step_with_anisotropic_gram() {
        // Validate the KKT solution against a fine mu scan.
        let prob = ViProblem {
            gram: dmatrix![2.0, 0.3; 0.3, 0.5],
            linear: dvector![1.0, -2.0],
            affine: DMatrix::zeros(2, 2),
            coercivity: 1.0,
        };
        let theta = dvector![0.2, -0.1];
        let rho = 0.4;
        let out = prox_step(&prob, &theta, 1.0, 0.0, rho).unwrap();
        assert_relative_eq!(out.norm(), rho, epsilon = 1e-8);
        // The KKT point minimizes the prox objective on the ball: compare
        // against a dense scan of feasible directions.
        let obj = |th: &DVector<f64>| {
            let d = th - &theta;
            d.dot(&(&prob.gram * &d)) - 2.0 * prob.linear.dot(&d)
        };
        let best = obj(&out);
        for k in 0..2000 {
            let ang = k as f64 * std::f64::consts::TAU / 2000.0;
            let cand = dvector![rho * ang.cos(), rho * ang.sin()];
            assert!(obj(&cand) >= best - 1e-9);
        }
    }

    #[test]
    fn max_iters_zero_returns_initializer() {
        let prob = identity_problem(3, dvector![1.0, 1.0, 1.0]);
        let cfg = SolverConfig {
            max_iters: 0,
            gamma: Some(0.1),
            ridge: Some(0.0),
            ..SolverConfig::default()
        };
        let out = iterate(&prob, &cfg).unwrap();
        assert_eq!(out.theta, DVector::zeros(3));
        assert_eq!(out.report.iterations_run, 0);
    }

    #[test]
    fn interior_fixed_point_is_stable() {
        // c(theta) = v + M theta with v = -M theta_star makes theta_star a
        // fixed point; starting there must not move.
        let m = dmatrix![-1.0, 0.2; -0.2, -0.8];
        let theta_star = dvector![0.3, -0.2];
        let prob = ViProblem {
            gram: DMatrix::identity(2, 2),
            linear: -(&m * &theta_star),
            affine: m,
            coercivity: 1.0,
        };
        let out = prox_step(&prob, &theta_star, 0.3, 0.0, 5.0).unwrap();
        assert_relative_eq!((out - theta_star).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn iteration_converges_on_coercive_toy() {
        // M = -G on a PD Gram: iteration solves G theta = v.
        let g = dmatrix![1.5, 0.2; 0.2, 0.9];
        let v = dvector![0.3, -0.4];
        let prob = ViProblem {
            gram: g.clone(),
            linear: v.clone(),
            affine: -g.clone(),
            coercivity: 1.0,
        };
        let cfg = SolverConfig {
            max_iters: 2000,
            stop_tol: 1e-12,
            ball_radius: 10.0,
            ridge: Some(0.0),
            ..SolverConfig::default()
        };
        let out = iterate(&prob, &cfg).unwrap();
        let expect = g.lu().solve(&v).unwrap();
        assert!(out.report.converged);
        assert!((out.theta - expect).norm() < 1e-8);
    }

    #[test]
    fn ball_feasibility_along_the_run() {
        let m = dmatrix![-0.5, 2.0; -2.0, -0.5];
        let prob = ViProblem {
            gram: DMatrix::identity(2, 2),
            linear: dvector![5.0, 5.0],
            affine: m,
            coercivity: 0.5,
        };
        let cfg = SolverConfig {
            max_iters: 100,
            ball_radius: 1.0,
            ridge: Some(0.0),
            gamma: Some(0.2),
            record_trace: true,
            stop_tol: 0.0,
        };
        let out = iterate(&prob, &cfg).unwrap();
        for rec in &out.report.trace {
            assert!(rec.theta_norm <= 1.0 + 1e-9, "iter {}: {}", rec.iter, rec.theta_norm);
        }
        assert!(out.report.trace.iter().any(|r| r.constraint_active));
    }

    #[test]
    fn deterministic_traces() {
        let m = dmatrix![-1.0, 0.4; -0.4, -0.7];
        let prob = ViProblem {
            gram: dmatrix![1.0, 0.1; 0.1, 0.8],
            linear: dvector![0.7, 0.1],
            affine: m,
            coercivity: 1.0,
        };
        let cfg = SolverConfig::default();
        let a = iterate(&prob, &cfg).unwrap();
        let b = iterate(&prob, &cfg).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
    }
}
