//! The acceptance battery: ten independent property checks spanning the
//! oracle, the forms, the solver, and the policy layer, plus a byte-level
//! determinism check of the artifact pipeline.

use crate::commands::{cmd_evaluate, cmd_fit, cmd_generate, dataset_path, model_path};
use crate::config::ExperimentConfig;
use anyhow::{Context, Result};
use hjbfit::diffusion::{simulate_paths, DiffusionMatrix, Drift, InitLaw};
use hjbfit::fnclass::ValueModel;
use hjbfit::forms::{self, Measure};
use hjbfit::oracle::{fk_value, manufactured_instance, OracleConfig, OuInstance};
use hjbfit::policy::{estimate_objective, kl_path_estimate, PolicyHandle, PolicySource};
use hjbfit::rng::{self, tag};
use hjbfit::solver::{self, SolverConfig};
use hjbfit::{dataset, BasisSpec, DiffusionSpec, FormContext, SpatialFeature};
use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::path::Path;
use std::sync::Arc;

#[derive(Clone, Debug, Serialize)]
pub struct CriterionResult {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl CriterionResult {
    fn new(id: usize, name: &'static str, pass: bool, detail: String) -> Self {
        Self {
            id,
            name,
            pass,
            detail,
        }
    }
}

/// The scalar OU benchmark instance shared by several criteria.
fn ou_bench() -> OuInstance {
    OuInstance::new(1.0, 2.0, 0.5, 1.0, 1.0).expect("valid OU benchmark")
}

/// Tensor basis used on the OU benchmark: cubic Legendre in time times
/// a constant plus 8 Gaussian bumps on [-2, 2].
fn ou_basis(horizon: f64) -> BasisSpec {
    let n_rbf = 8;
    let mut spatial = vec![SpatialFeature::Monomial { powers: vec![0] }];
    for j in 0..n_rbf {
        spatial.push(SpatialFeature::Rbf {
            center: vec![-2.0 + 4.0 * j as f64 / (n_rbf - 1) as f64],
            width: 0.9,
        });
    }
    BasisSpec::new(3, spatial, 1, horizon).expect("valid basis")
}

/// Random coefficient vector with independent standard normal entries.
fn random_theta(p: usize, seed: u64, index: u64) -> DVector<f64> {
    let mut r = rng::stream(seed, tag::PROBE, index);
    DVector::from_fn(p, |_, _| r.sample(StandardNormal))
}

/// 1. Feynman-Kac agreement with the OU closed form at five probe points.
fn criterion_oracle_agreement() -> Result<CriterionResult> {
    let inst = ou_bench();
    let diff = inst.diffusion_spec();
    let reward = inst.reward_spec();
    let cfg = OracleConfig::new(200_000, 1e-3, 1001);
    let probes = [
        (0.0, 0.0),
        (0.2, 0.8),
        (0.45, -1.2),
        (0.7, 0.4),
        (0.95, -0.3),
    ];
    let mut worst = 0.0f64;
    for &(t, x) in &probes {
        let (fk, _) = fk_value(&diff, &reward, inst.alpha, t, &[x], &cfg)?;
        let rel = (fk / inst.value(t, x) - 1.0).abs();
        worst = worst.max(rel);
    }
    Ok(CriterionResult::new(
        1,
        "oracle agreement with OU closed form",
        worst <= 0.02,
        format!("max |FK/exact - 1| = {worst:.4} over {} probes (tol 0.02)", probes.len()),
    ))
}

/// 2. Population bilinear positivity over 100 random in-class models.
fn criterion_bilinear_positivity() -> Result<CriterionResult> {
    let inst = ou_bench();
    let diff = inst.diffusion_spec();
    let reward = inst.reward_spec();
    let basis = ou_basis(inst.horizon);
    let measure = Measure::ou_gauss_hermite(&diff, 48, 24)?;
    let pop = forms::assemble_population(&basis, &diff, &reward, inst.alpha, &measure)?;
    let (lambda_min, _) = diff.lambda_bounds();
    let mu = inst.alpha.min(lambda_min).min(1.0);
    let p = basis.len();
    let mut worst = f64::INFINITY;
    let mut violations = 0usize;
    for i in 0..100 {
        let theta = random_theta(p, 1002, i);
        let b = theta.dot(&(&pop.bilinear * &theta));
        let e = theta.dot(&(&pop.energy * &theta));
        let ratio = b / (mu * e);
        worst = worst.min(ratio);
        if ratio < 0.45 {
            violations += 1;
        }
    }
    Ok(CriterionResult::new(
        2,
        "parabolic bilinear form positivity",
        violations == 0,
        format!("min B[f,f]/(mu ||f||^2) = {worst:.4} over 100 random models (floor 0.45)"),
    ))
}

/// Fit the manufactured benchmark at sample size `n`; returns the relative
/// empirical Sobolev error and the assembled context plus fitted model.
fn manufactured_fit(n: usize, seed: u64) -> Result<(f64, FormCtxFit)> {
    let inst = manufactured_instance()?;
    let ds = dataset::generate_dataset(&inst.diff, &inst.reward, n, 20, 1e-3, seed)?;
    let ctx = forms::assemble(&ds, &inst.basis, &inst.diff, inst.alpha)?;
    let cfg = SolverConfig::default();
    let (model, report) = solver::fit_assembled(&ctx, &inst.diff, &cfg)?;
    let delta = model.theta_vector() - inst.fstar.theta_vector();
    let err = (ctx.energy(&delta, &delta).max(0.0)
        / ctx
            .energy(&inst.fstar.theta_vector(), &inst.fstar.theta_vector())
            .max(1e-300))
    .sqrt();
    Ok((
        err,
        FormCtxFit {
            ctx,
            model,
            converged: report.converged,
        },
    ))
}

struct FormCtxFit {
    ctx: FormContext,
    model: ValueModel,
    converged: bool,
}

/// 3. Well-specified recovery and the sample-size error ratio.
fn criterion_recovery() -> Result<(CriterionResult, FormCtxFit)> {
    let (err_small, fit_small) = manufactured_fit(2000, 1003)?;
    let (err_large, _) = manufactured_fit(8000, 1003)?;
    let ratio = err_small / err_large.max(1e-300);
    let pass =
        fit_small.converged && err_small <= 0.10 && (1.4..=3.0).contains(&ratio);
    Ok((
        CriterionResult::new(
            3,
            "well-specified recovery and n^{-1/2} ratio band",
            pass,
            format!(
                "err(n=2000) = {err_small:.3e} (tol 0.10), err(n=8000) = {err_large:.3e}, \
                 ratio = {ratio:.2} (band [1.4, 3.0])"
            ),
        ),
        fit_small,
    ))
}

/// 4. Linear contraction of the population iteration at the default step.
fn criterion_population_contraction() -> Result<CriterionResult> {
    let inst = manufactured_instance()?;
    let measure = Measure::ou_gauss_hermite(&inst.diff, 48, 24)?;
    let cfg = SolverConfig {
        max_iters: 60,
        ..SolverConfig::default()
    };
    let (_, report, distances) = solver::fit_population(
        &inst.diff,
        &inst.reward,
        inst.alpha,
        &inst.fstar,
        &inst.basis,
        &cfg,
        &measure,
    )?;
    let (lambda_min, _) = inst.diff.lambda_bounds();
    let mu = inst.alpha.min(lambda_min).min(1.0);
    let bound = 1.0 - report.gamma * mu / 4.0 + 0.05;
    let d0 = distances[0].max(1e-300);
    let mut worst = 0.0f64;
    for m in 2..distances.len() - 1 {
        // Once the iterate is at numerical convergence the ratio is noise.
        if distances[m] <= 1e-10 * d0 {
            break;
        }
        worst = worst.max(distances[m + 1] / distances[m]);
    }
    Ok(CriterionResult::new(
        4,
        "population iteration contracts linearly",
        worst <= bound && worst > 0.0,
        format!(
            "max per-iteration ratio = {worst:.4} (bound {bound:.4}, gamma = {:.3e}, \
             {} iterations)",
            report.gamma,
            distances.len() - 1
        ),
    ))
}

/// Fits the OU benchmark from simulated data; shared by criteria 5 and 6.
fn ou_fitted_model() -> Result<(OuInstance, DiffusionSpec, Arc<ValueModel>)> {
    let inst = ou_bench();
    let diff = inst.diffusion_spec();
    let reward = inst.reward_spec();
    let basis = ou_basis(inst.horizon);
    let ds = dataset::generate_dataset(&diff, &reward, 4000, 20, 1e-2, 1005)?;
    let cfg = SolverConfig::default();
    let (model, _) = solver::fit(&ds, &basis, &diff, inst.alpha, &cfg)?;
    Ok((inst, diff, Arc::new(model)))
}

/// 5. The plug-in policy recovers most of the attainable objective gap.
fn criterion_policy_quality(
    inst: &OuInstance,
    diff: &DiffusionSpec,
    model: &Arc<ValueModel>,
) -> Result<CriterionResult> {
    let reward = inst.reward_spec();
    let n_eval = 100_000;
    let dt = 1e-2;
    let seed = 1055;
    let zero = PolicyHandle::new(PolicySource::Zero, diff, inst.alpha);
    let fitted = PolicyHandle::new(PolicySource::Model(Arc::clone(model)), diff, inst.alpha);
    let star = PolicyHandle::new(PolicySource::ClosedFormOu(*inst), diff, inst.alpha);
    let j0 = estimate_objective(diff, &reward, inst.alpha, &zero, n_eval, dt, seed)?;
    let jf = estimate_objective(diff, &reward, inst.alpha, &fitted, n_eval, dt, seed)?;
    let js = estimate_objective(diff, &reward, inst.alpha, &star, n_eval, dt, seed)?;
    let gap_ok = jf.j_hat >= j0.j_hat + 0.5 * (js.j_hat - j0.j_hat);
    let close_ok =
        (jf.j_hat - js.j_hat).abs() <= 0.05 * js.j_hat.abs() + 2.0 * (jf.stderr + js.stderr);
    Ok(CriterionResult::new(
        5,
        "plug-in policy closes the objective gap",
        gap_ok && close_ok,
        format!(
            "J(zero) = {:.4}, J(fitted) = {:.4} +- {:.4}, J(closed form) = {:.4} +- {:.4}",
            j0.j_hat, jf.j_hat, jf.stderr, js.j_hat, js.stderr
        ),
    ))
}

/// 6. The quadratic and pathwise Girsanov KL estimators agree.
fn criterion_girsanov(
    inst: &OuInstance,
    diff: &DiffusionSpec,
    model: &Arc<ValueModel>,
) -> Result<CriterionResult> {
    let policies: Vec<(&str, PolicyHandle)> = vec![
        ("zero", PolicyHandle::new(PolicySource::Zero, diff, inst.alpha)),
        (
            "oracle",
            PolicyHandle::new(PolicySource::ClosedFormOu(*inst), diff, inst.alpha),
        ),
        (
            "fitted",
            PolicyHandle::new(PolicySource::Model(Arc::clone(model)), diff, inst.alpha),
        ),
    ];
    let mut detail = String::new();
    let mut pass = true;
    for (name, ph) in &policies {
        let kl = kl_path_estimate(diff, ph, 20_000, 1e-2, 1006)?;
        let gap = (kl.kl_quadratic - kl.kl_logratio).abs();
        let tol = 4.0 * (kl.stderr_quadratic + kl.stderr_logratio);
        let ok = if tol == 0.0 { gap == 0.0 } else { gap <= tol };
        pass &= ok;
        detail.push_str(&format!(
            "{name}: |quad - logratio| = {gap:.3e} (tol {tol:.3e}); "
        ));
    }
    Ok(CriterionResult::new(
        6,
        "Girsanov KL estimators agree",
        pass,
        detail,
    ))
}

/// 7. The policy of the rescaled problem matches the raw one.
fn criterion_rescaling_invariance() -> Result<CriterionResult> {
    let inst = ou_bench();
    let diff = Arc::new(inst.diffusion_spec());
    let mut raw = inst.reward_spec();
    raw.bound_b = 2.0;
    let (scaled, alpha_s) = raw.rescale_problem(inst.alpha)?;
    let cfg = OracleConfig::new(40_000, 1e-2, 1007);
    let raw_ph = PolicyHandle::new(
        PolicySource::OracleFk {
            diff: Arc::clone(&diff),
            reward: Arc::new(raw),
            alpha: inst.alpha,
            cfg: cfg.clone(),
        },
        &diff,
        inst.alpha,
    );
    let scaled_ph = PolicyHandle::new(
        PolicySource::OracleFk {
            diff: Arc::clone(&diff),
            reward: Arc::new(scaled),
            alpha: alpha_s,
            cfg,
        },
        &diff,
        alpha_s,
    );
    let probes = [
        (0.0, 0.0),
        (0.1, 0.6),
        (0.2, -0.8),
        (0.3, 1.1),
        (0.4, -0.4),
        (0.5, 0.2),
        (0.6, -1.0),
        (0.7, 0.9),
        (0.8, -0.2),
        (0.9, 0.5),
    ];
    let mut worst = 0.0f64;
    for &(t, x) in &probes {
        let a = raw_ph.eval(t, &[x])?;
        let b = scaled_ph.eval(t, &[x])?;
        worst = worst.max((a[0] - b[0]).abs());
    }
    Ok(CriterionResult::new(
        7,
        "rescaled problem has the same policy",
        worst <= 0.05,
        format!("max |pi_raw - pi_rescaled| = {worst:.4} over 10 probes (tol 0.05)"),
    ))
}

/// 8. Time bandwidth: members of the class cannot oscillate faster in time
/// than the Legendre degree allows.
fn criterion_time_bandwidth() -> Result<CriterionResult> {
    // Stationary scalar OU cloud: theta = 1, sigma^2 = 2, X_0 ~ N(0, 1).
    let diff = DiffusionSpec::new(
        1,
        1.0,
        Drift::Ou {
            theta: 1.0,
            mu: DVector::zeros(1),
        },
        DiffusionMatrix::Scalar { value: 2.0 },
        InitLaw::Gaussian {
            mean: DVector::zeros(1),
            std: DVector::from_element(1, 1.0),
        },
    )?;
    let cloud = simulate_paths(&diff, 512, 1.0 / 64.0, 1008, None, false)?;
    let measure = Measure::Cloud(&cloud);
    let basis = ou_basis(1.0);
    let (time_gram, energy_gram) = forms::assemble_diagnostic_grams(&basis, &measure);
    let m = (basis.time_degree + 1) as f64;
    let bound = 1.2 * m.powf(1.5);
    let p = basis.len();
    let mut worst = 0.0f64;
    for i in 0..200 {
        let theta = random_theta(p, 1008, i);
        let num = theta.dot(&(&time_gram * &theta)).max(0.0);
        let den = theta.dot(&(&energy_gram * &theta)).max(1e-300);
        worst = worst.max((num / den).sqrt());
    }
    Ok(CriterionResult::new(
        8,
        "time-derivative norm is bandwidth-limited",
        worst <= bound,
        format!("max ||dt f|| / ||f|| = {worst:.3} over 200 random models (bound {bound:.3})"),
    ))
}

/// 9. Variational-inequality residual at the fitted solution.
fn criterion_vi_residual(fit: &FormCtxFit) -> Result<CriterionResult> {
    let ctx = &fit.ctx;
    let theta_hat = fit.model.theta_vector();
    let c = ctx.bilinear_vector(&theta_hat);
    let scale = ctx.residual_scale(&theta_hat).max(1e-300);
    let rho = fit.model.ball_radius;
    let p = theta_hat.len();
    let mut worst = f64::NEG_INFINITY;
    for i in 0..100 {
        let mut g = random_theta(p, 1009, i);
        let norm = g.norm();
        if norm > rho {
            g *= rho / norm;
        }
        // B_n(f_hat, g - f_hat) = (g - theta_hat) . c by bilinearity in g.
        worst = worst.max((&g - &theta_hat).dot(&c));
    }
    Ok(CriterionResult::new(
        9,
        "empirical VI residual vanishes at the fit",
        worst <= 1e-4 * scale,
        format!(
            "max B_n(f, g - f) = {worst:.3e} over 100 feasible g (tol {:.3e})",
            1e-4 * scale
        ),
    ))
}

/// 10. The artifact pipeline is byte-deterministic.
fn criterion_determinism(cfg: &ExperimentConfig, out: &Path) -> Result<CriterionResult> {
    let mut mismatched: Vec<&str> = Vec::new();
    let dirs = [out.join("determinism_run1"), out.join("determinism_run2")];
    for dir in &dirs {
        std::fs::create_dir_all(dir)?;
        cmd_generate(cfg, dir)?;
        cmd_fit(cfg, &dataset_path(dir), dir)?;
        cmd_evaluate(cfg, &model_path(dir), dir)?;
    }
    for name in [
        "dataset.jsonl",
        "model.json",
        "fit_report.json",
        "trace.csv",
        "evaluation.json",
    ] {
        let a = std::fs::read(dirs[0].join(name))
            .with_context(|| format!("reading run1 {name}"))?;
        let b = std::fs::read(dirs[1].join(name))
            .with_context(|| format!("reading run2 {name}"))?;
        if a != b {
            mismatched.push(name);
        }
    }
    Ok(CriterionResult::new(
        10,
        "artifact pipeline is byte-deterministic",
        mismatched.is_empty(),
        if mismatched.is_empty() {
            "dataset, model, and all reports byte-identical across two runs".into()
        } else {
            format!("files differ across runs: {mismatched:?}")
        },
    ))
}

/// Runs the full battery; results come back in criterion order.
pub fn run_suite(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<CriterionResult>> {
    std::fs::create_dir_all(out)?;
    let mut results = Vec::with_capacity(10);
    results.push(criterion_oracle_agreement()?);
    results.push(criterion_bilinear_positivity()?);
    let (rec, fit) = criterion_recovery()?;
    results.push(rec);
    results.push(criterion_population_contraction()?);
    let (inst, diff, model) = ou_fitted_model()?;
    results.push(criterion_policy_quality(&inst, &diff, &model)?);
    results.push(criterion_girsanov(&inst, &diff, &model)?);
    results.push(criterion_rescaling_invariance()?);
    results.push(criterion_time_bandwidth()?);
    results.push(criterion_vi_residual(&fit)?);
    results.push(criterion_determinism(cfg, out)?);
    Ok(results)
}
