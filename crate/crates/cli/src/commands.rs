//! Command implementations shared by the binary and the test suite.

use crate::config::{scaling_tag, ExperimentConfig, Problem, RewardConfig};
use anyhow::{Context, Result};
use hjbfit::dataset::{self, to_json_precise, ObservationDataset};
use hjbfit::diffusion::Drift;
use hjbfit::fnclass::ValueModel;
use hjbfit::forms::{self, Measure};
use hjbfit::oracle::{fk_gradient, fk_value, OuInstance};
use hjbfit::policy::{
    classifier_guidance_fit, estimate_objective, kl_path_estimate, mirror_descent_step,
    KlReport, ObjectiveReport, PolicyHandle, PolicySource,
};
use hjbfit::solver;
use hjbfit::DiffusionSpec;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Provenance stamped into every report file.
#[derive(Clone, Debug, Serialize)]
pub struct Envelope {
    pub config_digest: String,
    pub diffusion_digest: String,
    pub reward_digest: String,
    pub data_seed: u64,
    pub potential_scaling: &'static str,
}

impl Envelope {
    pub fn new(cfg: &ExperimentConfig, problem: &Problem) -> Self {
        Envelope {
            config_digest: cfg.digest(),
            diffusion_digest: problem.diff.digest(),
            reward_digest: problem.reward.digest(),
            data_seed: cfg.data.seed,
            potential_scaling: scaling_tag(cfg.oracle.potential_scaling),
        }
    }
}

pub fn write_report<T: Serialize>(path: &Path, report: &T) -> Result<()> {
    let text = to_json_precise(report).map_err(anyhow::Error::from)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn dataset_path(out: &Path) -> PathBuf {
    out.join("dataset.jsonl")
}

pub fn model_path(out: &Path) -> PathBuf {
    out.join("model.json")
}

/// `generate`: simulate and persist the observation dataset.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let problem = cfg.build_problem()?;
    std::fs::create_dir_all(out)?;
    let mut ds = dataset::generate_dataset(
        &problem.diff,
        &problem.reward,
        cfg.data.n,
        cfg.data.k,
        cfg.data.dt,
        cfg.data.seed,
    )?;
    ds.alpha = problem.alpha;
    let path = dataset_path(out);
    dataset::save_dataset(&ds, &path)?;
    Ok(path)
}

#[derive(Serialize)]
struct FitFileReport {
    envelope: Envelope,
    report: solver::FitReport,
    model_digest: String,
}

/// `fit`: assemble the empirical forms and run the proximal iteration.
pub fn cmd_fit(
    cfg: &ExperimentConfig,
    dataset_file: &Path,
    out: &Path,
) -> Result<(ValueModel, solver::FitReport)> {
    let problem = cfg.build_problem()?;
    let ds = dataset::load_dataset(dataset_file)?;
    ds.verify_provenance(&problem.diff, &problem.reward)?;
    let (model, report) = solver::fit(&ds, &problem.basis, &problem.diff, problem.alpha, &cfg.solver)?;
    std::fs::create_dir_all(out)?;
    model.save(&model_path(out))?;
    write_report(
        &out.join("fit_report.json"),
        &FitFileReport {
            envelope: Envelope::new(cfg, &problem),
            model_digest: model.digest(),
            report: report.clone(),
        },
    )?;
    std::fs::write(out.join("trace.csv"), report.trace_csv())?;
    Ok((model, report))
}

#[derive(Serialize)]
struct OracleRow {
    t: f64,
    x: Vec<f64>,
    f_star: f64,
    stderr: f64,
    grad: Vec<f64>,
    grad_stderr: Vec<f64>,
}

#[derive(Serialize)]
struct OracleTable {
    envelope: Envelope,
    rows: Vec<OracleRow>,
}

/// `oracle`: tabulate the Feynman-Kac oracle at the configured probe points.
pub fn cmd_oracle(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let problem = cfg.build_problem()?;
    let mut rows = Vec::new();
    for probe in &cfg.evaluation.probe_points {
        let (t, x) = (probe[0], &probe[1..]);
        let (f, se) = fk_value(&problem.diff, &problem.reward, problem.alpha, t, x, &cfg.oracle)?;
        let (g, gse) =
            fk_gradient(&problem.diff, &problem.reward, problem.alpha, t, x, &cfg.oracle)?;
        rows.push(OracleRow {
            t,
            x: x.to_vec(),
            f_star: f,
            stderr: se,
            grad: g.as_slice().to_vec(),
            grad_stderr: gse.as_slice().to_vec(),
        });
    }
    std::fs::create_dir_all(out)?;
    write_report(
        &out.join("oracle.json"),
        &OracleTable {
            envelope: Envelope::new(cfg, &problem),
            rows,
        },
    )
}

/// Reference solution available for a problem, used by `evaluate`.
pub enum Reference {
    Manufactured(Arc<ValueModel>),
    Ou(OuInstance),
    None,
}

pub fn reference_for(cfg: &ExperimentConfig, problem: &Problem) -> Reference {
    if let Some(inst) = &problem.manufactured {
        return Reference::Manufactured(Arc::clone(&inst.fstar));
    }
    // Scalar OU with r = -1 and linear terminal reward has a closed form.
    if let (
        Drift::Ou { theta, mu },
        hjbfit::diffusion::DiffusionMatrix::Scalar { value },
        RewardConfig::Simple {
            r_constant,
            y_slope,
            ..
        },
    ) = (
        &problem.diff.drift,
        &problem.diff.diffusion,
        &cfg.problem.reward,
    ) {
        if problem.diff.dim == 1
            && mu[0] == 0.0
            && (*r_constant - -1.0).abs() < 1e-14
            && !cfg.problem.rescale
        {
            if let Ok(inst) = OuInstance::new(
                *theta,
                *value,
                y_slope[0],
                problem.alpha,
                problem.diff.horizon,
            ) {
                return Reference::Ou(inst);
            }
        }
    }
    Reference::None
}

fn reference_model(reference: &Reference) -> Option<Arc<ValueModel>> {
    match reference {
        Reference::Manufactured(m) => Some(Arc::clone(m)),
        _ => None,
    }
}

#[derive(Serialize)]
pub struct EvaluationReport {
    pub envelope: Envelope,
    /// Relative Sobolev error of the fitted model vs the reference, when a
    /// reference exists (manufactured benchmark).
    pub sobolev_error_fitted: Option<f64>,
    pub sobolev_error_baseline: Option<f64>,
    pub j_zero: ObjectiveReport,
    pub j_fitted: ObjectiveReport,
    pub j_reference: Option<ObjectiveReport>,
    pub kl_fitted: KlReport,
    pub clamp_activations: u64,
}

/// `evaluate`: Sobolev errors vs the reference on a held-out cloud, objective
/// and KL estimates, and the classifier-guidance baseline comparison.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    model_file: &Path,
    out: &Path,
) -> Result<EvaluationReport> {
    let problem = cfg.build_problem()?;
    let model = Arc::new(ValueModel::load(model_file)?);
    let ev = &cfg.evaluation;
    let reference = reference_for(cfg, &problem);

    // Held-out cloud for quadrature (seed offset so it is disjoint from data).
    let cloud = hjbfit::diffusion::simulate_paths(
        &problem.diff,
        ev.cloud_paths,
        cfg.data.dt.max(5e-3),
        ev.seed ^ 0x9e37_79b9,
        None,
        false,
    )?;
    let measure = Measure::Cloud(&cloud);

    let ref_model = reference_model(&reference);
    let sobolev_error_fitted = ref_model
        .as_ref()
        .map(|f| forms::relative_energy_error(&model, f, &measure));

    // Classifier-guidance baseline on the same dataset, if present.
    let ds_file = dataset_path(out);
    let baseline: Option<Arc<ValueModel>> = if ds_file.exists() && cfg.data.k > 0 {
        let ds: ObservationDataset = dataset::load_dataset(&ds_file)?;
        Some(Arc::new(classifier_guidance_fit(
            &ds,
            &problem.basis,
            problem.alpha,
            1e-8,
        )?))
    } else {
        None
    };
    let sobolev_error_baseline = match (&baseline, &ref_model) {
        (Some(b), Some(f)) => Some(forms::relative_energy_error(b, f, &measure)),
        _ => None,
    };

    let zero = PolicyHandle::new(PolicySource::Zero, &problem.diff, problem.alpha);
    let fitted = PolicyHandle::new(
        PolicySource::Model(Arc::clone(&model)),
        &problem.diff,
        problem.alpha,
    );
    let j_zero = estimate_objective(
        &problem.diff,
        &problem.reward,
        problem.alpha,
        &zero,
        ev.n_eval,
        ev.dt,
        ev.seed,
    )?;
    let j_fitted = estimate_objective(
        &problem.diff,
        &problem.reward,
        problem.alpha,
        &fitted,
        ev.n_eval,
        ev.dt,
        ev.seed,
    )?;
    let j_reference = match &reference {
        Reference::Ou(inst) => {
            let ph = PolicyHandle::new(PolicySource::ClosedFormOu(*inst), &problem.diff, problem.alpha);
            Some(estimate_objective(
                &problem.diff,
                &problem.reward,
                problem.alpha,
                &ph,
                ev.n_eval,
                ev.dt,
                ev.seed,
            )?)
        }
        Reference::Manufactured(f) => {
            let ph = PolicyHandle::new(
                PolicySource::Model(Arc::clone(f)),
                &problem.diff,
                problem.alpha,
            );
            Some(estimate_objective(
                &problem.diff,
                &problem.reward,
                problem.alpha,
                &ph,
                ev.n_eval,
                ev.dt,
                ev.seed,
            )?)
        }
        Reference::None => None,
    };
    let kl_fitted = kl_path_estimate(
        &problem.diff,
        &fitted,
        ev.n_eval.min(20_000),
        ev.dt,
        ev.seed + 1,
    )?;
    let report = EvaluationReport {
        envelope: Envelope::new(cfg, &problem),
        sobolev_error_fitted,
        sobolev_error_baseline,
        clamp_activations: j_fitted.clamp_activations,
        j_zero,
        j_fitted,
        j_reference,
        kl_fitted,
    };
    std::fs::create_dir_all(out)?;
    write_report(&out.join("evaluation.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Serialize)]
pub struct MdStepReport {
    pub step: usize,
    pub alpha: f64,
    pub j_hat: f64,
    pub stderr: f64,
    pub fit_iterations: usize,
}

#[derive(Serialize)]
struct MdFileReport {
    envelope: Envelope,
    gamma: f64,
    steps: Vec<MdStepReport>,
}

/// `mirror-descent`: repeatedly fit, extract the policy, shift the drift and
/// raise the regularization, and re-generate data under the new dynamics.
pub fn cmd_mirror_descent(cfg: &ExperimentConfig, steps: usize, out: &Path) -> Result<Vec<MdStepReport>> {
    let problem = cfg.build_problem()?;
    let gamma_md = cfg
        .mirror_descent
        .as_ref()
        .map(|m| m.gamma)
        .context("config.mirror_descent.gamma is required for mirror-descent")?;
    let mut diff: DiffusionSpec = problem.diff.clone();
    let mut alpha = problem.alpha;
    let ev = &cfg.evaluation;
    let mut reports = Vec::new();
    for step in 0..steps {
        let ds = dataset::generate_dataset(
            &diff,
            &problem.reward,
            cfg.data.n,
            cfg.data.k,
            cfg.data.dt,
            cfg.data.seed + step as u64,
        )?;
        let (model, fit_report) = solver::fit(&ds, &problem.basis, &diff, alpha, &cfg.solver)?;
        let policy = Arc::new(PolicyHandle::new(
            PolicySource::Model(Arc::new(model)),
            &diff,
            alpha,
        ));
        // Per-step objective of the incremental subproblem: rewards under
        // the current (shifted) dynamics, control cost of the newly fitted
        // policy at the stepped regularization strength.
        let j = estimate_objective(
            &diff,
            &problem.reward,
            alpha,
            policy.as_ref(),
            ev.n_eval,
            ev.dt,
            ev.seed + step as u64,
        )?;
        reports.push(MdStepReport {
            step,
            alpha,
            j_hat: j.j_hat,
            stderr: j.stderr,
            fit_iterations: fit_report.iterations_run,
        });
        let (next_diff, next_alpha) = mirror_descent_step(&diff, alpha, gamma_md, policy)?;
        diff = next_diff;
        alpha = next_alpha;
    }
    std::fs::create_dir_all(out)?;
    write_report(
        &out.join("mirror_descent.json"),
        &MdFileReport {
            envelope: Envelope::new(cfg, &problem),
            gamma: gamma_md,
            steps: reports.clone(),
        },
    )?;
    Ok(reports)
}
