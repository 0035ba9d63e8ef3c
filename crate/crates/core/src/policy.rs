//! Plug-in policy extraction `pi = Lambda grad log f`, controlled-process
//! objective estimation, Girsanov KL diagnostics, the mirror-descent outer
//! step, and the classifier-guidance regression baseline.

use crate::dataset::ObservationDataset;
use crate::diffusion::{simulate_paths, Control, DiffusionMatrix, DiffusionSpec, Drift};
use crate::fnclass::{BasisSpec, ValueModel};
use crate::oracle::{fk_gradient, fk_value, OracleConfig, OuInstance};
use crate::rewards::RewardSpec;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// Where the transformed value function behind a policy comes from.
#[derive(Clone)]
pub enum PolicySource {
    Zero,
    /// A fitted (or reference) model in the linear class.
    Model(Arc<ValueModel>),
    /// The scalar OU closed form.
    ClosedFormOu(OuInstance),
    /// Monte-Carlo Feynman-Kac oracle (probe-point use; expensive).
    OracleFk {
        diff: Arc<DiffusionSpec>,
        reward: Arc<RewardSpec>,
        alpha: f64,
        cfg: OracleConfig,
    },
}

/// An evaluable policy `pi(t, x) = Lambda_t grad f / max(f, f_floor)`.
///
/// The floor is the value lower bound `exp(-(T+2)/alpha)` implied by the
/// always-available constant policy; it prevents log-gradient blow-ups for
/// poorly fit models, and every activation is counted.
pub struct PolicyHandle {
    pub source: PolicySource,
    pub f_floor: f64,
    pub action_cap: Option<f64>,
    lambda: DiffusionMatrix,
    dim: usize,
    clamp_count: AtomicU64,
}

impl PolicyHandle {
    pub fn new(source: PolicySource, diff: &DiffusionSpec, alpha: f64) -> Self {
        Self {
            source,
            f_floor: (-(diff.horizon + 2.0) / alpha).exp(),
            action_cap: None,
            lambda: diff.diffusion.clone(),
            dim: diff.dim,
            clamp_count: AtomicU64::new(0),
        }
    }

    pub fn with_floor(mut self, f_floor: f64) -> Self {
        self.f_floor = f_floor;
        self
    }

    pub fn with_action_cap(mut self, cap: f64) -> Self {
        self.action_cap = Some(cap);
        self
    }

    pub fn clamp_activations(&self) -> u64 {
        self.clamp_count.load(Ordering::Relaxed)
    }

    pub fn reset_clamp_count(&self) {
        self.clamp_count.store(0, Ordering::Relaxed);
    }

    /// Evaluates the action vector at `(t, x)`.
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.dim);
        self.eval_into(t, x, out.as_mut_slice())?;
        Ok(out)
    }

    fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.source {
            PolicySource::Zero => out.fill(0.0),
            PolicySource::Model(model) => {
                let mut grad = vec![0.0; self.dim];
                let f = model.eval_value_grad(t, x, &mut grad);
                self.log_grad_action(t, f, &grad, out);
            }
            PolicySource::ClosedFormOu(inst) => {
                out[0] = inst.policy(t);
            }
            PolicySource::OracleFk {
                diff,
                reward,
                alpha,
                cfg,
            } => {
                let (f, _) = fk_value(diff, reward, *alpha, t, x, cfg)?;
                let (grad, _) = fk_gradient(diff, reward, *alpha, t, x, cfg)?;
                self.log_grad_action(t, f, grad.as_slice(), out);
            }
        }
        if let Some(cap) = self.action_cap {
            let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > cap {
                for v in out.iter_mut() {
                    *v *= cap / norm;
                }
            }
        }
        Ok(())
    }

    fn log_grad_action(&self, t: f64, f: f64, grad: &[f64], out: &mut [f64]) {
        let denom = if f < self.f_floor {
            self.clamp_count.fetch_add(1, Ordering::Relaxed);
            self.f_floor
        } else {
            f
        };
        let lam = self.lambda.at(t, self.dim);
        for i in 0..self.dim {
            let mut s = 0.0;
            for j in 0..self.dim {
                s += lam[(i, j)] * grad[j];
            }
            out[i] = s / denom;
        }
    }
}

impl Control for PolicyHandle {
    fn action(&self, t: f64, x: &[f64], out: &mut [f64]) {
        // Policy sources used inside simulation are pure and infallible
        // (Zero/Model/ClosedFormOu); the FK source can fail only on invalid
        // times, which the simulator never produces.
        self.eval_into(t, x, out)
            .expect("policy evaluation inside simulation");
    }

    fn describe(&self) -> String {
        match &self.source {
            PolicySource::Zero => "policy:zero".into(),
            PolicySource::Model(m) => format!("policy:model({})", m.digest()),
            PolicySource::ClosedFormOu(i) => format!(
                "policy:ou(theta={:e},sigma2={:e},c={:e},alpha={:e})",
                i.theta, i.sigma2, i.c, i.alpha
            ),
            PolicySource::OracleFk { alpha, cfg, .. } => format!(
                "policy:fk(alpha={alpha:e},n={},dt={:e},seed={})",
                cfg.n_paths, cfg.dt, cfg.seed
            ),
        }
    }
}

/// Monte-Carlo estimate of the fine-tuning objective under a policy:
/// `J = E[y(X_T)] + int E[r] dt - (alpha/2) int E[pi' Lambda^{-1} pi] dt`.
#[derive(Clone, Debug, Serialize)]
pub struct ObjectiveReport {
    pub j_hat: f64,
    pub stderr: f64,
    pub terminal: f64,
    pub running: f64,
    pub control_cost: f64,
    pub clamp_activations: u64,
}

pub fn estimate_objective(
    diff: &DiffusionSpec,
    reward: &RewardSpec,
    alpha: f64,
    ph: &PolicyHandle,
    n: usize,
    dt: f64,
    seed: u64,
) -> Result<ObjectiveReport> {
    ph.reset_clamp_count();
    let batch = simulate_paths(diff, n, dt, seed, Some(ph), false)?;
    if let Some(&path) = batch.aborted.first() {
        return Err(Error::BlowUp {
            path,
            step: batch.n_steps(),
            t: diff.horizon,
            bound: diff.blow_up_bound,
        });
    }
    let l_steps = batch.n_steps();
    let d = diff.dim;
    let mut totals = Vec::with_capacity(n);
    let (mut sum_term, mut sum_run, mut sum_cost) = (0.0, 0.0, 0.0);
    let lambda_inv: Vec<DMatrix<f64>> = batch
        .grid
        .iter()
        .map(|&t| diff.diffusion.inverse_at(t, d))
        .collect();
    let mut action = DVector::zeros(d);
    for i in 0..n {
        let mut run = 0.0;
        let mut cost = 0.0;
        for l in 0..=l_steps {
            let t = batch.grid[l];
            let x = batch.state(i, l);
            let w = if l == 0 || l == l_steps { dt / 2.0 } else { dt };
            run += w * reward.intermediate.mean(t, x)?;
            ph.eval_into(t, x, action.as_mut_slice())?;
            cost += w * action.dot(&(&lambda_inv[l] * &action));
        }
        let term = reward.terminal_eval(batch.state(i, l_steps))?;
        let total = term + run - 0.5 * alpha * cost;
        sum_term += term;
        sum_run += run;
        sum_cost += cost;
        totals.push(total);
    }
    let nf = n as f64;
    let j_hat = totals.iter().sum::<f64>() / nf;
    let var = totals.iter().map(|v| (v - j_hat).powi(2)).sum::<f64>() / (nf - 1.0);
    Ok(ObjectiveReport {
        j_hat,
        stderr: (var / nf).sqrt(),
        terminal: sum_term / nf,
        running: sum_run / nf,
        control_cost: -0.5 * alpha * sum_cost / nf,
        clamp_activations: ph.clamp_activations(),
    })
}

/// Two estimators of `KL(P^pi || P)` over the horizon.
#[derive(Clone, Debug, Serialize)]
pub struct KlReport {
    /// `(1/2) int E |Lambda^{-1/2} pi|^2 dt`.
    pub kl_quadratic: f64,
    pub stderr_quadratic: f64,
    /// Pathwise Girsanov log-density ratio averaged under the controlled law.
    pub kl_logratio: f64,
    pub stderr_logratio: f64,
}

pub fn kl_path_estimate(
    diff: &DiffusionSpec,
    ph: &PolicyHandle,
    n: usize,
    dt: f64,
    seed: u64,
) -> Result<KlReport> {
    let batch = simulate_paths(diff, n, dt, seed, Some(ph), true)?;
    if let Some(&path) = batch.aborted.first() {
        return Err(Error::BlowUp {
            path,
            step: batch.n_steps(),
            t: diff.horizon,
            bound: diff.blow_up_bound,
        });
    }
    let l_steps = batch.n_steps();
    let d = diff.dim;
    let inv_sqrt: Vec<Vec<f64>> = batch
        .grid
        .iter()
        .map(|&t| diff.diffusion.inv_sqrt_at(t, d))
        .collect();
    let mut quad = Vec::with_capacity(n);
    let mut logr = Vec::with_capacity(n);
    let mut action = DVector::zeros(d);
    let mut u = vec![0.0; d];
    for i in 0..n {
        let mut q = 0.0;
        let mut lr = 0.0;
        for l in 0..l_steps {
            let t = batch.grid[l];
            ph.eval_into(t, batch.state(i, l), action.as_mut_slice())?;
            let m = &inv_sqrt[l];
            let mut u2 = 0.0;
            for a in 0..d {
                let mut s = 0.0;
                for b in 0..d {
                    s += m[a * d + b] * action[b];
                }
                u[a] = s;
                u2 += s * s;
            }
            q += 0.5 * u2 * dt;
            let db = batch.increment(i, l);
            let mut dot = 0.0;
            for a in 0..d {
                dot += u[a] * db[a];
            }
            lr += dot + 0.5 * u2 * dt;
        }
        quad.push(q);
        logr.push(lr);
    }
    let stat = |v: &[f64]| {
        let nf = v.len() as f64;
        let m = v.iter().sum::<f64>() / nf;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (nf - 1.0);
        (m, (var / nf).sqrt())
    };
    let (kq, sq) = stat(&quad);
    let (kl, sl) = stat(&logr);
    Ok(KlReport {
        kl_quadratic: kq,
        stderr_quadratic: sq,
        kl_logratio: kl,
        stderr_logratio: sl,
    })
}

/// One mirror-descent outer step: shift the drift by the previous policy
/// scaled by `1/(1 + alpha0 gamma)` and raise the regularization to
/// `alpha0 + 1/gamma`. The caller regenerates data and refits under the
/// returned spec.
pub fn mirror_descent_step(
    diff: &DiffusionSpec,
    alpha0: f64,
    gamma_md: f64,
    prev_policy: Arc<PolicyHandle>,
) -> Result<(DiffusionSpec, f64)> {
    if !(gamma_md > 0.0) {
        return Err(Error::InvalidParameter(
            "mirror-descent step size must be positive".into(),
        ));
    }
    let mut shifted = diff.clone();
    shifted.drift = Drift::Shifted {
        base: Box::new(diff.drift.clone()),
        control: prev_policy,
        scale: 1.0 / (1.0 + alpha0 * gamma_md),
    };
    Ok((shifted, alpha0 + 1.0 / gamma_md))
}

/// Classifier-guidance baseline: unconstrained ridge regression of
/// `exp(Y_i/alpha)` on the features at every snapshot, each snapshot paired
/// with its own trajectory's terminal reward. Returns a model whose
/// log-gradient is the naive guidance policy.
pub fn classifier_guidance_fit(
    dataset: &ObservationDataset,
    basis: &BasisSpec,
    alpha: f64,
    ridge: f64,
) -> Result<ValueModel> {
    if dataset.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let p = basis.len();
    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    let mut count = 0usize;
    for rec in &dataset.records {
        let target = (rec.y / alpha).exp();
        for ob in &rec.obs {
            let fb = basis.features(ob.t, &ob.x);
            gram.syger(1.0, &fb.phi, &fb.phi, 1.0);
            rhs.axpy(target, &fb.phi, 1.0);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidParameter(
            "classifier guidance needs K >= 1 snapshots".into(),
        ));
    }
    for j in 0..p {
        for l in (j + 1)..p {
            gram[(j, l)] = gram[(l, j)];
        }
    }
    let scale = gram.trace() / p as f64;
    for i in 0..p {
        gram[(i, i)] += ridge * scale.max(1e-300);
    }
    let theta = nalgebra::Cholesky::new(gram)
        .ok_or(Error::GramFactorization { ridge })?
        .solve(&rhs);
    let norm = theta.norm();
    ValueModel::new(basis.clone(), theta.as_slice().to_vec(), norm.max(1e-12) * (1.0 + 1e-9))
}
