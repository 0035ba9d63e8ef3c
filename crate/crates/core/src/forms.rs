//! Empirical and population (quadrature) Sobolev energy forms and the
//! parabolic bilinear form.
//!
//! The empirical energy form over `n` records with `K` snapshots each is
//!
//! `E_n(f, g) = (1/n) sum_i [f g at x_T + f g at x_0]
//!            + (T/(nK)) sum_{i,k} [f g + grad f . grad g at (t_k, x_k)]`,
//!
//! and the empirical bilinear form is
//!
//! `B_n(f, g) = (1/n) sum_i (exp(Y_i/alpha) - f_T) g_T
//!            + (T/(nK)) sum_{i,k} {dt + A + alpha R_k} f . g`.
//!
//! Because the class is linear, `B_n(f, phi_j)` is affine in the coefficients
//! of `f`: the context caches the Gram matrix `G`, the vector
//! `v_j = (1/n) sum exp(Y/alpha) phi_j(T, x_T)`, and the matrix `M` with
//! `B_n(f, phi_j) = v_j + (M theta_f)_j`, which turns every solver iteration
//! into dense linear algebra.

use crate::dataset::ObservationDataset;
use crate::diffusion::{DiffusionSpec, PathBatch};
use crate::fnclass::{BasisSpec, FeatureBlock, ValueModel};
use crate::rewards::RewardSpec;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Records per parallel reduction chunk; chunked sums keep the floating-point
/// reduction order fixed regardless of thread count.
const CHUNK: usize = 64;

/// Assembled empirical forms over one dataset.
pub struct FormContext {
    pub basis: BasisSpec,
    pub alpha: f64,
    pub n: usize,
    pub k: usize,
    pub horizon: f64,
    /// Empirical energy Gram matrix `G_{jl} = E_n(phi_j, phi_l)`.
    pub gram: DMatrix<f64>,
    /// `v_j = (1/n) sum_i exp(Y_i/alpha) phi_j(T, x_T^i)`.
    pub linear: DVector<f64>,
    /// `M_{jl}` such that `B_n(f, phi_j) = v_j + (M theta_f)_j`.
    pub affine: DMatrix<f64>,
}

impl FormContext {
    /// `B_n(f, phi_j)` for all `j`, as a vector.
    pub fn bilinear_vector(&self, theta_f: &DVector<f64>) -> DVector<f64> {
        &self.linear + &self.affine * theta_f
    }

    /// `B_n(f, g)` where `g` has coefficients `g_coeffs` over the same basis.
    pub fn bilinear(&self, f: &ValueModel, g_coeffs: &DVector<f64>) -> Result<f64> {
        if f.theta.len() != self.basis.len() || g_coeffs.len() != self.basis.len() {
            return Err(Error::DimensionMismatch {
                expected: self.basis.len(),
                got: f.theta.len(),
                context: "bilinear basis",
            });
        }
        Ok(g_coeffs.dot(&self.bilinear_vector(&f.theta_vector())))
    }

    /// Empirical energy inner product of two coefficient vectors.
    pub fn energy(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.dot(&(&self.gram * b))
    }

    /// Magnitude of the two terms composing `B_n(f, .)` before cancellation;
    /// the natural scale for residual tolerances.
    pub fn residual_scale(&self, theta_f: &DVector<f64>) -> f64 {
        self.linear.norm() + (&self.affine * theta_f).norm()
    }
}

/// Per-chunk partial sums.
struct Partial {
    gram: DMatrix<f64>,
    linear: DVector<f64>,
    affine: DMatrix<f64>,
}

/// Assembles the empirical forms. `K = 0` yields boundary-only forms; an
/// empty dataset is an error.
pub fn assemble(
    dataset: &ObservationDataset,
    basis: &BasisSpec,
    diff: &DiffusionSpec,
    alpha: f64,
) -> Result<FormContext> {
    if dataset.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if basis.dim != dataset.dim || diff.dim != dataset.dim {
        return Err(Error::DimensionMismatch {
            expected: dataset.dim,
            got: basis.dim,
            context: "assemble basis/diffusion dim",
        });
    }
    let p = basis.len();
    let n = dataset.records.len();
    let horizon = dataset.horizon;
    let snap_w = if dataset.k > 0 {
        horizon / dataset.k as f64
    } else {
        0.0
    };

    let partials: Vec<Result<Partial>> = dataset
        .records
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = Partial {
                gram: DMatrix::zeros(p, p),
                linear: DVector::zeros(p),
                affine: DMatrix::zeros(p, p),
            };
            for rec in chunk {
                let fb0 = basis.features(0.0, &rec.x0);
                acc.gram.syger(1.0, &fb0.phi, &fb0.phi, 1.0);
                let fbt = basis.features(horizon, &rec.x_t);
                acc.gram.syger(1.0, &fbt.phi, &fbt.phi, 1.0);
                let w_term = (rec.y / alpha).exp();
                acc.linear.axpy(w_term, &fbt.phi, 1.0);
                acc.affine.ger(-1.0, &fbt.phi, &fbt.phi, 1.0);
                for ob in &rec.obs {
                    let fb = basis.features(ob.t, &ob.x);
                    let lphi = apply_operator(diff, alpha, ob.t, &ob.x, ob.r, &fb)?;
                    acc.gram.syger(snap_w, &fb.phi, &fb.phi, 1.0);
                    acc.gram.gemm(snap_w, &fb.grad, &fb.grad.transpose(), 1.0);
                    acc.affine.ger(snap_w, &fb.phi, &lphi, 1.0);
                }
            }
            Ok(acc)
        })
        .collect();

    let mut gram = DMatrix::zeros(p, p);
    let mut linear = DVector::zeros(p);
    let mut affine = DMatrix::zeros(p, p);
    for part in partials {
        let part = part?;
        gram += part.gram;
        linear += part.linear;
        affine += part.affine;
    }
    let inv_n = 1.0 / n as f64;
    gram *= inv_n;
    linear *= inv_n;
    affine *= inv_n;
    // syger fills only the lower triangle; mirror it.
    for j in 0..p {
        for l in (j + 1)..p {
            gram[(j, l)] = gram[(l, j)];
        }
    }
    Ok(FormContext {
        basis: basis.clone(),
        alpha,
        n,
        k: dataset.k,
        horizon,
        gram,
        linear,
        affine,
    })
}

/// `{dt + A_t + alpha r} phi` for every feature, given the block at `(t,x)`.
fn apply_operator(
    diff: &DiffusionSpec,
    alpha: f64,
    t: f64,
    x: &[f64],
    r: f64,
    fb: &FeatureBlock,
) -> Result<DVector<f64>> {
    let d = diff.dim;
    let b = diff.drift_eval(t, &DVector::from_column_slice(x))?;
    let lambda = diff.diffusion.at(t, d);
    let p = fb.phi.len();
    let mut out = DVector::zeros(p);
    for j in 0..p {
        let mut adv = 0.0;
        for i in 0..d {
            adv += b[i] * fb.grad[(j, i)];
        }
        let mut trace = 0.0;
        let h = &fb.hess[j];
        for i in 0..d {
            for l in 0..d {
                trace += lambda[(i, l)] * h[(l, i)];
            }
        }
        out[j] = fb.dphi_dt[j] + adv + 0.5 * trace + alpha * r * fb.phi[j];
    }
    Ok(out)
}

/// Quadrature measure for population-level forms.
pub enum Measure<'a> {
    /// Empirical measure of a simulated cloud with trapezoidal time
    /// integration on its fine grid.
    Cloud(&'a PathBatch),
    /// Exact Gaussian marginals of a scalar OU process, integrated with
    /// Gauss-Hermite nodes in space and a uniform trapezoid in time.
    OuGaussHermite {
        theta: f64,
        sigma2: f64,
        mu: f64,
        mean0: f64,
        var0: f64,
        horizon: f64,
        n_time: usize,
        n_nodes: usize,
    },
}

impl<'a> Measure<'a> {
    /// Builds the exact-marginal measure from a scalar OU spec.
    pub fn ou_gauss_hermite(diff: &DiffusionSpec, n_time: usize, n_nodes: usize) -> Result<Self> {
        if diff.dim != 1 {
            return Err(Error::Unsupported(
                "Gauss-Hermite marginals require dim 1".into(),
            ));
        }
        let (theta, mu) = match &diff.drift {
            crate::diffusion::Drift::Ou { theta, mu } => (*theta, mu[0]),
            _ => {
                return Err(Error::Unsupported(
                    "Gauss-Hermite marginals require an OU drift".into(),
                ))
            }
        };
        let sigma2 = match &diff.diffusion {
            crate::diffusion::DiffusionMatrix::Scalar { value } => *value,
            _ => {
                return Err(Error::Unsupported(
                    "Gauss-Hermite marginals require scalar diffusion".into(),
                ))
            }
        };
        let (mean0, var0) = match &diff.init {
            crate::diffusion::InitLaw::Point { x } => (x[0], 0.0),
            crate::diffusion::InitLaw::Gaussian { mean, std } => (mean[0], std[0] * std[0]),
        };
        Ok(Measure::OuGaussHermite {
            theta,
            sigma2,
            mu,
            mean0,
            var0,
            horizon: diff.horizon,
            n_time,
            n_nodes,
        })
    }

    /// Visits interior quadrature nodes `(t, x, w)`, where the weights
    /// integrate `int_0^T E[.] dt`.
    fn for_each_interior(&self, mut visit: impl FnMut(f64, &[f64], f64)) {
        match self {
            Measure::Cloud(batch) => {
                let l_steps = batch.n_steps();
                let wp = 1.0 / batch.n_paths as f64;
                for l in 0..=l_steps {
                    let wt = if l == 0 || l == l_steps {
                        batch.dt / 2.0
                    } else {
                        batch.dt
                    };
                    for i in 0..batch.n_paths {
                        visit(batch.grid[l], batch.state(i, l), wt * wp);
                    }
                }
            }
            Measure::OuGaussHermite {
                horizon,
                n_time,
                n_nodes,
                ..
            } => {
                let (nodes, weights) = gauss_hermite(*n_nodes);
                let dt = horizon / *n_time as f64;
                for l in 0..=*n_time {
                    let t = l as f64 * dt;
                    let wt = if l == 0 || l == *n_time { dt / 2.0 } else { dt };
                    let (m, v) = self.ou_moments(t);
                    let s = v.max(0.0).sqrt();
                    for (z, wz) in nodes.iter().zip(weights.iter()) {
                        visit(t, &[m + s * z], wt * wz);
                    }
                }
            }
        }
    }

    /// Visits boundary nodes: `(is_terminal, t, x, w)` with weights averaging
    /// over the marginal at `t = 0` and `t = T`.
    fn for_each_boundary(&self, mut visit: impl FnMut(bool, f64, &[f64], f64)) {
        match self {
            Measure::Cloud(batch) => {
                let last = batch.n_steps();
                let wp = 1.0 / batch.n_paths as f64;
                for i in 0..batch.n_paths {
                    visit(false, 0.0, batch.state(i, 0), wp);
                    visit(true, *batch.grid.last().unwrap(), batch.state(i, last), wp);
                }
            }
            Measure::OuGaussHermite {
                horizon, n_nodes, ..
            } => {
                let (nodes, weights) = gauss_hermite(*n_nodes);
                for &(term, t) in &[(false, 0.0), (true, *horizon)] {
                    let (m, v) = self.ou_moments(t);
                    let s = v.max(0.0).sqrt();
                    for (z, wz) in nodes.iter().zip(weights.iter()) {
                        visit(term, t, &[m + s * z], *wz);
                    }
                }
            }
        }
    }

    fn ou_moments(&self, t: f64) -> (f64, f64) {
        match self {
            Measure::OuGaussHermite {
                theta,
                sigma2,
                mu,
                mean0,
                var0,
                ..
            } => {
                let e = (-theta * t).exp();
                let m = mu + (mean0 - mu) * e;
                let v = var0 * e * e + sigma2 * (1.0 - e * e) / (2.0 * theta);
                (m, v)
            }
            Measure::Cloud(_) => unreachable!("ou_moments is Gauss-Hermite only"),
        }
    }
}

/// Probabilists' Gauss-Hermite nodes/weights (weights sum to 1) via the
/// Golub-Welsch eigenvalue method on the Jacobi matrix.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    if n == 1 {
        return (vec![0.0], vec![1.0]);
    }
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1).collect(),
    )
}

/// Population forms reduced to the basis span: `B[f,g] = theta_g' B theta_f`
/// and `<f,g>_{S,T} = theta_f' E theta_g`.
pub struct PopulationForms {
    pub basis: BasisSpec,
    pub energy: DMatrix<f64>,
    pub bilinear: DMatrix<f64>,
}

impl PopulationForms {
    pub fn bilinear_of(&self, f: &ValueModel, g: &ValueModel) -> f64 {
        g.theta_vector().dot(&(&self.bilinear * f.theta_vector()))
    }

    pub fn energy_of(&self, f: &ValueModel, g: &ValueModel) -> f64 {
        f.theta_vector().dot(&(&self.energy * g.theta_vector()))
    }
}

/// Assembles the population forms of a basis over a quadrature measure.
pub fn assemble_population(
    basis: &BasisSpec,
    diff: &DiffusionSpec,
    reward: &RewardSpec,
    alpha: f64,
    measure: &Measure,
) -> Result<PopulationForms> {
    let p = basis.len();
    let mut energy = DMatrix::zeros(p, p);
    let mut bilinear = DMatrix::zeros(p, p);
    let mut first_err: Option<Error> = None;
    measure.for_each_interior(|t, x, w| {
        if first_err.is_some() {
            return;
        }
        let fb = basis.features(t, x);
        match reward
            .intermediate
            .mean(t, x)
            .and_then(|r| apply_operator(diff, alpha, t, x, r, &fb))
        {
            Ok(lphi) => {
                energy.syger(w, &fb.phi, &fb.phi, 1.0);
                energy.gemm(w, &fb.grad, &fb.grad.transpose(), 1.0);
                bilinear.ger(-w, &fb.phi, &lphi, 1.0);
            }
            Err(e) => first_err = Some(e),
        }
    });
    measure.for_each_boundary(|terminal, t, x, w| {
        let fb = basis.features(t, x);
        energy.syger(w, &fb.phi, &fb.phi, 1.0);
        if terminal {
            bilinear.ger(w, &fb.phi, &fb.phi, 1.0);
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }
    for j in 0..p {
        for l in (j + 1)..p {
            energy[(j, l)] = energy[(l, j)];
        }
    }
    Ok(PopulationForms {
        basis: basis.clone(),
        energy,
        bilinear,
    })
}

/// `v_j = B[fstar, phi_j]` for a reference solution in an arbitrary basis.
pub fn population_linear(
    fstar: &ValueModel,
    basis: &BasisSpec,
    diff: &DiffusionSpec,
    reward: &RewardSpec,
    alpha: f64,
    measure: &Measure,
) -> Result<DVector<f64>> {
    let p = basis.len();
    let mut v = DVector::zeros(p);
    let mut first_err: Option<Error> = None;
    measure.for_each_interior(|t, x, w| {
        if first_err.is_some() {
            return;
        }
        match model_operator(fstar, diff, reward, alpha, t, x) {
            Ok(lf) => {
                let fb = basis.features(t, x);
                v.axpy(-w * lf, &fb.phi, 1.0);
            }
            Err(e) => first_err = Some(e),
        }
    });
    measure.for_each_boundary(|terminal, t, x, w| {
        if terminal {
            let fb = basis.features(t, x);
            v.axpy(w * fstar.eval(t, x), &fb.phi, 1.0);
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }
    Ok(v)
}

/// `{dt + A + alpha r} f` for an arbitrary model at one point.
fn model_operator(
    f: &ValueModel,
    diff: &DiffusionSpec,
    reward: &RewardSpec,
    alpha: f64,
    t: f64,
    x: &[f64],
) -> Result<f64> {
    let r = reward.intermediate.mean(t, x)?;
    let af = diff.generator_apply(
        t,
        &DVector::from_column_slice(x),
        &f.grad_x(t, x),
        &f.hess_x(t, x),
    )?;
    Ok(f.dt(t, x) + af + alpha * r * f.eval(t, x))
}

/// Population bilinear form
/// `B[f, g] = E[f_T g_T] - int_0^T E[{dt + A + alpha r} f . g] dt`
/// by quadrature; `f` and `g` may live in different bases.
pub fn quadrature_bilinear(
    f: &ValueModel,
    g: &ValueModel,
    diff: &DiffusionSpec,
    reward: &RewardSpec,
    alpha: f64,
    measure: &Measure,
) -> Result<f64> {
    let mut acc = 0.0;
    let mut first_err: Option<Error> = None;
    measure.for_each_interior(|t, x, w| {
        if first_err.is_some() {
            return;
        }
        match model_operator(f, diff, reward, alpha, t, x) {
            Ok(lf) => acc -= w * lf * g.eval(t, x),
            Err(e) => first_err = Some(e),
        }
    });
    measure.for_each_boundary(|terminal, t, x, w| {
        if terminal {
            acc += w * f.eval(t, x) * g.eval(t, x);
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }
    Ok(acc)
}

/// Gram matrices for the time-regularity diagnostic: the time-derivative
/// Gram `D = int_0^T E[dphi/dt dphi/dt'] dt` and the full energy Gram
/// `G = <phi, phi'>_{S,T}`. For a model `f = theta . phi` the ratio
/// `sqrt(theta' D theta / theta' G theta)` bounds how fast `f` can move in
/// time relative to its energy norm.
pub fn assemble_diagnostic_grams(
    basis: &BasisSpec,
    measure: &Measure,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = basis.len();
    let mut time = DMatrix::zeros(p, p);
    let mut energy = DMatrix::zeros(p, p);
    measure.for_each_interior(|t, x, w| {
        let fb = basis.features(t, x);
        time.syger(w, &fb.dphi_dt, &fb.dphi_dt, 1.0);
        energy.syger(w, &fb.phi, &fb.phi, 1.0);
        energy.gemm(w, &fb.grad, &fb.grad.transpose(), 1.0);
    });
    measure.for_each_boundary(|_, t, x, w| {
        let fb = basis.features(t, x);
        energy.syger(w, &fb.phi, &fb.phi, 1.0);
    });
    for j in 0..p {
        for l in (j + 1)..p {
            time[(j, l)] = time[(l, j)];
            energy[(j, l)] = energy[(l, j)];
        }
    }
    (time, energy)
}

/// Relative Sobolev energy error `||f - g||_{S,T} / ||g||_{S,T}` for models
/// in possibly different bases, expanded as `<f,f> - 2<f,g> + <g,g>`.
pub fn relative_energy_error(f: &ValueModel, g: &ValueModel, measure: &Measure) -> f64 {
    let ff = quadrature_energy(f, f, measure);
    let fg = quadrature_energy(f, g, measure);
    let gg = quadrature_energy(g, g, measure);
    ((ff - 2.0 * fg + gg).max(0.0) / gg).sqrt()
}

/// Population Sobolev energy inner product
/// `<f,g>_{S,T} = E f_0 g_0 + E f_T g_T + int_0^T E[f g + grad f . grad g] dt`.
pub fn quadrature_energy(f: &ValueModel, g: &ValueModel, measure: &Measure) -> f64 {
    let mut acc = 0.0;
    measure.for_each_interior(|t, x, w| {
        acc += w * (f.eval(t, x) * g.eval(t, x) + f.grad_x(t, x).dot(&g.grad_x(t, x)));
    });
    measure.for_each_boundary(|_, t, x, w| {
        acc += w * f.eval(t, x) * g.eval(t, x);
    });
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_dataset;
    use crate::diffusion::{simulate_paths, DiffusionMatrix, Drift, InitLaw};
    use crate::fnclass::SpatialFeature;
    use crate::rewards::{simple_reward, NoiseModel};
    use crate::rng;
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn ou_spec() -> DiffusionSpec {
        DiffusionSpec::new(
            1,
            1.0,
            Drift::Ou {
                theta: 1.0,
                mu: dvector![0.0],
            },
            DiffusionMatrix::Scalar { value: 2.0 },
            InitLaw::Point { x: dvector![0.0] },
        )
        .unwrap()
    }

    fn constant_basis() -> BasisSpec {
        BasisSpec::new(
            0,
            vec![SpatialFeature::Monomial { powers: vec![0] }],
            1,
            1.0,
        )
        .unwrap()
    }

    fn rich_basis() -> BasisSpec {
        BasisSpec::new(
            2,
            vec![
                SpatialFeature::Monomial { powers: vec![0] },
                SpatialFeature::Monomial { powers: vec![1] },
                SpatialFeature::Rbf {
                    center: vec![0.0],
                    width: 1.0,
                },
                SpatialFeature::Rbf {
                    center: vec![1.0],
                    width: 0.7,
                },
            ],
            1,
            1.0,
        )
        .unwrap()
    }

    fn reward() -> RewardSpec {
        simple_reward(-1.0, vec![0.5], NoiseModel::None, 1.0, true)
    }

    #[test]
    fn constant_feature_gram_is_two_plus_t() {
        let ds = generate_dataset(&ou_spec(), &reward(), 100, 8, 0.01, 1).unwrap();
        let ctx = assemble(&ds, &constant_basis(), &ou_spec(), 1.0).unwrap();
        assert_relative_eq!(ctx.gram[(0, 0)], 2.0 + 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gram_is_symmetric_psd() {
        let ds = generate_dataset(&ou_spec(), &reward(), 200, 10, 0.01, 2).unwrap();
        let ctx = assemble(&ds, &rich_basis(), &ou_spec(), 1.0).unwrap();
        let g = &ctx.gram;
        assert_relative_eq!((g - g.transpose()).abs().max(), 0.0);
        let eigs = g.clone().symmetric_eigen().eigenvalues;
        let bound = -1e-10 * g.abs().max();
        assert!(eigs.iter().all(|&e| e >= bound), "eigs {eigs:?}");
    }

    #[test]
    fn bilinear_at_zero_f_is_mean_exponential() {
        let ds = generate_dataset(&ou_spec(), &reward(), 500, 6, 0.01, 3).unwrap();
        let basis = constant_basis();
        let ctx = assemble(&ds, &basis, &ou_spec(), 1.0).unwrap();
        let f0 = ValueModel::zero(basis.clone(), 1.0);
        let got = ctx.bilinear(&f0, &dvector![1.0]).unwrap();
        let want: f64 =
            ds.records.iter().map(|r| r.y.exp()).sum::<f64>() / ds.n() as f64;
        assert_relative_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn bilinear_is_linear_in_g() {
        let ds = generate_dataset(&ou_spec(), &reward(), 100, 5, 0.01, 4).unwrap();
        let basis = rich_basis();
        let ctx = assemble(&ds, &basis, &ou_spec(), 1.0).unwrap();
        let p = basis.len();
        let mut r = rng::stream(5, rng::tag::PROBE, 0);
        let theta: Vec<f64> = (0..p).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let f = ValueModel::new(basis.clone(), theta, 100.0).unwrap();
        let g1 = DVector::from_fn(p, |_, _| r.sample::<f64, _>(StandardNormal));
        let g2 = DVector::from_fn(p, |_, _| r.sample::<f64, _>(StandardNormal));
        let (a, b) = (0.7, -2.3);
        let lhs = ctx.bilinear(&f, &(&g1 * a + &g2 * b)).unwrap();
        let rhs = a * ctx.bilinear(&f, &g1).unwrap() + b * ctx.bilinear(&f, &g2).unwrap();
        assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn quadrature_bilinear_of_constants() {
        // f = g = 1, r = -1: B[1,1] = 1 + alpha T, deterministic integrand.
        let spec = ou_spec();
        let batch = simulate_paths(&spec, 200, 0.01, 6, None, false).unwrap();
        let basis = constant_basis();
        let one = ValueModel::new(basis.clone(), vec![1.0], 2.0).unwrap();
        let alpha = 1.0;
        let got = quadrature_bilinear(
            &one,
            &one,
            &spec,
            &reward(),
            alpha,
            &Measure::Cloud(&batch),
        )
        .unwrap();
        assert_relative_eq!(got, 1.0 + alpha * 1.0, epsilon = 1e-10);

        let gh = Measure::ou_gauss_hermite(&spec, 50, 24).unwrap();
        let got = quadrature_bilinear(&one, &one, &spec, &reward(), alpha, &gh).unwrap();
        assert_relative_eq!(got, 2.0, epsilon = 1e-10);
    }

    #[test]
    fn quadrature_energy_of_constants() {
        let spec = ou_spec();
        let batch = simulate_paths(&spec, 100, 0.02, 6, None, false).unwrap();
        let basis = constant_basis();
        let one = ValueModel::new(basis, vec![1.0], 2.0).unwrap();
        let got = quadrature_energy(&one, &one, &Measure::Cloud(&batch));
        assert_relative_eq!(got, 2.0 + 1.0, epsilon = 1e-10);
    }

    #[test]
    fn energy_cauchy_schwarz() {
        let spec = ou_spec();
        let batch = simulate_paths(&spec, 300, 0.02, 8, None, false).unwrap();
        let measure = Measure::Cloud(&batch);
        let basis = rich_basis();
        let p = basis.len();
        for i in 0..20u64 {
            let mut r = rng::stream(21, rng::tag::PROBE, i);
            let ta: Vec<f64> = (0..p).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let tb: Vec<f64> = (0..p).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let fa = ValueModel::new(basis.clone(), ta, 100.0).unwrap();
            let fb = ValueModel::new(basis.clone(), tb, 100.0).unwrap();
            let ab = quadrature_energy(&fa, &fb, &measure);
            let aa = quadrature_energy(&fa, &fa, &measure);
            let bb = quadrature_energy(&fb, &fb, &measure);
            assert!(ab.abs() <= (aa * bb).sqrt() * (1.0 + 1e-10));
        }
    }

    #[test]
    fn bilinear_is_not_symmetric() {
        let spec = ou_spec();
        let batch = simulate_paths(&spec, 200, 0.02, 9, None, false).unwrap();
        let measure = Measure::Cloud(&batch);
        let basis = rich_basis();
        let p = basis.len();
        let mut r = rng::stream(22, rng::tag::PROBE, 0);
        let ta: Vec<f64> = (0..p).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let tb: Vec<f64> = (0..p).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let fa = ValueModel::new(basis.clone(), ta, 100.0).unwrap();
        let fb = ValueModel::new(basis.clone(), tb, 100.0).unwrap();
        let fg = quadrature_bilinear(&fa, &fb, &spec, &reward(), 1.0, &measure).unwrap();
        let gf = quadrature_bilinear(&fb, &fa, &spec, &reward(), 1.0, &measure).unwrap();
        assert!((fg - gf).abs() > 1e-6 * (fg.abs() + gf.abs()));
    }

    #[test]
    fn population_forms_match_direct_quadrature() {
        let spec = ou_spec();
        let batch = simulate_paths(&spec, 100, 0.02, 10, None, false).unwrap();
        let measure = Measure::Cloud(&batch);
        let basis = rich_basis();
        let forms = assemble_population(&basis, &spec, &reward(), 1.0, &measure).unwrap();
        let p = basis.len();
        let mut r = rng::stream(23, rng::tag::PROBE, 0);
        let ta: Vec<f64> = (0..p).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let tb: Vec<f64> = (0..p).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let fa = ValueModel::new(basis.clone(), ta, 100.0).unwrap();
        let fb = ValueModel::new(basis.clone(), tb, 100.0).unwrap();
        let direct_b = quadrature_bilinear(&fa, &fb, &spec, &reward(), 1.0, &measure).unwrap();
        let direct_e = quadrature_energy(&fa, &fb, &measure);
        assert_relative_eq!(forms.bilinear_of(&fa, &fb), direct_b, epsilon = 1e-9);
        assert_relative_eq!(forms.energy_of(&fa, &fb), direct_e, epsilon = 1e-9);
        // v_j = B[fstar, phi_j] agrees with direct quadrature too.
        let v = population_linear(&fa, &basis, &spec, &reward(), 1.0, &measure).unwrap();
        for j in 0..p {
            let mut ej = vec![0.0; p];
            ej[j] = 1.0;
            let phi_j = ValueModel::new(basis.clone(), ej, 100.0).unwrap();
            let direct =
                quadrature_bilinear(&fa, &phi_j, &spec, &reward(), 1.0, &measure).unwrap();
            assert_relative_eq!(v[j], direct, epsilon = 1e-9);
        }
    }

    #[test]
    fn empirical_energy_converges_to_population() {
        let spec = ou_spec();
        let basis = rich_basis();
        let ds = generate_dataset(&spec, &reward(), 4000, 30, 0.01, 11).unwrap();
        let ctx = assemble(&ds, &basis, &spec, 1.0).unwrap();
        let gh = Measure::ou_gauss_hermite(&spec, 200, 32).unwrap();
        let p = basis.len();
        let mut r = rng::stream(24, rng::tag::PROBE, 0);
        let ta: Vec<f64> = (0..p).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let fa = ValueModel::new(basis.clone(), ta, 100.0).unwrap();
        let emp = ctx.energy(&fa.theta_vector(), &fa.theta_vector());
        let pop = quadrature_energy(&fa, &fa, &gh);
        assert!(
            (emp - pop).abs() <= 0.1 * pop.abs(),
            "empirical {emp} vs population {pop}"
        );
    }

    #[test]
    fn gauss_hermite_integrates_moments() {
        let (nodes, weights) = gauss_hermite(16);
        let m0: f64 = weights.iter().sum();
        let m2: f64 = nodes.iter().zip(&weights).map(|(z, w)| z * z * w).sum();
        let m4: f64 = nodes.iter().zip(&weights).map(|(z, w)| z.powi(4) * w).sum();
        assert_relative_eq!(m0, 1.0, epsilon = 1e-12);
        assert_relative_eq!(m2, 1.0, epsilon = 1e-10);
        assert_relative_eq!(m4, 3.0, epsilon = 1e-9);
    }
}
