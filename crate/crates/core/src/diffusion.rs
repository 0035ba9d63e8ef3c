//! Uncontrolled and controlled diffusion processes on `[0, T]`, simulated
//! with Euler-Maruyama on a uniform fine grid.
//!
//! The uncontrolled process is `dX = b_t(X) dt + Lambda_t^{1/2} dB`; a
//! control shifts the drift additively. The diffusion matrix depends on
//! time only.

use crate::rng::{self, tag};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::sync::Arc;

/// Default bound on `|X|` past which a path is aborted and reported.
pub const DEFAULT_BLOW_UP_BOUND: f64 = 1e6;

/// A state-feedback control `pi_t(x)`, evaluated on raw coordinate slices.
pub trait Control: Send + Sync {
    fn action(&self, t: f64, x: &[f64], out: &mut [f64]);
    /// Stable description used in content digests.
    fn describe(&self) -> String;
}

/// The zero control.
pub struct ZeroControl;

impl Control for ZeroControl {
    fn action(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn describe(&self) -> String {
        "zero".to_string()
    }
}

/// Drift families.
#[derive(Clone)]
pub enum Drift {
    /// Ornstein-Uhlenbeck: `b(x) = -theta (x - mu)`.
    Ou { theta: f64, mu: DVector<f64> },
    /// Affine: `b(x) = A x + c`.
    Affine { a: DMatrix<f64>, c: DVector<f64> },
    /// Scalar polynomial (dim 1): `b(x) = sum_k coeffs[k] x^k`.
    Polynomial { coeffs: Vec<f64> },
    /// Base drift shifted by a scaled control, `b + scale * pi` (mirror descent).
    Shifted {
        base: Box<Drift>,
        control: Arc<dyn Control>,
        scale: f64,
    },
}

impl Drift {
    fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Drift::Ou { theta, mu } => {
                for i in 0..x.len() {
                    out[i] = -theta * (x[i] - mu[i]);
                }
            }
            Drift::Affine { a, c } => {
                for i in 0..out.len() {
                    let mut s = c[i];
                    for j in 0..x.len() {
                        s += a[(i, j)] * x[j];
                    }
                    out[i] = s;
                }
            }
            Drift::Polynomial { coeffs } => {
                let mut s = 0.0;
                for &ck in coeffs.iter().rev() {
                    s = s * x[0] + ck;
                }
                out[0] = s;
            }
            Drift::Shifted {
                base,
                control,
                scale,
            } => {
                base.eval_into(t, x, out);
                let mut shift = vec![0.0; out.len()];
                control.action(t, x, &mut shift);
                for i in 0..out.len() {
                    out[i] += scale * shift[i];
                }
            }
        }
    }

    fn describe(&self) -> String {
        match self {
            Drift::Ou { theta, mu } => format!("ou(theta={theta:e},mu={:?})", mu.as_slice()),
            Drift::Affine { a, c } => {
                format!("affine(a={:?},c={:?})", a.as_slice(), c.as_slice())
            }
            Drift::Polynomial { coeffs } => format!("poly({coeffs:?})"),
            Drift::Shifted {
                base,
                control,
                scale,
            } => format!(
                "shifted(base={},control={},scale={scale:e})",
                base.describe(),
                control.describe()
            ),
        }
    }
}

/// Symmetric positive-definite diffusion matrix `Lambda_t`, time-dependent only.
#[derive(Clone)]
pub enum DiffusionMatrix {
    /// `value * I`, constant in time.
    Scalar { value: f64 },
    /// A constant symmetric matrix.
    Constant { matrix: DMatrix<f64> },
    /// `poly(t) * I` with a scalar time polynomial.
    ScalarTimePoly { coeffs: Vec<f64> },
}

impl DiffusionMatrix {
    pub fn at(&self, t: f64, dim: usize) -> DMatrix<f64> {
        match self {
            DiffusionMatrix::Scalar { value } => DMatrix::identity(dim, dim) * *value,
            DiffusionMatrix::Constant { matrix } => matrix.clone(),
            DiffusionMatrix::ScalarTimePoly { coeffs } => {
                DMatrix::identity(dim, dim) * poly_eval(coeffs, t)
            }
        }
    }

    /// Symmetric square root `Lambda_t^{1/2}` as a flat row-major `dim x dim` buffer.
    pub fn sqrt_at(&self, t: f64, dim: usize) -> Vec<f64> {
        match self {
            DiffusionMatrix::Scalar { value } => scaled_identity(value.sqrt(), dim),
            DiffusionMatrix::ScalarTimePoly { coeffs } => {
                scaled_identity(poly_eval(coeffs, t).sqrt(), dim)
            }
            DiffusionMatrix::Constant { matrix } => {
                let eig = matrix.clone().symmetric_eigen();
                let mut d = eig.eigenvalues.clone();
                for v in d.iter_mut() {
                    *v = v.max(0.0).sqrt();
                }
                let s = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
                s.transpose().as_slice().to_vec() // nalgebra is column-major; transpose to row-major
            }
        }
    }

    /// Symmetric inverse square root `Lambda_t^{-1/2}` as a flat row-major
    /// buffer (Girsanov diagnostics).
    pub fn inv_sqrt_at(&self, t: f64, dim: usize) -> Vec<f64> {
        match self {
            DiffusionMatrix::Scalar { value } => scaled_identity(1.0 / value.sqrt(), dim),
            DiffusionMatrix::ScalarTimePoly { coeffs } => {
                scaled_identity(1.0 / poly_eval(coeffs, t).sqrt(), dim)
            }
            DiffusionMatrix::Constant { matrix } => {
                let eig = matrix.clone().symmetric_eigen();
                let mut d = eig.eigenvalues.clone();
                for v in d.iter_mut() {
                    *v = 1.0 / v.max(f64::MIN_POSITIVE).sqrt();
                }
                let s = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
                s.transpose().as_slice().to_vec()
            }
        }
    }

    pub fn inverse_at(&self, t: f64, dim: usize) -> DMatrix<f64> {
        self.at(t, dim)
            .try_inverse()
            .expect("diffusion matrix is positive definite")
    }

    /// Eigenvalue range over a uniform t-grid with `n_grid + 1` nodes.
    pub fn eigenvalue_range(&self, horizon: f64, dim: usize, n_grid: usize) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for l in 0..=n_grid {
            let t = horizon * l as f64 / n_grid as f64;
            let eig = self.at(t, dim).symmetric_eigen().eigenvalues;
            for v in eig.iter() {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        (lo, hi)
    }

    fn describe(&self) -> String {
        match self {
            DiffusionMatrix::Scalar { value } => format!("scalar({value:e})"),
            DiffusionMatrix::Constant { matrix } => format!("constant({:?})", matrix.as_slice()),
            DiffusionMatrix::ScalarTimePoly { coeffs } => format!("scalarpoly({coeffs:?})"),
        }
    }
}

fn poly_eval(coeffs: &[f64], t: f64) -> f64 {
    let mut s = 0.0;
    for &c in coeffs.iter().rev() {
        s = s * t + c;
    }
    s
}

fn scaled_identity(s: f64, dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        m[i * dim + i] = s;
    }
    m
}

/// Initial law `p_0`.
#[derive(Clone)]
pub enum InitLaw {
    Point { x: DVector<f64> },
    /// Independent Gaussian coordinates.
    Gaussian { mean: DVector<f64>, std: DVector<f64> },
}

impl InitLaw {
    fn sample_into(&self, rng: &mut impl Rng, out: &mut [f64]) {
        match self {
            InitLaw::Point { x } => out.copy_from_slice(x.as_slice()),
            InitLaw::Gaussian { mean, std } => {
                for i in 0..out.len() {
                    let z: f64 = rng.sample(StandardNormal);
                    out[i] = mean[i] + std[i] * z;
                }
            }
        }
    }

    fn describe(&self) -> String {
        match self {
            InitLaw::Point { x } => format!("point({:?})", x.as_slice()),
            InitLaw::Gaussian { mean, std } => {
                format!("gaussian(mean={:?},std={:?})", mean.as_slice(), std.as_slice())
            }
        }
    }
}

/// The uncontrolled SDE `dX = b_t(X) dt + Lambda_t^{1/2} dB` on `[0, horizon]`.
#[derive(Clone)]
pub struct DiffusionSpec {
    pub dim: usize,
    pub horizon: f64,
    pub drift: Drift,
    pub diffusion: DiffusionMatrix,
    pub init: InitLaw,
    pub blow_up_bound: f64,
}

impl DiffusionSpec {
    pub fn new(
        dim: usize,
        horizon: f64,
        drift: Drift,
        diffusion: DiffusionMatrix,
        init: InitLaw,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dim must be positive".into()));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidParameter("horizon must be positive".into()));
        }
        let spec = Self {
            dim,
            horizon,
            drift,
            diffusion,
            init,
            blow_up_bound: DEFAULT_BLOW_UP_BOUND,
        };
        let (lo, _hi) = spec.diffusion.eigenvalue_range(horizon, dim, 16);
        if !(lo > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "diffusion matrix must be positive definite on [0, T]; min eigenvalue {lo}"
            )));
        }
        Ok(spec)
    }

    /// Degenerate test mode: allows `Lambda = 0` (no PD check).
    pub fn new_unchecked(
        dim: usize,
        horizon: f64,
        drift: Drift,
        diffusion: DiffusionMatrix,
        init: InitLaw,
    ) -> Self {
        Self {
            dim,
            horizon,
            drift,
            diffusion,
            init,
            blow_up_bound: DEFAULT_BLOW_UP_BOUND,
        }
    }

    pub fn with_blow_up_bound(mut self, bound: f64) -> Self {
        self.blow_up_bound = bound;
        self
    }

    /// Uniform ellipticity bounds `(lambda_min, lambda_max)` over a t-grid.
    pub fn lambda_bounds(&self) -> (f64, f64) {
        self.diffusion.eigenvalue_range(self.horizon, self.dim, 64)
    }

    /// Evaluates the drift `b_t(x)`.
    pub fn drift_eval(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
                context: "drift_eval state",
            });
        }
        let mut out = DVector::zeros(self.dim);
        self.drift
            .eval_into(t, x.as_slice(), out.as_mut_slice());
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                t,
                x: x.as_slice().to_vec(),
                context: "drift_eval",
            });
        }
        Ok(out)
    }

    pub(crate) fn drift_eval_slice(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.drift.eval_into(t, x, out);
    }

    /// Applies the generator: `A_t f = <b_t(x), grad> + (1/2) Tr(Lambda_t hess)`.
    pub fn generator_apply(
        &self,
        t: f64,
        x: &DVector<f64>,
        grad: &DVector<f64>,
        hess: &DMatrix<f64>,
    ) -> Result<f64> {
        if grad.len() != self.dim || hess.nrows() != self.dim || hess.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: grad.len().max(hess.nrows()),
                context: "generator_apply",
            });
        }
        let b = self.drift_eval(t, x)?;
        let lambda = self.diffusion.at(t, self.dim);
        let mut trace = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                trace += lambda[(i, j)] * hess[(j, i)];
            }
        }
        Ok(b.dot(grad) + 0.5 * trace)
    }

    /// Content digest for dataset provenance.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!(
            "diffusion:dim={};T={:e};drift={};lambda={};init={};bound={:e}",
            self.dim,
            self.horizon,
            self.drift.describe(),
            self.diffusion.describe(),
            self.init.describe(),
            self.blow_up_bound
        ));
        hex_prefix(&h.finalize())
    }
}

pub(crate) fn hex_prefix(bytes: &[u8]) -> String {
    bytes[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// A batch of simulated trajectories on the uniform grid.
pub struct PathBatch {
    pub n_paths: usize,
    pub dim: usize,
    pub dt: f64,
    /// Time stamps `0 = t_0 < ... < t_L = T`.
    pub grid: Vec<f64>,
    /// Row-major `n_paths x (L+1) x dim`.
    pub states: Vec<f64>,
    /// Brownian increments `n_paths x L x dim`, if retained.
    pub increments: Option<Vec<f64>>,
    pub seed: u64,
    /// Indices of paths aborted at the blow-up bound.
    pub aborted: Vec<usize>,
}

impl PathBatch {
    pub fn n_steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let w = self.grid.len() * self.dim;
        let off = path * w + step * self.dim;
        &self.states[off..off + self.dim]
    }

    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let inc = self.increments.as_ref().expect("increments not retained");
        let w = self.n_steps() * self.dim;
        let off = path * w + step * self.dim;
        &inc[off..off + self.dim]
    }
}

/// Number of Euler-Maruyama steps for `horizon / dt`; errors unless `dt`
/// divides the horizon within 1e-12 relative.
pub fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter("dt must be positive".into()));
    }
    let ratio = horizon / dt;
    let l = ratio.round();
    if (ratio - l).abs() > 1e-12 * ratio.max(1.0) || l < 1.0 {
        return Err(Error::InvalidParameter(format!(
            "dt={dt} does not divide horizon={horizon}"
        )));
    }
    Ok(l as usize)
}

/// Simulates `n` Euler-Maruyama paths of the (optionally controlled) process.
///
/// `X_{l+1} = X_l + (b + pi)(t_l, X_l) dt + Lambda_{t_l}^{1/2} sqrt(dt) Z_l`.
/// Path `i` draws its initial state and Gaussian increments from a dedicated
/// stream keyed by `(seed, i)`, so results do not depend on thread scheduling.
pub fn simulate_paths(
    spec: &DiffusionSpec,
    n: usize,
    dt: f64,
    seed: u64,
    control: Option<&dyn Control>,
    retain_increments: bool,
) -> Result<PathBatch> {
    if n == 0 {
        return Err(Error::InvalidParameter("n_paths must be >= 1".into()));
    }
    let l_steps = step_count(spec.horizon, dt)?;
    let d = spec.dim;
    let mut grid: Vec<f64> = (0..=l_steps).map(|l| l as f64 * dt).collect();
    grid[l_steps] = spec.horizon;

    // Lambda_t^{1/2} at each grid node, shared across paths.
    let sqrt_lambda: Vec<Vec<f64>> = grid
        .iter()
        .map(|&t| spec.diffusion.sqrt_at(t, d))
        .collect();

    let width = (l_steps + 1) * d;
    let mut states = vec![0.0; n * width];
    let mut increments = if retain_increments {
        vec![0.0; n * l_steps * d]
    } else {
        Vec::new()
    };

    let aborted: Vec<usize> = states
        .par_chunks_mut(width)
        .zip(par_chunks_opt(&mut increments, l_steps * d, n))
        .enumerate()
        .filter_map(|(i, (row, inc_row))| {
            simulate_one(
                spec,
                i,
                seed,
                dt,
                &grid,
                &sqrt_lambda,
                control,
                row,
                inc_row,
            )
        })
        .collect();
    let mut aborted = aborted;
    aborted.sort_unstable();

    Ok(PathBatch {
        n_paths: n,
        dim: d,
        dt,
        grid,
        states,
        increments: retain_increments.then_some(increments),
        seed,
        aborted,
    })
}

/// Parallel iterator over optional mutable chunks (empty buffer => `None`s).
fn par_chunks_opt(
    buf: &mut Vec<f64>,
    chunk: usize,
    n: usize,
) -> impl IndexedParallelIterator<Item = Option<&mut [f64]>> + '_ {
    let present = !buf.is_empty();
    let chunks: Vec<Option<&mut [f64]>> = if present {
        buf.chunks_mut(chunk).map(Some).collect()
    } else {
        (0..n).map(|_| None).collect()
    };
    chunks.into_par_iter()
}

#[allow(clippy::too_many_arguments)]
fn simulate_one(
    spec: &DiffusionSpec,
    path_idx: usize,
    seed: u64,
    dt: f64,
    grid: &[f64],
    sqrt_lambda: &[Vec<f64>],
    control: Option<&dyn Control>,
    row: &mut [f64],
    mut inc_row: Option<&mut [f64]>,
) -> Option<usize> {
    let d = spec.dim;
    let l_steps = grid.len() - 1;
    let mut rng = rng::stream(seed, tag::PATH, path_idx as u64);
    {
        let mut init_rng = rng::stream(seed, tag::INIT, path_idx as u64);
        spec.init.sample_into(&mut init_rng, &mut row[0..d]);
    }
    let sqrt_dt = dt.sqrt();
    let mut b = vec![0.0; d];
    let mut a = vec![0.0; d];
    let mut z = vec![0.0; d];
    for l in 0..l_steps {
        let t = grid[l];
        let (cur, next) = row.split_at_mut((l + 1) * d);
        let x = &cur[l * d..];
        spec.drift_eval_slice(t, x, &mut b);
        if let Some(ctrl) = control {
            ctrl.action(t, x, &mut a);
        } else {
            a.fill(0.0);
        }
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let sl = &sqrt_lambda[l];
        let out = &mut next[..d];
        let mut sup = 0.0f64;
        for i in 0..d {
            let mut noise = 0.0;
            for j in 0..d {
                noise += sl[i * d + j] * z[j];
            }
            if let Some(inc) = inc_row.as_deref_mut() {
                inc[l * d + i] = sqrt_dt * z[i];
            }
            out[i] = x[i] + (b[i] + a[i]) * dt + noise * sqrt_dt;
            sup = sup.max(out[i].abs());
        }
        if !sup.is_finite() || sup > spec.blow_up_bound {
            // Freeze the remainder of the path at the last finite state.
            let frozen: Vec<f64> = row[l * d..(l + 1) * d].to_vec();
            for m in (l + 1)..=l_steps {
                row[m * d..(m + 1) * d].copy_from_slice(&frozen);
            }
            return Some(path_idx);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn ou_spec(theta: f64, sigma2: f64, x0: f64, horizon: f64) -> DiffusionSpec {
        DiffusionSpec::new(
            1,
            horizon,
            Drift::Ou {
                theta,
                mu: dvector![0.0],
            },
            DiffusionMatrix::Scalar { value: sigma2 },
            InitLaw::Point { x: dvector![x0] },
        )
        .unwrap()
    }

    #[test]
    fn drift_eval_ou() {
        let spec = ou_spec(1.0, 1.0, 0.0, 1.0);
        let b = spec.drift_eval(0.3, &dvector![2.0]).unwrap();
        assert_relative_eq!(b[0], -2.0);

        let spec = DiffusionSpec::new(
            1,
            1.0,
            Drift::Ou {
                theta: 0.5,
                mu: dvector![1.0],
            },
            DiffusionMatrix::Scalar { value: 1.0 },
            InitLaw::Point { x: dvector![0.0] },
        )
        .unwrap();
        assert_relative_eq!(spec.drift_eval(0.0, &dvector![3.0]).unwrap()[0], -1.0);
    }

    #[test]
    fn drift_eval_affine_zero() {
        let spec = DiffusionSpec::new(
            2,
            1.0,
            Drift::Affine {
                a: DMatrix::zeros(2, 2),
                c: DVector::zeros(2),
            },
            DiffusionMatrix::Scalar { value: 1.0 },
            InitLaw::Point {
                x: dvector![0.0, 0.0],
            },
        )
        .unwrap();
        let b = spec.drift_eval(0.5, &dvector![3.0, -4.0]).unwrap();
        assert_eq!(b, dvector![0.0, 0.0]);
    }

    #[test]
    fn generator_examples() {
        // b = 0, Lambda = I, f = x^2: A f = 1.
        let spec = DiffusionSpec::new(
            1,
            1.0,
            Drift::Affine {
                a: DMatrix::zeros(1, 1),
                c: DVector::zeros(1),
            },
            DiffusionMatrix::Scalar { value: 1.0 },
            InitLaw::Point { x: dvector![0.0] },
        )
        .unwrap();
        let v = spec
            .generator_apply(0.0, &dvector![1.5], &dvector![3.0], &dmatrix![2.0])
            .unwrap();
        assert_relative_eq!(v, 1.0);

        // b = -x, Lambda = I, f = x at x = 3: A f = -3.
        let spec = ou_spec(1.0, 1.0, 0.0, 1.0);
        let v = spec
            .generator_apply(0.0, &dvector![3.0], &dvector![1.0], &dmatrix![0.0])
            .unwrap();
        assert_relative_eq!(v, -3.0);

        // OU theta=1, Lambda=2, f = x^2 at x=1: <-1, 2> + 0.5*2*2 = 0.
        let spec = ou_spec(1.0, 2.0, 0.0, 1.0);
        let v = spec
            .generator_apply(0.0, &dvector![1.0], &dvector![2.0], &dmatrix![2.0])
            .unwrap();
        assert_relative_eq!(v, 0.0);
    }

    #[test]
    fn generator_dimension_mismatch() {
        let spec = ou_spec(1.0, 1.0, 0.0, 1.0);
        assert!(spec
            .generator_apply(0.0, &dvector![1.0], &dvector![1.0, 2.0], &dmatrix![0.0])
            .is_err());
    }

    #[test]
    fn degenerate_diffusion_keeps_point_mass() {
        let spec = DiffusionSpec::new_unchecked(
            1,
            1.0,
            Drift::Affine {
                a: DMatrix::zeros(1, 1),
                c: DVector::zeros(1),
            },
            DiffusionMatrix::Scalar { value: 0.0 },
            InitLaw::Point { x: dvector![1.0] },
        );
        let batch = simulate_paths(&spec, 8, 0.25, 3, None, false).unwrap();
        assert!(batch.states.iter().all(|&s| s == 1.0));
        assert!(batch.aborted.is_empty());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = ou_spec(1.0, 2.0, 0.5, 1.0);
        let a = simulate_paths(&spec, 32, 0.01, 42, None, true).unwrap();
        let b = simulate_paths(&spec, 32, 0.01, 42, None, true).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.increments, b.increments);
        let c = simulate_paths(&spec, 32, 0.01, 43, None, false).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn grid_ends_exactly_at_horizon() {
        let spec = ou_spec(1.0, 1.0, 0.0, 0.7);
        let batch = simulate_paths(&spec, 1, 0.7 / 13.0, 1, None, false).unwrap();
        assert_eq!(*batch.grid.last().unwrap(), 0.7);
        assert_eq!(batch.n_steps(), 13);
    }

    #[test]
    fn non_divisible_dt_rejected() {
        let spec = ou_spec(1.0, 1.0, 0.0, 1.0);
        assert!(simulate_paths(&spec, 1, 0.3, 1, None, false).is_err());
    }

    #[test]
    fn ou_moments_match_closed_form() {
        // m(t) = x0 e^{-theta t}, v(t) = sigma^2 (1 - e^{-2 theta t}) / (2 theta).
        let n = 100_000;
        let t = 5.0;
        let spec = ou_spec(1.0, 2.0, 0.0, t);
        let batch = simulate_paths(&spec, n, 0.01, 7, None, false).unwrap();
        let last = batch.n_steps();
        let xs: Vec<f64> = (0..n).map(|i| batch.state(i, last)[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
        let v_exact = 2.0 * (1.0 - (-2.0 * t).exp()) / 2.0;
        assert!(mean.abs() < 3.0 * (v_exact / n as f64).sqrt() + 0.01);
        assert!((var - v_exact).abs() / v_exact < 0.05);
    }

    #[test]
    fn em_weak_error_shrinks_with_dt() {
        let t: f64 = 1.0;
        let v_exact = 2.0 * (1.0 - (-2.0 * t).exp()) / 2.0;
        let n = 50_000;
        let mut errs = Vec::new();
        for dt in [1e-2, 1e-3] {
            let spec = ou_spec(1.0, 2.0, 1.0, t);
            let batch = simulate_paths(&spec, n, dt, 11, None, false).unwrap();
            let last = batch.n_steps();
            let m_exact = 1.0 * (-t as f64).exp();
            let mean = (0..n).map(|i| batch.state(i, last)[0]).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|i| (batch.state(i, last)[0] - mean).powi(2))
                .sum::<f64>()
                / (n as f64 - 1.0);
            let stderr = (v_exact / n as f64).sqrt();
            let err = (mean - m_exact).abs().max((var - v_exact).abs());
            // C dt + 3 * MC stderr with C = 2 covers the OU weak error comfortably.
            assert!(err <= 2.0 * dt + 3.0 * stderr, "dt={dt}: err={err}");
            errs.push(err);
        }
    }

    #[test]
    fn blow_up_is_reported() {
        // Unstable drift b = x^3 escapes quickly from x0 = 5.
        let spec = DiffusionSpec::new(
            1,
            4.0,
            Drift::Polynomial {
                coeffs: vec![0.0, 0.0, 0.0, 1.0],
            },
            DiffusionMatrix::Scalar { value: 0.01 },
            InitLaw::Point { x: dvector![5.0] },
        )
        .unwrap()
        .with_blow_up_bound(1e3);
        let batch = simulate_paths(&spec, 4, 0.01, 1, None, false).unwrap();
        assert_eq!(batch.aborted, vec![0, 1, 2, 3]);
        assert!(batch.states.iter().all(|s| s.is_finite()));
    }
}
