//! The convex approximating class: a ball-constrained linear span of a
//! tensor basis, Legendre polynomials in time times smooth spatial features,
//! with analytic time derivative, gradient, and Hessian.

use crate::diffusion::hex_prefix;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufReader, Write};
use std::path::Path;

/// A spatial factor `psi_j(x)`, C^2 everywhere.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpatialFeature {
    /// `prod_i x_i^{powers[i]}` (all-zero powers gives the constant feature).
    Monomial { powers: Vec<u32> },
    /// `exp(-|x - center|^2 / (2 width^2))`.
    Rbf { center: Vec<f64>, width: f64 },
}

impl SpatialFeature {
    fn check(&self, dim: usize) -> Result<()> {
        match self {
            SpatialFeature::Monomial { powers } if powers.len() != dim => {
                Err(Error::DimensionMismatch {
                    expected: dim,
                    got: powers.len(),
                    context: "monomial powers",
                })
            }
            SpatialFeature::Rbf { center, .. } if center.len() != dim => {
                Err(Error::DimensionMismatch {
                    expected: dim,
                    got: center.len(),
                    context: "rbf center",
                })
            }
            SpatialFeature::Rbf { width, .. } if !(*width > 0.0) => Err(Error::InvalidParameter(
                "rbf width must be positive".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Value, gradient, and Hessian of the spatial factor at `x`.
    fn eval(&self, x: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let d = x.len();
        match self {
            SpatialFeature::Monomial { powers } => {
                let val = monomial_partial(x, powers, None, None);
                let mut grad = DVector::zeros(d);
                let mut hess = DMatrix::zeros(d, d);
                for i in 0..d {
                    grad[i] = monomial_partial(x, powers, Some(i), None);
                    for j in 0..=i {
                        let v = monomial_partial(x, powers, Some(i), Some(j));
                        hess[(i, j)] = v;
                        hess[(j, i)] = v;
                    }
                }
                (val, grad, hess)
            }
            SpatialFeature::Rbf { center, width } => {
                let w2 = width * width;
                let mut q = 0.0;
                for i in 0..d {
                    let u = x[i] - center[i];
                    q += u * u;
                }
                let val = (-q / (2.0 * w2)).exp();
                // grad = -val (x - c)/w^2; hess = val [(x-c)(x-c)^T/w^4 - I/w^2]
                let mut grad = DVector::zeros(d);
                let mut hess = DMatrix::zeros(d, d);
                for i in 0..d {
                    let ui = x[i] - center[i];
                    grad[i] = -val * ui / w2;
                    for j in 0..=i {
                        let uj = x[j] - center[j];
                        let mut h = val * ui * uj / (w2 * w2);
                        if i == j {
                            h -= val / w2;
                        }
                        hess[(i, j)] = h;
                        hess[(j, i)] = h;
                    }
                }
                (val, grad, hess)
            }
        }
    }

    /// Value and gradient only, written into slices (hot path for policies).
    fn eval_value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        match self {
            SpatialFeature::Monomial { powers } => {
                let val = monomial_partial(x, powers, None, None);
                for i in 0..x.len() {
                    grad[i] = monomial_partial(x, powers, Some(i), None);
                }
                val
            }
            SpatialFeature::Rbf { center, width } => {
                let w2 = width * width;
                let mut q = 0.0;
                for i in 0..x.len() {
                    let u = x[i] - center[i];
                    q += u * u;
                }
                let val = (-q / (2.0 * w2)).exp();
                for i in 0..x.len() {
                    grad[i] = -val * (x[i] - center[i]) / w2;
                }
                val
            }
        }
    }
}

/// `d^a/dx_i d^b/dx_j prod x_k^{p_k}` with `a, b` given by the optional
/// derivative indices (None = no derivative in that slot).
fn monomial_partial(x: &[f64], powers: &[u32], di: Option<usize>, dj: Option<usize>) -> f64 {
    let mut out = 1.0;
    for (k, (&xk, &pk)) in x.iter().zip(powers.iter()).enumerate() {
        let mut p = pk as i64;
        let mut coeff = 1.0;
        for d in [di, dj].into_iter().flatten() {
            if d == k {
                coeff *= p as f64;
                p -= 1;
            }
        }
        if p < 0 {
            return 0.0;
        }
        out *= coeff * xk.powi(p as i32);
    }
    out
}

/// Tensor basis `phi_{(l,j)}(t,x) = P_l(2t/T - 1) psi_j(x)` with Legendre `P_l`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    /// Maximum Legendre degree `m` in time.
    pub time_degree: usize,
    pub spatial: Vec<SpatialFeature>,
    pub dim: usize,
    pub horizon: f64,
}

/// Feature blocks at one `(t, x)`: values, time derivatives, spatial
/// gradients (rows = features), and per-feature Hessians.
pub struct FeatureBlock {
    pub phi: DVector<f64>,
    pub dphi_dt: DVector<f64>,
    /// `p x d`; row `j` is `grad psi` of feature `j` times its time factor.
    pub grad: DMatrix<f64>,
    pub hess: Vec<DMatrix<f64>>,
}

impl BasisSpec {
    pub fn new(
        time_degree: usize,
        spatial: Vec<SpatialFeature>,
        dim: usize,
        horizon: f64,
    ) -> Result<Self> {
        if spatial.is_empty() {
            return Err(Error::InvalidParameter("empty spatial feature list".into()));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidParameter("horizon must be positive".into()));
        }
        for f in &spatial {
            f.check(dim)?;
        }
        Ok(Self {
            time_degree,
            spatial,
            dim,
            horizon,
        })
    }

    /// Total feature count `p = (m + 1) * #spatial`.
    pub fn len(&self) -> usize {
        (self.time_degree + 1) * self.spatial.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat index of the (time degree `l`, spatial `j`) tensor feature.
    pub fn index(&self, l: usize, j: usize) -> usize {
        l * self.spatial.len() + j
    }

    /// Legendre values `P_l(s)` and derivatives `P'_l(s)` for `s = 2t/T - 1`.
    fn legendre(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let s = 2.0 * t / self.horizon - 1.0;
        let m = self.time_degree;
        let mut p = vec![0.0; m + 1];
        let mut dp = vec![0.0; m + 1];
        p[0] = 1.0;
        if m >= 1 {
            p[1] = s;
            dp[1] = 1.0;
        }
        for l in 1..m {
            let lf = l as f64;
            p[l + 1] = ((2.0 * lf + 1.0) * s * p[l] - lf * p[l - 1]) / (lf + 1.0);
            dp[l + 1] = dp[l - 1] + (2.0 * lf + 1.0) * p[l];
        }
        (p, dp)
    }

    /// All feature blocks at `(t, x)`.
    pub fn features(&self, t: f64, x: &[f64]) -> FeatureBlock {
        let d = self.dim;
        let ns = self.spatial.len();
        let p_total = self.len();
        let (pl, dpl) = self.legendre(t);
        let chain = 2.0 / self.horizon; // ds/dt

        let spatial: Vec<(f64, DVector<f64>, DMatrix<f64>)> =
            self.spatial.iter().map(|f| f.eval(x)).collect();

        let mut phi = DVector::zeros(p_total);
        let mut dphi_dt = DVector::zeros(p_total);
        let mut grad = DMatrix::zeros(p_total, d);
        let mut hess = Vec::with_capacity(p_total);
        for l in 0..=self.time_degree {
            for (j, (v, g, h)) in spatial.iter().enumerate() {
                let idx = l * ns + j;
                phi[idx] = pl[l] * v;
                dphi_dt[idx] = chain * dpl[l] * v;
                for i in 0..d {
                    grad[(idx, i)] = pl[l] * g[i];
                }
                hess.push(h * pl[l]);
            }
        }
        FeatureBlock {
            phi,
            dphi_dt,
            grad,
            hess,
        }
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(self).expect("basis serializes"));
        hex_prefix(&h.finalize())
    }
}

/// A member of the class: coefficients over a [`BasisSpec`] with a ball bound.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueModel {
    pub basis: BasisSpec,
    pub theta: Vec<f64>,
    pub ball_radius: f64,
}

impl ValueModel {
    pub fn new(basis: BasisSpec, theta: Vec<f64>, ball_radius: f64) -> Result<Self> {
        if theta.len() != basis.len() {
            return Err(Error::DimensionMismatch {
                expected: basis.len(),
                got: theta.len(),
                context: "model coefficients",
            });
        }
        if !(ball_radius > 0.0) {
            return Err(Error::InvalidParameter("ball_radius must be positive".into()));
        }
        let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > ball_radius + 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "coefficient norm {norm} exceeds ball radius {ball_radius}"
            )));
        }
        Ok(Self {
            basis,
            theta,
            ball_radius,
        })
    }

    pub fn zero(basis: BasisSpec, ball_radius: f64) -> Self {
        let p = basis.len();
        Self {
            basis,
            theta: vec![0.0; p],
            ball_radius,
        }
    }

    pub fn theta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta)
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        let fb = self.basis.features(t, x);
        self.theta_vector().dot(&fb.phi)
    }

    pub fn dt(&self, t: f64, x: &[f64]) -> f64 {
        let fb = self.basis.features(t, x);
        self.theta_vector().dot(&fb.dphi_dt)
    }

    pub fn grad_x(&self, t: f64, x: &[f64]) -> DVector<f64> {
        let fb = self.basis.features(t, x);
        fb.grad.transpose() * self.theta_vector()
    }

    pub fn hess_x(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        let fb = self.basis.features(t, x);
        let d = self.basis.dim;
        let mut out = DMatrix::zeros(d, d);
        for (th, h) in self.theta.iter().zip(fb.hess.iter()) {
            out += h * *th;
        }
        out
    }

    /// Value and gradient without allocating the full feature block
    /// (policy-evaluation hot path).
    pub fn eval_value_grad(&self, t: f64, x: &[f64], grad_out: &mut [f64]) -> f64 {
        let ns = self.basis.spatial.len();
        let (pl, _) = self.basis.legendre(t);
        grad_out.fill(0.0);
        let mut val = 0.0;
        let mut g = vec![0.0; x.len()];
        for (j, feat) in self.basis.spatial.iter().enumerate() {
            let v = feat.eval_value_grad(x, &mut g);
            // Sum the time factors weighted by theta across degrees.
            let mut w = 0.0;
            for l in 0..=self.basis.time_degree {
                w += self.theta[l * ns + j] * pl[l];
            }
            val += w * v;
            for i in 0..x.len() {
                grad_out[i] += w * g[i];
            }
        }
        val
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(crate::dataset::to_json_precise(self).expect("model serializes"));
        hex_prefix(&h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(crate::dataset::to_json_precise(self)?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let model: ValueModel = serde_json::from_reader(BufReader::new(f))?;
        ValueModel::new(model.basis, model.theta, model.ball_radius)
    }
}

/// Euclidean projection of `theta` onto the ball of radius `rho`.
pub fn project_ball(theta: &DVector<f64>, rho: f64) -> DVector<f64> {
    let n = theta.norm();
    if n <= rho {
        theta.clone()
    } else {
        theta * (rho / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn basis_1d() -> BasisSpec {
        BasisSpec::new(
            3,
            vec![
                SpatialFeature::Monomial { powers: vec![0] },
                SpatialFeature::Monomial { powers: vec![1] },
                SpatialFeature::Rbf {
                    center: vec![0.5],
                    width: 0.8,
                },
            ],
            1,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn legendre_values_at_midpoint() {
        // P_0 = 1, P_1(0) = 0, P_2(0) = -1/2 at t = T/2.
        let basis = basis_1d();
        let fb = basis.features(0.5, &[0.0]);
        assert_relative_eq!(fb.phi[basis.index(0, 0)], 1.0);
        assert_relative_eq!(fb.phi[basis.index(1, 0)], 0.0);
        assert_relative_eq!(fb.phi[basis.index(2, 0)], -0.5);
    }

    #[test]
    fn constant_feature_has_zero_grad_and_dt() {
        let basis = basis_1d();
        let model = {
            let mut theta = vec![0.0; basis.len()];
            theta[basis.index(0, 0)] = 1.0;
            ValueModel::new(basis, theta, 2.0).unwrap()
        };
        for (t, x) in [(0.1, -1.0), (0.9, 2.0)] {
            assert_relative_eq!(model.eval(t, &[x]), 1.0);
            assert_relative_eq!(model.grad_x(t, &[x])[0], 0.0);
            assert_relative_eq!(model.dt(t, &[x]), 0.0);
        }
    }

    #[test]
    fn rbf_at_center() {
        let w = 0.8;
        let feat = SpatialFeature::Rbf {
            center: vec![0.5, -0.25],
            width: w,
        };
        let (v, g, h) = feat.eval(&[0.5, -0.25]);
        assert_relative_eq!(v, 1.0);
        assert_relative_eq!(g.norm(), 0.0);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { -1.0 / (w * w) } else { 0.0 };
                assert_relative_eq!(h[(i, j)], want, epsilon = 1e-14);
            }
        }
    }

    fn random_model(seed_idx: u64) -> ValueModel {
        let basis = basis_1d();
        let p = basis.len();
        let mut rng = rng::stream(99, rng::tag::PROBE, seed_idx);
        let theta: Vec<f64> = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let v = project_ball(&DVector::from_column_slice(&theta), 3.0);
        ValueModel::new(basis, v.as_slice().to_vec(), 3.0).unwrap()
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        for idx in 0..100 {
            let model = random_model(idx);
            let mut rng = rng::stream(7, rng::tag::PROBE, idx);
            let t: f64 = rng.gen_range(0.05..0.95);
            let x: f64 = rng.gen_range(-2.0..2.0);

            let g = model.grad_x(t, &[x])[0];
            let fd_g = (model.eval(t, &[x + h]) - model.eval(t, &[x - h])) / (2.0 * h);
            assert!((g - fd_g).abs() <= 1e-6 * (1.0 + g.abs()), "grad mismatch");

            let dt = model.dt(t, &[x]);
            let fd_t = (model.eval(t + h, &[x]) - model.eval(t - h, &[x])) / (2.0 * h);
            assert!((dt - fd_t).abs() <= 1e-6 * (1.0 + dt.abs()), "dt mismatch");

            let hh = model.hess_x(t, &[x])[(0, 0)];
            let fd_h = (model.grad_x(t, &[x + h])[0] - model.grad_x(t, &[x - h])[0]) / (2.0 * h);
            assert!((hh - fd_h).abs() <= 1e-5 * (1.0 + hh.abs()), "hess mismatch");

            // Fast path agrees with the block path.
            let mut g_fast = [0.0];
            let v_fast = model.eval_value_grad(t, &[x], &mut g_fast);
            assert_relative_eq!(v_fast, model.eval(t, &[x]), epsilon = 1e-12);
            assert_relative_eq!(g_fast[0], g, epsilon = 1e-12);
        }
    }

    #[test]
    fn linearity_in_theta() {
        let basis = basis_1d();
        let p = basis.len();
        let a = random_model(1);
        let b = random_model(2);
        let mut combo = vec![0.0; p];
        for i in 0..p {
            combo[i] = 0.3 * a.theta[i] - 1.7 * b.theta[i];
        }
        let c = ValueModel {
            basis: basis.clone(),
            theta: combo,
            ball_radius: 100.0,
        };
        let (t, x) = (0.37, [1.21]);
        assert_relative_eq!(
            c.eval(t, &x),
            0.3 * a.eval(t, &x) - 1.7 * b.eval(t, &x),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            c.dt(t, &x),
            0.3 * a.dt(t, &x) - 1.7 * b.dt(t, &x),
            epsilon = 1e-12
        );
    }

    #[test]
    fn project_ball_examples() {
        let v = dvector![3.0, 4.0];
        let p = project_ball(&v, 1.0);
        assert_relative_eq!(p[0], 0.6);
        assert_relative_eq!(p[1], 0.8);
        let inside = dvector![0.1, 0.2];
        assert_eq!(project_ball(&inside, 1.0), inside);
    }

    proptest! {
        #[test]
        fn project_ball_is_idempotent_and_feasible(
            vals in proptest::collection::vec(-100.0f64..100.0, 1..8),
            rho in 0.1f64..10.0,
        ) {
            let v = DVector::from_column_slice(&vals);
            let p1 = project_ball(&v, rho);
            let p2 = project_ball(&p1, rho);
            prop_assert!(p1.norm() <= rho + 1e-9);
            prop_assert!((p1.clone() - p2).norm() <= 1e-12 * (1.0 + p1.norm()));
        }
    }

    #[test]
    fn model_roundtrip_via_json() {
        let model = random_model(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let back = ValueModel::load(&path).unwrap();
        assert_eq!(model.theta, back.theta);
        assert_eq!(model.ball_radius, back.ball_radius);
        assert_eq!(model.basis.digest(), back.basis.digest());
    }
}
