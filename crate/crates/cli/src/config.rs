//! Experiment configuration: JSON, explicit seeds, unknown keys rejected.

use anyhow::{bail, Context, Result};
use hjbfit::diffusion::{DiffusionMatrix, Drift, InitLaw};
use hjbfit::fnclass::BasisSpec;
use hjbfit::oracle::{manufactured_instance, ManufacturedInstance, OracleConfig, PotentialScaling};
use hjbfit::rewards::{IntermediateReward, NoiseModel, RewardSpec, TerminalReward};
use hjbfit::{DiffusionSpec, SolverConfig};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitConfig {
    Point { x: Vec<f64> },
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftConfig {
    Ou { theta: f64, mu: Vec<f64> },
    Affine { a: Vec<Vec<f64>>, c: Vec<f64> },
    Polynomial { coeffs: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionMatrixConfig {
    Scalar { value: f64 },
    Constant { matrix: Vec<Vec<f64>> },
    ScalarTimePoly { coeffs: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub dim: usize,
    pub drift: DriftConfig,
    pub diffusion: DiffusionMatrixConfig,
    pub init: InitConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseConfig {
    None,
    BoundedUniform { half_width: f64 },
    TwoPoint { spread: f64 },
}

impl NoiseConfig {
    fn build(&self) -> NoiseModel {
        match self {
            NoiseConfig::None => NoiseModel::None,
            NoiseConfig::BoundedUniform { half_width } => NoiseModel::BoundedUniform {
                half_width: *half_width,
            },
            NoiseConfig::TwoPoint { spread } => NoiseModel::TwoPoint { spread: *spread },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardConfig {
    /// Constant or affine intermediate reward plus a linear terminal reward.
    Simple {
        r_constant: f64,
        y_slope: Vec<f64>,
        noise: NoiseConfig,
        r_max: f64,
        bound_b: f64,
        normalized: bool,
    },
    /// The bundled manufactured 1D benchmark (overrides diffusion/basis/alpha).
    ManufacturedBenchmark,
}

/// Fully described problem: either built from the config blocks, or the
/// bundled manufactured benchmark.
pub struct Problem {
    pub diff: DiffusionSpec,
    pub reward: RewardSpec,
    pub alpha: f64,
    pub basis: BasisSpec,
    /// Reference solution when one exists (manufactured benchmark).
    pub manufactured: Option<ManufacturedInstance>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub horizon: f64,
    pub alpha: f64,
    pub diffusion: DiffusionConfig,
    pub reward: RewardConfig,
    /// Apply the policy-preserving rescaling before generation/fitting.
    #[serde(default)]
    pub rescale: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub k: usize,
    pub dt: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Probe points as `[t, x_1..x_d]` rows for oracle tables.
    pub probe_points: Vec<Vec<f64>>,
    pub n_eval: usize,
    pub dt: f64,
    pub seed: u64,
    /// Held-out cloud size for Sobolev-error quadrature.
    pub cloud_paths: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub data: DataConfig,
    /// `None` for the manufactured benchmark (which carries its own basis).
    pub basis: Option<BasisSpec>,
    pub solver: SolverConfig,
    pub oracle: OracleConfig,
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub mirror_descent: Option<MdConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdConfig {
    pub steps: usize,
    pub gamma: f64,
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).context("config is not valid JSON")?;
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(value).context("config schema validation failed")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.problem.diffusion.dim;
        if !(self.problem.horizon > 0.0) {
            bail!("problem.horizon must be positive");
        }
        if !(self.problem.alpha > 0.0) {
            bail!("problem.alpha must be positive");
        }
        match &self.problem.reward {
            RewardConfig::Simple { y_slope, .. } => {
                if y_slope.len() != d {
                    bail!("reward.y_slope length {} != dim {}", y_slope.len(), d);
                }
            }
            RewardConfig::ManufacturedBenchmark => {}
        }
        if let Some(basis) = &self.basis {
            if basis.dim != d {
                bail!("basis.dim {} != diffusion.dim {}", basis.dim, d);
            }
            if (basis.horizon - self.problem.horizon).abs() > 1e-12 {
                bail!("basis.horizon != problem.horizon");
            }
        }
        for (i, p) in self.evaluation.probe_points.iter().enumerate() {
            if p.len() != d + 1 {
                bail!("evaluation.probe_points[{i}] must be [t, x_1..x_{d}]");
            }
        }
        Ok(())
    }

    /// Instantiates the problem (diffusion, reward, basis, alpha).
    pub fn build_problem(&self) -> Result<Problem> {
        if matches!(self.problem.reward, RewardConfig::ManufacturedBenchmark) {
            let inst = manufactured_instance().map_err(anyhow::Error::from)?;
            return Ok(Problem {
                diff: (*inst.diff).clone(),
                reward: inst.reward.clone(),
                alpha: inst.alpha,
                basis: inst.basis.clone(),
                manufactured: Some(inst),
            });
        }
        let d = self.problem.diffusion.dim;
        let drift = match &self.problem.diffusion.drift {
            DriftConfig::Ou { theta, mu } => Drift::Ou {
                theta: *theta,
                mu: DVector::from_column_slice(mu),
            },
            DriftConfig::Affine { a, c } => {
                let rows = a.len();
                let flat: Vec<f64> = a.iter().flatten().copied().collect();
                Drift::Affine {
                    a: DMatrix::from_row_slice(rows, if rows > 0 { flat.len() / rows } else { 0 }, &flat),
                    c: DVector::from_column_slice(c),
                }
            }
            DriftConfig::Polynomial { coeffs } => Drift::Polynomial {
                coeffs: coeffs.clone(),
            },
        };
        let diffusion = match &self.problem.diffusion.diffusion {
            DiffusionMatrixConfig::Scalar { value } => DiffusionMatrix::Scalar { value: *value },
            DiffusionMatrixConfig::Constant { matrix } => {
                let rows = matrix.len();
                let flat: Vec<f64> = matrix.iter().flatten().copied().collect();
                DiffusionMatrix::Constant {
                    matrix: DMatrix::from_row_slice(rows, rows, &flat),
                }
            }
            DiffusionMatrixConfig::ScalarTimePoly { coeffs } => DiffusionMatrix::ScalarTimePoly {
                coeffs: coeffs.clone(),
            },
        };
        let init = match &self.problem.diffusion.init {
            InitConfig::Point { x } => InitLaw::Point {
                x: DVector::from_column_slice(x),
            },
            InitConfig::Gaussian { mean, std } => InitLaw::Gaussian {
                mean: DVector::from_column_slice(mean),
                std: DVector::from_column_slice(std),
            },
        };
        let diff = DiffusionSpec::new(d, self.problem.horizon, drift, diffusion, init)
            .map_err(anyhow::Error::from)?;
        let reward = match &self.problem.reward {
            RewardConfig::Simple {
                r_constant,
                y_slope,
                noise,
                r_max,
                bound_b,
                normalized,
            } => RewardSpec {
                intermediate: IntermediateReward::Constant { value: *r_constant },
                terminal: TerminalReward::Linear { c: y_slope.clone() },
                noise: noise.build(),
                r_max: *r_max,
                bound_b: *bound_b,
                normalized: *normalized,
                manufactured: false,
            },
            RewardConfig::ManufacturedBenchmark => unreachable!("handled above"),
        };
        let mut alpha = self.problem.alpha;
        let reward = if self.problem.rescale {
            let (scaled, a) = reward.rescale_problem(alpha).map_err(anyhow::Error::from)?;
            alpha = a;
            scaled
        } else {
            reward
        };
        let basis = self
            .basis
            .clone()
            .context("config.basis is required unless the reward is the manufactured benchmark")?;
        Ok(Problem {
            diff,
            reward,
            alpha,
            basis,
            manufactured: None,
        })
    }

    /// Content digest embedded in every report.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(self).expect("config serializes"));
        let out = h.finalize();
        out[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Applies `--override key.path=value`; the value parses as JSON when
/// possible and falls back to a string.
pub fn apply_override(root: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            match cursor {
                serde_json::Value::Object(map) => {
                    map.insert(part.to_string(), parsed);
                    return Ok(());
                }
                _ => bail!("override path '{key}' does not address an object"),
            }
        }
        cursor = match cursor {
            serde_json::Value::Object(map) => map
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default())),
            _ => bail!("override path '{key}' does not address an object"),
        };
    }
    bail!("empty override key")
}

/// Potential-scaling tag as text for report envelopes.
pub fn scaling_tag(s: PotentialScaling) -> &'static str {
    match s {
        PotentialScaling::AlphaR => "alpha_r",
        PotentialScaling::ROverAlpha => "r_over_alpha",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn bundled(name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
    }

    #[test]
    fn bundled_configs_load_and_build() {
        for name in ["manufactured_small.json", "ou_example.json"] {
            let cfg = ExperimentConfig::load(&bundled(name), &[]).unwrap();
            let problem = cfg.build_problem().unwrap();
            assert!(problem.alpha > 0.0);
            assert_eq!(problem.basis.dim, problem.diff.dim);
        }
    }

    #[test]
    fn overrides_replace_nested_values() {
        let overrides = vec![
            ("data.n".to_string(), "123".to_string()),
            ("problem.alpha".to_string(), "2.5".to_string()),
        ];
        let cfg = ExperimentConfig::load(&bundled("ou_example.json"), &overrides).unwrap();
        assert_eq!(cfg.data.n, 123);
        assert_eq!(cfg.problem.alpha, 2.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let overrides = vec![("data.unknown_field".to_string(), "1".to_string())];
        assert!(ExperimentConfig::load(&bundled("ou_example.json"), &overrides).is_err());
    }

    #[test]
    fn cross_field_validation_catches_bad_alpha_and_probe_shapes() {
        let bad_alpha = vec![("problem.alpha".to_string(), "-1.0".to_string())];
        assert!(ExperimentConfig::load(&bundled("ou_example.json"), &bad_alpha).is_err());
        let bad_probe = vec![(
            "evaluation.probe_points".to_string(),
            "[[0.5]]".to_string(),
        )];
        assert!(ExperimentConfig::load(&bundled("ou_example.json"), &bad_probe).is_err());
    }

    #[test]
    fn digest_changes_with_content() {
        let a = ExperimentConfig::load(&bundled("ou_example.json"), &[]).unwrap();
        let b = ExperimentConfig::load(
            &bundled("ou_example.json"),
            &[("data.seed".to_string(), "99".to_string())],
        )
        .unwrap();
        assert_eq!(a.digest(), a.digest());
        assert_ne!(a.digest(), b.digest());
    }
}
