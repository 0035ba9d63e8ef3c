//! Observation datasets: per trajectory the initial state, `K`
//! uniformly-timed snapshots with noisy intermediate rewards, the terminal
//! state, and the exact terminal reward. Persisted as JSON lines with
//! 17-significant-digit floats (round-trip exact for f64).

use crate::diffusion::{simulate_paths, DiffusionSpec};
use crate::rewards::RewardSpec;
use crate::rng::{self, tag};
use crate::{Error, Result};
use rand::Rng;
use serde::Serialize;
use serde_json::Value;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Formats an f64 with 17 significant digits (round-trip exact).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct PreciseFormatter;

impl serde_json::ser::Formatter for PreciseFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serializes any value to JSON with 17-significant-digit floats.
pub fn to_json_precise<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, PreciseFormatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("serde_json emits utf-8"))
}

/// One snapshot `(t_k, x_k, R_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub t: f64,
    pub x: Vec<f64>,
    pub r: f64,
}

/// One discretely-observed trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationRecord {
    pub x0: Vec<f64>,
    /// Sorted by time (storage convention; draws are i.i.d. uniform).
    pub obs: Vec<Observation>,
    pub x_t: Vec<f64>,
    /// Exact terminal reward `y(x_T)`.
    pub y: f64,
}

/// A dataset of independent trajectory records plus generation provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationDataset {
    pub records: Vec<ObservationRecord>,
    pub dim: usize,
    pub horizon: f64,
    pub k: usize,
    pub dt: f64,
    /// Regularization strength at generation time (provenance only).
    pub alpha: f64,
    pub seed: u64,
    pub diffusion_digest: String,
    pub reward_digest: String,
}

impl ObservationDataset {
    pub fn n(&self) -> usize {
        self.records.len()
    }

    /// Refuses to pair the dataset with specs other than its generators.
    pub fn verify_provenance(&self, diff: &DiffusionSpec, reward: &RewardSpec) -> Result<()> {
        if diff.digest() != self.diffusion_digest {
            return Err(Error::SchemaMismatch(format!(
                "diffusion digest {} does not match dataset provenance {}",
                diff.digest(),
                self.diffusion_digest
            )));
        }
        if reward.digest() != self.reward_digest {
            return Err(Error::SchemaMismatch(format!(
                "reward digest {} does not match dataset provenance {}",
                reward.digest(),
                self.reward_digest
            )));
        }
        Ok(())
    }
}

/// Simulates `n` trajectories and extracts the observation records.
///
/// Per record: one fine-grid path; `K` i.i.d. `Unif[0,T]` times drawn
/// independently of the path and snapped to the nearest grid node (the
/// snapped time is stored); one noisy reward per snapshot; exact `y(x_T)`.
pub fn generate_dataset(
    diff: &DiffusionSpec,
    reward: &RewardSpec,
    n: usize,
    k: usize,
    dt: f64,
    seed: u64,
) -> Result<ObservationDataset> {
    if !reward.normalized && !reward.manufactured {
        return Err(Error::InvalidParameter(
            "dataset generation requires a normalized or manufactured reward".into(),
        ));
    }
    let batch = simulate_paths(diff, n, dt, seed, None, false)?;
    if let Some(&path) = batch.aborted.first() {
        return Err(Error::BlowUp {
            path,
            step: batch.n_steps(),
            t: diff.horizon,
            bound: diff.blow_up_bound,
        });
    }
    let last = batch.n_steps();
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut times = rng::stream(seed, tag::OBS_TIMES, i as u64);
        let mut idx: Vec<usize> = (0..k)
            .map(|_| {
                let t: f64 = times.gen_range(0.0..diff.horizon);
                ((t / dt).round() as usize).min(last)
            })
            .collect();
        idx.sort_unstable();
        let mut noise = rng::stream(seed, tag::REWARD_NOISE, i as u64);
        let mut obs = Vec::with_capacity(k);
        for &l in &idx {
            let t = batch.grid[l];
            let x = batch.state(i, l).to_vec();
            let r = reward.sample_intermediate(t, &x, &mut noise)?;
            obs.push(Observation { t, x, r });
        }
        let x_t = batch.state(i, last).to_vec();
        let y = reward.terminal_eval(&x_t)?;
        records.push(ObservationRecord {
            x0: batch.state(i, 0).to_vec(),
            obs,
            x_t,
            y,
        });
    }
    Ok(ObservationDataset {
        records,
        dim: diff.dim,
        horizon: diff.horizon,
        k,
        dt,
        alpha: 0.0,
        seed,
        diffusion_digest: diff.digest(),
        reward_digest: reward.digest(),
    })
}

fn write_vec(out: &mut String, v: &[f64]) {
    out.push('[');
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_f64(*x));
    }
    out.push(']');
}

/// Writes the dataset as JSON lines: a header object followed by one record
/// per line; snapshots are flat arrays `[t, x_1..x_d, R]`.
pub fn save_dataset(ds: &ObservationDataset, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        file,
        "{{\"schema_version\":1,\"n\":{},\"K\":{},\"T\":{},\"dt\":{},\"dim\":{},\"alpha\":{},\"seed\":{},\"diffusion_digest\":\"{}\",\"reward_digest\":\"{}\"}}",
        ds.n(),
        ds.k,
        fmt_f64(ds.horizon),
        fmt_f64(ds.dt),
        ds.dim,
        fmt_f64(ds.alpha),
        ds.seed,
        ds.diffusion_digest,
        ds.reward_digest
    )?;
    for rec in &ds.records {
        let mut line = String::new();
        line.push_str("{\"x0\":");
        write_vec(&mut line, &rec.x0);
        line.push_str(",\"obs\":[");
        for (i, ob) in rec.obs.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push('[');
            line.push_str(&fmt_f64(ob.t));
            for x in &ob.x {
                let _ = write!(line, ",{}", fmt_f64(*x));
            }
            let _ = write!(line, ",{}]", fmt_f64(ob.r));
        }
        line.push_str("],\"xT\":");
        write_vec(&mut line, &rec.x_t);
        let _ = write!(line, ",\"Y\":{}}}", fmt_f64(rec.y));
        writeln!(file, "{line}")?;
    }
    Ok(())
}

fn as_f64(v: &Value, record: usize, what: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::ParseError {
        record,
        message: format!("expected number for {what}, got {v}"),
    })
}

fn as_vec(v: &Value, record: usize, what: &str) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| Error::ParseError {
            record,
            message: format!("expected array for {what}"),
        })?
        .iter()
        .map(|x| as_f64(x, record, what))
        .collect()
}

/// Loads a dataset, validating the schema version and structural invariants.
pub fn load_dataset(path: &Path) -> Result<ObservationDataset> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header_line = lines.next().ok_or(Error::EmptyDataset)??;
    let header: Value = serde_json::from_str(&header_line).map_err(|e| Error::ParseError {
        record: 0,
        message: format!("header: {e}"),
    })?;
    let version = header["schema_version"].as_i64().unwrap_or(-1);
    if version != 1 {
        return Err(Error::SchemaMismatch(format!(
            "unsupported schema_version {version} (expected 1)"
        )));
    }
    let get = |key: &str| -> Result<f64> { as_f64(&header[key], 0, key) };
    let n = get("n")? as usize;
    let k = get("K")? as usize;
    let horizon = get("T")?;
    let dt = get("dt")?;
    let dim = get("dim")? as usize;
    let alpha = get("alpha")?;
    let seed = header["seed"].as_u64().ok_or_else(|| Error::ParseError {
        record: 0,
        message: "missing seed".into(),
    })?;
    let digest = |key: &str| -> Result<String> {
        Ok(header[key]
            .as_str()
            .ok_or_else(|| Error::ParseError {
                record: 0,
                message: format!("missing {key}"),
            })?
            .to_string())
    };

    let mut records = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let record_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| Error::ParseError {
            record: record_no,
            message: e.to_string(),
        })?;
        let x0 = as_vec(&v["x0"], record_no, "x0")?;
        let x_t = as_vec(&v["xT"], record_no, "xT")?;
        let y = as_f64(&v["Y"], record_no, "Y")?;
        let obs_raw = v["obs"].as_array().ok_or_else(|| Error::ParseError {
            record: record_no,
            message: "missing obs array".into(),
        })?;
        let mut obs = Vec::with_capacity(obs_raw.len());
        for entry in obs_raw {
            let flat = as_vec(entry, record_no, "obs entry")?;
            if flat.len() != dim + 2 {
                return Err(Error::ParseError {
                    record: record_no,
                    message: format!("obs entry length {} != dim + 2", flat.len()),
                });
            }
            let t = flat[0];
            if !(0.0..=horizon).contains(&t) {
                return Err(Error::ParseError {
                    record: record_no,
                    message: format!("observation time {t} outside [0, {horizon}]"),
                });
            }
            obs.push(Observation {
                t,
                x: flat[1..=dim].to_vec(),
                r: flat[dim + 1],
            });
        }
        if obs.len() != k || x0.len() != dim || x_t.len() != dim {
            return Err(Error::ParseError {
                record: record_no,
                message: format!(
                    "record shape mismatch (K={}, dims {}/{})",
                    obs.len(),
                    x0.len(),
                    x_t.len()
                ),
            });
        }
        records.push(ObservationRecord { x0, obs, x_t, y });
    }
    if records.len() != n {
        return Err(Error::ParseError {
            record: records.len(),
            message: format!("file truncated: header claims n={n}, found {}", records.len()),
        });
    }
    Ok(ObservationDataset {
        records,
        dim,
        horizon,
        k,
        dt,
        alpha,
        seed,
        diffusion_digest: digest("diffusion_digest")?,
        reward_digest: digest("reward_digest")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{DiffusionMatrix, Drift, InitLaw};
    use crate::rewards::{simple_reward, NoiseModel};
    use nalgebra::dvector;

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

    fn reward() -> RewardSpec {
        simple_reward(
            -1.5,
            vec![0.5],
            NoiseModel::BoundedUniform { half_width: 0.4 },
            1.0,
            true,
        )
    }

    #[test]
    fn k_zero_keeps_endpoints_only() {
        let ds = generate_dataset(&ou_spec(), &reward(), 10, 0, 0.01, 5).unwrap();
        assert_eq!(ds.n(), 10);
        assert!(ds.records.iter().all(|r| r.obs.is_empty()));
        for r in &ds.records {
            assert_eq!(r.y, 0.5 * r.x_t[0]);
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        for p in [&p1, &p2] {
            let ds = generate_dataset(&ou_spec(), &reward(), 50, 5, 0.01, 33).unwrap();
            save_dataset(&ds, p).unwrap();
        }
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn roundtrip_is_lossless() {
        let ds = generate_dataset(&ou_spec(), &reward(), 40, 7, 0.02, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(ds, back);
        assert_eq!(back.dt, 0.02);
        back.verify_provenance(&ou_spec(), &reward()).unwrap();
        assert!(back
            .verify_provenance(
                &ou_spec(),
                &simple_reward(-1.0, vec![0.0], NoiseModel::None, 1.0, true)
            )
            .is_err());
    }

    #[test]
    fn truncated_file_reports_record_index() {
        let ds = generate_dataset(&ou_spec(), &reward(), 20, 3, 0.02, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        save_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let cut: String = text.lines().take(11).collect::<Vec<_>>().join("\n");
        std::fs::write(&path, cut).unwrap();
        match load_dataset(&path) {
            Err(Error::ParseError { record, .. }) => assert_eq!(record, 10),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn mean_reward_is_unbiased_over_dataset() {
        let ds = generate_dataset(&ou_spec(), &reward(), 5000, 4, 0.01, 77).unwrap();
        let all: Vec<f64> = ds
            .records
            .iter()
            .flat_map(|r| r.obs.iter().map(|o| o.r))
            .collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let sd = 0.4 / (3.0f64).sqrt();
        assert!((mean + 1.5).abs() < 3.0 * sd / (all.len() as f64).sqrt());
    }

    #[test]
    fn observation_times_are_uniform() {
        // Kolmogorov-Smirnov against Unif[0, T], level 0.001, slack dt.
        let ds = generate_dataset(&ou_spec(), &reward(), 2000, 5, 0.01, 3).unwrap();
        let mut ts: Vec<f64> = ds
            .records
            .iter()
            .flat_map(|r| r.obs.iter().map(|o| o.t))
            .collect();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = ts.len() as f64;
        let mut d = 0.0f64;
        for (i, t) in ts.iter().enumerate() {
            let emp_hi = (i + 1) as f64 / n;
            let emp_lo = i as f64 / n;
            d = d.max((emp_hi - t).abs()).max((t - emp_lo).abs());
        }
        // K-S critical value at level 0.001 is ~1.95/sqrt(n); allow dt snapping.
        assert!(d <= 1.95 / n.sqrt() + 0.01, "KS statistic {d}");
    }

    #[test]
    fn times_uncorrelated_with_abs_state() {
        // Stationary OU (Gaussian init at the invariant law): |X_t| has a
        // time-invariant marginal, so corr(t, |x|) should vanish.
        let spec = DiffusionSpec::new(
            1,
            1.0,
            Drift::Ou {
                theta: 1.0,
                mu: dvector![0.0],
            },
            DiffusionMatrix::Scalar { value: 2.0 },
            InitLaw::Gaussian {
                mean: dvector![0.0],
                std: dvector![1.0],
            },
        )
        .unwrap();
        let ds = generate_dataset(&spec, &reward(), 4000, 3, 0.01, 9).unwrap();
        let pairs: Vec<(f64, f64)> = ds
            .records
            .iter()
            .flat_map(|r| r.obs.iter().map(|o| (o.t, o.x[0].abs())))
            .collect();
        let n = pairs.len() as f64;
        let mt = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let mx = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let mut cov = 0.0;
        let (mut vt, mut vx) = (0.0, 0.0);
        for (t, x) in &pairs {
            cov += (t - mt) * (x - mx);
            vt += (t - mt).powi(2);
            vx += (x - mx).powi(2);
        }
        let corr = cov / (vt.sqrt() * vx.sqrt());
        // stderr of a sample correlation under independence is ~1/sqrt(n);
        // the K snapshots per record share a path, inflating variance by
        // at most K, hence the sqrt(K) factor.
        assert!(corr.abs() < 4.0 * (3.0f64).sqrt() / n.sqrt(), "corr={corr}");
    }
}
