//! One-parameter sweeps.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ExperimentFile;
use crate::experiments::{run_experiment, write_outputs, ExperimentResult};
use crate::io::write_atomic;

/// Bad command-line usage; the binary exits with status 2.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const SEARCH: [&[&str]; 3] = [&["run"], &["run", "policy"], &["task", "generate"]];

fn lookup<'a>(root: &'a mut Value, path: &[&str]) -> Option<&'a mut Value> {
    path.iter().try_fold(root, |v, k| v.get_mut(*k))
}

/// `exp` with every field named `axis` set to `value`.
///
/// A bare name is looked up in `run`, `run.policy` and `task.generate`, and
/// all matches are set (so `clients` moves the task and the run together);
/// a dotted name addresses one field from the root.
pub fn apply_axis(exp: &ExperimentFile, axis: &str, value: f64) -> Result<ExperimentFile, UsageError> {
    let mut root = serde_json::to_value(exp).expect("experiment serializes");
    let paths: Vec<Vec<&str>> = if axis.contains('.') {
        vec![axis.split('.').collect()]
    } else {
        SEARCH
            .iter()
            .map(|p| p.iter().copied().chain([axis]).collect())
            .collect()
    };
    let mut hits = 0;
    for path in &paths {
        let Some(slot) = lookup(&mut root, path) else {
            continue;
        };
        hits += 1;
        *slot = match slot {
            Value::Number(n) if n.is_u64() || n.is_i64() => {
                if value.fract() != 0.0 || value < 0.0 {
                    return Err(UsageError(format!(
                        "axis `{axis}` takes non-negative integers, got {value}"
                    )));
                }
                Value::from(value as u64)
            }
            Value::Number(_) => Value::from(value),
            other => {
                return Err(UsageError(format!(
                    "axis `{axis}` is not numeric (current value {other})"
                )))
            }
        };
    }
    if hits == 0 {
        return Err(UsageError(format!(
            "no field named `{axis}` in run, run.policy or task.generate"
        )));
    }
    serde_json::from_value(root).map_err(|e| UsageError(format!("setting `{axis}` to {value}: {e}")))
}

pub fn parse_values(list: &str) -> Result<Vec<f64>, UsageError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| UsageError(format!("sweep value `{s}` is not a number")))
        })
        .collect::<Result<Vec<_>, _>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(UsageError("no sweep values".into()))
            } else {
                Ok(v)
            }
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub final_mean: f64,
    pub slope: f64,
    pub energy: f64,
    pub diverged: usize,
    pub passed: bool,
}

/// Run `exp` once per value; with `out`, each point's files go to
/// `out/<axis>=<value>/` and the table to `out/sweep_<axis>.csv`.
pub fn sweep(
    exp: &ExperimentFile,
    axis: &str,
    values: &[f64],
    workers: Option<usize>,
    out: Option<&Path>,
) -> anyhow::Result<(Vec<SweepRow>, Vec<ExperimentResult>)> {
    let points = values
        .iter()
        .map(|&v| apply_axis(exp, axis, v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for (&value, point) in values.iter().zip(&points) {
        let task = point.build_task()?;
        let result = run_experiment(point, &task, workers)?;
        if let Some(dir) = out {
            write_outputs(&result, &dir.join(format!("{axis}={value}")))?;
        }
        let s = &result.summary;
        rows.push(SweepRow {
            value,
            final_mean: s.final_mean.unwrap_or(f64::NAN),
            slope: s.slope.unwrap_or(f64::NAN),
            energy: s.energy.unwrap_or(f64::NAN),
            diverged: result.diverged(),
            passed: s.passed,
        });
        results.push(result);
    }
    if let Some(dir) = out {
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        write_atomic(&dir.join(format!("sweep_{axis}.csv")), &buf)?;
    }
    Ok((rows, results))
}

pub fn format_table(axis: &str, rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{axis:>12} {:>12} {:>8} {:>12} {:>8}\n",
        "final_mean", "slope", "energy", "diverged"
    );
    for r in rows {
        s.push_str(&format!(
            "{:>12} {:>12.4e} {:>8.3} {:>12.4e} {:>8}\n",
            r.value, r.final_mean, r.slope, r.energy, r.diverged
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{theorem_experiment, STANDARD_ROUNDS};
    use noisy_fedavg::analysis::BoundVariant;
    use noisy_fedavg::channel::NoiseDistribution;
    use noisy_fedavg::policy::PolicyKind;

    fn base() -> ExperimentFile {
        theorem_experiment(BoundVariant::Thm3, NoiseDistribution::Gaussian)
    }

    #[test]
    fn bare_axis_sets_policy_field() {
        let e = apply_axis(&base(), "nu", 100.0).unwrap();
        assert_eq!(e.run.policy, PolicyKind::Theorem3Mdt { nu: 100.0 });
    }

    #[test]
    fn clients_moves_task_and_run() {
        let e = apply_axis(&base(), "clients", 20.0).unwrap();
        assert_eq!(e.run.clients, 20);
        match e.task {
            crate::config::TaskSource::Generate(spec) => assert_eq!(spec.clients, 20),
            _ => unreachable!(),
        }
        assert_eq!(apply_axis(&base(), "rounds", 100.0).unwrap().run.rounds, 100);
        assert_eq!(base().run.rounds, STANDARD_ROUNDS);
    }

    #[test]
    fn dotted_path_and_errors() {
        let e = apply_axis(&base(), "run.noise_multiplier", 2.0).unwrap();
        assert_eq!(e.run.noise_multiplier, 2.0);
        assert!(apply_axis(&base(), "mode", 1.0).unwrap_err().0.contains("not numeric"));
        assert!(apply_axis(&base(), "nope", 1.0).is_err());
        assert!(apply_axis(&base(), "rounds", 1.5).is_err());
        assert_eq!(parse_values("1, 10,100").unwrap(), vec![1.0, 10.0, 100.0]);
        assert!(parse_values("1,x").is_err());
        assert!(parse_values("").is_err());
    }
}
