//! Multi-seed aggregation of run results.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::train::RunResult;

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// `n - 1` denominator; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std, n }
    }

    /// `mean ± std` with two decimals.
    pub fn display(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// Pooled standard deviation of two groups.
pub fn pooled_std(a: &Stat, b: &Stat) -> f64 {
    let dof = (a.n + b.n).saturating_sub(2);
    if dof == 0 {
        return 0.0;
    }
    let ss = (a.n.saturating_sub(1)) as f64 * a.std * a.std + (b.n.saturating_sub(1)) as f64 * b.std * b.std;
    (ss / dof as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapStat {
    pub teacher_tap: usize,
    pub student_tap: usize,
    pub percent: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub accuracy: Stat,
    /// `(σ, accuracy)` per test noise level.
    pub robustness: Vec<(f64, Stat)>,
    pub jacobian_reduction: Vec<TapStat>,
}

/// Averages runs of one config. Runs with different config hashes or a
/// repeated seed are refused.
pub fn aggregate(results: &[RunResult]) -> CliResult<Summary> {
    let first = results
        .first()
        .ok_or_else(|| CliError::Invariant("no results to aggregate".into()))?;
    if let Some(r) = results.iter().find(|r| r.config_hash != first.config_hash) {
        return Err(CliError::Invariant(format!(
            "config hashes differ: {} (seed {}) vs {} (seed {})",
            first.config_hash, first.seed, r.config_hash, r.seed
        )));
    }
    let mut seeds: Vec<u64> = results.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    if let Some(w) = seeds.windows(2).find(|w| w[0] == w[1]) {
        return Err(CliError::Invariant(format!("seed {} appears twice", w[0])));
    }
    let accuracy = Stat::of(&results.iter().map(|r| r.test_accuracy).collect::<Vec<_>>());
    let robustness = first
        .robustness
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let v: Vec<f64> = results.iter().map(|r| r.robustness[i].accuracy).collect();
            (p.sigma, Stat::of(&v))
        })
        .collect();
    let jacobian_reduction = first
        .jacobian_reduction
        .iter()
        .enumerate()
        .map(|(i, j)| TapStat {
            teacher_tap: j.teacher_tap,
            student_tap: j.student_tap,
            percent: Stat::of(&results.iter().map(|r| r.jacobian_reduction[i].percent).collect::<Vec<_>>()),
        })
        .collect();
    Ok(Summary {
        name: first.name.clone(),
        config_hash: first.config_hash.clone(),
        seeds,
        accuracy,
        robustness,
        jacobian_reduction,
    })
}

/// Reads `result.json` files; directories are searched recursively. Results
/// come back sorted by seed.
pub fn load_results(paths: &[PathBuf]) -> CliResult<Vec<RunResult>> {
    let mut files = Vec::new();
    for p in paths {
        collect(p, &mut files)?;
    }
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let r: RunResult = serde_json::from_str(&std::fs::read_to_string(&f)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", f.display())))?;
        out.push(r);
    }
    out.sort_by_key(|r| r.seed);
    Ok(out)
}

fn collect(p: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    if p.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(p)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            if e.is_dir() || e.file_name().is_some_and(|n| n == "result.json") {
                collect(&e, out)?;
            }
        }
    } else if p.exists() {
        out.push(p.to_path_buf());
    } else {
        return Err(CliError::Config(format!("{} does not exist", p.display())));
    }
    Ok(())
}

/// Writes a one-row-per-config CSV of the summaries.
pub fn write_summary_csv(path: &Path, summaries: &[Summary]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let sigmas: Vec<f64> = summaries
        .first()
        .map(|s| s.robustness.iter().map(|(s, _)| *s).collect())
        .unwrap_or_default();
    let mut header = vec![
        "name".to_string(),
        "config_hash".into(),
        "seeds".into(),
        "accuracy_mean".into(),
        "accuracy_std".into(),
    ];
    for s in &sigmas {
        header.push(format!("sigma={s}_mean"));
        header.push(format!("sigma={s}_std"));
    }
    w.write_record(&header)?;
    for s in summaries {
        let mut row = vec![
            s.name.clone(),
            s.config_hash.clone(),
            s.seeds.len().to_string(),
            s.accuracy.mean.to_string(),
            s.accuracy.std.to_string(),
        ];
        for (_, st) in &s.robustness {
            row.push(st.mean.to_string());
            row.push(st.std.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_matches_hand_values() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[7.0]).std, 0.0);
        let p = pooled_std(&Stat { mean: 0.0, std: 1.0, n: 5 }, &Stat { mean: 0.0, std: 3.0, n: 5 });
        assert!((p - 5.0f64.sqrt()).abs() < 1e-15);
    }
}
