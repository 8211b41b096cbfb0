//! Experiment grids: distillation, noise robustness, two-headed transfer and
//! ablations. Every cell is one config; every (cell, seed) is one job.

use std::path::{Path, PathBuf};

use jacmatch::losses::{JacobianMode, PoolWindow};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::report::{aggregate, Stat, Summary};
use crate::train::{prepare, run_dir, train_seed, RunResult, TrainOptions};

/// Weight of every active term in transfer runs.
pub const TRANSFER_WEIGHT: f64 = 10.0;

/// Distillation methods: `(key, row label, [alpha, beta, gamma])`.
pub const DISTILL_METHODS: [(&str, &str, [f64; 3]); 6] = [
    ("ce", "Cross-Entropy (CE) training", [1.0, 0.0, 0.0]),
    ("ce+act", "CE + match activations", [1.0, 1.0, 0.0]),
    ("ce+jac", "CE + match Jacobians", [1.0, 0.0, 1.0]),
    ("ce+act+jac", "CE + match {activations + Jacobians}", [1.0, 1.0, 1.0]),
    ("act-only", "Match activations only", [0.0, 1.0, 0.0]),
    ("act+jac", "Match {activations + Jacobians}", [0.0, 1.0, 1.0]),
];

/// Transfer methods: `(key, row label, [beta, gamma, attention], oracle)`.
/// Cross-entropy on the target head is always on.
pub const TRANSFER_METHODS: [(&str, &str, [f64; 3], bool); 6] = [
    ("ce", "Cross-Entropy (CE) training on untrained student network", [0.0, 0.0, 0.0], false),
    ("oracle", "CE on pre-trained student network (Oracle)", [0.0, 0.0, 0.0], true),
    ("ce+act", "CE + match activations", [1.0, 0.0, 0.0], false),
    ("ce+act+jac", "CE + match {activations + Jacobians}", [1.0, 1.0, 0.0], false),
    ("ce+act+att", "CE + match {activations + attention}", [1.0, 0.0, 1.0], false),
    ("ce+act+att+jac", "CE + match {activations + attention + Jacobians}", [1.0, 1.0, 1.0], false),
];

/// Pool windows of the window ablation.
pub const WINDOW_AXIS: [PoolWindow; 5] = [
    PoolWindow::Full,
    PoolWindow::Fraction(3),
    PoolWindow::Fraction(5),
    PoolWindow::Fraction(7),
    PoolWindow::None,
];

pub fn distill_method(key: &str) -> CliResult<(&'static str, [f64; 3])> {
    DISTILL_METHODS
        .iter()
        .find(|m| m.0 == key)
        .map(|m| (m.1, m.2))
        .ok_or_else(|| CliError::Config(format!("unknown distillation method {key}")))
}

pub fn transfer_method(key: &str) -> CliResult<(&'static str, [f64; 3], bool)> {
    TRANSFER_METHODS
        .iter()
        .find(|m| m.0 == key)
        .map(|m| (m.1, m.2, m.3))
        .ok_or_else(|| CliError::Config(format!("unknown transfer method {key}")))
}

/// One training config placed at `(row, column)` of a table.
#[derive(Debug, Clone)]
pub struct Cell {
    pub row: String,
    pub column: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub row: String,
    pub column: String,
    pub runs: Vec<RunResult>,
    pub summary: Summary,
}

/// Row-by-column table of mean ± std values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub values: Vec<Vec<Option<Stat>>>,
}

impl Table {
    fn new(rows: Vec<String>, columns: Vec<String>) -> Self {
        let values = vec![vec![None; columns.len()]; rows.len()];
        Table { rows, columns, values }
    }

    fn set(&mut self, row: &str, column: &str, v: Stat) {
        let r = self.rows.iter().position(|x| x == row).expect("known row");
        let c = self.columns.iter().position(|x| x == column).expect("known column");
        self.values[r][c] = Some(v);
    }

    pub fn get(&self, row: &str, column: &str) -> Option<Stat> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.columns.iter().position(|x| x == column)?;
        self.values[r][c]
    }

    /// One line per row; each column becomes `<column> mean` and
    /// `<column> std`.
    pub fn write_csv(&self, path: &Path) -> CliResult<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["method".to_string()];
        for c in &self.columns {
            header.push(format!("{c} mean"));
            header.push(format!("{c} std"));
        }
        w.write_record(&header)?;
        for (r, row) in self.rows.iter().enumerate() {
            let mut rec = vec![row.clone()];
            for v in &self.values[r] {
                match v {
                    Some(s) => {
                        rec.push(s.mean.to_string());
                        rec.push(s.std.to_string());
                    }
                    None => {
                        rec.push(String::new());
                        rec.push(String::new());
                    }
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn slug(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

fn cell_dir(out_dir: &Path, i: usize, cell: &Cell) -> PathBuf {
    out_dir.join("cells").join(format!("{i:02}-{}", slug(&format!("{} {}", cell.row, cell.column))))
}

/// Validates every cell, then trains all `(cell, seed)` jobs on a pool of
/// `jobs` threads. Writes `runs.csv` with one line per job.
pub fn run_cells(cells: &[Cell], out_dir: &Path, jobs: usize, opts: TrainOptions) -> CliResult<Vec<CellResult>> {
    for c in cells {
        prepare(&c.config, c.config.seeds[0]).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{} / {}: {m}", c.row, c.column)),
            other => other,
        })?;
    }
    std::fs::create_dir_all(out_dir)?;
    let work: Vec<(usize, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.config.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let done: Vec<CliResult<Option<RunResult>>> = pool.install(|| {
        work.par_iter()
            .map(|&(i, s)| {
                let dir = cell_dir(out_dir, i, &cells[i]);
                train_seed(&cells[i].config, s, &run_dir(&dir, s), opts)
            })
            .collect()
    });
    let mut per_cell: Vec<Vec<RunResult>> = vec![Vec::new(); cells.len()];
    for ((i, _), r) in work.iter().zip(done) {
        if let Some(r) = r? {
            per_cell[*i].push(r);
        }
    }
    let mut out = Vec::new();
    let mut w = csv::Writer::from_path(out_dir.join("runs.csv"))?;
    w.write_record(["method", "column", "config_hash", "seed", "test_accuracy", "param_digest"])?;
    for (i, (cell, runs)) in cells.iter().zip(per_cell).enumerate() {
        if runs.is_empty() {
            continue;
        }
        let dir = cell_dir(out_dir, i, cell);
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cell.config)?)?;
        let summary = aggregate(&runs)?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        for r in &runs {
            w.write_record([
                cell.row.clone(),
                cell.column.clone(),
                r.config_hash.clone(),
                r.seed.to_string(),
                r.test_accuracy.to_string(),
                r.param_digest.clone(),
            ])?;
        }
        out.push(CellResult {
            row: cell.row.clone(),
            column: cell.column.clone(),
            runs,
            summary,
        });
    }
    w.flush()?;
    Ok(out)
}

/// Per-class subset size of a distillation column; `None` is the full set.
pub fn subset_label(n: Option<usize>) -> String {
    match n {
        Some(n) => format!("n={n}"),
        None => "n=full".into(),
    }
}

/// Distillation accuracy per method (rows) and per-class subset size
/// (columns). The base config must name a teacher checkpoint.
pub fn distill_grid(
    base: &ExperimentConfig,
    subsets: &[Option<usize>],
    methods: &[&str],
    out_dir: &Path,
    jobs: usize,
    opts: TrainOptions,
) -> CliResult<(Table, Vec<CellResult>)> {
    if base.teacher.is_none() {
        return Err(CliError::Config("distill-grid needs a pretrained teacher checkpoint".into()));
    }
    let methods: Vec<(&str, [f64; 3])> = methods.iter().map(|m| distill_method(m)).collect::<CliResult<_>>()?;
    let mut cells = Vec::new();
    for &(label, [a, b, g]) in &methods {
        for &n in subsets {
            let mut cfg = base.clone();
            cfg.subset_per_class = n;
            cfg.loss.alpha = a;
            cfg.loss.beta = b;
            cfg.loss.gamma = g;
            cfg.name = format!("{label} | {}", subset_label(n));
            cfg.validate()?;
            cells.push(Cell {
                row: label.into(),
                column: subset_label(n),
                config: cfg,
            });
        }
    }
    let results = run_cells(&cells, out_dir, jobs, opts)?;
    let mut table = Table::new(
        methods.iter().map(|m| m.0.to_string()).collect(),
        subsets.iter().map(|&n| subset_label(n)).collect(),
    );
    for r in &results {
        table.set(&r.row, &r.column, r.summary.accuracy);
    }
    table.write_csv(&out_dir.join("table.csv"))?;
    Ok((table, results))
}

pub fn lambda_label(l: f64) -> String {
    format!("lambda={l}")
}

pub fn sigma_label(s: f64) -> String {
    format!("sigma={s}")
}

/// Accuracy under test noise (columns) for each Jacobian-norm penalty
/// weight (rows).
pub fn robustness_grid(
    base: &ExperimentConfig,
    lambdas: &[f64],
    sigmas: &[f64],
    out_dir: &Path,
    jobs: usize,
    opts: TrainOptions,
) -> CliResult<(Table, Vec<CellResult>)> {
    let mut cells = Vec::new();
    for &l in lambdas {
        let mut cfg = base.clone();
        cfg.loss.jac_norm = l;
        cfg.test_sigmas = sigmas.to_vec();
        cfg.name = lambda_label(l);
        cfg.validate()?;
        cells.push(Cell {
            row: lambda_label(l),
            column: "robustness".into(),
            config: cfg,
        });
    }
    let results = run_cells(&cells, out_dir, jobs, opts)?;
    let mut table = Table::new(
        lambdas.iter().map(|&l| lambda_label(l)).collect(),
        sigmas.iter().map(|&s| sigma_label(s)).collect(),
    );
    for r in &results {
        for (s, st) in &r.summary.robustness {
            table.set(&r.row, &sigma_label(*s), *st);
        }
    }
    table.write_csv(&out_dir.join("table.csv"))?;
    Ok((table, results))
}

pub fn tap_label(t: (usize, usize)) -> String {
    format!("jacobian loss reduction % taps ({},{})", t.0, t.1)
}

fn accuracy_and_reduction(results: &[CellResult], rows: Vec<String>, taps: &[(usize, usize)], out: &Path) -> CliResult<Table> {
    let mut columns = vec!["accuracy".to_string()];
    columns.extend(taps.iter().map(|&t| tap_label(t)));
    let mut table = Table::new(rows, columns);
    for r in results {
        table.set(&r.row, "accuracy", r.summary.accuracy);
        for j in &r.summary.jacobian_reduction {
            let col = tap_label((j.teacher_tap, j.student_tap));
            if table.columns.contains(&col) {
                table.set(&r.row, &col, j.percent);
            }
        }
    }
    table.write_csv(out)?;
    Ok(table)
}

fn transfer_config(base: &ExperimentConfig, key: &str, oracle: Option<&Path>) -> CliResult<Option<(String, ExperimentConfig)>> {
    let (label, [b, g, att], is_oracle) = transfer_method(key)?;
    let mut cfg = base.clone();
    if is_oracle {
        match oracle {
            Some(p) => cfg.student.init_from = Some(p.to_path_buf()),
            None => return Ok(None),
        }
    }
    cfg.loss.alpha = TRANSFER_WEIGHT;
    cfg.loss.beta = TRANSFER_WEIGHT * b;
    cfg.loss.gamma = TRANSFER_WEIGHT * g;
    cfg.loss.attention = TRANSFER_WEIGHT * att;
    cfg.loss.jac_strategy.mode = JacobianMode::MaxAttentionPixel;
    cfg.name = label.into();
    cfg.validate()?;
    Ok(Some((label.into(), cfg)))
}

fn check_transfer_base(base: &ExperimentConfig) -> CliResult<()> {
    if !base.student.two_headed || base.teacher.is_none() {
        return Err(CliError::Config("transfer needs a two-headed student and a source-task teacher".into()));
    }
    if base.loss.tap_pairs.is_empty() {
        return Err(CliError::Config("transfer needs at least one tap pair".into()));
    }
    Ok(())
}

/// Two-headed transfer: target-head accuracy and Jacobian-loss reduction
/// per tap pair for each method. The oracle row needs a source-task
/// checkpoint of the student architecture and is skipped without one.
pub fn transfer_grid(
    base: &ExperimentConfig,
    methods: &[&str],
    oracle: Option<&Path>,
    out_dir: &Path,
    jobs: usize,
    opts: TrainOptions,
) -> CliResult<(Table, Vec<CellResult>)> {
    check_transfer_base(base)?;
    let mut cells = Vec::new();
    for key in methods {
        if let Some((label, cfg)) = transfer_config(base, key, oracle)? {
            cells.push(Cell {
                row: label,
                column: "transfer".into(),
                config: cfg,
            });
        }
    }
    let rows = cells.iter().map(|c| c.row.clone()).collect();
    let results = run_cells(&cells, out_dir, jobs, opts)?;
    let table = accuracy_and_reduction(&results, rows, &base.loss.tap_pairs, &out_dir.join("table.csv"))?;
    Ok((table, results))
}

#[derive(Debug, Clone, PartialEq)]
pub enum AblationAxis {
    /// One run per `(teacher tap, student tap)` pair.
    TapDepth(Vec<(usize, usize)>),
    /// One run per pool window at the base tap pairs.
    PoolWindow(Vec<PoolWindow>),
}

/// Full transfer method (activations, attention and Jacobians at weight
/// 10) swept over one axis.
pub fn ablate(
    base: &ExperimentConfig,
    axis: &AblationAxis,
    out_dir: &Path,
    jobs: usize,
    opts: TrainOptions,
) -> CliResult<(Table, Vec<CellResult>)> {
    check_transfer_base(base)?;
    let (_, full) = transfer_config(base, "ce+act+att+jac", None)?.expect("not the oracle row");
    let mut cells = Vec::new();
    let mut taps = Vec::new();
    match axis {
        AblationAxis::TapDepth(pairs) => {
            for &p in pairs {
                let mut cfg = full.clone();
                cfg.loss.tap_pairs = vec![p];
                let row = format!("taps ({},{})", p.0, p.1);
                cfg.name = row.clone();
                cells.push(Cell {
                    row,
                    column: "ablation".into(),
                    config: cfg,
                });
                taps.push(p);
            }
        }
        AblationAxis::PoolWindow(windows) => {
            for &w in windows {
                let mut cfg = full.clone();
                cfg.loss.jac_strategy.pool_window = Some(w);
                let row = format!("window {}", w.label());
                cfg.name = row.clone();
                cells.push(Cell {
                    row,
                    column: "ablation".into(),
                    config: cfg,
                });
            }
            taps = base.loss.tap_pairs.clone();
        }
    }
    let rows = cells.iter().map(|c| c.row.clone()).collect();
    let results = run_cells(&cells, out_dir, jobs, opts)?;
    let table = accuracy_and_reduction(&results, rows, &taps, &out_dir.join("table.csv"))?;
    Ok((table, results))
}

/// Parses `full`, `none`, `s/N` or a pixel count.
pub fn parse_window(s: &str) -> CliResult<PoolWindow> {
    match s {
        "full" => Ok(PoolWindow::Full),
        "none" => Ok(PoolWindow::None),
        _ => {
            if let Some(n) = s.strip_prefix("s/") {
                n.parse().map(PoolWindow::Fraction)
            } else {
                s.parse().map(PoolWindow::Pixels)
            }
            .map_err(|_| CliError::Config(format!("bad pool window {s}")))
        }
    }
}

/// Parses `a:b` tap pairs.
pub fn parse_tap_pair(s: &str) -> CliResult<(usize, usize)> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| CliError::Config(format!("tap pair {s} is not teacher:student")))?;
    let p = |v: &str| v.trim().parse().map_err(|_| CliError::Config(format!("bad tap index {v}")));
    Ok((p(a)?, p(b)?))
}
