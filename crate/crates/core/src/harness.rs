//! Ablation sweeps at toy scale: loss combinations, glimpse counts,
//! component ablations and parallel glimpses.
//!
//! A sweep is a list of cells (one configuration × one seed). Each finished
//! cell is written to its own CSV file, so an interrupted sweep picks up
//! where it stopped. Results are then merged into one CSV and a plain-text
//! table with medians over seeds.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{io_err, Error, Result};
use crate::heads::LossSpec;
use crate::model::RraModel;
use crate::params::ParamGroup;
use crate::rra::Variant;
use crate::trainer::{evaluate, fit_to_dataset, train, TrainConfig, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Losses,
    Glimpses,
    Components,
    Parallel,
}

impl SweepKind {
    pub const ALL: [SweepKind; 4] = [SweepKind::Losses, SweepKind::Glimpses, SweepKind::Components, SweepKind::Parallel];

    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Losses => "losses",
            SweepKind::Glimpses => "glimpses",
            SweepKind::Components => "components",
            SweepKind::Parallel => "parallel",
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep {s:?} (losses, glimpses, components, parallel)")))
    }
}

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const DEFAULT_GLIMPSES: [usize; 5] = [1, 2, 3, 4, 5];

/// Training settings the sweeps start from on the synthetic toy task.
pub fn toy_config() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        eval_every: 0,
        ..TrainConfig::default()
    }
}

/// One configuration of a sweep, before seeds are applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub label: String,
    pub config: TrainConfig,
}

pub fn arms(kind: SweepKind, base: &TrainConfig, glimpses: &[usize]) -> Result<Vec<Arm>> {
    let arm = |label: String, f: &dyn Fn(&mut TrainConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Arm { label, config }
    };
    let out = match kind {
        SweepKind::Losses => LossSpec::combinations()
            .into_iter()
            .map(|spec| arm(spec.to_string(), &|c| c.loss = spec))
            .collect(),
        SweepKind::Glimpses => {
            if glimpses.is_empty() || glimpses.contains(&0) {
                return Err(Error::Config("glimpse list must hold positive counts".into()));
            }
            glimpses
                .iter()
                .map(|&k| arm(format!("K={k}"), &|c| c.model.glimpses = k))
                .collect()
        }
        SweepKind::Components => Variant::ABLATIONS
            .into_iter()
            .chain([Variant::Full])
            .map(|v| arm(v.name().to_string(), &|c| c.model.variant = v))
            .collect(),
        SweepKind::Parallel => vec![
            arm("rra".into(), &|c| c.model.parallel = false),
            arm("parallel".into(), &|c| c.model.parallel = true),
        ],
    };
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub label: String,
    pub seed: u64,
    pub top1: f64,
    pub top1_concat: f64,
    pub mean_per_class: f64,
    pub final_loss: f64,
    /// Parameters of the attention block (attention, reduction FC, BN).
    pub rra_params: usize,
    pub total_params: usize,
    pub per_glimpse_top1: Vec<f64>,
}

const CELL_HEADER: &str = "label,seed,top1,top1_concat,mean_per_class,final_loss,rra_params,total_params,per_glimpse_top1";

impl CellResult {
    fn csv_row(&self) -> String {
        let glimpses: Vec<String> = self.per_glimpse_top1.iter().map(|a| format!("{a:.6}")).collect();
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.8},{},{},{}",
            self.label,
            self.seed,
            self.top1,
            self.top1_concat,
            self.mean_per_class,
            self.final_loss,
            self.rra_params,
            self.total_params,
            glimpses.join(";")
        )
    }

    fn parse_row(line: &str) -> Option<CellResult> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return None;
        }
        Some(CellResult {
            label: f[0].to_string(),
            seed: f[1].parse().ok()?,
            top1: f[2].parse().ok()?,
            top1_concat: f[3].parse().ok()?,
            mean_per_class: f[4].parse().ok()?,
            final_loss: f[5].parse().ok()?,
            rra_params: f[6].parse().ok()?,
            total_params: f[7].parse().ok()?,
            per_glimpse_top1: f[8]
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().ok())
                .collect::<Option<_>>()?,
        })
    }
}

/// Trains one cell from scratch and evaluates it on `data.test`.
pub fn run_cell(label: &str, config: &TrainConfig, data: &Dataset) -> Result<CellResult> {
    let mut config = config.clone();
    fit_to_dataset(&mut config, data)?;
    let mut state = TrainState::new(&config)?;
    train(&mut state, &config, data, |_, _| Ok(()))?;
    let report = evaluate(
        &mut state.model,
        &data.test,
        config.model.num_classes,
        &config.eval,
        &config.augment_spec(),
    )?;
    Ok(CellResult {
        label: label.to_string(),
        seed: config.seed,
        top1: report.top1,
        top1_concat: report.top1_concat,
        mean_per_class: report.mean_per_class,
        final_loss: state.history.last().map_or(f64::NAN, |r| r.train_loss),
        rra_params: block_params(&state.model),
        total_params: state.model.store.total(),
        per_glimpse_top1: report.per_glimpse_top1,
    })
}

fn block_params(model: &RraModel) -> usize {
    model.store.count(ParamGroup::Attention) + model.store.count(ParamGroup::Reduction)
}

/// Parameter counts (attention block, whole model) without training.
pub fn parameter_counts(config: &TrainConfig) -> Result<(usize, usize)> {
    let model = RraModel::new(config.model.clone(), config.seed)?;
    Ok((block_params(&model), model.store.total()))
}

/// Worker threads for sweeps: `RRA_THREADS` when set, else 1.
pub fn thread_count() -> usize {
    std::env::var("RRA_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct SweepPlan {
    pub kind: SweepKind,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
}

impl SweepPlan {
    pub fn new(kind: SweepKind, base: &TrainConfig, seeds: &[u64], glimpses: &[usize]) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::Config("a sweep needs at least one seed".into()));
        }
        Ok(SweepPlan {
            kind,
            arms: arms(kind, base, glimpses)?,
            seeds: seeds.to_vec(),
        })
    }

    fn cells(&self) -> Vec<(&Arm, u64)> {
        self.arms
            .iter()
            .flat_map(|a| self.seeds.iter().map(move |&s| (a, s)))
            .collect()
    }
}

fn cell_path(dir: &Path, label: &str, seed: u64) -> PathBuf {
    let safe: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    dir.join(format!("{safe}_seed{seed}.csv"))
}

fn read_cell(path: &Path, label: &str, seed: u64) -> Option<CellResult> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut lines = text.lines();
    if lines.next()? != CELL_HEADER {
        return None;
    }
    CellResult::parse_row(lines.next()?).filter(|r| r.label == label && r.seed == seed)
}

/// Runs every cell of `plan` not already recorded under
/// `out_dir/<kind>/`, on at most `threads` workers. Returns all results in
/// plan order.
pub fn run_sweep(plan: &SweepPlan, data: &Dataset, out_dir: &Path, threads: usize) -> Result<Vec<CellResult>> {
    let cell_dir = out_dir.join(plan.kind.name());
    std::fs::create_dir_all(&cell_dir).map_err(io_err(&cell_dir))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cells = plan.cells();
    pool.install(|| {
        cells
            .par_iter()
            .map(|&(arm, seed)| {
                let path = cell_path(&cell_dir, &arm.label, seed);
                if let Some(done) = read_cell(&path, &arm.label, seed) {
                    return Ok(done);
                }
                let config = TrainConfig { seed, ..arm.config.clone() };
                let result = run_cell(&arm.label, &config, data)?;
                let text = format!("{CELL_HEADER}\n{}\n", result.csv_row());
                std::fs::write(&path, text).map_err(io_err(&path))?;
                Ok(result)
            })
            .collect()
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub seeds: usize,
    pub top1: f64,
    pub top1_concat: f64,
    pub mean_per_class: f64,
    pub per_glimpse_top1: Vec<f64>,
    pub rra_params: usize,
    pub total_params: usize,
    /// Median accuracy below twice chance.
    pub non_converged: bool,
}

/// Medians over seeds, one row per arm in plan order.
pub fn summarize(plan: &SweepPlan, results: &[CellResult], num_classes: usize) -> Vec<SummaryRow> {
    let chance = 1.0 / num_classes as f64;
    plan.arms
        .iter()
        .map(|arm| {
            let rows: Vec<&CellResult> = results.iter().filter(|r| r.label == arm.label).collect();
            let med = |f: &dyn Fn(&CellResult) -> f64| median(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            let glimpses = rows.first().map_or(0, |r| r.per_glimpse_top1.len());
            let top1 = med(&|r| r.top1);
            SummaryRow {
                label: arm.label.clone(),
                seeds: rows.len(),
                top1,
                top1_concat: med(&|r| r.top1_concat),
                mean_per_class: med(&|r| r.mean_per_class),
                per_glimpse_top1: (0..glimpses).map(|k| med(&|r| r.per_glimpse_top1[k])).collect(),
                rra_params: rows.first().map_or(0, |r| r.rra_params),
                total_params: rows.first().map_or(0, |r| r.total_params),
                non_converged: top1 < 2.0 * chance,
            }
        })
        .collect()
}

pub fn results_csv(results: &[CellResult]) -> String {
    let mut out = format!("{CELL_HEADER}\n");
    for r in results {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Plain-text table of the summary rows.
pub fn render_table(kind: SweepKind, rows: &[SummaryRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8);
    let mut out = String::new();
    let line = |out: &mut String, cols: &[String]| {
        let (first, rest) = cols.split_first().expect("non-empty row");
        let _ = write!(out, "{first:<width$}");
        for c in rest {
            let _ = write!(out, "  {c:>12}");
        }
        out.push('\n');
    };
    let mut header = vec!["setting".to_string(), "ensemble".into(), "concat".into()];
    match kind {
        SweepKind::Parallel => header.extend(["rra params".into(), "all params".into()]),
        SweepKind::Glimpses => header.push("per glimpse".into()),
        _ => {}
    }
    header.push("note".into());
    line(&mut out, &header);
    for r in rows {
        let mut cols = vec![r.label.clone(), format!("{:.4}", r.top1), format!("{:.4}", r.top1_concat)];
        match kind {
            SweepKind::Parallel => cols.extend([r.rra_params.to_string(), r.total_params.to_string()]),
            SweepKind::Glimpses => cols.push(
                r.per_glimpse_top1
                    .iter()
                    .map(|a| format!("{a:.2}"))
                    .collect::<Vec<_>>()
                    .join("/"),
            ),
            _ => {}
        }
        cols.push(if r.non_converged { "non-converged".into() } else { String::new() });
        line(&mut out, &cols);
    }
    let _ = writeln!(out, "medians over {} seed(s)", rows.first().map_or(0, |r| r.seeds));
    out
}

/// Writes `<kind>.csv` (all cells) and `<kind>_summary.txt`; returns the
/// summary text.
pub fn write_outputs(out_dir: &Path, plan: &SweepPlan, results: &[CellResult], num_classes: usize) -> Result<String> {
    let csv = out_dir.join(format!("{}.csv", plan.kind));
    std::fs::write(&csv, results_csv(results)).map_err(io_err(&csv))?;
    let table = render_table(plan.kind, &summarize(plan, results, num_classes));
    let txt = out_dir.join(format!("{}_summary.txt", plan.kind));
    std::fs::write(&txt, &table).map_err(io_err(&txt))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_shapes() {
        let base = toy_config();
        assert_eq!(arms(SweepKind::Losses, &base, &[]).unwrap().len(), 7);
        assert_eq!(arms(SweepKind::Glimpses, &base, &DEFAULT_GLIMPSES).unwrap().len(), 5);
        assert_eq!(arms(SweepKind::Components, &base, &[]).unwrap().len(), 7);
        assert_eq!(arms(SweepKind::Parallel, &base, &[]).unwrap().len(), 2);
        assert!(arms(SweepKind::Glimpses, &base, &[]).is_err());
        assert!("tables".parse::<SweepKind>().is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn cell_rows_round_trip() {
        let r = CellResult {
            label: "lc+li".into(),
            seed: 3,
            top1: 0.5,
            top1_concat: 0.25,
            mean_per_class: 0.5,
            final_loss: 1.5,
            rra_params: 10,
            total_params: 100,
            per_glimpse_top1: vec![0.1, 0.2],
        };
        assert_eq!(CellResult::parse_row(&r.csv_row()), Some(r));
    }

    #[test]
    fn parallel_arms_differ_only_in_update_parameters() {
        let base = toy_config();
        let a = arms(SweepKind::Parallel, &base, &[]).unwrap();
        let (rra, rra_total) = parameter_counts(&a[0].config).unwrap();
        let (par, par_total) = parameter_counts(&a[1].config).unwrap();
        let c = 32;
        let updates = (base.model.glimpses - 1) * (c * c + c + 2 * c);
        assert_eq!(rra - par, updates);
        assert_eq!(rra_total - par_total, updates);
    }
}
