//! The four experiment commands. Every artifact path is a function of the
//! config label and seed, so reruns overwrite the same files.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use samg::field::SpatialMap;
use samg::guidance::{GuidanceConfig, GuidanceMode, GuidanceTrace};
use samg::io::{save_latent, save_pgm, write_trajectory};
use samg::metrics::{
    evaluate_sample_with, metrics_csv, pareto_table, top_fraction_mean, Aggregates, ParetoTable, SampleEvaluation,
};
use samg::sampler::{run_sampler, AnalyticModel, Solver, Trajectory};
use samg::verify::{reports_csv, reports_summary, run_check, CheckFamily, CheckReport};

use crate::config::{ExperimentConfig, SeedRange};

pub const OUT_DIR_ENV: &str = "SAMG_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "samg-out";

/// Settings that come from the command line rather than the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seeds: Option<SeedRange>,
    pub threads: Option<usize>,
}

/// `--out`, then the config's `out_dir`, then `$SAMG_OUT_DIR`, then `samg-out`.
pub fn resolve_out_dir(opts: &RunOptions, cfg: &ExperimentConfig) -> PathBuf {
    opts.out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        b = b.num_threads(n);
    }
    Ok(b.build().context("building thread pool")?.install(f))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn seed_name(seed: u64) -> String {
    format!("seed{seed:04}")
}

fn unique_labels(grid: &[GuidanceConfig]) -> Result<Vec<String>> {
    let labels: Vec<String> = grid.iter().map(GuidanceConfig::label).collect();
    let mut seen = HashSet::new();
    for l in &labels {
        if !seen.insert(l) {
            bail!("guidance label '{l}' appears twice; artifact paths would collide");
        }
    }
    Ok(labels)
}

/// One (guidance config, seed) cell after its files are written.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub config: usize,
    pub seed: u64,
    pub evaluation: SampleEvaluation,
    /// Mean distance over the pixels with the highest run-averaged energy.
    pub top_energy_distance: f64,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    model: AnalyticModel,
    solver: Solver,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        Ok(Self {
            cfg,
            model: cfg.model_spec()?,
            solver: cfg.solver()?,
        })
    }

    fn trajectory(&self, g: &GuidanceConfig, seed: u64) -> Result<Trajectory> {
        run_sampler(&self.model, &self.solver, g, self.cfg.steps, seed)
            .with_context(|| format!("sampling {} with seed {seed}", g.label()))
    }

    fn evaluate(&self, t: &Trajectory, top_fraction: f64) -> Result<(SampleEvaluation, f64)> {
        let e = evaluate_sample_with(
            t.final_sample(),
            &self.model.gmm,
            &self.model.condition,
            self.cfg.mask_threshold,
            self.cfg.off_threshold,
        )?;
        let energy = t.trace.mean_energy().context("empty trace")?;
        let top = top_fraction_mean(&e.distances, &energy, top_fraction)?;
        Ok((e, top))
    }

    /// Runs every cell in parallel; `each` writes per-cell artifacts.
    fn run_grid(
        &self,
        grid: &[GuidanceConfig],
        seeds: SeedRange,
        top_fraction: f64,
        each: impl Fn(usize, u64, &Trajectory) -> Result<()> + Sync,
    ) -> Result<Vec<CellResult>> {
        let cells: Vec<(usize, u64)> = (0..grid.len()).flat_map(|g| seeds.iter().map(move |s| (g, s))).collect();
        // collect() keeps input order, so the merge below is deterministic
        cells
            .par_iter()
            .map(|&(gi, seed)| {
                let t = self.trajectory(&grid[gi], seed)?;
                each(gi, seed, &t)?;
                let (evaluation, top_energy_distance) = self.evaluate(&t, top_fraction)?;
                Ok(CellResult {
                    config: gi,
                    seed,
                    evaluation,
                    top_energy_distance,
                })
            })
            .collect()
    }

    fn seeds(&self, opts: &RunOptions) -> SeedRange {
        opts.seeds.unwrap_or(self.cfg.seeds)
    }
}

fn group_by_config(labels: &[String], cells: &[CellResult]) -> Vec<(String, Vec<(u64, SampleEvaluation)>)> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let evals = cells
                .iter()
                .filter(|c| c.config == i)
                .map(|c| (c.seed, c.evaluation.clone()))
                .collect();
            (l.clone(), evals)
        })
        .collect()
}

fn pooled(labels: &[String], cells: &[CellResult], off: f64) -> Result<Vec<(String, Aggregates)>> {
    group_by_config(labels, cells)
        .into_iter()
        .map(|(l, evals)| {
            let e: Vec<SampleEvaluation> = evals.into_iter().map(|(_, e)| e).collect();
            Ok((l, Aggregates::pooled(&e, off)?))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SampleSummary {
    pub out_dir: PathBuf,
    pub labels: Vec<String>,
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<(String, Aggregates)>,
}

pub fn sample_path(out: &Path, label: &str, seed: u64) -> PathBuf {
    out.join("samples").join(label).join(format!("{}.lfld", seed_name(seed)))
}

pub fn trace_path(out: &Path, label: &str, seed: u64) -> PathBuf {
    out.join("traces").join(label).join(format!("{}.csv", seed_name(seed)))
}

pub fn trajectory_path(out: &Path, label: &str, seed: u64) -> PathBuf {
    out.join("trajectories").join(label).join(format!("{}.ltrj", seed_name(seed)))
}

/// Final samples, guidance traces and metrics for every (guidance, seed) cell.
pub fn cmd_sample(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<SampleSummary> {
    let grid = cfg.guidance_configs();
    if grid.is_empty() {
        bail!("no guidance configs to sample");
    }
    let labels = unique_labels(&grid)?;
    let runner = Runner::new(cfg)?;
    let out = resolve_out_dir(opts, cfg);
    let seeds = runner.seeds(opts);
    let cells = with_pool(opts.threads, || {
        runner.run_grid(&grid, seeds, cfg.ablate.top_fraction, |gi, seed, t| {
            let label = &labels[gi];
            let path = sample_path(&out, label, seed);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            save_latent(&path, t.final_sample()).with_context(|| format!("writing {}", path.display()))?;
            write(&trace_path(&out, label, seed), t.trace.to_csv())?;
            if cfg.save_trajectories {
                let states: Vec<(usize, &_)> = t.states.iter().enumerate().collect();
                let mut buf = Vec::new();
                write_trajectory(&mut buf, &states)?;
                write(&trajectory_path(&out, label, seed), buf)?;
            }
            Ok(())
        })
    })??;
    let csv = metrics_csv(&group_by_config(&labels, &cells), cfg.off_threshold)?;
    write(&out.join("metrics.csv"), csv)?;
    let aggregates = pooled(&labels, &cells, cfg.off_threshold)?;
    Ok(SampleSummary {
        out_dir: out,
        labels,
        cells,
        aggregates,
    })
}

/// Inside/outside energy co-location for one SAMG run.
#[derive(Debug, Clone, PartialEq)]
pub struct Colocation {
    pub label: String,
    pub seed: u64,
    pub inside: f64,
    pub outside: f64,
    /// `None` when the mask does not split the grid into two regions.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EnergySummary {
    pub out_dir: PathBuf,
    pub images: usize,
    pub colocation: Vec<Colocation>,
    pub min_ratio: f64,
}

impl EnergySummary {
    pub fn passed(&self) -> bool {
        self.colocation.iter().all(|c| c.ratio.is_none_or(|r| r >= self.min_ratio))
    }
}

pub const ENERGY_INDEX_HEADER: &str =
    "step,t,energy_pgm,omega_pgm,E_min,E_max,E_mean,omega_min,omega_max,omega_mean,E_inside,E_outside";
pub const COLOCATION_HEADER: &str = "config,seed,late_E_inside,late_E_outside,ratio,min_ratio,pass";

fn region_means(values: &[f64], mask: &[f64], threshold: f64) -> (f64, f64, usize, usize) {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0, 0.0, 0);
    for (e, m) in values.iter().zip(mask) {
        if *m > threshold {
            si += e;
            ni += 1;
        } else {
            so += e;
            no += 1;
        }
    }
    let avg = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    (avg(si, ni), avg(so, no), ni, no)
}

pub fn energy_dir(out: &Path, label: &str, seed: u64) -> PathBuf {
    out.join("energy").join(label).join(seed_name(seed))
}

/// One PGM per step for `E_t` and `Ω`, an index per run, and the late-step
/// inside/outside energy ratio for every SAMG config and seed.
pub fn cmd_energy_maps(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<EnergySummary> {
    let grid: Vec<GuidanceConfig> = cfg
        .guidance_configs()
        .into_iter()
        .filter(|g| matches!(g.mode, GuidanceMode::Samg { .. }))
        .collect();
    if grid.is_empty() {
        bail!("energy-maps needs at least one guidance entry with kind = \"samg\"");
    }
    let labels = unique_labels(&grid)?;
    let runner = Runner::new(cfg)?;
    let out = resolve_out_dir(opts, cfg);
    let seeds = runner.seeds(opts);
    let mask = runner.model.condition.mask().to_vec();
    let thr = cfg.mask_threshold;
    let late_fraction = cfg.energy_maps.late_fraction;

    let cells: Vec<(usize, u64)> = (0..grid.len()).flat_map(|g| seeds.iter().map(move |s| (g, s))).collect();
    let results: Vec<(usize, Colocation)> = with_pool(opts.threads, || {
        cells
            .par_iter()
            .map(|&(gi, seed)| {
                let t = runner.trajectory(&grid[gi], seed)?;
                let dir = energy_dir(&out, &labels[gi], seed);
                let images = write_energy_run(&dir, &t.trace, &mask, thr)?;
                let n = t.trace.len();
                let late = &t.trace.records[n - ((n as f64 * late_fraction).ceil() as usize).clamp(1, n)..];
                let (mut inside, mut outside) = (0.0, 0.0);
                let mut split = true;
                for r in late {
                    let (i, o, ni, no) = region_means(r.energy.values(), &mask, thr);
                    split &= ni > 0 && no > 0;
                    inside += i;
                    outside += o;
                }
                inside /= late.len() as f64;
                outside /= late.len() as f64;
                let ratio = (split && outside > 0.0).then(|| inside / outside);
                Ok((
                    images,
                    Colocation {
                        label: labels[gi].clone(),
                        seed,
                        inside,
                        outside,
                        ratio,
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let min_ratio = cfg.energy_maps.min_ratio;
    let mut csv = String::from(COLOCATION_HEADER);
    csv.push('\n');
    for (_, c) in &results {
        let (ratio, pass) = match c.ratio {
            Some(r) => (r.to_string(), (r >= min_ratio).to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(csv, "{},{},{:e},{:e},{ratio},{min_ratio},{pass}", c.label, c.seed, c.inside, c.outside);
    }
    write(&out.join("energy").join("colocation.csv"), csv)?;
    Ok(EnergySummary {
        out_dir: out,
        images: results.iter().map(|(n, _)| n).sum(),
        colocation: results.into_iter().map(|(_, c)| c).collect(),
        min_ratio,
    })
}

fn write_energy_run(dir: &Path, trace: &GuidanceTrace, mask: &[f64], thr: f64) -> Result<usize> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut index = String::from(ENERGY_INDEX_HEADER);
    index.push('\n');
    for r in &trace.records {
        let e_name = format!("E_{:03}.pgm", r.step);
        let o_name = format!("omega_{:03}.pgm", r.step);
        save_pgm(&dir.join(&e_name), &r.energy)?;
        save_pgm(&dir.join(&o_name), &r.omega)?;
        let (e0, e1, em) = r.energy_stats();
        let (o0, o1, om) = r.omega_stats();
        let (ei, eo, _, _) = region_means(r.energy.values(), mask, thr);
        // an empty region leaves its column blank
        let cell = |v: f64| if v.is_nan() { String::new() } else { format!("{v:e}") };
        let _ = writeln!(
            index,
            "{},{},{e_name},{o_name},{e0:e},{e1:e},{em:e},{o0},{o1},{om},{},{}",
            r.step,
            r.time,
            cell(ei),
            cell(eo)
        );
    }
    write(&dir.join("index.csv"), index)?;
    Ok(2 * trace.len())
}

/// Runs the selected check families (all when `only` is empty).
pub fn cmd_verify(cfg: &ExperimentConfig, opts: &RunOptions, only: &[CheckFamily], corrupt_hessian_sign: bool) -> Result<Vec<CheckReport>> {
    let mut settings = cfg.verify.settings();
    settings.corrupt_hessian_sign |= corrupt_hessian_sign;
    let families: Vec<CheckFamily> = if only.is_empty() {
        CheckFamily::ALL.to_vec()
    } else {
        let mut f = only.to_vec();
        f.sort();
        f.dedup();
        f
    };
    let reports = with_pool(opts.threads, || {
        families
            .par_iter()
            .map(|f| run_check(*f, &settings).with_context(|| format!("check {f}")))
            .collect::<Result<Vec<_>>>()
    })??;
    let out = resolve_out_dir(opts, cfg);
    write(&out.join("verify.csv"), reports_csv(&reports))?;
    Ok(reports)
}

pub fn verify_summary(reports: &[CheckReport]) -> String {
    reports_summary(reports)
}

#[derive(Debug, Clone)]
pub struct AblationSummary {
    pub out_dir: PathBuf,
    pub table: ParetoTable,
    /// Per config label: mean over seeds of the top-energy distance.
    pub top_energy_distance: Vec<(String, f64)>,
}

pub const ABLATION_HEADER: &str =
    "config,alignment_rate,mean_distance,p95_distance,off_manifold_rate,top_energy_distance,dominated";

/// Uniform scales, SAMG bounds and kernels on the configured testbed; emits
/// the Pareto table.
pub fn cmd_ablate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<AblationSummary> {
    let grid = cfg.ablate.grid()?;
    for g in &grid {
        g.validate().with_context(|| format!("ablation cell {}", g.label()))?;
    }
    let labels = unique_labels(&grid)?;
    let runner = Runner::new(cfg)?;
    let out = resolve_out_dir(opts, cfg);
    let seeds = runner.seeds(opts);
    let cells = with_pool(opts.threads, || runner.run_grid(&grid, seeds, cfg.ablate.top_fraction, |_, _, _| Ok(())))??;

    let aggregates = pooled(&labels, &cells, cfg.off_threshold)?;
    let table = if aggregates.len() >= 2 {
        pareto_table(&aggregates)?
    } else {
        // a single cell cannot be dominated
        ParetoTable {
            rows: vec![samg::metrics::ParetoRow {
                label: aggregates[0].0.clone(),
                summary: aggregates[0].1,
                dominated: false,
            }],
        }
    };
    let top: Vec<(String, f64)> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let v: Vec<f64> = cells.iter().filter(|c| c.config == i).map(|c| c.top_energy_distance).collect();
            (l.clone(), v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();

    let mut csv = String::from(ABLATION_HEADER);
    csv.push('\n');
    for r in &table.rows {
        let s = &r.summary;
        let t = top.iter().find(|(l, _)| *l == r.label).map(|p| p.1).unwrap_or(f64::NAN);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{t},{}",
            r.label, s.alignment_rate, s.mean_distance, s.p95_distance, s.off_manifold_rate, r.dominated
        );
    }
    write(&out.join("ablation.csv"), csv)?;
    write(
        &out.join("ablation_metrics.csv"),
        metrics_csv(&group_by_config(&labels, &cells), cfg.off_threshold)?,
    )?;
    Ok(AblationSummary {
        out_dir: out,
        table,
        top_energy_distance: top,
    })
}

/// Fixed-width table of pooled aggregates for stdout.
pub fn aggregates_table(rows: &[(String, Aggregates)]) -> String {
    let mut s = format!(
        "{:<20} {:>9} {:>10} {:>10} {:>9}\n",
        "config", "align", "mean_dist", "p95_dist", "off_rate"
    );
    for (l, a) in rows {
        let _ = writeln!(
            s,
            "{l:<20} {:>9.4} {:>10.4} {:>10.4} {:>9.4}",
            a.alignment_rate, a.mean_distance, a.p95_distance, a.off_manifold_rate
        );
    }
    s
}
