//! Command implementations of the benchmark CLI.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use vio_core::{
    ate_rmse, generate, preset, rte_rmse, run_on_bundle, EstimatorConfig, Method, Scenario,
    SolverConfig, PRESET_NAMES,
};

use crate::io::{
    read_metrics_csv, read_states_csv, write_bcc_csv, write_bias_csv, write_frames_csv,
    write_imu_csv, write_metrics_csv, write_states_csv, write_weights_csv, MetricsRow,
};

/// Optional per-run diagnostic streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Weights,
    Bias,
    Bcc,
}

impl TraceKind {
    pub fn parse_list(arg: &str) -> Result<Vec<TraceKind>> {
        arg.split(',')
            .filter(|s| !s.is_empty())
            .map(|s| match s.trim() {
                "weights" => Ok(TraceKind::Weights),
                "bias" => Ok(TraceKind::Bias),
                "bcc" => Ok(TraceKind::Bcc),
                other => bail!("unknown trace '{other}' (expected weights, bias, bcc)"),
            })
            .collect()
    }
}

/// Resolves a scenario argument: a built-in preset name or a TOML file.
pub fn resolve_scenario(arg: &str) -> Result<(Scenario, String)> {
    if let Some(sc) = preset(arg) {
        return Ok((sc, arg.to_string()));
    }
    let path = Path::new(arg);
    if path.exists() {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading scenario file {}", path.display()))?;
        let sc: Scenario =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let label = if sc.name.is_empty() {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "scenario".to_string())
        } else {
            sc.name.clone()
        };
        return Ok((sc, label));
    }
    bail!(
        "unknown scenario '{arg}': not a preset ({}) and not a file",
        PRESET_NAMES.join(", ")
    )
}

pub fn parse_method(arg: &str) -> Result<Method> {
    Method::parse(arg).with_context(|| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("unknown method '{arg}' (expected one of {})", names.join(", "))
    })
}

pub fn parse_seeds(arg: &str) -> Result<Vec<u64>> {
    arg.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .with_context(|| format!("invalid seed '{s}'"))
        })
        .collect()
}

/// Writes a scenario's raw streams (`imu.csv`, `frames.csv`, `gt.csv`, and
/// the resolved `scenario.toml`) into `out`.
pub fn simulate_cmd(scenario_arg: &str, seed: u64, out: &Path) -> Result<String> {
    let (scenario, label) = resolve_scenario(scenario_arg)?;
    let bundle = generate(&scenario, seed);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_imu_csv(&out.join("imu.csv"), &bundle.imu)?;
    write_frames_csv(&out.join("frames.csv"), &bundle.frames)?;
    write_states_csv(&out.join("gt.csv"), &bundle.gt)?;
    fs::write(
        out.join("scenario.toml"),
        toml::to_string_pretty(&scenario).context("serializing scenario")?,
    )?;
    Ok(format!(
        "{label} seed {seed}: {} frames, {} imu samples, mean {:.1} visible features \
         (min {}), dynamic fraction {:.2}",
        bundle.frames.len(),
        bundle.imu.len(),
        bundle.mean_visible,
        bundle.min_visible,
        bundle.dynamic_fraction,
    ))
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub scenario: String,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub traces: Vec<TraceKind>,
}

/// Runs one method over the scenario seeds, writing per-seed estimates,
/// requested traces, and a `metrics.csv` summary.
pub fn run_cmd(opts: &RunOptions) -> Result<Vec<MetricsRow>> {
    let (scenario, label) = resolve_scenario(&opts.scenario)?;
    if opts.seeds.is_empty() {
        bail!("no seeds given");
    }
    fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        let bundle = generate(&scenario, seed);
        let cfg = EstimatorConfig::new(SolverConfig::new(opts.method));
        let est = run_on_bundle(cfg, &bundle, None);
        let seed_dir = opts.out.join(format!("seed_{seed}"));
        fs::create_dir_all(&seed_dir)?;
        write_states_csv(&seed_dir.join("est.csv"), est.trajectory())?;
        write_states_csv(&seed_dir.join("gt.csv"), &bundle.gt)?;
        if opts.traces.contains(&TraceKind::Weights) {
            write_weights_csv(&seed_dir.join("weights.csv"), &est.traces().weights)?;
        }
        if opts.traces.contains(&TraceKind::Bias) {
            write_bias_csv(&seed_dir.join("bias.csv"), &est.traces().bias)?;
        }
        if opts.traces.contains(&TraceKind::Bcc) {
            write_bcc_csv(&seed_dir.join("bcc.csv"), &est.traces().bcc)?;
        }
        let (ate, rte) = if est.diverged() {
            (f64::NAN, f64::NAN)
        } else {
            (
                ate_rmse(est.trajectory(), &bundle.gt).unwrap_or(f64::NAN),
                rte_rmse(est.trajectory(), &bundle.gt).unwrap_or(f64::NAN),
            )
        };
        rows.push(MetricsRow {
            method: opts.method.name().to_string(),
            scenario: label.clone(),
            seed,
            ate_rmse: ate,
            rte_rmse: rte,
            recovery_count: est.recovery_count(),
            mean_ba_ms: est.mean_solve_ms(),
        });
    }
    write_metrics_csv(&opts.out.join("metrics.csv"), &rows)?;
    Ok(rows)
}

/// Merges the metrics of several run directories into one table. All runs
/// must cover the same scenario; comparisons across scenarios are refused.
pub fn compare_cmd(dirs: &[PathBuf], out: Option<&Path>) -> Result<String> {
    if dirs.is_empty() {
        bail!("no run directories given");
    }
    let mut all: Vec<MetricsRow> = Vec::new();
    for dir in dirs {
        let rows = read_metrics_csv(&dir.join("metrics.csv"))
            .with_context(|| format!("reading metrics from {}", dir.display()))?;
        all.extend(rows);
    }
    if all.is_empty() {
        bail!("no metrics rows found");
    }
    let scenario = all[0].scenario.clone();
    if let Some(odd) = all.iter().find(|r| r.scenario != scenario) {
        bail!(
            "runs cover different scenarios: '{}' vs '{}'",
            scenario,
            odd.scenario
        );
    }
    // Group by method, keeping first-seen order.
    let mut methods: Vec<(String, Vec<&MetricsRow>)> = Vec::new();
    for row in &all {
        match methods.iter_mut().find(|(m, _)| *m == row.method) {
            Some((_, v)) => v.push(row),
            None => methods.push((row.method.clone(), vec![row])),
        }
    }
    let mut table = format!(
        "scenario: {scenario}\n{:<14} {:>6} {:>12} {:>12} {:>11} {:>11} {:>9}\n",
        "method", "seeds", "ate_rmse", "rte_rmse", "recoveries", "mean_ba_ms", "failures"
    );
    for (method, rows) in &methods {
        let ok: Vec<&&MetricsRow> = rows.iter().filter(|r| r.ate_rmse.is_finite()).collect();
        let failures = rows.len() - ok.len();
        let mean = |f: fn(&MetricsRow) -> f64| -> f64 {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
            }
        };
        let recoveries: usize = rows.iter().map(|r| r.recovery_count).sum();
        table.push_str(&format!(
            "{:<14} {:>6} {:>12.4} {:>12.4} {:>11} {:>11.2} {:>9}\n",
            method,
            rows.len(),
            mean(|r| r.ate_rmse),
            mean(|r| r.rte_rmse),
            recoveries,
            mean(|r| r.mean_ba_ms),
            failures
        ));
    }
    if let Some(path) = out {
        write_metrics_csv(path, &all)?;
    }
    Ok(table)
}

/// Recomputes trajectory metrics from the estimate/truth files in a run
/// directory (either one seed directory or a directory of them).
pub fn metrics_cmd(dir: &Path) -> Result<String> {
    let mut targets: Vec<(String, PathBuf)> = Vec::new();
    if dir.join("est.csv").exists() {
        targets.push((
            dir.file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| ".".into()),
            dir.to_path_buf(),
        ));
    } else {
        let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("est.csv").exists())
            .collect();
        subdirs.sort();
        for p in subdirs {
            let name = p
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            targets.push((name, p));
        }
    }
    if targets.is_empty() {
        bail!("no est.csv found under {}", dir.display());
    }
    let mut out = String::new();
    let mut ates = Vec::new();
    for (name, path) in &targets {
        let est = read_states_csv(&path.join("est.csv"))?;
        let gt = read_states_csv(&path.join("gt.csv"))?;
        let ate = ate_rmse(&est, &gt).unwrap_or(f64::NAN);
        let rte = rte_rmse(&est, &gt).unwrap_or(f64::NAN);
        if ate.is_finite() {
            ates.push(ate);
        }
        out.push_str(&format!("{name}: ate_rmse {ate:.5} m, rte_rmse {rte:.5} m\n"));
    }
    if targets.len() > 1 && !ates.is_empty() {
        out.push_str(&format!(
            "mean ate_rmse over {} finite runs: {:.5} m\n",
            ates.len(),
            ates.iter().sum::<f64>() / ates.len() as f64
        ));
    }
    Ok(out)
}
