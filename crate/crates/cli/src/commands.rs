use std::io::Write;
use std::path::{Path, PathBuf};

use tscl_core::data::{SeriesDataset, Split};
use tscl_core::forecast::{
    alpha_select, encode_windows, evaluate, persistence_baseline, ridge_fit, stack_targets,
    MetricsReport,
};
use tscl_core::model::{load_checkpoint, save_checkpoint, TeacherStudentState};
use tscl_core::selftest::{run_selftest, Fault};
use tscl_core::trainer::{pretrain, write_timing_csv, write_trace_csv, TrainConfig};
use tscl_core::{Error, Result};

use crate::config::RunConfig;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let ds = cfg.load_dataset()?;
    let train_cfg = cfg.train_config(ds.channels())?;
    let outcome = pretrain(&train_cfg, &ds)?;

    ensure_dir(out_dir)?;
    let trace_path = out_dir.join("trace.csv");
    write_trace_csv(&outcome.trace, &trace_path)?;
    write_timing_csv(&outcome.trace, &out_dir.join("timings.csv"))?;
    let ckpt_path = out_dir.join("checkpoint.json");
    save_checkpoint(&outcome.state, Some(&outcome.rng), &ckpt_path)?;

    let last = outcome.trace.records.last().expect("at least one iteration");
    println!(
        "pretrain: {} iterations, final ssl {:.6} sl {:.6} joint {:.6}",
        outcome.trace.records.len(),
        last.ssl,
        last.sl,
        last.joint
    );
    println!("wrote {}", trace_path.display());
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

struct HorizonOutcome {
    report: MetricsReport,
    baseline: MetricsReport,
}

fn forecast_horizon(
    cfg: &RunConfig,
    state: &TeacherStudentState,
    ds: &SeriesDataset,
    horizon: usize,
) -> Result<HorizonOutcome> {
    let lookback = cfg.forecast.lookback;
    let train_samples = ds.make_forecast_samples(lookback, horizon, Split::Train)?;
    let val_samples = ds.make_forecast_samples(lookback, horizon, Split::Val)?;
    let test_samples = ds.make_forecast_samples(lookback, horizon, Split::Test)?;

    let train_features = encode_windows(state, &train_samples)?;
    let train_targets = stack_targets(&train_samples)?;
    let val_features = encode_windows(state, &val_samples)?;
    let val_targets = stack_targets(&val_samples)?;

    let alpha = alpha_select(
        &train_features,
        &train_targets,
        &val_features,
        &val_targets,
        &cfg.forecast.alpha_grid,
        horizon,
        ds.channels(),
    )?;
    let head = ridge_fit(&train_features, &train_targets, alpha, horizon, ds.channels())?;
    let report = evaluate(&head, state, &test_samples, train_samples.len(), val_samples.len())?;
    let baseline = persistence_baseline(&test_samples)?;
    Ok(HorizonOutcome { report, baseline })
}

pub fn cmd_forecast(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<()> {
    let ds = cfg.load_dataset()?;
    let (state, _) = load_checkpoint(checkpoint)?;
    if state.dims().input_channels != ds.channels() {
        return Err(Error::Dim(format!(
            "checkpoint expects {} channels, dataset has {}",
            state.dims().input_channels,
            ds.channels()
        )));
    }

    ensure_dir(out_dir)?;
    let mut summary = String::from(
        "horizon,mse,mae,alpha,ks_statistic,ks_p,baseline_mse,baseline_mae\n",
    );
    for &horizon in &cfg.forecast.horizons {
        let out = forecast_horizon(cfg, &state, &ds, horizon)?;
        let json = serde_json::to_string_pretty(&out.report)
            .map_err(|e| Error::Usage(format!("serialize metrics: {e}")))?;
        let path = out_dir.join(format!("metrics_P{horizon}.json"));
        std::fs::write(&path, json)?;
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            horizon,
            out.report.mse,
            out.report.mae,
            out.report.alpha,
            out.report.ks_statistic,
            out.report.ks_p,
            out.baseline.mse,
            out.baseline.mae
        ));
        println!(
            "P={horizon}: mse {:.6} mae {:.6} (persistence mse {:.6}) alpha {}",
            out.report.mse, out.report.mae, out.baseline.mse, out.report.alpha
        );
    }
    std::fs::write(out_dir.join("summary.csv"), summary)?;
    println!("wrote {}", out_dir.join("summary.csv").display());
    Ok(())
}

/// Sweepable hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    Momentum,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "m" | "momentum" => Ok(SweepParam::Momentum),
            other => Err(Error::Param(format!(
                "unknown sweep parameter '{other}' (expected 'lambda' or 'm')"
            ))),
        }
    }
}

fn apply_sweep_value(train_cfg: &mut TrainConfig, param: SweepParam, value: f64) -> Result<()> {
    match param {
        SweepParam::Lambda => train_cfg.lambda = value,
        SweepParam::Momentum => train_cfg.momentum = value,
    }
    train_cfg.validate()
}

pub fn cmd_sweep(
    cfg: &RunConfig,
    param: SweepParam,
    values: &[f64],
    out_dir: &Path,
) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Usage("sweep needs a non-empty values list".into()));
    }
    let ds = cfg.load_dataset()?;
    // validate every value up front so a bad entry aborts before any run
    for &v in values {
        let mut probe = cfg.train_config(ds.channels())?;
        apply_sweep_value(&mut probe, param, v)?;
    }

    ensure_dir(out_dir)?;
    let mut rows = String::from("value,horizon,mse,mae\n");
    for &v in values {
        let mut train_cfg = cfg.train_config(ds.channels())?;
        apply_sweep_value(&mut train_cfg, param, v)?;
        let outcome = pretrain(&train_cfg, &ds)?;
        for &horizon in &cfg.forecast.horizons {
            let out = forecast_horizon(cfg, &outcome.state, &ds, horizon)?;
            rows.push_str(&format!(
                "{},{},{},{}\n",
                v, horizon, out.report.mse, out.report.mae
            ));
            println!(
                "{param:?}={v} P={horizon}: mse {:.6} mae {:.6}",
                out.report.mse, out.report.mae
            );
        }
    }
    let path = out_dir.join("sweep.csv");
    std::fs::write(&path, rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_selftest() -> Result<()> {
    let rows = run_selftest(Fault::None);
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut failures = 0;
    let mut stdout = std::io::stdout().lock();
    for row in &rows {
        let status = if row.passed { "PASS" } else { "FAIL" };
        writeln!(stdout, "{status}  {:width$}  {}", row.name, row.detail)
            .map_err(Error::Io)?;
        if !row.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::Usage(format!("{failures} selftest check(s) failed")));
    }
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    if cfg.data.synthetic.is_none() {
        return Err(Error::Usage(
            "synth needs a config with a data.synthetic section".into(),
        ));
    }
    let ds = cfg.load_raw_dataset()?;
    ensure_dir(out_dir)?;
    let path = out_dir.join("synth.csv");
    tscl_core::data::write_csv(&ds, &path, &cfg.data.date_column)?;
    println!(
        "wrote {} ({} steps x {} channels)",
        path.display(),
        ds.total_len(),
        ds.channels()
    );
    Ok(())
}

/// Resolve the output directory: the --out flag wins over the config key.
pub fn resolve_out_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| cfg.out_dir.clone()).ok_or_else(|| {
        Error::Usage("no output directory: pass --out or set out_dir in the config".into())
    })
}
