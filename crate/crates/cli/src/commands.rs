use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::Context;
use gyrocal::dataio::{
    align, align_series, parse_gyro_stream, parse_ref_stream, split_chronological, write_gyro_csv,
    write_ref_csv, AlignedDataset, GyroRecord, RefRecord, RefSchema,
};
use gyrocal::features::FeatureReport;
use gyrocal::linear;
use gyrocal::metrics::{default_tau_grid, overlapping_adev, NoiseMetrics};
use gyrocal::pipeline::{
    self, compare_report, eval_frame, evaluate_model, evaluate_predictions, fit_calibrator,
    gyro_dataset, input_layout, prepare, resolve_features, steady_mask_from_reference,
    steady_mask_from_truth, write_comparison_csv, write_predictions_csv, FeatureAnalysis, Fitted,
    Model, ModelKind, Timing,
};
use gyrocal::sim::{gen_rate_profile, simulate_gyro, staircase_profile, SimSidecar, STAIRCASE_RATES};
use serde::Serialize;

use crate::config::{require, write_echo, PipelineConfig};
use crate::{Cli, Command, UsageError};

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = PipelineConfig::load(cli.common.config.as_deref())?;
    let c = cli.common;
    override_opt(&mut cfg.gyro, c.gyro);
    override_opt(&mut cfg.reference, c.reference);
    override_opt(&mut cfg.truth, c.truth);
    if let Some(dir) = c.out_dir {
        cfg.out_dir = dir;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.apply_seed();

    let name = match &cli.command {
        Command::Simulate { .. } => "simulate",
        Command::Features => "features",
        Command::FitLinear => "fit-linear",
        Command::Train { .. } => "train",
        Command::Calibrate { .. } => "calibrate",
        Command::Evaluate { .. } => "evaluate",
        Command::Adev { .. } => "adev",
        Command::Report { .. } => "report",
    };
    match cli.command {
        Command::Simulate {
            duration,
            staircase,
            noise_free,
            s0_scale,
            mode_split,
        } => {
            if let Some(seed) = c.seed {
                cfg.sim.seed = seed;
                cfg.profile.seed = seed;
            }
            if let Some(d) = duration {
                cfg.profile.duration = d;
            }
            cfg.staircase |= staircase;
            if noise_free {
                cfg.sim = cfg.sim.noise_free();
            }
            if let Some(k) = s0_scale {
                cfg.sim.s0 *= k;
            }
            if let Some(ms) = mode_split {
                cfg.sim.mode_split = ms;
            }
            prepare_out(&cfg)?;
            simulate(&cfg)?;
        }
        Command::Features => {
            prepare_out(&cfg)?;
            features(&cfg)?;
        }
        Command::FitLinear => {
            prepare_out(&cfg)?;
            fit_linear(&cfg)?;
        }
        Command::Train { model } => {
            if let Some(m) = model {
                cfg.model = m;
            }
            prepare_out(&cfg)?;
            train(&cfg)?;
        }
        Command::Calibrate { model_file } => {
            override_opt(&mut cfg.model_file, model_file);
            prepare_out(&cfg)?;
            calibrate(&cfg)?;
        }
        Command::Evaluate { predictions, model } => {
            override_opt(&mut cfg.predictions, predictions);
            if let Some(m) = model {
                cfg.model = m;
            }
            prepare_out(&cfg)?;
            evaluate(&cfg)?;
        }
        Command::Adev {
            input,
            column,
            sample_rate,
        } => {
            prepare_out(&cfg)?;
            adev(&cfg, &input, &column, sample_rate)?;
        }
        Command::Report {
            test_gyro,
            test_reference,
            test_truth,
        } => {
            override_opt(&mut cfg.test_gyro, test_gyro);
            override_opt(&mut cfg.test_reference, test_reference);
            override_opt(&mut cfg.test_truth, test_truth);
            prepare_out(&cfg)?;
            report(&cfg)?;
        }
    }
    write_echo(&cfg, name)
}

fn override_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn prepare_out(cfg: &PipelineConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating output directory {}", cfg.out_dir.display()))
}

fn create(cfg: &PipelineConfig, name: &str) -> anyhow::Result<BufWriter<File>> {
    let path = cfg.out_dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_json<T: Serialize>(cfg: &PipelineConfig, name: &str, value: &T) -> anyhow::Result<()> {
    serde_json::to_writer_pretty(create(cfg, name)?, value)?;
    Ok(())
}

fn open(path: &Path) -> anyhow::Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn read_gyro(path: &Path, cfg: &PipelineConfig) -> anyhow::Result<Vec<GyroRecord>> {
    let parsed = parse_gyro_stream(open(path)?, &cfg.gyro_schema)
        .with_context(|| format!("reading {}", path.display()))?;
    if parsed.skipped > 0 {
        eprintln!("{}: skipped {} malformed rows", path.display(), parsed.skipped);
    }
    Ok(parsed.records)
}

fn read_rates(path: &Path, schema: &RefSchema) -> anyhow::Result<Vec<RefRecord>> {
    let parsed = parse_ref_stream(open(path)?, schema).with_context(|| format!("reading {}", path.display()))?;
    if parsed.skipped > 0 {
        eprintln!("{}: skipped {} malformed rows", path.display(), parsed.skipped);
    }
    Ok(parsed.records)
}

fn truth_schema() -> RefSchema {
    RefSchema {
        t: "t".into(),
        omega: "omega_true".into(),
    }
}

fn load_dataset(gyro: &Path, reference: &Path, cfg: &PipelineConfig) -> anyhow::Result<AlignedDataset> {
    let g = read_gyro(gyro, cfg)?;
    let r = read_rates(reference, &cfg.ref_schema)?;
    Ok(align(&g, &r, cfg.max_gap)?)
}

fn load_primary(cfg: &PipelineConfig) -> anyhow::Result<AlignedDataset> {
    load_dataset(require(&cfg.gyro, "--gyro")?, require(&cfg.reference, "--reference")?, cfg)
}

/// Steady rows from the truth file when given, else from the reference.
fn steady_mask(ds: &AlignedDataset, truth: Option<&Path>, cfg: &PipelineConfig) -> anyhow::Result<Vec<bool>> {
    Ok(match truth {
        Some(path) => {
            let t = read_rates(path, &truth_schema())?;
            let (ts, ws): (Vec<f64>, Vec<f64>) = t.iter().map(|r| (r.t, r.omega)).unzip();
            steady_mask_from_truth(ds, &ts, &ws)
        }
        None => steady_mask_from_reference(ds, &cfg.settings.eval),
    })
}

fn simulate(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let truth = if cfg.staircase {
        staircase_profile(
            &STAIRCASE_RATES,
            cfg.staircase_dwell,
            cfg.staircase_rest,
            cfg.profile.ramp_time,
            cfg.profile.sample_rate,
        )
    } else {
        gen_rate_profile(&cfg.profile)?
    };
    let sim = gyrocal::sim::SimConfig {
        sample_rate: cfg.profile.sample_rate,
        ..cfg.sim.clone()
    };
    let (gyro, reference) = simulate_gyro(&truth, &sim)?;
    write_gyro_csv(create(cfg, "gyro.csv")?, &gyro)?;
    write_ref_csv(create(cfg, "ref.csv")?, &reference)?;
    truth.write_csv(create(cfg, "truth.csv")?)?;
    write_json(
        cfg,
        "sim_config.json",
        &SimSidecar {
            profile: cfg.profile.clone(),
            sim,
        },
    )
}

fn write_features(cfg: &PipelineConfig, fa: &FeatureAnalysis) -> anyhow::Result<()> {
    FeatureReport::new(&fa.corr, &fa.importance, fa.selected.clone()).to_json(create(cfg, "features.json")?)?;
    Ok(())
}

fn features(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let ds = load_primary(cfg)?;
    let (train, _) = split_chronological(&ds, cfg.settings.train_frac)?;
    let fa = pipeline::analyze_features(&train, &cfg.settings, cfg.seed)?;
    println!("selected: {}", fa.selected.join(", "));
    write_features(cfg, &fa)
}

fn fit_linear(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let ds = load_primary(cfg)?;
    let ls = &cfg.settings.linear;
    let segments = linear::detect_segments(&pipeline::target_records(&ds), ls.rate_tol, ls.min_dwell);
    let rows = linear::scale_factor_table(&ds, &segments);
    linear::write_table_csv(create(cfg, "scale_factors.csv")?, &rows)?;
    let model = linear::fit_linear(&ds, &segments, ls.mode)?;
    println!("s_linear = {}", model.s_linear);
    Model::Linear(model).to_json(create(cfg, "model.json")?)?;
    Ok(())
}

fn training_record(fitted: &Fitted, selected: &[String]) -> serde_json::Value {
    let mut out = serde_json::json!({
        "model": fitted.model.kind(),
        "selected": selected,
        "train_s": fitted.train_seconds,
    });
    match &fitted.model {
        Model::Linear(_) => out["segments"] = serde_json::json!(fitted.segments),
        Model::Gbrt(m) => out["train_loss"] = serde_json::json!(m.train_loss),
        Model::Mlp(_) => out["history"] = serde_json::json!(fitted.history),
    }
    out
}

fn train(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let ds = load_primary(cfg)?;
    let (train, _) = split_chronological(&ds, cfg.settings.train_frac)?;
    let (selected, analysis) = if cfg.model == ModelKind::Linear {
        (vec!["sense_in".to_string()], None)
    } else {
        resolve_features(&train, &cfg.settings, cfg.seed)?
    };
    if let Some(fa) = &analysis {
        write_features(cfg, fa)?;
    }
    let fitted = fit_calibrator(cfg.model, &train, &selected, &cfg.settings)?;
    fitted.model.to_json(create(cfg, "model.json")?)?;
    write_json(cfg, "history.json", &training_record(&fitted, &selected))?;
    println!("trained {} in {:.2} s", cfg.model, fitted.train_seconds);
    Ok(())
}

fn calibrate(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let path = require(&cfg.model_file, "--model-file")?;
    let model = Model::from_json(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    let gyro = read_gyro(require(&cfg.gyro, "--gyro")?, cfg)?;
    let (bases, lags) = input_layout(&model.feature_names());
    let frame = prepare(&gyro_dataset(&gyro)?, &bases, &lags)?;
    let yhat = model.predict_dataset(&frame)?;
    write_predictions_csv(create(cfg, "calibrated.csv")?, &frame.timestamps, &yhat)?;
    Ok(())
}

fn evaluate(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let schema = RefSchema {
        t: "t".into(),
        omega: "omega_hat".into(),
    };
    let preds = read_rates(require(&cfg.predictions, "--predictions")?, &schema)?;
    let reference = read_rates(require(&cfg.reference, "--reference")?, &cfg.ref_schema)?;
    let ds = align_series(&preds, "omega_hat", &reference, cfg.max_gap)?;
    let yhat = ds.column("omega_hat")?.to_vec();
    let mask = steady_mask(&ds, cfg.truth.as_deref(), cfg)?;
    let timing = Timing {
        train_s: 0.0,
        predict_s: 0.0,
        rows_per_s: 0.0,
    };
    let report = evaluate_predictions(
        cfg.model,
        &ds,
        &yhat,
        &mask,
        &cfg.settings.eval,
        timing,
        serde_json::to_value(cfg)?,
    )?;
    println!("mse {:.6e}  r2 {:.6}", report.mse, report.r2);
    write_json(cfg, "eval_report.json", &report)
}

fn adev(cfg: &PipelineConfig, input: &Path, column: &str, sample_rate: Option<f64>) -> anyhow::Result<()> {
    let schema = RefSchema {
        t: "t".into(),
        omega: column.into(),
    };
    let series = read_rates(input, &schema)?;
    let ts: Vec<f64> = series.iter().map(|r| r.t).collect();
    let fs = match sample_rate {
        Some(fs) => fs,
        None => {
            let mut dt: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
            dt.sort_by(f64::total_cmp);
            let mid = dt.get(dt.len() / 2).copied().unwrap_or(0.0);
            if !(mid > 0.0) {
                return Err(UsageError("cannot infer a sample rate; pass --sample-rate".into()).into());
            }
            1.0 / mid
        }
    };
    let rate: Vec<f64> = series.iter().map(|r| r.omega).collect();
    let taus = default_tau_grid(rate.len(), fs, cfg.settings.eval.tau_per_decade);
    let curve = overlapping_adev(&rate, fs, &taus)?;
    curve.write_csv(create(cfg, "adev.csv")?)?;
    let noise = NoiseMetrics::from_curve(&curve, cfg.settings.eval.flicker_correction)?;
    match noise.arw {
        Some(arw) => println!("ARW {arw:.4} deg/sqrt(h)  BI {:.4} deg/h at {:.1} s", noise.bi, noise.bi_tau),
        None => println!("ARW n/a  BI {:.4} deg/h at {:.1} s", noise.bi, noise.bi_tau),
    }
    write_json(cfg, "noise.json", &noise)
}

fn report(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let ds = load_primary(cfg)?;
    let frac = cfg.settings.train_frac;
    let (train, same_test) = split_chronological(&ds, frac)?;
    let (test, truth) = match (&cfg.test_gyro, &cfg.test_reference) {
        (Some(g), Some(r)) => (split_chronological(&load_dataset(g, r, cfg)?, frac)?.1, cfg.test_truth.as_deref()),
        (None, None) => (same_test, cfg.truth.as_deref()),
        _ => return Err(UsageError("--test-gyro and --test-reference go together".into()).into()),
    };
    let (selected, analysis) = resolve_features(&train, &cfg.settings, cfg.seed)?;
    if let Some(fa) = &analysis {
        write_features(cfg, fa)?;
    }
    let frame = eval_frame(&test, &selected, &cfg.settings.features.lags)?;
    let mask = steady_mask(&frame, truth, cfg)?;
    let echo = serde_json::to_value(cfg)?;

    let mut reports = Vec::new();
    for kind in [ModelKind::Linear, ModelKind::Gbrt, ModelKind::Mlp] {
        let fitted = fit_calibrator(kind, &train, &selected, &cfg.settings)?;
        let (rep, yhat) = evaluate_model(&fitted, &frame, &mask, &cfg.settings.eval, echo.clone())?;
        fitted.model.to_json(create(cfg, &format!("model_{kind}.json"))?)?;
        write_json(cfg, &format!("report_{kind}.json"), &rep)?;
        write_predictions_csv(create(cfg, &format!("calibrated_{kind}.csv"))?, &frame.timestamps, &yhat)?;
        if let Some(curve) = &rep.adev {
            curve.write_csv(create(cfg, &format!("adev_{kind}.csv"))?)?;
        }
        reports.push(rep);
    }
    let rows = compare_report(&reports)?;
    write_comparison_csv(create(cfg, "comparison.csv")?, &rows)?;
    println!("{:<8} {:>12} {:>10} {:>10} {:>10} {:>9}", "model", "mse", "r2", "arw", "bi", "train_s");
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for r in &rows {
        println!(
            "{:<8} {:>12.4e} {:>10.6} {:>10} {:>10} {:>9.2}",
            r.model.to_string(),
            r.mse,
            r.r2,
            opt(r.arw),
            opt(r.bi),
            r.train_s
        );
    }
    Ok(())
}
