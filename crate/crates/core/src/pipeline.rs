//! End-to-end stages shared by the command-line tool and the test suites:
//! feature preparation, model fitting, evaluation and model comparison.

use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::{fmt_f64, split_chronological, AlignedDataset, GyroRecord, RefRecord, GYRO_CHANNELS};
use crate::error::{Error, Result};
use crate::features::{self, CorrelationMatrix, ImportanceReport};
use crate::gbrt::{self, GbrtModel, GbrtParams};
use crate::linear::{self, FitMode, LinearModel, RateSegment};
use crate::metrics::{self, AdevCurve, NoiseMetrics};
use crate::mlp::{self, MlpModel, TrainConfig};
use crate::Predictor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Gbrt,
    Mlp,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Linear => "linear",
            ModelKind::Gbrt => "gbrt",
            ModelKind::Mlp => "mlp",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "gbrt" => Ok(ModelKind::Gbrt),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(Error::InvalidConfig(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Any of the three calibrators.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Linear(LinearModel),
    Gbrt(GbrtModel),
    Mlp(MlpModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Linear(_) => ModelKind::Linear,
            Model::Gbrt(_) => ModelKind::Gbrt,
            Model::Mlp(_) => ModelKind::Mlp,
        }
    }

    /// Columns the model reads, by name.
    pub fn feature_names(&self) -> Vec<String> {
        match self {
            Model::Linear(_) => vec!["sense_in".to_string()],
            Model::Gbrt(m) => m.feature_names.clone(),
            Model::Mlp(m) => m.feature_names.clone(),
        }
    }

    /// Predicts rate for every row, picking the model's columns by name.
    pub fn predict_dataset(&self, ds: &AlignedDataset) -> Result<Vec<f64>> {
        match self {
            Model::Linear(m) => Ok(linear::apply_linear(m, &ds.column("sense_in")?.to_vec())),
            Model::Gbrt(m) => m.predict(ds.select(&m.feature_names)?.features.view()),
            Model::Mlp(m) => m.predict(ds.select(&m.feature_names)?.features.view()),
        }
    }

    pub fn to_json<W: Write>(&self, sink: W) -> Result<()> {
        match self {
            Model::Linear(m) => serde_json::to_writer_pretty(sink, m)?,
            Model::Gbrt(m) => m.to_json(sink)?,
            Model::Mlp(m) => m.to_json(sink)?,
        }
        Ok(())
    }

    /// Reads any model file, telling the kinds apart by their keys.
    pub fn from_json<R: Read>(mut source: R) -> Result<Self> {
        let mut buf = Vec::new();
        source.read_to_end(&mut buf)?;
        let mut de = serde_json::Deserializer::from_slice(&buf);
        de.disable_recursion_limit();
        let probe: serde_json::Map<String, serde_json::Value> = match serde_json::Value::deserialize(&mut de)? {
            serde_json::Value::Object(map) => map,
            _ => return Err(Error::InvalidConfig("model file is not a JSON object".into())),
        };
        if probe.contains_key("trees") {
            Ok(Model::Gbrt(GbrtModel::from_json(buf.as_slice())?))
        } else if probe.contains_key("layer_dims") {
            Ok(Model::Mlp(MlpModel::from_json(buf.as_slice())?))
        } else if probe.contains_key("s_linear") {
            Ok(Model::Linear(serde_json::from_slice(&buf)?))
        } else {
            Err(Error::InvalidConfig("unrecognized model file".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSettings {
    /// Base channels fed to the models; `None` runs the selection rule.
    pub selected: Option<Vec<String>>,
    pub dup_threshold: f64,
    pub pair_threshold: f64,
    pub importance_repeats: usize,
    pub lags: Vec<usize>,
}

impl Default for FeatureSettings {
    fn default() -> Self {
        Self {
            selected: None,
            dup_threshold: features::DEFAULT_DUP_THRESHOLD,
            pair_threshold: features::DEFAULT_PAIR_THRESHOLD,
            importance_repeats: 3,
            lags: features::DEFAULT_LAGS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearSettings {
    pub rate_tol: f64,
    pub min_dwell: f64,
    pub mode: FitMode,
}

impl Default for LinearSettings {
    fn default() -> Self {
        Self {
            rate_tol: 0.5,
            min_dwell: 2.0,
            mode: FitMode::FirstSegment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    /// Points per decade of the averaging-time grid.
    pub tau_per_decade: usize,
    pub bins: usize,
    pub flicker_correction: bool,
    /// Reference rates within this band count as rest when no truth is given.
    pub steady_tol: f64,
    pub steady_min_dwell: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            tau_per_decade: 20,
            bins: 50,
            flicker_correction: false,
            steady_tol: 0.5,
            steady_min_dwell: 2.0,
        }
    }
}

/// Everything needed to fit and score one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub train_frac: f64,
    /// Share of the training rows held out for validation and importance.
    pub val_frac: f64,
    pub features: FeatureSettings,
    pub linear: LinearSettings,
    pub gbrt: GbrtParams,
    pub mlp: TrainConfig,
    pub hidden: Vec<usize>,
    pub eval: EvalSettings,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            train_frac: 0.7,
            val_frac: 0.15,
            features: FeatureSettings::default(),
            linear: LinearSettings::default(),
            gbrt: GbrtParams::default(),
            mlp: TrainConfig::default(),
            hidden: mlp::DEFAULT_HIDDEN.to_vec(),
            eval: EvalSettings::default(),
        }
    }
}

/// Splits the training part of a chronological split into fit and
/// validation rows, validation last.
pub fn split_validation(train: &AlignedDataset, val_frac: f64) -> Result<(AlignedDataset, AlignedDataset)> {
    split_chronological(train, 1.0 - val_frac)
}

/// Reference rate on the dataset clock, as records for segment detection.
pub fn target_records(ds: &AlignedDataset) -> Vec<RefRecord> {
    ds.timestamps
        .iter()
        .zip(&ds.target)
        .map(|(&t, &omega)| RefRecord { t, omega })
        .collect()
}

/// Output of the feature analysis stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureAnalysis {
    pub corr: CorrelationMatrix,
    pub importance: ImportanceReport,
    pub selected: Vec<String>,
}

/// Correlation over `train`, permutation importance of a boosted model
/// fit on the first part of `train` and scored on its held-out tail, and the
/// selection rule applied to both.
pub fn analyze_features(
    train: &AlignedDataset,
    settings: &ModelSettings,
    seed: u64,
) -> Result<FeatureAnalysis> {
    let corr = features::correlation_matrix(train.features.view(), &train.feature_names)?;
    let (fit, held) = split_validation(train, settings.val_frac)?;
    let model = gbrt::train_gbrt(&fit, &settings.gbrt)?;
    let importance = features::permutation_importance(&model, &held, settings.features.importance_repeats, seed)?;
    let selected = features::select_features(
        &corr,
        &importance,
        settings.features.dup_threshold,
        settings.features.pair_threshold,
    )?;
    Ok(FeatureAnalysis {
        corr,
        importance,
        selected,
    })
}

/// Keeps `selected` base channels and appends their lags.
pub fn prepare(ds: &AlignedDataset, selected: &[String], lags: &[usize]) -> Result<AlignedDataset> {
    features::add_lags(&ds.select(selected)?, lags)
}

/// A fitted model and how long fitting took.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: Model,
    pub train_seconds: f64,
    pub history: Option<mlp::History>,
    pub segments: Vec<RateSegment>,
}

/// Fits one calibrator. The linear model is fit from rate segments found in
/// `train`'s reference; the others train on all columns of `train`, with
/// `val` used for early stopping.
pub fn fit_model(
    kind: ModelKind,
    train: &AlignedDataset,
    val: &AlignedDataset,
    settings: &ModelSettings,
) -> Result<Fitted> {
    let start = Instant::now();
    let mut history = None;
    let mut segments = Vec::new();
    let model = match kind {
        ModelKind::Linear => {
            let ls = &settings.linear;
            segments = linear::detect_segments(&target_records(train), ls.rate_tol, ls.min_dwell);
            Model::Linear(linear::fit_linear(train, &segments, ls.mode)?)
        }
        ModelKind::Gbrt => Model::Gbrt(gbrt::train_gbrt(train, &settings.gbrt)?),
        ModelKind::Mlp => {
            let (m, h) = mlp::train_mlp(train, val, &settings.mlp, &settings.hidden)?;
            history = Some(h);
            Model::Mlp(m)
        }
    };
    Ok(Fitted {
        model,
        train_seconds: start.elapsed().as_secs_f64(),
        history,
        segments,
    })
}

/// Base channels for the models: the fixed list in `settings`, or the
/// selection rule applied to `train` (whose analysis is returned too).
pub fn resolve_features(
    train: &AlignedDataset,
    settings: &ModelSettings,
    seed: u64,
) -> Result<(Vec<String>, Option<FeatureAnalysis>)> {
    match &settings.features.selected {
        Some(names) => Ok((names.clone(), None)),
        None => {
            let fa = analyze_features(train, settings, seed)?;
            Ok((fa.selected.clone(), Some(fa)))
        }
    }
}

/// Fits `kind` on the raw channels of `train`. The validation tail is held
/// out; the boosted and neural models see `selected` plus lags.
pub fn fit_calibrator(
    kind: ModelKind,
    train: &AlignedDataset,
    selected: &[String],
    settings: &ModelSettings,
) -> Result<Fitted> {
    let (fit, val) = split_validation(train, settings.val_frac)?;
    if kind == ModelKind::Linear {
        return fit_model(kind, &fit, &val, settings);
    }
    let lags = &settings.features.lags;
    fit_model(kind, &prepare(&fit, selected, lags)?, &prepare(&val, selected, lags)?, settings)
}

/// Test rows shared by every model: `selected` and `sense_in`, with lags.
pub fn eval_frame(test: &AlignedDataset, selected: &[String], lags: &[usize]) -> Result<AlignedDataset> {
    let mut cols = selected.to_vec();
    if !cols.iter().any(|c| c == "sense_in") {
        cols.push("sense_in".to_string());
    }
    prepare(test, &cols, lags)
}

/// Splits model column names such as `sense_in_lag_3` into base channels and
/// lags, both in first-seen order.
pub fn input_layout(names: &[String]) -> (Vec<String>, Vec<usize>) {
    let (mut bases, mut lags) = (Vec::<String>::new(), Vec::new());
    for name in names {
        let (base, lag) = match name.rsplit_once("_lag_").map(|(b, k)| (b, k.parse::<usize>())) {
            Some((b, Ok(k))) => (b, Some(k)),
            _ => (name.as_str(), None),
        };
        if !bases.iter().any(|b| b == base) {
            bases.push(base.to_string());
        }
        if let Some(k) = lag.filter(|k| !lags.contains(k)) {
            lags.push(k);
        }
    }
    (bases, lags)
}

/// Gyro channels without a reference; the target is zero.
pub fn gyro_dataset(gyro: &[GyroRecord]) -> Result<AlignedDataset> {
    let mut rows = Vec::with_capacity(gyro.len() * GYRO_CHANNELS.len());
    for g in gyro {
        rows.extend_from_slice(&g.channels());
    }
    let x = ndarray::Array2::from_shape_vec((gyro.len(), GYRO_CHANNELS.len()), rows)
        .expect("row buffer has n * 10 entries");
    AlignedDataset::new(
        gyro.iter().map(|g| g.t).collect(),
        x,
        GYRO_CHANNELS.map(str::to_string).to_vec(),
        vec![0.0; gyro.len()],
    )
}

/// Longest run of consecutive `true` entries.
pub fn longest_run(mask: &[bool]) -> Option<Range<usize>> {
    let mut best: Option<Range<usize>> = None;
    let mut start = None;
    for (i, &m) in mask.iter().chain(std::iter::once(&false)).enumerate() {
        match (m, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if best.as_ref().is_none_or(|b| i - s > b.len()) {
                    best = Some(s..i);
                }
                start = None;
            }
            _ => {}
        }
    }
    best
}

/// Rows whose true rate is exactly zero, looked up by timestamp.
pub fn steady_mask_from_truth(ds: &AlignedDataset, truth_t: &[f64], truth_omega: &[f64]) -> Vec<bool> {
    let mut j = 0;
    ds.timestamps
        .iter()
        .map(|&t| {
            while j + 1 < truth_t.len() && truth_t[j + 1] <= t {
                j += 1;
            }
            let at = truth_t.get(j).is_some_and(|&tj| tj == t);
            let bracket_zero = truth_omega.get(j) == Some(&0.0)
                && (at || truth_omega.get(j + 1).is_none_or(|w| *w == 0.0));
            !truth_t.is_empty() && t >= truth_t[0] && bracket_zero
        })
        .collect()
}

/// Rows inside detected zero-rate segments of the dataset's own reference.
pub fn steady_mask_from_reference(ds: &AlignedDataset, settings: &EvalSettings) -> Vec<bool> {
    let segs = linear::detect_segments(&target_records(ds), settings.steady_tol, settings.steady_min_dwell);
    ds.timestamps
        .iter()
        .map(|&t| segs.iter().any(|s| s.steady && t >= s.start && t <= s.end))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub mean: f64,
    pub std: f64,
    pub max_abs: f64,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_s: f64,
    pub predict_s: f64,
    pub rows_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_kind: ModelKind,
    pub n_rows: usize,
    /// Hex digest of the test timestamps and targets.
    pub test_hash: String,
    pub mse: f64,
    pub r2: f64,
    /// Rows in the steady slice used for the noise figures.
    pub steady_rows: usize,
    pub noise: Option<NoiseMetrics>,
    pub adev: Option<AdevCurve>,
    pub residual: ResidualSummary,
    pub timing: Timing,
    pub config: serde_json::Value,
}

/// Scores predictions against the test target; noise figures come from the
/// longest steady run in `steady_mask`.
pub fn evaluate_predictions(
    kind: ModelKind,
    test: &AlignedDataset,
    yhat: &[f64],
    steady_mask: &[bool],
    settings: &EvalSettings,
    timing: Timing,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let mse = metrics::mse(&test.target, yhat)?;
    let r2 = metrics::r2(&test.target, yhat)?;
    let res = metrics::residual_report(&test.target, yhat, settings.bins)?;
    let (adev, steady_rows) = match longest_run(steady_mask) {
        Some(run) if run.len() >= 5 => {
            let rate = &yhat[run.clone()];
            let fs = 1.0 / test.sample_interval;
            let taus = metrics::default_tau_grid(rate.len(), fs, settings.tau_per_decade);
            (Some(metrics::overlapping_adev(rate, fs, &taus)?), run.len())
        }
        _ => (None, 0),
    };
    let noise = adev
        .as_ref()
        .map(|c| NoiseMetrics::from_curve(c, settings.flicker_correction))
        .transpose()?;
    Ok(EvalReport {
        model_kind: kind,
        n_rows: test.n_rows(),
        test_hash: format!("{:016x}", test.fingerprint()),
        mse,
        r2,
        steady_rows,
        noise,
        adev,
        residual: ResidualSummary {
            mean: res.mean,
            std: res.std,
            max_abs: res.max_abs,
            bin_edges: res.bin_edges,
            counts: res.counts,
        },
        timing,
        config,
    })
}

/// Predicts on `test` and scores the result.
pub fn evaluate_model(
    fitted: &Fitted,
    test: &AlignedDataset,
    steady_mask: &[bool],
    settings: &EvalSettings,
    config: serde_json::Value,
) -> Result<(EvalReport, Vec<f64>)> {
    let start = Instant::now();
    let yhat = fitted.model.predict_dataset(test)?;
    let predict_s = start.elapsed().as_secs_f64();
    let timing = Timing {
        train_s: fitted.train_seconds,
        predict_s,
        rows_per_s: test.n_rows() as f64 / predict_s.max(1e-9),
    };
    let report = evaluate_predictions(fitted.model.kind(), test, &yhat, steady_mask, settings, timing, config)?;
    Ok((report, yhat))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: ModelKind,
    pub mse: f64,
    pub r2: f64,
    pub arw: Option<f64>,
    pub bi: Option<f64>,
    pub train_s: f64,
    pub rows_per_s: f64,
}

/// One row per report; all reports must cover the same test rows.
pub fn compare_report(reports: &[EvalReport]) -> Result<Vec<ComparisonRow>> {
    if reports.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            have: reports.len(),
        });
    }
    let first = &reports[0];
    if reports
        .iter()
        .any(|r| r.n_rows != first.n_rows || r.test_hash != first.test_hash)
    {
        return Err(Error::InconsistentTestSets);
    }
    Ok(reports
        .iter()
        .map(|r| ComparisonRow {
            model: r.model_kind,
            mse: r.mse,
            r2: r.r2,
            arw: r.noise.as_ref().and_then(|n| n.arw),
            bi: r.noise.as_ref().map(|n| n.bi),
            train_s: r.timing.train_s,
            rows_per_s: r.timing.rows_per_s,
        })
        .collect())
}

pub fn write_comparison_csv<W: Write>(sink: W, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["model", "mse", "r2", "arw", "bi", "train_s", "rows_per_s"])?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.model.to_string(),
            fmt_f64(r.mse),
            fmt_f64(r.r2),
            opt(r.arw),
            opt(r.bi),
            fmt_f64(r.train_s),
            fmt_f64(r.rows_per_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `t,omega_hat`.
pub fn write_predictions_csv<W: Write>(sink: W, t: &[f64], yhat: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["t", "omega_hat"])?;
    for (a, b) in t.iter().zip(yhat) {
        w.write_record([fmt_f64(*a), fmt_f64(*b)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn ds(y: Vec<f64>) -> AlignedDataset {
        let n = y.len();
        let x = Array2::from_shape_vec((n, 1), y.iter().map(|v| v * 10.0).collect()).unwrap();
        AlignedDataset::new((0..n).map(|i| i as f64).collect(), x, vec!["sense_in".into()], y).unwrap()
    }

    fn report(kind: ModelKind, test: &AlignedDataset, yhat: &[f64]) -> EvalReport {
        let timing = Timing {
            train_s: 0.0,
            predict_s: 0.0,
            rows_per_s: 0.0,
        };
        let mask = vec![false; test.n_rows()];
        evaluate_predictions(kind, test, yhat, &mask, &EvalSettings::default(), timing, serde_json::Value::Null)
            .unwrap()
    }

    #[test]
    fn model_kind_parses() {
        for k in [ModelKind::Linear, ModelKind::Gbrt, ModelKind::Mlp] {
            assert_eq!(k.to_string().parse::<ModelKind>().unwrap(), k);
        }
        assert!("svm".parse::<ModelKind>().is_err());
    }

    #[test]
    fn longest_run_picks_first_longest() {
        assert_eq!(longest_run(&[]), None);
        assert_eq!(longest_run(&[false, false]), None);
        assert_eq!(longest_run(&[true, true, false, true, true]), Some(0..2));
        assert_eq!(longest_run(&[false, true, false, true, true, true]), Some(3..6));
    }

    #[test]
    fn steady_mask_by_truth() {
        let d = ds(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let mask = steady_mask_from_truth(&d, &[0.0, 1.0, 2.0, 3.0, 4.0], &[5.0, 0.0, 0.0, 7.0, 0.0]);
        assert_eq!(mask, vec![false, true, true, false, true]);
    }

    #[test]
    fn perfect_predictions_score_perfectly() {
        let d = ds(vec![1.0, 2.0, 3.0, 4.0]);
        let r = report(ModelKind::Gbrt, &d, &d.target);
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.r2, 1.0);
    }

    #[test]
    fn compare_requires_same_test_set() {
        let d = ds(vec![1.0, 2.0, 3.0, 4.0]);
        let a = report(ModelKind::Linear, &d, &[1.0, 2.0, 3.0, 5.0]);
        let rows = compare_report(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(rows[0], rows[1]);
        let other = ds(vec![1.0, 2.0, 3.0, 4.5]);
        let b = report(ModelKind::Mlp, &other, &other.target);
        assert!(matches!(compare_report(&[a.clone(), b]), Err(Error::InconsistentTestSets)));
        assert!(compare_report(&[a]).is_err());
    }

    #[test]
    fn model_files_round_trip() {
        let d = ds((0..40).map(|i| (i % 7) as f64).collect());
        let settings = ModelSettings {
            gbrt: GbrtParams {
                n_trees: 3,
                ..GbrtParams::default()
            },
            ..ModelSettings::default()
        };
        let fitted = fit_model(ModelKind::Gbrt, &d, &d, &settings).unwrap();
        let mut buf = Vec::new();
        fitted.model.to_json(&mut buf).unwrap();
        let back = Model::from_json(buf.as_slice()).unwrap();
        assert_eq!(back.predict_dataset(&d).unwrap(), fitted.model.predict_dataset(&d).unwrap());

        let lin = Model::Linear(LinearModel {
            s_linear: 0.1,
            source_segment: RateSegment {
                start: 0.0,
                end: 1.0,
                commanded_rate: 1.0,
                steady: false,
            },
        });
        let mut buf = Vec::new();
        lin.to_json(&mut buf).unwrap();
        assert_eq!(Model::from_json(buf.as_slice()).unwrap(), lin);
        assert!(Model::from_json(&b"[1]"[..]).is_err());
    }

    #[test]
    fn input_layout_recovers_bases_and_lags() {
        let names: Vec<String> = ["sense_in", "dpe", "sense_in_lag_1", "sense_in_lag_3", "dpe_lag_1", "dpe_lag_3"]
            .map(String::from)
            .to_vec();
        let (bases, lags) = input_layout(&names);
        assert_eq!(bases, ["sense_in", "dpe"]);
        assert_eq!(lags, [1, 3]);
        let (bases, lags) = input_layout(&["x_lag_y".to_string()]);
        assert_eq!(bases, ["x_lag_y"]);
        assert!(lags.is_empty());
    }

    #[test]
    fn gyro_dataset_keeps_channel_order() {
        let g: Vec<GyroRecord> = (0..3)
            .map(|i| GyroRecord::from_channels(i as f64, std::array::from_fn(|c| (10 * i + c) as f64)))
            .collect();
        let d = gyro_dataset(&g).unwrap();
        assert_eq!(d.feature_names, GYRO_CHANNELS.map(String::from).to_vec());
        assert_eq!(d.features[[2, 9]], 29.0);
        assert_eq!(d.target, [0.0; 3]);
    }

    #[test]
    fn eval_frame_adds_sense_in() {
        let g: Vec<GyroRecord> = (0..10)
            .map(|i| GyroRecord::from_channels(i as f64, std::array::from_fn(|c| (i * c) as f64)))
            .collect();
        let d = gyro_dataset(&g).unwrap();
        let f = eval_frame(&d, &["drive_in".to_string()], &[2]).unwrap();
        assert_eq!(f.feature_names, ["drive_in", "sense_in", "drive_in_lag_2", "sense_in_lag_2"]);
        assert_eq!(f.n_rows(), 8);
    }
}
