//! Constant scale-factor calibration, `omega = s_linear * sense_in`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataio::{fmt_f64, AlignedDataset, RefRecord};
use crate::error::{Error, Result};

/// Minimum samples a segment must cover to be fitted.
pub const MIN_SEGMENT_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSegment {
    pub start: f64,
    pub end: f64,
    /// Mean reference rate over the segment, degrees per second.
    pub commanded_rate: f64,
    /// True when the rate is zero within tolerance.
    pub steady: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// Degrees per second per unit of `sense_in`.
    pub s_linear: f64,
    pub source_segment: RateSegment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Fit from the first nonzero segment only.
    #[default]
    FirstSegment,
    /// Average the per-segment factors of all nonzero segments.
    AllSegments,
}

/// Finds maximal runs where every rate lies within `rate_tol` of the run mean
/// and the run lasts at least `min_dwell` seconds.
pub fn detect_segments(reference: &[RefRecord], rate_tol: f64, min_dwell: f64) -> Vec<RateSegment> {
    let n = reference.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        let mut j = i;
        while j < n {
            let w = reference[j].omega;
            let (lo2, hi2, sum2) = (lo.min(w), hi.max(w), sum + w);
            let mean = sum2 / (j - i + 1) as f64;
            if hi2 - mean > rate_tol || mean - lo2 > rate_tol {
                break;
            }
            (lo, hi, sum) = (lo2, hi2, sum2);
            j += 1;
        }
        let (start, end) = (reference[i].t, reference[j - 1].t);
        if end - start >= min_dwell && j > i + 1 {
            let mean = sum / (j - i) as f64;
            out.push(RateSegment {
                start,
                end,
                commanded_rate: mean,
                steady: mean.abs() <= rate_tol,
            });
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

fn segment_mean(ds: &AlignedDataset, seg: &RateSegment) -> Result<f64> {
    let col = ds.column("sense_in")?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (t, v) in ds.timestamps.iter().zip(col.iter()) {
        if *t >= seg.start && *t <= seg.end {
            sum += v;
            count += 1;
        }
    }
    if count < MIN_SEGMENT_SAMPLES {
        return Err(Error::InsufficientOverlap {
            needed: MIN_SEGMENT_SAMPLES,
            have: count,
        });
    }
    Ok(sum / count as f64)
}

/// `s_linear = commanded_rate / mean(sense_in)` over the segment.
pub fn fit_scale_factor(ds: &AlignedDataset, seg: &RateSegment) -> Result<LinearModel> {
    let mean = segment_mean(ds, seg)?;
    let s = seg.commanded_rate / mean;
    if mean.abs() < 1e-12 || !s.is_finite() || s == 0.0 {
        return Err(Error::DegenerateSegment);
    }
    Ok(LinearModel {
        s_linear: s,
        source_segment: *seg,
    })
}

/// Fits from the nonzero segments according to `mode`.
pub fn fit_linear(ds: &AlignedDataset, segments: &[RateSegment], mode: FitMode) -> Result<LinearModel> {
    let mut nonzero = segments.iter().filter(|s| !s.steady);
    match mode {
        FitMode::FirstSegment => {
            let seg = nonzero.next().ok_or(Error::DegenerateSegment)?;
            fit_scale_factor(ds, seg)
        }
        FitMode::AllSegments => {
            let fits: Vec<LinearModel> = nonzero
                .map(|s| fit_scale_factor(ds, s))
                .collect::<Result<_>>()?;
            let first = fits.first().ok_or(Error::DegenerateSegment)?;
            Ok(LinearModel {
                s_linear: fits.iter().map(|f| f.s_linear).sum::<f64>() / fits.len() as f64,
                source_segment: first.source_segment,
            })
        }
    }
}

#[derive(Debug)]
pub struct ScaleFactorRow {
    /// One-based position among the nonzero segments.
    pub peak_index: usize,
    pub segment: RateSegment,
    pub scale_factor: Result<f64>,
}

/// One row per nonzero segment; fitting failures stay in their row.
pub fn scale_factor_table(ds: &AlignedDataset, segments: &[RateSegment]) -> Vec<ScaleFactorRow> {
    segments
        .iter()
        .filter(|s| !s.steady)
        .enumerate()
        .map(|(k, s)| ScaleFactorRow {
            peak_index: k + 1,
            segment: *s,
            scale_factor: fit_scale_factor(ds, s).map(|m| m.s_linear),
        })
        .collect()
}

/// Writes `peak_index,commanded_rate,scale_factor`; failed rows leave the factor empty.
pub fn write_table_csv<W: Write>(sink: W, rows: &[ScaleFactorRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["peak_index", "commanded_rate", "scale_factor"])?;
    for r in rows {
        let sf = r.scale_factor.as_ref().map(|v| fmt_f64(*v)).unwrap_or_default();
        w.write_record([r.peak_index.to_string(), fmt_f64(r.segment.commanded_rate), sf])?;
    }
    w.flush()?;
    Ok(())
}

pub fn apply_linear(model: &LinearModel, sense_in: &[f64]) -> Vec<f64> {
    sense_in.iter().map(|v| model.s_linear * v).collect()
}
