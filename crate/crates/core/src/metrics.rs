//! Accuracy and inertial-noise metrics: MSE, R², overlapping Allan deviation,
//! angle random walk / bias instability extraction and residual summaries.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataio::fmt_f64;
use crate::error::{Error, Result};

/// Flicker-floor constant relating the Allan deviation minimum to bias instability.
pub const FLICKER_FLOOR: f64 = 0.664;

/// Allowed deviation of the local log-log slope from -1/2 in the ARW region.
pub const ARW_SLOPE_TOLERANCE: f64 = 0.15;

fn check_lengths(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::LengthMismatch {
            left: y.len(),
            right: yhat.len(),
        });
    }
    Ok(())
}

/// Mean squared error.
pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y, yhat)?;
    if y.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, have: 0 });
    }
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / y.len() as f64)
}

/// Coefficient of determination, `1 - SSE / SST`.
pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y, yhat)?;
    if y.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            have: y.len(),
        });
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if sst == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - sse / sst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdevCurve {
    /// Averaging times, seconds, strictly increasing.
    pub taus: Vec<f64>,
    /// Allan deviation at each tau, in the units of the input series.
    pub sigma: Vec<f64>,
    pub sample_rate: f64,
    pub n_samples: usize,
}

impl AdevCurve {
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["tau", "sigma"])?;
        for (t, s) in self.taus.iter().zip(&self.sigma) {
            w.write_record([fmt_f64(*t), fmt_f64(*s)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Linear interpolation of sigma in log-log space; `None` outside the curve.
    pub fn sigma_at(&self, tau: f64) -> Option<f64> {
        let k = self.taus.iter().position(|&t| t >= tau)?;
        if self.taus[k] == tau {
            return Some(self.sigma[k]);
        }
        if k == 0 {
            return None;
        }
        let (t0, t1) = (self.taus[k - 1].ln(), self.taus[k].ln());
        let (s0, s1) = (self.sigma[k - 1].ln(), self.sigma[k].ln());
        let w = (tau.ln() - t0) / (t1 - t0);
        Some((s0 + w * (s1 - s0)).exp())
    }
}

/// Largest cluster size usable by the overlapping estimator for `n` samples.
pub fn max_cluster_size(n: usize) -> usize {
    n.saturating_sub(1) / 2
}

/// Log-spaced averaging times, about `per_decade` points per decade, snapped
/// to whole multiples of the sample period and deduplicated.
pub fn default_tau_grid(n: usize, sample_rate: f64, per_decade: usize) -> Vec<f64> {
    let m_max = max_cluster_size(n);
    if m_max == 0 {
        return Vec::new();
    }
    let decades = (m_max as f64).log10();
    let steps = (decades * per_decade as f64).ceil() as usize;
    let mut ms: Vec<usize> = (0..=steps)
        .map(|k| {
            let m = 10f64.powf(k as f64 / per_decade as f64).round() as usize;
            m.clamp(1, m_max)
        })
        .collect();
    ms.push(m_max);
    ms.sort_unstable();
    ms.dedup();
    ms.into_iter().map(|m| m as f64 / sample_rate).collect()
}

/// Overlapping Allan variance for cluster size `m`.
fn overlapping_avar(x: &[f64], m: usize) -> f64 {
    let n = x.len();
    let terms = n - 2 * m + 1;
    // Window sum of x[i+m] - x[i] over i = j..j+m equals m * (A[j+m] - A[j]).
    // Sliding over differences keeps the rounding error at the scale of the
    // differences rather than the scale of the samples.
    let mut window: f64 = (0..m).map(|i| x[i + m] - x[i]).sum();
    let mut acc = window * window;
    for j in 1..terms {
        window += (x[j + 2 * m - 1] - x[j + m - 1]) - (x[j + m - 1] - x[j - 1]);
        acc += window * window;
    }
    acc / (2.0 * terms as f64 * (m * m) as f64)
}

/// Overlapping Allan deviation of a rate series sampled at `sample_rate`.
///
/// Every tau must be a whole multiple `m` of the sample period with
/// `1 <= m <= (n - 1) / 2`.
pub fn overlapping_adev(rate: &[f64], sample_rate: f64, taus: &[f64]) -> Result<AdevCurve> {
    let n = rate.len();
    if n < 3 {
        return Err(Error::TooFewSamples { needed: 3, have: n });
    }
    if !(sample_rate > 0.0) {
        return Err(Error::InvalidConfig("sample rate must be positive".into()));
    }
    let m_max = max_cluster_size(n);
    let mut sigma = Vec::with_capacity(taus.len());
    let mut prev = 0.0;
    for &tau in taus {
        let exact = tau * sample_rate;
        let m = exact.round();
        if !(m >= 1.0) || (exact - m).abs() > 1e-6 * m.max(1.0) || !(tau > prev) {
            return Err(Error::InvalidTau(tau));
        }
        let m = m as usize;
        if m > m_max {
            return Err(Error::TauTooLarge {
                tau,
                max: m_max as f64 / sample_rate,
            });
        }
        sigma.push(overlapping_avar(rate, m).sqrt());
        prev = tau;
    }
    Ok(AdevCurve {
        taus: taus.to_vec(),
        sigma,
        sample_rate,
        n_samples: n,
    })
}

/// Allan deviation on [`default_tau_grid`] with 20 points per decade.
pub fn adev_default(rate: &[f64], sample_rate: f64) -> Result<AdevCurve> {
    let taus = default_tau_grid(rate.len(), sample_rate, 20);
    overlapping_adev(rate, sample_rate, &taus)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArwEstimate {
    /// Angle random walk, degrees per root-hour.
    pub arw: f64,
    /// Averaging-time range used for the fit.
    pub fit_range: (f64, f64),
}

/// Angle random walk from the -1/2 slope region of an Allan deviation curve.
///
/// Consecutive points whose local log-log slope lies within
/// [`ARW_SLOPE_TOLERANCE`] of -1/2 form candidate runs; the longest run with
/// at least three points (earliest on ties) is fit with the slope pinned at
/// -1/2, and the fitted deviation at tau = 1 s is converted from (deg/s) to
/// deg/sqrt(h) by the factor 60.
pub fn extract_arw(curve: &AdevCurve) -> Result<ArwEstimate> {
    let k = curve.taus.len();
    let qualifies = |i: usize| {
        let (s0, s1) = (curve.sigma[i], curve.sigma[i + 1]);
        if !(s0 > 0.0 && s1 > 0.0) {
            return false;
        }
        let slope = (s1.ln() - s0.ln()) / (curve.taus[i + 1].ln() - curve.taus[i].ln());
        (slope + 0.5).abs() <= ARW_SLOPE_TOLERANCE
    };

    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i + 1 < k {
        if !qualifies(i) {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < k && qualifies(i) {
            i += 1;
        }
        // points start..=i
        let len = i - start + 1;
        if len >= 3 && best.is_none_or(|(a, b)| len > b - a + 1) {
            best = Some((start, i));
        }
    }
    let (a, b) = best.ok_or(Error::NoSlopeRegion)?;

    let pts = b - a + 1;
    let log_n: f64 = (a..=b)
        .map(|j| curve.sigma[j].ln() + 0.5 * curve.taus[j].ln())
        .sum::<f64>()
        / pts as f64;
    Ok(ArwEstimate {
        arw: 60.0 * log_n.exp(),
        fit_range: (curve.taus[a], curve.taus[b]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiEstimate {
    /// Bias instability, degrees per hour.
    pub bi: f64,
    /// Averaging time at which the floor occurs.
    pub bi_tau: f64,
    /// True when the minimum sits at the largest tau (floor not resolved).
    pub at_boundary: bool,
    pub flicker_corrected: bool,
}

/// Bias instability as the minimum of the Allan deviation, in deg/h.
/// With `flicker_correction` the minimum is divided by [`FLICKER_FLOOR`].
pub fn extract_bi(curve: &AdevCurve, flicker_correction: bool) -> Result<BiEstimate> {
    let (idx, &min) = curve
        .sigma
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or(Error::TooFewSamples { needed: 1, have: 0 })?;
    let scale = if flicker_correction { 1.0 / FLICKER_FLOOR } else { 1.0 };
    Ok(BiEstimate {
        bi: 3600.0 * min * scale,
        bi_tau: curve.taus[idx],
        at_boundary: idx + 1 == curve.sigma.len(),
        flicker_corrected: flicker_correction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseMetrics {
    /// deg/sqrt(h); `None` when the curve has no -1/2 region.
    pub arw: Option<f64>,
    /// deg/h
    pub bi: f64,
    pub bi_tau: f64,
    pub bi_at_boundary: bool,
    pub flicker_corrected: bool,
    pub slope_fit_range: Option<(f64, f64)>,
}

impl NoiseMetrics {
    pub fn from_curve(curve: &AdevCurve, flicker_correction: bool) -> Result<Self> {
        let arw = extract_arw(curve).ok();
        let bi = extract_bi(curve, flicker_correction)?;
        Ok(Self {
            arw: arw.map(|a| a.arw),
            bi: bi.bi,
            bi_tau: bi.bi_tau,
            bi_at_boundary: bi.at_boundary,
            flicker_corrected: bi.flicker_corrected,
            slope_fit_range: arw.map(|a| a.fit_range),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// `yhat - y`
    pub residuals: Vec<f64>,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    pub max_abs: f64,
}

/// Residuals `yhat - y` with an equal-width histogram over their range.
pub fn residual_report(y: &[f64], yhat: &[f64], bins: usize) -> Result<ResidualReport> {
    check_lengths(y, yhat)?;
    if bins == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
    }
    if y.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, have: 0 });
    }
    let residuals: Vec<f64> = yhat.iter().zip(y).map(|(p, t)| p - t).collect();
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let std = (residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    let max_abs = residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let lo = residuals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = residuals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let width = (hi - lo) / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|k| lo + width * k as f64).collect();
    let mut counts = vec![0usize; bins];
    for r in &residuals {
        let k = (((r - lo) / width).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(ResidualReport {
        residuals,
        bin_edges,
        counts,
        mean,
        std,
        max_abs,
    })
}
