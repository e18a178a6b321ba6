//! Synthetic gyroscope and reference-IMU streams with known ground truth.
//!
//! The rate channel follows a compressive scale factor
//! `S(w) = s0 * (1 + |w| / omega_sat)`, so `sense_in = w / S(w)` before gain
//! disturbances, bias and noise. The auxiliary channels are driven by a few
//! shared latent processes so that they carry partial, correlated information
//! about those disturbances:
//!
//! - `e`: frequency-loop tracking error (Gauss-Markov), seen by the four
//!   loop residual channels with different amounts of private white noise;
//! - `a`: drive amplitude wander (Gauss-Markov), seen by `drive_in`;
//! - `dT`: room temperature swing (sinusoid), seen by the two frequencies.
//!
//! A demodulation phase error `phi = drive_phase_err` rotates the static
//! quadrature `quad_offset` into the in-phase channel as
//! `quad_offset * sin(phi)`; the loss of gain with detuning follows
//! `mode_split / (mode_split + sense_freq_err)`.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{fmt_f64, GyroRecord, RefRecord};
use crate::error::{Error, Result};

/// Commanded rates of the controlled-rate staircase, degrees per second.
pub const STAIRCASE_RATES: [f64; 10] = [20.0, 40.0, 80.0, 40.0, 80.0, 160.0, 120.0, 40.0, 20.0, 120.0];

/// Private white-noise weights of the loop residual channels relative to the
/// shared tracking error.
const SFE_PRIVATE: f64 = 0.1;
const DFE_PRIVATE: f64 = 0.5;
const SPE_PRIVATE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateProfileConfig {
    /// Total length, seconds.
    pub duration: f64,
    /// Plateau length bounds, seconds.
    pub dwell_range: (f64, f64),
    /// Degrees per second.
    pub rate_max: f64,
    /// Probability that a plateau is at rest.
    pub steady_fraction: f64,
    /// Linear transition between plateaus, seconds.
    pub ramp_time: f64,
    /// Final stretch held at rest, seconds.
    pub rest_tail: f64,
    /// Hertz.
    pub sample_rate: f64,
    pub seed: u64,
}

impl Default for RateProfileConfig {
    fn default() -> Self {
        Self {
            duration: 2400.0,
            dwell_range: (10.0, 40.0),
            rate_max: 160.0,
            steady_fraction: 0.3,
            ramp_time: 2.0,
            rest_tail: 600.0,
            sample_rate: 10.0,
            seed: 1,
        }
    }
}

impl RateProfileConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.dwell_range;
        let checks = [
            (self.duration > 0.0, "duration must be positive"),
            (lo > 0.0 && lo <= hi, "dwell_range needs 0 < min <= max"),
            (self.rate_max > 0.0, "rate_max must be positive"),
            ((0.0..=1.0).contains(&self.steady_fraction), "steady_fraction must lie in [0, 1]"),
            (self.ramp_time >= 0.0, "ramp_time must be non-negative"),
            (
                self.rest_tail >= 0.0 && self.rest_tail <= self.duration,
                "rest_tail must lie in [0, duration]",
            ),
            (self.sample_rate > 0.0, "sample_rate must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::InvalidConfig((*msg).to_string())),
            None => Ok(()),
        }
    }
}

/// A constant-rate plateau of a planned profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub start: f64,
    pub end: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub timestamps: Vec<f64>,
    pub omega_true: Vec<f64>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["t", "omega_true"])?;
        for (t, o) in self.timestamps.iter().zip(&self.omega_true) {
            w.write_record([fmt_f64(*t), fmt_f64(*o)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws the plateaus of a random profile. Plateaus are separated by
/// `ramp_time`; the last random one is cut short where the rest tail begins.
pub fn plan_segments(cfg: &RateProfileConfig) -> Result<Vec<Plateau>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = cfg.dwell_range;
    let dynamic_end = cfg.duration - cfg.rest_tail;
    let last_end = if cfg.rest_tail > 0.0 { dynamic_end - cfg.ramp_time } else { dynamic_end };
    let mut out = Vec::new();
    let mut t = 0.0;
    while t < last_end {
        let dwell = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let steady = rng.random::<f64>() < cfg.steady_fraction;
        let rate = if steady { 0.0 } else { rng.random_range(-cfg.rate_max..=cfg.rate_max) };
        out.push(Plateau {
            start: t,
            end: (t + dwell).min(last_end),
            rate,
        });
        t += dwell + cfg.ramp_time;
    }
    if cfg.rest_tail > 0.0 {
        out.push(Plateau {
            start: dynamic_end,
            end: cfg.duration,
            rate: 0.0,
        });
    }
    Ok(out)
}

/// Samples plateaus joined by linear ramps on a uniform clock.
pub fn sample_plateaus(plateaus: &[Plateau], duration: f64, sample_rate: f64) -> GroundTruth {
    let n = (duration * sample_rate).floor() as usize;
    let mut timestamps = Vec::with_capacity(n);
    let mut omega = Vec::with_capacity(n);
    let mut k = 0;
    for i in 0..n {
        let t = i as f64 / sample_rate;
        while k + 1 < plateaus.len() && t >= plateaus[k + 1].start {
            k += 1;
        }
        let p = plateaus[k];
        let w = if t <= p.end || k + 1 == plateaus.len() {
            if t < p.start { 0.0 } else { p.rate }
        } else {
            let q = plateaus[k + 1];
            let frac = (t - p.end) / (q.start - p.end);
            p.rate + frac * (q.rate - p.rate)
        };
        timestamps.push(t);
        omega.push(w);
    }
    GroundTruth {
        timestamps,
        omega_true: omega,
    }
}

/// Random piecewise-constant rate profile with linear ramps.
pub fn gen_rate_profile(cfg: &RateProfileConfig) -> Result<GroundTruth> {
    let plateaus = plan_segments(cfg)?;
    Ok(sample_plateaus(&plateaus, cfg.duration, cfg.sample_rate))
}

/// Controlled-rate staircase: each rate is held for `dwell` seconds between
/// rests of `rest` seconds, with ramps of `ramp_time`.
pub fn staircase_plateaus(rates: &[f64], dwell: f64, rest: f64, ramp_time: f64) -> (Vec<Plateau>, f64) {
    let mut out = Vec::with_capacity(2 * rates.len() + 1);
    let mut t = 0.0;
    let mut push = |rate: f64, len: f64, t: &mut f64| {
        out.push(Plateau {
            start: *t,
            end: *t + len,
            rate,
        });
        *t += len + ramp_time;
    };
    push(0.0, rest, &mut t);
    for &r in rates {
        push(r, dwell, &mut t);
        push(0.0, rest, &mut t);
    }
    let duration = t - ramp_time;
    (out, duration)
}

pub fn staircase_profile(rates: &[f64], dwell: f64, rest: f64, ramp_time: f64, sample_rate: f64) -> GroundTruth {
    let (plateaus, duration) = staircase_plateaus(rates, dwell, rest, ramp_time);
    sample_plateaus(&plateaus, duration, sample_rate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Scale factor at zero rate, degrees per second per volt.
    pub s0: f64,
    /// Rate at which the scale factor has doubled, degrees per second.
    pub omega_sat: f64,
    /// In-phase to quadrature coupling of the rate signal.
    pub kappa_quad: f64,
    /// Drive phase error per hertz of sense-loop frequency error, degrees.
    pub beta_phase: f64,
    /// Sense resonance, hertz.
    pub f0: f64,
    /// Drive minus sense resonance, hertz.
    pub mode_split: f64,
    pub mode_split_band: (f64, f64),
    /// Resonance shift per kelvin, hertz.
    pub temp_coeff: f64,
    /// Degrees per root hour.
    pub arw_gyro: f64,
    /// ADEV floor of the rate-equivalent output, degrees per hour.
    pub bi_gyro: f64,
    /// Correlation time of the bias process, seconds.
    pub bi_corr_time: f64,
    /// Degrees per root hour.
    pub arw_ref: f64,
    pub sample_rate: f64,
    pub seed: u64,

    /// Static sense quadrature, volts.
    pub quad_offset: f64,
    /// Relative spread of the rate-to-quadrature coupling.
    pub quad_coupling_noise: f64,
    /// Slow quadrature wander, volts RMS.
    pub quad_drift: f64,
    pub quad_drift_time: f64,
    /// Quadrature readout noise, volts.
    pub quad_noise: f64,
    /// RMS of the shared loop tracking error, hertz.
    pub loop_jitter: f64,
    pub loop_corr_time: f64,
    /// Private drive-phase noise relative to `loop_jitter`.
    pub phase_noise: f64,
    /// Frequency readout noise, hertz.
    pub freq_noise: f64,
    /// Nominal drive amplitude, volts.
    pub drive_amplitude: f64,
    /// Relative RMS of drive amplitude wander.
    pub agc_level: f64,
    pub agc_corr_time: f64,
    /// Drive amplitude readout noise, volts.
    pub drive_noise: f64,
    pub drive_quad_offset: f64,
    /// Drive quadrature shift per kelvin, volts.
    pub drive_quad_temp: f64,
    pub drive_quad_noise: f64,
    /// Peak temperature swing, kelvin.
    pub temp_amplitude: f64,
    pub temp_period: f64,
    /// Relative gain change per kelvin.
    pub sf_temp_coeff: f64,
}

/// Solves `S(w) = s0 (1 + |w| / omega_sat)` through two `(rate, S)` points.
pub fn anchor_scale_factor(p1: (f64, f64), p2: (f64, f64)) -> (f64, f64) {
    let slope = (p2.1 - p1.1) / (p2.0 - p1.0);
    let s0 = p1.1 - slope * p1.0;
    (s0, s0 / slope)
}

pub fn default_sim_config() -> SimConfig {
    let (s0, omega_sat) = anchor_scale_factor((20.0, 0.161), (120.0, 0.198));
    SimConfig {
        s0,
        omega_sat,
        kappa_quad: 0.5,
        beta_phase: 0.05,
        f0: 3.0e6,
        mode_split: 380.0,
        mode_split_band: (320.0, 440.0),
        temp_coeff: 90.0,
        arw_gyro: 0.44,
        bi_gyro: 5.0,
        bi_corr_time: 10_000.0,
        arw_ref: 0.35,
        sample_rate: 10.0,
        seed: 7,
        quad_offset: 1000.0,
        quad_coupling_noise: (1.0 / 0.36 - 1.0f64).sqrt(),
        quad_drift: 1.0,
        quad_drift_time: 300.0,
        quad_noise: 0.5,
        loop_jitter: 8.0,
        loop_corr_time: 1.0,
        phase_noise: (0.2913 * (1.0 + SFE_PRIVATE * SFE_PRIVATE)).sqrt(),
        freq_noise: 0.05,
        drive_amplitude: 1000.0,
        agc_level: 0.015,
        agc_corr_time: 60.0,
        drive_noise: 0.5,
        drive_quad_offset: 20.0,
        drive_quad_temp: 2.0,
        drive_quad_noise: 1.0,
        temp_amplitude: 0.5,
        temp_period: 1200.0,
        sf_temp_coeff: -0.02,
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        default_sim_config()
    }
}

/// Allan variance of a first-order Gauss-Markov process with variance `var`
/// and correlation time `tc`.
pub fn gauss_markov_avar(var: f64, tc: f64, tau: f64) -> f64 {
    let r = tau / tc;
    let bracket = 1.0 - (3.0 - 4.0 * (-r).exp() + (-2.0 * r).exp()) / (2.0 * r);
    2.0 * var * tc / tau * bracket
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.mode_split_band;
        let noises = [
            self.arw_gyro,
            self.bi_gyro,
            self.arw_ref,
            self.quad_coupling_noise,
            self.quad_drift,
            self.quad_noise,
            self.loop_jitter,
            self.phase_noise,
            self.freq_noise,
            self.agc_level,
            self.drive_noise,
            self.drive_quad_noise,
            self.temp_amplitude,
        ];
        let times = [
            self.bi_corr_time,
            self.quad_drift_time,
            self.loop_corr_time,
            self.agc_corr_time,
            self.temp_period,
        ];
        let checks = [
            (self.s0 > 0.0 && self.s0.is_finite(), "s0 must be positive"),
            (self.omega_sat > 0.0, "omega_sat must be positive"),
            (
                lo <= hi && self.mode_split >= lo && self.mode_split <= hi,
                "mode_split outside its band",
            ),
            (noises.iter().all(|v| *v >= 0.0 && v.is_finite()), "noise magnitudes must be non-negative"),
            (times.iter().all(|v| *v > 0.0), "time constants must be positive"),
            (self.sample_rate > 0.0, "sample_rate must be positive"),
            (self.f0 > 0.0, "f0 must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::InvalidConfig((*msg).to_string())),
            None => Ok(()),
        }
    }

    /// Scale factor at rate `w`, degrees per second per volt.
    pub fn scale_factor(&self, w: f64) -> f64 {
        self.s0 * (1.0 + w.abs() / self.omega_sat)
    }

    /// Same device with every random and environmental disturbance removed.
    pub fn noise_free(&self) -> Self {
        Self {
            arw_gyro: 0.0,
            bi_gyro: 0.0,
            arw_ref: 0.0,
            quad_coupling_noise: 0.0,
            quad_drift: 0.0,
            quad_noise: 0.0,
            loop_jitter: 0.0,
            freq_noise: 0.0,
            agc_level: 0.0,
            drive_noise: 0.0,
            drive_quad_noise: 0.0,
            temp_amplitude: 0.0,
            ..self.clone()
        }
    }

    /// White-noise standard deviation per sample of the rate output, deg/s.
    pub fn white_rate_sigma(&self) -> f64 {
        self.arw_gyro / 60.0 * self.sample_rate.sqrt()
    }

    /// Stationary standard deviation of the rate-equivalent bias, deg/s,
    /// chosen so the minimum of the analytic white + Gauss-Markov ADEV equals
    /// `bi_gyro`.
    pub fn bias_sigma(&self) -> f64 {
        let floor = self.bi_gyro / 3600.0;
        if floor <= 0.0 {
            return 0.0;
        }
        let n2 = (self.arw_gyro / 60.0).powi(2);
        // The floor is the valley ahead of the Gauss-Markov hump near 1.9 tc.
        let taus: Vec<f64> = (0..=400)
            .map(|k| (1.0 / self.sample_rate) * 10f64.powf(k as f64 / 50.0))
            .take_while(|&t| t <= self.bi_corr_time)
            .collect();
        let min_adev = |sigma: f64| {
            taus.iter()
                .map(|&t| (n2 / t + gauss_markov_avar(sigma * sigma, self.bi_corr_time, t)).sqrt())
                .fold(f64::INFINITY, f64::min)
        };
        if min_adev(0.0) >= floor {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0, floor);
        while min_adev(hi) < floor {
            hi *= 2.0;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if min_adev(mid) < floor { lo = mid } else { hi = mid }
        }
        0.5 * (lo + hi)
    }

    /// A second device: scale factor scaled by `s0_scale`, a different mode
    /// split and independent noise.
    pub fn device_variant(&self, s0_scale: f64, mode_split: f64, seed: u64) -> Self {
        Self {
            s0: self.s0 * s0_scale,
            mode_split,
            seed,
            ..self.clone()
        }
    }
}

struct GaussMarkov {
    x: f64,
    phi: f64,
    drive: f64,
}

impl GaussMarkov {
    fn new(sigma: f64, tc: f64, dt: f64, rng: &mut ChaCha8Rng) -> Self {
        let phi = (-dt / tc).exp();
        let n: f64 = rng.sample(StandardNormal);
        Self {
            x: sigma * n,
            phi,
            drive: sigma * (1.0 - phi * phi).sqrt(),
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let x = self.x;
        let n: f64 = rng.sample(StandardNormal);
        self.x = self.phi * self.x + self.drive * n;
        x
    }
}

/// Generates the gyro channels and the reference stream on the truth clock.
pub fn simulate_gyro(truth: &GroundTruth, cfg: &SimConfig) -> Result<(Vec<GyroRecord>, Vec<RefRecord>)> {
    cfg.validate()?;
    if truth.is_empty() {
        return Err(Error::InvalidConfig("ground truth is empty".into()));
    }
    if truth.omega_true.len() != truth.timestamps.len() {
        return Err(Error::LengthMismatch {
            left: truth.timestamps.len(),
            right: truth.omega_true.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dt = 1.0 / cfg.sample_rate;
    let mut loop_err = GaussMarkov::new(1.0, cfg.loop_corr_time, dt, &mut rng);
    let mut bias = GaussMarkov::new(cfg.bias_sigma(), cfg.bi_corr_time, dt, &mut rng);
    let mut agc = GaussMarkov::new(cfg.agc_level, cfg.agc_corr_time, dt, &mut rng);
    let mut qdrift = GaussMarkov::new(cfg.quad_drift, cfg.quad_drift_time, dt, &mut rng);
    let temp_phase = rng.random_range(0.0..2.0 * PI);
    let white = cfg.white_rate_sigma();
    let ref_white = cfg.arw_ref / 60.0 * cfg.sample_rate.sqrt();
    let l = cfg.loop_jitter;

    let mut gyro = Vec::with_capacity(truth.len());
    let mut reference = Vec::with_capacity(truth.len());
    for (&t, &w) in truth.timestamps.iter().zip(&truth.omega_true) {
        let mut n = [0.0f64; 12];
        for v in n.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let e = loop_err.step(&mut rng);
        let b = bias.step(&mut rng);
        let a = agc.step(&mut rng);
        let q = qdrift.step(&mut rng);
        let d_t = cfg.temp_amplitude * (2.0 * PI * t / cfg.temp_period + temp_phase).sin();

        let sfe = l * (e + SFE_PRIVATE * n[0]);
        let dfe = l * (e + DFE_PRIVATE * n[1]);
        let dpe = cfg.beta_phase * (sfe + cfg.phase_noise * l * n[2]);
        let spe = cfg.beta_phase * l * (e + SPE_PRIVATE * n[3]);

        let gain = (1.0 + a) * (1.0 + cfg.sf_temp_coeff * d_t) * cfg.mode_split / (cfg.mode_split + sfe);
        let rate_v = gain * w / cfg.scale_factor(w);
        let sense_in =
            rate_v + cfg.quad_offset * dpe.to_radians().sin() + (b + white * n[4]) / cfg.s0;
        let sense_quad = cfg.quad_offset
            + q
            + cfg.kappa_quad * rate_v * (1.0 + cfg.quad_coupling_noise * n[5])
            + cfg.quad_noise * n[6];
        let sense_freq = cfg.f0 - cfg.temp_coeff * d_t + cfg.freq_noise * n[7];
        let drive_freq = sense_freq + cfg.mode_split + cfg.freq_noise * n[8];
        let drive_in = cfg.drive_amplitude * (1.0 + a) + cfg.drive_noise * n[9];
        let drive_quad = cfg.drive_quad_offset + cfg.drive_quad_temp * d_t + cfg.drive_quad_noise * n[10];

        gyro.push(GyroRecord::from_channels(
            t,
            [
                sense_in, sense_quad, sense_freq, sfe, spe, drive_in, drive_quad, drive_freq, dfe, dpe,
            ],
        ));
        reference.push(RefRecord {
            t,
            omega: w + ref_white * n[11],
        });
    }
    Ok((gyro, reference))
}

/// Converts `sense_in` to rate with the zero-rate scale factor.
pub fn rate_equivalent(gyro: &[GyroRecord], cfg: &SimConfig) -> Vec<f64> {
    gyro.iter().map(|g| cfg.s0 * g.sense_in).collect()
}

/// JSON sidecar recording both configurations of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSidecar {
    pub profile: RateProfileConfig,
    pub sim: SimConfig,
}
