//! CSV ingestion and time alignment of the gyroscope stream with the
//! reference-IMU rate stream.
//!
//! The gyro log carries the ten lock-in channels of the resonator (sense and
//! drive in-phase/quadrature voltages, resonant frequencies, loop frequency
//! errors and loop phase errors). The reference log carries the Z-axis rate.
//! [`align`] joins them on the gyro clock by interpolating the reference rate.

use std::io::{Read, Write};
use std::ops::Range;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gyro channel names in canonical column order (time excluded).
pub const GYRO_CHANNELS: [&str; 10] = [
    "sense_in",
    "sense_quad",
    "sense_freq",
    "sense_freq_err",
    "sense_phase_err",
    "drive_in",
    "drive_quad",
    "drive_freq",
    "drive_freq_err",
    "drive_phase_err",
];

/// One timestamped sample of the resonator outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GyroRecord {
    pub t: f64,
    pub sense_in: f64,
    pub sense_quad: f64,
    pub sense_freq: f64,
    pub sense_freq_err: f64,
    pub sense_phase_err: f64,
    pub drive_in: f64,
    pub drive_quad: f64,
    pub drive_freq: f64,
    pub drive_freq_err: f64,
    pub drive_phase_err: f64,
}

impl GyroRecord {
    pub fn from_channels(t: f64, ch: [f64; 10]) -> Self {
        Self {
            t,
            sense_in: ch[0],
            sense_quad: ch[1],
            sense_freq: ch[2],
            sense_freq_err: ch[3],
            sense_phase_err: ch[4],
            drive_in: ch[5],
            drive_quad: ch[6],
            drive_freq: ch[7],
            drive_freq_err: ch[8],
            drive_phase_err: ch[9],
        }
    }

    /// Channel values in [`GYRO_CHANNELS`] order.
    pub fn channels(&self) -> [f64; 10] {
        [
            self.sense_in,
            self.sense_quad,
            self.sense_freq,
            self.sense_freq_err,
            self.sense_phase_err,
            self.drive_in,
            self.drive_quad,
            self.drive_freq,
            self.drive_freq_err,
            self.drive_phase_err,
        ]
    }

    pub fn is_valid(&self) -> bool {
        self.t.is_finite()
            && self.channels().iter().all(|v| v.is_finite())
            && self.sense_freq > 0.0
            && self.drive_freq > 0.0
    }
}

/// One sample of the reference Z-axis rate, degrees per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefRecord {
    pub t: f64,
    pub omega: f64,
}

/// Maps record fields to CSV header names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GyroSchema {
    pub t: String,
    /// Header names for the channels, in [`GYRO_CHANNELS`] order.
    pub channels: [String; 10],
}

impl Default for GyroSchema {
    fn default() -> Self {
        Self {
            t: "t".to_string(),
            channels: GYRO_CHANNELS.map(str::to_string),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefSchema {
    pub t: String,
    pub omega: String,
}

impl Default for RefSchema {
    fn default() -> Self {
        Self {
            t: "t".to_string(),
            omega: "omega".to_string(),
        }
    }
}

/// Records parsed from a stream plus the number of rejected rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub skipped: usize,
}

fn column_positions(headers: &csv::StringRecord, wanted: &[&str]) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| Error::MissingColumn((*name).to_string()))
        })
        .collect()
}

fn parse_rows<R: Read, T>(
    source: R,
    wanted: &[&str],
    build: impl Fn(&[f64]) -> Option<T>,
) -> Result<Parsed<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let positions = column_positions(reader.headers()?, wanted)?;

    let mut records = Vec::new();
    let mut skipped = 0;
    let mut values = vec![0.0; positions.len()];
    for row in reader.records() {
        let Ok(row) = row else {
            skipped += 1;
            continue;
        };
        let mut ok = true;
        for (slot, &pos) in values.iter_mut().zip(&positions) {
            match row.get(pos).and_then(|s| s.parse::<f64>().ok()) {
                Some(v) if v.is_finite() => *slot = v,
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        match ok.then(|| build(&values)).flatten() {
            Some(rec) => records.push(rec),
            None => skipped += 1,
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyStream { skipped });
    }
    Ok(Parsed { records, skipped })
}

/// Parses a gyro CSV log. Rows with unparsable or non-finite values, or a
/// non-positive resonant frequency, are skipped and counted.
pub fn parse_gyro_stream<R: Read>(source: R, schema: &GyroSchema) -> Result<Parsed<GyroRecord>> {
    let mut wanted: Vec<&str> = vec![schema.t.as_str()];
    wanted.extend(schema.channels.iter().map(String::as_str));
    parse_rows(source, &wanted, |v| {
        let mut ch = [0.0; 10];
        ch.copy_from_slice(&v[1..]);
        let rec = GyroRecord::from_channels(v[0], ch);
        rec.is_valid().then_some(rec)
    })
}

pub fn parse_ref_stream<R: Read>(source: R, schema: &RefSchema) -> Result<Parsed<RefRecord>> {
    parse_rows(source, &[schema.t.as_str(), schema.omega.as_str()], |v| {
        Some(RefRecord {
            t: v[0],
            omega: v[1],
        })
    })
}

/// Formats with 17 significant digits so that values re-parse bit-identically.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_gyro_csv<W: Write>(sink: W, records: &[GyroRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["t"];
    header.extend(GYRO_CHANNELS);
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![fmt_f64(r.t)];
        row.extend(r.channels().iter().map(|&v| fmt_f64(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ref_csv<W: Write>(sink: W, records: &[RefRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["t", "omega"])?;
    for r in records {
        w.write_record([fmt_f64(r.t), fmt_f64(r.omega)])?;
    }
    w.flush()?;
    Ok(())
}

/// Feature matrix and reference-rate target on a common clock.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedDataset {
    pub timestamps: Vec<f64>,
    /// Row-major `n x d` feature matrix.
    pub features: Array2<f64>,
    pub feature_names: Vec<String>,
    /// Reference rate, degrees per second.
    pub target: Vec<f64>,
    /// Median spacing of `timestamps`, seconds.
    pub sample_interval: f64,
}

fn median_interval(ts: &[f64]) -> f64 {
    if ts.len() < 2 {
        return 0.0;
    }
    let mut dt: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    dt.sort_by(f64::total_cmp);
    let mid = dt.len() / 2;
    if dt.len() % 2 == 1 {
        dt[mid]
    } else {
        0.5 * (dt[mid - 1] + dt[mid])
    }
}

fn check_increasing(ts: impl Iterator<Item = f64>) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for (row, t) in ts.enumerate() {
        if !(t > prev) {
            return Err(Error::NonMonotonic { row });
        }
        prev = t;
    }
    Ok(())
}

impl AlignedDataset {
    /// Builds a dataset, checking shapes, finiteness and timestamp order.
    pub fn new(
        timestamps: Vec<f64>,
        features: Array2<f64>,
        feature_names: Vec<String>,
        target: Vec<f64>,
    ) -> Result<Self> {
        let n = timestamps.len();
        if features.nrows() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: features.nrows(),
            });
        }
        if target.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: target.len(),
            });
        }
        if feature_names.len() != features.ncols() {
            return Err(Error::DimensionMismatch {
                expected: features.ncols(),
                got: feature_names.len(),
            });
        }
        check_increasing(timestamps.iter().copied())?;
        for ((row, col), v) in features.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFiniteInput { row, col });
            }
        }
        if let Some(row) = target.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput {
                row,
                col: features.ncols(),
            });
        }
        let sample_interval = median_interval(&timestamps);
        Ok(Self {
            timestamps,
            features,
            feature_names,
            target,
            sample_interval,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.feature_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::MissingFeature(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<ArrayView1<'_, f64>> {
        Ok(self.features.column(self.column_index(name)?))
    }

    /// Keeps the named columns, in the order given.
    pub fn select<S: AsRef<str>>(&self, names: &[S]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| self.column_index(n.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            timestamps: self.timestamps.clone(),
            features: self.features.select(Axis(1), &idx),
            feature_names: names.iter().map(|n| n.as_ref().to_string()).collect(),
            target: self.target.clone(),
            sample_interval: self.sample_interval,
        })
    }

    pub fn slice_rows(&self, rows: Range<usize>) -> Self {
        let timestamps = self.timestamps[rows.clone()].to_vec();
        let sample_interval = median_interval(&timestamps);
        Self {
            timestamps,
            features: self.features.slice(ndarray::s![rows.clone(), ..]).to_owned(),
            feature_names: self.feature_names.clone(),
            target: self.target[rows].to_vec(),
            sample_interval,
        }
    }

    /// Keeps the rows whose index satisfies `keep`.
    pub fn filter_rows(&self, mut keep: impl FnMut(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.n_rows()).filter(|&i| keep(i)).collect();
        let timestamps: Vec<f64> = idx.iter().map(|&i| self.timestamps[i]).collect();
        let sample_interval = median_interval(&timestamps);
        Self {
            timestamps,
            features: self.features.select(Axis(0), &idx),
            feature_names: self.feature_names.clone(),
            target: idx.iter().map(|&i| self.target[i]).collect(),
            sample_interval,
        }
    }

    /// FNV-1a digest of timestamps and targets; identifies a test set.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.timestamps.iter().chain(&self.target) {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Joins the two streams on the gyro clock.
///
/// The target at each gyro timestamp is the linear interpolation of the two
/// bracketing reference samples. Gyro samples outside the reference span, or
/// inside a reference gap wider than `max_gap`, are dropped.
pub fn align(gyro: &[GyroRecord], reference: &[RefRecord], max_gap: f64) -> Result<AlignedDataset> {
    let times: Vec<f64> = gyro.iter().map(|g| g.t).collect();
    let targets = interpolate_reference(&times, reference, max_gap)?;
    let mut timestamps = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut target = Vec::new();
    for (g, omega) in gyro.iter().zip(targets) {
        if let Some(omega) = omega {
            timestamps.push(g.t);
            rows.extend_from_slice(&g.channels());
            target.push(omega);
        }
    }
    let n = timestamps.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, have: n });
    }
    let features = Array2::from_shape_vec((n, GYRO_CHANNELS.len()), rows)
        .expect("row buffer has n * 10 entries");
    AlignedDataset::new(
        timestamps,
        features,
        GYRO_CHANNELS.map(str::to_string).to_vec(),
        target,
    )
}

/// Aligns a single named series to the reference under the same rules as
/// [`align`].
pub fn align_series(
    series: &[RefRecord],
    name: &str,
    reference: &[RefRecord],
    max_gap: f64,
) -> Result<AlignedDataset> {
    let times: Vec<f64> = series.iter().map(|r| r.t).collect();
    let targets = interpolate_reference(&times, reference, max_gap)?;
    let (mut timestamps, mut values, mut target) = (Vec::new(), Vec::new(), Vec::new());
    for (r, omega) in series.iter().zip(targets) {
        if let Some(omega) = omega {
            timestamps.push(r.t);
            values.push(r.omega);
            target.push(omega);
        }
    }
    let n = timestamps.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, have: n });
    }
    let features = Array2::from_shape_vec((n, 1), values).expect("one column");
    AlignedDataset::new(timestamps, features, vec![name.to_string()], target)
}

/// Reference rate at each of `times`, or `None` outside the reference span
/// or inside a gap wider than `max_gap`.
fn interpolate_reference(times: &[f64], reference: &[RefRecord], max_gap: f64) -> Result<Vec<Option<f64>>> {
    if times.is_empty() || reference.is_empty() {
        return Err(Error::TooFewSamples {
            needed: 2,
            have: times.len().min(reference.len()),
        });
    }
    check_increasing(times.iter().copied())?;
    check_increasing(reference.iter().map(|r| r.t))?;
    let (r0, r1) = (reference[0].t, reference[reference.len() - 1].t);
    if times[times.len() - 1] < r0 || times[0] > r1 {
        return Err(Error::NoOverlap);
    }
    let mut j = 0;
    Ok(times
        .iter()
        .map(|&t| {
            if t < r0 || t > r1 {
                return None;
            }
            while j + 1 < reference.len() && reference[j + 1].t <= t {
                j += 1;
            }
            let lo = reference[j];
            if lo.t == t {
                return Some(lo.omega);
            }
            let hi = reference[j + 1];
            let gap = hi.t - lo.t;
            (gap <= max_gap).then(|| lo.omega + (t - lo.t) / gap * (hi.omega - lo.omega))
        })
        .collect())
}

/// Splits into the earliest `floor(n * train_frac)` rows and the remainder.
pub fn split_chronological(
    ds: &AlignedDataset,
    train_frac: f64,
) -> Result<(AlignedDataset, AlignedDataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction {train_frac} outside (0, 1)"
        )));
    }
    let n = ds.n_rows();
    let n_train = (n as f64 * train_frac).floor() as usize;
    let n_test = n - n_train;
    if n_train < 2 || n_test < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            have: n_train.min(n_test),
        });
    }
    Ok((ds.slice_rows(0..n_train), ds.slice_rows(n_train..n)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "t,sense_in,sense_quad,sense_freq,sense_freq_err,sense_phase_err,\
                          drive_in,drive_quad,drive_freq,drive_freq_err,drive_phase_err\n";

    fn row(t: f64, sense_in: &str) -> String {
        format!("{t},{sense_in},0.5,3000000,0.1,0.2,1.0,0.01,3000380,0.1,0.02\n")
    }

    fn gyro_at(ts: &[f64]) -> Vec<GyroRecord> {
        ts.iter()
            .map(|&t| GyroRecord::from_channels(t, [t, 0.0, 3e6, 0.0, 0.0, 1.0, 0.0, 3e6, 0.0, 0.0]))
            .collect()
    }

    #[test]
    fn parses_well_formed_rows() {
        let csv = format!("{HEADER}{}{}{}", row(0.0, "1"), row(0.1, "2"), row(0.2, "3"));
        let p = parse_gyro_stream(csv.as_bytes(), &GyroSchema::default()).unwrap();
        assert_eq!(p.records.len(), 3);
        assert_eq!(p.skipped, 0);
        assert_eq!(p.records[2].sense_in, 3.0);
        assert_eq!(p.records[1].drive_freq, 3_000_380.0);
    }

    #[test]
    fn skips_nan_rows() {
        let csv = format!("{HEADER}{}{}{}", row(0.0, "1"), row(0.1, "NaN"), row(0.2, "3"));
        let p = parse_gyro_stream(csv.as_bytes(), &GyroSchema::default()).unwrap();
        assert_eq!(p.records.len(), 2);
        assert_eq!(p.skipped, 1);
    }

    #[test]
    fn skips_short_and_garbage_rows() {
        let csv = format!("{HEADER}{}0.1,2\n{}0.3,x,1,1,1,1,1,1,1,1,1\n", row(0.0, "1"), row(0.2, "3"));
        let p = parse_gyro_stream(csv.as_bytes(), &GyroSchema::default()).unwrap();
        assert_eq!(p.records.len(), 2);
        assert_eq!(p.skipped, 2);
    }

    #[test]
    fn missing_column_is_reported() {
        let header = HEADER.replace(",drive_quad", "");
        let err = parse_gyro_stream(header.as_bytes(), &GyroSchema::default()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "drive_quad"));
    }

    #[test]
    fn empty_stream_is_an_error() {
        let csv = format!("{HEADER}{}", row(0.0, "inf"));
        let err = parse_gyro_stream(csv.as_bytes(), &GyroSchema::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyStream { skipped: 1 }));
    }

    #[test]
    fn custom_schema_renames_columns() {
        let csv = "time,rate\n0,1.5\n1,2.5\n";
        let schema = RefSchema {
            t: "time".into(),
            omega: "rate".into(),
        };
        let p = parse_ref_stream(csv.as_bytes(), &schema).unwrap();
        assert_eq!(p.records[1], RefRecord { t: 1.0, omega: 2.5 });
    }

    #[test]
    fn identical_grids_join_exactly() {
        let ts = [0.0, 0.1, 0.2, 0.3];
        let reference: Vec<RefRecord> = ts
            .iter()
            .map(|&t| RefRecord { t, omega: 7.0 * t + 0.3 })
            .collect();
        let ds = align(&gyro_at(&ts), &reference, 1.0).unwrap();
        assert_eq!(ds.n_rows(), 4);
        for (y, r) in ds.target.iter().zip(&reference) {
            assert_eq!(*y, r.omega);
        }
        assert_eq!(ds.n_features(), 10);
    }

    #[test]
    fn interpolates_between_reference_samples() {
        let reference = [RefRecord { t: 1.0, omega: 0.0 }, RefRecord { t: 2.0, omega: 10.0 }];
        let ds = align(&gyro_at(&[1.0, 1.5, 2.0]), &reference, 5.0).unwrap();
        assert_eq!(ds.target, vec![0.0, 5.0, 10.0]);
    }

    #[test]
    fn drops_samples_inside_wide_gaps_and_outside_span() {
        let reference = [
            RefRecord { t: 0.0, omega: 1.0 },
            RefRecord { t: 1.0, omega: 1.0 },
            RefRecord { t: 4.0, omega: 1.0 },
            RefRecord { t: 5.0, omega: 1.0 },
        ];
        let gyro = gyro_at(&[-0.5, 0.5, 1.0, 2.0, 3.0, 4.0, 4.5, 6.0]);
        let ds = align(&gyro, &reference, 1.0).unwrap();
        assert_eq!(ds.timestamps, vec![0.5, 1.0, 4.0, 4.5]);
    }

    #[test]
    fn disjoint_spans_do_not_overlap() {
        let reference = [RefRecord { t: 10.0, omega: 0.0 }, RefRecord { t: 11.0, omega: 0.0 }];
        assert!(matches!(
            align(&gyro_at(&[0.0, 1.0]), &reference, 1.0),
            Err(Error::NoOverlap)
        ));
    }

    #[test]
    fn too_few_after_dropping() {
        let reference = [RefRecord { t: 0.0, omega: 0.0 }, RefRecord { t: 1.0, omega: 0.0 }];
        assert!(matches!(
            align(&gyro_at(&[0.5, 2.0]), &reference, 1.0),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn unsorted_input_is_rejected() {
        let reference = [RefRecord { t: 0.0, omega: 0.0 }, RefRecord { t: 1.0, omega: 0.0 }];
        assert!(matches!(
            align(&gyro_at(&[0.5, 0.2]), &reference, 1.0),
            Err(Error::NonMonotonic { row: 1 })
        ));
    }

    fn ramp_dataset(n: usize) -> AlignedDataset {
        let ts: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let reference: Vec<RefRecord> = ts.iter().map(|&t| RefRecord { t, omega: t }).collect();
        align(&gyro_at(&ts), &reference, 2.0).unwrap()
    }

    #[test]
    fn chronological_split_counts() {
        let (train, test) = split_chronological(&ramp_dataset(10), 0.8).unwrap();
        assert_eq!(train.n_rows(), 8);
        assert_eq!(test.n_rows(), 2);
        assert_eq!(test.timestamps, vec![8.0, 9.0]);

        let (train, test) = split_chronological(&ramp_dataset(4), 0.5).unwrap();
        assert_eq!(train.timestamps, vec![0.0, 1.0]);
        assert_eq!(test.timestamps, vec![2.0, 3.0]);
    }

    #[test]
    fn chronological_split_rejects_tiny_sides() {
        assert!(matches!(
            split_chronological(&ramp_dataset(10), 0.99),
            Err(Error::TooFewSamples { .. })
        ));
        assert!(matches!(
            split_chronological(&ramp_dataset(10), 1.0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn median_interval_of_uneven_grid() {
        assert_eq!(median_interval(&[0.0, 1.0, 3.0, 4.0]), 1.0);
        assert_eq!(median_interval(&[0.0, 1.0, 3.0]), 1.5);
    }

    #[test]
    fn align_series_interpolates_and_drops_outside() {
        let reference = [RefRecord { t: 0.0, omega: 0.0 }, RefRecord { t: 1.0, omega: 10.0 }];
        let series: Vec<RefRecord> = [-0.5, 0.0, 0.25, 1.0, 1.5]
            .iter()
            .map(|&t| RefRecord { t, omega: 2.0 * t })
            .collect();
        let d = align_series(&series, "omega_hat", &reference, 5.0).unwrap();
        assert_eq!(d.timestamps, [0.0, 0.25, 1.0]);
        assert_eq!(d.target, [0.0, 2.5, 10.0]);
        assert_eq!(d.column("omega_hat").unwrap().to_vec(), [0.0, 0.5, 2.0]);
        let exact_only = align_series(&series, "x", &reference, 0.5).unwrap();
        assert_eq!(exact_only.timestamps, [0.0, 1.0]);
    }
}
