//! Correlation analysis, permutation importance, feature selection and lags.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::AlignedDataset;
use crate::error::{Error, Result};
use crate::metrics::mse;
use crate::Predictor;

pub const DEFAULT_DUP_THRESHOLD: f64 = 0.99;
pub const DEFAULT_PAIR_THRESHOLD: f64 = 0.85;
pub const DEFAULT_LAGS: [usize; 5] = [1, 2, 3, 4, 5];

/// Pairwise Pearson coefficients between feature columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    /// Symmetric `d x d`; off-diagonal entries involving a constant column are NaN.
    pub rho: Array2<f64>,
    /// Indices of zero-variance columns.
    pub zero_variance: Vec<usize>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        Some(self.rho[[i, j]])
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

pub fn correlation_matrix(x: ArrayView2<'_, f64>, names: &[String]) -> Result<CorrelationMatrix> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, have: n });
    }
    if names.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: names.len(),
        });
    }
    let cols: Vec<Vec<f64>> = x.axis_iter(Axis(1)).map(|c| c.to_vec()).collect();
    let zero_variance: Vec<usize> = cols
        .iter()
        .enumerate()
        .filter(|(_, c)| c.iter().all(|v| *v == c[0]))
        .map(|(i, _)| i)
        .collect();
    let mut rho = Array2::from_elem((d, d), 1.0);
    for i in 0..d {
        for j in i + 1..d {
            let r = pearson(&cols[i], &cols[j]);
            rho[[i, j]] = r;
            rho[[j, i]] = r;
        }
    }
    Ok(CorrelationMatrix {
        names: names.to_vec(),
        rho,
        zero_variance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub names: Vec<String>,
    /// Mean MSE increase when the column is shuffled.
    pub scores: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
}

/// Scores each column by the MSE increase after shuffling it.
///
/// Shuffles are drawn from one seeded stream, repeat-major then column-major.
pub fn permutation_importance<P: Predictor + ?Sized>(
    model: &P,
    ds: &AlignedDataset,
    repeats: usize,
    seed: u64,
) -> Result<ImportanceReport> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be at least 1".into()));
    }
    let d = ds.n_features();
    if model.n_features() != d {
        return Err(Error::DimensionMismatch {
            expected: model.n_features(),
            got: d,
        });
    }
    let base = mse(&ds.target, &model.predict(ds.features.view())?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = vec![0.0; d];
    let mut x = ds.features.clone();
    for _ in 0..repeats {
        for (j, sum) in sums.iter_mut().enumerate() {
            let mut col = ds.features.column(j).to_vec();
            col.shuffle(&mut rng);
            x.column_mut(j).iter_mut().zip(&col).for_each(|(a, b)| *a = *b);
            *sum += mse(&ds.target, &model.predict(x.view())?)? - base;
            x.column_mut(j).assign(&ds.features.column(j));
        }
    }
    Ok(ImportanceReport {
        names: ds.feature_names.clone(),
        scores: sums.into_iter().map(|s| s / repeats as f64).collect(),
        repeats,
        seed,
    })
}

/// Drops redundant features.
///
/// A pair with `|rho| >= dup_threshold` keeps only its more important member.
/// A pair with `|rho| >= pair_threshold` does the same unless both members
/// rank in the top `ceil(d/2)` by importance. Importance ties go to the lower
/// column index. All pairs are judged on the full set, and the survivors keep
/// their original order.
pub fn select_features(
    corr: &CorrelationMatrix,
    imp: &ImportanceReport,
    dup_threshold: f64,
    pair_threshold: f64,
) -> Result<Vec<String>> {
    if corr.names != imp.names {
        return Err(Error::NameMismatch);
    }
    let d = corr.names.len();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| imp.scores[b].total_cmp(&imp.scores[a]).then(a.cmp(&b)));
    let mut rank = vec![0; d];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let top_half = d.div_ceil(2);

    let mut dropped = vec![false; d];
    for i in 0..d {
        for j in i + 1..d {
            let r = corr.rho[[i, j]].abs();
            if r.is_nan() || r < pair_threshold {
                continue;
            }
            let both_top = rank[i] < top_half && rank[j] < top_half;
            if r >= dup_threshold || !both_top {
                let loser = if rank[i] < rank[j] { j } else { i };
                dropped[loser] = true;
            }
        }
    }
    Ok((0..d)
        .filter(|&i| !dropped[i])
        .map(|i| corr.names[i].clone())
        .collect())
}

/// Appends `f_lag_k` columns holding each feature `k` rows earlier and drops
/// the first `max(lags)` rows.
pub fn add_lags(ds: &AlignedDataset, lags: &[usize]) -> Result<AlignedDataset> {
    let Some(&max_lag) = lags.iter().max() else {
        return Ok(ds.clone());
    };
    if lags.contains(&0) {
        return Err(Error::InvalidConfig("lags must be positive".into()));
    }
    let n = ds.n_rows();
    if max_lag >= n {
        return Err(Error::LagTooLarge {
            lag: max_lag,
            rows: n,
        });
    }
    let d = ds.n_features();
    let n_out = n - max_lag;
    let d_out = d * (1 + lags.len());
    let mut x = Array2::zeros((n_out, d_out));
    let mut names = ds.feature_names.clone();
    x.slice_mut(ndarray::s![.., ..d])
        .assign(&ds.features.slice(ndarray::s![max_lag.., ..]));
    let mut c = d;
    for f in 0..d {
        for &k in lags {
            x.column_mut(c)
                .assign(&ds.features.slice(ndarray::s![max_lag - k..n - k, f]));
            names.push(format!("{}_lag_{k}", ds.feature_names[f]));
            c += 1;
        }
    }
    AlignedDataset::new(
        ds.timestamps[max_lag..].to_vec(),
        x,
        names,
        ds.target[max_lag..].to_vec(),
    )
}

/// Serialized output of the feature analysis stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub names: Vec<String>,
    /// Row-major correlation matrix; undefined entries are null.
    pub rho: Vec<Option<f64>>,
    pub scores: Vec<f64>,
    pub selected: Vec<String>,
}

impl FeatureReport {
    pub fn new(corr: &CorrelationMatrix, imp: &ImportanceReport, selected: Vec<String>) -> Self {
        Self {
            names: corr.names.clone(),
            rho: corr
                .rho
                .iter()
                .map(|v| if v.is_nan() { None } else { Some(*v) })
                .collect(),
            scores: imp.scores.clone(),
            selected,
        }
    }

    pub fn to_json<W: Write>(&self, sink: W) -> Result<()> {
        serde_json::to_writer_pretty(sink, self)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn dataset(x: Array2<f64>, y: Vec<f64>) -> AlignedDataset {
        let n = x.nrows();
        let names = (0..x.ncols()).map(|i| format!("f{i}")).collect();
        AlignedDataset::new((0..n).map(|i| i as f64).collect(), x, names, y).unwrap()
    }

    struct Constant(usize);
    impl Predictor for Constant {
        fn n_features(&self) -> usize {
            self.0
        }
        fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
            Ok(vec![3.0; x.nrows()])
        }
    }

    struct FirstColumn;
    impl Predictor for FirstColumn {
        fn n_features(&self) -> usize {
            1
        }
        fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
            Ok(x.column(0).to_vec())
        }
    }

    #[test]
    fn correlation_examples() {
        let x = array![[1.0, 1.0, -1.0, 1.0], [-1.0, -1.0, 1.0, 1.0], [1.0, 1.0, -1.0, -1.0], [
            -1.0, -1.0, 1.0, -1.0
        ]];
        let c = correlation_matrix(x.view(), &names(&["x", "dup", "neg", "z"])).unwrap();
        assert_eq!(c.rho[[0, 1]], 1.0);
        assert_eq!(c.rho[[0, 2]], -1.0);
        assert_eq!(c.rho[[0, 3]], 0.0);
        for i in 0..4 {
            assert_eq!(c.rho[[i, i]], 1.0);
        }
    }

    #[test]
    fn constant_column_is_flagged() {
        let x = array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        let c = correlation_matrix(x.view(), &names(&["a", "k"])).unwrap();
        assert!(c.rho[[0, 1]].is_nan());
        assert_eq!(c.zero_variance, vec![1]);
        assert_eq!(c.rho[[1, 1]], 1.0);
        assert!(matches!(
            correlation_matrix(array![[1.0]].view(), &names(&["a"])),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn ignored_feature_scores_zero() {
        let x = array![[1.0, 2.0], [3.0, 1.0], [0.0, 4.0], [2.0, 2.0]];
        let ds = dataset(x, vec![1.0, 2.0, 3.0, 4.0]);
        let r = permutation_importance(&Constant(2), &ds, 3, 7).unwrap();
        assert_eq!(r.scores, vec![0.0, 0.0]);
        assert!(matches!(
            permutation_importance(&Constant(2), &ds, 0, 7),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            permutation_importance(&Constant(3), &ds, 1, 7),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn perfect_model_scores_twice_variance() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut v: Vec<f64> = (0..20_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let s = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        v.iter_mut().for_each(|a| *a = (*a - m) / s);
        let ds = dataset(Array2::from_shape_vec((v.len(), 1), v.clone()).unwrap(), v);
        let a = permutation_importance(&FirstColumn, &ds, 2, 11).unwrap();
        assert!((a.scores[0] - 2.0).abs() < 0.2, "{}", a.scores[0]);
        let b = permutation_importance(&FirstColumn, &ds, 2, 11).unwrap();
        assert_eq!(a, b);
    }

    fn report(n: &[&str], scores: Vec<f64>) -> ImportanceReport {
        ImportanceReport {
            names: names(n),
            scores,
            repeats: 1,
            seed: 0,
        }
    }

    #[test]
    fn duplicate_keeps_more_important() {
        let corr = CorrelationMatrix {
            names: names(&["a", "b"]),
            rho: array![[1.0, 1.0], [1.0, 1.0]],
            zero_variance: vec![],
        };
        let sel = select_features(&corr, &report(&["a", "b"], vec![2.0, 1.0]), 0.99, 0.85).unwrap();
        assert_eq!(sel, names(&["a"]));
        let sel = select_features(&corr, &report(&["a", "b"], vec![1.0, 2.0]), 0.99, 0.85).unwrap();
        assert_eq!(sel, names(&["b"]));
        // equal importance: lower index wins
        let sel = select_features(&corr, &report(&["a", "b"], vec![1.0, 1.0]), 0.99, 0.85).unwrap();
        assert_eq!(sel, names(&["a"]));
    }

    #[test]
    fn pair_rule_spares_top_half() {
        let n = ["a", "b", "c", "d"];
        let mut rho = Array2::eye(4);
        for (i, j, r) in [(0, 1, 0.9), (2, 3, 0.9)] {
            rho[[i, j]] = r;
            rho[[j, i]] = r;
        }
        let corr = CorrelationMatrix {
            names: names(&n),
            rho,
            zero_variance: vec![],
        };
        // a, b are the top two: both kept; c beats d
        let sel = select_features(&corr, &report(&n, vec![4.0, 3.0, 2.0, 1.0]), 0.99, 0.85).unwrap();
        assert_eq!(sel, names(&["a", "b", "c"]));
        // a top, b bottom: b dropped; d ranks second, so it survives over c
        let sel = select_features(&corr, &report(&n, vec![4.0, 1.0, 2.0, 3.0]), 0.99, 0.85).unwrap();
        assert_eq!(sel, names(&["a", "d"]));
    }

    #[test]
    fn weak_correlations_keep_everything_and_names_must_match() {
        let corr = CorrelationMatrix {
            names: names(&["a", "b"]),
            rho: array![[1.0, 0.5], [0.5, 1.0]],
            zero_variance: vec![],
        };
        let sel = select_features(&corr, &report(&["a", "b"], vec![0.0, 1.0]), 0.99, 0.85).unwrap();
        assert_eq!(sel, names(&["a", "b"]));
        assert!(matches!(
            select_features(&corr, &report(&["a", "c"], vec![0.0, 1.0]), 0.99, 0.85),
            Err(Error::NameMismatch)
        ));
    }

    #[test]
    fn lag_examples() {
        let ds = dataset(array![[1.0], [2.0], [3.0], [4.0]], vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(add_lags(&ds, &[]).unwrap(), ds);
        let l = add_lags(&ds, &[1]).unwrap();
        assert_eq!(l.feature_names, names(&["f0", "f0_lag_1"]));
        assert_eq!(l.features.column(0).to_vec(), vec![2.0, 3.0, 4.0]);
        assert_eq!(l.features.column(1).to_vec(), vec![1.0, 2.0, 3.0]);
        assert_eq!(l.target, vec![1.0, 2.0, 3.0]);
        assert_eq!(l.timestamps, vec![1.0, 2.0, 3.0]);

        let short = ds.slice_rows(0..3);
        let l = add_lags(&short, &[1, 2]).unwrap();
        assert_eq!(l.n_rows(), 1);
        assert_eq!(l.features.row(0).to_vec(), vec![3.0, 2.0, 1.0]);
        assert!(matches!(
            add_lags(&short, &[3]),
            Err(Error::LagTooLarge { lag: 3, rows: 3 })
        ));
        assert!(matches!(add_lags(&short, &[0]), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn report_serializes_nan_as_null() {
        let corr = CorrelationMatrix {
            names: names(&["a", "k"]),
            rho: array![[1.0, f64::NAN], [f64::NAN, 1.0]],
            zero_variance: vec![1],
        };
        let r = FeatureReport::new(&corr, &report(&["a", "k"], vec![1.0, 0.0]), names(&["a"]));
        let mut buf = Vec::new();
        r.to_json(&mut buf).unwrap();
        let back: FeatureReport = serde_json::from_slice(&buf).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.rho[1], None);
    }
}
