//! Fully connected regressor with ELU hidden layers, trained with Adam.
//!
//! Inputs and target are z-scored with training statistics; the network
//! itself works in standardized units and the loss is the MSE there.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::AlignedDataset;
use crate::error::{Error, Result};
use crate::Predictor;

pub const DEFAULT_HIDDEN: [usize; 3] = [64, 64, 64];

pub fn elu(x: f64, alpha: f64) -> f64 {
    if x > 0.0 { x } else { alpha * x.exp_m1() }
}

fn elu_grad(x: f64, alpha: f64) -> f64 {
    if x > 0.0 { 1.0 } else { alpha * x.exp() }
}

/// Mean and standard deviation used for z-scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    pub const IDENTITY: Stats = Stats { mean: 0.0, std: 1.0 };

    /// Population statistics; a constant column gets `std = 1`.
    pub fn fit(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        Stats {
            mean,
            std: if std > 0.0 && std.is_finite() { std } else { 1.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    /// Input width, hidden widths, then 1.
    pub layer_dims: Vec<usize>,
    /// Per layer, `out x in`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub elu_alpha: f64,
    pub input_stats: Vec<Stats>,
    pub target_stats: Stats,
    #[serde(default)]
    pub feature_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub moment1_decay: f64,
    pub moment2_decay: f64,
    pub epsilon_stabilizer: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Fit z-score statistics; when false the data is used as given.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5000,
            batch_size: 64,
            step_size: 1e-3,
            moment1_decay: 0.9,
            moment2_decay: 0.999,
            epsilon_stabilizer: 1e-8,
            patience: 50,
            standardize: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.batch_size >= 1
            && self.step_size > 0.0
            && (0.0..1.0).contains(&self.moment1_decay)
            && (0.0..1.0).contains(&self.moment2_decay)
            && self.epsilon_stabilizer > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "batch_size >= 1, step_size > 0, decays in [0, 1) and epsilon > 0 required".into(),
            ))
        }
    }
}

/// Per-epoch mean squared errors in target units.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    /// Epoch (1-based) whose parameters were kept; 0 means the initial ones.
    pub best_epoch: usize,
}

/// He-initialized network with zero biases and identity statistics.
pub fn init_mlp(d: usize, hidden: &[usize], seed: u64) -> Result<MlpModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_with(d, hidden, &mut rng)
}

fn init_with(d: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Result<MlpModel> {
    if d == 0 || hidden.is_empty() || hidden.contains(&0) {
        return Err(Error::InvalidDims(format!(
            "input width {d} and hidden widths {hidden:?} must all be positive"
        )));
    }
    let mut dims = vec![d];
    dims.extend_from_slice(hidden);
    dims.push(1);
    let mut weights = Vec::with_capacity(dims.len() - 1);
    let mut biases = Vec::with_capacity(dims.len() - 1);
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        weights.push(Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(rng)));
        biases.push(Array1::zeros(fan_out));
    }
    Ok(MlpModel {
        layer_dims: dims,
        weights,
        biases,
        elu_alpha: 1.0,
        input_stats: vec![Stats::IDENTITY; d],
        target_stats: Stats::IDENTITY,
        feature_names: Vec::new(),
    })
}

/// Activations of one forward pass over a batch.
struct Trace {
    /// Layer inputs; `inputs[0]` is the standardized batch.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of every layer.
    pre: Vec<Array2<f64>>,
}

impl MlpModel {
    pub fn n_inputs(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn standardize(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = x.to_owned();
        for (mut col, st) in z.axis_iter_mut(Axis(1)).zip(&self.input_stats) {
            col.mapv_inplace(|v| (v - st.mean) / st.std);
        }
        z
    }

    fn trace(&self, z: Array2<f64>) -> Trace {
        let last = self.n_layers() - 1;
        let mut inputs = vec![z];
        let mut pre = Vec::with_capacity(self.n_layers());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut a = inputs[l].dot(&w.t());
            a += b;
            if l < last {
                let alpha = self.elu_alpha;
                inputs.push(a.mapv(|v| elu(v, alpha)));
            }
            pre.push(a);
        }
        Trace { inputs, pre }
    }

    /// Network output in standardized target units.
    fn forward_std(&self, z: Array2<f64>) -> Array1<f64> {
        let t = self.trace(z);
        t.pre[self.n_layers() - 1].column(0).to_owned()
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        let d = self.n_inputs();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        let view = ArrayView2::from_shape((1, d), x).expect("1 x d view");
        Ok(self.predict_matrix(view)?[0])
    }

    pub fn predict_matrix(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let d = self.n_inputs();
        if x.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.ncols(),
            });
        }
        let ts = self.target_stats;
        Ok(self
            .forward_std(self.standardize(x))
            .iter()
            .map(|v| v * ts.std + ts.mean)
            .collect())
    }

    /// Loss and parameter gradients on a standardized batch.
    fn loss_grad(&self, z: Array2<f64>, y: &Array1<f64>) -> (f64, Vec<Array2<f64>>, Vec<Array1<f64>>) {
        let n = z.nrows() as f64;
        let t = self.trace(z);
        let last = self.n_layers() - 1;
        let resid = &t.pre[last].column(0) - y;
        let loss = resid.dot(&resid) / n;

        let mut gw = vec![Array2::zeros((0, 0)); self.n_layers()];
        let mut gb = vec![Array1::zeros(0); self.n_layers()];
        let mut delta = (resid * (2.0 / n)).insert_axis(Axis(1));
        for l in (0..=last).rev() {
            gw[l] = delta.t().dot(&t.inputs[l]);
            gb[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l]);
                let alpha = self.elu_alpha;
                Zip::from(&mut back)
                    .and(&t.pre[l - 1])
                    .for_each(|d, &p| *d *= elu_grad(p, alpha));
                delta = back;
            }
        }
        (loss, gw, gb)
    }

    fn loss_std(&self, z: &Array2<f64>, y: &Array1<f64>) -> f64 {
        let r = self.forward_std(z.clone()) - y;
        r.dot(&r) / z.nrows() as f64
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    pub fn to_json<W: Write>(&self, sink: W) -> Result<()> {
        serde_json::to_writer_pretty(sink, self)?;
        Ok(())
    }

    pub fn from_json<R: Read>(source: R) -> Result<Self> {
        let m: Self = serde_json::from_reader(source)?;
        let dims_ok = m.layer_dims.len() >= 2
            && m.weights.len() == m.layer_dims.len() - 1
            && m.biases.len() == m.weights.len()
            && m.input_stats.len() == m.layer_dims[0]
            && m.layer_dims.windows(2).zip(m.weights.iter().zip(&m.biases)).all(|(d, (w, b))| {
                w.dim() == (d[1], d[0]) && b.len() == d[1]
            });
        if !dims_ok {
            return Err(Error::InvalidDims("weight shapes disagree with layer_dims".into()));
        }
        Ok(m)
    }
}

impl Predictor for MlpModel {
    fn n_features(&self) -> usize {
        self.n_inputs()
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.predict_matrix(x)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, model: &mut MlpModel, gw: &[Array2<f64>], gb: &[Array1<f64>], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.moment1_decay, cfg.moment2_decay);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let grads = gw.iter().zip(gb).flat_map(|(w, b)| w.iter().chain(b.iter()));
        for (((p, g), m), v) in model.params_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= cfg.step_size * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon_stabilizer);
        }
    }
}

/// Trains on `train`, keeping the parameters with the lowest validation MSE.
pub fn train_mlp(
    train: &AlignedDataset,
    val: &AlignedDataset,
    cfg: &TrainConfig,
    hidden: &[usize],
) -> Result<(MlpModel, History)> {
    cfg.validate()?;
    let d = train.n_features();
    if train.n_rows() == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    if val.n_features() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: val.n_features(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init_with(d, hidden, &mut rng)?;
    model.feature_names = train.feature_names.clone();
    if cfg.standardize {
        model.input_stats = train
            .features
            .axis_iter(Axis(1))
            .map(|c| Stats::fit(c.iter().copied()))
            .collect();
        model.target_stats = Stats::fit(train.target.iter().copied());
    }

    let ts = model.target_stats;
    let zx = model.standardize(train.features.view());
    let zy = Array1::from_iter(train.target.iter().map(|v| (v - ts.mean) / ts.std));
    let vx = model.standardize(val.features.view());
    let vy = Array1::from_iter(val.target.iter().map(|v| (v - ts.mean) / ts.std));
    let scale = ts.std * ts.std;

    let mut history = History::default();
    let mut best = model.clone();
    let mut best_val = if val.n_rows() > 0 { model.loss_std(&vx, &vy) } else { f64::INFINITY };
    let mut stale = 0;
    let mut adam = Adam {
        m: vec![0.0; model.n_params()],
        v: vec![0.0; model.n_params()],
        t: 0,
    };
    let n = zx.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sse = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let bx = zx.select(Axis(0), chunk);
            let by = Array1::from_iter(chunk.iter().map(|&i| zy[i]));
            let (loss, gw, gb) = model.loss_grad(bx, &by);
            sse += loss * chunk.len() as f64;
            adam.step(&mut model, &gw, &gb, cfg);
        }
        history.train_mse.push(sse / n as f64 * scale);
        let v = if val.n_rows() > 0 { model.loss_std(&vx, &vy) } else { sse / n as f64 };
        history.val_mse.push(v * scale);
        if v < best_val {
            best_val = v;
            best = model.clone();
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    Ok((best, history))
}

/// Largest per-layer relative error between backpropagated and
/// central-difference gradients of the standardized-units MSE.
pub fn grad_check(model: &MlpModel, batch: &AlignedDataset, eps: f64) -> Result<f64> {
    Ok(grad_check_layers(model, batch, eps)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Relative error `|a - n| / (|a| + |n|)` per layer, with `a` and `n` the
/// analytic and numeric gradients of that layer's weights and biases taken
/// as one vector.
pub fn grad_check_layers(model: &MlpModel, batch: &AlignedDataset, eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidEps(eps));
    }
    if batch.n_rows() == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    if batch.n_features() != model.n_inputs() {
        return Err(Error::DimensionMismatch {
            expected: model.n_inputs(),
            got: batch.n_features(),
        });
    }
    let ts = model.target_stats;
    let z = model.standardize(batch.features.view());
    let y = Array1::from_iter(batch.target.iter().map(|v| (v - ts.mean) / ts.std));
    let (_, gw, gb) = model.loss_grad(z.clone(), &y);

    let mut probe = model.clone();
    let numeric = |probe: &mut MlpModel, get: &dyn Fn(&mut MlpModel) -> &mut f64| {
        let orig = *get(probe);
        *get(probe) = orig + eps;
        let up = probe.loss_std(&z, &y);
        *get(probe) = orig - eps;
        let down = probe.loss_std(&z, &y);
        *get(probe) = orig;
        (up - down) / (2.0 * eps)
    };
    let mut out = Vec::with_capacity(model.n_layers());
    for l in 0..model.n_layers() {
        let (mut diff, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
        let mut add = |a: f64, n: f64| {
            diff += (a - n) * (a - n);
            a_sq += a * a;
            n_sq += n * n;
        };
        let (rows, cols) = model.weights[l].dim();
        for i in 0..rows {
            for j in 0..cols {
                add(gw[l][[i, j]], numeric(&mut probe, &|m: &mut MlpModel| &mut m.weights[l][[i, j]]));
            }
            add(gb[l][i], numeric(&mut probe, &|m: &mut MlpModel| &mut m.biases[l][i]));
        }
        let denom = a_sq.sqrt() + n_sq.sqrt();
        out.push(if denom > 0.0 { diff.sqrt() / denom } else { 0.0 });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(x: Array2<f64>, y: Vec<f64>) -> AlignedDataset {
        let n = x.nrows();
        let names = (0..x.ncols()).map(|i| format!("x{i}")).collect();
        AlignedDataset::new((0..n).map(|i| i as f64).collect(), x, names, y).unwrap()
    }

    fn random_batch(n: usize, d: usize, seed: u64) -> AlignedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x = Array2::from_shape_simple_fn((n, d), || normal.sample(&mut rng));
        let y = (0..n).map(|_| normal.sample(&mut rng)).collect();
        dataset(x, y)
    }

    fn chain(w: f64) -> MlpModel {
        let mut m = init_mlp(1, &[1, 1, 1], 0).unwrap();
        m.weights.iter_mut().for_each(|a| a.fill(w));
        m
    }

    #[test]
    fn elu_values() {
        assert_eq!(elu(0.0, 1.0), 0.0);
        assert_eq!(elu(2.0, 1.0), 2.0);
        assert!((elu(-1.0, 1.0) - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((elu(-1.0, 1.0) + 0.632121).abs() < 1e-6);
    }

    #[test]
    fn init_shapes_and_determinism() {
        let m = init_mlp(42, &DEFAULT_HIDDEN, 3).unwrap();
        let shapes: Vec<_> = m.weights.iter().map(|w| w.dim()).collect();
        assert_eq!(shapes, vec![(64, 42), (64, 64), (64, 64), (1, 64)]);
        assert_eq!(m, init_mlp(42, &DEFAULT_HIDDEN, 3).unwrap());
        assert_ne!(m, init_mlp(42, &DEFAULT_HIDDEN, 4).unwrap());
        assert!(m.biases.iter().all(|b| b.iter().all(|v| *v == 0.0)));
        assert!(matches!(init_mlp(0, &[4], 0), Err(Error::InvalidDims(_))));
        assert!(matches!(init_mlp(3, &[4, 0], 0), Err(Error::InvalidDims(_))));
    }

    #[test]
    fn init_std_matches_he() {
        let m = init_mlp(64, &[64, 64], 9).unwrap();
        let w = &m.weights[1];
        assert_eq!(w.len(), 4096);
        let mean = w.mean().unwrap();
        let std = (w.mapv(|v| (v - mean).powi(2)).sum() / w.len() as f64).sqrt();
        let want = (2.0f64 / 64.0).sqrt();
        assert!((std / want - 1.0).abs() < 0.1, "{std} vs {want}");
    }

    #[test]
    fn forward_examples() {
        let mut zero = init_mlp(3, &[4, 4, 4], 1).unwrap();
        zero.weights.iter_mut().for_each(|w| w.fill(0.0));
        assert_eq!(zero.forward(&[1.0, -7.0, 3.0]).unwrap(), 0.0);

        let m = chain(1.0);
        assert_eq!(m.forward(&[1.0]).unwrap(), 1.0);
        let want = (0..3).fold(-1.0f64, |x, _| x.exp() - 1.0);
        let got = m.forward(&[-1.0]).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got + 0.374_082).abs() < 1e-6);
        assert!(matches!(m.forward(&[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn gradient_check_small_net() {
        for seed in 0..3 {
            let m = init_mlp(3, &[4, 4, 4], seed).unwrap();
            let err = grad_check(&m, &random_batch(16, 3, seed + 100), 1e-6).unwrap();
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn gradient_check_zero_net() {
        let mut m = init_mlp(3, &[4, 4, 4], 0).unwrap();
        m.weights.iter_mut().for_each(|w| w.fill(0.0));
        let batch = random_batch(8, 3, 5);
        assert!(grad_check(&m, &batch, 1e-6).unwrap() < 1e-9);
        let z = m.standardize(batch.features.view());
        let y = Array1::from(batch.target.clone());
        let (_, _, gb) = m.loss_grad(z, &y);
        let want = -2.0 * y.mean().unwrap();
        assert!((gb[3][0] - want).abs() < 1e-12);
        assert!(matches!(grad_check(&m, &batch, 0.0), Err(Error::InvalidEps(_))));
    }

    #[test]
    fn zero_epochs_returns_init() {
        let ds = random_batch(20, 2, 1);
        let cfg = TrainConfig {
            epochs: 0,
            standardize: false,
            seed: 4,
            ..TrainConfig::default()
        };
        let (m, h) = train_mlp(&ds, &ds, &cfg, &[3, 3, 3]).unwrap();
        let mut init = init_mlp(2, &[3, 3, 3], 4).unwrap();
        init.feature_names = ds.feature_names.clone();
        assert_eq!(m, init);
        assert!(h.train_mse.is_empty());
    }

    #[test]
    fn json_round_trip() {
        let m = init_mlp(3, &[5, 4, 2], 8).unwrap();
        let mut buf = Vec::new();
        m.to_json(&mut buf).unwrap();
        assert_eq!(MlpModel::from_json(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn learns_doubling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = rand_distr::Uniform::new(-1.0, 1.0).unwrap();
        let x: Vec<f64> = (0..1000).map(|_| u.sample(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let ds = dataset(Array2::from_shape_vec((1000, 1), x).unwrap(), y);
        let (train, val) = (ds.slice_rows(0..800), ds.slice_rows(800..1000));
        let cfg = TrainConfig {
            epochs: 2000,
            patience: 50,
            seed: 1,
            ..TrainConfig::default()
        };
        let (_, h) = train_mlp(&train, &val, &cfg, &[16, 16, 16]).unwrap();
        let best = h.val_mse[h.best_epoch - 1];
        assert!(best < 1e-3, "val mse {best} after {} epochs", h.val_mse.len());
        assert!(best <= *h.val_mse.last().unwrap());
    }
}
