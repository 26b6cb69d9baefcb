//! Fully connected current-stress surrogate `(P, V2, D1, D2) -> i_pk`,
//! trained with Adagrad on min-max normalized data.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::textio::{fmt_f64, parse_f64, read_file, write_file};

/// Input width, two rectifier hidden layers, scalar output.
pub const LAYER_DIMS: [usize; 4] = [4, 128, 32, 1];

const MODEL_TAG: &str = "dab-tps-mlp";
const MODEL_VERSION: u32 = 1;
const ADAGRAD_EPS: f64 = 1e-8;

/// Affine map of `[min, max]` onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && max > min) {
            return Err(Error::InvalidConfig(format!("normalizer needs min < max, got [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }

    pub fn fit(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let (lo, hi) = values
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Self::new(lo, hi)
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        self.min + y * (self.max - self.min)
    }
}

/// One affine layer; `weights` is row-major `[outputs][inputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, y) in out.iter_mut().enumerate() {
            *y = self.biases[o] + dot(self.row(o), x);
        }
    }
}

/// Four independent partial sums so the compiler can vectorize; the
/// summation order is fixed, so results stay deterministic.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Multilayer perceptron with rectifier hidden layers and identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Dense>,
    pub input_norm: Vec<MinMax>,
    pub target_norm: MinMax,
}

impl MlpModel {
    /// Layers with He-style uniform weights (`±sqrt(6 / fan_in)`) and zero
    /// biases.
    pub fn new(dims: &[usize], input_norm: Vec<MinMax>, target_norm: MinMax, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad layer dims {dims:?}")));
        }
        if dims[dims.len() - 1] != 1 || input_norm.len() != dims[0] {
            return Err(Error::InvalidConfig(format!(
                "dims {dims:?} need scalar output and {} input normalizers",
                dims[0]
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let mut layer = Dense::zeros(w[0], w[1]);
                let bound = (6.0 / w[0] as f64).sqrt();
                for v in &mut layer.weights {
                    *v = rng.random_range(-bound..bound);
                }
                layer
            })
            .collect();
        Ok(Self {
            layers,
            input_norm,
            target_norm,
        })
    }

    /// Surrogate with [`LAYER_DIMS`], normalizers fitted on `train`.
    pub fn for_training_split(train: &[SampleRecord], seed: u64) -> Result<Self> {
        let feasible: Vec<&SampleRecord> = train.iter().filter(|r| r.feasible()).collect();
        if feasible.is_empty() {
            return Err(Error::InvalidConfig("training split has no feasible records".into()));
        }
        let input_norm = (0..4)
            .map(|k| MinMax::fit(feasible.iter().map(|r| r.inputs()[k])))
            .collect::<Result<Vec<_>>>()?;
        let target_norm = MinMax::fit(feasible.iter().map(|r| r.i_pk()))?;
        Self::new(&LAYER_DIMS, input_norm, target_norm, seed)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn normalize_inputs(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.input_norm).map(|(v, n)| n.normalize(*v)).collect()
    }

    /// Forward pass on already normalized inputs; returns the normalized output.
    pub fn predict_normalized(&self, x: &[f64]) -> f64 {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            next.resize(layer.outputs, 0.0);
            layer.apply(&cur, &mut next);
            if k < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur[0]
    }

    /// Predicted current stress in amperes for raw `(p, v2, d1, d2)`.
    pub fn forward(&self, x: &[f64]) -> f64 {
        self.target_norm.denormalize(self.predict_normalized(&self.normalize_inputs(x)))
    }

    fn zeros_like(&self) -> Vec<Dense> {
        self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect()
    }

    fn weight_norm_sq(&self) -> f64 {
        self.layers.iter().flat_map(|l| &l.weights).map(|w| w * w).sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let dims = self.dims().iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "{MODEL_TAG} {MODEL_VERSION}");
        let _ = writeln!(s, "dims {dims}");
        for n in &self.input_norm {
            let _ = writeln!(s, "input_norm {} {}", fmt_f64(n.min), fmt_f64(n.max));
        }
        let _ = writeln!(s, "target_norm {} {}", fmt_f64(self.target_norm.min), fmt_f64(self.target_norm.max));
        for (k, layer) in self.layers.iter().enumerate() {
            let _ = writeln!(s, "layer {k}");
            for o in 0..layer.outputs {
                let row: Vec<String> = layer.row(o).iter().copied().map(fmt_f64).collect();
                let _ = writeln!(s, "w {}", row.join(" "));
            }
            let b: Vec<String> = layer.biases.iter().copied().map(fmt_f64).collect();
            let _ = writeln!(s, "b {}", b.join(" "));
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut next = |what: &str| -> Result<(usize, Vec<&str>)> {
            let (idx, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("unexpected end of file, expected {what}")))?;
            let mut fields: Vec<&str> = line.split_whitespace().collect();
            if fields.first() != Some(&what) {
                return Err(Error::parse(path, idx + 1, format!("expected {what:?}")));
            }
            fields.remove(0);
            Ok((idx + 1, fields))
        };
        let nums = |fields: &[&str], line: usize| -> Result<Vec<f64>> {
            fields.iter().map(|f| parse_f64(f, path, line)).collect()
        };

        let (line, tag) = next(MODEL_TAG)?;
        if tag != [MODEL_VERSION.to_string()] {
            return Err(Error::parse(path, line, format!("unsupported model version {tag:?}")));
        }
        let (line, dims) = next("dims")?;
        let dims: Vec<usize> = dims
            .iter()
            .map(|d| d.parse().map_err(|_| Error::parse(path, line, format!("bad dim {d:?}"))))
            .collect::<Result<_>>()?;
        if dims.len() < 2 || dims.contains(&0) || dims[dims.len() - 1] != 1 {
            return Err(Error::parse(path, line, format!("bad dims {dims:?}")));
        }
        let mut input_norm = Vec::new();
        for _ in 0..dims[0] {
            let (line, f) = next("input_norm")?;
            let v = nums(&f, line)?;
            if v.len() != 2 {
                return Err(Error::parse(path, line, "input_norm needs min and max"));
            }
            input_norm.push(MinMax::new(v[0], v[1]).map_err(|e| Error::parse(path, line, e.to_string()))?);
        }
        let (line, f) = next("target_norm")?;
        let v = nums(&f, line)?;
        if v.len() != 2 {
            return Err(Error::parse(path, line, "target_norm needs min and max"));
        }
        let target_norm = MinMax::new(v[0], v[1]).map_err(|e| Error::parse(path, line, e.to_string()))?;

        let mut layers = Vec::new();
        for (k, w) in dims.windows(2).enumerate() {
            let (line, idx) = next("layer")?;
            if idx != [k.to_string()] {
                return Err(Error::parse(path, line, format!("expected layer {k}")));
            }
            let mut layer = Dense::zeros(w[0], w[1]);
            for o in 0..w[1] {
                let (line, f) = next("w")?;
                let row = nums(&f, line)?;
                if row.len() != w[0] {
                    return Err(Error::parse(path, line, format!("expected {} weights", w[0])));
                }
                layer.weights[o * w[0]..(o + 1) * w[0]].copy_from_slice(&row);
            }
            let (line, f) = next("b")?;
            layer.biases = nums(&f, line)?;
            if layer.biases.len() != w[1] {
                return Err(Error::parse(path, line, format!("expected {} biases", w[1])));
            }
            layers.push(layer);
        }
        Ok(Self {
            layers,
            input_norm,
            target_norm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_file(path)?, path)
    }
}

/// Normalized training pairs stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedData {
    pub dim: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl NormalizedData {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            xs: Vec::new(),
            ys: Vec::new(),
        }
    }

    /// Feasible records mapped through the model's normalizers.
    pub fn from_records(model: &MlpModel, records: &[SampleRecord]) -> Self {
        let mut data = Self::new(model.input_dim());
        for r in records.iter().filter(|r| r.feasible()) {
            data.push(&model.normalize_inputs(&r.inputs()), model.target_norm.normalize(r.i_pk()));
        }
        data
    }

    pub fn push(&mut self, x: &[f64], y: f64) {
        assert_eq!(x.len(), self.dim);
        self.xs.extend_from_slice(x);
        self.ys.push(y);
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }
}

/// Per-layer gradient, shaped like the model's layers.
pub type Gradients = Vec<Dense>;

/// Scratch buffers for one forward/backward pass.
struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(model: &MlpModel) -> Self {
        let dims = model.dims();
        Self {
            acts: dims.iter().map(|&d| vec![0.0; d]).collect(),
            deltas: dims.iter().map(|&d| vec![0.0; d]).collect(),
        }
    }
}

/// Loss `mean((y_hat - y)^2) + l2 * sum(w^2)` over the selected rows (biases
/// are not penalized) and its exact gradient.
pub fn compute_gradients(model: &MlpModel, data: &NormalizedData, rows: &[usize], l2: f64) -> (f64, Gradients) {
    let mut grads = model.zeros_like();
    let mut ws = Workspace::new(model);
    let loss = accumulate_gradients(model, data, rows, l2, &mut grads, &mut ws);
    (loss, grads)
}

fn accumulate_gradients(
    model: &MlpModel,
    data: &NormalizedData,
    rows: &[usize],
    l2: f64,
    grads: &mut Gradients,
    ws: &mut Workspace,
) -> f64 {
    assert!(!rows.is_empty(), "gradient of an empty batch");
    for g in grads.iter_mut() {
        g.weights.fill(0.0);
        g.biases.fill(0.0);
    }
    let scale = 1.0 / rows.len() as f64;
    let last = model.layers.len() - 1;
    let mut sq = 0.0;
    for &r in rows {
        ws.acts[0].copy_from_slice(data.row(r));
        for (k, layer) in model.layers.iter().enumerate() {
            let (head, tail) = ws.acts.split_at_mut(k + 1);
            layer.apply(&head[k], &mut tail[0]);
            if k < last {
                tail[0].iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        let err = ws.acts[last + 1][0] - data.ys[r];
        sq += err * err;
        ws.deltas[last + 1][0] = 2.0 * err * scale;

        for k in (0..=last).rev() {
            let layer = &model.layers[k];
            let g = &mut grads[k];
            let (d_lo, d_hi) = ws.deltas.split_at_mut(k + 1);
            let delta = &d_hi[0];
            let input = &ws.acts[k];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(w, x)| *w += d * x);
            }
            if k > 0 {
                let prev = &mut d_lo[k];
                prev.fill(0.0);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    prev.iter_mut().zip(layer.row(o)).for_each(|(p, w)| *p += d * w);
                }
                // Rectifier derivative: active where the forward output was positive.
                prev.iter_mut().zip(input).for_each(|(p, a)| {
                    if *a <= 0.0 {
                        *p = 0.0
                    }
                });
            }
        }
    }
    if l2 > 0.0 {
        for (g, layer) in grads.iter_mut().zip(&model.layers) {
            g.weights.iter_mut().zip(&layer.weights).for_each(|(g, w)| *g += 2.0 * l2 * w);
        }
    }
    sq * scale + l2 * model.weight_norm_sq()
}

/// Mean squared error on normalized targets, without the penalty term.
pub fn mse(model: &MlpModel, data: &NormalizedData) -> f64 {
    let total: f64 = (0..data.len())
        .map(|i| {
            let e = model.predict_normalized(data.row(i)) - data.ys[i];
            e * e
        })
        .sum();
    total / data.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2_coefficient: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            l2_coefficient: 1e-5,
            max_epochs: 1000,
            batch_size: 256,
            seed: 0,
            early_stop_patience: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.l2_coefficient >= 0.0) {
            return Err(Error::InvalidConfig(format!("l2_coefficient must be >= 0, got {}", self.l2_coefficient)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Average and largest percentage deviation `100 |pred - true| / true`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Deviation {
    pub average_pct: f64,
    pub largest_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub validate_loss: Vec<f64>,
    pub best_epoch: usize,
    pub train_deviation: Deviation,
    pub validate_deviation: Deviation,
}

fn adagrad_step(model: &mut MlpModel, grads: &Gradients, accum: &mut Gradients, lr: f64) {
    for ((layer, g), acc) in model.layers.iter_mut().zip(grads).zip(accum.iter_mut()) {
        let pairs = layer
            .weights
            .iter_mut()
            .zip(&g.weights)
            .zip(acc.weights.iter_mut())
            .chain(layer.biases.iter_mut().zip(&g.biases).zip(acc.biases.iter_mut()));
        for ((theta, &g), acc) in pairs {
            *acc += g * g;
            *theta -= lr * g / (acc.sqrt() + ADAGRAD_EPS);
        }
    }
}

/// Mini-batch Adagrad on normalized pairs. Returns the parameters with the
/// lowest validation loss and the per-epoch loss history.
pub fn train_normalized(
    model: &MlpModel,
    train: &NormalizedData,
    validate: &NormalizedData,
    cfg: &TrainConfig,
) -> Result<(MlpModel, Vec<f64>, Vec<f64>, usize)> {
    cfg.validate()?;
    if train.is_empty() || validate.is_empty() {
        return Err(Error::InvalidConfig("training and validation splits must be non-empty".into()));
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grads = model.zeros_like();
    let mut accum = model.zeros_like();
    let mut ws = Workspace::new(&model);

    let mut best = (f64::INFINITY, model.clone(), 0);
    let mut since_best = 0;
    let (mut train_hist, mut val_hist) = (Vec::new(), Vec::new());
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let loss = accumulate_gradients(&model, train, batch, cfg.l2_coefficient, &mut grads, &mut ws);
            if !loss.is_finite() {
                return Err(Error::DivergenceDetected { epoch });
            }
            epoch_loss += loss * batch.len() as f64;
            adagrad_step(&mut model, &grads, &mut accum, cfg.learning_rate);
        }
        let val = mse(&model, validate);
        if !val.is_finite() {
            return Err(Error::DivergenceDetected { epoch });
        }
        train_hist.push(epoch_loss / train.len() as f64);
        val_hist.push(val);
        if val < best.0 {
            best = (val, model.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok((best.1, train_hist, val_hist, best.2))
}

/// Train on feasible records of the two splits and report deviations.
pub fn train(
    model: &MlpModel,
    train_set: &[SampleRecord],
    validate_set: &[SampleRecord],
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainReport)> {
    let train_data = NormalizedData::from_records(model, train_set);
    let val_data = NormalizedData::from_records(model, validate_set);
    let (best, train_loss, validate_loss, best_epoch) = train_normalized(model, &train_data, &val_data, cfg)?;
    let report = TrainReport {
        train_loss,
        validate_loss,
        best_epoch,
        train_deviation: evaluate_deviation(&best, train_set),
        validate_deviation: evaluate_deviation(&best, validate_set),
    };
    Ok((best, report))
}

pub fn percentage_deviation(predicted: f64, actual: f64) -> f64 {
    100.0 * (predicted - actual).abs() / actual
}

/// Deviation over the feasible records of `set`.
pub fn evaluate_deviation(model: &MlpModel, set: &[SampleRecord]) -> Deviation {
    let devs: Vec<f64> = set
        .iter()
        .filter(|r| r.feasible())
        .map(|r| percentage_deviation(model.forward(&r.inputs()), r.i_pk()))
        .collect();
    if devs.is_empty() {
        return Deviation::default();
    }
    Deviation {
        average_pct: devs.iter().sum::<f64>() / devs.len() as f64,
        largest_pct: devs.iter().copied().fold(0.0, f64::max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Solved;

    fn unit_norms(n: usize) -> Vec<MinMax> {
        vec![MinMax::new(0.0, 1.0).unwrap(); n]
    }

    fn micro_model(dims: &[usize], seed: u64) -> MlpModel {
        let mut m = MlpModel::new(dims, unit_norms(dims[0]), MinMax::new(0.0, 1.0).unwrap(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for l in &mut m.layers {
            l.biases.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        m
    }

    fn random_data(dim: usize, n: usize, seed: u64) -> NormalizedData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = NormalizedData::new(dim);
        for _ in 0..n {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..1.0)).collect();
            let y = x.iter().sum::<f64>().sin();
            d.push(&x, y);
        }
        d
    }

    #[test]
    fn constant_network() {
        let mut m = micro_model(&[4, 3, 2, 1], 1);
        for l in &mut m.layers {
            l.weights.fill(0.0);
            l.biases.fill(0.0);
        }
        m.layers[2].biases[0] = 0.37;
        m.target_norm = MinMax::new(0.0, 1.0).unwrap();
        for x in [[0.0; 4], [100.0, 200.0, 0.3, 0.9], [-5.0, 1e3, 1.0, 0.0]] {
            assert_eq!(m.forward(&x), 0.37);
        }
    }

    #[test]
    fn rectifier_kills_negative_preactivation() {
        let mut m = micro_model(&[4, 1, 1], 2);
        m.layers[0].weights = vec![1.0, 0.0, 0.0, 0.0];
        m.layers[0].biases = vec![-2.0];
        m.layers[1].weights = vec![5.0];
        m.layers[1].biases = vec![0.25];
        assert_eq!(m.predict_normalized(&[0.5, 0.1, 0.2, 0.3]), 0.25);
        assert_eq!(m.predict_normalized(&[3.0, 0.1, 0.2, 0.3]), 0.25 + 5.0);
    }

    #[test]
    fn zero_model_has_zero_loss_and_gradient() {
        let mut m = micro_model(&[2, 3, 1], 3);
        for l in &mut m.layers {
            l.weights.fill(0.0);
            l.biases.fill(0.0);
        }
        let mut d = NormalizedData::new(2);
        d.push(&[0.3, 0.4], 0.0);
        d.push(&[0.9, 0.1], 0.0);
        let (loss, g) = compute_gradients(&m, &d, &[0, 1], 1e-5);
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|l| l.weights.iter().chain(&l.biases).all(|v| *v == 0.0)));
    }

    #[test]
    fn duplicated_batch_gives_same_loss_and_gradient() {
        let m = micro_model(&[3, 5, 4, 1], 4);
        let d = random_data(3, 6, 5);
        let (l1, g1) = compute_gradients(&m, &d, &[0, 1, 2, 3, 4, 5], 1e-3);
        let (l2, g2) = compute_gradients(&m, &d, &[0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5], 1e-3);
        assert!((l1 - l2).abs() < 1e-15);
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.weights.iter().chain(&a.biases).zip(b.weights.iter().chain(&b.biases)) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn normalizer_round_trip() {
        let n = MinMax::new(160.0, 230.0).unwrap();
        for x in [160.0, 171.3, 230.0, 1e3, -7.0] {
            assert!((n.denormalize(n.normalize(x)) - x).abs() <= 1e-12 * x.abs());
        }
        assert!(MinMax::new(1.0, 1.0).is_err());
    }

    #[test]
    fn deviation_arithmetic() {
        let mut m = micro_model(&[4, 1], 6);
        m.layers[0].weights.fill(0.0);
        m.layers[0].biases[0] = 1.05;
        m.target_norm = MinMax::new(0.0, 1.0).unwrap();
        let rec = SampleRecord {
            p: 1.0,
            v2: 1.0,
            d1: 1.0,
            d2: 1.0,
            solved: Some(Solved { d0: 0.1, i_pk: 1.0 }),
        };
        let d = evaluate_deviation(&m, &[rec]);
        assert!((d.average_pct - 5.0).abs() < 1e-9 && (d.largest_pct - 5.0).abs() < 1e-9);
        m.layers[0].biases[0] = 1.0;
        assert_eq!(evaluate_deviation(&m, &[rec]), Deviation { average_pct: 0.0, largest_pct: 0.0 });
    }

    #[test]
    fn constant_target_converges() {
        let mut m = micro_model(&[2, 8, 1], 7);
        m.target_norm = MinMax::new(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tr = NormalizedData::new(2);
        let mut va = NormalizedData::new(2);
        for k in 0..200 {
            let x = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            if k % 5 == 0 { va.push(&x, 0.6) } else { tr.push(&x, 0.6) }
        }
        let cfg = TrainConfig {
            learning_rate: 0.05,
            l2_coefficient: 0.0,
            max_epochs: 400,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let (best, _, val, _) = train_normalized(&m, &tr, &va, &cfg).unwrap();
        let min_val = val.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min_val < 1e-4, "{min_val} after {} epochs", val.len());
        for k in 0..va.len() {
            assert!((best.predict_normalized(va.row(k)) - 0.6).abs() < 5e-2);
        }
    }

    #[test]
    fn full_batch_loss_is_non_increasing() {
        let m = micro_model(&[4, 16, 8, 1], 8);
        let data = random_data(4, 100, 10);
        let cfg = TrainConfig {
            batch_size: 100,
            max_epochs: 200,
            early_stop_patience: usize::MAX,
            ..TrainConfig::default()
        };
        let (_, hist, _, _) = train_normalized(&m, &data, &data, &cfg).unwrap();
        for w in hist.windows(2) {
            assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let m = micro_model(&[4, 8, 4, 1], 11);
        let tr = random_data(4, 300, 12);
        let va = random_data(4, 60, 13);
        let cfg = TrainConfig { max_epochs: 20, batch_size: 16, seed: 5, ..TrainConfig::default() };
        let a = train_normalized(&m, &tr, &va, &cfg).unwrap();
        let b = train_normalized(&m, &tr, &va, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported() {
        let m = micro_model(&[2, 4, 1], 14);
        let mut tr = NormalizedData::new(2);
        tr.push(&[0.5, 0.5], f64::NAN);
        let va = tr.clone();
        let err = train_normalized(&m, &tr, &va, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DivergenceDetected { epoch: 0 }));
    }

    fn flat(g: &Gradients) -> Vec<f64> {
        g.iter().flat_map(|l| l.weights.iter().chain(&l.biases).copied()).collect()
    }

    fn param_mut(m: &mut MlpModel, mut k: usize) -> &mut f64 {
        for l in &mut m.layers {
            let n = l.weights.len();
            if k < n {
                return &mut l.weights[k];
            }
            k -= n;
            if k < l.biases.len() {
                return &mut l.biases[k];
            }
            k -= l.biases.len();
        }
        unreachable!()
    }

    fn batch_loss(m: &MlpModel, d: &NormalizedData, rows: &[usize], l2: f64) -> f64 {
        let mse = rows
            .iter()
            .map(|&r| (m.predict_normalized(d.row(r)) - d.ys[r]).powi(2))
            .sum::<f64>()
            / rows.len() as f64;
        mse + l2 * m.weight_norm_sq()
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn gradient_matches_central_differences(
            seed in 0u64..10_000,
            h1 in 1usize..6,
            h2 in 1usize..5,
            n in 1usize..9,
        ) {
            let m = micro_model(&[3, h1, h2, 1], seed);
            let d = random_data(3, n, seed + 1);
            let rows: Vec<usize> = (0..n).collect();
            let l2 = 1e-3;
            let (loss, g) = compute_gradients(&m, &d, &rows, l2);
            proptest::prop_assert!((loss - batch_loss(&m, &d, &rows, l2)).abs() < 1e-12);
            let h = 1e-5;
            for (k, analytic) in flat(&g).into_iter().enumerate() {
                let mut plus = m.clone();
                *param_mut(&mut plus, k) += h;
                let mut minus = m.clone();
                *param_mut(&mut minus, k) -= h;
                let numeric = (batch_loss(&plus, &d, &rows, l2) - batch_loss(&minus, &d, &rows, l2)) / (2.0 * h);
                // A rectifier kink inside the stencil makes the difference quotient meaningless.
                let kinked = [&plus, &minus].iter().any(|p| crosses_kink(&m, p, &d, &rows));
                if !kinked {
                    proptest::prop_assert!(
                        (analytic - numeric).abs() <= 1e-6 * numeric.abs().max(analytic.abs()) + 1e-8,
                        "param {}: analytic {} numeric {}", k, analytic, numeric
                    );
                }
            }
        }
    }

    fn hidden_signs(m: &MlpModel, x: &[f64]) -> Vec<bool> {
        let mut cur = x.to_vec();
        let mut signs = Vec::new();
        for l in &m.layers[..m.layers.len() - 1] {
            let mut next = vec![0.0; l.outputs];
            l.apply(&cur, &mut next);
            signs.extend(next.iter().map(|v| *v > 0.0));
            cur = next.into_iter().map(|v| v.max(0.0)).collect();
        }
        signs
    }

    fn crosses_kink(a: &MlpModel, b: &MlpModel, d: &NormalizedData, rows: &[usize]) -> bool {
        rows.iter().any(|&r| hidden_signs(a, d.row(r)) != hidden_signs(b, d.row(r)))
    }

    #[test]
    fn model_text_round_trip() {
        let m = micro_model(&[4, 6, 3, 1], 15);
        let text = m.to_text();
        assert!(text.starts_with("dab-tps-mlp 1\ndims 4 6 3 1\n"));
        let back = MlpModel::from_text(&text, Path::new("m.txt")).unwrap();
        assert_eq!(back, m);
        let broken = text.replacen("dims 4 6 3 1", "dims 4 6 2 1", 1);
        assert!(MlpModel::from_text(&broken, Path::new("m.txt")).is_err());
    }
}
