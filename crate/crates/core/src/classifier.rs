//! Patch classifier: a 784→128→64→1 perceptron with ReLU hidden layers and
//! a sigmoid output, trained with binary cross-entropy and Adam.
//!
//! The first layer sees `x − 0.5`, so a blank patch is the zero vector.
//! With the raw `[0, 1]` input every patch carries a large common offset
//! and Adam's per-weight steps add up across all 784 columns, which kills
//! most ReLUs within the first epoch.

use std::collections::VecDeque;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patch::{read_grid_csv, write_grid_csv, PATCH_LEN};
use crate::scalar::Real;

pub const LAYER_DIMS: [usize; 4] = [PATCH_LEN, 128, 64, 1];
pub const MODEL_MAGIC: &[u8; 5] = b"AEMLP";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("input has {0} values, expected {PATCH_LEN}")]
    InputLength(usize),
    #[error("input contains a non-finite value")]
    NonFiniteInput,
    #[error("training set has no {0} samples")]
    EmptyClass(&'static str),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model version {0}")]
    UnsupportedVersion(u32),
    #[error("model layer sizes {0:?} do not match {LAYER_DIMS:?}")]
    DimensionMismatch(Vec<usize>),
    #[error("model file is truncated")]
    Truncated,
    #[error("model file has trailing data")]
    TrailingData,
    #[error("dataset {path}: {message}")]
    Dataset { path: PathBuf, message: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Real> {
    /// `out × in`.
    pub weights: DMatrix<T>,
    pub bias: DVector<T>,
}

impl<T: Real> Dense<T> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Real> {
    layers: Vec<Dense<T>>,
}

/// Subtracted from every input before the first layer.
pub const INPUT_CENTER: f64 = 0.5;

#[inline]
fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + eᶻ)` without overflow.
#[inline]
fn softplus<T: Real>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy of a logit against a 0/1 target.
#[inline]
pub fn bce_from_logit<T: Real>(z: T, target: T) -> T {
    softplus(z) - target * z
}

impl<T: Real> Mlp<T> {
    fn from_layers(layers: Vec<Dense<T>>) -> Self {
        Self { layers }
    }

    /// All-zero parameters.
    pub fn zeros() -> Self {
        Self::from_layers(
            LAYER_DIMS
                .windows(2)
                .map(|w| Dense::zeros(w[0], w[1]))
                .collect(),
        )
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = LAYER_DIMS
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = DMatrix::from_fn(fan_out, fan_in, |_, _| T::lit(rng.random_range(-bound..bound)));
                Dense {
                    weights,
                    bias: DVector::zeros(fan_out),
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Parameters flattened layer by layer, weights (row-major) then biases.
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for r in 0..l.weights.nrows() {
                out.extend(l.weights.row(r).iter().copied());
            }
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_params(&mut self, params: &[T]) {
        assert_eq!(params.len(), self.param_count());
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for r in 0..l.weights.nrows() {
                for c in 0..l.weights.ncols() {
                    l.weights[(r, c)] = it.next().unwrap();
                }
            }
            for b in l.bias.iter_mut() {
                *b = it.next().unwrap();
            }
        }
    }

    fn check_input(x: &[T]) -> Result<(), ClassifierError> {
        if x.len() != PATCH_LEN {
            return Err(ClassifierError::InputLength(x.len()));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(ClassifierError::NonFiniteInput);
        }
        Ok(())
    }

    /// Pre-sigmoid output.
    pub fn logit(&self, x: &[T]) -> Result<T, ClassifierError> {
        Self::check_input(x)?;
        // Patches are mostly blank, so the first layer only visits the
        // columns that are not.
        let w1 = &self.layers[0].weights;
        let mut h = self.layers[0].bias.clone();
        let center = T::lit(INPUT_CENTER);
        for (c, &v) in x.iter().enumerate() {
            let d = v - center;
            if d != T::zero() {
                h.axpy(d, &w1.column(c), T::one());
            }
        }
        h.apply(|v| *v = v.max(T::zero()));
        let l2 = &self.layers[1];
        let mut h2 = &l2.weights * h + &l2.bias;
        h2.apply(|v| *v = v.max(T::zero()));
        let l3 = &self.layers[2];
        Ok(l3.weights.row(0).transpose().dot(&h2) + l3.bias[0])
    }

    /// Probability that the patch shows a tracked object.
    pub fn forward(&self, x: &[T]) -> Result<T, ClassifierError> {
        Ok(sigmoid(self.logit(x)?))
    }

    /// Decision at threshold 0.5.
    pub fn classify(&self, x: &[T]) -> Result<bool, ClassifierError> {
        Ok(self.logit(x)? >= T::zero())
    }

    /// Logits for the columns of `x` (`784 × B`).
    pub fn logits_batch(&self, x: &DMatrix<T>) -> DVector<T> {
        let mut a = x.add_scalar(-T::lit(INPUT_CENTER));
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = &l.weights * &a;
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            if k + 1 < self.layers.len() {
                z.apply(|v| *v = v.max(T::zero()));
            }
            a = z;
        }
        a.row(0).transpose()
    }

    /// Mean BCE over the batch and its gradient, laid out like the layers.
    pub fn loss_and_gradient(&self, x: &DMatrix<T>, targets: &[T]) -> (T, Vec<Dense<T>>) {
        let (loss, grads, _) = self.backprop(x, targets);
        (loss, grads)
    }

    fn backprop(&self, x: &DMatrix<T>, targets: &[T]) -> (T, Vec<Dense<T>>, DVector<T>) {
        let b = x.ncols();
        let inv_b = T::one() / T::lit(b as f64);
        let mut activations = vec![x.add_scalar(-T::lit(INPUT_CENTER))];
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = &l.weights * activations.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            if k + 1 < self.layers.len() {
                z.apply(|v| *v = v.max(T::zero()));
            }
            activations.push(z);
        }
        let logits = activations.pop().unwrap();
        let mut loss = T::zero();
        let mut delta = DMatrix::<T>::zeros(1, b);
        for j in 0..b {
            let z = logits[(0, j)];
            loss += bce_from_logit(z, targets[j]);
            delta[(0, j)] = (sigmoid(z) - targets[j]) * inv_b;
        }
        let mut grads: Vec<Dense<T>> = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let a_prev = &activations[k];
            let gw = &delta * a_prev.transpose();
            let gb = DVector::from_fn(delta.nrows(), |r, _| delta.row(r).sum());
            if k > 0 {
                let mut back = self.layers[k].weights.transpose() * &delta;
                // ReLU derivative: the stored activation is positive iff the
                // pre-activation was.
                back.zip_apply(a_prev, |g, a| {
                    if a <= T::zero() {
                        *g = T::zero();
                    }
                });
                delta = back;
            }
            grads.push(Dense { weights: gw, bias: gb });
        }
        grads.reverse();
        (loss * inv_b, grads, logits.row(0).transpose())
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), ClassifierError> {
        out.write_all(MODEL_MAGIC)?;
        out.write_u32::<LittleEndian>(MODEL_VERSION)?;
        out.write_u32::<LittleEndian>(LAYER_DIMS.len() as u32)?;
        for d in LAYER_DIMS {
            out.write_u32::<LittleEndian>(d as u32)?;
        }
        for p in self.params() {
            out.write_f64::<LittleEndian>(p.as_f64())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self, ClassifierError> {
        let truncated = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                ClassifierError::Truncated
            } else {
                ClassifierError::Io(e)
            }
        };
        let mut magic = [0u8; 5];
        input.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MODEL_MAGIC {
            return Err(ClassifierError::BadMagic);
        }
        let version = input.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != MODEL_VERSION {
            return Err(ClassifierError::UnsupportedVersion(version));
        }
        let count = input.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        if count > 16 {
            return Err(ClassifierError::DimensionMismatch(vec![count]));
        }
        let mut dims = Vec::with_capacity(count);
        for _ in 0..count {
            dims.push(input.read_u32::<LittleEndian>().map_err(truncated)? as usize);
        }
        if dims != LAYER_DIMS {
            return Err(ClassifierError::DimensionMismatch(dims));
        }
        let mut model = Self::zeros();
        let mut params = Vec::with_capacity(model.param_count());
        for _ in 0..model.param_count() {
            params.push(T::lit(input.read_f64::<LittleEndian>().map_err(truncated)?));
        }
        let mut probe = [0u8; 1];
        if input.read(&mut probe)? != 0 {
            return Err(ClassifierError::TrailingData);
        }
        model.set_params(&params);
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of samples used for training; the rest is held out.
    pub train_fraction: f64,
    /// Return the weights of the epoch with the lowest validation loss
    /// instead of the last epoch. Needs a validation split.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            train_fraction: 0.9,
            keep_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0 && self.epsilon > 0.0) {
            return Err("classifier.learning_rate and classifier.epsilon must be > 0".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err("classifier.beta1 and classifier.beta2 must lie in [0, 1)".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err("classifier.batch_size and classifier.epochs must be >= 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err("classifier.train_fraction must lie in (0, 1]".into());
        }
        Ok(())
    }
}

/// Labelled classifier inputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

impl Dataset {
    pub fn push(&mut self, input: Vec<f64>, label: bool) {
        self.inputs.push(input);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Reads `pos/*.csv` and `neg/*.csv` in file-name order.
    pub fn load_dir(dir: &Path) -> Result<Self, ClassifierError> {
        let mut data = Self::default();
        for (sub, label) in [("pos", true), ("neg", false)] {
            let path = dir.join(sub);
            let mut files: Vec<PathBuf> = match fs::read_dir(&path) {
                Ok(rd) => rd
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|e| e == "csv"))
                    .collect(),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
                Err(e) => return Err(e.into()),
            };
            files.sort();
            for f in files {
                let text = fs::read_to_string(&f)?;
                let values = read_grid_csv(&text).map_err(|message| ClassifierError::Dataset {
                    path: f.clone(),
                    message,
                })?;
                data.push(values, label);
            }
        }
        Ok(data)
    }

    /// Writes one sample as `<dir>/{pos,neg}/<name>.csv`.
    pub fn write_sample(dir: &Path, label: bool, name: &str, input: &[f64]) -> Result<PathBuf, ClassifierError> {
        let sub = dir.join(if label { "pos" } else { "neg" });
        fs::create_dir_all(&sub)?;
        let path = sub.join(format!("{name}.csv"));
        let mut out = std::io::BufWriter::new(fs::File::create(&path)?);
        write_grid_csv(input, &mut out)?;
        out.flush()?;
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_loss: Option<f64>,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose weights were returned (1-based).
    pub selected_epoch: usize,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub wall_clock_s: f64,
}

impl TrainReport {
    pub fn final_validation_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.validation_accuracy)
    }

    /// Validation accuracy of the returned weights.
    pub fn selected_validation_accuracy(&self) -> Option<f64> {
        self.epochs.get(self.selected_epoch.checked_sub(1)?)?.validation_accuracy
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,train_loss,train_accuracy,validation_loss,validation_accuracy")?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{}",
                e.epoch,
                e.train_loss,
                e.train_accuracy,
                opt(e.validation_loss),
                opt(e.validation_accuracy)
            )?;
        }
        Ok(())
    }
}

fn batch_matrix<T: Real>(data: &Dataset, idx: &[usize]) -> (DMatrix<T>, Vec<T>) {
    let x = DMatrix::from_fn(PATCH_LEN, idx.len(), |r, c| T::lit(data.inputs[idx[c]][r]));
    let y = idx
        .iter()
        .map(|&i| if data.labels[i] { T::one() } else { T::zero() })
        .collect();
    (x, y)
}

/// Loss and accuracy of `model` on the given samples.
pub fn evaluate<T: Real>(model: &Mlp<T>, data: &Dataset, idx: &[usize]) -> (f64, f64) {
    if idx.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in idx.chunks(256) {
        let (x, y) = batch_matrix::<T>(data, chunk);
        let z = model.logits_batch(&x);
        for (zi, yi) in z.iter().zip(&y) {
            loss += bce_from_logit(*zi, *yi).as_f64();
            if (*zi >= T::zero()) == (*yi > T::lit(0.5)) {
                correct += 1;
            }
        }
    }
    (loss / idx.len() as f64, correct as f64 / idx.len() as f64)
}

struct Adam<T: Real> {
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
}

impl<T: Real> Adam<T> {
    fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }

    fn apply(&mut self, params: &mut [T], grads: &[T], cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let lr = T::lit(cfg.learning_rate);
        let eps = T::lit(cfg.epsilon);
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

fn flatten<T: Real>(layers: &[Dense<T>]) -> Vec<T> {
    let mut out = Vec::new();
    for l in layers {
        for r in 0..l.weights.nrows() {
            out.extend(l.weights.row(r).iter().copied());
        }
        out.extend(l.bias.iter().copied());
    }
    out
}

/// Trains from a fresh initialization. Deterministic per `(data, config)`.
pub fn train<T: Real>(data: &Dataset, config: &TrainConfig) -> Result<(Mlp<T>, TrainReport), ClassifierError> {
    config.validate().map_err(ClassifierError::Config)?;
    let positives = data.positives();
    if positives == 0 {
        return Err(ClassifierError::EmptyClass("positive"));
    }
    if positives == data.len() {
        return Err(ClassifierError::EmptyClass("negative"));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_train = ((data.len() as f64 * config.train_fraction).round() as usize).clamp(1, data.len());
    let (train_idx, val_idx) = order.split_at(n_train);
    let mut train_idx = train_idx.to_vec();

    let mut model = Mlp::<T>::init(config.seed);
    let mut params = model.params();
    let mut adam = Adam::new(params.len());
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Mlp<T>)> = None;
    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in train_idx.chunks(config.batch_size) {
            let (x, y) = batch_matrix::<T>(data, chunk);
            let (loss, grads, z) = model.backprop(&x, &y);
            correct += z
                .iter()
                .zip(&y)
                .filter(|(z, y)| (**z >= T::zero()) == (**y > T::lit(0.5)))
                .count();
            loss_sum += loss.as_f64() * chunk.len() as f64;
            adam.apply(&mut params, &flatten(&grads), config);
            model.set_params(&params);
        }
        let (val_loss, val_acc) = evaluate(&model, data, val_idx);
        let has_val = !val_idx.is_empty();
        epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            train_accuracy: correct as f64 / train_idx.len() as f64,
            validation_loss: has_val.then_some(val_loss),
            validation_accuracy: has_val.then_some(val_acc),
        });
        if config.keep_best && has_val && best.as_ref().is_none_or(|(loss, _, _)| val_loss < *loss) {
            best = Some((val_loss, epoch, model.clone()));
        }
    }
    let mut selected_epoch = config.epochs;
    if let Some((_, epoch, weights)) = best {
        selected_epoch = epoch;
        model = weights;
    }
    let report = TrainReport {
        epochs,
        selected_epoch,
        train_samples: train_idx.len(),
        validation_samples: val_idx.len(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Promote,
    Terminate,
    Continue,
}

/// The most recent classifier decisions for one track.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvaluationBuffer {
    capacity: usize,
    entries: VecDeque<bool>,
}

impl Default for EvaluationBuffer {
    fn default() -> Self {
        Self::new(15)
    }
}

impl EvaluationBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, positive: bool) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(positive);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = bool> + '_ {
        self.entries.iter().copied()
    }

    /// Unanimous full buffer promotes or terminates; anything else waits.
    pub fn verdict(&self) -> Verdict {
        if !self.is_full() {
            Verdict::Continue
        } else if self.entries.iter().all(|&e| e) {
            Verdict::Promote
        } else if self.entries.iter().all(|&e| !e) {
            Verdict::Terminate
        } else {
            Verdict::Continue
        }
    }
}
