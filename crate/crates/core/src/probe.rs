//! Linear probes on frozen embeddings and correlation of probe accuracy with
//! downstream task metrics.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use serde::Serialize;
use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("dataset has {x} vectors but {y} labels")]
    LengthMismatch { x: usize, y: usize },
    #[error("vector {index} has dimension {found}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, found: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("need at least two classes, found {0}")]
    SingleClass(usize),
    #[error("class {0:?} has no training examples")]
    ClassMissingFromTrain(String),
    #[error("splits overlap at index {0}")]
    OverlappingSplits(usize),
    #[error("split ratios {0:?} must be non-negative and sum to a positive value")]
    BadRatios([f64; 3]),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("loss became non-finite at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("need equally long inputs of length >= 3, got {0} and {1}")]
    CorrelationLength(usize, usize),
    #[error("input is constant")]
    ConstantInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Embeddings with class labels and train/val/test index sets. Class ids
/// follow sorted label order.
#[derive(Debug, Clone)]
pub struct ProbeDataset {
    pub ids: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub classes: Vec<String>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Mean over the token axis of a `K x d` block.
pub fn mean_pool(block: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = block.first() else { return Vec::new() };
    let mut out = vec![0.0; first.len()];
    for row in block {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let k = block.len() as f64;
    out.iter_mut().for_each(|o| *o /= k);
    out
}

impl ProbeDataset {
    /// Builds a dataset with every item in the training split.
    pub fn new(ids: Vec<String>, x: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self, ProbeError> {
        if x.len() != labels.len() || ids.len() != x.len() {
            return Err(ProbeError::LengthMismatch { x: x.len(), y: labels.len() });
        }
        let dim = x.first().ok_or(ProbeError::Empty)?.len();
        if let Some((index, v)) = x.iter().enumerate().find(|(_, v)| v.len() != dim) {
            return Err(ProbeError::DimensionMismatch { index, expected: dim, found: v.len() });
        }
        let classes: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let y = labels.iter().map(|l| classes.binary_search(l).expect("label collected")).collect();
        let mut train: Vec<usize> = (0..x.len()).collect();
        train.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        let ds = ProbeDataset { ids, x, y, classes, train, val: Vec::new(), test: Vec::new() };
        ds.validate()?;
        Ok(ds)
    }

    /// Splits by `ratios` (train/val/test) after a seeded shuffle of the
    /// id-sorted items, so membership depends on ids and seed only.
    pub fn with_split(mut self, ratios: [f64; 3], seed: u64) -> Result<Self, ProbeError> {
        let total: f64 = ratios.iter().sum();
        if ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) || total <= 0.0 {
            return Err(ProbeError::BadRatios(ratios));
        }
        let n = self.x.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.ids[a].cmp(&self.ids[b]));
        SplitMix64::new(seed).shuffle(&mut order);
        let n_train = ((ratios[0] / total) * n as f64).round() as usize;
        let n_val = (((ratios[1] / total) * n as f64).round() as usize).min(n - n_train.min(n));
        let n_train = n_train.min(n);
        let by_id = |mut v: Vec<usize>, ids: &[String]| {
            v.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
            v
        };
        self.train = by_id(order[..n_train].to_vec(), &self.ids);
        self.val = by_id(order[n_train..n_train + n_val].to_vec(), &self.ids);
        self.test = by_id(order[n_train + n_val..].to_vec(), &self.ids);
        self.validate()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.x[0].len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.classes.len() < 2 {
            return Err(ProbeError::SingleClass(self.classes.len()));
        }
        let mut seen = vec![false; self.x.len()];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if std::mem::replace(&mut seen[i], true) {
                return Err(ProbeError::OverlappingSplits(i));
            }
        }
        let mut present = vec![false; self.classes.len()];
        for &i in &self.train {
            present[self.y[i]] = true;
        }
        if let Some(c) = present.iter().position(|p| !p) {
            return Err(ProbeError::ClassMissingFromTrain(self.classes[c].clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `C x d`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearProbe {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        LinearProbe { weight: Array2::zeros((classes, dim)), bias: Array1::zeros(classes) }
    }

    pub fn logits(&self, x: &[f64]) -> Array1<f64> {
        self.weight.dot(&ndarray::ArrayView1::from(x)) + &self.bias
    }

    /// Argmax class, ties to the lowest id.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(self.logits(x).as_slice().expect("contiguous"))
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
    /// `None`: full batch below 10,000 training items, 256 otherwise.
    pub batch_size: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { lr: 1e-2, epochs: 500, l2: 1e-4, seed: 0, batch_size: None }
    }
}

/// Mean softmax cross-entropy plus `l2/2 * |W|^2` (bias unpenalized), with
/// its gradient, summed in the order of `items`.
pub fn probe_loss_and_grad(
    probe: &LinearProbe,
    x: &[Vec<f64>],
    y: &[usize],
    items: &[usize],
    l2: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let mut gw = Array2::zeros(probe.weight.dim());
    let mut gb = Array1::zeros(probe.bias.len());
    let mut loss = 0.0;
    let n = items.len() as f64;
    for &i in items {
        let logits = probe.logits(&x[i]);
        let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exp = logits.mapv(|v| (v - max).exp());
        let z = exp.sum();
        loss += z.ln() + max - logits[y[i]];
        let mut delta = exp / z;
        delta[y[i]] -= 1.0;
        for (c, d) in delta.iter().enumerate() {
            gw.row_mut(c).scaled_add(*d / n, &ndarray::ArrayView1::from(&x[i][..]));
        }
        gb.scaled_add(1.0 / n, &delta);
    }
    loss /= n;
    loss += 0.5 * l2 * probe.weight.iter().map(|w| w * w).sum::<f64>();
    gw.scaled_add(l2, &probe.weight);
    (loss, gw, gb)
}

/// Multinomial logistic regression by mini-batch gradient descent from zero
/// weights. Returns the probe and the mean training loss per epoch.
pub fn fit_probe(ds: &ProbeDataset, cfg: &ProbeConfig) -> Result<(LinearProbe, Vec<f64>), ProbeError> {
    ds.validate()?;
    let mut probe = LinearProbe::zeros(ds.n_classes(), ds.dim());
    let batch = cfg.batch_size.unwrap_or(if ds.train.len() < 10_000 { ds.train.len() } else { 256 }).max(1);
    let mut rng = SplitMix64::new(cfg.seed);
    let mut order = ds.train.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if batch < order.len() {
            rng.shuffle(&mut order);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch) {
            let (loss, gw, gb) = probe_loss_and_grad(&probe, &ds.x, &ds.y, chunk, cfg.l2);
            if !loss.is_finite() {
                return Err(ProbeError::NonFiniteLoss(epoch));
            }
            probe.weight.scaled_add(-cfg.lr, &gw);
            probe.bias.scaled_add(-cfg.lr, &gb);
            epoch_loss += loss;
            batches += 1;
        }
        trace.push(epoch_loss / batches as f64);
    }
    Ok((probe, trace))
}

/// Top-1 accuracy on a split.
pub fn probe_accuracy(probe: &LinearProbe, ds: &ProbeDataset, split: Split) -> Result<f64, ProbeError> {
    let items = ds.split(split);
    if items.is_empty() {
        return Err(ProbeError::EmptySplit(split.name()));
    }
    let correct = items.iter().filter(|&&i| probe.predict(&ds.x[i]) == ds.y[i]).count();
    Ok(correct as f64 / items.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
    pub n: usize,
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, ProbeError> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(ProbeError::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson r and Spearman rho (Pearson on average ranks).
pub fn correlate(xs: &[f64], ys: &[f64]) -> Result<Correlation, ProbeError> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(ProbeError::CorrelationLength(xs.len(), ys.len()));
    }
    let pearson_r = pearson(xs, ys)?;
    let spearman = pearson(&average_ranks(xs), &average_ranks(ys))?;
    Ok(Correlation { pearson: pearson_r, spearman, n: xs.len() })
}
