//! A small image-conditioned decoder that learns to emit structured frame
//! strings, trained with AdamW and optional LoRA adapters.

mod file;
mod lora;
mod model;

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use file::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use lora::{LoraAdapter, LoraSettings};
pub use model::{DecoderConfig, DecoderModel, Param};

use crate::rng::SplitMix64;
use crate::structparse::StructuredText;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];
pub const DEFAULT_MAX_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),
    #[error("token id {0} is outside the vocabulary")]
    UnknownTokenId(u32),
    #[error("empty training set")]
    EmptyDataset,
    #[error("loss became {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { loss: f64, epoch: usize, batch: usize },
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `PAD`, `BOS`, `EOS`, then whitespace tokens in insertion order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_words<I, S>(words: I) -> Result<Self, LmError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        for s in SPECIALS {
            vocab.push(s);
        }
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(LmError::Config(format!("vocabulary word `{w}` is empty or contains whitespace")));
            }
            if SPECIALS.contains(&w) {
                return Err(LmError::Config(format!("`{w}` is reserved")));
            }
            vocab.push(w);
        }
        Ok(vocab)
    }

    /// Every distinct token of the given texts, sorted.
    pub fn from_texts<'a, I: IntoIterator<Item = &'a StructuredText>>(texts: I) -> Self {
        let mut words: Vec<&str> = texts.into_iter().flat_map(|t| t.tokens().iter().map(String::as_str)).collect();
        words.sort_unstable();
        words.dedup();
        Vocabulary::from_words(words).expect("structured tokens are non-empty and whitespace free")
    }

    fn push(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.tokens.len() as u32);
            self.tokens.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Token ids of `text`, without `BOS`/`EOS`.
    pub fn encode(&self, text: &StructuredText) -> Result<Vec<u32>, LmError> {
        text.tokens().iter().map(|t| self.id(t).ok_or_else(|| LmError::UnknownToken(t.clone()))).collect()
    }

    /// Joins word tokens, stopping at the first `EOS` and skipping `PAD`/`BOS`.
    pub fn decode(&self, ids: &[u32]) -> Result<StructuredText, LmError> {
        let mut words = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => {}
                _ => words.push(self.tokens.get(id as usize).ok_or(LmError::UnknownTokenId(id))?.as_str()),
            }
        }
        Ok(StructuredText::from_tokens(&words))
    }
}

/// Total next-token negative log-likelihood of `targets` under `logits` (one
/// row per position). `PAD` targets are ignored; all-`PAD` gives 0.
pub fn lm_loss(logits: ArrayView2<'_, f64>, targets: &[u32]) -> Result<f64, LmError> {
    if logits.nrows() != targets.len() {
        return Err(LmError::Shape(format!("{} logit rows for {} targets", logits.nrows(), targets.len())));
    }
    let mut total = 0.0;
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        if t == PAD {
            continue;
        }
        if t as usize >= row.len() {
            return Err(LmError::UnknownTokenId(t));
        }
        let p = model::softmax(row);
        total -= p[t as usize].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub hidden: usize,
    pub heads: usize,
    pub lora: Option<LoraSettings>,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// AdamW at lr 1e-4, weight decay 0.01, eps 1e-8; 20 epochs.
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            hidden: 128,
            heads: 8,
            lora: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings that train a model from scratch on a synthetic world in
    /// seconds: a larger step than the fine-tuning default.
    pub fn desk_scale() -> Self {
        TrainConfig { lr: 1e-3, epochs: 30, ..TrainConfig::default() }
    }
}

/// One training pair: an image embedding and its target string.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub image: Vec<f64>,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainTrace {
    /// Mean per-token loss of each epoch, measured during the epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains a fresh decoder. Batches are drawn from a per-epoch shuffle
/// seeded by `config.seed`; each step applies AdamW to the per-token mean
/// gradient of the batch.
pub fn train_decoder(
    examples: &[TrainExample],
    vocab: Vocabulary,
    config: &TrainConfig,
) -> Result<(DecoderModel, TrainTrace), LmError> {
    let first = examples.first().ok_or(LmError::EmptyDataset)?;
    let image_dim = first.image.len();
    if let Some(bad) = examples.iter().find(|e| e.image.len() != image_dim) {
        return Err(LmError::Shape(format!("image of {} entries among {image_dim}-dim images", bad.image.len())));
    }
    if config.batch_size == 0 || !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(LmError::Config("batch_size must be positive and lr a non-negative number".into()));
    }
    let dc = DecoderConfig { vocab_size: vocab.len(), image_dim, hidden: config.hidden, heads: config.heads, lora: config.lora };
    let mut model = DecoderModel::new(dc, vocab, config.seed)?;
    let mut opt = AdamW::new(&model, config);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = SplitMix64::for_index(config.seed, 1, 0);
    let mut dropout_rng = SplitMix64::for_index(config.seed, 2, 0);
    let mut trace = TrainTrace { epoch_loss: Vec::with_capacity(config.epochs) };
    for epoch in 0..config.epochs {
        shuffle_rng.shuffle(&mut order);
        let (mut epoch_sum, mut epoch_tokens) = (0.0, 0usize);
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads = model.zero_grads();
            let (mut sum, mut tokens) = (0.0, 0usize);
            for &i in batch {
                let ex = &examples[i];
                let (input, targets) = teacher_forcing(&ex.tokens);
                let (l, n) = model.loss_and_grads(&ex.image, &input, &targets, &mut grads, Some(&mut dropout_rng))?;
                sum += l;
                tokens += n;
            }
            if !sum.is_finite() {
                return Err(LmError::NonFinite { loss: sum, epoch: epoch + 1, batch: bi });
            }
            if tokens == 0 {
                continue;
            }
            let inv = 1.0 / tokens as f64;
            grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * inv));
            opt.step(&mut model, &grads);
            epoch_sum += sum;
            epoch_tokens += tokens;
        }
        trace.epoch_loss.push(if epoch_tokens == 0 { 0.0 } else { epoch_sum / epoch_tokens as f64 });
    }
    Ok((model, trace))
}

/// `(BOS ++ tokens, tokens ++ EOS)`.
pub fn teacher_forcing(tokens: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut input = Vec::with_capacity(tokens.len() + 1);
    input.push(BOS);
    input.extend_from_slice(tokens);
    let mut targets = tokens.to_vec();
    targets.push(EOS);
    (input, targets)
}

struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    fn new(model: &DecoderModel, c: &TrainConfig) -> Self {
        AdamW {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
            t: 0,
            m: model.zero_grads(),
            v: model.zero_grads(),
        }
    }

    fn step(&mut self, model: &mut DecoderModel, grads: &[Array2<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        for (i, p) in model.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            ndarray::Zip::from(&mut p.value).and(&mut self.m[i]).and(&mut self.v[i]).and(&grads[i]).for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *w -= lr * (update + wd * *w);
            });
        }
    }
}

/// Greedy decode to text. Returns the raw ids too, `EOS` included if emitted.
pub fn generate(model: &DecoderModel, image: &[f64], max_len: usize) -> Result<(StructuredText, Vec<u32>), LmError> {
    generate_from(model, image, &StructuredText::new(""), max_len)
}

/// Greedy decode continuing a forced prefix such as `VERB slicing`.
pub fn generate_from(
    model: &DecoderModel,
    image: &[f64],
    prefix: &StructuredText,
    max_len: usize,
) -> Result<(StructuredText, Vec<u32>), LmError> {
    if max_len == 0 {
        return Err(LmError::Config("max_len must be at least 1".into()));
    }
    let prefix = model.vocab.encode(prefix)?;
    let ids = model.generate_from(image, &prefix, max_len)?;
    Ok((model.vocab.decode(&ids)?, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn vocabulary_reserves_specials() {
        let v = Vocabulary::from_words(["VERB", "cutting", "VERB"]).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("cutting"), Some(4));
        assert!(Vocabulary::from_words(["<bos>"]).is_err());
        assert!(Vocabulary::from_words(["two words"]).is_err());
        let t = StructuredText::new("VERB cutting");
        assert_eq!(v.encode(&t).unwrap(), vec![3, 4]);
        assert_eq!(v.decode(&[BOS, 3, 4, EOS, 3]).unwrap(), t);
        assert!(matches!(v.encode(&StructuredText::new("VERB running")), Err(LmError::UnknownToken(_))));
    }

    #[test]
    fn lm_loss_matches_hand_computation() {
        let logits = array![[0.0, 0.0, 0.0, 0.0], [1.0, 2.0, 3.0, 4.0]];
        let l = lm_loss(logits.view(), &[3, 3]).unwrap();
        let second = -(4.0f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp() + 4f64.exp())).ln();
        assert!((l - (4f64.ln() + second)).abs() < 1e-12);

        let uniform = Array2::zeros((5, 10));
        let l = lm_loss(uniform.view(), &[3, 4, PAD, 5, 9]).unwrap();
        assert!((l - 4.0 * 10f64.ln()).abs() < 1e-12);

        let mut sharp = Array2::zeros((3, 6));
        for (i, t) in [3usize, 4, 5].into_iter().enumerate() {
            sharp[[i, t]] = 20.0;
        }
        assert!(lm_loss(sharp.view(), &[3, 4, 5]).unwrap() / 3.0 < 4e-8);
        assert_eq!(lm_loss(logits.view(), &[PAD, PAD]).unwrap(), 0.0);
        assert!(lm_loss(logits.view(), &[3]).is_err());
    }

    #[test]
    fn default_optimizer_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.weight_decay, c.eps), (1e-4, 0.01, 1e-8));
    }

    fn tiny_task() -> (Vec<TrainExample>, Vocabulary) {
        let texts = [StructuredText::new("VERB cutting AGENT man"), StructuredText::new("VERB jumping AGENT dog")];
        let vocab = Vocabulary::from_texts(texts.iter());
        let examples = vec![
            TrainExample { image: vec![1.0, 0.0, 0.0, 0.0], tokens: vocab.encode(&texts[0]).unwrap() },
            TrainExample { image: vec![0.0, 1.0, 0.0, 0.0], tokens: vocab.encode(&texts[1]).unwrap() },
        ];
        (examples, vocab)
    }

    #[test]
    fn training_memorises_a_tiny_task() {
        let (examples, vocab) = tiny_task();
        let config = TrainConfig { epochs: 150, batch_size: 2, lr: 1e-2, hidden: 16, heads: 2, ..TrainConfig::default() };
        let (model, trace) = train_decoder(&examples, vocab, &config).unwrap();
        assert!(trace.epoch_loss.last().unwrap() < &(0.05 * trace.epoch_loss[0]));
        let (text, ids) = generate(&model, &examples[1].image, DEFAULT_MAX_LEN).unwrap();
        assert_eq!(text.as_str(), "VERB jumping AGENT dog");
        assert_eq!(ids.last(), Some(&EOS));
        let (forced, _) = generate_from(&model, &examples[0].image, &StructuredText::new("VERB cutting"), DEFAULT_MAX_LEN).unwrap();
        assert_eq!(forced.as_str(), "VERB cutting AGENT man");
    }

    #[test]
    fn training_is_deterministic() {
        let (examples, vocab) = tiny_task();
        let config = TrainConfig {
            epochs: 5,
            lr: 1e-2,
            hidden: 8,
            heads: 2,
            lora: Some(LoraSettings { rank: 2, alpha: 4.0, dropout: 0.1 }),
            ..TrainConfig::default()
        };
        let a = train_decoder(&examples, vocab.clone(), &config).unwrap();
        let b = train_decoder(&examples, vocab, &config).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn lora_training_leaves_base_weights_frozen() {
        let (examples, vocab) = tiny_task();
        let config = TrainConfig {
            epochs: 3,
            lr: 1e-2,
            hidden: 8,
            heads: 2,
            lora: Some(LoraSettings { rank: 2, alpha: 4.0, dropout: 0.0 }),
            ..TrainConfig::default()
        };
        let (trained, _) = train_decoder(&examples, vocab.clone(), &config).unwrap();
        let dc = trained.config;
        let fresh = DecoderModel::new(dc, vocab, config.seed).unwrap();
        for (a, b) in trained.params.iter().zip(&fresh.params) {
            assert_eq!(a.trainable, b.trainable);
            if !a.trainable {
                assert_eq!(a.value, b.value, "{} moved", a.name);
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_the_loss() {
        let (examples, vocab) = tiny_task();
        let config = TrainConfig { epochs: 4, lr: 0.0, hidden: 8, heads: 2, ..TrainConfig::default() };
        let (_, trace) = train_decoder(&examples, vocab, &config).unwrap();
        let first = trace.epoch_loss[0];
        assert!(trace.epoch_loss.iter().all(|l| (l - first).abs() < 1e-12));
    }

    #[test]
    fn max_len_caps_generation() {
        let (examples, vocab) = tiny_task();
        let config = TrainConfig { epochs: 0, hidden: 8, heads: 2, ..TrainConfig::default() };
        let (model, trace) = train_decoder(&examples, vocab, &config).unwrap();
        assert!(trace.epoch_loss.is_empty());
        let (_, ids) = generate(&model, &examples[0].image, 3).unwrap();
        assert!(ids.len() <= 3);
        assert_eq!(generate(&model, &examples[0].image, 1).unwrap().1.len(), 1);
        assert!(generate(&model, &examples[0].image, 0).is_err());
    }

    #[test]
    fn rejects_empty_or_ragged_data() {
        let (mut examples, vocab) = tiny_task();
        assert!(matches!(train_decoder(&[], vocab.clone(), &TrainConfig::default()), Err(LmError::EmptyDataset)));
        examples[1].image.pop();
        assert!(matches!(train_decoder(&examples, vocab, &TrainConfig::default()), Err(LmError::Shape(_))));
    }
}
