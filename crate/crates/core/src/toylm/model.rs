//! Single-layer causal attention decoder conditioned on a prepended image token.
//!
//! Every linear weight is stored `out x in` and applied as `X W^T` to a
//! row-per-position activation matrix.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::lora::LoraSettings;
use super::{LmError, Vocabulary, EOS, PAD};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub image_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub lora: Option<LoraSettings>,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.vocab_size < 4 {
            return Err(LmError::Config("vocabulary needs at least one word besides the specials".into()));
        }
        if self.image_dim == 0 || self.hidden == 0 || self.heads == 0 {
            return Err(LmError::Config("image_dim, hidden and heads must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(LmError::Config(format!("hidden {} not divisible by {} heads", self.hidden, self.heads)));
        }
        if let Some(l) = self.lora {
            if l.rank == 0 {
                return Err(LmError::Config("LoRA rank must be at least 1".into()));
            }
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(LmError::Config(format!("LoRA dropout {} outside [0, 1)", l.dropout)));
            }
        }
        Ok(())
    }
}

pub(crate) const EMBED: usize = 0;
pub(crate) const IMG_W: usize = 1;
pub(crate) const IMG_B: usize = 2;
pub(crate) const WQ: usize = 3;
pub(crate) const WK: usize = 4;
pub(crate) const WV: usize = 5;
pub(crate) const WO: usize = 6;
pub(crate) const W1: usize = 7;
pub(crate) const B1: usize = 8;
pub(crate) const WOUT: usize = 9;
pub(crate) const BOUT: usize = 10;
const BASE_COUNT: usize = 11;

/// Weights that receive adapters when LoRA is on, in slot order.
pub(crate) const ADAPTED: [usize; 6] = [WQ, WK, WV, WO, W1, WOUT];
const NAMES: [&str; BASE_COUNT] = ["embed", "img_w", "img_b", "wq", "wk", "wv", "wo", "w1", "b1", "wout", "bout"];

/// One named tensor. Vectors are stored as `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub config: DecoderConfig,
    pub vocab: Vocabulary,
    pub params: Vec<Param>,
}

fn lora_slots(base: usize) -> Option<(usize, usize)> {
    let slot = ADAPTED.iter().position(|&i| i == base)?;
    Some((BASE_COUNT + 2 * slot, BASE_COUNT + 2 * slot + 1))
}

impl DecoderModel {
    /// Fresh model. Matrices are drawn with variance `1/fan_in`, biases and
    /// LoRA `B` factors start at zero.
    pub fn new(config: DecoderConfig, vocab: Vocabulary, seed: u64) -> Result<Self, LmError> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(LmError::Config(format!("vocabulary has {} tokens, config says {}", vocab.len(), config.vocab_size)));
        }
        let mut rng = SplitMix64::new(seed);
        let (v, d, h) = (config.vocab_size, config.image_dim, config.hidden);
        let mut gauss = |rows: usize, cols: usize, std: f64| Array2::from_shape_simple_fn((rows, cols), || rng.normal() * std);
        let hstd = 1.0 / (h as f64).sqrt();
        let values = vec![
            gauss(v, h, 1.0),
            gauss(h, d, 1.0 / (d as f64).sqrt()),
            Array2::zeros((1, h)),
            gauss(h, h, hstd),
            gauss(h, h, hstd),
            gauss(h, h, hstd),
            gauss(h, h, hstd),
            gauss(h, h, hstd),
            Array2::zeros((1, h)),
            gauss(v, h, hstd),
            Array2::zeros((1, v)),
        ];
        let lora = config.lora.is_some();
        let mut params: Vec<Param> = values
            .into_iter()
            .enumerate()
            .map(|(i, value)| Param { name: NAMES[i].to_string(), value, trainable: !(lora && ADAPTED.contains(&i)) })
            .collect();
        if let Some(settings) = config.lora {
            let r = settings.rank;
            for &base in &ADAPTED {
                let (m, n) = params[base].value.dim();
                let a = gauss(r, n, 1.0 / (n as f64).sqrt());
                let name = &NAMES[base];
                params.push(Param { name: format!("{name}.lora_a"), value: a, trainable: true });
                params.push(Param { name: format!("{name}.lora_b"), value: Array2::zeros((m, r)), trainable: true });
            }
        }
        Ok(DecoderModel { config, vocab, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Parameters held by adapters: `r (m + n)` per adapted weight.
    pub fn lora_param_count(&self) -> usize {
        self.params[BASE_COUNT..].iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Array2<f64>> {
        self.params.iter().map(|p| Array2::zeros(p.value.dim())).collect()
    }

    fn linear(&self, idx: usize) -> Linear<'_> {
        let lora = match (self.config.lora, lora_slots(idx)) {
            (Some(s), Some((a, b))) => Some((&self.params[a].value, &self.params[b].value, s.scaling(), s.dropout, a, b)),
            _ => None,
        };
        Linear { w: &self.params[idx].value, idx, lora }
    }

    fn row(&self, idx: usize) -> ArrayView1<'_, f64> {
        self.params[idx].value.row(0)
    }

    /// Logits for every position after the image token, one row per input
    /// token. Row `i` predicts the token that follows `input[i]`.
    pub fn logits(&self, image: &[f64], input: &[u32]) -> Result<Array2<f64>, LmError> {
        let cache = self.forward(image, input, None)?;
        Ok(cache.logits.slice(s![1.., ..]).to_owned())
    }

    pub(crate) fn forward(&self, image: &[f64], input: &[u32], mut rng: Option<&mut SplitMix64>) -> Result<Cache, LmError> {
        let c = &self.config;
        if image.len() != c.image_dim {
            return Err(LmError::Shape(format!("image has {} entries, model expects {}", image.len(), c.image_dim)));
        }
        if input.is_empty() {
            return Err(LmError::Shape("decoder input is empty".into()));
        }
        if let Some(&t) = input.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(LmError::UnknownTokenId(t));
        }
        let p = input.len() + 1;
        let h = c.hidden;
        let image = Array1::from(image.to_vec());
        let mut x0 = Array2::zeros((p, h));
        x0.row_mut(0).assign(&(self.params[IMG_W].value.dot(&image) + self.row(IMG_B)));
        let embed = &self.params[EMBED].value;
        for (i, &t) in input.iter().enumerate() {
            x0.row_mut(i + 1).assign(&embed.row(t as usize));
        }

        let q = self.linear(WQ).forward(&x0, rng.as_deref_mut());
        let k = self.linear(WK).forward(&x0, rng.as_deref_mut());
        let v = self.linear(WV).forward(&x0, rng.as_deref_mut());
        let dh = h / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = Vec::with_capacity(c.heads);
        let mut o = Array2::zeros((p, h));
        for head in 0..c.heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let mut sc = q.y.slice(cols).dot(&k.y.slice(cols).t()) * scale;
            for i in 0..p {
                let mut row = sc.row_mut(i);
                let max = row.iter().take(i + 1).cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (j, e) in row.iter_mut().enumerate() {
                    if j <= i {
                        *e = (*e - max).exp();
                        sum += *e;
                    } else {
                        *e = 0.0;
                    }
                }
                row.mapv_inplace(|e| e / sum);
            }
            o.slice_mut(cols).assign(&sc.dot(&v.y.slice(cols)));
            attn.push(sc);
        }
        let proj = self.linear(WO).forward(&o, rng.as_deref_mut());
        let z = &x0 + &proj.y;
        let pre = self.linear(W1).forward(&z, rng.as_deref_mut());
        let u = (pre.y.clone() + self.row(B1)).mapv(f64::tanh);
        let out = self.linear(WOUT).forward(&u, rng);
        let logits = out.y.clone() + self.row(BOUT);
        Ok(Cache { image, input: input.to_vec(), x0, q, k, v, attn, o, proj, z, pre, u, out, logits })
    }

    /// Summed next-token loss of `input[1..] ++ target_tail` and its gradient.
    /// `targets[i]` is the token after `input[i]`; `PAD` targets are skipped.
    /// Returns `(summed loss, counted tokens)`.
    pub fn loss_and_grads(
        &self,
        image: &[f64],
        input: &[u32],
        targets: &[u32],
        grads: &mut [Array2<f64>],
        rng: Option<&mut SplitMix64>,
    ) -> Result<(f64, usize), LmError> {
        if targets.len() != input.len() {
            return Err(LmError::Shape(format!("{} targets for {} inputs", targets.len(), input.len())));
        }
        let rng = rng;
        let cache = self.forward(image, input, rng)?;
        let p = input.len() + 1;
        let (v, h) = (self.config.vocab_size, self.config.hidden);
        let mut dlogits = Array2::zeros((p, v));
        let mut loss = 0.0;
        let mut counted = 0;
        for (i, &t) in targets.iter().enumerate() {
            if t == PAD {
                continue;
            }
            if t as usize >= v {
                return Err(LmError::UnknownTokenId(t));
            }
            let row = cache.logits.row(i + 1);
            let probs = softmax(row);
            loss -= probs[t as usize].max(f64::MIN_POSITIVE).ln();
            let mut d = dlogits.row_mut(i + 1);
            d.assign(&probs);
            d[t as usize] -= 1.0;
            counted += 1;
        }

        grads[BOUT].row_mut(0).scaled_add(1.0, &dlogits.sum_axis(Axis(0)));
        let du = self.linear(WOUT).backward(&cache.out, &cache.u, &dlogits, grads);
        let dpre = du * &cache.u.mapv(|a| 1.0 - a * a);
        grads[B1].row_mut(0).scaled_add(1.0, &dpre.sum_axis(Axis(0)));
        let dz = self.linear(W1).backward(&cache.pre, &cache.z, &dpre, grads);
        let mut dx0 = dz.clone();
        let d_o = self.linear(WO).backward(&cache.proj, &cache.o, &dz, grads);

        let dh = h / self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros((p, h));
        let mut dk = Array2::zeros((p, h));
        let mut dv = Array2::zeros((p, h));
        for head in 0..self.config.heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let a = &cache.attn[head];
            let doh = d_o.slice(cols);
            let da = doh.dot(&cache.v.y.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&doh));
            let mut ds = Array2::zeros((p, p));
            for i in 0..p {
                let dot: f64 = (0..=i).map(|j| da[[i, j]] * a[[i, j]]).sum();
                for j in 0..=i {
                    ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot) * scale;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.y.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.y.slice(cols)));
        }
        dx0 += &self.linear(WQ).backward(&cache.q, &cache.x0, &dq, grads);
        dx0 += &self.linear(WK).backward(&cache.k, &cache.x0, &dk, grads);
        dx0 += &self.linear(WV).backward(&cache.v, &cache.x0, &dv, grads);

        let d_img = dx0.row(0);
        for r in 0..h {
            grads[IMG_W].row_mut(r).scaled_add(d_img[r], &cache.image);
        }
        grads[IMG_B].row_mut(0).scaled_add(1.0, &d_img);
        for (i, &t) in cache.input.iter().enumerate() {
            grads[EMBED].row_mut(t as usize).scaled_add(1.0, &dx0.row(i + 1));
        }
        Ok((loss, counted))
    }

    /// Greedy decoding from `BOS`. Stops after emitting `EOS` (which is kept)
    /// or after `max_len` tokens.
    pub fn generate(&self, image: &[f64], max_len: usize) -> Result<Vec<u32>, LmError> {
        self.generate_from(image, &[], max_len)
    }

    /// Greedy decoding with `prefix` forced after `BOS`. The prefix is part of
    /// the returned tokens and counts towards `max_len`.
    pub fn generate_from(&self, image: &[f64], prefix: &[u32], max_len: usize) -> Result<Vec<u32>, LmError> {
        let mut input = vec![super::BOS];
        input.extend_from_slice(prefix);
        let mut out = prefix.to_vec();
        out.truncate(max_len);
        while out.len() < max_len {
            let cache = self.forward(image, &input, None)?;
            let last = cache.logits.row(input.len());
            // never emit PAD or BOS
            let next = last
                .iter()
                .enumerate()
                .skip(EOS as usize)
                .fold((EOS as usize, f64::NEG_INFINITY), |best, (i, &l)| if l > best.1 { (i, l) } else { best })
                .0 as u32;
            out.push(next);
            if next == EOS {
                break;
            }
            input.push(next);
        }
        Ok(out)
    }
}

pub(crate) fn softmax(row: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = row.mapv(|l| (l - max).exp());
    let sum = e.sum();
    e / sum
}

pub(crate) struct LinearOut {
    pub y: Array2<f64>,
    /// `drop(X) A^T` and the dropout mask, when an adapter is present.
    low: Option<(Array2<f64>, Option<Array2<f64>>)>,
}

pub(crate) struct Cache {
    image: Array1<f64>,
    input: Vec<u32>,
    x0: Array2<f64>,
    q: LinearOut,
    k: LinearOut,
    v: LinearOut,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    proj: LinearOut,
    z: Array2<f64>,
    pre: LinearOut,
    u: Array2<f64>,
    out: LinearOut,
    pub logits: Array2<f64>,
}

type LoraRef<'a> = (&'a Array2<f64>, &'a Array2<f64>, f64, f64, usize, usize);

struct Linear<'a> {
    w: &'a Array2<f64>,
    idx: usize,
    lora: Option<LoraRef<'a>>,
}

impl Linear<'_> {
    fn forward(&self, x: &Array2<f64>, rng: Option<&mut SplitMix64>) -> LinearOut {
        let mut y = x.dot(&self.w.t());
        let low = self.lora.map(|(a, b, scale, dropout, _, _)| {
            let mask = match rng {
                Some(rng) if dropout > 0.0 => {
                    let keep = 1.0 - dropout;
                    Some(x.mapv(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 }))
                }
                _ => None,
            };
            let low = match &mask {
                Some(m) => (x * m).dot(&a.t()),
                None => x.dot(&a.t()),
            };
            y.scaled_add(scale, &low.dot(&b.t()));
            (low, mask)
        });
        LinearOut { y, low }
    }

    /// Accumulates weight (or adapter) gradients and returns `dX`.
    fn backward(&self, out: &LinearOut, x: &Array2<f64>, dy: &Array2<f64>, grads: &mut [Array2<f64>]) -> Array2<f64> {
        let mut dx = dy.dot(self.w);
        match (self.lora, &out.low) {
            (Some((a, b, scale, _, ai, bi)), Some((low, mask))) => {
                grads[bi].scaled_add(scale, &dy.t().dot(low));
                let dlow = dy.dot(b) * scale;
                match mask {
                    Some(m) => {
                        grads[ai] += &dlow.t().dot(&(x * m));
                        dx += &(dlow.dot(a) * m);
                    }
                    None => {
                        grads[ai] += &dlow.t().dot(x);
                        dx += &dlow.dot(a);
                    }
                }
            }
            _ => grads[self.idx] += &dy.t().dot(x),
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(["VERB", "cutting", "AGENT", "man", "ITEM", "bread"]).unwrap()
    }

    fn model(lora: Option<LoraSettings>) -> DecoderModel {
        let config = DecoderConfig { vocab_size: vocab().len(), image_dim: 5, hidden: 8, heads: 2, lora };
        let mut m = DecoderModel::new(config, vocab(), 11).unwrap();
        // move the adapters off zero so every gradient path is exercised
        let mut rng = SplitMix64::new(99);
        for p in m.params.iter_mut() {
            if p.name.ends_with("lora_b") || p.name.starts_with('b') || p.name == "img_b" {
                p.value.mapv_inplace(|_| rng.normal() * 0.3);
            }
        }
        m
    }

    fn total_loss(m: &DecoderModel, image: &[f64], input: &[u32], targets: &[u32]) -> f64 {
        let mut g = m.zero_grads();
        m.loss_and_grads(image, input, targets, &mut g, None).unwrap().0
    }

    fn check_gradients(m: DecoderModel) {
        let image = [0.3, -0.2, 0.9, 0.1, -0.5];
        let input = [1u32, 3, 4, 5, 6];
        let targets = [3u32, 4, 5, PAD, 2];
        let mut grads = m.zero_grads();
        m.loss_and_grads(&image, &input, &targets, &mut grads, None).unwrap();
        let eps = 1e-6;
        for (pi, p) in m.params.iter().enumerate() {
            if !p.trainable {
                continue;
            }
            for flat in (0..p.value.len()).step_by(3) {
                let (r, c) = (flat / p.value.ncols(), flat % p.value.ncols());
                let mut plus = m.clone();
                plus.params[pi].value[[r, c]] += eps;
                let mut minus = m.clone();
                minus.params[pi].value[[r, c]] -= eps;
                let numeric = (total_loss(&plus, &image, &input, &targets) - total_loss(&minus, &image, &input, &targets)) / (2.0 * eps);
                let analytic = grads[pi][[r, c]];
                let err = (numeric - analytic).abs() / (1.0 + numeric.abs());
                assert!(err < 1e-5, "{}[{r},{c}]: numeric {numeric} analytic {analytic}", p.name);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(model(None));
    }

    #[test]
    fn lora_gradients_match_finite_differences() {
        check_gradients(model(Some(LoraSettings { rank: 2, alpha: 4.0, dropout: 0.0 })));
    }

    #[test]
    fn lora_freezes_base_weights_and_counts_adapters() {
        let plain = model(None);
        let adapted = model(Some(LoraSettings { rank: 2, alpha: 4.0, dropout: 0.1 }));
        let (h, v) = (8, vocab().len());
        let expected = 2 * (5 * (h + h) + (v + h));
        assert_eq!(adapted.lora_param_count(), expected);
        let frozen: usize = ADAPTED.iter().map(|&i| adapted.params[i].value.len()).sum();
        assert_eq!(adapted.trainable_count(), plain.trainable_count() - frozen + expected);
    }

    #[test]
    fn fresh_adapters_do_not_change_outputs() {
        let config = DecoderConfig { vocab_size: vocab().len(), image_dim: 5, hidden: 8, heads: 2, lora: None };
        let plain = DecoderModel::new(config, vocab(), 5).unwrap();
        let lora_cfg = DecoderConfig { lora: Some(LoraSettings { rank: 3, alpha: 6.0, dropout: 0.0 }), ..config };
        let mut adapted = DecoderModel::new(lora_cfg, vocab(), 5).unwrap();
        for i in 0..BASE_COUNT {
            adapted.params[i].value = plain.params[i].value.clone();
        }
        let image = [0.1, 0.2, 0.3, 0.4, 0.5];
        let a = plain.logits(&image, &[1, 3, 4]).unwrap();
        let b = adapted.logits(&image, &[1, 3, 4]).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn causal_outputs_ignore_future_tokens() {
        let m = model(None);
        let image = [0.1, 0.2, 0.3, 0.4, 0.5];
        let short = m.logits(&image, &[1, 3]).unwrap();
        let long = m.logits(&image, &[1, 3, 6, 7]).unwrap();
        for i in 0..2 {
            for j in 0..short.ncols() {
                assert!((short[[i, j]] - long[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_respects_max_len_and_rejects_bad_input() {
        let m = model(None);
        let out = m.generate(&[0.0; 5], 4).unwrap();
        assert!(!out.is_empty() && out.len() <= 4);
        assert!(out.iter().all(|&t| t >= EOS));
        assert!(m.generate(&[0.0; 3], 4).is_err());
        assert!(matches!(m.logits(&[0.0; 5], &[1, 99]), Err(LmError::UnknownTokenId(99))));
    }

    #[test]
    fn config_validation() {
        let base = DecoderConfig { vocab_size: 9, image_dim: 5, hidden: 8, heads: 3, lora: None };
        assert!(base.validate().is_err());
        assert!(DecoderConfig { heads: 2, ..base }.validate().is_ok());
        assert!(DecoderConfig { heads: 2, vocab_size: 3, ..base }.validate().is_err());
    }
}
