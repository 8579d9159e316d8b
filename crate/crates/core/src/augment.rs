//! Attention feature augmentation.
//!
//! Frozen vision-language token embeddings are projected to the backbone's
//! feature width and appended to the backbone tokens along the token axis.
//! The attention block that consumes the result has weights shaped by the
//! feature width and head count only, so extra tokens cost no extra
//! parameters beyond the projection. No positional encodings are added.

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView2, Axis};
use serde::Serialize;
use thiserror::Error;

use crate::par;
use crate::rng::SplitMix64;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("feature block contains a non-finite value")]
    NonFinite,
    #[error("feature block needs batch and feature sizes >= 1")]
    EmptyDimension,
    #[error("{heads} heads do not divide feature size {features}")]
    HeadsDoNotDivide { heads: usize, features: usize },
}

/// Real tensor indexed (batch, token, feature). A zero-token block is allowed
/// so an empty set of extra tokens can be concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock(Array3<f64>);

impl FeatureBlock {
    pub fn new(data: Array3<f64>) -> Result<Self, AugmentError> {
        let (b, _, n) = data.dim();
        if b == 0 || n == 0 {
            return Err(AugmentError::EmptyDimension);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AugmentError::NonFinite);
        }
        Ok(FeatureBlock(data))
    }

    /// Standard-normal entries from `rng`.
    pub fn random(batch: usize, tokens: usize, features: usize, rng: &mut SplitMix64) -> Self {
        FeatureBlock(Array3::from_shape_simple_fn((batch, tokens, features), || rng.normal()))
    }

    /// (batch, tokens, features)
    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    /// Reorders tokens: output token `i` is input token `perm[i]`.
    pub fn permute_tokens(&self, perm: &[usize]) -> Self {
        FeatureBlock(self.0.select(Axis(1), perm))
    }

    pub fn max_abs_diff(&self, other: &FeatureBlock) -> f64 {
        assert_eq!(self.dims(), other.dims(), "shape mismatch");
        self.0.iter().zip(other.0.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Affine per-token map from `d_in` to `N` features.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Projection {
    pub fn identity(n: usize) -> Self {
        Projection { weight: Array2::eye(n), bias: Some(Array1::zeros(n)) }
    }

    /// Weights scaled by `1/sqrt(d_in)`; bias drawn the same way when requested.
    pub fn random(d_in: usize, n: usize, with_bias: bool, rng: &mut SplitMix64) -> Self {
        let scale = 1.0 / (d_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((d_in, n), || rng.normal() * scale);
        let bias = with_bias.then(|| Array1::from_shape_simple_fn(n, || rng.normal() * scale));
        Projection { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Array1::len)
    }
}

pub fn project(e_vl: &FeatureBlock, p: &Projection) -> Result<FeatureBlock, AugmentError> {
    let (b, k, d) = e_vl.dims();
    if d != p.input_dim() {
        return Err(AugmentError::DimensionMismatch { what: "projection input", expected: p.input_dim(), found: d });
    }
    let flat = e_vl.0.view().into_shape_with_order((b * k, d)).expect("contiguous block");
    let mut out = flat.dot(&p.weight);
    if let Some(bias) = &p.bias {
        out += bias;
    }
    let out = out.into_shape_with_order((b, k, p.output_dim())).expect("shape preserved");
    Ok(FeatureBlock(out))
}

/// Backbone tokens at `[0, K_b)`, projected tokens at `[K_b, K_b + K_v)`.
pub fn concat_features(e_b: &FeatureBlock, e_p: &FeatureBlock) -> Result<FeatureBlock, AugmentError> {
    let (bb, _, nb) = e_b.dims();
    let (bp, _, np) = e_p.dims();
    if bb != bp {
        return Err(AugmentError::DimensionMismatch { what: "batch size", expected: bb, found: bp });
    }
    if nb != np {
        return Err(AugmentError::DimensionMismatch { what: "feature size", expected: nb, found: np });
    }
    let joined = concatenate(Axis(1), &[e_b.0.view(), e_p.0.view()]).expect("shapes checked");
    Ok(FeatureBlock(joined))
}

/// Multi-head self-attention weights. Shapes depend on `N` and the head
/// count only.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub query: Vec<Array2<f64>>,
    pub key: Vec<Array2<f64>>,
    pub value: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl AttentionBlock {
    pub fn random(features: usize, heads: usize, rng: &mut SplitMix64) -> Result<Self, AugmentError> {
        if heads == 0 || !features.is_multiple_of(heads) {
            return Err(AugmentError::HeadsDoNotDivide { heads, features });
        }
        let head_dim = features / heads;
        let scale = 1.0 / (features as f64).sqrt();
        let mut mat = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || rng.normal() * scale);
        let query = (0..heads).map(|_| mat(features, head_dim)).collect();
        let key = (0..heads).map(|_| mat(features, head_dim)).collect();
        let value = (0..heads).map(|_| mat(features, head_dim)).collect();
        let output = mat(features, features);
        Ok(AttentionBlock { query, key, value, output })
    }

    pub fn heads(&self) -> usize {
        self.query.len()
    }

    pub fn features(&self) -> usize {
        self.output.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.query[0].ncols()
    }

    pub fn param_count(&self) -> usize {
        let per_head: usize = [&self.query, &self.key, &self.value].iter().flat_map(|m| m.iter()).map(Array2::len).sum();
        per_head + self.output.len()
    }
}

/// One head on one batch element: softmax over keys, row by row, so memory
/// stays linear in the token count.
fn head_forward(x: ArrayView2<f64>, wq: &Array2<f64>, wk: &Array2<f64>, wv: &Array2<f64>) -> Array2<f64> {
    let q = x.dot(wq);
    let k = x.dot(wk);
    let v = x.dot(wv);
    let scale = 1.0 / (wq.ncols() as f64).sqrt();
    let mut out = Array2::zeros(v.dim());
    for (i, q_row) in q.outer_iter().enumerate() {
        let mut scores = k.dot(&q_row);
        scores *= scale;
        let max = scores.fold(f64::NEG_INFINITY, |m, &s| m.max(s));
        scores.mapv_inplace(|s| (s - max).exp());
        let total = scores.sum();
        scores /= total;
        out.row_mut(i).assign(&scores.dot(&v));
    }
    out
}

/// Scaled dot-product multi-head self-attention over the token axis,
/// scale `1/sqrt(N_h)`, followed by the output matrix.
pub fn attention_forward(f: &FeatureBlock, blk: &AttentionBlock) -> Result<FeatureBlock, AugmentError> {
    let (b, k, n) = f.dims();
    if n != blk.features() {
        return Err(AugmentError::DimensionMismatch { what: "attention features", expected: blk.features(), found: n });
    }
    let heads = blk.heads();
    let hd = blk.head_dim();
    let parts = par::map_range(b * heads, |job| {
        let (bi, h) = (job / heads, job % heads);
        head_forward(f.0.slice(s![bi, .., ..]), &blk.query[h], &blk.key[h], &blk.value[h])
    });
    let mut out = Array3::zeros((b, k, n));
    for bi in 0..b {
        let mut concat = Array2::zeros((k, n));
        for h in 0..heads {
            concat.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&parts[bi * heads + h]);
        }
        out.slice_mut(s![bi, .., ..]).assign(&concat.dot(&blk.output));
    }
    Ok(FeatureBlock(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseMode {
    /// Attend over backbone tokens plus projected tokens.
    Augment,
    /// Ablation: attend over projected tokens only, discarding the backbone.
    Replace,
}

impl std::str::FromStr for FuseMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "augment" => Ok(FuseMode::Augment),
            "replace" => Ok(FuseMode::Replace),
            other => Err(format!("unknown mode {other:?} (expected augment|replace)")),
        }
    }
}

pub fn fuse(
    e_b: &FeatureBlock,
    e_vl: &FeatureBlock,
    p: &Projection,
    blk: &AttentionBlock,
    mode: FuseMode,
) -> Result<FeatureBlock, AugmentError> {
    let projected = project(e_vl, p)?;
    match mode {
        FuseMode::Augment => attention_forward(&concat_features(e_b, &projected)?, blk),
        FuseMode::Replace => attention_forward(&projected, blk),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckConfig {
    pub batch: usize,
    pub kb: usize,
    pub kv: usize,
    pub features: usize,
    pub vl_dim: usize,
    pub heads: usize,
    pub trials: usize,
    pub mode: FuseMode,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { batch: 2, kb: 49, kv: 32, features: 256, vl_dim: 768, heads: 4, trials: 100, mode: FuseMode::Augment, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub config: CheckConfig,
    pub checks: Vec<CheckResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{:<4} {:<28} max_dev={:<12.3e} tol={:<8.1e} {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.max_deviation,
                c.tolerance,
                c.detail
            ));
        }
        out
    }
}

/// Tolerance for permutation equivariance.
pub const EQUIVARIANCE_TOL: f64 = 1e-6;
/// Tolerance for projection linearity.
pub const LINEARITY_TOL: f64 = 1e-9;

/// Runs the augmentation invariants: parameter-count invariance, token
/// permutation equivariance, concat layout, projection linearity and fused
/// token counts.
pub fn run_checks(cfg: &CheckConfig) -> Result<CheckReport, AugmentError> {
    let mut rng = SplitMix64::new(cfg.seed);
    let mut checks = Vec::new();
    let n = cfg.features;

    // parameter count does not depend on token count
    let small = AttentionBlock::random(n, cfg.heads, &mut rng)?;
    let large = AttentionBlock::random(n, cfg.heads, &mut rng)?;
    let small_out = attention_forward(&FeatureBlock::random(1, 10, n, &mut rng), &small)?;
    let counts = (small.param_count(), large.param_count());
    checks.push(CheckResult {
        name: "param_count_invariance".into(),
        passed: counts.0 == counts.1 && small_out.dims() == (1, 10, n),
        max_deviation: counts.0.abs_diff(counts.1) as f64,
        tolerance: 0.0,
        detail: format!("K=10: {} params, K=10000: {} params", counts.0, counts.1),
    });

    let blk = AttentionBlock::random(n, cfg.heads, &mut rng)?;
    let proj = Projection::random(cfg.vl_dim, n, true, &mut rng);

    let mut worst = 0.0f64;
    let tokens = cfg.kb + cfg.kv;
    for _ in 0..cfg.trials {
        let f = FeatureBlock::random(cfg.batch, tokens, n, &mut rng);
        let mut perm: Vec<usize> = (0..tokens).collect();
        rng.shuffle(&mut perm);
        let lhs = attention_forward(&f.permute_tokens(&perm), &blk)?;
        let rhs = attention_forward(&f, &blk)?.permute_tokens(&perm);
        worst = worst.max(lhs.max_abs_diff(&rhs));
    }
    checks.push(CheckResult {
        name: "permutation_equivariance".into(),
        passed: worst < EQUIVARIANCE_TOL,
        max_deviation: worst,
        tolerance: EQUIVARIANCE_TOL,
        detail: format!("{} trials, K={tokens}", cfg.trials),
    });

    let e_b = FeatureBlock::random(cfg.batch, cfg.kb, n, &mut rng);
    let e_p = FeatureBlock::random(cfg.batch, cfg.kv, n, &mut rng);
    let joined = concat_features(&e_b, &e_p)?;
    let layout_ok = joined.dims() == (cfg.batch, tokens, n)
        && joined.0.slice(s![.., ..cfg.kb, ..]) == e_b.0
        && joined.0.slice(s![.., cfg.kb.., ..]) == e_p.0;
    checks.push(CheckResult {
        name: "concat_layout".into(),
        passed: layout_ok,
        max_deviation: 0.0,
        tolerance: 0.0,
        detail: format!("({}, {}, {}, {n}) -> {:?}", cfg.batch, cfg.kb, cfg.kv, joined.dims()),
    });

    let linear = Projection { weight: proj.weight.clone(), bias: None };
    let x = FeatureBlock::random(cfg.batch, cfg.kv, cfg.vl_dim, &mut rng);
    let y = FeatureBlock::random(cfg.batch, cfg.kv, cfg.vl_dim, &mut rng);
    let (a, b) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
    let combo = FeatureBlock(&x.0 * a + &y.0 * b);
    let lhs = project(&combo, &linear)?;
    let rhs = FeatureBlock(&project(&x, &linear)?.0 * a + &project(&y, &linear)?.0 * b);
    let dev = lhs.max_abs_diff(&rhs);
    checks.push(CheckResult {
        name: "projection_linearity".into(),
        passed: dev < LINEARITY_TOL,
        max_deviation: dev,
        tolerance: LINEARITY_TOL,
        detail: format!("a={a:.3}, b={b:.3}"),
    });

    let e_b = FeatureBlock::random(cfg.batch, cfg.kb, n, &mut rng);
    let e_vl = FeatureBlock::random(cfg.batch, cfg.kv, cfg.vl_dim, &mut rng);
    let out = fuse(&e_b, &e_vl, &proj, &blk, cfg.mode)?;
    let expected = match cfg.mode {
        FuseMode::Augment => tokens,
        FuseMode::Replace => cfg.kv,
    };
    checks.push(CheckResult {
        name: "fuse_token_count".into(),
        passed: out.dims() == (cfg.batch, expected, n),
        max_deviation: out.dims().1.abs_diff(expected) as f64,
        tolerance: 0.0,
        detail: format!("mode={:?}, tokens={}", cfg.mode, out.dims().1),
    });

    let empty_vl = FeatureBlock(Array3::zeros((cfg.batch, 0, cfg.vl_dim)));
    let reduced = fuse(&e_b, &empty_vl, &proj, &blk, FuseMode::Augment)?;
    let plain = attention_forward(&e_b, &blk)?;
    let dev = reduced.max_abs_diff(&plain);
    checks.push(CheckResult {
        name: "empty_augmentation".into(),
        passed: dev == 0.0,
        max_deviation: dev,
        tolerance: 0.0,
        detail: "K_v=0 equals plain attention".into(),
    });

    Ok(CheckReport { config: cfg.clone(), checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_zero_projection() {
        let mut rng = SplitMix64::new(1);
        let x = FeatureBlock::random(2, 3, 4, &mut rng);
        assert_eq!(project(&x, &Projection::identity(4)).unwrap(), x);
        let zero = Projection { weight: Array2::zeros((4, 5)), bias: Some(Array1::zeros(5)) };
        assert!(project(&x, &zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_shape() {
        let mut rng = SplitMix64::new(2);
        let x = FeatureBlock::random(1, 32, 768, &mut rng);
        let p = Projection::random(768, 64, true, &mut rng);
        assert_eq!(project(&x, &p).unwrap().dims(), (1, 32, 64));
        assert!(matches!(project(&x, &Projection::identity(4)), Err(AugmentError::DimensionMismatch { .. })));
    }

    #[test]
    fn concat_shape_and_layout() {
        let mut rng = SplitMix64::new(3);
        let e_b = FeatureBlock::random(2, 49, 256, &mut rng);
        let e_p = FeatureBlock::random(2, 32, 256, &mut rng);
        let f = concat_features(&e_b, &e_p).unwrap();
        assert_eq!(f.dims(), (2, 81, 256));
        assert_eq!(f.data().slice(s![.., 0..49, ..]), e_b.data());
        assert_eq!(f.data().slice(s![.., 49.., ..]), e_p.data());

        let empty = FeatureBlock::new(Array3::zeros((2, 0, 256))).unwrap();
        assert_eq!(concat_features(&e_b, &empty).unwrap(), e_b);

        let other = FeatureBlock::random(3, 2, 256, &mut rng);
        assert!(concat_features(&e_b, &other).is_err());
        let other = FeatureBlock::random(2, 2, 128, &mut rng);
        assert!(concat_features(&e_b, &other).is_err());
    }

    #[test]
    fn single_token_attention_is_value_then_output() {
        let mut rng = SplitMix64::new(4);
        let blk = AttentionBlock::random(8, 2, &mut rng).unwrap();
        let x = FeatureBlock::random(1, 1, 8, &mut rng);
        let out = attention_forward(&x, &blk).unwrap();
        let row: Array2<f64> = x.data().slice(s![0, .., ..]).to_owned();
        let v: Array2<f64> = concatenate(Axis(1), &[row.dot(&blk.value[0]).view(), row.dot(&blk.value[1]).view()]).unwrap();
        let expected = v.dot(&blk.output);
        for (a, b) in out.data().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_tokens_give_equal_rows() {
        let mut rng = SplitMix64::new(5);
        let blk = AttentionBlock::random(8, 4, &mut rng).unwrap();
        let token: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let x = FeatureBlock::new(Array3::from_shape_fn((1, 6, 8), |(_, _, j)| token[j])).unwrap();
        let out = attention_forward(&x, &blk).unwrap();
        for k in 1..6 {
            for j in 0..8 {
                assert!((out.data()[[0, k, j]] - out.data()[[0, 0, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_token_counts() {
        let mut rng = SplitMix64::new(6);
        let blk = AttentionBlock::random(16, 2, &mut rng).unwrap();
        let p = Projection::random(24, 16, true, &mut rng);
        let e_b = FeatureBlock::random(2, 7, 16, &mut rng);
        let e_vl = FeatureBlock::random(2, 5, 24, &mut rng);
        assert_eq!(fuse(&e_b, &e_vl, &p, &blk, FuseMode::Augment).unwrap().dims(), (2, 12, 16));
        assert_eq!(fuse(&e_b, &e_vl, &p, &blk, FuseMode::Replace).unwrap().dims(), (2, 5, 16));
    }

    #[test]
    fn block_rejects_bad_heads() {
        let mut rng = SplitMix64::new(7);
        assert!(AttentionBlock::random(10, 3, &mut rng).is_err());
        assert!(AttentionBlock::random(10, 0, &mut rng).is_err());
        let blk = AttentionBlock::random(12, 3, &mut rng).unwrap();
        assert_eq!(blk.param_count(), 3 * 12 * 12 + 12 * 12);
    }

    #[test]
    fn non_finite_blocks_rejected() {
        let mut data = Array3::zeros((1, 2, 2));
        data[[0, 1, 1]] = f64::NAN;
        assert_eq!(FeatureBlock::new(data), Err(AugmentError::NonFinite));
        assert_eq!(FeatureBlock::new(Array3::zeros((0, 2, 2))), Err(AugmentError::EmptyDimension));
    }

    #[test]
    fn small_check_suite_passes() {
        let cfg = CheckConfig { batch: 1, kb: 6, kv: 4, features: 16, vl_dim: 24, heads: 2, trials: 10, ..Default::default() };
        let report = run_checks(&cfg).unwrap();
        assert!(report.passed(), "{}", report.to_table());
    }
}
