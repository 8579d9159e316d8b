//! World generation, decoder training and the end-to-end demo pipeline as
//! library calls. The subcommands are thin wrappers over these.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::frames::{Lexicon, SemanticFrame};
use crate::io::{self, schema, EmbeddingRecord, FrameRecord, IoError, TextRecord};
use crate::metrics::{
    eval_sir, EvalError, EvalReport, GsrGroundTruth, GsrPrediction, HoiImageDetections, HoiImageGroundTruth, Scenario,
    SirGroundTruth, SirPrediction, ValueMode,
};
use crate::par;
use crate::rng::SplitMix64;
use crate::structparse::{parse_frame, serialize_frame, ParseMode, StructuredText};
use crate::synthworld::{frame_item, hoi_item, sample_grounded_ranked, World, STREAM_GROUNDED};
use crate::toylm::{self, DecoderModel, LmError, TrainConfig, TrainExample, TrainTrace, Vocabulary, DEFAULT_MAX_LEN};

/// Everything `gen-world` writes.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldData {
    pub frames: Vec<FrameRecord>,
    pub embeddings: Vec<EmbeddingRecord>,
    pub gsr_gt: Vec<GsrGroundTruth>,
    pub gsr_pred: Vec<GsrPrediction>,
    pub hoi_gt: Vec<HoiImageGroundTruth>,
    pub hoi_det: Vec<HoiImageDetections>,
}

/// Frame records (with embeddings) for item indices `range`, ids padded for
/// `total` items.
pub fn frame_records(world: &World, range: std::ops::Range<usize>, total: usize) -> (Vec<FrameRecord>, Vec<EmbeddingRecord>) {
    let start = range.start;
    par::map_range(range.len(), |k| {
        let i = start + k;
        let (frame, vector) = frame_item(world, i as u64);
        let id = world.item_id(i, total);
        let text = serialize_frame(&frame, world.lexicon()).expect("world frames serialize").as_str().to_string();
        let label = frame.verb.clone();
        (
            FrameRecord { id: id.clone(), verb: frame.verb.clone(), frames: vec![frame], text },
            EmbeddingRecord { id, label, vector: Some(vector), block: None },
        )
    })
    .into_iter()
    .unzip()
}

pub fn generate_world(world: &World, n: usize) -> WorldData {
    let (frames, embeddings) = frame_records(world, 0..n, n);
    let (gsr_gt, gsr_pred) = par::map_range(n, |i| {
        let mut rng = SplitMix64::for_index(world.spec().seed, STREAM_GROUNDED, i as u64);
        let (gt, ranked) = sample_grounded_ranked(world, &mut rng, 5);
        let id = world.item_id(i, n);
        let verb = gt.frame().verb.clone();
        (GsrGroundTruth { id: id.clone(), verb, frames: vec![gt] }, GsrPrediction { id, hypotheses: ranked })
    })
    .into_iter()
    .unzip();
    let (hoi_gt, hoi_det) = par::map_range(n, |i| hoi_item(world, world.item_id(i, n), i as u64)).into_iter().unzip();
    WorldData { frames, embeddings, gsr_gt, gsr_pred, hoi_gt, hoi_det }
}

/// `{prefix}{name}` for each output file.
pub fn world_file(prefix: &str, name: &str) -> PathBuf {
    PathBuf::from(format!("{prefix}{name}"))
}

pub const WORLD_FILES: [&str; 8] = [
    "frames.jsonl",
    "embeddings.jsonl",
    "gsr_gt.jsonl",
    "gsr_pred.jsonl",
    "hoi_gt.jsonl",
    "hoi_det.jsonl",
    "lexicon.json",
    "catalog.json",
];

/// Writes the world files and returns their paths.
pub fn write_world(world: &World, data: &WorldData, prefix: &str) -> Result<Vec<PathBuf>, IoError> {
    let p = |name| world_file(prefix, name);
    io::write_jsonl(&p("frames.jsonl"), schema::SIR_GT, &data.frames)?;
    io::write_jsonl(&p("embeddings.jsonl"), schema::EMBEDDING, &data.embeddings)?;
    io::write_jsonl(&p("gsr_gt.jsonl"), schema::GSR_GT, &data.gsr_gt)?;
    io::write_jsonl(&p("gsr_pred.jsonl"), schema::GSR_PRED, &data.gsr_pred)?;
    io::write_jsonl(&p("hoi_gt.jsonl"), schema::HOI_GT, &data.hoi_gt)?;
    io::write_jsonl(&p("hoi_det.jsonl"), schema::HOI_DET, &data.hoi_det)?;
    io::write_text(&p("lexicon.json"), &world.lexicon().to_json_string())?;
    let mut written: Vec<PathBuf> = WORLD_FILES[..7].iter().map(|n| p(n)).collect();
    if let Some(catalog) = world.catalog() {
        io::write_text(&p("catalog.json"), &catalog.to_json_string())?;
        written.push(p("catalog.json"));
    }
    Ok(written)
}

/// Every token a frame of this lexicon can serialize to, given the nouns
/// that may appear.
pub fn vocabulary_for<'a>(lexicon: &Lexicon, texts: impl IntoIterator<Item = &'a StructuredText>) -> Vocabulary {
    let mut words: Vec<String> = vec!["VERB".to_string()];
    for e in lexicon.iter() {
        words.push(e.gerund.clone());
        words.extend(e.roles.iter().map(|r| r.to_string()));
    }
    for t in texts {
        words.extend(t.tokens().iter().cloned());
    }
    words.sort();
    words.dedup();
    Vocabulary::from_words(&words).expect("lexicon tokens are whitespace free")
}

/// Pairs embeddings with texts by id, in id order.
pub fn training_examples(
    frames: &[FrameRecord],
    embeddings: &[EmbeddingRecord],
    vocab: &Vocabulary,
) -> Result<Vec<TrainExample>, String> {
    let mut by_id: std::collections::HashMap<&str, &EmbeddingRecord> = std::collections::HashMap::new();
    for e in embeddings {
        if by_id.insert(e.id.as_str(), e).is_some() {
            return Err(format!("duplicate embedding id {:?}", e.id));
        }
    }
    let mut frames: Vec<&FrameRecord> = frames.iter().collect();
    frames.sort_by(|a, b| a.id.cmp(&b.id));
    frames
        .iter()
        .map(|f| {
            let e = by_id.get(f.id.as_str()).ok_or_else(|| format!("frame {:?} has no embedding", f.id))?;
            let image = embedding_vector(e)?;
            let tokens = vocab.encode(&StructuredText::new(&f.text)).map_err(|err| format!("frame {:?}: {err}", f.id))?;
            Ok(TrainExample { image, tokens })
        })
        .collect()
}

/// The record's vector, or the mean of its token block.
pub fn embedding_vector(e: &EmbeddingRecord) -> Result<Vec<f64>, String> {
    match (&e.vector, &e.block) {
        (Some(v), None) => Ok(v.clone()),
        (None, Some(b)) if !b.is_empty() => Ok(crate::probe::mean_pool(b)),
        _ => Err(format!("embedding {:?} needs exactly one of vector or a non-empty block", e.id)),
    }
}

/// Greedy generations for each embedding. With `prefixes`, decoding continues
/// a forced `VERB <gerund>` prompt per item.
pub fn generate_texts(
    model: &DecoderModel,
    items: &[(String, Vec<f64>)],
    prefixes: Option<&[StructuredText]>,
    max_len: usize,
) -> Result<Vec<TextRecord>, LmError> {
    let idx: Vec<usize> = (0..items.len()).collect();
    par::map(&idx, |&i| {
        let (id, image) = &items[i];
        let (text, _) = match prefixes {
            Some(p) => toylm::generate_from(model, image, &p[i], max_len)?,
            None => toylm::generate(model, image, max_len)?,
        };
        Ok(TextRecord { id: id.clone(), text: text.as_str().to_string() })
    })
    .into_iter()
    .collect()
}

/// Parses generated strings into SiR predictions. Unparseable strings give
/// an empty hypothesis list. Returns the predictions and how many parsed.
pub fn texts_to_predictions(texts: &[TextRecord], lexicon: &Lexicon, mode: ParseMode) -> (Vec<SirPrediction>, usize) {
    let parsed = par::map(texts, |t| parse_frame(&StructuredText::new(&t.text), lexicon, mode).ok().map(|(f, _)| f));
    let ok = parsed.iter().filter(|p| p.is_some()).count();
    let preds = texts
        .iter()
        .zip(parsed)
        .map(|(t, f)| SirPrediction { id: t.id.clone(), hypotheses: f.into_iter().collect::<Vec<SemanticFrame>>() })
        .collect();
    (preds, ok)
}

fn strict_parse_count(texts: &[TextRecord], lexicon: &Lexicon) -> usize {
    par::map(texts, |t| parse_frame(&StructuredText::new(&t.text), lexicon, ParseMode::Strict).is_ok())
        .into_iter()
        .filter(|&ok| ok)
        .count()
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub train_items: usize,
    pub test_items: usize,
    pub train: TrainConfig,
    pub max_len: usize,
    pub value_mode: ValueMode,
    /// Write intermediate files under this prefix.
    pub workdir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train_items: 1000,
            test_items: 200,
            train: TrainConfig::desk_scale(),
            max_len: DEFAULT_MAX_LEN,
            value_mode: ValueMode::PerRole,
            workdir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub world_seed: u64,
    pub train_items: usize,
    pub test_items: usize,
    pub train: TrainConfig,
    pub trainable_params: usize,
    pub epoch_loss: Vec<f64>,
    /// Free-running generations that parse in strict mode.
    pub strict_parse_rate: f64,
    /// Generations continuing the GT verb prompt that parse in strict mode.
    pub gtverb_strict_parse_rate: f64,
    pub tolerant_parse_rate: f64,
    pub top1: EvalReport,
    pub gtverb: EvalReport,
}

impl PipelineReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "pipeline  world-seed: {}  train: {}  test: {}  epochs: {}\n",
            self.world_seed,
            self.train_items,
            self.test_items,
            self.epoch_loss.len()
        );
        if let (Some(first), Some(last)) = (self.epoch_loss.first(), self.epoch_loss.last()) {
            out.push_str(&format!("loss: epoch 1 {first:.4} -> final {last:.4}\n"));
        }
        out.push_str(&format!(
            "strict parse rate: {:.4}  (gt-verb prompt {:.4}, tolerant {:.4})\n\n",
            self.strict_parse_rate, self.gtverb_strict_parse_rate, self.tolerant_parse_rate
        ));
        out.push_str(&self.top1.to_table());
        out.push('\n');
        out.push_str(&self.gtverb.to_table());
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Data(String),
}

fn write_records(workdir: &Option<PathBuf>, name: &str, schema: &str, items: &[impl Serialize]) -> Result<(), IoError> {
    if let Some(dir) = workdir {
        io::write_jsonl(&dir.join(name), schema, items)?;
    }
    Ok(())
}

/// World generation, decoder training, generation on held-out items,
/// tolerant parsing and SiR evaluation (top-1 and GT-verb).
pub fn run_pipeline(world: &World, cfg: &PipelineConfig) -> Result<(PipelineReport, DecoderModel), PipelineError> {
    let total = cfg.train_items + cfg.test_items;
    let (train_frames, train_emb) = frame_records(world, 0..cfg.train_items, total);
    let (test_frames, test_emb) = frame_records(world, cfg.train_items..total, total);
    write_records(&cfg.workdir, "train_frames.jsonl", schema::SIR_GT, &train_frames)?;
    write_records(&cfg.workdir, "train_embeddings.jsonl", schema::EMBEDDING, &train_emb)?;
    write_records(&cfg.workdir, "test_frames.jsonl", schema::SIR_GT, &test_frames)?;
    write_records(&cfg.workdir, "test_embeddings.jsonl", schema::EMBEDDING, &test_emb)?;

    let texts: Vec<StructuredText> = train_frames.iter().chain(&test_frames).map(|f| StructuredText::new(&f.text)).collect();
    let vocab = vocabulary_for(world.lexicon(), &texts);
    let examples = training_examples(&train_frames, &train_emb, &vocab).map_err(PipelineError::Data)?;
    let (model, trace): (DecoderModel, TrainTrace) = toylm::train_decoder(&examples, vocab, &cfg.train)?;
    if let Some(dir) = &cfg.workdir {
        toylm::save_model(&model, &dir.join("model.dyfm"))?;
    }

    let items: Vec<(String, Vec<f64>)> = test_emb
        .iter()
        .map(|e| Ok((e.id.clone(), embedding_vector(e)?)))
        .collect::<Result<_, String>>()
        .map_err(PipelineError::Data)?;
    let prompts: Vec<StructuredText> = test_frames
        .iter()
        .map(|f| {
            let gerund = &world.lexicon().get(&f.verb).expect("world verb").gerund;
            StructuredText::from_tokens(&["VERB", gerund.as_str()])
        })
        .collect();
    let free = generate_texts(&model, &items, None, cfg.max_len)?;
    let prompted = generate_texts(&model, &items, Some(&prompts), cfg.max_len)?;
    write_records(&cfg.workdir, "generated.jsonl", schema::TEXT, &free)?;
    write_records(&cfg.workdir, "generated_gtverb.jsonl", schema::TEXT, &prompted)?;

    let lexicon = world.lexicon();
    let n = cfg.test_items.max(1) as f64;
    let strict_parse_rate = strict_parse_count(&free, lexicon) as f64 / n;
    let gtverb_strict_parse_rate = strict_parse_count(&prompted, lexicon) as f64 / n;
    let (top1_preds, tolerant_ok) = texts_to_predictions(&free, lexicon, ParseMode::Tolerant);
    let (gt_preds, _) = texts_to_predictions(&prompted, lexicon, ParseMode::Tolerant);
    write_records(&cfg.workdir, "sir_pred.jsonl", schema::SIR_PRED, &top1_preds)?;
    write_records(&cfg.workdir, "sir_pred_gtverb.jsonl", schema::SIR_PRED, &gt_preds)?;

    let gts: Vec<SirGroundTruth> =
        test_frames.iter().map(|f| SirGroundTruth { id: f.id.clone(), verb: f.verb.clone(), frames: f.frames.clone() }).collect();
    let top1 = eval_sir(&top1_preds, &gts, Scenario::Top1, cfg.value_mode)?;
    let gtverb = eval_sir(&gt_preds, &gts, Scenario::GtVerb, cfg.value_mode)?;
    let report = PipelineReport {
        world_seed: world.spec().seed,
        train_items: cfg.train_items,
        test_items: cfg.test_items,
        train: cfg.train,
        trainable_params: model.trainable_count(),
        epoch_loss: trace.epoch_loss,
        strict_parse_rate,
        gtverb_strict_parse_rate,
        tolerant_parse_rate: tolerant_ok as f64 / n,
        top1,
        gtverb,
    };
    Ok((report, model))
}

/// Reads a world spec file, or the built-in demo world for `None`.
pub fn load_world(spec: Option<&Path>, seed: Option<u64>) -> Result<World, String> {
    let mut ws = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            crate::synthworld::WorldSpec::from_json_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => crate::synthworld::WorldSpec::demo(seed.unwrap_or(0)),
    };
    if let Some(s) = seed {
        ws.seed = s;
    }
    World::new(ws).map_err(|e| e.to_string())
}
