use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::pipeline::{self, PipelineConfig};
use super::*;
use crate::augment::{run_checks, CheckConfig};
use crate::frames::{load_catalog, load_lexicon, FrameError, Lexicon, SemanticFrame};
use crate::io::{schema, EmbeddingRecord, FrameRecord, TextRecord};
use crate::metrics::{
    eval_gsr, eval_hhi, eval_hoi, eval_sir, EvalReport, ExactMatchScorer, ExecScorer, GsrGroundTruth, GsrPrediction,
    HhiItem, HhiScorer, HoiImageDetections, HoiImageGroundTruth, ReportRow, SirGroundTruth, SirPrediction,
    TokenF1Scorer, VerbSimScorer,
};
use crate::probe::{correlate, fit_probe, probe_accuracy, ProbeConfig, ProbeDataset, Split};
use crate::structparse::{parse_frame, serialize_frame, ParseMode, StructuredText};
use crate::toylm::{self, LmError};

pub fn dispatch(command: Command, ctx: &mut RunContext) -> Result<(), CliError> {
    match command {
        Command::Parse(a) => parse(a, ctx),
        Command::Serialize(a) => serialize(a, ctx),
        Command::EvalSir(a) => eval_situation(a, ctx, false),
        Command::EvalGsr(a) => eval_situation(a, ctx, true),
        Command::EvalHoi(a) => hoi(a, ctx),
        Command::EvalHhi(a) => hhi(a, ctx),
        Command::Probe(a) => probe(a, ctx),
        Command::Correlate(a) => correlation(a, ctx),
        Command::DemoTrain(a) => demo_train(a, ctx),
        Command::DemoGenerate(a) => demo_generate(a, ctx),
        Command::AugmentCheck(a) => augment_check(a, ctx),
        Command::GenWorld(a) => gen_world(a, ctx),
        Command::Pipeline(a) => run_pipeline(a, ctx),
    }
}

fn lexicon_err(e: FrameError) -> CliError {
    CliError::validation("invalid-lexicon", e.to_string())
}

fn lm_err(e: LmError) -> CliError {
    match e {
        LmError::NonFinite { .. } | LmError::Io(_) => CliError::internal("training-failed", e.to_string()),
        other => CliError::validation("invalid-model", other.to_string()),
    }
}

fn read_input(input: Option<&Path>, ctx: &mut RunContext) -> Result<String, CliError> {
    match input {
        Some(p) => {
            ctx.input(p, "--in")?;
            Ok(io::read_text(p)?)
        }
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).map_err(|e| CliError::validation("io-error", format!("stdin: {e}")))?;
            Ok(s)
        }
    }
}

/// JSON report to `--out`, table to stdout, rows to `--csv`.
fn emit_report(report: &EvalReport, out: &ReportOut, ctx: &mut RunContext) -> Result<(), CliError> {
    if let Some(p) = &out.out {
        ctx.write(p, &report.to_json())?;
    }
    if let Some(p) = &out.csv {
        ctx.write(p, &report.to_csv())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

#[derive(Serialize)]
struct ParsedLine<'a> {
    line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<&'a str>,
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    frame: Option<SemanticFrame>,
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostics: Option<crate::structparse::ParseDiagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<Value>,
}

fn parse(a: ParseArgs, ctx: &mut RunContext) -> Result<(), CliError> {
    ctx.input(&a.lexicon, "--lexicon")?;
    let lexicon = load_lexicon(&a.lexicon).map_err(lexicon_err)?;
    let mode: ParseMode = a.mode.parse().map_err(|e: String| CliError::validation("invalid-value", e))?;
    let text = read_input(a.input.as_deref(), ctx)?;
    let records: Vec<(usize, Option<String>, String)> = if a.jsonl {
        let origin = a.input.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "stdin".into());
        io::parse_jsonl::<TextRecord>(&text, schema::TEXT, &origin)?
            .into_iter()
            .enumerate()
            .map(|(i, r)| (i + 1, Some(r.id), r.text))
            .collect()
    } else {
        text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| (i + 1, None, l.to_string())).collect()
    };
    let results = par::map(&records, |(_, _, t)| parse_frame(&StructuredText::new(t), &lexicon, mode));
    let failed = results.iter().filter(|r| r.is_err()).count();

    let out = if a.as_sir_pred {
        let preds: Vec<SirPrediction> = records
            .iter()
            .zip(results)
            .map(|((line, id, _), r)| SirPrediction {
                id: id.clone().unwrap_or_else(|| line.to_string()),
                hypotheses: r.ok().map(|(f, _)| f).into_iter().collect(),
            })
            .collect();
        io::to_jsonl_string(schema::SIR_PRED, &preds)
    } else {
        let lines: Vec<ParsedLine> = records
            .iter()
            .zip(results)
            .map(|((line, id, _), r)| match r {
                Ok((frame, diag)) => ParsedLine { line: *line, id: id.as_deref(), ok: true, frame: Some(frame), diagnostics: Some(diag), error: None },
                Err(e) => {
                    let mut v = serde_json::to_value(&e).expect("parse errors serialize");
                    v["message"] = e.to_string().into();
                    ParsedLine { line: *line, id: id.as_deref(), ok: false, frame: None, diagnostics: None, error: Some(v) }
                }
            })
            .collect();
        io::to_jsonl_string(schema::PARSED, &lines)
    };
    ctx.emit(a.out.as_deref(), &out)?;
    if failed > 0 && !a.as_sir_pred {
        return Err(CliError::validation("parse-failed", format!("{failed} of {} lines did not parse", records.len()))
            .with("failed", failed)
            .with("total", records.len()));
    }
    Ok(())
}

fn serialize(a: SerializeArgs, ctx: &mut RunContext) -> Result<(), CliError> {
    ctx.input(&a.lexicon, "--lexicon")?;
    let lexicon = load_lexicon(&a.lexicon).map_err(lexicon_err)?;
    let text = read_input(a.input.as_deref(), ctx)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| CliError::validation("bad-json", format!("line {}: {m}", i + 1)).with("line", i + 1);
        let mut v: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        // accept a bare frame or a record holding one under "frame"
        if let Some(inner) = v.get_mut("frame") {
            v = inner.take();
        }
        let frame: SemanticFrame = serde_json::from_value(v).map_err(|e| bad(e.to_string()))?;
        let s = serialize_frame(&frame, &lexicon)
            .map_err(|e| CliError::validation("invalid-frame", format!("line {}: {e}", i + 1)).with("line", i + 1))?;
        out.push_str(s.as_str());
        out.push('\n');
    }
    ctx.emit(a.out.as_deref(), &out)
}

fn eval_situation(a: EvalSituationArgs, ctx: &mut RunContext, grounded: bool) -> Result<(), CliError> {
    ctx.input(&a.gt, "--gt")?;
    ctx.input(&a.pred, "--pred")?;
    let scenario = a.scenario.parse().map_err(|e: String| CliError::validation("invalid-value", e))?;
    let mode = a.value_mode.parse().map_err(|e: String| CliError::validation("invalid-value", e))?;
    let report = if grounded {
        let gts: Vec<GsrGroundTruth> = io::read_jsonl(&a.gt, schema::GSR_GT)?;
        let preds: Vec<GsrPrediction> = io::read_jsonl(&a.pred, schema::GSR_PRED)?;
        eval_gsr(&preds, &gts, scenario, mode)?
    } else {
        let gts: Vec<SirGroundTruth> = io::read_jsonl(&a.gt, schema::SIR_GT)?;
        let preds: Vec<SirPrediction> = io::read_jsonl(&a.pred, schema::SIR_PRED)?;
        eval_sir(&preds, &gts, scenario, mode)?
    };
    emit_report(&report, &a.report, ctx)
}

fn hoi(a: EvalHoiArgs, ctx: &mut RunContext) -> Result<(), CliError> {
    ctx.input(&a.gt, "--gt")?;
    ctx.input(&a.det, "--det")?;
    ctx.input(&a.catalog, "--catalog")?;
    let catalog = load_catalog(&a.catalog).map_err(|e| CliError::validation("invalid-catalog", e.to_string()))?;
    let gts: Vec<HoiImageGroundTruth> = io::read_jsonl(&a.gt, schema::HOI_GT)?;
    let dets: Vec<HoiImageDetections> = io::read_jsonl(&a.det, schema::HOI_DET)?;
    let report = eval_hoi(&gts, &dets, &catalog, a.zero_gt_as_zero)?;
    emit_report(&report, &a.report, ctx)
}

fn hhi(a: EvalHhiArgs, ctx: &mut RunContext) -> Result<(), CliError> {
    ctx.input(&a.gt, "--gt")?;
    ctx.input(&a.pred, "--pred")?;
    let scorer: Box<dyn HhiScorer> = match a.scorer.as_str() {
        "exact" => Box::new(ExactMatchScorer),
        "f1" | "token_f1" => Box::new(TokenF1Scorer),
        "verbsim" => {
            let lex_path = a.lexicon.as_deref().ok_or_else(|| CliError::validation("missing-flag", "verbsim needs --lexicon").with("flag", "--lexicon"))?;
            let emb_path = a
                .verb_embeddings
                .as_deref()
                .ok_or_else(|| CliError::validation("missing-flag", "verbsim needs --verb-embeddings").with("flag", "--verb-embeddings"))?;
            ctx.input(lex_path, "--lexicon")?;
            ctx.input(emb_path, "--verb-embeddings")?;
            let lexicon = load_lexicon(lex_path).map_err(lexicon_err)?;
            let emb = VerbSimScorer::load_embeddings(emb_path).map_err(|e| CliError::validation("bad-json", format!("{}: {e}", emb_path.display())))?;
            Box::new(VerbSimScorer::new(&lexicon, emb))
        }
        other => match other.strip_prefix("exec:") {
            Some(program) if !program.is_empty() => {
                ctx.input(Path::new(program), "--scorer")?;
                Box::new(ExecScorer::new(program))
            }
            _ => return Err(CliError::validation("invalid-value", format!("unknown scorer {other:?}")).with("flag", "--scorer")),
        },
    };
    let gts: Vec<HhiItem> = io::read_jsonl(&a.gt, schema::HHI)?;
    let preds: Vec<HhiItem> = io::read_jsonl(&a.pred, schema::HHI)?;
    let report = eval_hhi(&preds, &gts, scorer.as_ref())?;
    emit_report(&report, &a.report, ctx)
}

fn probe(a: ProbeArgs, ctx: &mut RunContext) -> Result<(), CliError> {
    ctx.input(&a.embeddings, "--embeddings")?;
    ctx.seed(a.seed);
    let ratios: Vec<f64> = a
        .split
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::validation("invalid-value", format!("--split: {e}")).with("flag", "--split"))?;
    let ratios: [f64; 3] = ratios
        .try_into()
        .map_err(|_| CliError::validation("invalid-value", "--split needs three ratios").with("flag", "--split"))?;
    let records: Vec<EmbeddingRecord> = io::read_jsonl(&a.embeddings, schema::EMBEDDING)?;
    let mut ids = Vec::with_capacity(records.len());
    let mut xs = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        xs.push(pipeline::embedding_vector(&r).map_err(|e| CliError::validation("schema-mismatch", e))?);
        ids.push(r.id);
        labels.push(r.label);
    }
    let probe_err = |e: crate::probe::ProbeError| CliError::validation("invalid-dataset", e.to_string());
    let ds = ProbeDataset::new(ids, xs, labels).map_err(probe_err)?.with_split(ratios, a.seed).map_err(probe_err)?;
    let cfg = ProbeConfig { lr: a.lr, epochs: a.epochs, l2: a.l2, seed: a.seed, batch_size: None };
    let (model, trace) = fit_probe(&ds, &cfg).map_err(probe_err)?;
    let mut report = EvalReport::new("probe", ds.ids.len());
    for (name, split) in [("train", Split::Train), ("val", Split::Val), ("test", Split::Test)] {
        report.counts.insert(format!("{name}_items"), ds.split(split).len() as u64);
        if !ds.split(split).is_empty() {
            report.metrics.insert(format!("{name}_accuracy"), probe_accuracy(&model, &ds, split).map_err(probe_err)?);
        }
    }
    report.counts.insert("classes".into(), ds.n_classes() as u64);
    if let Some(l) = trace.last() {
        report.metrics.insert("final_loss".into(), *l);
    }
    report.rows = trace
        .iter()
        .enumerate()
        .map(|(i, l)| ReportRow { key: format!("epoch{:04}", i + 1), values: BTreeMap::from([("loss".to_string(), *l)]), note: None })
        .collect();
    emit_report(&report, &a.report, ctx)
}

fn correlation(a: CorrelateArgs, ctx: &mut RunContext) -> Result<(), CliError> {
    ctx.input(&a.input, "--in")?;
    let bad = |m: String| CliError::validation("bad-csv", m);
    let mut reader = csv::Reader::from_path(&a.input).map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str, flag: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::validation("unknown-column", format!("no column {name:?} in {}", a.input.display())).with("flag", flag))
    };
    let (xi, yi) = (col(&a.x, "--x")?, col(&a.y, "--y")?);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| {
            rec.get(i)
                .unwrap_or("")
                .trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("row {}: column {}: {e}", row + 2, &headers[i])))
        };
        xs.push(num(xi)?);
        ys.push(num(yi)?);
    }
    let c = correlate(&xs, &ys).map_err(|e| CliError::validation("invalid-dataset", e.to_string()))?;
    let mut report = EvalReport::new("correlate", c.n);
    report.metrics.insert("pearson".into(), c.pearson);
    report.metrics.insert("spearman".into(), c.spearman);
    emit_report(&report, &a.report, ctx)
}

fn demo_train(a: DemoTrainArgs, ctx: &mut RunContext) -> Result<(), CliError> {
    ctx.input(&a.frames, "--frames")?;
    ctx.input(&a.embeddings, "--embeddings")?;
    ctx.input(&a.lexicon, "--lexicon")?;
    ctx.seed(a.seed);
    let lexicon = load_lexicon(&a.lexicon).map_err(lexicon_err)?;
    let frames: Vec<FrameRecord> = io::read_jsonl(&a.frames, schema::SIR_GT)?;
    let embeddings: Vec<EmbeddingRecord> = io::read_jsonl(&a.embeddings, schema::EMBEDDING)?;
    let texts: Vec<StructuredText> = frames.iter().map(|f| StructuredText::new(&f.text)).collect();
    let vocab = pipeline::vocabulary_for(&lexicon, &texts);
    let examples = pipeline::training_examples(&frames, &embeddings, &vocab).map_err(|e| CliError::validation("schema-mismatch", e))?;
    let config = a.train.to_config(a.seed);
    let (model, trace) = toylm::train_decoder(&examples, vocab, &config).map_err(lm_err)?;
    toylm::save_model(&model, &a.model_out).map_err(|e| CliError::internal("write-failed", e.to_string()))?;
    ctx.output(&a.model_out);

    #[derive(Serialize)]
    struct TrainReport<'a> {
        task: &'static str,
        items: usize,
        config: &'a toylm::TrainConfig,
        trainable_params: usize,
        epoch_loss: &'a [f64],
    }
    let report = TrainReport {
        task: "demo-train",
        items: examples.len(),
        config: &config,
        trainable_params: model.trainable_count(),
        epoch_loss: &trace.epoch_loss,
    };
    if let Some(p) = &a.out {
        let mut s = serde_json::to_string_pretty(&report).expect("report serializes");
        s.push('\n');
        ctx.write(p, &s)?;
    }
    println!("items: {}  trainable params: {}", examples.len(), model.trainable_count());
    for (i, l) in trace.epoch_loss.iter().enumerate() {
        println!("epoch {:>3}  loss {l:.6}", i + 1);
    }
    Ok(())
}

fn demo_generate(a: DemoGenerateArgs, ctx: &mut RunContext) -> Result<(), CliError> {
    ctx.input(&a.model, "--model")?;
    ctx.input(&a.embeddings, "--embeddings")?;
    if a.max_len == 0 {
        return Err(CliError::validation("invalid-value", "--max-len must be at least 1").with("flag", "--max-len"));
    }
    let model = toylm::load_model(&a.model).map_err(lm_err)?;
    let mut records: Vec<EmbeddingRecord> = io::read_jsonl(&a.embeddings, schema::EMBEDDING)?;
    records.sort_by(|x, y| x.id.cmp(&y.id));
    let items: Vec<(String, Vec<f64>)> = records
        .iter()
        .map(|r| Ok((r.id.clone(), pipeline::embedding_vector(r)?)))
        .collect::<Result<_, String>>()
        .map_err(|e| CliError::validation("schema-mismatch", e))?;
    let prompts = match (&a.gt_verb_from, &a.lexicon) {
        (Some(frames_path), Some(lex_path)) => {
            ctx.input(frames_path, "--gt-verb-from")?;
            ctx.input(lex_path, "--lexicon")?;
            let lexicon: Lexicon = load_lexicon(lex_path).map_err(lexicon_err)?;
            let frames: Vec<FrameRecord> = io::read_jsonl(frames_path, schema::SIR_GT)?;
            let verbs: BTreeMap<&str, &str> = frames.iter().map(|f| (f.id.as_str(), f.verb.as_str())).collect();
            let prompts = items
                .iter()
                .map(|(id, _)| {
                    let verb = verbs.get(id.as_str()).ok_or_else(|| CliError::validation("id-mismatch", format!("no frame for {id:?}")))?;
                    let entry = lexicon.get(verb).ok_or_else(|| CliError::validation("invalid-frame", format!("unknown verb {verb:?}")))?;
                    Ok(StructuredText::from_tokens(&["VERB", entry.gerund.as_str()]))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            Some(prompts)
        }
        _ => None,
    };
    let texts = pipeline::generate_texts(&model, &items, prompts.as_deref(), a.max_len).map_err(lm_err)?;
    let out = if a.plain {
        texts.iter().map(|t| format!("{}\n", t.text)).collect()
    } else {
        io::to_jsonl_string(schema::TEXT, &texts)
    };
    ctx.emit(a.out.as_deref(), &out)
}

fn augment_check(a: AugmentCheckArgs, ctx: &mut RunContext) -> Result<(), CliError> {
    ctx.seed(a.seed);
    let cfg = CheckConfig {
        batch: a.batch,
        kb: a.kb,
        kv: a.kv,
        features: a.features,
        vl_dim: a.vl_dim,
        heads: a.heads,
        trials: a.trials,
        mode: a.mode.parse().map_err(|e: String| CliError::validation("invalid-value", e))?,
        seed: a.seed,
    };
    let report = run_checks(&cfg).map_err(|e| CliError::validation("invalid-config", e.to_string()))?;
    if let Some(p) = &a.out {
        let mut s = serde_json::to_string_pretty(&report).expect("report serializes");
        s.push('\n');
        ctx.write(p, &s)?;
    }
    print!("{}", report.to_table());
    if !report.passed() {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        return Err(CliError::validation("check-failed", format!("failed: {}", failed.join(", "))).with("failed", failed));
    }
    Ok(())
}

fn world_from(spec: Option<&Path>, seed: Option<u64>, ctx: &mut RunContext) -> Result<crate::synthworld::World, CliError> {
    if let Some(p) = spec {
        ctx.input(p, "--spec")?;
    }
    let world = pipeline::load_world(spec, seed).map_err(|e| CliError::validation("invalid-world", e))?;
    ctx.seed(world.spec().seed);
    Ok(world)
}

fn gen_world(a: GenWorldArgs, ctx: &mut RunContext) -> Result<(), CliError> {
    let world = world_from(a.spec.as_deref(), a.seed, ctx)?;
    let data = pipeline::generate_world(&world, a.n);
    let written = pipeline::write_world(&world, &data, &a.out_prefix).map_err(|e| CliError::internal("write-failed", e.to_string()))?;
    for p in &written {
        ctx.output(p);
    }
    if a.write_spec {
        ctx.write(&pipeline::world_file(&a.out_prefix, "world.json"), &world.spec().to_json_string())?;
    }
    println!("wrote {} items (seed {}) to {}*", a.n, world.spec().seed, a.out_prefix);
    Ok(())
}

fn run_pipeline(a: PipelineArgs, ctx: &mut RunContext) -> Result<(), CliError> {
    let world = world_from(a.world.as_deref(), Some(a.seed), ctx)?;
    if a.train_items == 0 || a.test_items == 0 {
        return Err(CliError::validation("invalid-value", "--train-items and --test-items must be positive"));
    }
    let cfg = PipelineConfig {
        train_items: a.train_items,
        test_items: a.test_items,
        train: a.train.to_config(a.seed),
        max_len: a.max_len,
        value_mode: a.value_mode.parse().map_err(|e: String| CliError::validation("invalid-value", e))?,
        workdir: a.workdir.clone(),
    };
    let (report, _) = pipeline::run_pipeline(&world, &cfg).map_err(|e| match e {
        pipeline::PipelineError::Lm(e) => lm_err(e),
        pipeline::PipelineError::Io(e) => CliError::internal("write-failed", e.to_string()),
        pipeline::PipelineError::Eval(e) => CliError::internal(e.code(), e.to_string()),
        pipeline::PipelineError::Data(m) => CliError::internal("internal", m),
    })?;
    if let Some(dir) = &a.workdir {
        if let Ok(entries) = std::fs::read_dir(dir) {
            let mut paths: Vec<_> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
            paths.sort();
            paths.iter().for_each(|p| ctx.output(p));
        }
    }
    if let Some(p) = &a.out {
        ctx.write(p, &report.to_json())?;
    }
    print!("{}", report.to_table());
    Ok(())
}
