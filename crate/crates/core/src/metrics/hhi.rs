//! HHI text metrics behind a pluggable scorer interface.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{mean, EvalError, EvalReport, ReportRow};
use crate::frames::Lexicon;
use crate::par;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HhiItem {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("no lexicon verb found in {0:?}")]
    NoVerb(String),
    #[error("no embedding for verb {0:?}")]
    MissingEmbedding(String),
    #[error("{0}")]
    External(String),
}

/// Scores one (prediction, ground truth) pair into named values.
pub trait HhiScorer: Sync {
    fn name(&self) -> &str;

    fn score(&self, pred: &str, gt: &str) -> Result<BTreeMap<String, f64>, ScoreError>;

    /// Scores many pairs; results are in input order.
    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<Result<BTreeMap<String, f64>, ScoreError>>, EvalError> {
        Ok(par::map(pairs, |(p, g)| self.score(p, g)))
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ExactMatchScorer;

impl HhiScorer for ExactMatchScorer {
    fn name(&self) -> &str {
        "exact"
    }

    fn score(&self, pred: &str, gt: &str) -> Result<BTreeMap<String, f64>, ScoreError> {
        let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
        Ok(BTreeMap::from([("exact".to_owned(), f64::from(u8::from(norm(pred) == norm(gt))))]))
    }
}

/// Bag-of-tokens F1 over lowercased whitespace tokens.
#[derive(Debug, Default, Clone, Copy)]
pub struct TokenF1Scorer;

pub(crate) fn token_f1(pred: &str, gt: &str) -> f64 {
    let bag = |s: &str| {
        let mut m: HashMap<String, usize> = HashMap::new();
        for t in s.split_whitespace() {
            *m.entry(t.to_lowercase()).or_default() += 1;
        }
        m
    };
    let (p, g) = (bag(pred), bag(gt));
    let (np, ng): (usize, usize) = (p.values().sum(), g.values().sum());
    if np == 0 && ng == 0 {
        return 1.0;
    }
    let overlap: usize = p.iter().map(|(t, c)| (*c).min(g.get(t).copied().unwrap_or(0))).sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / np as f64;
    let recall = overlap as f64 / ng as f64;
    2.0 * precision * recall / (precision + recall)
}

impl HhiScorer for TokenF1Scorer {
    fn name(&self) -> &str {
        "f1"
    }

    fn score(&self, pred: &str, gt: &str) -> Result<BTreeMap<String, f64>, ScoreError> {
        Ok(BTreeMap::from([("token_f1".to_owned(), token_f1(pred, gt))]))
    }
}

/// Cosine similarity between embeddings of the main verbs of both texts.
///
/// The main verb is the first token matching a lexicon gerund, lemma, or
/// third-person form (`-s`, `-es`, `-ies`).
#[derive(Debug, Clone)]
pub struct VerbSimScorer {
    surface_to_verb: HashMap<String, String>,
    embeddings: HashMap<String, Vec<f64>>,
}

impl VerbSimScorer {
    pub fn new(lexicon: &Lexicon, embeddings: HashMap<String, Vec<f64>>) -> Self {
        let mut surface_to_verb = HashMap::new();
        // gerunds win over other forms, so insert them last
        for e in lexicon.iter() {
            let l = &e.lemma;
            let third = if l.ends_with('y') && !l.ends_with("ay") && !l.ends_with("ey") && !l.ends_with("oy") {
                format!("{}ies", &l[..l.len() - 1])
            } else if l.ends_with('s') || l.ends_with("sh") || l.ends_with("ch") || l.ends_with('x') || l.ends_with('o') {
                format!("{l}es")
            } else {
                format!("{l}s")
            };
            surface_to_verb.entry(third).or_insert_with(|| e.verb_id.clone());
            surface_to_verb.entry(l.clone()).or_insert_with(|| e.verb_id.clone());
        }
        for e in lexicon.iter() {
            surface_to_verb.insert(e.gerund.clone(), e.verb_id.clone());
        }
        VerbSimScorer { surface_to_verb, embeddings }
    }

    /// Reads a JSON object mapping verb ids to vectors.
    pub fn load_embeddings(path: &Path) -> std::io::Result<HashMap<String, Vec<f64>>> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn main_verb(&self, text: &str) -> Option<&str> {
        text.split_whitespace()
            .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .find_map(|t| self.surface_to_verb.get(&t).map(String::as_str))
    }

    fn vector(&self, text: &str) -> Result<&[f64], ScoreError> {
        let verb = self.main_verb(text).ok_or_else(|| ScoreError::NoVerb(text.to_owned()))?;
        self.embeddings.get(verb).map(Vec::as_slice).ok_or_else(|| ScoreError::MissingEmbedding(verb.to_owned()))
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl HhiScorer for VerbSimScorer {
    fn name(&self) -> &str {
        "verbsim"
    }

    fn score(&self, pred: &str, gt: &str) -> Result<BTreeMap<String, f64>, ScoreError> {
        let (p, g) = (self.vector(pred)?, self.vector(gt)?);
        if p.len() != g.len() {
            return Err(ScoreError::External(format!("embedding sizes differ: {} vs {}", p.len(), g.len())));
        }
        Ok(BTreeMap::from([("sim".to_owned(), cosine(p, g))]))
    }
}

/// Runs an external program once per evaluation. It receives one
/// `{"pred": ..., "gt": ...}` JSON object per line on stdin and must answer
/// with one JSON object of named numbers per line (or `{"error": "..."}`).
#[derive(Debug, Clone)]
pub struct ExecScorer {
    program: PathBuf,
}

impl ExecScorer {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        ExecScorer { program: program.into() }
    }
}

impl HhiScorer for ExecScorer {
    fn name(&self) -> &str {
        "exec"
    }

    fn score(&self, pred: &str, gt: &str) -> Result<BTreeMap<String, f64>, ScoreError> {
        self.score_batch(&[(pred, gt)])
            .map_err(|e| ScoreError::External(e.to_string()))?
            .pop()
            .expect("one result per pair")
    }

    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<Result<BTreeMap<String, f64>, ScoreError>>, EvalError> {
        let fail = |m: String| EvalError::Scorer(format!("{}: {m}", self.program.display()));
        let mut child = Command::new(&self.program)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        let input: String = pairs
            .iter()
            .map(|(p, g)| serde_json::json!({"pred": p, "gt": g}).to_string() + "\n")
            .collect();
        let mut stdin = child.stdin.take().expect("stdin piped");
        let writer = std::thread::spawn(move || stdin.write_all(input.as_bytes()));

        let stdout = child.stdout.take().expect("stdout piped");
        let mut results = Vec::with_capacity(pairs.len());
        for line in BufReader::new(stdout).lines() {
            let line = line.map_err(|e| fail(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| fail(format!("bad output line: {e}")))?;
            let obj = value.as_object().ok_or_else(|| fail("output line is not a JSON object".into()))?;
            if let Some(msg) = obj.get("error") {
                results.push(Err(ScoreError::External(msg.as_str().unwrap_or("error").to_owned())));
                continue;
            }
            let mut map = BTreeMap::new();
            for (k, v) in obj {
                let v = v.as_f64().ok_or_else(|| fail(format!("value {k:?} is not a number")))?;
                map.insert(k.clone(), v);
            }
            results.push(Ok(map));
        }
        writer.join().expect("writer thread").map_err(|e| fail(e.to_string()))?;
        let status = child.wait().map_err(|e| fail(e.to_string()))?;
        if !status.success() {
            return Err(fail(format!("exited with {status}")));
        }
        if results.len() != pairs.len() {
            return Err(fail(format!("returned {} results for {} inputs", results.len(), pairs.len())));
        }
        Ok(results)
    }
}

/// Mean of every scorer output over the items it could score. Items the
/// scorer rejects are skipped and counted under `skipped`.
pub fn eval_hhi(preds: &[HhiItem], gts: &[HhiItem], scorer: &dyn HhiScorer) -> Result<EvalReport, EvalError> {
    let mut by_id: HashMap<&str, &HhiItem> = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_id.insert(&p.id, p).is_some() {
            return Err(EvalError::DuplicateId(p.id.clone()));
        }
    }
    let mut sorted: Vec<&HhiItem> = gts.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(EvalError::DuplicateId(w[0].id.clone()));
    }
    let mut pairs = Vec::with_capacity(sorted.len());
    for g in &sorted {
        let p = by_id.remove(g.id.as_str()).ok_or_else(|| EvalError::MissingPrediction(g.id.clone()))?;
        pairs.push((p.text.as_str(), g.text.as_str()));
    }
    if let Some(extra) = by_id.keys().min() {
        return Err(EvalError::UnexpectedPrediction((*extra).to_owned()));
    }

    let results = scorer.score_batch(&pairs)?;
    let mut report = EvalReport::new("hhi", sorted.len());
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut skipped = 0u64;
    for (g, result) in sorted.iter().zip(results) {
        match result {
            Ok(values) => {
                for (k, v) in &values {
                    columns.entry(k.clone()).or_default().push(*v);
                }
                report.rows.push(ReportRow { key: g.id.clone(), values, note: None });
            }
            Err(e) => {
                skipped += 1;
                report.rows.push(ReportRow { key: g.id.clone(), values: BTreeMap::new(), note: Some(e.to_string()) });
            }
        }
    }
    for (k, vs) in columns {
        if let Some(m) = mean(vs) {
            report.metrics.insert(k, m);
        }
    }
    report.counts.insert("scored".to_owned(), sorted.len() as u64 - skipped);
    report.counts.insert("skipped".to_owned(), skipped);
    report.counts.insert(format!("scorer:{}", scorer.name()), 1);
    Ok(report)
}
