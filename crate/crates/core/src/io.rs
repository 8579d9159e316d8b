//! Line-delimited JSON files. Every written line carries a `"schema"` tag;
//! on read the tag may be absent but must match when present.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::frames::SemanticFrame;

pub mod schema {
    pub const SIR_GT: &str = "dynoframe.sir-gt/v1";
    pub const SIR_PRED: &str = "dynoframe.sir-pred/v1";
    pub const GSR_GT: &str = "dynoframe.gsr-gt/v1";
    pub const GSR_PRED: &str = "dynoframe.gsr-pred/v1";
    pub const HOI_GT: &str = "dynoframe.hoi-gt/v1";
    pub const HOI_DET: &str = "dynoframe.hoi-det/v1";
    pub const HHI: &str = "dynoframe.hhi/v1";
    pub const EMBEDDING: &str = "dynoframe.embedding/v1";
    pub const TEXT: &str = "dynoframe.text/v1";
    pub const PARSED: &str = "dynoframe.parsed/v1";
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{origin}:{line}: {message}")]
    Parse { origin: String, line: usize, message: String },
    #[error("{origin}:{line}: schema {found:?}, expected {expected:?}")]
    Schema { origin: String, line: usize, expected: String, found: String },
}

impl IoError {
    pub fn code(&self) -> &'static str {
        match self {
            IoError::File { .. } => "io-error",
            IoError::Parse { .. } => "bad-json",
            IoError::Schema { .. } => "schema-mismatch",
        }
    }
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.to_path_buf(), source }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(file_err(path))
}

/// Parses JSONL text, skipping blank lines. `origin` names the source in errors.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, schema: &str, origin: &str) -> Result<Vec<T>, IoError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| IoError::Parse { origin: origin.to_string(), line: i + 1, message };
        let mut value: serde_json::Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let obj = value.as_object_mut().ok_or_else(|| parse_err("expected a JSON object".into()))?;
        if let Some(tag) = obj.remove("schema") {
            let found = tag.as_str().map(str::to_string).unwrap_or_else(|| tag.to_string());
            if found != schema {
                return Err(IoError::Schema { origin: origin.to_string(), line: i + 1, expected: schema.to_string(), found });
            }
        }
        out.push(serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<Vec<T>, IoError> {
    parse_jsonl(&read_text(path)?, schema, &path.display().to_string())
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    schema: &'a str,
    #[serde(flatten)]
    item: &'a T,
}

/// One line per item, `schema` first, each line newline-terminated.
pub fn to_jsonl_string<T: Serialize>(schema: &str, items: &[T]) -> String {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(&Tagged { schema, item }).expect("records serialize"));
        s.push('\n');
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(file_err(path))?;
    f.write_all(text.as_bytes()).map_err(file_err(path))
}

pub fn write_jsonl<T: Serialize>(path: &Path, schema: &str, items: &[T]) -> Result<(), IoError> {
    write_text(path, &to_jsonl_string(schema, items))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    Ok(sha256_hex(&fs::read(path).map_err(file_err(path))?))
}

/// A ground-truth frame line as written by the world generator; readable as
/// a SiR ground-truth record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: String,
    pub verb: String,
    pub frames: Vec<SemanticFrame>,
    pub text: String,
}

/// An embedding with its label: either one vector or a token block (which
/// consumers mean-pool).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<Vec<Vec<f64>>>,
}

/// A generated or hand-written structured string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_schema_tag() {
        let items = vec![TextRecord { id: "a".into(), text: "VERB x".into() }, TextRecord { id: "b".into(), text: "".into() }];
        let s = to_jsonl_string(schema::TEXT, &items);
        assert!(s.starts_with(r#"{"schema":"dynoframe.text/v1","id":"a""#));
        let back: Vec<TextRecord> = parse_jsonl(&s, schema::TEXT, "mem").unwrap();
        assert_eq!(back, items);
    }

    #[test]
    fn schema_is_optional_but_checked() {
        let untagged = "{\"id\":\"a\",\"text\":\"t\"}\n\n";
        assert_eq!(parse_jsonl::<TextRecord>(untagged, schema::TEXT, "mem").unwrap().len(), 1);
        let wrong = r#"{"schema":"dynoframe.hhi/v1","id":"a","text":"t"}"#;
        let err = parse_jsonl::<TextRecord>(wrong, schema::TEXT, "mem").unwrap_err();
        assert_eq!(err.code(), "schema-mismatch");
        let err = parse_jsonl::<TextRecord>("{\"id\":1}", schema::TEXT, "mem").unwrap_err();
        assert!(matches!(err, IoError::Parse { line: 1, .. }));
        assert_eq!(parse_jsonl::<TextRecord>("[1]", schema::TEXT, "mem").unwrap_err().code(), "bad-json");
    }

    #[test]
    fn role_order_survives_the_schema_tag() {
        let line = r#"{"schema":"dynoframe.sir-gt/v1","id":"a","verb":"v","frames":[{"verb":"v","roles":{"ZED":"x","ALPHA":null}}],"text":""}"#;
        let back: Vec<FrameRecord> = parse_jsonl(line, schema::SIR_GT, "mem").unwrap();
        let roles: Vec<&str> = back[0].frames[0].roles().map(|r| r.as_str()).collect();
        assert_eq!(roles, ["ZED", "ALPHA"]);
    }

    #[test]
    fn sha256_of_known_input() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
