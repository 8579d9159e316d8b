//! Rule-based conversion between frames and structured text.
//!
//! A frame is written as `VERB <gerund>` followed by `<ROLE> <noun>` pairs in
//! the verb's schema order, skipping empty roles:
//!
//! ```text
//! VERB slicing AGENT person PLACE table TOOL knife
//! ```
//!
//! Role markers are the only all-caps tokens, so a noun is the maximal run of
//! tokens between two markers and may span several words.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::frames::{
    is_role_token, validate_frame, FrameViolation, HhiAnnotation, Lexicon, Noun, SemanticFrame,
    VerbEntry, VERB_MARKER,
};

/// Participant slot tokens for HHI strings.
pub const HHI_SLOTS: [&str; 2] = ["[P1]", "[P2]"];

fn is_vowel(word: &[u8], i: usize) -> bool {
    match word[i] {
        b'a' | b'e' | b'i' | b'o' => true,
        // "qu" counts as a consonant cluster
        b'u' => !(i > 0 && word[i - 1] == b'q'),
        _ => false,
    }
}

fn vowel_groups(word: &[u8]) -> usize {
    let mut groups = 0;
    let mut in_group = false;
    for i in 0..word.len() {
        let v = is_vowel(word, i);
        if v && !in_group {
            groups += 1;
        }
        in_group = v;
    }
    groups
}

/// Present-continuous form of a lowercase lemma.
///
/// Rules, in order: `-ie` becomes `-ying`; a final `e` is dropped unless the
/// word ends in `-ee`, `-ye` or `-oe` (or is two letters long); a
/// single-syllable word ending consonant-vowel-consonant doubles its final
/// consonant unless that consonant is `w`, `x` or `y`; otherwise `ing` is
/// appended. Irregular verbs take their gerund from the lexicon instead.
pub fn gerund(lemma: &str) -> String {
    let w = lemma.as_bytes();
    let n = w.len();
    if n >= 2 && lemma.ends_with("ie") {
        return format!("{}ying", &lemma[..n - 2]);
    }
    if n > 2 && w[n - 1] == b'e' && !matches!(w[n - 2], b'e' | b'y' | b'o') {
        return format!("{}ing", &lemma[..n - 1]);
    }
    let ascii_lower = w.iter().all(u8::is_ascii_lowercase);
    if ascii_lower
        && n >= 3
        && !is_vowel(w, n - 1)
        && is_vowel(w, n - 2)
        && !is_vowel(w, n - 3)
        && !matches!(w[n - 1], b'w' | b'x' | b'y')
        && vowel_groups(w) == 1
    {
        return format!("{lemma}{}ing", w[n - 1] as char);
    }
    format!("{lemma}ing")
}

/// Whitespace-tokenized text in canonical single-space form.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StructuredText {
    raw: String,
    tokens: Vec<String>,
}

impl StructuredText {
    pub fn new(text: &str) -> Self {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
        StructuredText { raw: tokens.join(" "), tokens }
    }

    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        Self::new(&tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" "))
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl fmt::Display for StructuredText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    Strict,
    Tolerant,
}

impl FromStr for ParseMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "strict" => Ok(ParseMode::Strict),
            "tolerant" => Ok(ParseMode::Tolerant),
            other => Err(format!("unknown parse mode {other:?} (expected strict|tolerant)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(tag = "error", rename_all = "kebab-case")]
pub enum ParseError {
    #[error("text does not start with VERB")]
    NoVerbMarker,
    #[error("token {index}: unknown gerund {token:?}")]
    UnknownGerund { token: String, index: usize },
    #[error("token {index}: gerund {token:?} matches verbs {verbs:?}")]
    AmbiguousGerund { token: String, index: usize, verbs: Vec<String> },
    #[error("token {index}: {token} is not a role of this verb")]
    UnknownRole { token: String, index: usize },
    #[error("token {index}: role {token} repeated")]
    DuplicateRole { token: String, index: usize },
    #[error("token {index}: role {token} has no noun")]
    RoleWithoutNoun { token: String, index: usize },
    #[error("token {index}: {token:?} does not follow a role")]
    StrayToken { token: String, index: usize },
    #[error("token {index}: noun word {token:?} is not lowercase")]
    InvalidNoun { token: String, index: usize },
}

impl ParseError {
    pub fn code(&self) -> &'static str {
        match self {
            ParseError::NoVerbMarker => "no-verb-marker",
            ParseError::UnknownGerund { .. } => "unknown-gerund",
            ParseError::AmbiguousGerund { .. } => "ambiguous-gerund",
            ParseError::UnknownRole { .. } => "unknown-role",
            ParseError::DuplicateRole { .. } => "duplicate-role",
            ParseError::RoleWithoutNoun { .. } => "role-without-noun",
            ParseError::StrayToken { .. } => "stray-token",
            ParseError::InvalidNoun { .. } => "invalid-noun",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum IssueKind {
    MissingVerbMarker,
    UnknownRole,
    DuplicateRole,
    RoleWithoutNoun,
    StrayToken,
    NounCase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParseIssue {
    pub kind: IssueKind,
    pub index: usize,
    pub message: String,
}

/// Repairs applied by tolerant parsing. `recovered` is set iff any were needed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParseDiagnostics {
    pub recovered: bool,
    pub issues: Vec<ParseIssue>,
}

impl ParseDiagnostics {
    fn push(&mut self, kind: IssueKind, index: usize, message: String) {
        self.issues.push(ParseIssue { kind, index, message });
        self.recovered = true;
    }
}

#[derive(Debug, Error)]
pub enum SerializeError {
    #[error("unknown verb {0:?}")]
    UnknownVerb(String),
    #[error("frame does not match its verb schema: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Schema(Vec<FrameViolation>),
}

/// Writes `VERB <gerund>` then `<ROLE> <noun>` for each filled role, in the
/// lexicon's role order.
pub fn serialize_frame(frame: &SemanticFrame, lexicon: &Lexicon) -> Result<StructuredText, SerializeError> {
    let entry = lexicon.get(&frame.verb).ok_or_else(|| SerializeError::UnknownVerb(frame.verb.clone()))?;
    let violations = validate_frame(frame, lexicon);
    if !violations.is_empty() {
        return Err(SerializeError::Schema(violations));
    }
    let mut tokens: Vec<&str> = vec![VERB_MARKER, &entry.gerund];
    for (role, noun) in &frame.fillers {
        if let Some(noun) = noun {
            tokens.push(role.as_str());
            tokens.extend(noun.words());
        }
    }
    Ok(StructuredText { raw: tokens.join(" "), tokens: tokens.into_iter().map(str::to_owned).collect() })
}

fn resolve_gerund<'a>(lexicon: &'a Lexicon, token: &str, index: usize) -> Result<&'a VerbEntry, ParseError> {
    match lexicon.verbs_for_gerund(token) {
        [] => Err(ParseError::UnknownGerund { token: token.to_owned(), index }),
        [one] => Ok(lexicon.get(one).expect("gerund index points at lexicon entries")),
        many => Err(ParseError::AmbiguousGerund { token: token.to_owned(), index, verbs: many.to_vec() }),
    }
}

enum Cursor {
    Start,
    Role { slot: usize, index: usize },
    Discard,
}

/// Parses structured text back into a frame. Roles absent from the text are
/// empty. See [`ParseMode`] for how malformed input is treated.
pub fn parse_frame(
    text: &StructuredText,
    lexicon: &Lexicon,
    mode: ParseMode,
) -> Result<(SemanticFrame, ParseDiagnostics), ParseError> {
    let tokens = text.tokens();
    let tolerant = mode == ParseMode::Tolerant;
    let mut diag = ParseDiagnostics::default();

    let first = tokens.first().ok_or(ParseError::NoVerbMarker)?;
    let (entry, body_start) = if first == VERB_MARKER {
        let surface = tokens.get(1).map(String::as_str).unwrap_or("");
        (resolve_gerund(lexicon, surface, 1)?, 2)
    } else if tolerant && !lexicon.verbs_for_gerund(first).is_empty() {
        let entry = resolve_gerund(lexicon, first, 0)?;
        diag.push(IssueKind::MissingVerbMarker, 0, "inserted missing VERB marker".into());
        (entry, 1)
    } else {
        return Err(ParseError::NoVerbMarker);
    };

    let mut words: Vec<Option<Vec<String>>> = vec![None; entry.roles.len()];
    let mut cursor = Cursor::Start;

    let close = |cursor: &Cursor, words: &mut [Option<Vec<String>>], diag: &mut ParseDiagnostics| {
        if let Cursor::Role { slot, index } = *cursor {
            if words[slot].as_ref().is_some_and(Vec::is_empty) {
                let role = entry.roles[slot].to_string();
                if !tolerant {
                    return Err(ParseError::RoleWithoutNoun { token: role, index });
                }
                diag.push(IssueKind::RoleWithoutNoun, index, format!("role {role} has no noun; left empty"));
            }
        }
        Ok(())
    };

    for (index, token) in tokens.iter().enumerate().skip(body_start) {
        if is_role_token(token) {
            match entry.roles.iter().position(|r| r.as_str() == token) {
                Some(slot) if words[slot].is_some() => {
                    if !tolerant {
                        return Err(ParseError::DuplicateRole { token: token.clone(), index });
                    }
                    close(&cursor, &mut words, &mut diag)?;
                    diag.push(IssueKind::DuplicateRole, index, format!("role {token} repeated; kept first"));
                    cursor = Cursor::Discard;
                }
                Some(slot) => {
                    close(&cursor, &mut words, &mut diag)?;
                    words[slot] = Some(Vec::new());
                    cursor = Cursor::Role { slot, index };
                }
                None => {
                    if !tolerant {
                        return Err(ParseError::UnknownRole { token: token.clone(), index });
                    }
                    match cursor {
                        Cursor::Role { slot, .. } => {
                            words[slot].get_or_insert_with(Vec::new).push(token.to_lowercase());
                            diag.push(IssueKind::UnknownRole, index, format!("{token} is not a role; read as noun"));
                        }
                        _ => diag.push(IssueKind::UnknownRole, index, format!("{token} is not a role; dropped")),
                    }
                }
            }
            continue;
        }

        let word = if token.chars().any(char::is_uppercase) {
            if !tolerant {
                return Err(ParseError::InvalidNoun { token: token.clone(), index });
            }
            diag.push(IssueKind::NounCase, index, format!("lowercased {token:?}"));
            token.to_lowercase()
        } else {
            token.clone()
        };
        match cursor {
            Cursor::Role { slot, .. } => words[slot].get_or_insert_with(Vec::new).push(word),
            Cursor::Discard => {}
            Cursor::Start => {
                if !tolerant {
                    return Err(ParseError::StrayToken { token: token.clone(), index });
                }
                diag.push(IssueKind::StrayToken, index, format!("{token:?} precedes any role; dropped"));
            }
        }
    }
    close(&cursor, &mut words, &mut diag)?;

    let fillers = entry
        .roles
        .iter()
        .zip(words)
        .map(|(role, w)| {
            let noun = w.filter(|w| !w.is_empty()).map(|w| Noun::new(w.join(" ")).expect("words are lowercase tokens"));
            (role.clone(), noun)
        })
        .collect();
    Ok((SemanticFrame::new(entry.verb_id.clone(), fillers), diag))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HhiError {
    #[error("slot {slot} occurs {count} times")]
    DuplicateSlot { slot: &'static str, count: usize },
}

impl HhiError {
    pub fn code(&self) -> &'static str {
        "duplicate-slot"
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct HhiDiagnostics {
    /// Slot token and the index of the token that contains it.
    pub slots: Vec<(String, usize)>,
    pub notes: Vec<String>,
}

/// HHI text is carried verbatim, in canonical whitespace.
pub fn serialize_hhi(annotation: &HhiAnnotation) -> StructuredText {
    StructuredText::new(&annotation.text)
}

pub fn parse_hhi(text: &StructuredText) -> Result<(HhiAnnotation, HhiDiagnostics), HhiError> {
    let mut diag = HhiDiagnostics::default();
    for slot in HHI_SLOTS {
        let count = text.as_str().matches(slot).count();
        if count > 1 {
            return Err(HhiError::DuplicateSlot { slot, count });
        }
        if count == 1 {
            let index = text.tokens().iter().position(|t| t.contains(slot)).expect("slot found in text");
            diag.slots.push((slot.to_owned(), index));
        }
    }
    if diag.slots.is_empty() {
        diag.notes.push("no slots".to_owned());
    }
    let annotation = HhiAnnotation { text: text.as_str().to_owned(), participants: diag.slots.len() };
    Ok((annotation, diag))
}
