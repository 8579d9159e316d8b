//! Verbs, roles, nouns, boxes and HOI classes, plus the lexicon that keeps
//! structured text unambiguous.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::structparse::gerund;

/// Token that opens every structured frame string. Never valid as a role.
pub const VERB_MARKER: &str = "VERB";

/// HOI classes with fewer training instances than this are "rare".
pub const RARE_THRESHOLD: u64 = 10;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Json { line: usize, column: usize, message: String },
    #[error("role not uppercase: {0:?}")]
    RoleNotUppercase(String),
    #[error("role name {0:?} is reserved")]
    ReservedRole(String),
    #[error("verb {verb:?} lists role {role} more than once")]
    DuplicateRole { verb: String, role: String },
    #[error("duplicate verb {0:?}")]
    DuplicateVerb(String),
    #[error("invalid verb id {0:?}")]
    InvalidVerb(String),
    #[error("invalid gerund {gerund:?} for verb {verb:?}")]
    InvalidGerund { verb: String, gerund: String },
    #[error("gerund {gerund:?} is shared by verbs {verbs:?}; give them distinct gerunds")]
    GerundCollision { gerund: String, verbs: Vec<String> },
    #[error("invalid noun {0:?}: nouns are lowercase words separated by single spaces")]
    InvalidNoun(String),
    #[error("invalid box [{0}, {1}, {2}, {3}]: need finite 0 <= x1 < x2 and 0 <= y1 < y2")]
    InvalidBox(f64, f64, f64, f64),
    #[error("role {0} has a box but no noun")]
    BoxWithoutNoun(String),
    #[error("box given for role {0} which is not in the frame")]
    BoxForUnknownRole(String),
    #[error("frame lists role {0} more than once")]
    RepeatedFiller(String),
    #[error("HOI catalog is empty")]
    EmptyCatalog,
    #[error("HOI class {0} appears more than once in the catalog")]
    DuplicateHoiClass(String),
}

impl FrameError {
    fn from_json(err: serde_json::Error) -> Self {
        FrameError::Json { line: err.line(), column: err.column(), message: err.to_string() }
    }
}

/// True iff every character is an ASCII capital letter (and there is at least one).
pub fn is_role_token(token: &str) -> bool {
    !token.is_empty() && token.bytes().all(|b| b.is_ascii_uppercase())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct RoleName(String);

impl RoleName {
    pub fn new(name: impl Into<String>) -> Result<Self, FrameError> {
        let name = name.into();
        if !is_role_token(&name) {
            return Err(FrameError::RoleNotUppercase(name));
        }
        if name == VERB_MARKER {
            return Err(FrameError::ReservedRole(name));
        }
        Ok(RoleName(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RoleName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for RoleName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        RoleName::new(s).map_err(serde::de::Error::custom)
    }
}

/// A noun filler: one or more lowercase words joined by single spaces.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct Noun(String);

impl Noun {
    pub fn new(text: impl Into<String>) -> Result<Self, FrameError> {
        let text = text.into();
        let well_formed = !text.is_empty()
            && text.split(' ').all(|w| !w.is_empty() && w.chars().all(|c| !c.is_whitespace()))
            && !text.chars().any(|c| c.is_uppercase());
        if well_formed {
            Ok(Noun(text))
        } else {
            Err(FrameError::InvalidNoun(text))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.0.split(' ')
    }
}

impl fmt::Display for Noun {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Noun {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Noun::new(s).map_err(serde::de::Error::custom)
    }
}

/// Hook for importers that carry nouns in another form (synset ids, mixed
/// case labels). Returns `None` when the raw value maps to the empty role.
pub trait NounNormalizer {
    fn normalize(&self, raw: &str) -> Option<Noun>;
}

/// Lowercases and collapses whitespace. Blank input maps to `None`.
#[derive(Debug, Default, Clone, Copy)]
pub struct LowercaseNormalizer;

impl NounNormalizer for LowercaseNormalizer {
    fn normalize(&self, raw: &str) -> Option<Noun> {
        let joined = raw.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ");
        Noun::new(joined).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerbEntry {
    pub verb_id: String,
    pub lemma: String,
    pub gerund: String,
    pub roles: Vec<RoleName>,
}

impl VerbEntry {
    /// Builds an entry, inflecting the gerund from the lemma when not given.
    pub fn new(
        verb: impl Into<String>,
        gerund_override: Option<String>,
        roles: Vec<RoleName>,
    ) -> Result<Self, FrameError> {
        let verb = verb.into();
        if verb.is_empty() || verb.chars().any(char::is_whitespace) {
            return Err(FrameError::InvalidVerb(verb));
        }
        let surface = gerund_override.unwrap_or_else(|| gerund(&verb));
        if surface.is_empty()
            || surface.chars().any(char::is_whitespace)
            || surface.chars().any(char::is_uppercase)
        {
            return Err(FrameError::InvalidGerund { verb, gerund: surface });
        }
        let mut seen = BTreeSet::new();
        for role in &roles {
            if !seen.insert(role.clone()) {
                return Err(FrameError::DuplicateRole { verb, role: role.to_string() });
            }
        }
        Ok(VerbEntry { verb_id: verb.clone(), lemma: verb, gerund: surface, roles })
    }

    pub fn has_role(&self, role: &str) -> bool {
        self.roles.iter().any(|r| r.as_str() == role)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LexiconRow {
    verb: String,
    #[serde(default)]
    gerund: Option<String>,
    roles: Vec<String>,
}

/// Verb schemas keyed by verb id, with a reverse gerund index.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: IndexMap<String, VerbEntry>,
    by_gerund: HashMap<String, Vec<String>>,
}

impl Lexicon {
    /// Builds a lexicon, rejecting duplicate verbs and gerund collisions.
    pub fn from_entries(entries: Vec<VerbEntry>) -> Result<Self, FrameError> {
        let lexicon = Self::from_entries_allowing_collisions(entries)?;
        let mut collisions: Vec<_> =
            lexicon.by_gerund.iter().filter(|(_, verbs)| verbs.len() > 1).collect();
        collisions.sort();
        if let Some((g, verbs)) = collisions.first() {
            return Err(FrameError::GerundCollision { gerund: (*g).clone(), verbs: (*verbs).clone() });
        }
        Ok(lexicon)
    }

    /// Like [`Lexicon::from_entries`] but keeps colliding gerunds; parsing
    /// such a gerund then reports an ambiguous-gerund error.
    pub fn from_entries_allowing_collisions(entries: Vec<VerbEntry>) -> Result<Self, FrameError> {
        let mut map = IndexMap::with_capacity(entries.len());
        let mut by_gerund: HashMap<String, Vec<String>> = HashMap::new();
        for entry in entries {
            if map.contains_key(&entry.verb_id) {
                return Err(FrameError::DuplicateVerb(entry.verb_id));
            }
            by_gerund.entry(entry.gerund.clone()).or_default().push(entry.verb_id.clone());
            map.insert(entry.verb_id.clone(), entry);
        }
        Ok(Lexicon { entries: map, by_gerund })
    }

    pub fn from_json_str(text: &str) -> Result<Self, FrameError> {
        let rows: Vec<LexiconRow> = serde_json::from_str(text).map_err(FrameError::from_json)?;
        let mut entries = Vec::with_capacity(rows.len());
        for row in rows {
            let roles = row.roles.into_iter().map(RoleName::new).collect::<Result<Vec<_>, _>>()?;
            entries.push(VerbEntry::new(row.verb, row.gerund, roles)?);
        }
        Self::from_entries(entries)
    }

    pub fn to_json_string(&self) -> String {
        let rows: Vec<serde_json::Value> = self
            .entries
            .values()
            .map(|e| {
                serde_json::json!({
                    "verb": e.verb_id,
                    "gerund": e.gerund,
                    "roles": e.roles.iter().map(RoleName::as_str).collect::<Vec<_>>(),
                })
            })
            .collect();
        serde_json::to_string_pretty(&rows).expect("lexicon rows serialize")
    }

    pub fn get(&self, verb: &str) -> Option<&VerbEntry> {
        self.entries.get(verb)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &VerbEntry> {
        self.entries.values()
    }

    /// Verb ids whose gerund is `surface` (empty when unknown).
    pub fn verbs_for_gerund(&self, surface: &str) -> &[String] {
        self.by_gerund.get(surface).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Reads and validates a lexicon file (JSON array of `{verb, gerund?, roles}`).
pub fn load_lexicon(path: impl AsRef<Path>) -> Result<Lexicon, FrameError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| FrameError::Io { path: path.display().to_string(), source })?;
    Lexicon::from_json_str(&text)
}

/// A verb with its roles in schema order; `None` is the empty filler.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "FrameRepr", into = "FrameRepr")]
pub struct SemanticFrame {
    pub verb: String,
    pub fillers: Vec<(RoleName, Option<Noun>)>,
}

#[derive(Serialize, Deserialize)]
struct FrameRepr {
    verb: String,
    roles: IndexMap<RoleName, Option<Noun>>,
}

impl TryFrom<FrameRepr> for SemanticFrame {
    type Error = FrameError;
    fn try_from(r: FrameRepr) -> Result<Self, FrameError> {
        Ok(SemanticFrame { verb: r.verb, fillers: r.roles.into_iter().collect() })
    }
}

impl From<SemanticFrame> for FrameRepr {
    fn from(f: SemanticFrame) -> Self {
        FrameRepr { verb: f.verb, roles: f.fillers.into_iter().collect() }
    }
}

impl SemanticFrame {
    pub fn new(verb: impl Into<String>, fillers: Vec<(RoleName, Option<Noun>)>) -> Self {
        SemanticFrame { verb: verb.into(), fillers }
    }

    /// Frame for `entry` with every role empty.
    pub fn empty(entry: &VerbEntry) -> Self {
        SemanticFrame {
            verb: entry.verb_id.clone(),
            fillers: entry.roles.iter().map(|r| (r.clone(), None)).collect(),
        }
    }

    /// `None` if the role is absent from the frame, `Some(None)` if it is empty.
    pub fn filler(&self, role: &str) -> Option<Option<&Noun>> {
        self.fillers.iter().find(|(r, _)| r.as_str() == role).map(|(_, n)| n.as_ref())
    }

    pub fn roles(&self) -> impl Iterator<Item = &RoleName> {
        self.fillers.iter().map(|(r, _)| r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameViolation {
    UnknownVerb(String),
    MissingRole(RoleName),
    ExtraneousRole(RoleName),
    RepeatedRole(RoleName),
    RoleOrder { expected: Vec<RoleName>, found: Vec<RoleName> },
}

impl fmt::Display for FrameViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameViolation::UnknownVerb(v) => write!(f, "unknown verb {v}"),
            FrameViolation::MissingRole(r) => write!(f, "missing role {r}"),
            FrameViolation::ExtraneousRole(r) => write!(f, "extraneous role {r}"),
            FrameViolation::RepeatedRole(r) => write!(f, "repeated role {r}"),
            FrameViolation::RoleOrder { expected, found } => {
                let join = |rs: &[RoleName]| rs.iter().map(RoleName::as_str).collect::<Vec<_>>().join(" ");
                write!(f, "role order {} differs from schema order {}", join(found), join(expected))
            }
        }
    }
}

/// Checks the frame's role keys against its verb's schema. Empty result means
/// the keys equal the schema exactly, in order.
pub fn validate_frame(frame: &SemanticFrame, lexicon: &Lexicon) -> Vec<FrameViolation> {
    let Some(entry) = lexicon.get(&frame.verb) else {
        return vec![FrameViolation::UnknownVerb(frame.verb.clone())];
    };
    let mut violations = Vec::new();
    let mut seen = BTreeSet::new();
    for role in frame.roles() {
        if !seen.insert(role) {
            violations.push(FrameViolation::RepeatedRole(role.clone()));
        } else if !entry.roles.contains(role) {
            violations.push(FrameViolation::ExtraneousRole(role.clone()));
        }
    }
    for role in &entry.roles {
        if !seen.contains(role) {
            violations.push(FrameViolation::MissingRole(role.clone()));
        }
    }
    if violations.is_empty() {
        let found: Vec<RoleName> = frame.roles().cloned().collect();
        if found != entry.roles {
            violations.push(FrameViolation::RoleOrder { expected: entry.roles.clone(), found });
        }
    }
    violations
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, FrameError> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if finite && x1 >= 0.0 && y1 >= 0.0 && x1 < x2 && y1 < y2 {
            Ok(BoundingBox { x1, y1, x2, y2 })
        } else {
            Err(FrameError::InvalidBox(x1, y1, x2, y2))
        }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = FrameError;
    fn try_from(c: [f64; 4]) -> Result<Self, FrameError> {
        BoundingBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.coords()
    }
}

/// A semantic frame with an optional box per filled role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GroundedRepr", into = "GroundedRepr")]
pub struct GroundedFrame {
    frame: SemanticFrame,
    boxes: IndexMap<RoleName, BoundingBox>,
}

#[derive(Serialize, Deserialize)]
struct GroundedRepr {
    verb: String,
    roles: IndexMap<RoleName, Option<Noun>>,
    #[serde(default)]
    boxes: IndexMap<RoleName, Option<BoundingBox>>,
}

impl TryFrom<GroundedRepr> for GroundedFrame {
    type Error = FrameError;
    fn try_from(r: GroundedRepr) -> Result<Self, FrameError> {
        let frame = SemanticFrame { verb: r.verb, fillers: r.roles.into_iter().collect() };
        let boxes = r.boxes.into_iter().filter_map(|(role, b)| b.map(|b| (role, b))).collect();
        GroundedFrame::new(frame, boxes)
    }
}

impl From<GroundedFrame> for GroundedRepr {
    fn from(g: GroundedFrame) -> Self {
        let boxes = g.frame.roles().map(|r| (r.clone(), g.boxes.get(r).copied())).collect();
        GroundedRepr { verb: g.frame.verb, roles: g.frame.fillers.into_iter().collect(), boxes }
    }
}

impl GroundedFrame {
    /// Boxes are allowed only for roles present in the frame with a noun.
    pub fn new(frame: SemanticFrame, boxes: IndexMap<RoleName, BoundingBox>) -> Result<Self, FrameError> {
        for role in boxes.keys() {
            match frame.filler(role.as_str()) {
                None => return Err(FrameError::BoxForUnknownRole(role.to_string())),
                Some(None) => return Err(FrameError::BoxWithoutNoun(role.to_string())),
                Some(Some(_)) => {}
            }
        }
        Ok(GroundedFrame { frame, boxes })
    }

    pub fn ungrounded(frame: SemanticFrame) -> Self {
        GroundedFrame { frame, boxes: IndexMap::new() }
    }

    pub fn frame(&self) -> &SemanticFrame {
        &self.frame
    }

    pub fn box_for(&self, role: &str) -> Option<&BoundingBox> {
        self.boxes.iter().find(|(r, _)| r.as_str() == role).map(|(_, b)| b)
    }
}

/// An (object, action) interaction class.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HoiClass {
    pub object: String,
    pub action: String,
}

impl HoiClass {
    pub fn new(object: impl Into<String>, action: impl Into<String>) -> Self {
        HoiClass { object: object.into(), action: action.into() }
    }
}

impl fmt::Display for HoiClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.object, self.action)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiDetection {
    #[serde(rename = "human")]
    pub human_box: BoundingBox,
    #[serde(rename = "object_box")]
    pub object_box: BoundingBox,
    #[serde(flatten)]
    pub hoi_class: HoiClass,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoiCatalogEntry {
    #[serde(flatten)]
    pub class: HoiClass,
    pub train_count: u64,
}

#[derive(Debug, Clone)]
pub struct HoiCatalog {
    entries: Vec<HoiCatalogEntry>,
    index: HashMap<HoiClass, usize>,
}

/// Class indices into a catalog, split by training frequency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HoiSplits {
    pub full: BTreeSet<usize>,
    pub rare: BTreeSet<usize>,
    pub nonrare: BTreeSet<usize>,
}

impl HoiCatalog {
    pub fn new(entries: Vec<HoiCatalogEntry>) -> Result<Self, FrameError> {
        if entries.is_empty() {
            return Err(FrameError::EmptyCatalog);
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.class.clone(), i).is_some() {
                return Err(FrameError::DuplicateHoiClass(e.class.to_string()));
            }
        }
        Ok(HoiCatalog { entries, index })
    }

    pub fn from_json_str(text: &str) -> Result<Self, FrameError> {
        let entries: Vec<HoiCatalogEntry> = serde_json::from_str(text).map_err(FrameError::from_json)?;
        Self::new(entries)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("catalog serializes")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[HoiCatalogEntry] {
        &self.entries
    }

    pub fn index_of(&self, class: &HoiClass) -> Option<usize> {
        self.index.get(class).copied()
    }

    pub fn class(&self, index: usize) -> &HoiClass {
        &self.entries[index].class
    }
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<HoiCatalog, FrameError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| FrameError::Io { path: path.display().to_string(), source })?;
    HoiCatalog::from_json_str(&text)
}

/// Partitions catalog classes into rare (`train_count < 10`) and non-rare.
pub fn hoi_splits(catalog: &HoiCatalog) -> HoiSplits {
    let mut splits =
        HoiSplits { full: BTreeSet::new(), rare: BTreeSet::new(), nonrare: BTreeSet::new() };
    for (i, e) in catalog.entries.iter().enumerate() {
        splits.full.insert(i);
        if e.train_count < RARE_THRESHOLD {
            splits.rare.insert(i);
        } else {
            splits.nonrare.insert(i);
        }
    }
    splits
}

/// Free-text interaction with participant slot tokens `[P1]`, `[P2]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HhiAnnotation {
    pub text: String,
    pub participants: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn role(s: &str) -> RoleName {
        RoleName::new(s).unwrap()
    }

    fn slice_lexicon() -> Lexicon {
        Lexicon::from_json_str(r#"[{"verb": "slice", "gerund": "slicing", "roles": ["AGENT", "ITEM", "TOOL", "PLACE"]}]"#)
            .unwrap()
    }

    fn slice_frame() -> SemanticFrame {
        SemanticFrame::new(
            "slice",
            vec![
                (role("AGENT"), Some(Noun::new("person").unwrap())),
                (role("ITEM"), None),
                (role("TOOL"), Some(Noun::new("knife").unwrap())),
                (role("PLACE"), Some(Noun::new("table").unwrap())),
            ],
        )
    }

    #[test]
    fn loads_single_entry() {
        let lex = slice_lexicon();
        assert_eq!(lex.len(), 1);
        assert_eq!(lex.get("slice").unwrap().gerund, "slicing");
    }

    #[test]
    fn gerund_is_inflected_when_absent() {
        let lex = Lexicon::from_json_str(r#"[{"verb": "run", "roles": ["AGENT"]}]"#).unwrap();
        assert_eq!(lex.get("run").unwrap().gerund, "running");
    }

    #[test]
    fn rejects_mixed_case_role() {
        let err = Lexicon::from_json_str(r#"[{"verb": "slice", "roles": ["Agent"]}]"#).unwrap_err();
        assert!(matches!(err, FrameError::RoleNotUppercase(_)));
        assert!(err.to_string().contains("role not uppercase"));
    }

    #[test]
    fn rejects_duplicate_verbs_and_roles() {
        let err = Lexicon::from_json_str(
            r#"[{"verb": "eat", "roles": ["AGENT"]}, {"verb": "eat", "roles": ["FOOD"]}]"#,
        )
        .unwrap_err();
        assert!(matches!(err, FrameError::DuplicateVerb(v) if v == "eat"));
        let err = Lexicon::from_json_str(r#"[{"verb": "eat", "roles": ["AGENT", "AGENT"]}]"#).unwrap_err();
        assert!(matches!(err, FrameError::DuplicateRole { .. }));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = Lexicon::from_json_str("[\n{\"verb\": \"eat\",\n \"roles\": [\"AGENT\"\n}]").unwrap_err();
        match err {
            FrameError::Json { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_gerund_collisions_unless_allowed() {
        let rows = r#"[{"verb": "lie", "roles": ["AGENT"]}, {"verb": "lye", "gerund": "lying", "roles": ["AGENT"]}]"#;
        assert!(matches!(Lexicon::from_json_str(rows), Err(FrameError::GerundCollision { .. })));
        let entries = vec![
            VerbEntry::new("lie", None, vec![role("AGENT")]).unwrap(),
            VerbEntry::new("lye", Some("lying".into()), vec![role("AGENT")]).unwrap(),
        ];
        let lex = Lexicon::from_entries_allowing_collisions(entries).unwrap();
        assert_eq!(lex.verbs_for_gerund("lying").len(), 2);
    }

    #[test]
    fn verb_marker_is_not_a_role() {
        assert!(matches!(RoleName::new("VERB"), Err(FrameError::ReservedRole(_))));
        assert!(RoleName::new("AGENT2").is_err());
        assert!(RoleName::new("").is_err());
    }

    #[test]
    fn validate_accepts_schema_match() {
        assert!(validate_frame(&slice_frame(), &slice_lexicon()).is_empty());
    }

    #[test]
    fn validate_reports_missing_role() {
        let mut f = slice_frame();
        f.fillers.retain(|(r, _)| r.as_str() != "TOOL");
        let v = validate_frame(&f, &slice_lexicon());
        assert_eq!(v, vec![FrameViolation::MissingRole(role("TOOL"))]);
        assert_eq!(v[0].to_string(), "missing role TOOL");
    }

    #[test]
    fn validate_reports_unknown_verb_and_extra_role() {
        let mut f = slice_frame();
        f.verb = "fly".into();
        let v = validate_frame(&f, &slice_lexicon());
        assert_eq!(v[0].to_string(), "unknown verb fly");

        let mut f = slice_frame();
        f.fillers.push((role("VEHICLE"), None));
        assert_eq!(validate_frame(&f, &slice_lexicon()), vec![FrameViolation::ExtraneousRole(role("VEHICLE"))]);
    }

    #[test]
    fn validate_enforces_schema_order() {
        let mut f = slice_frame();
        f.fillers.swap(0, 1);
        assert!(matches!(validate_frame(&f, &slice_lexicon())[..], [FrameViolation::RoleOrder { .. }]));
    }

    #[test]
    fn frame_json_keeps_role_order_and_nulls() {
        let f = slice_frame();
        let json = serde_json::to_string(&f).unwrap();
        assert_eq!(
            json,
            r#"{"verb":"slice","roles":{"AGENT":"person","ITEM":null,"TOOL":"knife","PLACE":"table"}}"#
        );
        let back: SemanticFrame = serde_json::from_str(&json).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn nouns_must_be_lowercase_words() {
        assert!(Noun::new("old man").is_ok());
        assert!(Noun::new("agent smith").is_ok());
        for bad in ["", "Man", "old  man", " man", "man ", "old\tman"] {
            assert!(Noun::new(bad).is_err(), "{bad:?}");
        }
        assert_eq!(LowercaseNormalizer.normalize("  Old   MAN ").unwrap().as_str(), "old man");
        assert!(LowercaseNormalizer.normalize("   ").is_none());
    }

    #[test]
    fn box_construction_rejects_degenerate_inputs() {
        let mut rng = SplitMix64::new(11);
        for _ in 0..1000 {
            let x1 = rng.uniform(0.0, 500.0);
            let y1 = rng.uniform(0.0, 500.0);
            // x2 <= x1 or y2 <= y1
            let (x2, y2) = if rng.bernoulli(0.5) {
                (x1 - rng.uniform(0.0, 10.0), y1 + rng.uniform(1.0, 10.0))
            } else {
                (x1 + rng.uniform(1.0, 10.0), y1 - rng.uniform(0.0, 10.0))
            };
            assert!(BoundingBox::new(x1, y1, x2, y2).is_err());
        }
        assert!(BoundingBox::new(-1.0, 0.0, 1.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn grounded_frame_requires_noun_for_box() {
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let mut boxes = IndexMap::new();
        boxes.insert(role("ITEM"), b);
        assert!(matches!(GroundedFrame::new(slice_frame(), boxes), Err(FrameError::BoxWithoutNoun(_))));
        let mut boxes = IndexMap::new();
        boxes.insert(role("VEHICLE"), b);
        assert!(matches!(GroundedFrame::new(slice_frame(), boxes), Err(FrameError::BoxForUnknownRole(_))));
        let mut boxes = IndexMap::new();
        boxes.insert(role("AGENT"), b);
        let g = GroundedFrame::new(slice_frame(), boxes).unwrap();
        let json = serde_json::to_string(&g).unwrap();
        let back: GroundedFrame = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
        assert!(serde_json::from_str::<GroundedFrame>(
            r#"{"verb":"slice","roles":{"AGENT":null},"boxes":{"AGENT":[0,0,5,5]}}"#
        )
        .is_err());
    }

    fn catalog(counts: &[u64]) -> HoiCatalog {
        HoiCatalog::new(
            counts
                .iter()
                .enumerate()
                .map(|(i, &c)| HoiCatalogEntry { class: HoiClass::new(format!("o{i}"), "a"), train_count: c })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn splits_follow_count_rule() {
        let s = hoi_splits(&catalog(&[3, 10, 9, 250]));
        assert_eq!(s.rare, BTreeSet::from([0, 2]));
        assert_eq!(s.nonrare, BTreeSet::from([1, 3]));
        let s = hoi_splits(&catalog(&[0, 0, 0]));
        assert_eq!(s.rare, s.full);
        assert!(s.nonrare.is_empty());
        let s = hoi_splits(&catalog(&[10, 11, 5000]));
        assert!(s.rare.is_empty());
    }

    #[test]
    fn catalog_rejects_duplicates_and_empty() {
        assert!(matches!(HoiCatalog::new(vec![]), Err(FrameError::EmptyCatalog)));
        let e = HoiCatalogEntry { class: HoiClass::new("cup", "hold"), train_count: 1 };
        assert!(HoiCatalog::new(vec![e.clone(), e]).is_err());
        let c = HoiCatalog::from_json_str(r#"[{"object":"cup","action":"hold","train_count":4}]"#).unwrap();
        assert_eq!(c.index_of(&HoiClass::new("cup", "hold")), Some(0));
    }

    proptest::proptest! {
        #[test]
        fn splits_partition_random_catalogs(counts in proptest::collection::vec(0u64..30, 1..60)) {
            let s = hoi_splits(&catalog(&counts));
            proptest::prop_assert_eq!(s.rare.len() + s.nonrare.len(), s.full.len());
            proptest::prop_assert!(s.rare.is_disjoint(&s.nonrare));
        }
    }
}
