//! Semantic frames as structured text, attention feature augmentation, and an
//! evaluation engine for situation recognition (SiR), grounded situation
//! recognition (GSR), human-object interaction (HOI) and human-human
//! interaction (HHI) tasks.
//!
//! The crate is organised bottom-up:
//!
//! - [`frames`]: verbs, roles, nouns, boxes, HOI catalogs and the lexicon.
//! - [`structparse`]: `VERB <gerund> ROLE noun ...` serialization and parsing.
//! - [`toylm`]: a desk-scale image-conditioned decoder with LoRA adapters.
//! - [`augment`]: projection, token-axis concatenation and multi-head attention.
//! - [`metrics`]: verb/value/value-all, grounded variants, HOI mAP, HHI scorers.
//! - [`probe`]: linear probing and correlation analysis.
//! - [`synthworld`]: a seeded synthetic world feeding every pipeline.
//! - [`cli`]: the `dynoframe` command-line front end.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iterators otherwise.

pub mod augment;
pub mod cli;
pub mod frames;
pub mod io;
pub mod metrics;
pub mod par;
pub mod probe;
pub mod rng;
pub mod structparse;
pub mod synthworld;
pub mod toylm;

pub use frames::{
    BoundingBox, GroundedFrame, HhiAnnotation, HoiCatalog, HoiClass, HoiDetection, Lexicon, Noun,
    RoleName, SemanticFrame, VerbEntry,
};
pub use structparse::{parse_frame, serialize_frame, ParseMode, StructuredText};
