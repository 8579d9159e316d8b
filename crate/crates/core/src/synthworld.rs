//! Seeded synthetic world: frames, linear "image" embeddings, grounded boxes
//! and HOI scenes.
//!
//! Every sample is a pure function of `(world seed, stream, index)`, so items
//! can be generated in any order or in parallel and still come out identical.

use std::collections::{BTreeSet, HashMap};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{
    BoundingBox, FrameError, GroundedFrame, HoiCatalog, HoiCatalogEntry, HoiClass, HoiDetection, Lexicon, Noun,
    RoleName, SemanticFrame, VerbEntry,
};
use crate::metrics::{iou, HoiGroundTruth, HoiImageDetections, HoiImageGroundTruth};
use crate::rng::SplitMix64;

pub const STREAM_CODEBOOK: u64 = 0;
pub const STREAM_FRAME: u64 = 1;
pub const STREAM_GROUNDED: u64 = 2;
pub const STREAM_HOI: u64 = 3;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world: {0}")]
    Invalid(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("frame does not belong to this world: {0}")]
    ForeignFrame(String),
}

/// A verb and, per role in order, the nouns that may fill it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldVerb {
    pub verb: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gerund: Option<String>,
    pub roles: IndexMap<String, Vec<String>>,
}

/// Prediction noise for grounded samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundingNoise {
    /// Each box corner moves by `U(-jitter, jitter)` pixels.
    pub jitter: f64,
    /// Chance that a role's predicted noun is wrong.
    pub flip_prob: f64,
    /// Chance that the top prediction names another verb.
    pub verb_flip_prob: f64,
}

impl Default for GroundingNoise {
    fn default() -> Self {
        GroundingNoise { jitter: 5.0, flip_prob: 0.1, verb_flip_prob: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HoiSceneSpec {
    pub min_pairs: usize,
    pub max_pairs: usize,
    pub jitter: f64,
    pub distractors: usize,
    /// Emit a detection for every GT pair.
    pub detect_truth: bool,
}

impl Default for HoiSceneSpec {
    fn default() -> Self {
        HoiSceneSpec { min_pairs: 1, max_pairs: 3, jitter: 2.0, distractors: 2, detect_truth: true }
    }
}

fn default_dim() -> usize {
    64
}
fn default_sigma() -> f64 {
    0.05
}
fn default_empty_prob() -> f64 {
    0.2
}
fn default_canvas() -> f64 {
    1000.0
}
fn default_min_side() -> f64 {
    20.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_empty_prob")]
    pub empty_prob: f64,
    #[serde(default = "default_canvas")]
    pub canvas: f64,
    #[serde(default = "default_min_side")]
    pub min_box_side: f64,
    pub verbs: Vec<WorldVerb>,
    #[serde(default)]
    pub hoi: Vec<HoiCatalogEntry>,
    #[serde(default)]
    pub grounding: GroundingNoise,
    #[serde(default)]
    pub hoi_scene: HoiSceneSpec,
}

fn verb(name: &str, roles: &[(&str, &[&str])]) -> WorldVerb {
    WorldVerb {
        verb: name.to_string(),
        gerund: None,
        roles: roles.iter().map(|(r, ns)| (r.to_string(), ns.iter().map(|n| n.to_string()).collect())).collect(),
    }
}

impl WorldSpec {
    /// A small kitchen-and-street world with eight verbs and twelve HOI classes.
    pub fn demo(seed: u64) -> Self {
        let people: &[&str] = &["person", "man", "woman", "child"];
        let verbs = vec![
            verb("slice", &[("AGENT", people), ("ITEM", &["bread", "tomato", "cake"]), ("TOOL", &["knife", "saw"]), ("PLACE", &["table", "kitchen"])]),
            verb("ride", &[("AGENT", people), ("VEHICLE", &["bicycle", "horse", "skateboard"]), ("PLACE", &["street", "park", "beach"])]),
            verb("drink", &[("AGENT", people), ("LIQUID", &["water", "coffee", "milk"]), ("CONTAINER", &["cup", "bottle", "glass"])]),
            verb("throw", &[("AGENT", people), ("ITEM", &["ball", "frisbee", "stone"]), ("DESTINATION", &["dog", "river", "field"])]),
            verb("read", &[("AGENT", people), ("ITEM", &["book", "newspaper", "letter"]), ("PLACE", &["library", "park", "bed"])]),
            verb("paint", &[("AGENT", people), ("ITEM", &["wall", "fence", "canvas"]), ("TOOL", &["brush", "roller"])]),
            verb("feed", &[("AGENT", people), ("FEEDEE", &["dog", "cat", "baby", "bird"]), ("FOOD", &["bread", "milk", "seed"])]),
            verb("tie", &[("AGENT", people), ("ITEM", &["shoe", "rope", "tie"]), ("PLACE", &["street", "boat"])]),
        ];
        let hoi = [
            ("knife", "hold", 40),
            ("knife", "cut_with", 25),
            ("bicycle", "ride", 60),
            ("bicycle", "push", 8),
            ("cup", "drink_with", 30),
            ("cup", "hold", 15),
            ("ball", "throw", 50),
            ("ball", "kick", 5),
            ("book", "read", 35),
            ("dog", "feed", 12),
            ("dog", "walk", 3),
            ("horse", "ride", 9),
        ]
        .into_iter()
        .map(|(o, a, n)| HoiCatalogEntry { class: HoiClass::new(o, a), train_count: n })
        .collect();
        WorldSpec {
            seed,
            dim: default_dim(),
            sigma: default_sigma(),
            empty_prob: default_empty_prob(),
            canvas: default_canvas(),
            min_box_side: default_min_side(),
            verbs,
            hoi,
            grounding: GroundingNoise::default(),
            hoi_scene: HoiSceneSpec::default(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self, WorldError> {
        serde_json::from_str(text).map_err(|e| WorldError::Invalid(e.to_string()))
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("world spec serializes");
        s.push('\n');
        s
    }
}

fn check_prob(name: &str, p: f64) -> Result<(), WorldError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(WorldError::Invalid(format!("{name} = {p} is not a probability")))
    }
}

/// A validated spec with its lexicon, noun pools, codebooks and catalog.
#[derive(Debug, Clone)]
pub struct World {
    spec: WorldSpec,
    lexicon: Lexicon,
    pools: Vec<Vec<Vec<Noun>>>,
    verb_codes: HashMap<String, Vec<f64>>,
    filler_codes: HashMap<(RoleName, Noun), Vec<f64>>,
    catalog: Option<HoiCatalog>,
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<Self, WorldError> {
        if spec.dim < 8 {
            return Err(WorldError::Invalid(format!("dim {} is below 8", spec.dim)));
        }
        if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
            return Err(WorldError::Invalid(format!("sigma {} must be a non-negative number", spec.sigma)));
        }
        check_prob("empty_prob", spec.empty_prob)?;
        check_prob("flip_prob", spec.grounding.flip_prob)?;
        check_prob("verb_flip_prob", spec.grounding.verb_flip_prob)?;
        if !(spec.min_box_side > 0.0 && spec.canvas >= 2.0 * spec.min_box_side) {
            return Err(WorldError::Invalid("canvas must fit two minimum-size boxes side by side".into()));
        }
        if spec.grounding.jitter < 0.0 || spec.hoi_scene.jitter < 0.0 {
            return Err(WorldError::Invalid("jitter must be non-negative".into()));
        }
        let hs = spec.hoi_scene;
        if hs.min_pairs > hs.max_pairs {
            return Err(WorldError::Invalid("hoi_scene.min_pairs exceeds max_pairs".into()));
        }
        if spec.verbs.is_empty() {
            return Err(WorldError::Invalid("world has no verbs".into()));
        }

        let mut entries = Vec::with_capacity(spec.verbs.len());
        let mut pools = Vec::with_capacity(spec.verbs.len());
        for v in &spec.verbs {
            let roles = v.roles.keys().map(RoleName::new).collect::<Result<Vec<_>, _>>()?;
            entries.push(VerbEntry::new(v.verb.clone(), v.gerund.clone(), roles)?);
            let mut verb_pools = Vec::with_capacity(v.roles.len());
            for (role, nouns) in &v.roles {
                if nouns.is_empty() {
                    return Err(WorldError::Invalid(format!("verb {} role {role} has no nouns", v.verb)));
                }
                let mut pool = Vec::with_capacity(nouns.len());
                for n in nouns {
                    let noun = Noun::new(n.as_str())?;
                    if pool.contains(&noun) {
                        return Err(WorldError::Invalid(format!("verb {} role {role} lists {n} twice", v.verb)));
                    }
                    pool.push(noun);
                }
                verb_pools.push(pool);
            }
            pools.push(verb_pools);
        }
        let lexicon = Lexicon::from_entries(entries)?;
        let catalog = if spec.hoi.is_empty() { None } else { Some(HoiCatalog::new(spec.hoi.clone())?) };

        let mut rng = SplitMix64::for_index(spec.seed, STREAM_CODEBOOK, 0);
        let mut unit = |dim: usize| {
            loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    return v.into_iter().map(|x| x / norm).collect::<Vec<f64>>();
                }
            }
        };
        let mut verb_codes = HashMap::new();
        for e in lexicon.iter() {
            verb_codes.insert(e.verb_id.clone(), unit(spec.dim));
        }
        let mut pairs = BTreeSet::new();
        for (e, verb_pools) in lexicon.iter().zip(&pools) {
            for (role, pool) in e.roles.iter().zip(verb_pools) {
                for noun in pool {
                    pairs.insert((role.clone(), noun.clone()));
                }
            }
        }
        let filler_codes = pairs.into_iter().map(|key| (key, unit(spec.dim))).collect();
        Ok(World { spec, lexicon, pools, verb_codes, filler_codes, catalog })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    /// `None` when the spec lists no HOI classes.
    pub fn catalog(&self) -> Option<&HoiCatalog> {
        self.catalog.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn verb_code(&self, verb: &str) -> Option<&[f64]> {
        self.verb_codes.get(verb).map(Vec::as_slice)
    }

    pub fn filler_code(&self, role: &RoleName, noun: &Noun) -> Option<&[f64]> {
        self.filler_codes.get(&(role.clone(), noun.clone())).map(Vec::as_slice)
    }

    /// Every noun that can fill `role` of the verb at lexicon position `verb`.
    pub fn pool(&self, verb: usize, role: usize) -> &[Noun] {
        &self.pools[verb][role]
    }

    /// Zero-padded id so that lexicographic order is index order.
    pub fn item_id(&self, index: usize, total: usize) -> String {
        let width = total.saturating_sub(1).to_string().len().max(6);
        format!("w{index:0width$}")
    }
}

/// Uniform verb; each role takes a pool noun, or is empty with probability
/// `empty_prob`.
pub fn sample_frame(world: &World, rng: &mut SplitMix64) -> SemanticFrame {
    let vi = rng.below(world.lexicon.len());
    fill_frame(world, vi, rng)
}

fn fill_frame(world: &World, vi: usize, rng: &mut SplitMix64) -> SemanticFrame {
    let entry = world.lexicon.iter().nth(vi).expect("verb index in range");
    let fillers = entry
        .roles
        .iter()
        .zip(&world.pools[vi])
        .map(|(role, pool)| {
            let noun = if rng.bernoulli(world.spec.empty_prob) { None } else { Some(pool[rng.below(pool.len())].clone()) };
            (role.clone(), noun)
        })
        .collect();
    SemanticFrame::new(entry.verb_id.clone(), fillers)
}

/// Verb code plus one code per filled role, plus `sigma` Gaussian noise.
pub fn embed_frame(world: &World, frame: &SemanticFrame, rng: &mut SplitMix64) -> Result<Vec<f64>, WorldError> {
    let mut v = world.verb_code(&frame.verb).ok_or_else(|| WorldError::ForeignFrame(format!("unknown verb {}", frame.verb)))?.to_vec();
    for (role, noun) in &frame.fillers {
        if let Some(noun) = noun {
            let code = world
                .filler_code(role, noun)
                .ok_or_else(|| WorldError::ForeignFrame(format!("no code for {role} = {noun}")))?;
            v.iter_mut().zip(code).for_each(|(a, b)| *a += b);
        }
    }
    if world.spec.sigma > 0.0 {
        for a in v.iter_mut() {
            *a += world.spec.sigma * rng.normal();
        }
    }
    Ok(v)
}

/// A frame and its embedding for item `index`.
pub fn frame_item(world: &World, index: u64) -> (SemanticFrame, Vec<f64>) {
    let mut rng = SplitMix64::for_index(world.spec.seed, STREAM_FRAME, index);
    let frame = sample_frame(world, &mut rng);
    let embedding = embed_frame(world, &frame, &mut rng).expect("sampled frames belong to the world");
    (frame, embedding)
}

fn random_box(world: &World, rng: &mut SplitMix64) -> BoundingBox {
    let (canvas, min) = (world.spec.canvas, world.spec.min_box_side);
    let w = rng.uniform(min, canvas / 2.0);
    let h = rng.uniform(min, canvas / 2.0);
    let x1 = rng.uniform(0.0, canvas - w);
    let y1 = rng.uniform(0.0, canvas - h);
    BoundingBox::new(x1, y1, x1 + w, y1 + h).expect("sampled box is well formed")
}

/// Moves every corner by up to `j`, clamped to the canvas. Falls back to the
/// original box if the result would be degenerate.
fn jitter_box(b: &BoundingBox, j: f64, canvas: f64, rng: &mut SplitMix64) -> BoundingBox {
    if j == 0.0 {
        return *b;
    }
    let c = b.coords().map(|x| (x + rng.uniform(-j, j)).clamp(0.0, canvas));
    if c[2] - c[0] < 1.0 || c[3] - c[1] < 1.0 {
        return *b;
    }
    BoundingBox::new(c[0], c[1], c[2], c[3]).unwrap_or(*b)
}

fn grounded_gt(world: &World, vi: usize, rng: &mut SplitMix64) -> GroundedFrame {
    let frame = fill_frame(world, vi, rng);
    let boxes = frame
        .fillers
        .iter()
        .filter(|(_, n)| n.is_some())
        .map(|(r, _)| (r.clone(), random_box(world, rng)))
        .collect();
    GroundedFrame::new(frame, boxes).expect("boxes only on filled roles")
}

fn noisy_copy(world: &World, vi: usize, gt: &GroundedFrame, rng: &mut SplitMix64) -> GroundedFrame {
    let noise = world.spec.grounding;
    let mut fillers = Vec::new();
    let mut boxes = IndexMap::new();
    for (ri, (role, noun)) in gt.frame().fillers.iter().enumerate() {
        let predicted = if rng.bernoulli(noise.flip_prob) {
            // any other choice in pool + {empty}
            let mut options: Vec<Option<&Noun>> = std::iter::once(None).chain(world.pools[vi][ri].iter().map(Some)).collect();
            options.retain(|o| *o != noun.as_ref());
            options[rng.below(options.len())].cloned()
        } else {
            noun.clone()
        };
        if predicted.is_some() {
            let b = match gt.box_for(role.as_str()) {
                Some(b) => jitter_box(b, noise.jitter, world.spec.canvas, rng),
                None => random_box(world, rng),
            };
            boxes.insert(role.clone(), b);
        }
        fillers.push((role.clone(), predicted));
    }
    GroundedFrame::new(SemanticFrame::new(gt.frame().verb.clone(), fillers), boxes).expect("boxes only on filled roles")
}

/// Ground truth and a ranked list of `k` predictions. The first prediction is
/// the noisy copy of the ground truth unless the verb flip fires, in which
/// case the copy moves to rank 2 and a frame of another verb leads.
pub fn sample_grounded_ranked(world: &World, rng: &mut SplitMix64, k: usize) -> (GroundedFrame, Vec<GroundedFrame>) {
    let n_verbs = world.lexicon.len();
    let vi = rng.below(n_verbs);
    let gt = grounded_gt(world, vi, rng);
    let copy = noisy_copy(world, vi, &gt, rng);
    let flip = n_verbs > 1 && rng.bernoulli(world.spec.grounding.verb_flip_prob);
    let mut others: Vec<usize> = (0..n_verbs).filter(|&i| i != vi).collect();
    rng.shuffle(&mut others);
    let mut ranked = Vec::with_capacity(k);
    let mut others = others.into_iter();
    if flip {
        if let Some(o) = others.next() {
            ranked.push(grounded_gt(world, o, rng));
        }
    }
    ranked.push(copy);
    while ranked.len() < k {
        match others.next() {
            Some(o) => ranked.push(grounded_gt(world, o, rng)),
            None => break,
        }
    }
    ranked.truncate(k);
    (gt, ranked)
}

/// Ground truth and its single top prediction.
pub fn sample_grounded(world: &World, rng: &mut SplitMix64) -> (GroundedFrame, GroundedFrame) {
    let (gt, mut ranked) = sample_grounded_ranked(world, rng, 1);
    (gt, ranked.remove(0))
}

/// GT pairs and detections for one image. Each GT pair yields a jittered copy
/// scored in `[0.5, 1)`; distractors are scored in `[0, 0.5)` and never
/// overlap a same-class GT pair at the matching threshold.
pub fn sample_hoi_scene(world: &World, rng: &mut SplitMix64) -> (Vec<HoiGroundTruth>, Vec<HoiDetection>) {
    let hs = world.spec.hoi_scene;
    let Some(catalog) = &world.catalog else {
        return (Vec::new(), Vec::new());
    };
    let n_classes = catalog.len();
    let canvas = world.spec.canvas;
    let n_pairs = hs.min_pairs + rng.below(hs.max_pairs - hs.min_pairs + 1);
    let gts: Vec<HoiGroundTruth> = (0..n_pairs)
        .map(|_| HoiGroundTruth {
            hoi_class: catalog.class(rng.below(n_classes)).clone(),
            human_box: random_box(world, rng),
            object_box: random_box(world, rng),
        })
        .collect();
    let mut dets = Vec::with_capacity(n_pairs + hs.distractors);
    if hs.detect_truth {
        for g in &gts {
            dets.push(HoiDetection {
                human_box: jitter_box(&g.human_box, hs.jitter, canvas, rng),
                object_box: jitter_box(&g.object_box, hs.jitter, canvas, rng),
                hoi_class: g.hoi_class.clone(),
                score: rng.uniform(0.5, 1.0),
            });
        }
    }
    for _ in 0..hs.distractors {
        let class = catalog.class(rng.below(n_classes)).clone();
        for _ in 0..1000 {
            let human = random_box(world, rng);
            let object = random_box(world, rng);
            let hits = gts
                .iter()
                .any(|g| g.hoi_class == class && iou(&g.human_box, &human).min(iou(&g.object_box, &object)) >= 0.5);
            if !hits {
                dets.push(HoiDetection { human_box: human, object_box: object, hoi_class: class, score: rng.uniform(0.0, 0.5) });
                break;
            }
        }
    }
    (gts, dets)
}

/// HOI ground truth and detections for image `index`.
pub fn hoi_item(world: &World, id: String, index: u64) -> (HoiImageGroundTruth, HoiImageDetections) {
    let mut rng = SplitMix64::for_index(world.spec.seed, STREAM_HOI, index);
    let (pairs, detections) = sample_hoi_scene(world, &mut rng);
    (HoiImageGroundTruth { id: id.clone(), pairs }, HoiImageDetections { id, detections })
}
