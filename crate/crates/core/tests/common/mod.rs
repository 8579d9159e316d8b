// Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

use dynoframe::frames::{BoundingBox, Lexicon, Noun, RoleName, SemanticFrame, VerbEntry};
use dynoframe::rng::SplitMix64;

pub const ROLE_POOL: [&str; 12] = [
    "AGENT", "TOOL", "PLACE", "ITEM", "SOURCE", "DESTINATION", "VICTIM", "COAGENT", "VEHICLE", "FOOD", "CONTAINER",
    "MATERIAL",
];

fn word(rng: &mut SplitMix64, min: usize, max: usize) -> String {
    let len = min + rng.below(max - min + 1);
    (0..len).map(|_| (b'a' + rng.below(26) as u8) as char).collect()
}

/// A lexicon of `n` random verbs (distinct gerunds) and, per verb, a noun pool.
pub fn random_lexicon(n: usize, rng: &mut SplitMix64) -> (Lexicon, Vec<Noun>) {
    let mut entries = Vec::new();
    let mut gerunds = HashSet::new();
    while entries.len() < n {
        let mut roles: Vec<&str> = ROLE_POOL.to_vec();
        rng.shuffle(&mut roles);
        let k = 1 + rng.below(6);
        let roles = roles[..k].iter().map(|r| RoleName::new(*r).unwrap()).collect();
        let entry = VerbEntry::new(word(rng, 3, 8), None, roles).unwrap();
        if gerunds.insert(entry.gerund.clone()) {
            entries.push(entry);
        }
    }
    let nouns = (0..40)
        .map(|_| {
            let words: Vec<String> = (0..1 + rng.below(3)).map(|_| word(rng, 2, 7)).collect();
            Noun::new(words.join(" ")).unwrap()
        })
        .collect();
    (Lexicon::from_entries(entries).unwrap(), nouns)
}

pub fn random_frame(lexicon: &Lexicon, nouns: &[Noun], rng: &mut SplitMix64) -> SemanticFrame {
    let entry = lexicon.iter().nth(rng.below(lexicon.len())).unwrap();
    let fillers = entry
        .roles
        .iter()
        .map(|r| (r.clone(), if rng.bernoulli(0.25) { None } else { Some(nouns[rng.below(nouns.len())].clone()) }))
        .collect();
    SemanticFrame::new(entry.verb_id.clone(), fillers)
}

fn oracle_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.coords();
    let [bx1, by1, bx2, by2] = b.coords();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if inter == 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OracleDet {
    pub image: usize,
    pub human: BoundingBox,
    pub object: BoundingBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct OracleGt {
    pub image: usize,
    pub human: BoundingBox,
    pub object: BoundingBox,
}

/// Ranked TP flags: score descending, then image, then input position; each
/// detection claims the free same-image GT of highest min(IoU) >= 0.5.
pub fn oracle_flags(dets: &[OracleDet], gts: &[OracleGt]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].score.partial_cmp(&dets[a].score).unwrap().then(dets[a].image.cmp(&dets[b].image)).then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::new();
    for d in order {
        let det = dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.image != det.image {
                continue;
            }
            let ov = oracle_iou(&det.human, &gt.human).min(oracle_iou(&det.object, &gt.object));
            if ov >= 0.5 && best.is_none_or(|(_, b)| ov > b) {
                best = Some((g, ov));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        flags.push(best.is_some());
    }
    flags
}

/// Brute force: every true positive contributes `1/n_gt` times the best
/// precision reached at or after its rank.
pub fn oracle_ap(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let precision: Vec<f64> = (0..flags.len())
        .map(|k| flags[..=k].iter().filter(|&&f| f).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..flags.len() {
        if flags[k] {
            let best = precision[k..].iter().cloned().fold(0.0, f64::max);
            ap += best / n_gt as f64;
        }
    }
    Some(ap)
}

pub fn random_box(rng: &mut SplitMix64, canvas: f64) -> BoundingBox {
    let w = rng.uniform(5.0, canvas / 2.0);
    let h = rng.uniform(5.0, canvas / 2.0);
    let x = rng.uniform(0.0, canvas - w);
    let y = rng.uniform(0.0, canvas - h);
    BoundingBox::new(x, y, x + w, y + h).unwrap()
}

pub fn nudge(b: &BoundingBox, amount: f64, rng: &mut SplitMix64) -> BoundingBox {
    let c = b.coords();
    let x1 = (c[0] + rng.uniform(-amount, amount)).max(0.0);
    let y1 = (c[1] + rng.uniform(-amount, amount)).max(0.0);
    let x2 = (c[2] + rng.uniform(-amount, amount)).max(x1 + 1.0);
    let y2 = (c[3] + rng.uniform(-amount, amount)).max(y1 + 1.0);
    BoundingBox::new(x1, y1, x2, y2).unwrap()
}

/// Central finite differences of `f` at `x`, in place.
pub fn central_diff(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(x);
            x[i] = orig - h;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)` over whole gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// A world whose verbs all take three roles.
pub fn three_role_world_json(seed: u64, flip_prob: f64) -> String {
    format!(
        r#"{{
  "seed": {seed},
  "dim": 16,
  "verbs": [
    {{"verb": "carry", "roles": {{"AGENT": ["man", "woman", "child"], "ITEM": ["box", "bag", "tray"], "PLACE": ["street", "hall"]}}}},
    {{"verb": "cut", "roles": {{"AGENT": ["man", "woman", "chef"], "ITEM": ["bread", "rope"], "TOOL": ["knife", "saw", "scissors"]}}}},
    {{"verb": "wash", "roles": {{"AGENT": ["man", "woman"], "ITEM": ["car", "dog", "dish"], "PLACE": ["yard", "sink", "garage"]}}}}
  ],
  "grounding": {{"jitter": 0.0, "flip_prob": {flip_prob}, "verb_flip_prob": 0.0}}
}}"#
    )
}
