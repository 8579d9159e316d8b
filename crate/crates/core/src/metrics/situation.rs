//! verb / value / value-all and their grounded variants.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{iou, mean, EvalError, EvalReport, ReportRow, Scenario, ValueMode, IOU_THRESHOLD};
use crate::frames::{BoundingBox, GroundedFrame, Noun, SemanticFrame};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SirPrediction {
    pub id: String,
    /// Ranked hypotheses, most confident first. Empty for an unparseable prediction.
    pub hypotheses: Vec<SemanticFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SirGroundTruth {
    pub id: String,
    pub verb: String,
    /// One frame per annotator.
    pub frames: Vec<SemanticFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsrPrediction {
    pub id: String,
    pub hypotheses: Vec<GroundedFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsrGroundTruth {
    pub id: String,
    pub verb: String,
    pub frames: Vec<GroundedFrame>,
}

trait FrameView: Sync {
    fn frame(&self) -> &SemanticFrame;
    fn role_box(&self, role: &str) -> Option<&BoundingBox>;
}

impl FrameView for SemanticFrame {
    fn frame(&self) -> &SemanticFrame {
        self
    }
    fn role_box(&self, _role: &str) -> Option<&BoundingBox> {
        None
    }
}

impl FrameView for GroundedFrame {
    fn frame(&self) -> &SemanticFrame {
        GroundedFrame::frame(self)
    }
    fn role_box(&self, role: &str) -> Option<&BoundingBox> {
        self.box_for(role)
    }
}

/// Scores for a single item. `verb` is `None` in the GT-verb scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ItemScores {
    pub verb: Option<f64>,
    pub value: f64,
    pub value_all: f64,
    pub grnd_value: f64,
    pub grnd_value_all: f64,
}

fn box_matches(pred: Option<&BoundingBox>, gt: Option<&BoundingBox>) -> bool {
    match (pred, gt) {
        (None, None) => true,
        (Some(p), Some(g)) => iou(p, g) >= IOU_THRESHOLD,
        _ => false,
    }
}

fn aggregate(correct: usize, k: usize, mode: ValueMode) -> (f64, f64) {
    if k == 0 {
        return (1.0, 1.0);
    }
    let value = match mode {
        ValueMode::AnyRole => f64::from(u8::from(correct >= 1)),
        ValueMode::PerRole => correct as f64 / k as f64,
    };
    (value, f64::from(u8::from(correct == k)))
}

fn role_set(frame: &SemanticFrame) -> BTreeSet<&str> {
    frame.roles().map(|r| r.as_str()).collect()
}

fn score_item<P: FrameView, G: FrameView>(
    id: &str,
    hypotheses: &[P],
    gt_verb: &str,
    annotators: &[G],
    scenario: Scenario,
    mode: ValueMode,
) -> Result<ItemScores, EvalError> {
    let schema_err = |message: String| EvalError::Schema { id: id.to_owned(), message };
    let first = annotators.first().ok_or_else(|| schema_err("no annotator frames".into()))?;
    let roles = role_set(first.frame());
    for a in annotators {
        if a.frame().verb != gt_verb {
            return Err(schema_err(format!("annotator frame verb {:?} differs from {gt_verb:?}", a.frame().verb)));
        }
        if role_set(a.frame()) != roles {
            return Err(schema_err("annotator frames disagree on roles".into()));
        }
    }

    let budget = scenario.rank_budget().min(hypotheses.len());
    let chosen = hypotheses[..budget].iter().find(|h| h.frame().verb == gt_verb);
    let verb = match scenario {
        Scenario::GtVerb => None,
        _ => Some(f64::from(u8::from(chosen.is_some()))),
    };
    let Some(hyp) = chosen else {
        return Ok(ItemScores { verb, value: 0.0, value_all: 0.0, grnd_value: 0.0, grnd_value_all: 0.0 });
    };
    if role_set(hyp.frame()) != roles {
        return Err(schema_err("predicted frame roles differ from ground truth".into()));
    }

    let k = roles.len();
    let mut noun_ok = 0;
    let mut grounded_ok = 0;
    for (role, noun) in &hyp.frame().fillers {
        let role = role.as_str();
        let pred_box = hyp.role_box(role);
        let matches_noun = |a: &G| a.frame().filler(role).flatten() == noun.as_ref().map(|n: &Noun| n);
        if annotators.iter().any(matches_noun) {
            noun_ok += 1;
            if annotators.iter().any(|a| matches_noun(a) && box_matches(pred_box, a.role_box(role))) {
                grounded_ok += 1;
            }
        }
    }
    let (value, value_all) = aggregate(noun_ok, k, mode);
    let (grnd_value, grnd_value_all) = aggregate(grounded_ok, k, mode);
    Ok(ItemScores { verb, value, value_all, grnd_value, grnd_value_all })
}

/// Pairs ground truth with predictions by id, ordered by id.
fn align<'a, P, G>(
    preds: &'a [P],
    gts: &'a [G],
    pred_id: impl Fn(&P) -> &str,
    gt_id: impl Fn(&G) -> &str,
) -> Result<Vec<(&'a G, &'a P)>, EvalError> {
    let mut by_id: HashMap<&str, &P> = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_id.insert(pred_id(p), p).is_some() {
            return Err(EvalError::DuplicateId(pred_id(p).to_owned()));
        }
    }
    let mut sorted: Vec<&G> = gts.iter().collect();
    sorted.sort_by(|a, b| gt_id(a).cmp(gt_id(b)));
    if let Some(w) = sorted.windows(2).find(|w| gt_id(w[0]) == gt_id(w[1])) {
        return Err(EvalError::DuplicateId(gt_id(w[0]).to_owned()));
    }
    let mut pairs = Vec::with_capacity(sorted.len());
    for g in sorted {
        let p = by_id.remove(gt_id(g)).ok_or_else(|| EvalError::MissingPrediction(gt_id(g).to_owned()))?;
        pairs.push((g, p));
    }
    if let Some(extra) = by_id.keys().min() {
        return Err(EvalError::UnexpectedPrediction((*extra).to_owned()));
    }
    Ok(pairs)
}

fn build_report(
    task: &str,
    scenario: Scenario,
    mode: ValueMode,
    keys: Vec<&str>,
    scores: Vec<ItemScores>,
    grounded: bool,
) -> EvalReport {
    let mut report = EvalReport::new(task, scores.len());
    report.scenario = Some(scenario);
    report.value_mode = Some(mode);
    let mut put = |name: &str, v: Option<f64>| {
        if let Some(v) = v {
            report.metrics.insert(name.to_owned(), v);
        }
    };
    if scenario != Scenario::GtVerb {
        put("verb", mean(scores.iter().filter_map(|s| s.verb)));
    }
    put("value", mean(scores.iter().map(|s| s.value)));
    put("value_all", mean(scores.iter().map(|s| s.value_all)));
    if grounded {
        put("grnd_value", mean(scores.iter().map(|s| s.grnd_value)));
        put("grnd_value_all", mean(scores.iter().map(|s| s.grnd_value_all)));
    }
    report.rows = keys
        .into_iter()
        .zip(&scores)
        .map(|(key, s)| {
            let mut values = BTreeMap::new();
            if let Some(v) = s.verb {
                values.insert("verb".to_owned(), v);
            }
            values.insert("value".to_owned(), s.value);
            values.insert("value_all".to_owned(), s.value_all);
            if grounded {
                values.insert("grnd_value".to_owned(), s.grnd_value);
                values.insert("grnd_value_all".to_owned(), s.grnd_value_all);
            }
            ReportRow { key: key.to_owned(), values, note: None }
        })
        .collect();
    report
}

/// Situation recognition metrics: `verb`, `value`, `value_all`.
pub fn eval_sir(
    preds: &[SirPrediction],
    gts: &[SirGroundTruth],
    scenario: Scenario,
    mode: ValueMode,
) -> Result<EvalReport, EvalError> {
    let pairs = align(preds, gts, |p| &p.id, |g| &g.id)?;
    let scores = par::map(&pairs, |(g, p)| score_item(&g.id, &p.hypotheses, &g.verb, &g.frames, scenario, mode))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let keys = pairs.iter().map(|(g, _)| g.id.as_str()).collect();
    Ok(build_report("sir", scenario, mode, keys, scores, false))
}

/// Grounded situation recognition: the SiR metrics plus `grnd_value` and
/// `grnd_value_all`, where a role also needs IoU >= 0.5 with the annotator box
/// (or no box on either side).
pub fn eval_gsr(
    preds: &[GsrPrediction],
    gts: &[GsrGroundTruth],
    scenario: Scenario,
    mode: ValueMode,
) -> Result<EvalReport, EvalError> {
    let pairs = align(preds, gts, |p| &p.id, |g| &g.id)?;
    let scores = par::map(&pairs, |(g, p)| score_item(&g.id, &p.hypotheses, &g.verb, &g.frames, scenario, mode))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let keys = pairs.iter().map(|(g, _)| g.id.as_str()).collect();
    Ok(build_report("gsr", scenario, mode, keys, scores, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::RoleName;
    use indexmap::IndexMap;

    fn frame(verb: &str, fillers: &[(&str, Option<&str>)]) -> SemanticFrame {
        SemanticFrame::new(
            verb,
            fillers
                .iter()
                .map(|(r, n)| (RoleName::new(*r).unwrap(), n.map(|n| Noun::new(n).unwrap())))
                .collect(),
        )
    }

    fn gt(id: &str, f: SemanticFrame) -> SirGroundTruth {
        SirGroundTruth { id: id.into(), verb: f.verb.clone(), frames: vec![f] }
    }

    fn slicing(agent: &str, tool: &str, place: &str) -> SemanticFrame {
        frame("slice", &[("AGENT", Some(agent)), ("TOOL", Some(tool)), ("PLACE", Some(place))])
    }

    #[test]
    fn one_of_three_nouns_correct() {
        let gts = [gt("a", slicing("man", "knife", "table"))];
        let preds = [SirPrediction { id: "a".into(), hypotheses: vec![slicing("man", "saw", "floor")] }];
        let any = eval_sir(&preds, &gts, Scenario::Top1, ValueMode::AnyRole).unwrap();
        assert_eq!(any.metric("verb"), Some(1.0));
        assert_eq!(any.metric("value"), Some(1.0));
        assert_eq!(any.metric("value_all"), Some(0.0));
        let per = eval_sir(&preds, &gts, Scenario::Top1, ValueMode::PerRole).unwrap();
        assert!((per.metric("value").unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_top1_verb_scores_zero() {
        let gts = [gt("a", slicing("man", "knife", "table"))];
        let wrong = frame("eat", &[("AGENT", Some("man"))]);
        let preds = [SirPrediction { id: "a".into(), hypotheses: vec![wrong.clone(), slicing("man", "knife", "table")] }];
        let r = eval_sir(&preds, &gts, Scenario::Top1, ValueMode::PerRole).unwrap();
        assert_eq!((r.metric("verb"), r.metric("value"), r.metric("value_all")), (Some(0.0), Some(0.0), Some(0.0)));
        // top-5 reads nouns from the hypothesis carrying the GT verb
        let r = eval_sir(&preds, &gts, Scenario::Top5, ValueMode::PerRole).unwrap();
        assert_eq!((r.metric("verb"), r.metric("value_all")), (Some(1.0), Some(1.0)));
        let r = eval_sir(&preds, &gts, Scenario::GtVerb, ValueMode::PerRole).unwrap();
        assert_eq!(r.metric("verb"), None);
        assert_eq!(r.metric("value_all"), Some(1.0));
    }

    #[test]
    fn perfect_prediction() {
        let gts = [gt("a", slicing("man", "knife", "table")), gt("b", frame("eat", &[("AGENT", None)]))];
        let preds: Vec<_> =
            gts.iter().map(|g| SirPrediction { id: g.id.clone(), hypotheses: g.frames.clone() }).collect();
        for scenario in [Scenario::Top1, Scenario::Top5, Scenario::GtVerb] {
            let r = eval_sir(&preds, &gts, scenario, ValueMode::AnyRole).unwrap();
            assert!(r.metrics.values().all(|&v| v == 1.0), "{r:?}");
        }
    }

    #[test]
    fn any_annotator_counts_and_empty_matches_empty() {
        let g = SirGroundTruth {
            id: "a".into(),
            verb: "slice".into(),
            frames: vec![
                frame("slice", &[("AGENT", Some("man")), ("TOOL", Some("knife"))]),
                frame("slice", &[("AGENT", Some("person")), ("TOOL", None)]),
            ],
        };
        let p = SirPrediction { id: "a".into(), hypotheses: vec![frame("slice", &[("AGENT", Some("person")), ("TOOL", None)])] };
        let r = eval_sir(&[p], &[g], Scenario::Top1, ValueMode::PerRole).unwrap();
        assert_eq!(r.metric("value_all"), Some(1.0));
    }

    #[test]
    fn unparseable_prediction_is_fully_wrong() {
        let gts = [gt("a", slicing("man", "knife", "table"))];
        let preds = [SirPrediction { id: "a".into(), hypotheses: vec![] }];
        let r = eval_sir(&preds, &gts, Scenario::Top5, ValueMode::PerRole).unwrap();
        assert!(r.metrics.values().all(|&v| v == 0.0));
    }

    #[test]
    fn id_and_schema_errors() {
        let gts = [gt("a", slicing("man", "knife", "table"))];
        let preds = [SirPrediction { id: "b".into(), hypotheses: vec![] }];
        assert_eq!(eval_sir(&preds, &gts, Scenario::Top1, ValueMode::PerRole).unwrap_err().code(), "id-mismatch");
        let preds = [SirPrediction { id: "a".into(), hypotheses: vec![frame("slice", &[("AGENT", Some("man"))])] }];
        assert_eq!(eval_sir(&preds, &gts, Scenario::Top1, ValueMode::PerRole).unwrap_err().code(), "schema-mismatch");
        let two = [gts[0].clone(), gts[0].clone()];
        assert_eq!(eval_sir(&[], &two, Scenario::Top1, ValueMode::PerRole).unwrap_err().code(), "duplicate-id");
    }

    fn grounded(f: SemanticFrame, boxes: &[(&str, [f64; 4])]) -> GroundedFrame {
        let boxes: IndexMap<_, _> = boxes
            .iter()
            .map(|(r, c)| (RoleName::new(*r).unwrap(), BoundingBox::try_from(*c).unwrap()))
            .collect();
        GroundedFrame::new(f, boxes).unwrap()
    }

    fn gsr_case(pred_box: [f64; 4]) -> EvalReport {
        let f = frame("carry", &[("AGENT", Some("man"))]);
        let g = GsrGroundTruth { id: "x".into(), verb: "carry".into(), frames: vec![grounded(f.clone(), &[("AGENT", [0.0, 0.0, 10.0, 10.0])])] };
        let p = GsrPrediction { id: "x".into(), hypotheses: vec![grounded(f, &[("AGENT", pred_box)])] };
        eval_gsr(&[p], &[g], Scenario::Top1, ValueMode::PerRole).unwrap()
    }

    #[test]
    fn grounding_threshold_is_inclusive() {
        // IoU = 50/100 exactly: intersection 5x10 with union 100 needs a box inside the GT
        let r = gsr_case([0.0, 0.0, 5.0, 10.0]);
        assert_eq!(r.metric("grnd_value"), Some(1.0));
        // IoU = 49/100
        let r = gsr_case([0.0, 0.0, 4.9, 10.0]);
        assert_eq!(r.metric("value"), Some(1.0));
        assert_eq!(r.metric("grnd_value"), Some(0.0));
    }

    #[test]
    fn vacuous_grounding_equals_value() {
        let f = frame("slice", &[("AGENT", Some("man")), ("TOOL", Some("knife")), ("PLACE", None)]);
        let g = GsrGroundTruth { id: "x".into(), verb: "slice".into(), frames: vec![GroundedFrame::ungrounded(f.clone())] };
        let p = GsrPrediction { id: "x".into(), hypotheses: vec![GroundedFrame::ungrounded(f)] };
        let r = eval_gsr(&[p], &[g], Scenario::Top1, ValueMode::PerRole).unwrap();
        assert_eq!(r.metric("grnd_value"), r.metric("value"));
        assert_eq!(r.metric("grnd_value_all"), r.metric("value_all"));
    }

    #[test]
    fn predicted_box_for_unboxed_gt_role_is_wrong() {
        let f = frame("carry", &[("AGENT", Some("man"))]);
        let g = GsrGroundTruth { id: "x".into(), verb: "carry".into(), frames: vec![GroundedFrame::ungrounded(f.clone())] };
        let p = GsrPrediction { id: "x".into(), hypotheses: vec![grounded(f, &[("AGENT", [0.0, 0.0, 1.0, 1.0])])] };
        let r = eval_gsr(&[p], &[g], Scenario::Top1, ValueMode::AnyRole).unwrap();
        assert_eq!(r.metric("value"), Some(1.0));
        assert_eq!(r.metric("grnd_value"), Some(0.0));
    }
}
