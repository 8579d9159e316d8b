//! HOI detection mAP over full / rare / non-rare class splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{iou, mean, EvalError, EvalReport, ReportRow, IOU_THRESHOLD};
use crate::frames::{hoi_splits, BoundingBox, HoiCatalog, HoiClass, HoiDetection};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiGroundTruth {
    #[serde(rename = "human")]
    pub human_box: BoundingBox,
    pub object_box: BoundingBox,
    #[serde(flatten)]
    pub hoi_class: HoiClass,
}

/// Ground-truth pairs of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiImageGroundTruth {
    pub id: String,
    pub pairs: Vec<HoiGroundTruth>,
}

/// Detections of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiImageDetections {
    pub id: String,
    pub detections: Vec<HoiDetection>,
}

/// A human-object box pair located in image `image` (an index into the
/// sorted image ids).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairBoxes {
    pub image: usize,
    pub human: BoundingBox,
    pub object: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankedMatch {
    /// Index into the detection slice passed to [`match_hoi`].
    pub detection: usize,
    pub true_positive: bool,
    pub matched_gt: Option<usize>,
}

/// Greedy matching for one class. Detections are ranked by descending score,
/// ties broken by image then input index. Each detection takes the unmatched
/// GT in its image with the highest `min(iou(human), iou(object))`, provided
/// that is at least 0.5 (ties go to the lowest GT index).
pub fn match_hoi(dets: &[(PairBoxes, f64)], gts: &[PairBoxes]) -> Vec<RankedMatch> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].1.total_cmp(&dets[a].1).then(dets[a].0.image.cmp(&dets[b].0.image)).then(a.cmp(&b))
    });

    let mut by_image: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image).or_default().push(i);
    }
    let mut used = vec![false; gts.len()];
    order
        .into_iter()
        .map(|d| {
            let (det, _) = &dets[d];
            let mut best: Option<(usize, f64)> = None;
            for &g in by_image.get(&det.image).map(Vec::as_slice).unwrap_or(&[]) {
                if used[g] {
                    continue;
                }
                let overlap = iou(&det.human, &gts[g].human).min(iou(&det.object, &gts[g].object));
                if overlap >= IOU_THRESHOLD && best.is_none_or(|(_, o)| overlap > o) {
                    best = Some((g, overlap));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
            }
            RankedMatch { detection: d, true_positive: best.is_some(), matched_gt: best.map(|(g, _)| g) }
        })
        .collect()
}

/// All-point interpolated AP from ranked TP/FP flags. `None` when `n_gt == 0`.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &hit) in flags.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i] < precision[i + 1] {
            precision[i] = precision[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Some(ap)
}

fn sorted_unique_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Result<Vec<&'a str>, EvalError> {
    let mut v: Vec<&str> = ids.collect();
    v.sort_unstable();
    if let Some(w) = v.windows(2).find(|w| w[0] == w[1]) {
        return Err(EvalError::DuplicateId(w[0].to_owned()));
    }
    Ok(v)
}

struct ClassAp {
    ap: Option<f64>,
    n_gt: usize,
    n_det: usize,
}

/// Per-class AP and split means. Classes without ground truth are left out of
/// the means unless `zero_gt_as_zero` is set, in which case they count as 0.
pub fn eval_hoi(
    gts: &[HoiImageGroundTruth],
    dets: &[HoiImageDetections],
    catalog: &HoiCatalog,
    zero_gt_as_zero: bool,
) -> Result<EvalReport, EvalError> {
    let gt_ids = sorted_unique_ids(gts.iter().map(|g| g.id.as_str()))?;
    let det_ids = sorted_unique_ids(dets.iter().map(|d| d.id.as_str()))?;
    let all_ids: BTreeSet<&str> = gt_ids.iter().chain(&det_ids).copied().collect();
    let image_index: HashMap<&str, usize> = all_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();

    let n_classes = catalog.len();
    let mut class_gts: Vec<Vec<PairBoxes>> = vec![Vec::new(); n_classes];
    let mut class_dets: Vec<Vec<(PairBoxes, f64)>> = vec![Vec::new(); n_classes];

    // canonical order: images by id, then input order within an image
    let mut gts_sorted: Vec<&HoiImageGroundTruth> = gts.iter().collect();
    gts_sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for img in gts_sorted {
        let image = image_index[img.id.as_str()];
        for pair in &img.pairs {
            let c = catalog.index_of(&pair.hoi_class).ok_or_else(|| EvalError::UnknownClass {
                id: img.id.clone(),
                class: pair.hoi_class.to_string(),
            })?;
            class_gts[c].push(PairBoxes { image, human: pair.human_box, object: pair.object_box });
        }
    }
    let mut dets_sorted: Vec<&HoiImageDetections> = dets.iter().collect();
    dets_sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for img in dets_sorted {
        let image = image_index[img.id.as_str()];
        for det in &img.detections {
            if !det.score.is_finite() || det.score < 0.0 {
                return Err(EvalError::Schema { id: img.id.clone(), message: format!("invalid score {}", det.score) });
            }
            let c = catalog.index_of(&det.hoi_class).ok_or_else(|| EvalError::UnknownClass {
                id: img.id.clone(),
                class: det.hoi_class.to_string(),
            })?;
            class_dets[c].push((PairBoxes { image, human: det.human_box, object: det.object_box }, det.score));
        }
    }

    let per_class: Vec<ClassAp> = par::map_range(n_classes, |c| {
        let ranked = match_hoi(&class_dets[c], &class_gts[c]);
        let flags: Vec<bool> = ranked.iter().map(|m| m.true_positive).collect();
        ClassAp { ap: average_precision(&flags, class_gts[c].len()), n_gt: class_gts[c].len(), n_det: flags.len() }
    });

    let splits = hoi_splits(catalog);
    let split_mean = |members: &BTreeSet<usize>| {
        mean(members.iter().filter_map(|&c| match per_class[c].ap {
            Some(ap) => Some(ap),
            None if zero_gt_as_zero => Some(0.0),
            None => None,
        }))
    };

    let mut report = EvalReport::new("hoi", gt_ids.len());
    for (name, members) in [("full", &splits.full), ("rare", &splits.rare), ("nonrare", &splits.nonrare)] {
        if let Some(m) = split_mean(members) {
            report.metrics.insert(format!("map_{name}"), m);
        }
    }
    let with_gt = per_class.iter().filter(|c| c.n_gt > 0).count() as u64;
    report.counts = BTreeMap::from([
        ("classes".to_owned(), n_classes as u64),
        ("classes_with_gt".to_owned(), with_gt),
        ("detections".to_owned(), per_class.iter().map(|c| c.n_det as u64).sum()),
        ("ground_truth_pairs".to_owned(), per_class.iter().map(|c| c.n_gt as u64).sum()),
    ]);
    report.rows = per_class
        .iter()
        .enumerate()
        .map(|(c, r)| {
            let mut values = BTreeMap::from([
                ("n_gt".to_owned(), r.n_gt as f64),
                ("n_det".to_owned(), r.n_det as f64),
                ("rare".to_owned(), f64::from(u8::from(splits.rare.contains(&c)))),
            ]);
            if let Some(ap) = r.ap {
                values.insert("ap".to_owned(), ap);
            }
            let note = r.ap.is_none().then(|| "no ground truth".to_owned());
            ReportRow { key: catalog.class(c).to_string(), values, note }
        })
        .collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::HoiCatalogEntry;

    fn bb(c: [f64; 4]) -> BoundingBox {
        BoundingBox::try_from(c).unwrap()
    }

    fn pair(image: usize, h: [f64; 4], o: [f64; 4]) -> PairBoxes {
        PairBoxes { image, human: bb(h), object: bb(o) }
    }

    const H: [f64; 4] = [0.0, 0.0, 10.0, 10.0];
    const O: [f64; 4] = [20.0, 20.0, 30.0, 30.0];

    #[test]
    fn hand_computed_ap() {
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert!((ap - 0.833333).abs() < 1e-6);
        assert_eq!(average_precision(&[true, true, true], 3), Some(1.0));
        assert_eq!(average_precision(&[false, false], 3), Some(0.0));
        assert_eq!(average_precision(&[], 3), Some(0.0));
        assert_eq!(average_precision(&[false], 0), None);
        assert_eq!(average_precision(&[false, true], 1), Some(0.5));
    }

    #[test]
    fn greedy_single_match() {
        let gts = [pair(0, H, O)];
        let dets = [(pair(0, H, O), 0.6), (pair(0, [0.0, 0.0, 9.0, 10.0], O), 0.9)];
        let m = match_hoi(&dets, &gts);
        assert_eq!(m[0], RankedMatch { detection: 1, true_positive: true, matched_gt: Some(0) });
        assert_eq!(m[1], RankedMatch { detection: 0, true_positive: false, matched_gt: None });
    }

    #[test]
    fn both_boxes_must_overlap() {
        let gts = [pair(0, H, O)];
        // human IoU 0.9, object IoU 0.3
        let dets = [(pair(0, [0.0, 0.0, 10.0, 9.0], [20.0, 20.0, 23.0, 30.0]), 1.0)];
        assert!(!match_hoi(&dets, &gts)[0].true_positive);
    }

    #[test]
    fn no_ground_truth_means_all_false_positives() {
        let dets = [(pair(0, H, O), 0.5), (pair(1, H, O), 0.4)];
        assert!(match_hoi(&dets, &[]).iter().all(|m| !m.true_positive));
    }

    #[test]
    fn matches_only_within_image_and_prefers_highest_overlap() {
        let gts = [pair(0, [0.0, 0.0, 10.0, 12.0], O), pair(0, H, O), pair(1, H, O)];
        let dets = [(pair(0, H, O), 1.0)];
        assert_eq!(match_hoi(&dets, &gts)[0].matched_gt, Some(1));
    }

    #[test]
    fn equal_scores_rank_by_image_then_input() {
        let dets = [(pair(2, H, O), 0.5), (pair(1, H, O), 0.5), (pair(1, H, O), 0.5)];
        let order: Vec<usize> = match_hoi(&dets, &[]).iter().map(|m| m.detection).collect();
        assert_eq!(order, vec![1, 2, 0]);
    }

    fn catalog(counts: &[u64]) -> HoiCatalog {
        HoiCatalog::new(
            counts
                .iter()
                .enumerate()
                .map(|(i, &c)| HoiCatalogEntry { class: HoiClass::new(format!("obj{i}"), "hold"), train_count: c })
                .collect(),
        )
        .unwrap()
    }

    fn gt_pair(class: usize) -> HoiGroundTruth {
        HoiGroundTruth { human_box: bb(H), object_box: bb(O), hoi_class: HoiClass::new(format!("obj{class}"), "hold") }
    }

    fn det(class: usize, score: f64, hit: bool) -> HoiDetection {
        let human = if hit { H } else { [100.0, 100.0, 110.0, 110.0] };
        HoiDetection {
            human_box: bb(human),
            object_box: bb(O),
            hoi_class: HoiClass::new(format!("obj{class}"), "hold"),
            score,
        }
    }

    #[test]
    fn split_means() {
        // class 0: AP 1.0 (one GT, one hit); class 1: AP 0.5 via [FP, TP]
        let gts = vec![HoiImageGroundTruth { id: "i".into(), pairs: vec![gt_pair(0), gt_pair(1)] }];
        let dets = vec![HoiImageDetections {
            id: "i".into(),
            detections: vec![det(0, 0.9, true), det(1, 0.8, false), det(1, 0.7, true)],
        }];
        let r = eval_hoi(&gts, &dets, &catalog(&[20, 30]), false).unwrap();
        assert!((r.metric("map_full").unwrap() - 0.75).abs() < 1e-12);
        assert!((r.metric("map_nonrare").unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(r.metric("map_rare"), None);

        let r = eval_hoi(&gts, &dets, &catalog(&[2, 30]), false).unwrap();
        assert_eq!(r.metric("map_rare"), Some(1.0));
        assert_eq!(r.metric("map_nonrare"), Some(0.5));
    }

    #[test]
    fn zero_gt_classes_excluded_unless_flagged() {
        let gts = vec![HoiImageGroundTruth { id: "i".into(), pairs: vec![gt_pair(0)] }];
        let dets = vec![HoiImageDetections { id: "i".into(), detections: vec![det(0, 0.9, true)] }];
        let r = eval_hoi(&gts, &dets, &catalog(&[20, 30]), false).unwrap();
        assert_eq!(r.metric("map_full"), Some(1.0));
        let r = eval_hoi(&gts, &dets, &catalog(&[20, 30]), true).unwrap();
        assert_eq!(r.metric("map_full"), Some(0.5));
    }

    #[test]
    fn empty_detections_give_zero() {
        let gts = vec![HoiImageGroundTruth { id: "i".into(), pairs: vec![gt_pair(0), gt_pair(1)] }];
        let r = eval_hoi(&gts, &[], &catalog(&[3, 30]), false).unwrap();
        assert_eq!(r.metric("map_full"), Some(0.0));
        assert_eq!(r.metric("map_rare"), Some(0.0));
    }

    #[test]
    fn unknown_class_is_an_error() {
        let dets = vec![HoiImageDetections { id: "i".into(), detections: vec![det(7, 0.9, true)] }];
        let err = eval_hoi(&[], &dets, &catalog(&[3]), false).unwrap_err();
        assert_eq!(err.code(), "unknown-class");
    }
}
