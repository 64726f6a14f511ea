//! Panoptic quality (PQ/SQ/RQ) and semantic mIoU evaluation.
//!
//! Segments match only within a category, and only at IoU > 0.5, which
//! makes the matching unique. Predicted segments that mostly cover
//! ground-truth void are discarded rather than counted as false positives
//! (the standard void rule), and the void overlap is excluded from the
//! union when computing IoU.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::PanopticPrediction;
use crate::scene::{PanopticScene, VOID_ID};

/// Matches of one category: true-positive pairs with their IoU, unmatched
/// predictions, unmatched ground truth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CategoryMatches {
    /// (pred segment id, gt segment id, IoU), IoU > 0.5.
    pub tp: Vec<(u16, u16, f64)>,
    pub fp: Vec<u16>,
    pub missed: Vec<u16>,
}

/// Per-category matching outcome plus the thing/stuff split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub per_category: BTreeMap<u16, CategoryMatches>,
    pub thing_categories: BTreeMap<u16, bool>,
}

/// Match predicted segments against ground truth per category.
pub fn match_segments(
    pred: &PanopticPrediction,
    gt: &PanopticScene,
) -> Result<MatchResult> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::ShapeMismatch {
            context: "match_segments",
            left: (pred.height(), pred.width()),
            right: (gt.height(), gt.width()),
        });
    }

    // Joint histogram over (gt segment, pred segment), void included.
    let mut joint: BTreeMap<(u16, u16), usize> = BTreeMap::new();
    for (g, p) in gt.segment_map().iter().zip(pred.assignment()) {
        *joint.entry((*g, *p)).or_insert(0) += 1;
    }

    let mut result = MatchResult::default();
    let space = gt.label_space();
    let mut mark = |category: u16| {
        result.per_category.entry(category).or_default();
        result
            .thing_categories
            .entry(category)
            .or_insert_with(|| space.is_thing_category(category));
    };
    for s in gt.segments() {
        mark(s.category);
    }
    for s in pred.segments() {
        mark(s.category);
    }

    let mut matched_pred: BTreeMap<u16, (u16, f64)> = BTreeMap::new();
    let mut matched_gt: BTreeMap<u16, u16> = BTreeMap::new();
    for ps in pred.segments() {
        let void_overlap = joint.get(&(VOID_ID, ps.segment_id)).copied().unwrap_or(0);
        for gs in gt.segments() {
            if gs.category != ps.category {
                continue;
            }
            let inter = joint
                .get(&(gs.segment_id, ps.segment_id))
                .copied()
                .unwrap_or(0);
            if inter == 0 {
                continue;
            }
            let union = ps.area + gs.area - inter - void_overlap;
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                matched_pred.insert(ps.segment_id, (gs.segment_id, iou));
                matched_gt.insert(gs.segment_id, ps.segment_id);
            }
        }
    }

    for ps in pred.segments() {
        let bucket = result.per_category.get_mut(&ps.category).unwrap();
        if let Some((gt_id, iou)) = matched_pred.get(&ps.segment_id) {
            bucket.tp.push((ps.segment_id, *gt_id, *iou));
        } else {
            // Void rule: predictions mostly covering unlabeled pixels are
            // not false positives.
            let void_overlap =
                joint.get(&(VOID_ID, ps.segment_id)).copied().unwrap_or(0);
            if (void_overlap as f64) / (ps.area as f64) <= 0.5 {
                bucket.fp.push(ps.segment_id);
            }
        }
    }
    for gs in gt.segments() {
        if !matched_gt.contains_key(&gs.segment_id) {
            result
                .per_category
                .get_mut(&gs.category)
                .unwrap()
                .missed
                .push(gs.segment_id);
        }
    }
    Ok(result)
}

/// Quality numbers of one category.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CategoryQuality {
    pub iou_sum: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub missed: usize,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

/// Per-category and aggregate quality. Aggregates are unweighted means over
/// categories with any matched, false-positive, or missed segment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PQReport {
    pub per_category: BTreeMap<u16, CategoryQuality>,
    pub thing_categories: BTreeMap<u16, bool>,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_things: f64,
    pub sq_things: f64,
    pub rq_things: f64,
    pub pq_stuff: f64,
    pub sq_stuff: f64,
    pub rq_stuff: f64,
    /// Filled by [`evaluate`]; absent when only matching was run.
    pub miou: Option<f64>,
}

/// Fold matches into PQ/SQ/RQ numbers.
pub fn compute_pq(matches: &MatchResult) -> PQReport {
    let mut report = PQReport {
        thing_categories: matches.thing_categories.clone(),
        ..Default::default()
    };
    for (&category, m) in &matches.per_category {
        let tp = m.tp.len();
        let fp = m.fp.len();
        let missed = m.missed.len();
        if tp + fp + missed == 0 {
            continue;
        }
        let iou_sum: f64 = m.tp.iter().map(|(_, _, iou)| iou).sum();
        let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * missed as f64;
        let sq = if tp > 0 { iou_sum / tp as f64 } else { 0.0 };
        let rq = tp as f64 / denom;
        let pq = iou_sum / denom;
        report.per_category.insert(
            category,
            CategoryQuality {
                iou_sum,
                tp,
                fp,
                missed,
                pq,
                sq,
                rq,
            },
        );
    }

    let mean = |pick: &dyn Fn(&CategoryQuality) -> f64,
                filter: &dyn Fn(u16) -> bool|
     -> f64 {
        let values: Vec<f64> = report
            .per_category
            .iter()
            .filter(|(c, _)| filter(**c))
            .map(|(_, q)| pick(q))
            .collect();
        if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        }
    };
    let is_thing = |c: u16| matches.thing_categories.get(&c).copied().unwrap_or(false);
    report.pq = mean(&|q| q.pq, &|_| true);
    report.sq = mean(&|q| q.sq, &|_| true);
    report.rq = mean(&|q| q.rq, &|_| true);
    report.pq_things = mean(&|q| q.pq, &|c| is_thing(c));
    report.sq_things = mean(&|q| q.sq, &|c| is_thing(c));
    report.rq_things = mean(&|q| q.rq, &|c| is_thing(c));
    report.pq_stuff = mean(&|q| q.pq, &|c| !is_thing(c));
    report.sq_stuff = mean(&|q| q.sq, &|c| !is_thing(c));
    report.rq_stuff = mean(&|q| q.rq, &|c| !is_thing(c));
    report
}

/// Semantic mean IoU: instances merge into their categories, ground-truth
/// void pixels are excluded, and the mean runs over categories present in
/// the ground truth.
pub fn compute_miou(pred: &PanopticPrediction, gt: &PanopticScene) -> Result<f64> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::ShapeMismatch {
            context: "compute_miou",
            left: (pred.height(), pred.width()),
            right: (gt.height(), gt.width()),
        });
    }
    let mut inter: BTreeMap<u16, usize> = BTreeMap::new();
    let mut gt_area: BTreeMap<u16, usize> = BTreeMap::new();
    let mut pred_area: BTreeMap<u16, usize> = BTreeMap::new();
    for (i, &g) in gt.semantic_map().iter().enumerate() {
        if g == VOID_ID {
            continue;
        }
        let p = pred.category_at(i);
        *gt_area.entry(g).or_insert(0) += 1;
        if p != VOID_ID {
            *pred_area.entry(p).or_insert(0) += 1;
            if p == g {
                *inter.entry(g).or_insert(0) += 1;
            }
        }
    }
    if gt_area.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let mut sum = 0.0;
    for (&c, &ga) in &gt_area {
        let i = inter.get(&c).copied().unwrap_or(0);
        let pa = pred_area.get(&c).copied().unwrap_or(0);
        let union = ga + pa - i;
        sum += i as f64 / union as f64;
    }
    Ok(sum / gt_area.len() as f64)
}

/// Full evaluation: match, fold, and attach mIoU.
pub fn evaluate(pred: &PanopticPrediction, gt: &PanopticScene) -> Result<PQReport> {
    let matches = match_segments(pred, gt)?;
    let mut report = compute_pq(&matches);
    report.miou = Some(compute_miou(pred, gt)?);
    Ok(report)
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

impl PQReport {
    /// `metrics.json` payload with 6-decimal reals and sorted categories.
    pub fn to_metrics_json(&self) -> serde_json::Value {
        let per_category: BTreeMap<String, serde_json::Value> = self
            .per_category
            .iter()
            .map(|(c, q)| {
                (
                    c.to_string(),
                    serde_json::json!({
                        "pq": round6(q.pq),
                        "sq": round6(q.sq),
                        "rq": round6(q.rq),
                        "iou_sum": round6(q.iou_sum),
                        "tp": q.tp,
                        "fp": q.fp,
                        "fn": q.missed,
                    }),
                )
            })
            .collect();
        serde_json::json!({
            "pq": round6(self.pq),
            "sq": round6(self.sq),
            "rq": round6(self.rq),
            "pq_things": round6(self.pq_things),
            "pq_stuff": round6(self.pq_stuff),
            "sq_things": round6(self.sq_things),
            "sq_stuff": round6(self.sq_stuff),
            "rq_things": round6(self.rq_things),
            "rq_stuff": round6(self.rq_stuff),
            "miou": round6(self.miou.unwrap_or(0.0)),
            "per_category": per_category,
        })
    }
}
