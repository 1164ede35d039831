//! Detection quality: IoU, greedy matching, precision/recall and the
//! 11-point interpolated average precision.

use serde::Serialize;

use crate::codec::BBox;
use crate::error::{Error, Result};

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Greedy one-to-one matching of score-sorted detections to ground truth.
///
/// Each detection takes the unmatched ground truth with the highest IoU
/// (lowest index on ties); it is a true positive when that IoU exceeds
/// `iou_thresh`, which consumes the ground truth.
pub fn match_detections(dets: &[BBox], gts: &[BBox], iou_thresh: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let o = iou(d, g);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o > iou_thresh => {
                    taken[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Cumulative (recall, precision) after each detection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub points: Vec<(f64, f64)>,
    /// No ground truth for this class, so recall is undefined (reported as 0).
    pub undefined_recall: bool,
}

pub fn pr_curve(flags: &[bool], total_gt: usize) -> PrCurve {
    let mut tp = 0usize;
    let points = flags
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += hit as usize;
            let recall = if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 };
            (recall, tp as f64 / (i + 1) as f64)
        })
        .collect();
    PrCurve {
        points,
        undefined_recall: total_gt == 0,
    }
}

/// Mean over recall levels {0, 0.1, ..., 1} of the best precision reached
/// at or beyond each level (0 where the level is never reached).
pub fn ap_11point(curve: &PrCurve) -> f64 {
    if curve.undefined_recall {
        return 0.0;
    }
    (0..=10)
        .map(|i| {
            let r = i as f64 / 10.0;
            curve
                .points
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub ap: f64,
    pub num_gt: usize,
    pub num_det: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Class has no ground truth and does not enter the mean.
    pub excluded: bool,
    pub curve: PrCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub map: f64,
    pub iou_thresh: f64,
    /// No class had any ground truth; `map` is reported as 0.
    pub empty_ground_truth: bool,
}

/// Per-class matching and AP, then the mean over classes with ground truth.
pub fn evaluate(dets: &[BBox], gts: &[BBox], num_classes: usize, iou_thresh: f64) -> Result<EvalReport> {
    for b in dets.iter().chain(gts) {
        if b.class_id >= num_classes {
            return Err(Error::ClassOutOfRange {
                class_id: b.class_id,
                num_classes,
            });
        }
    }
    let mut classes = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut cdets: Vec<BBox> = dets.iter().filter(|d| d.class_id == c).copied().collect();
        // stable: equal scores keep input order
        cdets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let cgts: Vec<BBox> = gts.iter().filter(|g| g.class_id == c).copied().collect();
        let flags = match_detections(&cdets, &cgts, iou_thresh);
        let tp = flags.iter().filter(|&&f| f).count();
        let curve = pr_curve(&flags, cgts.len());
        classes.push(ClassReport {
            class_id: c,
            ap: ap_11point(&curve),
            num_gt: cgts.len(),
            num_det: cdets.len(),
            tp,
            fp: flags.len() - tp,
            fn_: cgts.len() - tp,
            excluded: cgts.is_empty(),
            curve,
        });
    }
    let counted: Vec<f64> = classes.iter().filter(|c| !c.excluded).map(|c| c.ap).collect();
    let map = if counted.is_empty() {
        0.0
    } else {
        counted.iter().sum::<f64>() / counted.len() as f64
    };
    Ok(EvalReport {
        empty_ground_truth: counted.is_empty(),
        classes,
        map,
        iou_thresh,
    })
}

impl EvalReport {
    /// Human-readable table: one row per class, then the mAP line.
    pub fn to_table(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<20} {:>8} {:>6} {:>6} {:>6} {:>6}\n",
            "class", "AP", "gt", "TP", "FP", "FN"
        ));
        for c in &self.classes {
            let name = class_names
                .get(c.class_id)
                .cloned()
                .unwrap_or_else(|| c.class_id.to_string());
            let ap = if c.excluded {
                "-".to_string()
            } else {
                format!("{:.4}", c.ap)
            };
            out.push_str(&format!(
                "{name:<20} {ap:>8} {:>6} {:>6} {:>6} {:>6}\n",
                c.num_gt, c.tp, c.fp, c.fn_
            ));
        }
        if self.empty_ground_truth {
            out.push_str("note: no ground-truth objects; mAP reported as 0\n");
        }
        out.push_str(&format!("mAP {:.4}\n", self.map));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> BBox {
        BBox { x1, y1, x2, y2, class_id: 0, score }
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 2.0, 2.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0, 1.0)), 0.0);
        assert_eq!(iou(&a, &b(2.0, 0.0, 3.0, 2.0, 1.0)), 0.0);
        assert!((iou(&a, &b(1.0, 0.0, 3.0, 2.0, 1.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn matching_cases() {
        let g = b(0.0, 0.0, 10.0, 10.0, 1.0);
        assert_eq!(match_detections(&[g], &[g], 0.5), vec![true]);
        assert_eq!(match_detections(&[g, g], &[g], 0.5), vec![true, false]);
        assert_eq!(match_detections(&[g], &[], 0.5), vec![false]);
        // IoU exactly at the threshold is not a match
        let half = b(0.0, 0.0, 10.0, 5.0, 1.0);
        assert_eq!(match_detections(&[half], &[g], 0.5), vec![false]);
    }

    #[test]
    fn curve_cases() {
        assert_eq!(pr_curve(&[true], 1).points, vec![(1.0, 1.0)]);
        assert_eq!(pr_curve(&[false, true], 1).points, vec![(0.0, 0.0), (1.0, 0.5)]);
        let c = pr_curve(&[false], 0);
        assert!(c.undefined_recall);
        assert_eq!(ap_11point(&c), 0.0);
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(ap_11point(&pr_curve(&[true], 1)), 1.0);
        assert_eq!(ap_11point(&pr_curve(&[false, false], 3)), 0.0);
        assert_eq!(ap_11point(&pr_curve(&[], 3)), 0.0);
        assert!((ap_11point(&pr_curve(&[true, false], 2)) - 6.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn evaluate_cases() {
        let gts = vec![
            BBox { class_id: 0, ..b(0.0, 0.0, 10.0, 10.0, 1.0) },
            BBox { class_id: 2, ..b(20.0, 20.0, 40.0, 30.0, 1.0) },
        ];
        let r = evaluate(&gts, &gts, 3, 0.5).unwrap();
        assert_eq!(r.map, 1.0);
        assert!(r.classes[1].excluded);
        let r = evaluate(&[], &gts, 3, 0.5).unwrap();
        assert_eq!(r.map, 0.0);
        assert_eq!(r.classes[0].fn_, 1);
        let r = evaluate(&[], &[], 3, 0.5).unwrap();
        assert!(r.empty_ground_truth);
        assert!(evaluate(&gts, &gts, 2, 0.5).is_err());
        assert!(r.to_table(&[]).contains("mAP 0.0000"));
    }
}
