//! Detection evaluation: record-file parsing, greedy IoU matching,
//! all-point-interpolated average precision and COCO-style mAP over the
//! 0.50:0.05:0.95 threshold ladder.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::{iou, BBox};

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub class_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Parse whitespace-separated records, one per line:
/// `image_id class_id cx cy w h` plus a trailing `score` when
/// `with_score`. `#` starts a comment; blank lines are skipped.
fn parse_records(text: &str, with_score: bool) -> Result<Vec<(String, usize, BBox, f64)>> {
    let want = if with_score { 7 } else { 6 };
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != want {
            return Err(Error::parse(
                lineno,
                format!("expected {want} fields, got {}", fields.len()),
            ));
        }
        let class_id: usize = fields[1]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad class id `{}`", fields[1])))?;
        let mut nums = [0.0f64; 5];
        for (i, f) in fields[2..].iter().enumerate() {
            nums[i] = f
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad number `{f}`")))?;
        }
        let bbox = BBox::new(nums[0], nums[1], nums[2], nums[3])
            .map_err(|e| Error::parse(lineno, e.to_string()))?;
        let score = if with_score { nums[4] } else { 0.0 };
        if with_score && !(0.0..=1.0).contains(&score) {
            return Err(Error::parse(lineno, format!("score {score} outside [0, 1]")));
        }
        out.push((fields[0].to_string(), class_id, bbox, score));
    }
    Ok(out)
}

pub fn parse_ground_truths(text: &str) -> Result<Vec<GroundTruth>> {
    Ok(parse_records(text, false)?
        .into_iter()
        .map(|(image_id, class_id, bbox, _)| GroundTruth {
            image_id,
            class_id,
            bbox,
        })
        .collect())
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    Ok(parse_records(text, true)?
        .into_iter()
        .map(|(image_id, class_id, bbox, score)| Detection {
            image_id,
            class_id,
            bbox,
            score,
        })
        .collect())
}

/// Match detections of one class against ground truths at one IoU threshold.
/// Detections are visited in descending score order (ties keep input order);
/// each claims the unmatched ground truth with the highest IoU at or above
/// the threshold. Returns, per detection in visit order, whether it is a TP.
fn match_class(
    dets: &[&Detection],
    gts: &[&GroundTruth],
    threshold: f64,
) -> (Vec<bool>, usize) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut claimed = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for &di in &order {
        let d = dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if claimed[gi] || g.image_id != d.image_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                claimed[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    let matched = claimed.iter().filter(|&&c| c).count();
    (tp, matched)
}

/// All-point-interpolated AP from a TP flag sequence (descending score
/// order) and the total ground-truth count: area under the
/// precision-envelope-vs-recall curve.
pub fn average_precision(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // precision envelope: running max from the right
    let mut env = points.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i].1 = env[i].1.max(env[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(r, p) in &env {
        if r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    ap
}

#[derive(Debug, Clone)]
pub struct ClassEval {
    pub class_id: usize,
    /// AP per threshold, aligned with `EvalResult::thresholds`.
    pub ap: Vec<f64>,
    pub n_gt: usize,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub thresholds: Vec<f64>,
    pub per_class: Vec<ClassEval>,
    /// Classes present in detections but with no ground truths; excluded
    /// from the means.
    pub skipped_classes: Vec<usize>,
    pub map50: f64,
    pub map50_95: f64,
    /// TP / FP / FN counts at IoU 0.5.
    pub tp50: usize,
    pub fp50: usize,
    pub fn50: usize,
}

/// The 0.50:0.05:0.95 ladder, generated from integer percentages so each
/// threshold is the exact nearest double of its decimal value.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

pub fn evaluate(dets: &[Detection], gts: &[GroundTruth]) -> Result<EvalResult> {
    if gts.is_empty() {
        return Err(Error::config("no ground truths to evaluate against"));
    }
    let thresholds = coco_thresholds();

    let mut classes: BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
    let det_classes: BTreeSet<usize> = dets.iter().map(|d| d.class_id).collect();
    let skipped_classes: Vec<usize> = det_classes.difference(&classes).copied().collect();
    classes.extend(det_classes.iter());

    let mut per_class = Vec::new();
    let mut tp50 = 0;
    let mut fp50 = 0;
    let mut fn50 = 0;

    for &class_id in &classes {
        let cd: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class_id).collect();
        let cg: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class_id).collect();
        if cg.is_empty() {
            // detections for an absent class: counted as FP at 0.5, but the
            // class contributes no AP term
            fp50 += cd.len();
            continue;
        }
        let mut ap = Vec::with_capacity(thresholds.len());
        for (ti, &thr) in thresholds.iter().enumerate() {
            let (tp_flags, matched) = match_class(&cd, &cg, thr);
            ap.push(average_precision(&tp_flags, cg.len()));
            if ti == 0 {
                let tps = tp_flags.iter().filter(|&&t| t).count();
                tp50 += tps;
                fp50 += tp_flags.len() - tps;
                fn50 += cg.len() - matched;
            }
        }
        per_class.push(ClassEval {
            class_id,
            ap,
            n_gt: cg.len(),
        });
    }

    if per_class.is_empty() {
        return Err(Error::config("no class has both ground truths and a defined AP"));
    }
    let n = per_class.len() as f64;
    let map50 = per_class.iter().map(|c| c.ap[0]).sum::<f64>() / n;
    let map50_95 = per_class
        .iter()
        .map(|c| c.ap.iter().sum::<f64>() / c.ap.len() as f64)
        .sum::<f64>()
        / n;

    Ok(EvalResult {
        thresholds,
        per_class,
        skipped_classes,
        map50,
        map50_95,
        tp50,
        fp50,
        fn50,
    })
}

impl EvalResult {
    /// Fixed-precision textual report (6 decimals), stable across runs.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.per_class {
            let mean = c.ap.iter().sum::<f64>() / c.ap.len() as f64;
            let _ = writeln!(
                out,
                "class {} gt {} ap50 {:.6} ap50_95 {:.6}",
                c.class_id, c.n_gt, c.ap[0], mean
            );
        }
        for &c in &self.skipped_classes {
            let _ = writeln!(out, "class {c} skipped (no ground truths)");
        }
        for c in &self.per_class {
            for (thr, ap) in self.thresholds.iter().zip(&c.ap) {
                let _ = writeln!(out, "ap {} {thr:.2} {ap:.6}", c.class_id);
            }
        }
        let _ = writeln!(out, "tp50 {} fp50 {} fn50 {}", self.tp50, self.fp50, self.fn50);
        let _ = writeln!(out, "map50 {:.6}", self.map50);
        let _ = writeln!(out, "map50_95 {:.6}", self.map50_95);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(img: &str, cls: usize, cx: f64, cy: f64, w: f64, h: f64) -> GroundTruth {
        GroundTruth {
            image_id: img.into(),
            class_id: cls,
            bbox: BBox::new(cx, cy, w, h).unwrap(),
        }
    }

    fn det(img: &str, cls: usize, cx: f64, cy: f64, w: f64, h: f64, s: f64) -> Detection {
        Detection {
            image_id: img.into(),
            class_id: cls,
            bbox: BBox::new(cx, cy, w, h).unwrap(),
            score: s,
        }
    }

    #[test]
    fn thresholds_are_exact_decimals() {
        let t = coco_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.50);
        assert_eq!(t[2], 0.60);
        assert_eq!(t[9], 0.95);
    }

    #[test]
    fn perfect_single_detection() {
        let gts = vec![gt("a", 0, 10.0, 10.0, 4.0, 4.0)];
        let dets = vec![det("a", 0, 10.0, 10.0, 4.0, 4.0, 0.9)];
        let r = evaluate(&dets, &gts).unwrap();
        assert_eq!(r.map50, 1.0);
        assert_eq!(r.map50_95, 1.0);
        assert_eq!((r.tp50, r.fp50, r.fn50), (1, 0, 0));
    }

    #[test]
    fn one_tp_one_fp_precision_half_at_gt() {
        // TP scored above FP: P-R points (1.0@r=1), envelope keeps AP = 1.0.
        let gts = vec![gt("a", 0, 10.0, 10.0, 4.0, 4.0)];
        let dets = vec![
            det("a", 0, 10.0, 10.0, 4.0, 4.0, 0.9),
            det("a", 0, 50.0, 50.0, 4.0, 4.0, 0.3),
        ];
        let r = evaluate(&dets, &gts).unwrap();
        assert_eq!(r.map50, 1.0);
        assert_eq!((r.tp50, r.fp50, r.fn50), (1, 1, 0));
        // FP scored above TP: precision at recall 1 is 1/2, AP = 0.5
        let dets2 = vec![
            det("a", 0, 50.0, 50.0, 4.0, 4.0, 0.9),
            det("a", 0, 10.0, 10.0, 4.0, 4.0, 0.3),
        ];
        let r2 = evaluate(&dets2, &gts).unwrap();
        assert_eq!(r2.map50, 0.5);
    }

    #[test]
    fn duplicate_detection_is_fp() {
        // both detections overlap the single GT; the higher-scored one
        // claims it, the second becomes FP
        let gts = vec![gt("a", 0, 10.0, 10.0, 4.0, 4.0)];
        let dets = vec![
            det("a", 0, 10.0, 10.0, 4.0, 4.0, 0.9),
            det("a", 0, 10.0, 10.0, 4.0, 4.0, 0.8),
        ];
        let r = evaluate(&dets, &gts).unwrap();
        assert_eq!((r.tp50, r.fp50, r.fn50), (1, 1, 0));
    }

    #[test]
    fn cross_image_ids_never_match() {
        let gts = vec![gt("a", 0, 10.0, 10.0, 4.0, 4.0)];
        let dets = vec![det("b", 0, 10.0, 10.0, 4.0, 4.0, 0.9)];
        let r = evaluate(&dets, &gts).unwrap();
        assert_eq!((r.tp50, r.fp50, r.fn50), (0, 1, 1));
        assert_eq!(r.map50, 0.0);
    }

    #[test]
    fn zero_gt_class_skipped_and_flagged() {
        let gts = vec![gt("a", 0, 10.0, 10.0, 4.0, 4.0)];
        let dets = vec![
            det("a", 0, 10.0, 10.0, 4.0, 4.0, 0.9),
            det("a", 3, 10.0, 10.0, 4.0, 4.0, 0.9),
        ];
        let r = evaluate(&dets, &gts).unwrap();
        assert_eq!(r.skipped_classes, vec![3]);
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.map50, 1.0);
        assert_eq!(r.fp50, 1);
    }

    #[test]
    fn greedy_matching_prefers_highest_iou() {
        // one detection overlapping two GTs; must claim the higher-IoU one
        let gts = vec![
            gt("a", 0, 10.0, 10.0, 4.0, 4.0),
            gt("a", 0, 12.0, 10.0, 4.0, 4.0),
        ];
        let dets = vec![det("a", 0, 11.5, 10.0, 4.0, 4.0, 0.9)];
        let r = evaluate(&dets, &gts).unwrap();
        assert_eq!((r.tp50, r.fp50, r.fn50), (1, 0, 1));
    }

    #[test]
    fn parse_rejects_bad_lines_with_line_numbers() {
        let e = parse_ground_truths("a 0 1 1 2 2\nb 0 1 1\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = parse_detections("a 0 1 1 2 2 1.5\n").unwrap_err();
        assert!(e.to_string().contains("outside"), "{e}");
        let e = parse_ground_truths("a 0 1 1 -2 2\n").unwrap_err();
        assert!(e.to_string().contains("line 1"), "{e}");
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let gts = parse_ground_truths("# header\n\na 0 1 1 2 2  # trailing\n").unwrap();
        assert_eq!(gts.len(), 1);
    }

    #[test]
    fn ap_is_fraction_for_partial_recall() {
        // 2 GTs, 1 TP at top score: envelope gives AP = 0.5
        let gts = vec![
            gt("a", 0, 10.0, 10.0, 4.0, 4.0),
            gt("a", 0, 50.0, 50.0, 4.0, 4.0),
        ];
        let dets = vec![det("a", 0, 10.0, 10.0, 4.0, 4.0, 0.9)];
        let r = evaluate(&dets, &gts).unwrap();
        assert_eq!(r.map50, 0.5);
        assert_eq!((r.tp50, r.fp50, r.fn50), (1, 0, 1));
    }
}
