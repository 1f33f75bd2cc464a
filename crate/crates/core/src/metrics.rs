//! COCO-style average precision: greedy matching, 101-point interpolation,
//! the 0.50:0.05:0.95 threshold sweep and the small-object subset.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::head::{BBox, Detection};

/// Objects with area below this (in square pixels) count as small.
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const RECALL_POINTS: usize = 101;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchFlag {
    Tp,
    Fp,
    /// Matched to an ignored ground truth, or an unmatched detection outside
    /// the evaluated area range. Excluded from both counts.
    Ignored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Detection indices in score order (descending, ties by input index).
    pub order: Vec<usize>,
    /// Flag per entry of `order`.
    pub flags: Vec<MatchFlag>,
    /// Matched ground-truth index per entry of `order`.
    pub matched_gt: Vec<Option<usize>>,
    /// Non-ignored ground truths left unmatched.
    pub unmatched_gt: usize,
}

/// Score order used everywhere: descending, stable by input index.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Each detection, in score order, takes the highest-IoU unmatched ground
/// truth with IoU >= `thresh` (ties by lower GT index).
pub fn match_greedy(dets: &[Detection], gts: &[BBox], thresh: f64) -> MatchResult {
    match_with_ignore(dets, gts, &vec![false; gts.len()], thresh, |_| true)
}

/// Greedy matching with COCO ignore rules: a detection prefers non-ignored
/// ground truths and only falls back to an ignored one when no regular
/// match exists; unmatched detections failing `det_in_range` are ignored.
pub fn match_with_ignore(
    dets: &[Detection],
    gts: &[BBox],
    gt_ignore: &[bool],
    thresh: f64,
    det_in_range: impl Fn(&BBox) -> bool,
) -> MatchResult {
    let order = score_order(dets);
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(order.len());
    let mut matched_gt = Vec::with_capacity(order.len());
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for pass_ignored in [false, true] {
            for (gi, gt) in gts.iter().enumerate() {
                if taken[gi] || gt_ignore[gi] != pass_ignored {
                    continue;
                }
                let v = iou(&dets[d].bbox, gt);
                if v >= thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if best.is_some() {
                break;
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                flags.push(if gt_ignore[gi] { MatchFlag::Ignored } else { MatchFlag::Tp });
                matched_gt.push(Some(gi));
            }
            None => {
                flags.push(if det_in_range(&dets[d].bbox) { MatchFlag::Fp } else { MatchFlag::Ignored });
                matched_gt.push(None);
            }
        }
    }
    let unmatched_gt = (0..gts.len()).filter(|&i| !taken[i] && !gt_ignore[i]).count();
    MatchResult {
        order,
        flags,
        matched_gt,
        unmatched_gt,
    }
}

/// Interpolated precision at recall `i / 100` for `i in 0..=100`.
///
/// Ties in score are broken pessimistically (false positives first) so the
/// result does not depend on the order images were processed.
pub fn interpolated_precision(scored: &[(f64, bool)], n_gt: usize) -> Vec<f64> {
    let mut out = vec![0.0; RECALL_POINTS];
    if n_gt == 0 {
        return out;
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(sorted.len());
    let mut precision = Vec::with_capacity(sorted.len());
    for &(_, is_tp) in &sorted {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    for (i, slot) in out.iter_mut().enumerate() {
        let r = i as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            *slot = precision[idx];
        }
    }
    out
}

/// 101-point interpolated AP over score-tagged TP/FP flags pooled across
/// images. Zero when there are no ground truths.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    let p = interpolated_precision(scored, n_gt);
    p.iter().sum::<f64>() / RECALL_POINTS as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    pub iou: f64,
    pub ap: f64,
    /// Interpolated precision at recall `i / 100`.
    pub precision: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub per_threshold: Vec<ThresholdCurve>,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_gt_small: usize,
}

pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn pooled_flags(
    dets: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    thresh: f64,
    in_range: impl Fn(&BBox) -> bool + Copy,
) -> (Vec<(f64, bool)>, usize) {
    let mut scored = Vec::new();
    let mut n_gt = 0;
    for (d, g) in dets.iter().zip(gts) {
        let ignore: Vec<bool> = g.iter().map(|b| !in_range(b)).collect();
        n_gt += ignore.iter().filter(|&&i| !i).count();
        let m = match_with_ignore(d, g, &ignore, thresh, in_range);
        for (&di, flag) in m.order.iter().zip(&m.flags) {
            match flag {
                MatchFlag::Tp => scored.push((d[di].score, true)),
                MatchFlag::Fp => scored.push((d[di].score, false)),
                MatchFlag::Ignored => {}
            }
        }
    }
    (scored, n_gt)
}

/// Full report. `dets[i]` and `gts[i]` belong to the same image.
pub fn coco_suite(dets: &[Vec<Detection>], gts: &[Vec<BBox>]) -> APReport {
    assert_eq!(dets.len(), gts.len(), "detections and ground truths must cover the same images");
    let all = |_: &BBox| true;
    let small = |b: &BBox| b.area() < SMALL_AREA;
    let mut per_threshold = Vec::new();
    let mut small_aps = Vec::new();
    let mut n_gt = 0;
    let mut n_gt_small = 0;
    for t in iou_thresholds() {
        let (scored, n) = pooled_flags(dets, gts, t, all);
        let precision = interpolated_precision(&scored, n);
        let ap = precision.iter().sum::<f64>() / RECALL_POINTS as f64;
        per_threshold.push(ThresholdCurve { iou: t, ap, precision });
        n_gt = n;
        let (scored_s, ns) = pooled_flags(dets, gts, t, small);
        small_aps.push(average_precision(&scored_s, ns));
        n_gt_small = ns;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    APReport {
        ap: mean(&per_threshold.iter().map(|c| c.ap).collect::<Vec<_>>()),
        ap50: per_threshold[0].ap,
        ap75: per_threshold[5].ap,
        ap_s: mean(&small_aps),
        per_threshold,
        n_images: dets.len(),
        n_gt,
        n_gt_small,
    }
}

/// `iou,recall,precision` rows, one per threshold and recall point.
pub fn pr_csv(report: &APReport) -> String {
    let mut s = String::from("iou,recall,precision\n");
    for c in &report.per_threshold {
        for (i, p) in c.precision.iter().enumerate() {
            let _ = writeln!(s, "{:.2},{:.2},{}", c.iou, i as f64 / 100.0, p);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x1, y1, x2, y2),
            score,
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_eq!(iou(&a, &BBox::new(2.0, 0.0, 3.0, 2.0)), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn greedy_single_match_rule() {
        let gt = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        let m = match_greedy(&[det(0.0, 0.0, 10.0, 10.0, 0.9)], &gt, 0.5);
        assert_eq!(m.flags, vec![MatchFlag::Tp]);
        let m = match_greedy(&[det(0.0, 0.0, 10.0, 10.0, 0.4), det(1.0, 0.0, 10.0, 10.0, 0.8)], &gt, 0.5);
        assert_eq!(m.order, vec![1, 0]);
        assert_eq!(m.flags, vec![MatchFlag::Tp, MatchFlag::Fp]);
        assert_eq!(m.unmatched_gt, 0);
    }

    /// Exhaustive search over every partial one-to-one assignment. The
    /// winner maximises, detection by detection in score order, the matched
    /// IoU (unmatched counts as -1), then prefers the lower GT index.
    fn brute_force(dets: &[Detection], gts: &[BBox], thresh: f64) -> Vec<Option<usize>> {
        let order = score_order(dets);
        let mut best: Option<(Vec<(f64, i64)>, Vec<Option<usize>>)> = None;
        fn rec(
            k: usize,
            order: &[usize],
            dets: &[Detection],
            gts: &[BBox],
            thresh: f64,
            used: &mut Vec<bool>,
            cur: &mut Vec<Option<usize>>,
            best: &mut Option<(Vec<(f64, i64)>, Vec<Option<usize>>)>,
        ) {
            if k == order.len() {
                let key: Vec<(f64, i64)> = cur
                    .iter()
                    .zip(order)
                    .map(|(m, &d)| match m {
                        Some(g) => (iou(&dets[d].bbox, &gts[*g]), -(*g as i64)),
                        None => (-1.0, 0),
                    })
                    .collect();
                let better = match best {
                    None => true,
                    Some((bk, _)) => key.partial_cmp(bk) == Some(std::cmp::Ordering::Greater),
                };
                if better {
                    *best = Some((key, cur.clone()));
                }
                return;
            }
            cur.push(None);
            rec(k + 1, order, dets, gts, thresh, used, cur, best);
            cur.pop();
            for g in 0..gts.len() {
                if !used[g] && iou(&dets[order[k]].bbox, &gts[g]) >= thresh {
                    used[g] = true;
                    cur.push(Some(g));
                    rec(k + 1, order, dets, gts, thresh, used, cur, best);
                    cur.pop();
                    used[g] = false;
                }
            }
        }
        rec(0, &order, dets, gts, thresh, &mut vec![false; gts.len()], &mut Vec::new(), &mut best);
        best.unwrap().1
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<BBox>) {
        let n_gt = rng.gen_range(0..=5);
        let n_det = rng.gen_range(0..=10);
        let boxes = |n: usize, rng: &mut ChaCha8Rng| -> Vec<BBox> {
            (0..n)
                .map(|_| {
                    let x = rng.gen_range(0.0..12.0);
                    let y = rng.gen_range(0.0..12.0);
                    BBox::new(x, y, x + rng.gen_range(2.0..8.0), y + rng.gen_range(2.0..8.0))
                })
                .collect()
        };
        let gts = boxes(n_gt, rng);
        let dets = boxes(n_det, rng)
            .into_iter()
            .map(|b| Detection {
                bbox: b,
                // coarse scores so ties occur
                score: rng.gen_range(0..5) as f64 / 4.0,
            })
            .collect();
        (dets, gts)
    }

    #[test]
    fn greedy_equals_exhaustive_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let (dets, gts) = random_instance(&mut rng);
            let thresh = [0.1, 0.3, 0.5][rng.gen_range(0..3)];
            let m = match_greedy(&dets, &gts, thresh);
            assert_eq!(m.matched_gt, brute_force(&dets, &gts, thresh));
        }
    }

    #[test]
    fn ap_staircases() {
        assert_eq!(average_precision(&[(0.9, true)], 1), 1.0);
        assert_eq!(average_precision(&[(0.9, false)], 1), 0.0);
        assert_eq!(average_precision(&[], 3), 0.0);
        // P = 1 up to R = 0.5 (51 grid points), then 2/3 (50 points)
        let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2);
        assert!((ap - 253.0 / 303.0).abs() < 1e-12, "{ap}");
        // half recall only
        let ap = average_precision(&[(0.9, true)], 2);
        assert!((ap - 51.0 / 101.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ap_monotone_when_fp_becomes_tp(flags in proptest::collection::vec(any::<bool>(), 1..20), pick in 0usize..20, extra in 0usize..4) {
            let scored: Vec<(f64, bool)> = flags.iter().enumerate().map(|(i, &f)| (1.0 - i as f64 / 32.0, f)).collect();
            let n_gt = flags.iter().filter(|&&f| f).count() + 1 + extra;
            let base = average_precision(&scored, n_gt);
            prop_assert!((0.0..=1.0).contains(&base));
            let i = pick % scored.len();
            if !scored[i].1 {
                let mut up = scored.clone();
                up[i].1 = true;
                prop_assert!(average_precision(&up, n_gt) >= base - 1e-15);
            }
        }
    }

    fn gt_sets() -> Vec<Vec<BBox>> {
        vec![
            vec![BBox::new(2.0, 2.0, 12.0, 12.0), BBox::new(40.0, 40.0, 90.0, 90.0)],
            vec![BBox::new(20.0, 30.0, 30.0, 36.0)],
            vec![],
        ]
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let gts = gt_sets();
        let perfect: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| g.iter().map(|b| Detection { bbox: *b, score: 0.9 }).collect())
            .collect();
        let r = coco_suite(&perfect, &gts);
        assert_eq!((r.ap, r.ap50, r.ap75, r.ap_s), (1.0, 1.0, 1.0, 1.0));
        assert_eq!((r.n_gt, r.n_gt_small, r.n_images), (3, 2, 3));
        let none = vec![vec![]; 3];
        let r = coco_suite(&none, &gts);
        assert_eq!((r.ap, r.ap50, r.ap75, r.ap_s), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn only_large_detected_gives_zero_small_ap() {
        let gts = gt_sets();
        let dets = vec![vec![Detection { bbox: gts[0][1], score: 0.8 }], vec![], vec![]];
        let r = coco_suite(&dets, &gts);
        assert_eq!(r.ap_s, 0.0);
        assert!(r.ap50 > 0.0);
    }

    #[test]
    fn detections_on_large_objects_do_not_hurt_small_ap() {
        let gts = gt_sets();
        let mut dets: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| g.iter().filter(|b| b.area() < SMALL_AREA).map(|b| Detection { bbox: *b, score: 0.5 }).collect())
            .collect();
        let base = coco_suite(&dets, &gts).ap_s;
        // higher-scored hit on the large object, plus a large unmatched box
        dets[0].push(Detection { bbox: gts[0][1], score: 0.9 });
        dets[2].push(det(0.0, 0.0, 60.0, 60.0, 0.95));
        assert_eq!(coco_suite(&dets, &gts).ap_s, base);
        // a small false positive does count
        dets[2].push(det(0.0, 0.0, 6.0, 6.0, 0.99));
        assert!(coco_suite(&dets, &gts).ap_s < base);
    }

    #[test]
    fn suite_invariant_to_image_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..6 {
            let (d, g) = random_instance(&mut rng);
            dets.push(d);
            gts.push(g);
        }
        let a = coco_suite(&dets, &gts);
        dets.reverse();
        gts.reverse();
        let b = coco_suite(&dets, &gts);
        assert_eq!(a.ap, b.ap);
        assert_eq!(a.ap_s, b.ap_s);
        assert!(a.ap <= a.per_threshold.iter().map(|c| c.ap).fold(0.0, f64::max) + 1e-15);
    }

    #[test]
    fn csv_has_a_row_per_point() {
        let gts = gt_sets();
        let r = coco_suite(&vec![vec![]; 3], &gts);
        let csv = pr_csv(&r);
        assert_eq!(csv.lines().count(), 1 + 10 * RECALL_POINTS);
        assert!(csv.lines().nth(1).unwrap().starts_with("0.50,0.00,"));
    }
}
