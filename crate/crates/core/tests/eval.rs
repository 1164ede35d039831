use centerfpa::eval::{ap_11point, match_detections, pr_curve};
use centerfpa::{evaluate, BBox};
use proptest::prelude::*;

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let i = w * h;
    if i == 0.0 {
        0.0
    } else {
        i / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - i)
    }
}

/// Straight-line AP for one class: sort, match, accumulate precision and
/// recall, then average the interpolated precision at r = 0, 0.1, ..., 1.
fn scalar_ap(dets: &[BBox], gts: &[BBox], thr: f64) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut used = vec![false; gts.len()];
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let mut tp = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        let mut best = -1.0;
        let mut best_j = usize::MAX;
        for j in 0..gts.len() {
            let o = overlap(&dets[i], &gts[j]);
            if !used[j] && o > best {
                best = o;
                best_j = j;
            }
        }
        if best > thr {
            used[best_j] = true;
            tp += 1.0;
        }
        precision.push(tp / (rank as f64 + 1.0));
        recall.push(tp / gts.len() as f64);
    }
    let mut sum = 0.0;
    for step in 0..=10 {
        let r = step as f64 / 10.0;
        let mut p_max: f64 = 0.0;
        for k in 0..precision.len() {
            if recall[k] >= r {
                p_max = p_max.max(precision[k]);
            }
        }
        sum += p_max;
    }
    sum / 11.0
}

fn scene() -> impl Strategy<Value = (Vec<BBox>, Vec<BBox>)> {
    let gt = (0.0f64..80.0, 0.0f64..80.0, 5.0f64..20.0, 5.0f64..20.0, 0usize..3);
    (proptest::collection::vec(gt, 1..12), proptest::collection::vec((0usize..12, -4.0f64..4.0, 0u8..10, 0usize..3), 0..25))
        .prop_map(|(g, d)| {
            let gts: Vec<BBox> = g
                .into_iter()
                .map(|(x, y, w, h, c)| BBox { x1: x, y1: y, x2: x + w, y2: y + h, class_id: c, score: 1.0 })
                .collect();
            // detections jitter a ground truth (or land on a random class)
            let dets = d
                .into_iter()
                .map(|(i, jitter, s, c)| {
                    let g = gts[i % gts.len()];
                    BBox { x1: g.x1 + jitter, x2: g.x2 + jitter, class_id: if s % 4 == 0 { c } else { g.class_id }, score: s as f64 / 9.0, ..g }
                })
                .collect();
            (dets, gts)
        })
}

proptest! {
    #[test]
    fn per_class_ap_matches_scalar_reference((dets, gts) in scene()) {
        let report = evaluate(&dets, &gts, 3, 0.5).unwrap();
        let mut sum = 0.0;
        let mut counted = 0;
        for c in 0..3 {
            let cd: Vec<_> = dets.iter().filter(|d| d.class_id == c).copied().collect();
            let cg: Vec<_> = gts.iter().filter(|g| g.class_id == c).copied().collect();
            let r = &report.classes[c];
            prop_assert!((0.0..=1.0).contains(&r.ap));
            if cg.is_empty() {
                prop_assert!(r.excluded);
                continue;
            }
            let expected = scalar_ap(&cd, &cg, 0.5);
            prop_assert!((r.ap - expected).abs() <= 1e-9, "class {}: {} vs {}", c, r.ap, expected);
            sum += expected;
            counted += 1;
        }
        prop_assert!((report.map - sum / counted as f64).abs() <= 1e-9);
    }

    #[test]
    fn deleting_a_false_positive_never_lowers_ap((dets, gts) in scene()) {
        let mut sorted: Vec<_> = dets.iter().copied().filter(|d| d.class_id == 0).collect();
        sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
        let g0: Vec<_> = gts.iter().copied().filter(|g| g.class_id == 0).collect();
        let flags = match_detections(&sorted, &g0, 0.5);
        let ap = ap_11point(&pr_curve(&flags, g0.len()));
        for (i, &hit) in flags.iter().enumerate() {
            if !hit {
                let mut fewer = sorted.clone();
                fewer.remove(i);
                let ap2 = ap_11point(&pr_curve(&match_detections(&fewer, &g0, 0.5), g0.len()));
                prop_assert!(ap2 >= ap - 1e-12);
            }
        }
    }

    #[test]
    fn interpolated_precision_is_non_increasing(flags in proptest::collection::vec(any::<bool>(), 0..30), extra in 0usize..5) {
        let total = flags.iter().filter(|&&f| f).count() + extra;
        let curve = pr_curve(&flags, total.max(1));
        let interp: Vec<f64> = (0..=10)
            .map(|i| {
                let r = i as f64 / 10.0;
                curve.points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
            })
            .collect();
        prop_assert!(interp.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn reordering_equal_scores_keeps_the_true_positive_count(
        cells in proptest::collection::btree_set((0u32..6, 0u32..6), 1..10),
        picks in proptest::collection::vec((0usize..10, -3.0f64..3.0), 0..20),
        seed in any::<u64>(),
    ) {
        // ground truths on a 30 px grid never share a detection above IoU 0.5
        let gts: Vec<BBox> = cells
            .iter()
            .map(|&(i, j)| BBox::ground_truth(30.0 * i as f64, 30.0 * j as f64, 30.0 * i as f64 + 20.0, 30.0 * j as f64 + 20.0, 0).unwrap())
            .collect();
        let dets: Vec<BBox> = picks
            .iter()
            .map(|&(k, dx)| BBox { x1: gts[k % gts.len()].x1 + dx, x2: gts[k % gts.len()].x2 + dx, score: 0.5, ..gts[k % gts.len()] })
            .collect();
        let mut shuffled = dets.clone();
        let mut rng = centerfpa::SplitMix64::new(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.below(i as u64 + 1) as usize);
        }
        let a = evaluate(&dets, &gts, 1, 0.5).unwrap();
        let b = evaluate(&shuffled, &gts, 1, 0.5).unwrap();
        prop_assert_eq!(a.classes[0].tp, b.classes[0].tp);
    }
}

#[test]
fn hand_computed_fixture() {
    // two ground truths; a hit then a miss gives precision 1 up to recall 0.5
    let g = [
        BBox::ground_truth(0.0, 0.0, 10.0, 10.0, 0).unwrap(),
        BBox::ground_truth(50.0, 50.0, 60.0, 60.0, 0).unwrap(),
    ];
    let dets = [
        BBox::new(0.0, 0.0, 10.0, 10.0, 0, 0.9).unwrap(),
        BBox::new(20.0, 20.0, 30.0, 30.0, 0, 0.8).unwrap(),
    ];
    let r = evaluate(&dets, &g, 1, 0.5).unwrap();
    assert!((r.map - 6.0 / 11.0).abs() < 1e-12);
    assert_eq!((r.classes[0].tp, r.classes[0].fp, r.classes[0].fn_), (1, 1, 1));
    assert_eq!(evaluate(&g, &g, 1, 0.5).unwrap().map, 1.0);
    assert_eq!(evaluate(&[], &g, 1, 0.5).unwrap().map, 0.0);
}

#[test]
fn equal_scores_are_matched_in_input_order() {
    // `wide` overlaps both ground truths but prefers `left`; `narrow` only
    // matches `left`. Input order decides who gets `left`.
    let left = BBox::ground_truth(0.0, 0.0, 10.0, 10.0, 0).unwrap();
    let right = BBox::ground_truth(4.0, 0.0, 14.0, 10.0, 0).unwrap();
    let wide = BBox::new(1.0, 0.0, 11.0, 10.0, 0, 0.5).unwrap();
    let narrow = BBox::new(0.0, 0.0, 9.0, 10.0, 0, 0.5).unwrap();
    let gts = [left, right];
    assert_eq!(evaluate(&[wide, narrow], &gts, 1, 0.5).unwrap().classes[0].tp, 1);
    assert_eq!(evaluate(&[narrow, wide], &gts, 1, 0.5).unwrap().classes[0].tp, 2);
}
