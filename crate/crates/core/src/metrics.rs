//! Detector and classifier evaluation: IoU, VOC-style average precision
//! (all-points interpolation), precision/recall/F1 and ROC AUC.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::Detection;
use crate::geo::PixelBox;
use crate::timeline::{ClassificationResult, CrownLabel};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One labelled box; the JSON-lines annotation format uses these keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_ref: String,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub label: String,
}

/// A detection as seen by the evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image_ref: String,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub score: f64,
    pub label: String,
}

impl From<&Detection> for ScoredBox {
    fn from(d: &Detection) -> Self {
        ScoredBox {
            image_ref: d.request.image_ref.clone(),
            bbox: d.bbox,
            score: d.score,
            label: d.label.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// One point per ranked detection, recall non-decreasing.
    pub points: Vec<PrPoint>,
    /// `None` when there is neither ground truth nor a detection.
    pub ap: Option<f64>,
}

fn box_order(a: &PixelBox, b: &PixelBox) -> Ordering {
    a.as_array()
        .iter()
        .zip(b.as_array().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Ranking used for matching: descending score, then box, then image.
fn rank(dets: &[&ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .total_cmp(&dets[i].score)
            .then_with(|| box_order(&dets[i].bbox, &dets[j].bbox))
            .then_with(|| dets[i].image_ref.cmp(&dets[j].image_ref))
    });
    order
}

/// Greedy matching of detections to ground truth of one class. Returns the
/// true-positive flag for each detection in ranked order.
fn match_ranked(dets: &[&ScoredBox], gts: &[&GroundTruthBox], threshold: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    rank(dets)
        .into_iter()
        .map(|i| {
            let d = dets[i];
            let best = gts
                .iter()
                .enumerate()
                .filter(|(_, g)| g.image_ref == d.image_ref)
                .map(|(k, g)| (k, iou(&d.bbox, &g.bbox)))
                .fold(None::<(usize, f64)>, |acc, (k, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((k, v)),
                });
            match best {
                Some((k, v)) if v >= threshold && !used[k] => {
                    used[k] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Area under the monotone precision envelope over the recall steps.
fn area_all_points(points: &[PrPoint]) -> f64 {
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    for p in points {
        recall.push(p.recall);
        precision.push(p.precision);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .filter(|&i| recall[i] != recall[i - 1])
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

/// Average precision for a single class (labels are ignored; filter first).
pub fn average_precision(
    dets: &[ScoredBox],
    gts: &[GroundTruthBox],
    iou_threshold: f64,
) -> PrCurve {
    let d: Vec<&ScoredBox> = dets.iter().collect();
    let g: Vec<&GroundTruthBox> = gts.iter().collect();
    curve_for(&d, &g, iou_threshold)
}

fn curve_for(dets: &[&ScoredBox], gts: &[&GroundTruthBox], threshold: f64) -> PrCurve {
    if gts.is_empty() {
        return PrCurve {
            points: Vec::new(),
            ap: if dets.is_empty() { None } else { Some(0.0) },
        };
    }
    let flags = match_ranked(dets, gts, threshold);
    let total = gts.len() as f64;
    let mut tp = 0usize;
    let points: Vec<PrPoint> = flags
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            tp += usize::from(hit);
            PrPoint {
                recall: tp as f64 / total,
                precision: tp as f64 / (k + 1) as f64,
            }
        })
        .collect();
    let ap = area_all_points(&points);
    PrCurve {
        points,
        ap: Some(ap),
    }
}

/// Per-class AP and their mean over classes where AP is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub per_class: BTreeMap<String, Option<f64>>,
    pub map: Option<f64>,
}

pub fn mean_average_precision(
    dets: &[ScoredBox],
    gts: &[GroundTruthBox],
    iou_threshold: f64,
) -> MapReport {
    let labels: BTreeSet<&str> = dets
        .iter()
        .map(|d| d.label.as_str())
        .chain(gts.iter().map(|g| g.label.as_str()))
        .collect();
    let per_class: BTreeMap<String, Option<f64>> = labels
        .into_iter()
        .map(|label| {
            let d: Vec<&ScoredBox> = dets.iter().filter(|x| x.label == label).collect();
            let g: Vec<&GroundTruthBox> = gts.iter().filter(|x| x.label == label).collect();
            (label.to_string(), curve_for(&d, &g, iou_threshold).ap)
        })
        .collect();
    let defined: Vec<f64> = per_class.values().flatten().copied().collect();
    let map = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    MapReport { per_class, map }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when only one true class is present.
    pub auc: Option<f64>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
}

/// Binary metrics with "infested" as the positive class. Precision, recall
/// and F1 are 0 when their denominators vanish.
pub fn classification_metrics(
    pairs: &[(CrownLabel, ClassificationResult)],
) -> Result<ClassificationMetrics> {
    if pairs.is_empty() {
        return Err(Error::domain(
            "classification metrics need at least one pair",
        ));
    }
    let (mut tp, mut fp, mut fneg, mut tn) = (0, 0, 0, 0);
    for (truth, result) in pairs {
        let actual = *truth == CrownLabel::Infested;
        let predicted = result.probs.argmax() == CrownLabel::Infested;
        match (actual, predicted) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let scored: Vec<(f64, bool)> = pairs
        .iter()
        .map(|(t, r)| (r.probs.infested, *t == CrownLabel::Infested))
        .collect();
    Ok(ClassificationMetrics {
        precision,
        recall,
        f1,
        auc: roc_auc(&scored),
        true_positives: tp,
        false_positives: fp,
        false_negatives: fneg,
        true_negatives: tn,
    })
}

/// ROC AUC via the Mann–Whitney rank statistic with midranks for ties.
pub fn roc_auc(scored: &[(f64, bool)]) -> Option<f64> {
    let positives = scored.iter().filter(|(_, p)| *p).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].0 == scored[order[i]].0 {
            j += 1;
        }
        // ranks are 1-based; tied block i..=j shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| scored[k].1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthBox>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeline::ClassProbs;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pb(v: [f64; 4]) -> PixelBox {
        PixelBox::try_from(v).unwrap()
    }

    fn gt(img: &str, v: [f64; 4]) -> GroundTruthBox {
        GroundTruthBox {
            image_ref: img.into(),
            bbox: pb(v),
            label: "palm".into(),
        }
    }

    fn det(img: &str, v: [f64; 4], score: f64) -> ScoredBox {
        ScoredBox {
            image_ref: img.into(),
            bbox: pb(v),
            score,
            label: "palm".into(),
        }
    }

    #[test]
    fn iou_cases() {
        let a = pb([0.0, 0.0, 2.0, 2.0]);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &pb([5.0, 5.0, 6.0, 6.0])), 0.0);
        // overlap 2, union 6
        assert!((iou(&a, &pb([1.0, 0.0, 3.0, 2.0])) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &pb([2.0, 0.0, 3.0, 2.0])), 0.0);
    }

    #[test]
    fn perfect_detector() {
        let gts = vec![
            gt("a", [0.0, 0.0, 10.0, 10.0]),
            gt("a", [20.0, 20.0, 30.0, 30.0]),
            gt("b", [1.0, 1.0, 4.0, 4.0]),
        ];
        let dets: Vec<ScoredBox> = gts
            .iter()
            .map(|g| det(&g.image_ref, g.bbox.as_array(), 1.0))
            .collect();
        assert_eq!(average_precision(&dets, &gts, 0.5).ap, Some(1.0));
    }

    #[test]
    fn all_misses_score_zero() {
        let gts = vec![gt("a", [0.0, 0.0, 10.0, 10.0])];
        let dets = vec![
            det("a", [8.0, 8.0, 20.0, 20.0], 0.9),
            det("b", [0.0, 0.0, 10.0, 10.0], 0.8),
        ];
        assert_eq!(average_precision(&dets, &gts, 0.5).ap, Some(0.0));
    }

    #[test]
    fn empty_inputs() {
        assert_eq!(average_precision(&[], &[], 0.5).ap, None);
        assert_eq!(
            average_precision(&[det("a", [0.0, 0.0, 1.0, 1.0], 0.5)], &[], 0.5).ap,
            Some(0.0)
        );
        assert_eq!(
            average_precision(&[], &[gt("a", [0.0, 0.0, 1.0, 1.0])], 0.5).ap,
            Some(0.0)
        );
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let gts = vec![gt("a", [0.0, 0.0, 10.0, 10.0])];
        let dets = vec![
            det("a", [0.0, 0.0, 10.0, 10.0], 0.9),
            det("a", [0.0, 0.0, 10.0, 9.0], 0.8),
        ];
        let curve = average_precision(&dets, &gts, 0.5);
        assert_eq!(curve.points[1].precision, 0.5);
        assert_eq!(curve.ap, Some(1.0));
    }

    #[test]
    fn map_over_classes() {
        let mut gts = vec![gt("a", [0.0, 0.0, 10.0, 10.0])];
        let mut other = gt("a", [50.0, 50.0, 60.0, 60.0]);
        other.label = "crown".into();
        gts.push(other);
        let dets = vec![det("a", [0.0, 0.0, 10.0, 10.0], 0.9)];
        let report = mean_average_precision(&dets, &gts, 0.5);
        assert_eq!(report.per_class["palm"], Some(1.0));
        assert_eq!(report.per_class["crown"], Some(0.0));
        assert_eq!(report.map, Some(0.5));
    }

    fn all_correct_result(label: CrownLabel) -> ClassificationResult {
        ClassificationResult::from_probs(ClassProbs::one_hot(label)).unwrap()
    }

    #[test]
    fn classification_extremes() {
        let perfect: Vec<(CrownLabel, ClassificationResult)> = [
            CrownLabel::Healthy,
            CrownLabel::Infested,
            CrownLabel::Infested,
        ]
        .iter()
        .map(|&l| (l, all_correct_result(l)))
        .collect();
        let m = classification_metrics(&perfect).unwrap();
        assert_eq!(
            (m.precision, m.recall, m.f1, m.auc),
            (1.0, 1.0, 1.0, Some(1.0))
        );

        let inverted: Vec<(CrownLabel, ClassificationResult)> =
            [CrownLabel::Healthy, CrownLabel::Infested]
                .iter()
                .map(|&l| {
                    let flipped = if l == CrownLabel::Infested {
                        CrownLabel::Healthy
                    } else {
                        CrownLabel::Infested
                    };
                    (l, all_correct_result(flipped))
                })
                .collect();
        let m = classification_metrics(&inverted).unwrap();
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.auc, Some(0.0));

        let single = vec![(
            CrownLabel::Infested,
            all_correct_result(CrownLabel::Infested),
        )];
        assert_eq!(classification_metrics(&single).unwrap().auc, None);
        assert!(classification_metrics(&[]).is_err());
    }

    // O(n^2) pairwise AUC: P(score_pos > score_neg) + 0.5 P(tie).
    fn pairwise_auc(scored: &[(f64, bool)]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (sp, p) in scored {
            if !p {
                continue;
            }
            for (sn, n) in scored {
                if *n {
                    continue;
                }
                pairs += 1.0;
                if sp > sn {
                    wins += 1.0;
                } else if sp == sn {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let scored: Vec<(f64, bool)> = (0..50)
                .map(|_| {
                    // coarse scores force ties
                    let s = (rng.random::<f64>() * 20.0).floor() / 20.0;
                    (s, rng.random::<f64>() < 0.4)
                })
                .collect();
            if scored.iter().all(|x| x.1) || scored.iter().all(|x| !x.1) {
                continue;
            }
            let a = roc_auc(&scored).unwrap();
            assert!((a - pairwise_auc(&scored)).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&a));
        }
    }

    proptest::proptest! {
        #[test]
        fn equal_score_permutation_keeps_ap(
            boxes in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0, 1.0f64..20.0, 0u8..3), 1..12),
            gts in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0, 1.0f64..20.0), 1..6),
        ) {
            let g: Vec<GroundTruthBox> = gts.iter().map(|(x, y, s)| gt("a", [*x, *y, x + s, y + s])).collect();
            let d: Vec<ScoredBox> = boxes.iter().map(|(x, y, s, q)| det("a", [*x, *y, x + s, y + s], f64::from(*q) / 4.0 + 0.25)).collect();
            let mut rev = d.clone();
            rev.reverse();
            let a = average_precision(&d, &g, 0.5).ap.unwrap();
            let b = average_precision(&rev, &g, 0.5).ap.unwrap();
            proptest::prop_assert_eq!(a, b);
            proptest::prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn removing_true_positive_never_raises_ap(
            boxes in proptest::collection::vec((0.0f64..40.0, 0.0f64..40.0, 0.0f64..1.0), 1..10),
            jitter in proptest::collection::vec(-3.0f64..3.0, 10),
            scores in proptest::collection::vec(0.0f64..1.0, 10),
        ) {
            let g: Vec<GroundTruthBox> = boxes.iter().map(|(x, y, _)| gt("a", [*x, *y, x + 10.0, y + 10.0])).collect();
            let mut d: Vec<ScoredBox> = boxes
                .iter()
                .zip(&jitter)
                .zip(&scores)
                .map(|(((x, y, _), j), s)| det("a", [x + j.abs(), y + j.abs(), x + 10.0 + j.abs(), y + 10.0], *s))
                .collect();
            d.push(det("a", [100.0, 100.0, 110.0, 110.0], 0.55));
            let full = average_precision(&d, &g, 0.5);
            let dv: Vec<&ScoredBox> = d.iter().collect();
            let gv: Vec<&GroundTruthBox> = g.iter().collect();
            let flags = match_ranked(&dv, &gv, 0.5);
            let ranked = rank(&dv);
            for (pos, &is_tp) in flags.iter().enumerate() {
                if !is_tp {
                    continue;
                }
                // a competing detection could claim the freed ground truth
                let removed = dv[ranked[pos]];
                let contested = g.iter().any(|t| {
                    iou(&removed.bbox, &t.bbox) >= 0.5
                        && d.iter().enumerate().any(|(k, o)| k != ranked[pos] && iou(&o.bbox, &t.bbox) >= 0.5)
                });
                if contested {
                    continue;
                }
                let mut fewer = d.clone();
                fewer.remove(ranked[pos]);
                let ap = average_precision(&fewer, &g, 0.5).ap.unwrap();
                proptest::prop_assert!(ap <= full.ap.unwrap() + 1e-12);
            }
        }
    }

    #[test]
    fn annotation_lines_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.jsonl");
        std::fs::write(
            &path,
            "{\"image_ref\":\"t/1.png\",\"box\":[1,2,30,40],\"label\":\"palm\"}\n\n",
        )
        .unwrap();
        let gts = read_ground_truth(&path).unwrap();
        assert_eq!(gts, vec![gt("t/1.png", [1.0, 2.0, 30.0, 40.0])]);
    }
}
