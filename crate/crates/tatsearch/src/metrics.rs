//! Evaluation surfaces: detection recall vs false positives per image,
//! retrieval precision / average precision, and identification CMC.

use std::collections::HashSet;

use crate::detector::{iou, BoundingBox, Detection};
use crate::error::{Error, Result};

/// Operating points (fppi, recall) swept over confidence thresholds,
/// ordered by descending threshold so recall is non-decreasing.
#[derive(Clone, Debug, PartialEq)]
pub struct DetCurve {
    pub points: Vec<(f64, f64)>,
}

/// Pools all detections, matches them greedily in descending score order
/// (ties by earlier image, then earlier detection; each detection takes
/// the highest-IoU unmatched instance of its image at IoU >= `iou_thresh`)
/// and emits one (FPPI, recall) point per distinct score.
pub fn det_curve(
    detections: &[Vec<Detection>],
    gts: &[Vec<BoundingBox>],
    iou_thresh: f64,
) -> Result<DetCurve> {
    if detections.is_empty() || detections.len() != gts.len() {
        return Err(Error::Input(format!(
            "det_curve needs matching non-empty per-image lists, got {} and {}",
            detections.len(),
            gts.len()
        )));
    }
    let num_images = detections.len() as f64;
    let num_gt: usize = gts.iter().map(|g| g.len()).sum();
    if num_gt == 0 {
        return Err(Error::Input("det_curve needs at least one ground-truth box".into()));
    }

    let mut order: Vec<(usize, usize)> = Vec::new();
    for (img, dets) in detections.iter().enumerate() {
        for det_idx in 0..dets.len() {
            order.push((img, det_idx));
        }
    }
    order.sort_by(|&(ia, da), &(ib, db)| {
        let sa = detections[ia][da].score;
        let sb = detections[ib][db].score;
        sb.partial_cmp(&sa).unwrap_or(std::cmp::Ordering::Equal).then(ia.cmp(&ib)).then(da.cmp(&db))
    });

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let score = detections[order[i].0][order[i].1].score;
        // Consume the whole group sharing this score, then emit one point.
        while i < order.len() && detections[order[i].0][order[i].1].score == score {
            let (img, det_idx) = order[i];
            let det = &detections[img][det_idx];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts[img].iter().enumerate() {
                if matched[img][gi] {
                    continue;
                }
                let v = iou(&det.bbox, g)?;
                if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, _)) => {
                    matched[img][gi] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
            i += 1;
        }
        points.push((fp as f64 / num_images, tp as f64 / num_gt as f64));
    }
    Ok(DetCurve { points })
}

/// Largest recall among operating points with FPPI <= `target`; 0 when no
/// point qualifies. Conservative: no interpolation between points.
pub fn recall_at_fppi(curve: &DetCurve, target: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|(fppi, _)| *fppi <= target)
        .map(|&(_, recall)| recall)
        .fold(0.0, f64::max)
}

/// One query's ranked gallery plus its mate set.
#[derive(Clone, Debug)]
pub struct RankedRetrieval {
    pub query_id: String,
    pub ranking: Vec<String>,
    pub mates: HashSet<String>,
}

impl RankedRetrieval {
    pub fn new(query_id: &str, ranking: Vec<String>, mates: HashSet<String>) -> Result<Self> {
        let distinct: HashSet<&str> = ranking.iter().map(|s| s.as_str()).collect();
        if distinct.len() != ranking.len() {
            return Err(Error::Input(format!("ranking for query '{query_id}' repeats gallery ids")));
        }
        Ok(RankedRetrieval { query_id: query_id.to_string(), ranking, mates })
    }

    /// 1-indexed rank of the first mate, if any mate was retrieved.
    pub fn first_mate_rank(&self) -> Option<usize> {
        self.ranking.iter().position(|id| self.mates.contains(id)).map(|p| p + 1)
    }
}

/// Mean of precision-at-hit over mate positions, divided by the total mate
/// count; mates absent from the ranking contribute zero.
pub fn average_precision(r: &RankedRetrieval) -> Result<f64> {
    if r.mates.is_empty() {
        return Err(Error::Input(format!("query '{}' has no mates", r.query_id)));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, id) in r.ranking.iter().enumerate() {
        if r.mates.contains(id) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    Ok(sum / r.mates.len() as f64)
}

/// Unweighted mean of per-query average precision.
pub fn mean_ap(queries: &[RankedRetrieval]) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Input("mean_ap over zero queries".into()));
    }
    let mut total = 0.0;
    for q in queries {
        total += average_precision(q)?;
    }
    Ok(total / queries.len() as f64)
}

/// Accuracy at each rank 1..=R; non-decreasing in rank.
#[derive(Clone, Debug, PartialEq)]
pub struct CmcCurve {
    pub accuracy: Vec<f64>,
}

impl CmcCurve {
    pub fn at_rank(&self, rank: usize) -> f64 {
        self.accuracy[rank - 1]
    }
}

/// Fraction of queries whose first mate appears within each rank.
pub fn cmc(queries: &[RankedRetrieval], max_rank: usize) -> Result<CmcCurve> {
    if queries.is_empty() {
        return Err(Error::Input("cmc over zero queries".into()));
    }
    if max_rank == 0 {
        return Err(Error::Input("cmc needs max_rank >= 1".into()));
    }
    let mut counts = vec![0usize; max_rank];
    for q in queries {
        if let Some(rank) = q.first_mate_rank() {
            if rank <= max_rank {
                counts[rank - 1] += 1;
            }
        }
    }
    let mut acc = Vec::with_capacity(max_rank);
    let mut running = 0usize;
    for c in counts {
        running += c;
        acc.push(running as f64 / queries.len() as f64);
    }
    Ok(CmcCurve { accuracy: acc })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(u: f64, score: f64) -> Detection {
        Detection { bbox: BoundingBox::new(u, 0.0, 10.0, 10.0), score }
    }

    fn gt(u: f64) -> BoundingBox {
        BoundingBox::new(u, 0.0, 10.0, 10.0)
    }

    fn retrieval(ranking: &[&str], mates: &[&str]) -> RankedRetrieval {
        RankedRetrieval::new(
            "q",
            ranking.iter().map(|s| s.to_string()).collect(),
            mates.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_detector_hits_zero_fppi_full_recall() {
        let dets = vec![vec![det(0.0, 0.9)], vec![det(50.0, 0.8)]];
        let gts = vec![vec![gt(0.0)], vec![gt(50.0)]];
        let curve = det_curve(&dets, &gts, 0.5).unwrap();
        assert!(curve.points.contains(&(0.0, 1.0)));
    }

    #[test]
    fn no_detections_gives_empty_curve_and_zero_recall() {
        let dets = vec![vec![], vec![]];
        let gts = vec![vec![gt(0.0)], vec![gt(50.0)]];
        let curve = det_curve(&dets, &gts, 0.5).unwrap();
        assert!(curve.points.is_empty());
        assert_eq!(recall_at_fppi(&curve, 10.0), 0.0);
    }

    #[test]
    fn hand_swept_three_detection_curve() {
        // 2 images, 2 GT; scores 0.9 (TP), 0.8 (FP), 0.7 (TP).
        let dets = vec![vec![det(0.0, 0.9), det(70.0, 0.8)], vec![det(0.0, 0.7)]];
        let gts = vec![vec![gt(0.0)], vec![gt(0.0)]];
        let curve = det_curve(&dets, &gts, 0.5).unwrap();
        assert_eq!(curve.points, vec![(0.0, 0.5), (0.5, 0.5), (0.5, 1.0)]);
        assert_eq!(recall_at_fppi(&curve, 0.5), 1.0);
        assert_eq!(recall_at_fppi(&curve, 0.1), 0.5);
    }

    #[test]
    fn recall_at_fppi_cases() {
        let curve = DetCurve { points: vec![(0.0, 1.0)] };
        assert_eq!(recall_at_fppi(&curve, 0.1), 1.0);
        let curve = DetCurve { points: vec![(0.5, 0.5)] };
        assert_eq!(recall_at_fppi(&curve, 0.1), 0.0);
    }

    #[test]
    fn det_curve_recall_non_decreasing() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(40);
        for _ in 0..20 {
            let n = rng.gen_range(1..6);
            let gts: Vec<Vec<BoundingBox>> =
                (0..n).map(|_| (0..rng.gen_range(1..4)).map(|i| gt(i as f64 * 30.0)).collect()).collect();
            let dets: Vec<Vec<Detection>> = (0..n)
                .map(|_| {
                    (0..rng.gen_range(0..6))
                        .map(|_| det(rng.gen_range(0.0..90.0), rng.gen_range(0.0..1.0)))
                        .collect()
                })
                .collect();
            let curve = det_curve(&dets, &gts, 0.5).unwrap();
            for w in curve.points.windows(2) {
                assert!(w[1].1 >= w[0].1);
                assert!(w[1].0 >= w[0].0);
            }
        }
    }

    #[test]
    fn det_curve_rejects_empty() {
        assert!(det_curve(&[], &[], 0.5).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&retrieval(&["m1", "m2", "x"], &["m1", "m2"])).unwrap(), 1.0);

        let ap = average_precision(&retrieval(&["m1", "x", "m2"], &["m1", "m2"])).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((ap - 0.833333).abs() < 1e-6);

        // Single mate at rank r of n: AP = 1/r.
        let ap = average_precision(&retrieval(&["a", "b", "m", "c"], &["m"])).unwrap();
        assert_eq!(ap, 1.0 / 3.0);
    }

    #[test]
    fn ap_missing_mates_contribute_zero() {
        let ap = average_precision(&retrieval(&["m1", "x"], &["m1", "ghost"])).unwrap();
        assert_eq!(ap, 0.5);
        assert!(average_precision(&retrieval(&["a"], &[])).is_err());
    }

    #[test]
    fn mean_ap_cases() {
        let q1 = retrieval(&["m", "x"], &["m"]);
        let q2 = retrieval(&["x", "m"], &["m"]);
        assert_eq!(mean_ap(&[q1.clone(), q1.clone()]).unwrap(), 1.0);
        assert_eq!(mean_ap(&[q1, q2]).unwrap(), 0.75);
        assert!(mean_ap(&[]).is_err());
    }

    #[test]
    fn cmc_examples() {
        let q1 = retrieval(&["m", "x", "y"], &["m"]);
        assert_eq!(cmc(&[q1.clone(), q1.clone()], 3).unwrap().accuracy, vec![1.0, 1.0, 1.0]);

        let q3 = retrieval(&["x", "y", "m"], &["m"]);
        let curve = cmc(&[q1, q3], 3).unwrap();
        assert_eq!(curve.accuracy, vec![0.5, 0.5, 1.0]);
        assert_eq!(curve.at_rank(1), 0.5);
        for w in curve.accuracy.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn permuting_non_mates_changes_nothing() {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(50);
        for _ in 0..50 {
            let n = rng.gen_range(4..15);
            let ranking: Vec<String> = (0..n).map(|i| format!("g{i}")).collect();
            let mates: HashSet<String> = ranking
                .iter()
                .filter(|_| rng.gen_bool(0.3))
                .cloned()
                .collect();
            if mates.is_empty() {
                continue;
            }
            let q = RankedRetrieval::new("q", ranking.clone(), mates.clone()).unwrap();

            // Shuffle non-mates among themselves, keeping mate positions.
            let mut non_mates: Vec<String> =
                ranking.iter().filter(|id| !mates.contains(*id)).cloned().collect();
            non_mates.shuffle(&mut rng);
            let mut iter = non_mates.into_iter();
            let permuted: Vec<String> = ranking
                .iter()
                .map(|id| if mates.contains(id) { id.clone() } else { iter.next().unwrap() })
                .collect();
            let qp = RankedRetrieval::new("q", permuted, mates).unwrap();

            assert_eq!(average_precision(&q).unwrap(), average_precision(&qp).unwrap());
            assert_eq!(cmc(&[q], 5).unwrap(), cmc(&[qp], 5).unwrap());
        }
    }
}
