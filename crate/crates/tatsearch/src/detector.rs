//! Single-stage detection machinery: grid anchors over the shared feature
//! map, IoU matching, box offset encoding/decoding, NMS and the stitched
//! training canvas.

use crate::error::{Error, Result};
use crate::synthgen::AnnotatedImage;

/// Axis-aligned box: top-left (u, v) plus width/height in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(u: f64, v: f64, w: f64, h: f64) -> Self {
        BoundingBox { u, v, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.u + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.v + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.u + self.w / 2.0, self.v + self.h / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && [self.u, self.v, self.w, self.h].iter().all(|x| x.is_finite())
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        BoundingBox { u: self.u + dx, v: self.v + dy, ..*self }
    }
}

/// A detector output: box plus confidence in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Intersection-over-union of two positive-area boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::Domain(format!("iou requires positive-area boxes, got {a:?} and {b:?}")));
    }
    let ix = (a.right().min(b.right()) - a.u.max(b.u)).max(0.0);
    let iy = (a.bottom().min(b.bottom()) - a.v.max(b.v)).max(0.0);
    let inter = ix * iy;
    Ok(inter / (a.area() + b.area() - inter))
}

/// One anchor per feature-map cell per scale: a square box of side `scale`
/// centered on the cell's image-space center.
#[derive(Clone, Copy, Debug)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
}

impl Anchor {
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox::new(self.cx - self.scale / 2.0, self.cy - self.scale / 2.0, self.scale, self.scale)
    }
}

/// Anchors laid out row-major over a (rows, cols) feature map, scales
/// iterated innermost. Centers are at (col + 0.5, row + 0.5) * stride.
pub fn build_anchors(feature_shape: (usize, usize), stride: usize, scales: &[f64]) -> Result<Vec<Anchor>> {
    if scales.is_empty() {
        return Err(Error::Config("anchor scale set must not be empty".into()));
    }
    let (rows, cols) = feature_shape;
    let mut anchors = Vec::with_capacity(rows * cols * scales.len());
    for row in 0..rows {
        for col in 0..cols {
            let cx = (col as f64 + 0.5) * stride as f64;
            let cy = (row as f64 + 0.5) * stride as f64;
            for &scale in scales {
                anchors.push(Anchor { cx, cy, scale });
            }
        }
    }
    Ok(anchors)
}

/// Matching outcome for one anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnchorLabel {
    /// Matched to ground-truth instance `gt_index`.
    Positive { gt_index: usize },
    Negative,
    Ignore,
}

#[derive(Clone, Copy, Debug)]
pub struct AnchorTarget {
    pub label: AnchorLabel,
    /// (t_u, t_v, t_w, t_h); meaningful only for positive anchors.
    pub offsets: [f64; 4],
}

/// Offsets mapping `anchor` onto `gt`.
pub fn encode_offsets(anchor: &BoundingBox, gt: &BoundingBox) -> [f64; 4] {
    [
        (gt.u - anchor.u) / anchor.w,
        (gt.v - anchor.v) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ]
}

pub const OFFSET_CLAMP: f64 = 4.0;

/// Inverse of [`encode_offsets`]; size offsets are clamped to ±4 before
/// exponentiation so early-training garbage cannot overflow.
pub fn decode_boxes(anchors: &[Anchor], offsets: &[[f64; 4]]) -> Vec<BoundingBox> {
    anchors
        .iter()
        .zip(offsets)
        .map(|(a, t)| {
            let ab = a.bbox();
            BoundingBox::new(
                ab.u + t[0] * ab.w,
                ab.v + t[1] * ab.h,
                ab.w * t[2].clamp(-OFFSET_CLAMP, OFFSET_CLAMP).exp(),
                ab.h * t[3].clamp(-OFFSET_CLAMP, OFFSET_CLAMP).exp(),
            )
        })
        .collect()
}

/// Labels every anchor against the ground truth: positive when IoU with
/// some instance reaches `iou_pos` or the anchor is that instance's best
/// match, negative when the best IoU stays below `iou_neg`, ignored in
/// between. Positive anchors carry offsets toward their best-IoU instance.
pub fn encode_targets(
    anchors: &[Anchor],
    gt: &[BoundingBox],
    iou_pos: f64,
    iou_neg: f64,
) -> Result<Vec<AnchorTarget>> {
    if anchors.is_empty() {
        return Err(Error::Input("encode_targets requires at least one anchor".into()));
    }
    let mut best_gt = vec![usize::MAX; anchors.len()];
    let mut best_iou = vec![0.0f64; anchors.len()];
    let mut gt_best_anchor = vec![usize::MAX; gt.len()];
    let mut gt_best_iou = vec![-1.0f64; gt.len()];

    for (ai, anchor) in anchors.iter().enumerate() {
        let abox = anchor.bbox();
        for (gi, g) in gt.iter().enumerate() {
            let v = iou(&abox, g)?;
            if v > best_iou[ai] || best_gt[ai] == usize::MAX {
                best_iou[ai] = v;
                best_gt[ai] = gi;
            }
            if v > gt_best_iou[gi] {
                gt_best_iou[gi] = v;
                gt_best_anchor[gi] = ai;
            }
        }
    }

    let mut targets: Vec<AnchorTarget> = anchors
        .iter()
        .enumerate()
        .map(|(ai, _)| {
            let label = if gt.is_empty() {
                AnchorLabel::Negative
            } else if best_iou[ai] >= iou_pos {
                AnchorLabel::Positive { gt_index: best_gt[ai] }
            } else if best_iou[ai] < iou_neg {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            };
            AnchorTarget { label, offsets: [0.0; 4] }
        })
        .collect();

    // Each instance claims its best anchor even below the IoU threshold.
    for (gi, &ai) in gt_best_anchor.iter().enumerate() {
        if ai != usize::MAX {
            if let AnchorLabel::Positive { .. } = targets[ai].label {
            } else {
                targets[ai].label = AnchorLabel::Positive { gt_index: gi };
                best_gt[ai] = gi;
            }
        }
    }

    for (ai, target) in targets.iter_mut().enumerate() {
        if let AnchorLabel::Positive { .. } = target.label {
            target.offsets = encode_offsets(&anchors[ai].bbox(), &gt[best_gt[ai]]);
            target.label = AnchorLabel::Positive { gt_index: best_gt[ai] };
        }
    }
    Ok(targets)
}

/// Greedy non-maximum suppression: repeatedly keep the highest-score
/// detection and drop everything overlapping it by more than `iou_thresh`.
/// Score ties break by input order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].score.partial_cmp(&dets[a].score).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i]);
        for &j in &order {
            if !suppressed[j] && j != i {
                if let Ok(v) = iou(&dets[i].bbox, &dets[j].bbox) {
                    if v > iou_thresh {
                        suppressed[j] = true;
                    }
                }
            }
        }
    }
    kept
}

/// Binary cross-entropy on a raw logit; returns (loss, d`loss`/d`logit`).
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    // max(z,0) - z*y + ln(1 + exp(-|z|)) is stable for any z.
    let value = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    let grad = crate::tensor::sigmoid_scalar(logit) - target;
    (value, grad)
}

/// Tiles `rows * cols` equally sized annotated images into one canvas,
/// translating each sample's instances by its cell origin.
pub fn stitch_batch(samples: &[AnnotatedImage], grid: (usize, usize)) -> Result<AnnotatedImage> {
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 || samples.len() != rows * cols {
        return Err(Error::Config(format!(
            "stitch_batch got {} samples for a {rows}x{cols} grid",
            samples.len()
        )));
    }
    let (cw, ch) = (samples[0].image.width, samples[0].image.height);
    if samples.iter().any(|s| s.image.width != cw || s.image.height != ch) {
        return Err(Error::Config("stitch_batch samples must share one cell size".into()));
    }
    let mut canvas = crate::synthgen::RgbImage::new(cols * cw, rows * ch);
    let mut instances = Vec::new();
    for (i, sample) in samples.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let (dx, dy) = ((c * cw) as f64, (r * ch) as f64);
        canvas.blit(&sample.image, c * cw, r * ch);
        for inst in &sample.instances {
            instances.push(crate::synthgen::Instance {
                bbox: inst.bbox.translated(dx, dy),
                class: inst.class,
            });
        }
    }
    Ok(AnnotatedImage {
        image: canvas,
        instances,
        source_id: format!("stitch[{}]", samples.iter().map(|s| s.source_id.as_str()).collect::<Vec<_>>().join("+")),
        modality: samples[0].modality,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(u: f64, v: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(u, v, w, h)
    }

    #[test]
    fn iou_identity_disjoint_half() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &bb(20.0, 20.0, 5.0, 5.0)).unwrap(), 0.0);
        let v = iou(&a, &bb(5.0, 0.0, 10.0, 10.0)).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_symmetric_and_bounded() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let a = bb(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.1..10.0), rng.gen_range(0.1..10.0));
            let b = bb(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.1..10.0), rng.gen_range(0.1..10.0));
            let ab = iou(&a, &b).unwrap();
            let ba = iou(&b, &a).unwrap();
            assert_eq!(ab, ba);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn iou_rejects_degenerate_boxes() {
        assert!(iou(&bb(0.0, 0.0, 0.0, 1.0), &bb(0.0, 0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn anchors_single_cell() {
        let anchors = build_anchors((1, 1), 8, &[16.0]).unwrap();
        assert_eq!(anchors.len(), 1);
        assert_eq!((anchors[0].cx, anchors[0].cy), (4.0, 4.0));
        assert_eq!(anchors[0].bbox(), bb(-4.0, -4.0, 16.0, 16.0));
    }

    #[test]
    fn anchors_grid_centers() {
        let anchors = build_anchors((2, 2), 8, &[16.0]).unwrap();
        let centers: Vec<(f64, f64)> = anchors.iter().map(|a| (a.cx, a.cy)).collect();
        assert_eq!(centers, vec![(4.0, 4.0), (12.0, 4.0), (4.0, 12.0), (12.0, 12.0)]);
    }

    #[test]
    fn anchor_count_is_cells_times_scales() {
        let anchors = build_anchors((3, 5), 8, &[16.0, 32.0, 64.0]).unwrap();
        assert_eq!(anchors.len(), 3 * 5 * 3);
        assert!(build_anchors((3, 5), 8, &[]).is_err());
    }

    #[test]
    fn encode_identity_anchor() {
        let anchors = build_anchors((2, 2), 8, &[16.0]).unwrap();
        let gt = vec![anchors[1].bbox()];
        let targets = encode_targets(&anchors, &gt, 0.5, 0.3).unwrap();
        assert_eq!(targets[1].label, AnchorLabel::Positive { gt_index: 0 });
        assert_eq!(targets[1].offsets, [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_no_gt_all_negative() {
        let anchors = build_anchors((2, 2), 8, &[16.0]).unwrap();
        let targets = encode_targets(&anchors, &[], 0.5, 0.3).unwrap();
        assert!(targets.iter().all(|t| t.label == AnchorLabel::Negative));
    }

    #[test]
    fn encode_double_size_gt_log_ratio() {
        let anchors = vec![Anchor { cx: 16.0, cy: 16.0, scale: 16.0 }];
        // Same center, twice the size.
        let gt = vec![bb(0.0, 0.0, 32.0, 32.0)];
        let targets = encode_targets(&anchors, &gt, 0.5, 0.3).unwrap();
        assert!(matches!(targets[0].label, AnchorLabel::Positive { .. }));
        assert!((targets[0].offsets[2] - 2.0f64.ln()).abs() < 1e-12);
        assert!((targets[0].offsets[3] - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn decode_zero_offsets_gives_anchors() {
        let anchors = build_anchors((2, 2), 8, &[16.0, 32.0]).unwrap();
        let offsets = vec![[0.0; 4]; anchors.len()];
        let boxes = decode_boxes(&anchors, &offsets);
        for (a, b) in anchors.iter().zip(&boxes) {
            assert_eq!(a.bbox(), *b);
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(14);
        let anchor = Anchor { cx: 40.0, cy: 40.0, scale: 32.0 };
        for _ in 0..200 {
            let gt = bb(
                rng.gen_range(10.0..60.0),
                rng.gen_range(10.0..60.0),
                rng.gen_range(5.0..80.0),
                rng.gen_range(5.0..80.0),
            );
            let t = encode_offsets(&anchor.bbox(), &gt);
            let back = decode_boxes(&[anchor], &[t]);
            assert!((back[0].u - gt.u).abs() < 1e-9);
            assert!((back[0].v - gt.v).abs() < 1e-9);
            assert!((back[0].w - gt.w).abs() < 1e-9);
            assert!((back[0].h - gt.h).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_doubling_offsets() {
        let anchor = Anchor { cx: 8.0, cy: 8.0, scale: 16.0 };
        let t = [0.0, 0.0, 2.0f64.ln(), 2.0f64.ln()];
        let b = decode_boxes(&[anchor], &[t])[0];
        assert_eq!((b.w, b.h), (32.0, 32.0));
        // Top-left offsets are zero, so u/v stay at the anchor's corner: the
        // doubled box hangs off toward bottom-right.
        assert_eq!((b.u, b.v), (0.0, 0.0));
    }

    #[test]
    fn nms_cases() {
        let d = |u: f64, score: f64| Detection { bbox: bb(u, 0.0, 10.0, 10.0), score };
        assert_eq!(nms(&[d(0.0, 0.7)], 0.5).len(), 1);

        let kept = nms(&[d(0.0, 0.9), d(0.0, 0.8)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        let kept = nms(&[d(0.0, 0.9), d(100.0, 0.8)], 0.5);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn nms_survivors_pairwise_below_threshold() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let dets: Vec<Detection> = (0..20)
                .map(|_| Detection {
                    bbox: bb(rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0), rng.gen_range(5.0..20.0), rng.gen_range(5.0..20.0)),
                    score: rng.gen_range(0.0..1.0),
                })
                .collect();
            let kept = nms(&dets, 0.5);
            assert!(kept.len() <= dets.len());
            // Global max-score survivor.
            let max = dets.iter().map(|d| d.score).fold(f64::NEG_INFINITY, f64::max);
            assert!(kept.iter().any(|d| d.score == max));
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    assert!(iou(&kept[i].bbox, &kept[j].bbox).unwrap() <= 0.5);
                }
            }
        }
    }

    #[test]
    fn bce_matches_naive_formula() {
        for &(z, y) in &[(0.0, 1.0), (2.5, 0.0), (-3.0, 1.0), (40.0, 0.0), (-40.0, 1.0)] {
            let (v, g) = bce_with_logit(z, y);
            let p = crate::tensor::sigmoid_scalar(z);
            if (1e-12..(1.0 - 1e-12)).contains(&p) {
                let naive = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
                assert!((v - naive).abs() < 1e-9);
            }
            assert!(v.is_finite());
            assert!((g - (p - y)).abs() < 1e-12);
        }
    }
}
