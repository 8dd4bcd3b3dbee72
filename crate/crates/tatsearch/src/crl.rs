//! Compact representation learning pieces: instance pooling over the
//! shared feature map, near-binary latent codes, binarization into packed
//! bit vectors, min-distance image matching and the per-class feature
//! buffer that backstops tiny instance batches.

use std::fmt::Write as _;

use crate::detector::BoundingBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::format_sig6;

/// Sigmoid outputs of the latent layer, elementwise in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    values: Vec<f64>,
}

impl LatentCode {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dimension("latent code must not be empty".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("latent code elements must lie in [0, 1]".into()));
        }
        Ok(LatentCode { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Packed bit vector: bit k lives in byte k/8 at position k%8; pad bits in
/// the final byte are zero so bytewise popcount is exact.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryCode {
    bytes: Vec<u8>,
    bits: usize,
}

impl BinaryCode {
    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Dimension("binary code must not be empty".into()));
        }
        let mut bytes = vec![0u8; bits.len().div_ceil(8)];
        for (k, &b) in bits.iter().enumerate() {
            if b {
                bytes[k / 8] |= 1 << (k % 8);
            }
        }
        Ok(BinaryCode { bytes, bits: bits.len() })
    }

    pub fn from_bytes(bytes: Vec<u8>, bits: usize) -> Result<Self> {
        if bits == 0 || bytes.len() != bits.div_ceil(8) {
            return Err(Error::Dimension(format!(
                "{} bytes cannot hold a {bits}-bit code",
                bytes.len()
            )));
        }
        let mut code = BinaryCode { bytes, bits };
        code.clear_padding();
        Ok(code)
    }

    fn clear_padding(&mut self) {
        let rem = self.bits % 8;
        if rem != 0 {
            let mask = (1u16 << rem) as u8 - 1;
            *self.bytes.last_mut().expect("non-empty") &= mask;
        }
    }

    pub fn bit(&self, k: usize) -> bool {
        (self.bytes[k / 8] >> (k % 8)) & 1 == 1
    }

    pub fn len_bits(&self) -> usize {
        self.bits
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Bytewise XOR popcount.
    pub fn hamming(&self, other: &BinaryCode) -> Result<u32> {
        if self.bits != other.bits {
            return Err(Error::Dimension(format!(
                "hamming distance between {}-bit and {}-bit codes",
                self.bits, other.bits
            )));
        }
        Ok(self
            .bytes
            .iter()
            .zip(&other.bytes)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum())
    }

    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(self.bytes.len() * 2);
        for b in &self.bytes {
            let _ = write!(s, "{b:02x}");
        }
        s
    }

    pub fn from_hex(hex: &str, bits: usize) -> Result<Self> {
        if hex.len() % 2 != 0 {
            return Err(Error::Parse(format!("odd-length hex code '{hex}'")));
        }
        let mut bytes = Vec::with_capacity(hex.len() / 2);
        for i in (0..hex.len()).step_by(2) {
            bytes.push(
                u8::from_str_radix(&hex[i..i + 2], 16)
                    .map_err(|_| Error::Parse(format!("bad hex byte in '{hex}'")))?,
            );
        }
        BinaryCode::from_bytes(bytes, bits)
    }
}

/// Thresholds a latent code at 0.5 (values >= 0.5 map to 1).
pub fn binarize(code: &LatentCode) -> BinaryCode {
    let bits: Vec<bool> = code.values().iter().map(|&v| v >= 0.5).collect();
    BinaryCode::from_bits(&bits).expect("latent codes are non-empty")
}

/// Gradient routing for [`instance_pool`]: flat feature-map index per
/// output cell, `None` for empty bins.
#[derive(Clone, Debug)]
pub struct InstancePoolCache {
    pub argmax: Vec<Option<usize>>,
}

/// Max-pools the feature-map region under `bbox` (image pixels, divided by
/// `stride`) into a fixed (ph, pw) grid. Start is floored, end is ceiled,
/// both clipped to the map; bins split by even rounding; empty bins yield 0.
pub fn instance_pool(
    feature_map: &Tensor,
    bbox: &BoundingBox,
    stride: usize,
    out: (usize, usize),
) -> Result<(Tensor, InstancePoolCache)> {
    let (c, h, w) = feature_map.dims3()?;
    let (ph, pw) = out;
    if ph == 0 || pw == 0 {
        return Err(Error::Config("instance_pool output must be non-empty".into()));
    }
    let s = stride as f64;
    let fx0 = ((bbox.u / s).floor().max(0.0) as usize).min(w);
    let fy0 = ((bbox.v / s).floor().max(0.0) as usize).min(h);
    let fx1 = ((bbox.right() / s).ceil().max(0.0) as usize).clamp(fx0, w);
    let fy1 = ((bbox.bottom() / s).ceil().max(0.0) as usize).clamp(fy0, h);
    if fx0 >= fx1 || fy0 >= fy1 {
        return Err(Error::Domain(format!(
            "box ({}, {}, {}, {}) maps outside the {h}x{w} feature map",
            bbox.u, bbox.v, bbox.w, bbox.h
        )));
    }
    let span_x = fx1 - fx0;
    let span_y = fy1 - fy0;
    let edge = |i: usize, bins: usize, span: usize| -> usize {
        ((i as f64) * (span as f64) / (bins as f64)).round() as usize
    };

    let data = feature_map.data();
    let mut out_data = vec![0.0; c * ph * pw];
    let mut argmax = vec![None; c * ph * pw];
    for ci in 0..c {
        for by in 0..ph {
            let y0 = fy0 + edge(by, ph, span_y);
            let y1 = fy0 + edge(by + 1, ph, span_y);
            for bx in 0..pw {
                let x0 = fx0 + edge(bx, pw, span_x);
                let x1 = fx0 + edge(bx + 1, pw, span_x);
                let oidx = ci * ph * pw + by * pw + bx;
                if y0 >= y1 || x0 >= x1 {
                    continue; // empty bin: output stays 0
                }
                let mut best_idx = ci * h * w + y0 * w + x0;
                let mut best = data[best_idx];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let idx = ci * h * w + y * w + x;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out_data[oidx] = best;
                argmax[oidx] = Some(best_idx);
            }
        }
    }
    Ok((
        Tensor::new(vec![c, ph, pw], out_data)?,
        InstancePoolCache { argmax },
    ))
}

/// Routes output gradients back to each bin's argmax cell.
pub fn instance_pool_backward(
    cache: &InstancePoolCache,
    feature_shape: &[usize],
    grad_out: &Tensor,
    grad_feature: &mut Tensor,
) {
    debug_assert_eq!(grad_feature.shape(), feature_shape);
    let dst = grad_feature.data_mut();
    for (g, idx) in grad_out.data().iter().zip(&cache.argmax) {
        if let Some(i) = idx {
            dst[*i] += g;
        }
    }
}

/// Minimum Hamming distance over all code pairs of two images, with the
/// argmin pair (lexicographically smallest on ties).
pub fn image_distance(
    codes_a: &[BinaryCode],
    codes_b: &[BinaryCode],
) -> Result<(u32, (usize, usize))> {
    if codes_a.is_empty() || codes_b.is_empty() {
        return Err(Error::Match("image_distance requires at least one code per image".into()));
    }
    let mut best = u32::MAX;
    let mut best_pair = (0, 0);
    for (i, a) in codes_a.iter().enumerate() {
        for (j, b) in codes_b.iter().enumerate() {
            let d = a.hamming(b)?;
            if d < best {
                best = d;
                best_pair = (i, j);
            }
        }
    }
    Ok((best, best_pair))
}

/// Per-class running centroid of latent codes.
#[derive(Clone, Debug)]
pub struct FeatureBuffer {
    centroids: Vec<Option<Vec<f64>>>,
    counts: Vec<u64>,
    momentum: f64,
}

impl FeatureBuffer {
    pub fn new(classes: usize, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || momentum == 0.0 {
            return Err(Error::Config(format!("buffer momentum {momentum} must be in (0, 1)")));
        }
        Ok(FeatureBuffer { centroids: vec![None; classes], counts: vec![0; classes], momentum })
    }

    /// centroid <- (1 - mu) * centroid + mu * code; the first update adopts
    /// the code outright.
    pub fn update(&mut self, class: usize, code: &LatentCode) -> Result<()> {
        if class >= self.centroids.len() {
            return Err(Error::Index(format!(
                "class {class} out of range for {} buffer slots",
                self.centroids.len()
            )));
        }
        match &mut self.centroids[class] {
            Some(centroid) => {
                for (c, v) in centroid.iter_mut().zip(code.values()) {
                    *c = (1.0 - self.momentum) * *c + self.momentum * v;
                }
            }
            slot @ None => *slot = Some(code.values().to_vec()),
        }
        self.counts[class] += 1;
        Ok(())
    }

    pub fn centroid(&self, class: usize) -> Option<&[f64]> {
        self.centroids.get(class).and_then(|c| c.as_deref())
    }

    pub fn count(&self, class: usize) -> u64 {
        self.counts[class]
    }
}

/// One indexed image's codes for the text dump: id, then per detection the
/// box and the packed code as lowercase hex.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeDumpEntry {
    pub image_id: String,
    pub detections: Vec<(BoundingBox, BinaryCode)>,
}

pub fn write_code_dump(entries: &[CodeDumpEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let _ = write!(out, "{} {}", e.image_id, e.detections.len());
        for (bbox, code) in &e.detections {
            let _ = write!(
                out,
                " {} {} {} {} {}",
                format_sig6(bbox.u),
                format_sig6(bbox.v),
                format_sig6(bbox.w),
                format_sig6(bbox.h),
                code.to_hex()
            );
        }
        out.push('\n');
    }
    out
}

pub fn parse_code_dump(text: &str, code_bits: usize) -> Result<Vec<CodeDumpEntry>> {
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        let image_id = tok.next().ok_or_else(|| Error::Parse(format!("line {}: empty", ln + 1)))?.to_string();
        let count: usize = tok
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse(format!("line {}: bad detection count", ln + 1)))?;
        let mut detections = Vec::with_capacity(count);
        for _ in 0..count {
            let mut nums = [0.0f64; 4];
            for n in &mut nums {
                *n = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Parse(format!("line {}: bad box", ln + 1)))?;
            }
            let hex = tok.next().ok_or_else(|| Error::Parse(format!("line {}: missing code", ln + 1)))?;
            detections.push((
                BoundingBox::new(nums[0], nums[1], nums[2], nums[3]),
                BinaryCode::from_hex(hex, code_bits)?,
            ));
        }
        entries.push(CodeDumpEntry { image_id, detections });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn binarize_thresholds_at_half() {
        let code = LatentCode::new(vec![0.49; 8]).unwrap();
        let b = binarize(&code);
        assert!((0..8).all(|k| !b.bit(k)));

        // Exactly 0.5 maps to 1.
        let code = LatentCode::new(vec![0.5, 0.1, 0.9, 0.5]).unwrap();
        let b = binarize(&code);
        assert_eq!((b.bit(0), b.bit(1), b.bit(2), b.bit(3)), (true, false, true, true));

        let code = LatentCode::new(vec![0.1, 0.9, 0.5, 0.49]).unwrap();
        let b = binarize(&code);
        assert_eq!((b.bit(0), b.bit(1), b.bit(2), b.bit(3)), (false, true, true, false));
    }

    #[test]
    fn binarize_round_trips_binary_codes() {
        let code = LatentCode::new(vec![0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        let b = binarize(&code);
        let again: Vec<f64> = (0..5).map(|k| if b.bit(k) { 1.0 } else { 0.0 }).collect();
        assert_eq!(again, code.values());
    }

    #[test]
    fn padding_bits_stay_zero() {
        for bits in [7usize, 9, 13, 64, 255] {
            let pattern: Vec<bool> = (0..bits).map(|k| k % 3 != 1).collect();
            let code = BinaryCode::from_bits(&pattern).unwrap();
            let rem = bits % 8;
            if rem != 0 {
                let last = *code.as_bytes().last().unwrap();
                assert_eq!(last >> rem, 0, "{bits}-bit code has inked padding");
            }
            for (k, &b) in pattern.iter().enumerate() {
                assert_eq!(code.bit(k), b);
            }
        }
    }

    #[test]
    fn hamming_equals_bitwise_disagreement() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for &bits in &[7usize, 8, 64, 256] {
            for _ in 0..100 {
                let xs: Vec<f64> = (0..bits).map(|_| rng.gen()).collect();
                let ys: Vec<f64> = (0..bits).map(|_| rng.gen()).collect();
                let a = binarize(&LatentCode::new(xs.clone()).unwrap());
                let b = binarize(&LatentCode::new(ys.clone()).unwrap());
                let expected = xs
                    .iter()
                    .zip(&ys)
                    .filter(|(x, y)| (**x >= 0.5) != (**y >= 0.5))
                    .count() as u32;
                assert_eq!(a.hamming(&b).unwrap(), expected);
            }
        }
    }

    #[test]
    fn hamming_is_a_metric() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let random_code = |rng: &mut rand_chacha::ChaCha8Rng| {
            let bits: Vec<bool> = (0..37).map(|_| rng.gen()).collect();
            BinaryCode::from_bits(&bits).unwrap()
        };
        for _ in 0..100 {
            let a = random_code(&mut rng);
            let b = random_code(&mut rng);
            let c = random_code(&mut rng);
            assert_eq!(a.hamming(&a).unwrap(), 0);
            assert_eq!(a.hamming(&b).unwrap(), b.hamming(&a).unwrap());
            assert!(a.hamming(&b).unwrap() <= 37);
            assert!(a.hamming(&c).unwrap() <= a.hamming(&b).unwrap() + b.hamming(&c).unwrap());
        }
    }

    #[test]
    fn hamming_length_mismatch() {
        let a = BinaryCode::from_bits(&[true; 8]).unwrap();
        let b = BinaryCode::from_bits(&[true; 9]).unwrap();
        assert!(a.hamming(&b).is_err());
    }

    #[test]
    fn instance_pool_whole_map_global_max() {
        let map = t(&[2, 4, 4], &(0..32).map(|v| v as f64).collect::<Vec<_>>());
        let bbox = BoundingBox::new(0.0, 0.0, 32.0, 32.0);
        let (out, _) = instance_pool(&map, &bbox, 8, (1, 1)).unwrap();
        assert_eq!(out.data(), &[15.0, 31.0]);
    }

    #[test]
    fn instance_pool_identity_crop() {
        let map = t(&[1, 4, 4], &(0..16).map(|v| v as f64).collect::<Vec<_>>());
        // Box covering feature cells [1..3) x [1..3) at stride 8.
        let bbox = BoundingBox::new(8.0, 8.0, 16.0, 16.0);
        let (out, _) = instance_pool(&map, &bbox, 8, (2, 2)).unwrap();
        assert_eq!(out.data(), &[5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn instance_pool_ramp_bins() {
        let map = t(&[1, 4, 4], &(0..16).map(|v| v as f64).collect::<Vec<_>>());
        let bbox = BoundingBox::new(0.0, 0.0, 32.0, 32.0);
        let (out, _) = instance_pool(&map, &bbox, 8, (2, 2)).unwrap();
        assert_eq!(out.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn instance_pool_outside_map_is_domain_error() {
        let map = t(&[1, 4, 4], &[0.0; 16]);
        let bbox = BoundingBox::new(100.0, 100.0, 8.0, 8.0);
        assert!(matches!(instance_pool(&map, &bbox, 8, (2, 2)), Err(Error::Domain(_))));
    }

    #[test]
    fn instance_pool_backward_routes_to_argmax() {
        let map = t(&[1, 2, 2], &[1.0, 9.0, 3.0, 4.0]);
        let bbox = BoundingBox::new(0.0, 0.0, 16.0, 16.0);
        let (_, cache) = instance_pool(&map, &bbox, 8, (1, 1)).unwrap();
        let mut grad = Tensor::zeros(&[1, 2, 2]);
        instance_pool_backward(&cache, &[1, 2, 2], &t(&[1, 1, 1], &[2.0]), &mut grad);
        assert_eq!(grad.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn image_distance_cases() {
        let a = BinaryCode::from_bits(&[true, false, true, false]).unwrap();
        let b = BinaryCode::from_bits(&[true, true, true, false]).unwrap();
        assert_eq!(image_distance(&[a.clone()], &[b.clone()]).unwrap(), (1, (0, 0)));
        assert_eq!(image_distance(&[a.clone(), b.clone()], &[a.clone(), b.clone()]).unwrap().0, 0);
        assert!(image_distance(&[], &[a.clone()]).is_err());
    }

    #[test]
    fn image_distance_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let make = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<BinaryCode> {
                (0..n)
                    .map(|_| {
                        let bits: Vec<bool> = (0..16).map(|_| rng.gen()).collect();
                        BinaryCode::from_bits(&bits).unwrap()
                    })
                    .collect()
            };
            let a = make(&mut rng, 2);
            let b = make(&mut rng, 3);
            let (d, (i, j)) = image_distance(&a, &b).unwrap();
            let mut brute = u32::MAX;
            for x in &a {
                for y in &b {
                    brute = brute.min(x.hamming(y).unwrap());
                }
            }
            assert_eq!(d, brute);
            assert_eq!(a[i].hamming(&b[j]).unwrap(), d);
            // The reported pair is the lexicographically smallest argmin.
            'outer: for (ii, x) in a.iter().enumerate() {
                for (jj, y) in b.iter().enumerate() {
                    if x.hamming(y).unwrap() == d {
                        assert_eq!((ii, jj), (i, j));
                        break 'outer;
                    }
                }
            }
            // Upper-bounds every pairwise distance.
            for x in &a {
                for y in &b {
                    assert!(d <= x.hamming(y).unwrap());
                }
            }
        }
    }

    #[test]
    fn buffer_first_update_adopts_code() {
        let mut buf = FeatureBuffer::new(3, 0.5).unwrap();
        let code = LatentCode::new(vec![0.2, 0.8]).unwrap();
        buf.update(1, &code).unwrap();
        assert_eq!(buf.centroid(1).unwrap(), code.values());
        assert_eq!(buf.count(1), 1);
        assert!(buf.centroid(0).is_none());
    }

    #[test]
    fn buffer_momentum_blend_and_fixed_point() {
        let mut buf = FeatureBuffer::new(1, 0.5).unwrap();
        buf.update(0, &LatentCode::new(vec![0.0, 0.0]).unwrap()).unwrap();
        buf.update(0, &LatentCode::new(vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(buf.centroid(0).unwrap(), &[0.5, 0.5]);

        let mut buf = FeatureBuffer::new(1, 0.5).unwrap();
        let code = LatentCode::new(vec![0.3, 0.7]).unwrap();
        for _ in 0..10 {
            buf.update(0, &code).unwrap();
        }
        assert_eq!(buf.centroid(0).unwrap(), code.values());
    }

    #[test]
    fn buffer_class_out_of_range() {
        let mut buf = FeatureBuffer::new(2, 0.5).unwrap();
        let code = LatentCode::new(vec![0.5]).unwrap();
        assert!(matches!(buf.update(2, &code), Err(Error::Index(_))));
    }

    #[test]
    fn code_dump_round_trip() {
        let entries = vec![
            CodeDumpEntry {
                image_id: "img_a".into(),
                detections: vec![
                    (BoundingBox::new(1.0, 2.0, 30.0, 40.0), BinaryCode::from_bits(&[true; 16]).unwrap()),
                    (BoundingBox::new(5.5, 6.25, 10.0, 10.0), BinaryCode::from_bits(&[false; 16]).unwrap()),
                ],
            },
            CodeDumpEntry { image_id: "img_b".into(), detections: vec![] },
        ];
        let text = write_code_dump(&entries);
        assert!(text.starts_with("img_a 2 1.00000 2.00000 30.0000 40.0000 ffff"));
        let parsed = parse_code_dump(&text, 16).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].detections[0].1, entries[0].detections[0].1);
        assert_eq!(parsed[1].detections.len(), 0);
    }
}
