//! The 16-member augmentation suite: four photometric transforms, two box
//! blurs, six geometric deformations and four perspective homographies.
//!
//! Photometric transforms never touch annotations. Geometric transforms
//! remap each box to the axis-aligned hull of its transformed corners
//! (homographies) or of dense samples along its edges (warps), clipped to
//! the canvas; instances that degenerate below 4 px are dropped.

use crate::detector::BoundingBox;
use crate::error::{Error, Result};
use crate::synthgen::raster::{round_u8, RgbImage};
use crate::synthgen::{AnnotatedImage, Instance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformId {
    GammaDark,
    GammaBright,
    ContrastStretch,
    ColorCast,
    Blur3,
    Blur5,
    WarpHorizSmall,
    WarpHorizLarge,
    WarpVertSmall,
    WarpVertLarge,
    Barrel,
    Pincushion,
    PerspectiveTop,
    PerspectiveBottom,
    PerspectiveLeft,
    PerspectiveRight,
}

pub const ALL_TRANSFORMS: [TransformId; 16] = [
    TransformId::GammaDark,
    TransformId::GammaBright,
    TransformId::ContrastStretch,
    TransformId::ColorCast,
    TransformId::Blur3,
    TransformId::Blur5,
    TransformId::WarpHorizSmall,
    TransformId::WarpHorizLarge,
    TransformId::WarpVertSmall,
    TransformId::WarpVertLarge,
    TransformId::Barrel,
    TransformId::Pincushion,
    TransformId::PerspectiveTop,
    TransformId::PerspectiveBottom,
    TransformId::PerspectiveLeft,
    TransformId::PerspectiveRight,
];

/// One transform with its scalar parameter. Each id documents its own
/// parameter meaning and legal range; `standard` picks the default.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformSpec {
    pub id: TransformId,
    pub magnitude: f64,
}

impl TransformSpec {
    pub fn standard(id: TransformId) -> Self {
        let magnitude = match id {
            TransformId::GammaDark => 1.8,
            TransformId::GammaBright => 0.55,
            TransformId::ContrastStretch => 0.5,
            TransformId::ColorCast => 0.25,
            TransformId::Blur3 | TransformId::Blur5 => 1.0,
            TransformId::WarpHorizSmall | TransformId::WarpVertSmall => 2.0,
            TransformId::WarpHorizLarge | TransformId::WarpVertLarge => 4.0,
            TransformId::Barrel => 0.18,
            TransformId::Pincushion => 0.15,
            TransformId::PerspectiveTop
            | TransformId::PerspectiveBottom
            | TransformId::PerspectiveLeft
            | TransformId::PerspectiveRight => 0.15,
        };
        TransformSpec { id, magnitude }
    }

    /// (lo, hi) legal magnitude range for this id.
    pub fn range(id: TransformId) -> (f64, f64) {
        match id {
            TransformId::GammaDark => (1.3, 2.2),          // gamma exponent
            TransformId::GammaBright => (0.45, 0.8),       // gamma exponent
            TransformId::ContrastStretch => (0.2, 0.8),    // slope boost
            TransformId::ColorCast => (0.1, 0.4),          // channel skew
            TransformId::Blur3 | TransformId::Blur5 => (1.0, 1.0), // fixed kernel
            TransformId::WarpHorizSmall | TransformId::WarpVertSmall => (1.0, 3.0), // px amplitude
            TransformId::WarpHorizLarge | TransformId::WarpVertLarge => (3.0, 6.0), // px amplitude
            TransformId::Barrel => (0.08, 0.30),           // radial coefficient
            TransformId::Pincushion => (0.08, 0.25),       // radial coefficient
            TransformId::PerspectiveTop
            | TransformId::PerspectiveBottom
            | TransformId::PerspectiveLeft
            | TransformId::PerspectiveRight => (0.06, 0.25), // edge pinch fraction
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = Self::range(self.id);
        if !(lo..=hi).contains(&self.magnitude) {
            return Err(Error::Config(format!(
                "{:?} magnitude {} outside [{lo}, {hi}]",
                self.id, self.magnitude
            )));
        }
        Ok(())
    }

    pub fn is_photometric(&self) -> bool {
        matches!(
            self.id,
            TransformId::GammaDark
                | TransformId::GammaBright
                | TransformId::ContrastStretch
                | TransformId::ColorCast
                | TransformId::Blur3
                | TransformId::Blur5
        )
    }
}

/// Row-major 3x3 homography.
#[derive(Clone, Copy, Debug)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    pub fn identity() -> Self {
        Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let h = &self.0;
        let w = h[6] * x + h[7] * y + h[8];
        ((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w)
    }

    /// Homography mapping the four `src` points onto `dst` (direct linear
    /// solve of the 8x8 system, h22 fixed at 1).
    pub fn from_quads(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Homography> {
        let mut m = [[0.0f64; 9]; 8];
        for i in 0..4 {
            let (x, y) = src[i];
            let (u, v) = dst[i];
            m[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            m[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        // Gaussian elimination with partial pivoting.
        for col in 0..8 {
            let mut pivot = col;
            for row in col + 1..8 {
                if m[row][col].abs() > m[pivot][col].abs() {
                    pivot = row;
                }
            }
            if m[pivot][col].abs() < 1e-12 {
                return Err(Error::Domain("degenerate quad for homography".into()));
            }
            m.swap(col, pivot);
            let diag = m[col][col];
            for v in &mut m[col] {
                *v /= diag;
            }
            for row in 0..8 {
                if row != col {
                    let factor = m[row][col];
                    if factor != 0.0 {
                        for k in 0..9 {
                            m[row][k] -= factor * m[col][k];
                        }
                    }
                }
            }
        }
        let mut h = [0.0f64; 9];
        for i in 0..8 {
            h[i] = m[i][8];
        }
        h[8] = 1.0;
        Ok(Homography(h))
    }

    pub fn inverse(&self) -> Result<Homography> {
        let h = &self.0;
        let det = h[0] * (h[4] * h[8] - h[5] * h[7]) - h[1] * (h[3] * h[8] - h[5] * h[6])
            + h[2] * (h[3] * h[7] - h[4] * h[6]);
        if det.abs() < 1e-15 {
            return Err(Error::Domain("singular homography".into()));
        }
        let inv = [
            (h[4] * h[8] - h[5] * h[7]) / det,
            (h[2] * h[7] - h[1] * h[8]) / det,
            (h[1] * h[5] - h[2] * h[4]) / det,
            (h[5] * h[6] - h[3] * h[8]) / det,
            (h[0] * h[8] - h[2] * h[6]) / det,
            (h[2] * h[3] - h[0] * h[5]) / det,
            (h[3] * h[7] - h[4] * h[6]) / det,
            (h[1] * h[6] - h[0] * h[7]) / det,
            (h[0] * h[4] - h[1] * h[3]) / det,
        ];
        Ok(Homography(inv))
    }
}

/// Forward point map of a geometric transform (source -> destination).
fn forward_map(spec: &TransformSpec, w: f64, h: f64, x: f64, y: f64) -> (f64, f64) {
    match spec.id {
        TransformId::WarpHorizSmall | TransformId::WarpHorizLarge => {
            let lambda = (h / 2.0).max(4.0);
            (x + spec.magnitude * (std::f64::consts::TAU * y / lambda).sin(), y)
        }
        TransformId::WarpVertSmall | TransformId::WarpVertLarge => {
            let lambda = (w / 2.0).max(4.0);
            (x, y + spec.magnitude * (std::f64::consts::TAU * x / lambda).sin())
        }
        TransformId::Barrel | TransformId::Pincushion => {
            let k = if spec.id == TransformId::Barrel { spec.magnitude } else { -spec.magnitude };
            let (cx, cy) = (w / 2.0, h / 2.0);
            let rmax = (cx * cx + cy * cy).sqrt();
            let (dx, dy) = (x - cx, y - cy);
            let r = (dx * dx + dy * dy).sqrt();
            if r < 1e-9 {
                return (x, y);
            }
            let factor = 1.0 + k * (r / rmax) * (r / rmax);
            (cx + dx * factor, cy + dy * factor)
        }
        TransformId::PerspectiveTop
        | TransformId::PerspectiveBottom
        | TransformId::PerspectiveLeft
        | TransformId::PerspectiveRight => perspective_homography(spec, w, h).apply(x, y),
        _ => (x, y),
    }
}

/// Inverse point map (destination -> source) used for resampling.
fn inverse_map(spec: &TransformSpec, w: f64, h: f64, x: f64, y: f64) -> (f64, f64) {
    match spec.id {
        TransformId::WarpHorizSmall | TransformId::WarpHorizLarge => {
            let lambda = (h / 2.0).max(4.0);
            (x - spec.magnitude * (std::f64::consts::TAU * y / lambda).sin(), y)
        }
        TransformId::WarpVertSmall | TransformId::WarpVertLarge => {
            let lambda = (w / 2.0).max(4.0);
            (x, y - spec.magnitude * (std::f64::consts::TAU * x / lambda).sin())
        }
        TransformId::Barrel | TransformId::Pincushion => {
            let k = if spec.id == TransformId::Barrel { spec.magnitude } else { -spec.magnitude };
            let (cx, cy) = (w / 2.0, h / 2.0);
            let rmax = (cx * cx + cy * cy).sqrt();
            let (dx, dy) = (x - cx, y - cy);
            let rd = (dx * dx + dy * dy).sqrt();
            if rd < 1e-9 {
                return (x, y);
            }
            // Solve rd = rs * (1 + k (rs/rmax)^2) for rs by Newton iteration.
            let mut rs = rd;
            for _ in 0..12 {
                let t = rs / rmax;
                let f = rs * (1.0 + k * t * t) - rd;
                let df = 1.0 + 3.0 * k * t * t;
                rs -= f / df;
            }
            let scale = rs / rd;
            (cx + dx * scale, cy + dy * scale)
        }
        TransformId::PerspectiveTop
        | TransformId::PerspectiveBottom
        | TransformId::PerspectiveLeft
        | TransformId::PerspectiveRight => {
            let hom = perspective_homography(spec, w, h).inverse().expect("pinch quads are non-degenerate");
            hom.apply(x, y)
        }
        _ => (x, y),
    }
}

/// Homography pinching one canvas edge inward by `magnitude` of its length.
fn perspective_homography(spec: &TransformSpec, w: f64, h: f64) -> Homography {
    let s = spec.magnitude;
    let src = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    let dst = match spec.id {
        TransformId::PerspectiveTop => [(s * w, 0.0), ((1.0 - s) * w, 0.0), (w, h), (0.0, h)],
        TransformId::PerspectiveBottom => [(0.0, 0.0), (w, 0.0), ((1.0 - s) * w, h), (s * w, h)],
        TransformId::PerspectiveLeft => [(0.0, s * h), (w, 0.0), (w, h), (0.0, (1.0 - s) * h)],
        TransformId::PerspectiveRight => [(0.0, 0.0), (w, s * h), (w, (1.0 - s) * h), (0.0, h)],
        _ => src,
    };
    Homography::from_quads(&src, &dst).expect("pinch quads are non-degenerate")
}

fn apply_photometric(img: &RgbImage, spec: &TransformSpec) -> RgbImage {
    let mut out = img.clone();
    match spec.id {
        TransformId::GammaDark | TransformId::GammaBright => {
            let gamma = spec.magnitude;
            let lut: Vec<u8> =
                (0..256).map(|v| round_u8(255.0 * (v as f64 / 255.0).powf(gamma))).collect();
            for b in &mut out.data {
                *b = lut[*b as usize];
            }
        }
        TransformId::ContrastStretch => {
            let slope = 1.0 + spec.magnitude;
            let lut: Vec<u8> =
                (0..256).map(|v| round_u8(128.0 + (v as f64 - 128.0) * slope)).collect();
            for b in &mut out.data {
                *b = lut[*b as usize];
            }
        }
        TransformId::ColorCast => {
            let s = spec.magnitude;
            let gains = [1.0 + s, 1.0, 1.0 - s];
            for px in out.data.chunks_exact_mut(3) {
                for c in 0..3 {
                    px[c] = round_u8(px[c] as f64 * gains[c]);
                }
            }
        }
        TransformId::Blur3 | TransformId::Blur5 => {
            let radius = if spec.id == TransformId::Blur3 { 1i64 } else { 2i64 };
            let (w, h) = (img.width as i64, img.height as i64);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = [0.0f64; 3];
                    let mut n = 0.0;
                    for dy in -radius..=radius {
                        for dx in -radius..=radius {
                            let sx = (x + dx).clamp(0, w - 1) as usize;
                            let sy = (y + dy).clamp(0, h - 1) as usize;
                            let p = img.get(sx, sy);
                            for c in 0..3 {
                                acc[c] += p[c] as f64;
                            }
                            n += 1.0;
                        }
                    }
                    out.set(x as usize, y as usize, [
                        round_u8(acc[0] / n),
                        round_u8(acc[1] / n),
                        round_u8(acc[2] / n),
                    ]);
                }
            }
        }
        _ => unreachable!("geometric id in photometric path"),
    }
    out
}

fn apply_geometric(img: &RgbImage, spec: &TransformSpec) -> RgbImage {
    let (w, h) = (img.width, img.height);
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inverse_map(spec, w as f64, h as f64, x as f64 + 0.5, y as f64 + 0.5);
            let p = img.sample_bilinear(sx, sy);
            out.set(x, y, [round_u8(p[0]), round_u8(p[1]), round_u8(p[2])]);
        }
    }
    out
}

/// Axis-aligned hull of forward-mapped samples along the box boundary,
/// clipped to the canvas. Homographies only need the four corners; warps
/// sample the edges densely (~2 px spacing).
pub fn remap_box(spec: &TransformSpec, w: f64, h: f64, bbox: &BoundingBox) -> Option<BoundingBox> {
    let corners_only = matches!(
        spec.id,
        TransformId::PerspectiveTop
            | TransformId::PerspectiveBottom
            | TransformId::PerspectiveLeft
            | TransformId::PerspectiveRight
    );
    let mut points = Vec::new();
    if corners_only {
        points.extend([
            (bbox.u, bbox.v),
            (bbox.right(), bbox.v),
            (bbox.right(), bbox.bottom()),
            (bbox.u, bbox.bottom()),
        ]);
    } else {
        let steps_x = (bbox.w / 2.0).ceil().max(1.0) as usize;
        let steps_y = (bbox.h / 2.0).ceil().max(1.0) as usize;
        for i in 0..=steps_x {
            let x = bbox.u + bbox.w * i as f64 / steps_x as f64;
            points.push((x, bbox.v));
            points.push((x, bbox.bottom()));
        }
        for i in 0..=steps_y {
            let y = bbox.v + bbox.h * i as f64 / steps_y as f64;
            points.push((bbox.u, y));
            points.push((bbox.right(), y));
        }
    }
    let (mut lo_x, mut lo_y) = (f64::INFINITY, f64::INFINITY);
    let (mut hi_x, mut hi_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in points {
        let (tx, ty) = forward_map(spec, w, h, x, y);
        lo_x = lo_x.min(tx);
        lo_y = lo_y.min(ty);
        hi_x = hi_x.max(tx);
        hi_y = hi_y.max(ty);
    }
    lo_x = lo_x.clamp(0.0, w);
    lo_y = lo_y.clamp(0.0, h);
    hi_x = hi_x.clamp(0.0, w);
    hi_y = hi_y.clamp(0.0, h);
    let (bw, bh) = (hi_x - lo_x, hi_y - lo_y);
    if bw < 4.0 || bh < 4.0 {
        return None;
    }
    Some(BoundingBox::new(lo_x, lo_y, bw, bh))
}

/// Applies one transform. Photometric transforms keep annotations
/// bit-identical; geometric ones remap every box and report how many
/// instances degenerated below 4 px and were dropped.
pub fn augment(img: &AnnotatedImage, spec: &TransformSpec) -> Result<(AnnotatedImage, usize)> {
    spec.validate()?;
    if spec.is_photometric() {
        return Ok((
            AnnotatedImage {
                image: apply_photometric(&img.image, spec),
                instances: img.instances.clone(),
                source_id: img.source_id.clone(),
                modality: img.modality,
            },
            0,
        ));
    }
    let (w, h) = (img.image.width as f64, img.image.height as f64);
    let image = apply_geometric(&img.image, spec);
    let mut instances = Vec::new();
    let mut dropped = 0;
    for inst in &img.instances {
        match remap_box(spec, w, h, &inst.bbox) {
            Some(bbox) => instances.push(Instance { bbox, class: inst.class }),
            None => dropped += 1,
        }
    }
    Ok((
        AnnotatedImage { image, instances, source_id: img.source_id.clone(), modality: img.modality },
        dropped,
    ))
}
