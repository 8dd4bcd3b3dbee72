//! Procedural glyphs: seeded compositions of strokes, arcs and polygons,
//! defined in unit coordinates and rasterizable at any scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Point = (f64, f64);

#[derive(Clone, Debug)]
pub enum Primitive {
    /// Thick line segment.
    Stroke { a: Point, b: Point, thickness: f64 },
    /// Circular arc approximated as a polyline.
    Arc { center: Point, radius: f64, start: f64, sweep: f64, thickness: f64 },
    /// Closed polygon, outlined or filled.
    Polygon { points: Vec<Point>, thickness: f64, filled: bool },
}

/// One instance class worth of geometry. Same seed, same glyph.
#[derive(Clone, Debug)]
pub struct Glyph {
    pub primitives: Vec<Primitive>,
}

fn dist_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn point_in_polygon(p: Point, points: &[Point]) -> bool {
    // Even-odd rule.
    let mut inside = false;
    let n = points.len();
    for i in 0..n {
        let (x1, y1) = points[i];
        let (x2, y2) = points[(i + 1) % n];
        if (y1 > p.1) != (y2 > p.1) {
            let x_at = x1 + (p.1 - y1) / (y2 - y1) * (x2 - x1);
            if p.0 < x_at {
                inside = !inside;
            }
        }
    }
    inside
}

fn arc_polyline(center: Point, radius: f64, start: f64, sweep: f64) -> Vec<Point> {
    let steps = 24;
    (0..=steps)
        .map(|i| {
            let t = start + sweep * i as f64 / steps as f64;
            (center.0 + radius * t.cos(), center.1 + radius * t.sin())
        })
        .collect()
}

impl Primitive {
    /// Coverage in [0, 1] at a unit-space point, with edges softened over
    /// `soft` unit lengths.
    fn coverage(&self, p: Point, soft: f64) -> f64 {
        match self {
            Primitive::Stroke { a, b, thickness } => {
                let d = dist_to_segment(p, *a, *b);
                ((thickness / 2.0 - d) / soft + 0.5).clamp(0.0, 1.0)
            }
            Primitive::Arc { center, radius, start, sweep, thickness } => {
                let pts = arc_polyline(*center, *radius, *start, *sweep);
                let mut d = f64::INFINITY;
                for w in pts.windows(2) {
                    d = d.min(dist_to_segment(p, w[0], w[1]));
                }
                ((thickness / 2.0 - d) / soft + 0.5).clamp(0.0, 1.0)
            }
            Primitive::Polygon { points, thickness, filled } => {
                let n = points.len();
                let mut d = f64::INFINITY;
                for i in 0..n {
                    d = d.min(dist_to_segment(p, points[i], points[(i + 1) % n]));
                }
                if *filled {
                    let signed = if point_in_polygon(p, points) { d } else { -d };
                    (signed / soft + 0.5).clamp(0.0, 1.0)
                } else {
                    ((thickness / 2.0 - d) / soft + 0.5).clamp(0.0, 1.0)
                }
            }
        }
    }

    fn control_points(&self) -> Vec<Point> {
        match self {
            Primitive::Stroke { a, b, .. } => vec![*a, *b],
            Primitive::Arc { center, radius, start, sweep, .. } => {
                arc_polyline(*center, *radius, *start, *sweep)
            }
            Primitive::Polygon { points, .. } => points.clone(),
        }
    }

    fn pad(&self) -> f64 {
        match self {
            Primitive::Stroke { thickness, .. }
            | Primitive::Arc { thickness, .. }
            | Primitive::Polygon { thickness, .. } => thickness / 2.0,
        }
    }

    fn map_points(&self, f: &mut impl FnMut(Point) -> Point) -> Primitive {
        match self {
            Primitive::Stroke { a, b, thickness } => {
                Primitive::Stroke { a: f(*a), b: f(*b), thickness: *thickness }
            }
            Primitive::Arc { center, radius, start, sweep, thickness } => Primitive::Arc {
                center: f(*center),
                radius: *radius,
                start: *start,
                sweep: *sweep,
                thickness: *thickness,
            },
            Primitive::Polygon { points, thickness, filled } => Primitive::Polygon {
                points: points.iter().map(|&p| f(p)).collect(),
                thickness: *thickness,
                filled: *filled,
            },
        }
    }
}

impl Glyph {
    /// Deterministic glyph with 3..=6 primitives, normalized so the inked
    /// area spans most of the unit square while staying inside it.
    pub fn from_seed(seed: u64) -> Glyph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.gen_range(3..=6);
        let mut primitives = Vec::with_capacity(count);
        for _ in 0..count {
            let kind: f64 = rng.gen();
            let thickness = rng.gen_range(0.07..0.14);
            if kind < 0.40 {
                primitives.push(Primitive::Stroke {
                    a: (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)),
                    b: (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)),
                    thickness,
                });
            } else if kind < 0.65 {
                primitives.push(Primitive::Arc {
                    center: (rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)),
                    radius: rng.gen_range(0.12..0.35),
                    start: rng.gen_range(0.0..std::f64::consts::TAU),
                    sweep: rng.gen_range(1.5..std::f64::consts::TAU),
                    thickness,
                });
            } else {
                let center: Point = (rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7));
                let verts = rng.gen_range(3..=5);
                let base = rng.gen_range(0.0..std::f64::consts::TAU);
                let points = (0..verts)
                    .map(|i| {
                        let ang = base + std::f64::consts::TAU * i as f64 / verts as f64;
                        let r = rng.gen_range(0.10..0.30);
                        (center.0 + r * ang.cos(), center.1 + r * ang.sin())
                    })
                    .collect();
                primitives.push(Primitive::Polygon { points, thickness, filled: rng.gen_bool(0.45) });
            }
        }
        Glyph { primitives }.normalized()
    }

    /// Rescales the inked extent into [0.07, 0.93]^2.
    fn normalized(self) -> Glyph {
        let (mut lo_x, mut lo_y) = (f64::INFINITY, f64::INFINITY);
        let (mut hi_x, mut hi_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for prim in &self.primitives {
            let pad = prim.pad();
            for (x, y) in prim.control_points() {
                lo_x = lo_x.min(x - pad);
                lo_y = lo_y.min(y - pad);
                hi_x = hi_x.max(x + pad);
                hi_y = hi_y.max(y + pad);
            }
        }
        let span_x = (hi_x - lo_x).max(1e-6);
        let span_y = (hi_y - lo_y).max(1e-6);
        let scale = (0.86 / span_x).min(0.86 / span_y);
        let mut map = move |(x, y): Point| -> Point {
            (0.07 + (x - lo_x) * scale + (0.86 - span_x * scale) / 2.0,
             0.07 + (y - lo_y) * scale + (0.86 - span_y * scale) / 2.0)
        };
        // Thickness scales with the same factor so stroke weight stays
        // proportional to the glyph extent.
        let primitives = self
            .primitives
            .iter()
            .map(|p| {
                let mapped = p.map_points(&mut map);
                match mapped {
                    Primitive::Stroke { a, b, thickness } => {
                        Primitive::Stroke { a, b, thickness: (thickness * scale).max(0.05) }
                    }
                    Primitive::Arc { center, radius, start, sweep, thickness } => Primitive::Arc {
                        center,
                        radius: radius * scale,
                        start,
                        sweep,
                        thickness: (thickness * scale).max(0.05),
                    },
                    Primitive::Polygon { points, thickness, filled } => Primitive::Polygon {
                        points,
                        thickness: (thickness * scale).max(0.05),
                        filled,
                    },
                }
            })
            .collect();
        Glyph { primitives }
    }

    /// Perturbs every control point by up to ±`amount` (unit coords),
    /// emulating a hand-drawn copy of the same shape.
    pub fn jittered(&self, seed: u64, amount: f64) -> Glyph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let primitives = self
            .primitives
            .iter()
            .map(|p| {
                // One offset per primitive endpoint keeps strokes connected
                // the way a human redraw would.
                p.map_points(&mut |(x, y)| {
                    (
                        x + rng.gen_range(-amount..=amount),
                        y + rng.gen_range(-amount..=amount),
                    )
                })
            })
            .collect();
        Glyph { primitives }
    }

    /// Coverage mask at `size` x `size` pixels, values in [0, 1].
    pub fn render_mask(&self, size: usize) -> Vec<f64> {
        let soft = 0.75 / size as f64;
        let mut mask = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let p = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
                let mut a: f64 = 0.0;
                for prim in &self.primitives {
                    a = a.max(prim.coverage(p, soft));
                    if a >= 1.0 {
                        break;
                    }
                }
                mask[y * size + x] = a;
            }
        }
        mask
    }
}
