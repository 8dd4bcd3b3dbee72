//! Deterministic synthetic dataset generation: class-labeled glyph
//! instances composited onto value-noise backgrounds with exact boxes,
//! a sketch renderer, image scaling, and the augmentation suite.
//!
//! Layout on disk: `images/*.ppm`, `sketches/*.pgm`, `annotations.jsonl`
//! (one object per image) and `meta.json` (config echo plus seed). The
//! whole tree is a pure function of (config, seed).

mod glyph;
mod raster;
mod transforms;

pub use glyph::Glyph;
pub use raster::RgbImage;
pub use transforms::{augment, remap_box, Homography, TransformId, TransformSpec, ALL_TRANSFORMS};

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::BoundingBox;
use crate::error::{Error, Result};

pub const INSTANCE_MIN_PX: usize = 20;
pub const INSTANCE_MAX_PX: usize = 80;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Photo,
    Sketch,
}

/// One placed instance: its exact box and class id (-1 for unlabeled
/// distracter instances).
#[derive(Clone, Debug)]
pub struct Instance {
    pub bbox: BoundingBox,
    pub class: i32,
}

/// A raster plus its instance annotations.
#[derive(Clone, Debug)]
pub struct AnnotatedImage {
    pub image: RgbImage,
    pub instances: Vec<Instance>,
    pub source_id: String,
    pub modality: Modality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Distracter,
    PairPhoto,
    PairSketch,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecordInstance {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub class: i32,
}

/// One line of `annotations.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image: String,
    pub modality: Modality,
    pub split: Split,
    pub instances: Vec<RecordInstance>,
}

impl DatasetRecord {
    /// Image id used by the gallery index: the path stem.
    pub fn id(&self) -> &str {
        let name = self.image.rsplit('/').next().unwrap_or(&self.image);
        name.rsplit_once('.').map(|(stem, _)| stem).unwrap_or(name)
    }
}

/// Generation parameters; echoed into `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub images_per_class: usize,
    pub test_images_per_class: usize,
    pub image_size: usize,
    pub distracters: usize,
    pub sketch_pairs: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("dataset needs at least 2 classes".into()));
        }
        if self.images_per_class < 2 {
            return Err(Error::Config(
                "dataset needs at least 2 images per class (query + gallery split needs mates)".into(),
            ));
        }
        if self.image_size < 32 {
            return Err(Error::Config("image_size must be at least 32".into()));
        }
        Ok(())
    }

    /// Global class id space: labeled classes first, then sketch pairs.
    pub fn pair_class(&self, pair: usize) -> i32 {
        (self.classes + pair) as i32
    }
}

/// splitmix64 step, used to derive independent per-image seeds.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic seed for (master, tag, index) triples.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    splitmix64(master ^ h.wrapping_add(index.wrapping_mul(0x9e3779b97f4a7c15)))
}

/// Glyph geometry is a pure function of the class id, independent of the
/// dataset seed, so sketches can be re-rendered from annotations alone.
pub fn glyph_seed(class: i32) -> u64 {
    splitmix64(0x67_6c_79_70_68 ^ (class as u64).wrapping_mul(0x9e3779b97f4a7c15))
}

fn distracter_glyph_seed(index: usize) -> u64 {
    splitmix64(0x64_69_73_74 ^ (index as u64).wrapping_mul(0xbf58476d1ce4e5b9))
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in [0, 1].
fn value_noise(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; size * size];
    let mut total = 0.0;
    for (cell, amp) in [(16usize, 1.0f64), (8, 0.5), (4, 0.25)] {
        let gw = size / cell + 2;
        let lattice: Vec<f64> = (0..gw * gw).map(|_| rng.gen::<f64>()).collect();
        for y in 0..size {
            let fy = y as f64 / cell as f64;
            let y0 = fy.floor() as usize;
            let ty = smoothstep(fy - y0 as f64);
            for x in 0..size {
                let fx = x as f64 / cell as f64;
                let x0 = fx.floor() as usize;
                let tx = smoothstep(fx - x0 as f64);
                let v00 = lattice[y0 * gw + x0];
                let v10 = lattice[y0 * gw + x0 + 1];
                let v01 = lattice[(y0 + 1) * gw + x0];
                let v11 = lattice[(y0 + 1) * gw + x0 + 1];
                let v = v00 * (1.0 - tx) * (1.0 - ty)
                    + v10 * tx * (1.0 - ty)
                    + v01 * (1.0 - tx) * ty
                    + v11 * tx * ty;
                acc[y * size + x] += amp * v;
            }
        }
        total += amp;
    }
    for v in &mut acc {
        *v /= total;
    }
    acc
}

fn render_background(rng: &mut ChaCha8Rng, size: usize) -> RgbImage {
    let base = [
        rng.gen_range(140.0..200.0),
        rng.gen_range(130.0..190.0),
        rng.gen_range(120.0..185.0),
    ];
    let amp = rng.gen_range(25.0..45.0);
    let noise = value_noise(rng, size);
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let n = (noise[y * size + x] - 0.5) * 2.0 * amp;
            img.set(x, y, [
                raster::round_u8(base[0] + n),
                raster::round_u8(base[1] + n),
                raster::round_u8(base[2] + n * 0.8),
            ]);
        }
    }
    img
}

fn boxes_overlap(a: &BoundingBox, b: &BoundingBox, gap: f64) -> bool {
    a.u - gap < b.right() && b.u - gap < a.right() && a.v - gap < b.bottom() && b.v - gap < a.bottom()
}

/// Places `count` square boxes of random side 20..=80 px (clamped to the
/// image) without overlap; fails after 100 attempts per box.
fn place_boxes(
    rng: &mut ChaCha8Rng,
    size: usize,
    count: usize,
    image_name: &str,
) -> Result<Vec<BoundingBox>> {
    let margin = 2usize;
    let max_side = INSTANCE_MAX_PX.min(size - 2 * margin - 4);
    // Budget sizes so `count` instances can coexist with their gaps.
    let max_side = if count > 1 {
        max_side.min(((size - 2 * margin).saturating_sub(4 * (count - 1)) / count).max(8))
    } else {
        max_side
    };
    let min_side = INSTANCE_MIN_PX.min(max_side);
    let max_side = max_side.max(min_side);
    // Up to 100 attempts at a full layout; one stuck box restarts the image.
    'attempt: for _ in 0..100 {
        let mut placed: Vec<BoundingBox> = Vec::with_capacity(count);
        for _ in 0..count {
            let mut ok = false;
            for _try in 0..40 {
                let side = rng.gen_range(min_side..=max_side);
                let u = rng.gen_range(margin..=size - margin - side);
                let v = rng.gen_range(margin..=size - margin - side);
                let cand = BoundingBox::new(u as f64, v as f64, side as f64, side as f64);
                if placed.iter().all(|b| !boxes_overlap(b, &cand, 4.0)) {
                    placed.push(cand);
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'attempt;
            }
        }
        return Ok(placed);
    }
    Err(Error::Generation(format!(
        "could not place {count} instances in image {image_name} after 100 attempts"
    )))
}

fn ink_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // Muted dark inks.
    let palettes: [[std::ops::Range<f64>; 3]; 4] = [
        [10.0..45.0, 10.0..45.0, 30.0..90.0],  // navy
        [15.0..50.0, 15.0..50.0, 15.0..50.0],  // charcoal
        [60.0..110.0, 10.0..40.0, 10.0..40.0], // dark red
        [10.0..40.0, 50.0..95.0, 25.0..60.0],  // dark green
    ];
    let p = &palettes[rng.gen_range(0..palettes.len())];
    [rng.gen_range(p[0].clone()), rng.gen_range(p[1].clone()), rng.gen_range(p[2].clone())]
}

fn composite_glyph(img: &mut RgbImage, mask: &[f64], size: usize, at: (usize, usize), ink: [f64; 3], opacity: f64) {
    for my in 0..size {
        for mx in 0..size {
            let a = mask[my * size + mx] * opacity;
            if a <= 0.0 {
                continue;
            }
            let (x, y) = (at.0 + mx, at.1 + my);
            let bg = img.get(x, y);
            img.set(x, y, [
                raster::round_u8(bg[0] as f64 * (1.0 - a) + ink[0] * a),
                raster::round_u8(bg[1] as f64 * (1.0 - a) + ink[1] * a),
                raster::round_u8(bg[2] as f64 * (1.0 - a) + ink[2] * a),
            ]);
        }
    }
}

/// Renders one photo: noise background plus `count` copies of the glyph.
fn compose_photo(
    per_image_seed: u64,
    size: usize,
    glyph: &Glyph,
    class: i32,
    count: usize,
    name: &str,
) -> Result<(RgbImage, Vec<Instance>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(per_image_seed);
    let mut img = render_background(&mut rng, size);
    let boxes = place_boxes(&mut rng, size, count, name)?;
    let mut instances = Vec::with_capacity(boxes.len());
    for bbox in boxes {
        let side = bbox.w as usize;
        let mask = glyph.render_mask(side);
        let ink = ink_color(&mut rng);
        let opacity = rng.gen_range(0.85..1.0);
        composite_glyph(&mut img, &mask, side, (bbox.u as usize, bbox.v as usize), ink, opacity);
        instances.push(Instance { bbox, class });
    }
    Ok((img, instances))
}

/// Grayscale hand-drawn look: jittered glyph edges on a white background.
/// Boxes and classes carry over unchanged.
pub fn render_sketch(img: &AnnotatedImage) -> Result<AnnotatedImage> {
    if img.modality != Modality::Photo {
        return Err(Error::Input("render_sketch expects a photo".into()));
    }
    let (w, h) = (img.image.width, img.image.height);
    let mut canvas = RgbImage::filled(w, h, [255, 255, 255]);
    let id_hash = derive_seed(0, &img.source_id, 0);
    for (idx, inst) in img.instances.iter().enumerate() {
        if inst.class < 0 {
            continue;
        }
        let side = inst.bbox.w.min(inst.bbox.h).round().max(8.0) as usize;
        let glyph = Glyph::from_seed(glyph_seed(inst.class));
        // ±2 px of control-point noise at render scale.
        let jitter = glyph.jittered(derive_seed(id_hash, "sketch", idx as u64), 2.0 / side as f64);
        let mask = jitter.render_mask(side);
        // Gradient magnitude of the coverage field, thresholded into strokes.
        let grad_at = |x: usize, y: usize| -> f64 {
            let sample = |xx: i64, yy: i64| -> f64 {
                let xx = xx.clamp(0, side as i64 - 1) as usize;
                let yy = yy.clamp(0, side as i64 - 1) as usize;
                mask[yy * side + xx]
            };
            let (x, y) = (x as i64, y as i64);
            let gx = sample(x + 1, y) - sample(x - 1, y);
            let gy = sample(x, y + 1) - sample(x, y - 1);
            (gx * gx + gy * gy).sqrt()
        };
        let (u0, v0) = (inst.bbox.u.round() as usize, inst.bbox.v.round() as usize);
        for my in 0..side {
            for mx in 0..side {
                let g = grad_at(mx, my);
                let strength = ((g - 0.25) * 4.0).clamp(0.0, 1.0);
                if strength > 0.0 {
                    let (x, y) = ((u0 + mx).min(w - 1), (v0 + my).min(h - 1));
                    let bg = canvas.get(x, y);
                    let v = raster::round_u8(bg[0] as f64 * (1.0 - strength) + 45.0 * strength);
                    canvas.set(x, y, [v, v, v]);
                }
            }
        }
    }
    Ok(AnnotatedImage {
        image: canvas,
        instances: img.instances.clone(),
        source_id: img.source_id.clone(),
        modality: Modality::Sketch,
    })
}

/// Resizes so min(width, height) = `target`, aspect preserved with the
/// longer edge rounded to nearest; boxes scale by the same factors.
pub fn scale_shorter_edge(img: &AnnotatedImage, target: usize) -> Result<AnnotatedImage> {
    if target < 8 {
        return Err(Error::Config(format!("scale target {target} below minimum 8")));
    }
    let (w, h) = (img.image.width, img.image.height);
    let shorter = w.min(h);
    if shorter == target {
        return Ok(img.clone());
    }
    let factor = target as f64 / shorter as f64;
    let (nw, nh) = if w <= h {
        (target, (h as f64 * factor).round() as usize)
    } else {
        ((w as f64 * factor).round() as usize, target)
    };
    let fx = nw as f64 / w as f64;
    let fy = nh as f64 / h as f64;
    let instances = img
        .instances
        .iter()
        .map(|i| Instance {
            bbox: BoundingBox::new(i.bbox.u * fx, i.bbox.v * fy, i.bbox.w * fx, i.bbox.h * fy),
            class: i.class,
        })
        .collect();
    Ok(AnnotatedImage {
        image: img.image.resize(nw, nh),
        instances,
        source_id: img.source_id.clone(),
        modality: img.modality,
    })
}

fn record_for(image: String, modality: Modality, split: Split, instances: &[Instance]) -> DatasetRecord {
    DatasetRecord {
        image,
        modality,
        split,
        instances: instances
            .iter()
            .map(|i| RecordInstance { bbox: [i.bbox.u, i.bbox.v, i.bbox.w, i.bbox.h], class: i.class })
            .collect(),
    }
}

/// Generates the full dataset tree under `out_dir`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Vec<DatasetRecord>> {
    spec.validate()?;
    fs::create_dir_all(out_dir.join("images"))?;
    if spec.sketch_pairs > 0 {
        fs::create_dir_all(out_dir.join("sketches"))?;
    }
    let size = spec.image_size;
    let mut records: Vec<DatasetRecord> = Vec::new();

    let emit_photo = |records: &mut Vec<DatasetRecord>,
                          name: String,
                          split: Split,
                          seed_tag: &str,
                          seed_idx: u64,
                          glyph: &Glyph,
                          class: i32,
                          count: usize|
     -> Result<(RgbImage, Vec<Instance>)> {
        let per_seed = derive_seed(spec.seed, seed_tag, seed_idx);
        let (img, instances) = compose_photo(per_seed, size, glyph, class, count, &name)?;
        img.write_ppm(&out_dir.join("images").join(&name))?;
        records.push(record_for(format!("images/{name}"), Modality::Photo, split, &instances));
        Ok((img, instances))
    };

    // Labeled classes: train then test split.
    for c in 0..spec.classes {
        let glyph = Glyph::from_seed(glyph_seed(c as i32));
        for i in 0..spec.images_per_class {
            let idx = (c * spec.images_per_class + i) as u64;
            let per_seed = derive_seed(spec.seed, "train", idx);
            let count = 1 + (ChaCha8Rng::seed_from_u64(per_seed ^ 0x55).gen_range(0..3)) as usize;
            let name = format!("train_c{c:03}_i{i:02}.ppm");
            emit_photo(&mut records, name, Split::Train, "train", idx, &glyph, c as i32, count)?;
        }
        for i in 0..spec.test_images_per_class {
            let idx = (c * spec.test_images_per_class + i) as u64;
            let per_seed = derive_seed(spec.seed, "test", idx);
            let count = 1 + (ChaCha8Rng::seed_from_u64(per_seed ^ 0x55).gen_range(0..3)) as usize;
            let name = format!("test_c{c:03}_i{i:02}.ppm");
            emit_photo(&mut records, name, Split::Test, "test", idx, &glyph, c as i32, count)?;
        }
    }

    // Distracters: each gets its own glyph outside the labeled class space.
    for j in 0..spec.distracters {
        let glyph = Glyph::from_seed(distracter_glyph_seed(j));
        let per_seed = derive_seed(spec.seed, "distracter", j as u64);
        let count = 1 + (ChaCha8Rng::seed_from_u64(per_seed ^ 0x55).gen_range(0..3)) as usize;
        let name = format!("distracter_{j:05}.ppm");
        emit_photo(&mut records, name, Split::Distracter, "distracter", j as u64, &glyph, -1, count)?;
    }

    // Sketch-photo pairs on fresh classes after the labeled ones.
    for p in 0..spec.sketch_pairs {
        let class = spec.pair_class(p);
        let glyph = Glyph::from_seed(glyph_seed(class));
        let name = format!("pair_{p:03}_photo.ppm");
        let (img, instances) =
            emit_photo(&mut records, name.clone(), Split::PairPhoto, "pair", p as u64, &glyph, class, 1)?;
        let photo = AnnotatedImage {
            image: img,
            instances,
            source_id: format!("pair_{p:03}_photo"),
            modality: Modality::Photo,
        };
        let sketch = render_sketch(&photo)?;
        let sketch_name = format!("pair_{p:03}_sketch.pgm");
        sketch.image.write_pgm(&out_dir.join("sketches").join(&sketch_name))?;
        records.push(record_for(
            format!("sketches/{sketch_name}"),
            Modality::Sketch,
            Split::PairSketch,
            &sketch.instances,
        ));
    }

    let mut jsonl = std::io::BufWriter::new(fs::File::create(out_dir.join("annotations.jsonl"))?);
    for record in &records {
        serde_json::to_writer(&mut jsonl, record).map_err(|e| Error::Format(e.to_string()))?;
        jsonl.write_all(b"\n")?;
    }
    jsonl.flush()?;

    let meta = serde_json::json!({ "seed": spec.seed, "config": spec });
    fs::write(out_dir.join("meta.json"), serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?)?;
    Ok(records)
}

/// A generated dataset on disk.
pub struct Dataset {
    pub dir: PathBuf,
    pub records: Vec<DatasetRecord>,
    pub spec: DatasetSpec,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let ann = dir.join("annotations.jsonl");
        if !ann.exists() {
            return Err(Error::MissingArtifact(format!(
                "{} not found: run the gen stage first",
                ann.display()
            )));
        }
        let reader = BufReader::new(fs::File::open(&ann)?);
        let mut records = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("annotations.jsonl: {e}")))?);
        }
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)
            .map_err(|e| Error::Parse(format!("meta.json: {e}")))?;
        let spec: DatasetSpec = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Parse(format!("meta.json config: {e}")))?;
        Ok(Dataset { dir: dir.to_path_buf(), records, spec })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn load_image(&self, record: &DatasetRecord) -> Result<AnnotatedImage> {
        let path = self.dir.join(&record.image);
        let image = if record.image.ends_with(".pgm") {
            RgbImage::read_pgm(&path)?
        } else {
            RgbImage::read_ppm(&path)?
        };
        Ok(AnnotatedImage {
            image,
            instances: record
                .instances
                .iter()
                .map(|i| Instance {
                    bbox: BoundingBox::new(i.bbox[0], i.bbox[1], i.bbox[2], i.bbox[3]),
                    class: i.class,
                })
                .collect(),
            source_id: record.id().to_string(),
            modality: record.modality,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            classes: 3,
            images_per_class: 2,
            test_images_per_class: 1,
            image_size: 64,
            distracters: 2,
            sketch_pairs: 2,
            seed,
        }
    }

    fn hash_dir(dir: &Path) -> Vec<(String, u64)> {
        let mut entries = Vec::new();
        for entry in walk(dir) {
            let bytes = fs::read(&entry).unwrap();
            let mut h: u64 = 0xcbf29ce484222325;
            for b in bytes {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
            entries.push((entry.strip_prefix(dir).unwrap().display().to_string(), h));
        }
        entries.sort();
        entries
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                out.extend(walk(&path));
            } else {
                out.push(path);
            }
        }
        out
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_spec(7), d1.path()).unwrap();
        generate_dataset(&tiny_spec(7), d2.path()).unwrap();
        assert_eq!(hash_dir(d1.path()), hash_dir(d2.path()));

        let d3 = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_spec(8), d3.path()).unwrap();
        assert_ne!(hash_dir(d1.path()), hash_dir(d3.path()));
    }

    #[test]
    fn counts_and_class_balance() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(3);
        generate_dataset(&spec, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.split(Split::Train).count(), 6);
        assert_eq!(ds.split(Split::Test).count(), 3);
        assert_eq!(ds.split(Split::Distracter).count(), 2);
        assert_eq!(ds.split(Split::PairPhoto).count(), 2);
        assert_eq!(ds.split(Split::PairSketch).count(), 2);
        for c in 0..3 {
            let n = ds
                .split(Split::Train)
                .filter(|r| r.instances.iter().all(|i| i.class == c))
                .count();
            assert_eq!(n, 2, "class {c} should have exactly 2 train images");
        }
    }

    #[test]
    fn boxes_inside_bounds_and_instances_labeled() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(11);
        generate_dataset(&spec, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        for rec in &ds.records {
            for inst in &rec.instances {
                let [u, v, w, h] = inst.bbox;
                assert!(u >= 0.0 && v >= 0.0);
                assert!(u + w <= spec.image_size as f64);
                assert!(v + h <= spec.image_size as f64);
                assert!((1.0..=spec.image_size as f64).contains(&w));
                match rec.split {
                    Split::Distracter => assert_eq!(inst.class, -1),
                    Split::Train | Split::Test => assert!((0..spec.classes as i32).contains(&inst.class)),
                    _ => assert!(inst.class >= spec.classes as i32),
                }
            }
            assert!(!rec.instances.is_empty());
        }
    }

    #[test]
    fn recorded_box_covers_glyph_pixels() {
        // The rendered glyph must sit inside its recorded box: composite a
        // photo, subtract the background, and check inked pixels.
        let glyph = Glyph::from_seed(glyph_seed(0));
        let (img, instances) = compose_photo(1234, 64, &glyph, 0, 2, "t").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let bg = render_background(&mut rng, 64);
        let mut total = 0usize;
        let mut inside = 0usize;
        for y in 0..64 {
            for x in 0..64 {
                let a = img.get(x, y);
                let b = bg.get(x, y);
                let diff =
                    (a[0] as i32 - b[0] as i32).abs() + (a[1] as i32 - b[1] as i32).abs() + (a[2] as i32 - b[2] as i32).abs();
                if diff > 30 {
                    total += 1;
                    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                    if instances.iter().any(|i| {
                        cx >= i.bbox.u && cx <= i.bbox.right() && cy >= i.bbox.v && cy <= i.bbox.bottom()
                    }) {
                        inside += 1;
                    }
                }
            }
        }
        assert!(total > 50, "expected inked pixels, got {total}");
        assert!(inside as f64 / total as f64 >= 0.95);
    }

    #[test]
    fn sketch_is_deterministic_and_blank_for_empty() {
        let glyph = Glyph::from_seed(glyph_seed(1));
        let (img, instances) = compose_photo(99, 64, &glyph, 1, 1, "s").unwrap();
        let photo = AnnotatedImage { image: img, instances, source_id: "s".into(), modality: Modality::Photo };
        let a = render_sketch(&photo).unwrap();
        let b = render_sketch(&photo).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.modality, Modality::Sketch);
        assert_eq!(a.instances.len(), photo.instances.len());

        let blank = AnnotatedImage {
            image: RgbImage::filled(32, 32, [128, 128, 128]),
            instances: vec![],
            source_id: "blank".into(),
            modality: Modality::Photo,
        };
        let sk = render_sketch(&blank).unwrap();
        assert!(sk.image.data.iter().all(|&b| b == 255));
    }

    #[test]
    fn sketch_edges_overlap_photo_glyph_edges() {
        // Dilated edge masks of the jittered sketch and the clean glyph
        // must overlap by at least 60% IoU.
        for class in 0..5 {
            let glyph = Glyph::from_seed(glyph_seed(class));
            let side = 48usize;
            let clean = glyph.render_mask(side);
            let (img, instances) = compose_photo(500 + class as u64, 64, &glyph, class, 1, "e").unwrap();
            let photo =
                AnnotatedImage { image: img, instances, source_id: format!("e{class}"), modality: Modality::Photo };
            let sketch = render_sketch(&photo).unwrap();
            let inst = &photo.instances[0];
            let s = inst.bbox.w as usize;

            let edge_of_mask = |mask: &[f64], n: usize| -> Vec<bool> {
                let mut e = vec![false; n * n];
                for y in 0..n {
                    for x in 0..n {
                        let sample = |xx: i64, yy: i64| -> f64 {
                            mask[(yy.clamp(0, n as i64 - 1) as usize) * n + xx.clamp(0, n as i64 - 1) as usize]
                        };
                        let gx = sample(x as i64 + 1, y as i64) - sample(x as i64 - 1, y as i64);
                        let gy = sample(x as i64, y as i64 + 1) - sample(x as i64, y as i64 - 1);
                        e[y * n + x] = (gx * gx + gy * gy).sqrt() > 0.3;
                    }
                }
                e
            };
            let dilate = |m: &[bool], n: usize, r: i64| -> Vec<bool> {
                let mut out = vec![false; n * n];
                for y in 0..n as i64 {
                    for x in 0..n as i64 {
                        'search: for dy in -r..=r {
                            for dx in -r..=r {
                                let (sx, sy) = (x + dx, y + dy);
                                if sx >= 0 && sy >= 0 && sx < n as i64 && sy < n as i64 && m[(sy * n as i64 + sx) as usize] {
                                    out[(y * n as i64 + x) as usize] = true;
                                    break 'search;
                                }
                            }
                        }
                    }
                }
                out
            };

            // Photo-side edges come from the clean glyph rendered at the
            // instance size; sketch-side edges from the sketch raster.
            let clean_scaled = if s == side {
                clean.clone()
            } else {
                glyph.render_mask(s)
            };
            let photo_edges = dilate(&edge_of_mask(&clean_scaled, s), s, 2);
            let mut sketch_edges = vec![false; s * s];
            for y in 0..s {
                for x in 0..s {
                    let px = sketch.image.get(inst.bbox.u as usize + x, inst.bbox.v as usize + y);
                    sketch_edges[y * s + x] = px[0] < 160;
                }
            }
            let sketch_edges = dilate(&sketch_edges, s, 2);
            let mut inter = 0usize;
            let mut union = 0usize;
            for i in 0..s * s {
                if photo_edges[i] && sketch_edges[i] {
                    inter += 1;
                }
                if photo_edges[i] || sketch_edges[i] {
                    union += 1;
                }
            }
            let iou = inter as f64 / union.max(1) as f64;
            assert!(iou >= 0.60, "class {class}: edge-mask IoU {iou:.3}");
        }
    }

    #[test]
    fn scale_shorter_edge_cases() {
        let img = AnnotatedImage {
            image: RgbImage::filled(1200, 900, [10, 20, 30]),
            instances: vec![Instance { bbox: BoundingBox::new(100.0, 90.0, 300.0, 180.0), class: 0 }],
            source_id: "scale".into(),
            modality: Modality::Photo,
        };
        let scaled = scale_shorter_edge(&img, 600).unwrap();
        assert_eq!((scaled.image.width, scaled.image.height), (800, 600));
        let b = scaled.instances[0].bbox;
        assert!((b.u - 100.0 * 2.0 / 3.0).abs() < 1e-9);
        assert!((b.w - 200.0).abs() < 1e-9);

        // Already at target: exact identity.
        let same = scale_shorter_edge(&scaled, 600).unwrap();
        assert_eq!(same.image, scaled.image);
        assert_eq!(same.instances[0].bbox, scaled.instances[0].bbox);
    }

    #[test]
    fn placement_failure_names_the_image() {
        // 30 instances of >= 8 px cannot fit a 48 px image by area alone.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = place_boxes(&mut rng, 48, 30, "img_X").unwrap_err();
        assert!(err.to_string().contains("img_X"), "{err}");
    }

    #[test]
    fn annotation_record_ids() {
        let rec = DatasetRecord {
            image: "images/train_c000_i01.ppm".into(),
            modality: Modality::Photo,
            split: Split::Train,
            instances: vec![],
        };
        assert_eq!(rec.id(), "train_c000_i01");
    }
}
