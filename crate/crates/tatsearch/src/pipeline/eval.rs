//! Gallery/query code extraction, retrieval evaluation and the detection
//! curve, shared by the eval stage, the ablation harness and the
//! acceptance suite.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::crl::{binarize, BinaryCode, CodeDumpEntry};
use crate::detector::{BoundingBox, Detection};
use crate::error::{Error, Result};
use crate::index::{GalleryEntry, GalleryIndex};
use crate::metrics::{cmc, det_curve, mean_ap, DetCurve, RankedRetrieval};
use crate::model::SearchModel;
use crate::synthgen::{scale_shorter_edge, Dataset, DatasetRecord, Split};

/// Binarized codes extracted from one image.
#[derive(Clone, Debug)]
pub struct ImageCodes {
    pub id: String,
    pub detections: Vec<(BoundingBox, BinaryCode)>,
    /// True when detection came up empty and the whole image was used.
    pub fallback: bool,
}

impl ImageCodes {
    pub fn codes(&self) -> Vec<BinaryCode> {
        self.detections.iter().map(|(_, c)| c.clone()).collect()
    }

    pub fn to_dump_entry(&self) -> CodeDumpEntry {
        CodeDumpEntry { image_id: self.id.clone(), detections: self.detections.clone() }
    }
}

/// Detects, embeds and binarizes one image. When nothing clears the
/// confidence threshold and `fallback` is set, a single full-image box
/// stands in so the image still yields a code.
pub fn extract_codes(
    model: &SearchModel,
    dataset: &Dataset,
    record: &DatasetRecord,
    confidence: f64,
    image_size: usize,
    fallback: bool,
) -> Result<ImageCodes> {
    let img = dataset.load_image(record)?;
    let img = scale_shorter_edge(&img, image_size)?;
    let mut detections = model.detect(&img.image, confidence)?;
    let mut used_fallback = false;
    if detections.is_empty() && fallback {
        detections = vec![Detection {
            bbox: BoundingBox::new(0.0, 0.0, img.image.width as f64, img.image.height as f64),
            score: 0.0,
        }];
        used_fallback = true;
    }
    let codes = model.embed(&img.image, &detections)?;
    Ok(ImageCodes {
        id: record.id().to_string(),
        detections: detections
            .iter()
            .zip(codes.iter())
            .map(|(d, c)| (d.bbox, binarize(c)))
            .collect(),
        fallback: used_fallback,
    })
}

pub fn extract_many(
    model: &SearchModel,
    dataset: &Dataset,
    records: &[&DatasetRecord],
    confidence: f64,
    image_size: usize,
    fallback: bool,
) -> Result<Vec<ImageCodes>> {
    records
        .iter()
        .map(|r| extract_codes(model, dataset, r, confidence, image_size, fallback))
        .collect()
}

pub fn gallery_index_from_codes(codes: &[ImageCodes]) -> Result<GalleryIndex> {
    GalleryIndex::build(
        codes
            .iter()
            .map(|c| GalleryEntry { image_id: c.id.clone(), detections: c.detections.clone() })
            .collect(),
    )
}

/// The retrieval protocol: the first image of each labeled class is the
/// query, the rest of that class plus every distracter form the gallery.
pub struct RetrievalSplit<'a> {
    pub queries: Vec<&'a DatasetRecord>,
    pub gallery: Vec<&'a DatasetRecord>,
    pub distracters: Vec<&'a DatasetRecord>,
}

pub fn retrieval_split(dataset: &Dataset) -> RetrievalSplit<'_> {
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    let mut seen_class: HashSet<i32> = HashSet::new();
    for rec in dataset.split(Split::Train) {
        let class = rec.instances.first().map(|i| i.class).unwrap_or(-1);
        if seen_class.insert(class) {
            queries.push(rec);
        } else {
            gallery.push(rec);
        }
    }
    RetrievalSplit { queries, gallery, distracters: dataset.split(Split::Distracter).collect() }
}

/// One query's saved search outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchRecord {
    pub query: String,
    pub fallback: bool,
    pub results: Vec<(String, u32)>,
}

pub fn run_queries(
    model: &SearchModel,
    dataset: &Dataset,
    queries: &[&DatasetRecord],
    index: &GalleryIndex,
    cfg: &RunConfig,
    k: usize,
) -> Result<Vec<SearchRecord>> {
    let mut out = Vec::with_capacity(queries.len());
    for rec in queries {
        let codes = extract_codes(model, dataset, rec, cfg.index_confidence, cfg.image_size, true)?;
        let result = index.search(&codes.codes(), k)?;
        out.push(SearchRecord {
            query: codes.id.clone(),
            fallback: codes.fallback,
            results: result.ranked,
        });
    }
    Ok(out)
}

/// Class of a labeled image record (all instances share it).
fn record_class(rec: &DatasetRecord) -> Option<i32> {
    rec.instances.first().map(|i| i.class).filter(|&c| c >= 0)
}

/// Builds RankedRetrievals from search records, optionally dropping
/// distracter ids from the rankings and/or truncating to `top_k`.
pub fn to_ranked_retrievals(
    records: &[SearchRecord],
    class_of: &HashMap<String, i32>,
    mates_of: &HashMap<i32, HashSet<String>>,
    drop_distracters: bool,
    top_k: Option<usize>,
) -> Result<Vec<RankedRetrieval>> {
    let mut out = Vec::with_capacity(records.len());
    for sr in records {
        let class = *class_of
            .get(&sr.query)
            .ok_or_else(|| Error::Input(format!("query '{}' not in annotations", sr.query)))?;
        let mates = mates_of.get(&class).cloned().unwrap_or_default();
        let mut ranking: Vec<String> = sr
            .results
            .iter()
            .map(|(id, _)| id.clone())
            .filter(|id| !drop_distracters || class_of.contains_key(id))
            .collect();
        if let Some(k) = top_k {
            ranking.truncate(k);
        }
        out.push(RankedRetrieval::new(&sr.query, ranking, mates)?);
    }
    Ok(out)
}

/// id -> class for every labeled image, and class -> gallery mate ids.
pub fn class_maps(
    dataset: &Dataset,
    gallery: &[&DatasetRecord],
) -> (HashMap<String, i32>, HashMap<i32, HashSet<String>>) {
    let mut class_of = HashMap::new();
    for rec in &dataset.records {
        if let Some(c) = record_class(rec) {
            class_of.insert(rec.id().to_string(), c);
        }
    }
    let mut mates_of: HashMap<i32, HashSet<String>> = HashMap::new();
    for rec in gallery {
        if let Some(c) = record_class(rec) {
            mates_of.entry(c).or_default().insert(rec.id().to_string());
        }
    }
    (class_of, mates_of)
}

/// Detection curve over a dataset split at the evaluation threshold.
pub fn split_det_curve(
    model: &SearchModel,
    dataset: &Dataset,
    split: Split,
    cfg: &RunConfig,
) -> Result<DetCurve> {
    let records: Vec<_> = dataset.split(split).collect();
    if records.is_empty() {
        return Err(Error::MissingArtifact(format!("dataset has no {split:?} images")));
    }
    let mut dets = Vec::with_capacity(records.len());
    let mut gts = Vec::with_capacity(records.len());
    for rec in &records {
        let img = dataset.load_image(rec)?;
        let img = scale_shorter_edge(&img, cfg.image_size)?;
        dets.push(model.detect(&img.image, cfg.det_confidence)?);
        gts.push(img.instances.iter().map(|i| i.bbox).collect());
    }
    det_curve(&dets, &gts, cfg.iou)
}

/// The flat key=value evaluation report.
#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub entries: Vec<(String, String)>,
}

impl EvalReport {
    pub fn push(&mut self, key: &str, value: String) {
        self.entries.push((key.to_string(), value));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }
}

/// Retrieval metrics computed from saved search records: full-ranking mAP
/// and CMC with distracters, top-k truncated mAP, and mAP with distracters
/// removed from the rankings.
pub struct RetrievalMetrics {
    pub map_full: f64,
    pub map_top_k: f64,
    pub map_no_distracters: f64,
    pub cmc: crate::metrics::CmcCurve,
}

pub fn retrieval_metrics(
    records: &[SearchRecord],
    dataset: &Dataset,
    gallery: &[&DatasetRecord],
    cfg: &RunConfig,
) -> Result<RetrievalMetrics> {
    let (class_of, mates_of) = class_maps(dataset, gallery);
    let full = to_ranked_retrievals(records, &class_of, &mates_of, false, None)?;
    let truncated = to_ranked_retrievals(records, &class_of, &mates_of, false, Some(cfg.top_k))?;
    let no_distracters = to_ranked_retrievals(records, &class_of, &mates_of, true, None)?;
    Ok(RetrievalMetrics {
        map_full: mean_ap(&full)?,
        map_top_k: mean_ap(&truncated)?,
        map_no_distracters: mean_ap(&no_distracters)?,
        cmc: cmc(&full, cfg.max_rank)?,
    })
}

/// mAP of queries against a gallery without distracters, used by the
/// ablation harness (full ranking, no truncation).
pub fn quick_map(model: &SearchModel, dataset: &Dataset, cfg: &RunConfig) -> Result<f64> {
    let split = retrieval_split(dataset);
    let gallery_codes = extract_many(
        model,
        dataset,
        &split.gallery,
        cfg.index_confidence,
        cfg.image_size,
        false,
    )?;
    let index = gallery_index_from_codes(&gallery_codes)?;
    let records = run_queries(model, dataset, &split.queries, &index, cfg, index.len())?;
    let (class_of, mates_of) = class_maps(dataset, &split.gallery);
    let ranked = to_ranked_retrievals(&records, &class_of, &mates_of, false, None)?;
    mean_ap(&ranked)
}

/// Sketch-query rank-1 over held-out pairs: each held-out sketch queries a
/// gallery of all held-out pair photos; the mate is its own pair photo.
pub fn sketch_rank1(
    model: &SearchModel,
    dataset: &Dataset,
    cfg: &RunConfig,
    holdout_start: usize,
) -> Result<f64> {
    let photos: Vec<_> = dataset.split(Split::PairPhoto).skip(holdout_start).collect();
    let sketches: Vec<_> = dataset.split(Split::PairSketch).skip(holdout_start).collect();
    if photos.is_empty() || photos.len() != sketches.len() {
        return Err(Error::Input(format!(
            "held-out sketch set is inconsistent: {} photos, {} sketches",
            photos.len(),
            sketches.len()
        )));
    }
    let gallery_codes =
        extract_many(model, dataset, &photos, cfg.index_confidence, cfg.image_size, true)?;
    let index = gallery_index_from_codes(&gallery_codes)?;
    let mut hits = 0usize;
    for (sketch, photo) in sketches.iter().zip(&photos) {
        let codes = extract_codes(model, dataset, sketch, cfg.index_confidence, cfg.image_size, true)?;
        let result = index.search(&codes.codes(), 1)?;
        if result.ranked.first().map(|(id, _)| id.as_str()) == Some(photo.id()) {
            hits += 1;
        }
    }
    Ok(hits as f64 / sketches.len() as f64)
}
