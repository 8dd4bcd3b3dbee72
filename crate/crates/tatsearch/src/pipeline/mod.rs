//! Pipeline stages: dataset generation, training, detection, index build,
//! search, evaluation, the gradient-check audit and the loss ablation.
//! Each stage reads its prerequisites from disk and writes its artifacts
//! under the output directory.

pub mod eval;
pub mod gradcheck;
pub mod train;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::crl::write_code_dump;
use crate::error::{Error, Result};
use crate::index::GalleryIndex;
use crate::metrics::recall_at_fppi;
use crate::model::SearchModel;
use crate::synthgen::{generate_dataset, scale_shorter_edge, Dataset, RgbImage, Split};
use crate::tensor::{load_params, save_params};
use crate::util::format_sig6;

pub use eval::{EvalReport, SearchRecord};
pub use gradcheck::{run_gradcheck, GradCheckReport};
pub use train::{train_main, train_sketch_finetune, TrainOutcome};

pub const MODEL_FILE: &str = "model.tat";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const DETECTIONS_FILE: &str = "detections.txt";
pub const INDEX_FILE: &str = "gallery.tidx";
pub const GALLERY_CODES_FILE: &str = "gallery_codes.txt";
pub const SEARCH_RESULTS_FILE: &str = "search_results.jsonl";
pub const QUERY_CODES_FILE: &str = "query_codes.txt";
pub const REPORT_FILE: &str = "eval_report.txt";

fn dataset_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(&cfg.dataset_dir)
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{} not found: run the {produced_by} stage first",
            path.display()
        )));
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, out_dir: &Path) -> Result<SearchModel> {
    let path = out_dir.join(MODEL_FILE);
    require(&path, "train")?;
    SearchModel::from_params(cfg.model_config(cfg.classes), load_params(&path)?)
}

pub fn stage_gen(cfg: &RunConfig) -> Result<String> {
    let dir = dataset_dir(cfg);
    fs::create_dir_all(&dir)?;
    let records = generate_dataset(&cfg.dataset_spec(), &dir)?;
    Ok(format!(
        "generated {} images ({} train, {} test, {} distracter, {} sketch pairs) under {}",
        records.len(),
        records.iter().filter(|r| r.split == Split::Train).count(),
        records.iter().filter(|r| r.split == Split::Test).count(),
        records.iter().filter(|r| r.split == Split::Distracter).count(),
        cfg.sketch_pairs,
        dir.display()
    ))
}

pub fn stage_train(cfg: &RunConfig, out_dir: &Path) -> Result<String> {
    let dataset = Dataset::load(&dataset_dir(cfg))?;
    fs::create_dir_all(out_dir)?;
    let outcome = train_main(cfg, &dataset, cfg.train_seed, cfg.epochs, cfg.loss_weights())?;
    save_params(&outcome.model.params, &out_dir.join(MODEL_FILE))?;
    let mut log = String::from(train::StepLog::header());
    log.push('\n');
    for entry in &outcome.log {
        log.push_str(&entry.to_csv());
        log.push('\n');
    }
    fs::write(out_dir.join(TRAIN_LOG_FILE), log)?;
    let last = outcome.log.last();
    Ok(format!(
        "trained {} steps over {} epochs; final joint loss {}; model at {}",
        outcome.log.len(),
        cfg.epochs,
        last.map_or("n/a".into(), |l| format_sig6(l.joint)),
        out_dir.join(MODEL_FILE).display()
    ))
}

/// One line per image: path, then `score u v w h` per detection at the
/// configured confidence threshold.
pub fn stage_detect(cfg: &RunConfig, out_dir: &Path) -> Result<String> {
    let dataset = Dataset::load(&dataset_dir(cfg))?;
    let model = load_model(cfg, out_dir)?;
    let mut records: Vec<_> = dataset.split(Split::Test).collect();
    if records.is_empty() {
        records = dataset.split(Split::Train).collect();
    }
    let mut out = String::new();
    for rec in records {
        let img = dataset.load_image(rec)?;
        let img = scale_shorter_edge(&img, cfg.image_size)?;
        let dets = model.detect(&img.image, cfg.confidence)?;
        let _ = write!(out, "{}", rec.image);
        for d in dets {
            let _ = write!(
                out,
                " {} {} {} {} {}",
                format_sig6(d.score),
                format_sig6(d.bbox.u),
                format_sig6(d.bbox.v),
                format_sig6(d.bbox.w),
                format_sig6(d.bbox.h)
            );
        }
        out.push('\n');
    }
    fs::write(out_dir.join(DETECTIONS_FILE), &out)?;
    Ok(out.trim_end().to_string())
}

pub fn stage_index(cfg: &RunConfig, out_dir: &Path) -> Result<String> {
    let dataset = Dataset::load(&dataset_dir(cfg))?;
    let model = load_model(cfg, out_dir)?;
    let split = eval::retrieval_split(&dataset);
    let mut records = split.gallery.clone();
    records.extend(split.distracters.iter().copied());
    let codes = eval::extract_many(
        &model,
        &dataset,
        &records,
        cfg.index_confidence,
        cfg.image_size,
        false,
    )?;
    let empty = codes.iter().filter(|c| c.detections.is_empty()).count();
    let index = eval::gallery_index_from_codes(&codes)?;
    index.save(&out_dir.join(INDEX_FILE))?;
    let dump: Vec<_> = codes.iter().map(|c| c.to_dump_entry()).collect();
    fs::write(out_dir.join(GALLERY_CODES_FILE), write_code_dump(&dump))?;
    Ok(format!(
        "indexed {} images ({} codes, {} without detections) into {}",
        index.len(),
        index.total_codes(),
        empty,
        out_dir.join(INDEX_FILE).display()
    ))
}

pub fn stage_search(cfg: &RunConfig, out_dir: &Path) -> Result<String> {
    let dataset = Dataset::load(&dataset_dir(cfg))?;
    let model = load_model(cfg, out_dir)?;
    let index_path = out_dir.join(INDEX_FILE);
    require(&index_path, "index")?;
    let index = GalleryIndex::load(&index_path)?;
    let split = eval::retrieval_split(&dataset);
    // Full rankings so eval can report both truncated and full metrics.
    let records = eval::run_queries(&model, &dataset, &split.queries, &index, cfg, index.len())?;

    let mut jsonl = String::new();
    for r in &records {
        jsonl.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        jsonl.push('\n');
    }
    fs::write(out_dir.join(SEARCH_RESULTS_FILE), jsonl)?;

    let mut dump = Vec::new();
    for rec in &split.queries {
        let codes =
            eval::extract_codes(&model, &dataset, rec, cfg.index_confidence, cfg.image_size, true)?;
        dump.push(codes.to_dump_entry());
    }
    fs::write(out_dir.join(QUERY_CODES_FILE), write_code_dump(&dump))?;

    let fallbacks = records.iter().filter(|r| r.fallback).count();
    Ok(format!(
        "searched {} queries against {} gallery images ({} query fallbacks)",
        records.len(),
        index.len(),
        fallbacks
    ))
}

/// Single ad-hoc image against the saved index: prints `rank id distance`.
pub fn stage_query(cfg: &RunConfig, out_dir: &Path, image_path: &Path) -> Result<String> {
    let model = load_model(cfg, out_dir)?;
    let index_path = out_dir.join(INDEX_FILE);
    require(&index_path, "index")?;
    let index = GalleryIndex::load(&index_path)?;
    let image = if image_path.extension().is_some_and(|e| e == "pgm") {
        RgbImage::read_pgm(image_path)?
    } else {
        RgbImage::read_ppm(image_path)?
    };
    let img = crate::synthgen::AnnotatedImage {
        image,
        instances: vec![],
        source_id: image_path.display().to_string(),
        modality: crate::synthgen::Modality::Photo,
    };
    let img = scale_shorter_edge(&img, cfg.image_size)?;
    let mut dets = model.detect(&img.image, cfg.index_confidence)?;
    if dets.is_empty() {
        dets = vec![crate::detector::Detection {
            bbox: crate::detector::BoundingBox::new(
                0.0,
                0.0,
                img.image.width as f64,
                img.image.height as f64,
            ),
            score: 0.0,
        }];
    }
    let codes: Vec<_> = model.embed(&img.image, &dets)?.iter().map(crate::crl::binarize).collect();
    let result = index.search(&codes, cfg.top_k)?;
    let mut out = String::new();
    for (rank, (id, dist)) in result.ranked.iter().enumerate() {
        let _ = writeln!(out, "{} {} {}", rank + 1, id, dist);
    }
    Ok(out.trim_end().to_string())
}

pub fn stage_eval(cfg: &RunConfig, out_dir: &Path) -> Result<String> {
    let dataset = Dataset::load(&dataset_dir(cfg))?;
    let model = load_model(cfg, out_dir)?;
    let results_path = out_dir.join(SEARCH_RESULTS_FILE);
    require(&results_path, "search")?;
    let mut records = Vec::new();
    for line in fs::read_to_string(&results_path)?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str::<SearchRecord>(line)
                .map_err(|e| Error::Parse(format!("{}: {e}", results_path.display())))?,
        );
    }

    let mut report = EvalReport::default();
    let curve = eval::split_det_curve(&model, &dataset, Split::Test, cfg)?;
    for &target in &cfg.fppi_targets {
        report.push(&format!("recall@{target}fppi"), format_sig6(recall_at_fppi(&curve, target)));
    }

    let split = eval::retrieval_split(&dataset);
    let metrics = eval::retrieval_metrics(&records, &dataset, &split.gallery, cfg)?;
    report.push("map", format_sig6(metrics.map_full));
    if cfg.truncate {
        report.push(&format!("map_top{}", cfg.top_k), format_sig6(metrics.map_top_k));
    }
    report.push("map_no_distracters", format_sig6(metrics.map_no_distracters));
    for rank in [1usize, 5, 10, 20] {
        if rank <= cfg.max_rank {
            report.push(&format!("cmc@{rank}"), format_sig6(metrics.cmc.at_rank(rank)));
        }
    }
    report.push("queries", records.len().to_string());
    report.push("gallery", split.gallery.len().to_string());
    report.push("distracters", split.distracters.len().to_string());
    report.push(
        "query_fallbacks",
        records.iter().filter(|r| r.fallback).count().to_string(),
    );

    if cfg.dump_curves {
        let mut det_csv = String::from("fppi,recall\n");
        for (fppi, recall) in &curve.points {
            let _ = writeln!(det_csv, "{fppi},{recall}");
        }
        fs::write(out_dir.join("det_curve.csv"), det_csv)?;
        let mut cmc_csv = String::from("rank,accuracy\n");
        for (i, acc) in metrics.cmc.accuracy.iter().enumerate() {
            let _ = writeln!(cmc_csv, "{},{acc}", i + 1);
        }
        fs::write(out_dir.join("cmc.csv"), cmc_csv)?;
    }

    let text = report.to_text();
    fs::write(out_dir.join(REPORT_FILE), &text)?;
    Ok(text.trim_end().to_string())
}

pub fn stage_gradcheck(cfg: &RunConfig) -> Result<String> {
    let reports = run_gradcheck(100, cfg.train_seed)?;
    let mut out = String::new();
    let mut worst: f64 = 0.0;
    for r in &reports {
        let _ = writeln!(out, "gradcheck.{} max_rel_err={:.3e} draws={}", r.name, r.max_rel_err, r.draws);
        worst = worst.max(r.max_rel_err);
    }
    if worst > 1e-3 {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {worst:.3e} > 1e-3\n{out}"
        )));
    }
    Ok(out.trim_end().to_string())
}

/// Trains with the loss subsets {cls}, {cls, dis}, {cls, dis, pol} over
/// the ablation seeds and reports the median mAP per subset (gallery
/// without distracters).
pub fn stage_ablate(cfg: &RunConfig, _out_dir: &Path) -> Result<String> {
    let dataset = Dataset::load(&dataset_dir(cfg))?;
    let subsets: [(&str, crate::losses::LossWeights); 3] = [
        ("cls", crate::losses::LossWeights { alpha: cfg.alpha, beta: 0.0, gamma: 0.0 }),
        ("cls_dis", crate::losses::LossWeights { alpha: cfg.alpha, beta: 0.0, gamma: cfg.gamma }),
        ("cls_dis_pol", cfg.loss_weights()),
    ];
    let epochs = cfg.ablate_epochs();
    let mut out = String::new();
    for (name, weights) in subsets {
        let mut maps = Vec::new();
        for &seed in &cfg.ablate_seeds {
            let outcome = train_main(cfg, &dataset, seed, epochs, weights)?;
            maps.push(eval::quick_map(&outcome.model, &dataset, cfg)?);
        }
        let mut sorted = maps.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[sorted.len() / 2];
        let _ = writeln!(
            out,
            "ablate.{name} map_median={} maps={}",
            format_sig6(median),
            maps.iter().map(|m| format_sig6(*m)).collect::<Vec<_>>().join(",")
        );
    }
    Ok(out.trim_end().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_artifacts_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.dataset_dir = dir.path().join("nope").display().to_string();
        let err = stage_train(&cfg, dir.path()).unwrap_err();
        assert!(err.to_string().contains("gen"), "{err}");

        // With a dataset but no model, detect points at train.
        cfg.dataset_dir = dir.path().join("data").display().to_string();
        cfg.classes = 2;
        cfg.images_per_class = 2;
        cfg.test_images_per_class = 1;
        cfg.image_size = 32;
        cfg.distracters = 0;
        cfg.sketch_pairs = 0;
        stage_gen(&cfg).unwrap();
        let err = stage_detect(&cfg, dir.path()).unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
        let err = stage_search(&cfg, dir.path()).unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
    }
}
