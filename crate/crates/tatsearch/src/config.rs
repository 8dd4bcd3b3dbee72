//! Run configuration: a flat `section.key=value` text format, strict about
//! unknown keys and value ranges, diffable in experiment logs.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::synthgen::DatasetSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // dataset
    pub dataset_dir: String,
    pub classes: usize,
    pub images_per_class: usize,
    pub test_images_per_class: usize,
    pub image_size: usize,
    pub distracters: usize,
    pub sketch_pairs: usize,
    pub dataset_seed: u64,
    // model
    pub code_bits: usize,
    pub anchor_scales: Vec<f64>,
    pub backbone_channels: [usize; 3],
    pub det_hidden: usize,
    pub fc1: usize,
    pub fc2: usize,
    // loss
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    // train
    pub learning_rate: f64,
    pub finetune_learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub train_seed: u64,
    pub stitch_rows: usize,
    pub stitch_cols: usize,
    pub min_instance_batch: usize,
    pub buffer_momentum: f64,
    pub augment_prob: f64,
    pub code_grad_clip: f64,
    pub pol_grad_clip: f64,
    pub pol_start: f64,
    pub head_lr_mult: f64,
    pub sketch_epochs: usize,
    pub sketch_train_pairs: usize,
    // thresholds
    pub confidence: f64,
    pub iou: f64,
    pub index_confidence: f64,
    // eval
    pub top_k: usize,
    pub fppi_targets: Vec<f64>,
    pub truncate: bool,
    pub det_confidence: f64,
    pub max_rank: usize,
    pub dump_curves: bool,
    // ablate
    pub ablate_seeds: Vec<u64>,
    pub ablate_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_dir: "data".into(),
            classes: 50,
            images_per_class: 10,
            test_images_per_class: 2,
            image_size: 128,
            distracters: 5000,
            sketch_pairs: 250,
            dataset_seed: 7,
            code_bits: 64,
            anchor_scales: vec![16.0, 32.0, 64.0],
            backbone_channels: [8, 16, 32],
            det_hidden: 48,
            fc1: 256,
            fc2: 128,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            epsilon: 0.01,
            learning_rate: 1e-3,
            finetune_learning_rate: 1e-4,
            momentum: 0.9,
            epochs: 10,
            train_seed: 42,
            stitch_rows: 2,
            stitch_cols: 2,
            min_instance_batch: 8,
            buffer_momentum: 0.5,
            augment_prob: 0.5,
            code_grad_clip: 5.0,
            pol_grad_clip: 0.05,
            pol_start: 0.7,
            head_lr_mult: 1.0,
            sketch_epochs: 8,
            sketch_train_pairs: 200,
            confidence: 0.8,
            iou: 0.5,
            index_confidence: 0.5,
            top_k: 100,
            fppi_targets: vec![0.01, 0.1, 1.0],
            truncate: true,
            det_confidence: 0.05,
            max_rank: 20,
            dump_curves: false,
            ablate_seeds: vec![1, 2, 3],
            ablate_epochs: 0,
        }
    }
}

fn fmt_f64_list(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn fmt_u64_list(values: &[u64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("dataset.dir", self.dataset_dir.clone());
        kv("dataset.classes", self.classes.to_string());
        kv("dataset.images_per_class", self.images_per_class.to_string());
        kv("dataset.test_images_per_class", self.test_images_per_class.to_string());
        kv("dataset.image_size", self.image_size.to_string());
        kv("dataset.distracters", self.distracters.to_string());
        kv("dataset.sketch_pairs", self.sketch_pairs.to_string());
        kv("dataset.seed", self.dataset_seed.to_string());
        kv("model.code_bits", self.code_bits.to_string());
        kv("model.anchor_scales", fmt_f64_list(&self.anchor_scales));
        kv(
            "model.backbone_channels",
            format!("{},{},{}", self.backbone_channels[0], self.backbone_channels[1], self.backbone_channels[2]),
        );
        kv("model.det_hidden", self.det_hidden.to_string());
        kv("model.fc1", self.fc1.to_string());
        kv("model.fc2", self.fc2.to_string());
        kv("loss.alpha", self.alpha.to_string());
        kv("loss.beta", self.beta.to_string());
        kv("loss.gamma", self.gamma.to_string());
        kv("loss.epsilon", self.epsilon.to_string());
        kv("train.learning_rate", self.learning_rate.to_string());
        kv("train.finetune_learning_rate", self.finetune_learning_rate.to_string());
        kv("train.momentum", self.momentum.to_string());
        kv("train.epochs", self.epochs.to_string());
        kv("train.seed", self.train_seed.to_string());
        kv("train.stitch_rows", self.stitch_rows.to_string());
        kv("train.stitch_cols", self.stitch_cols.to_string());
        kv("train.min_instance_batch", self.min_instance_batch.to_string());
        kv("train.buffer_momentum", self.buffer_momentum.to_string());
        kv("train.augment_prob", self.augment_prob.to_string());
        kv("train.code_grad_clip", self.code_grad_clip.to_string());
        kv("train.pol_grad_clip", self.pol_grad_clip.to_string());
        kv("train.pol_start", self.pol_start.to_string());
        kv("train.head_lr_mult", self.head_lr_mult.to_string());
        kv("train.sketch_epochs", self.sketch_epochs.to_string());
        kv("train.sketch_train_pairs", self.sketch_train_pairs.to_string());
        kv("thresholds.confidence", self.confidence.to_string());
        kv("thresholds.iou", self.iou.to_string());
        kv("thresholds.index_confidence", self.index_confidence.to_string());
        kv("eval.top_k", self.top_k.to_string());
        kv("eval.fppi_targets", fmt_f64_list(&self.fppi_targets));
        kv("eval.truncate", self.truncate.to_string());
        kv("eval.det_confidence", self.det_confidence.to_string());
        kv("eval.max_rank", self.max_rank.to_string());
        kv("eval.dump_curves", self.dump_curves.to_string());
        kv("ablate.seeds", fmt_u64_list(&self.ablate_seeds));
        kv("ablate.epochs", self.ablate_epochs.to_string());
        s
    }

    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value, got '{line}'", ln + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse(format!("line {}: duplicate key '{key}'", ln + 1)));
            }
            cfg.set(key, value).map_err(|e| Error::Parse(format!("line {}: {e}", ln + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Parse(format!("bad value '{v}' for {key}")))
        }
        fn f64_list(key: &str, v: &str) -> Result<Vec<f64>> {
            v.split(',').map(|t| num::<f64>(key, t.trim())).collect()
        }
        match key {
            "dataset.dir" => self.dataset_dir = value.to_string(),
            "dataset.classes" => self.classes = num(key, value)?,
            "dataset.images_per_class" => self.images_per_class = num(key, value)?,
            "dataset.test_images_per_class" => self.test_images_per_class = num(key, value)?,
            "dataset.image_size" => self.image_size = num(key, value)?,
            "dataset.distracters" => self.distracters = num(key, value)?,
            "dataset.sketch_pairs" => self.sketch_pairs = num(key, value)?,
            "dataset.seed" => self.dataset_seed = num(key, value)?,
            "model.code_bits" => self.code_bits = num(key, value)?,
            "model.anchor_scales" => self.anchor_scales = f64_list(key, value)?,
            "model.backbone_channels" => {
                let parts: Vec<usize> =
                    value.split(',').map(|t| num::<usize>(key, t.trim())).collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::Parse(format!("{key} needs exactly 3 values")));
                }
                self.backbone_channels = [parts[0], parts[1], parts[2]];
            }
            "model.det_hidden" => self.det_hidden = num(key, value)?,
            "model.fc1" => self.fc1 = num(key, value)?,
            "model.fc2" => self.fc2 = num(key, value)?,
            "loss.alpha" => self.alpha = num(key, value)?,
            "loss.beta" => self.beta = num(key, value)?,
            "loss.gamma" => self.gamma = num(key, value)?,
            "loss.epsilon" => self.epsilon = num(key, value)?,
            "train.learning_rate" => self.learning_rate = num(key, value)?,
            "train.finetune_learning_rate" => self.finetune_learning_rate = num(key, value)?,
            "train.momentum" => self.momentum = num(key, value)?,
            "train.epochs" => self.epochs = num(key, value)?,
            "train.seed" => self.train_seed = num(key, value)?,
            "train.stitch_rows" => self.stitch_rows = num(key, value)?,
            "train.stitch_cols" => self.stitch_cols = num(key, value)?,
            "train.min_instance_batch" => self.min_instance_batch = num(key, value)?,
            "train.buffer_momentum" => self.buffer_momentum = num(key, value)?,
            "train.augment_prob" => self.augment_prob = num(key, value)?,
            "train.code_grad_clip" => self.code_grad_clip = num(key, value)?,
            "train.pol_grad_clip" => self.pol_grad_clip = num(key, value)?,
            "train.pol_start" => self.pol_start = num(key, value)?,
            "train.head_lr_mult" => self.head_lr_mult = num(key, value)?,
            "train.sketch_epochs" => self.sketch_epochs = num(key, value)?,
            "train.sketch_train_pairs" => self.sketch_train_pairs = num(key, value)?,
            "thresholds.confidence" => self.confidence = num(key, value)?,
            "thresholds.iou" => self.iou = num(key, value)?,
            "thresholds.index_confidence" => self.index_confidence = num(key, value)?,
            "eval.top_k" => self.top_k = num(key, value)?,
            "eval.fppi_targets" => self.fppi_targets = f64_list(key, value)?,
            "eval.truncate" => self.truncate = num(key, value)?,
            "eval.det_confidence" => self.det_confidence = num(key, value)?,
            "eval.max_rank" => self.max_rank = num(key, value)?,
            "eval.dump_curves" => self.dump_curves = num(key, value)?,
            "ablate.seeds" => {
                self.ablate_seeds =
                    value.split(',').map(|t| num::<u64>(key, t.trim())).collect::<Result<_>>()?
            }
            "ablate.epochs" => self.ablate_epochs = num(key, value)?,
            _ => return Err(Error::Parse(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.classes >= 2, "dataset.classes must be >= 2")?;
        check(self.images_per_class >= 2, "dataset.images_per_class must be >= 2")?;
        check(self.image_size >= 32 && self.image_size % 8 == 0, "dataset.image_size must be >= 32 and divisible by 8")?;
        check(self.code_bits >= 1 && self.code_bits <= 4096, "model.code_bits must be in 1..=4096")?;
        check(!self.anchor_scales.is_empty(), "model.anchor_scales must not be empty")?;
        check(self.anchor_scales.iter().all(|&s| s > 0.0), "anchor scales must be positive")?;
        check(self.alpha >= 0.0 && self.beta >= 0.0 && self.gamma >= 0.0, "loss weights must be non-negative")?;
        check(self.epsilon > 0.0, "loss.epsilon must be positive")?;
        check(self.learning_rate > 0.0 && self.finetune_learning_rate > 0.0, "learning rates must be positive")?;
        check((0.0..1.0).contains(&self.momentum), "train.momentum must be in [0, 1)")?;
        check(self.stitch_rows >= 1 && self.stitch_cols >= 1, "stitch grid must be at least 1x1")?;
        check(self.buffer_momentum > 0.0 && self.buffer_momentum < 1.0, "train.buffer_momentum must be in (0, 1)")?;
        check((0.0..=1.0).contains(&self.augment_prob), "train.augment_prob must be in [0, 1]")?;
        check(self.code_grad_clip > 0.0, "train.code_grad_clip must be positive")?;
        check(self.pol_grad_clip > 0.0, "train.pol_grad_clip must be positive")?;
        check((0.0..1.0).contains(&self.pol_start), "train.pol_start must be in [0, 1)")?;
        check(self.head_lr_mult > 0.0, "train.head_lr_mult must be positive")?;
        check((0.0..=1.0).contains(&self.confidence), "thresholds.confidence must be in [0, 1]")?;
        check(self.iou > 0.0 && self.iou < 1.0, "thresholds.iou must be in (0, 1)")?;
        check((0.0..=1.0).contains(&self.index_confidence), "thresholds.index_confidence must be in [0, 1]")?;
        check(self.top_k >= 1, "eval.top_k must be >= 1")?;
        check(self.fppi_targets.iter().all(|&t| t > 0.0), "eval.fppi_targets must be positive")?;
        check(self.max_rank >= 1, "eval.max_rank must be >= 1")?;
        check(!self.ablate_seeds.is_empty(), "ablate.seeds must not be empty")?;
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            classes: self.classes,
            images_per_class: self.images_per_class,
            test_images_per_class: self.test_images_per_class,
            image_size: self.image_size,
            distracters: self.distracters,
            sketch_pairs: self.sketch_pairs,
            seed: self.dataset_seed,
        }
    }

    /// Model layout for a classifier over `classes` outputs (the sketch
    /// fine-tune swaps in its own class count).
    pub fn model_config(&self, classes: usize) -> ModelConfig {
        ModelConfig {
            backbone_channels: self.backbone_channels,
            det_hidden: self.det_hidden,
            anchor_scales: self.anchor_scales.clone(),
            pool_size: (4, 4),
            fc_widths: (self.fc1, self.fc2),
            code_bits: self.code_bits,
            classes,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta: self.beta, gamma: self.gamma }
    }

    /// Epoch count for ablation runs; 0 means "same as train.epochs".
    pub fn ablate_epochs(&self) -> usize {
        if self.ablate_epochs == 0 {
            self.epochs
        } else {
            self.ablate_epochs
        }
    }
}
