//! The joint training loop: stitched canvases feed one forward pass whose
//! feature map serves both the detector losses and, through the confidence
//! gate, the compact-representation losses.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::crl::{FeatureBuffer, LatentCode};
use crate::detector::{
    bce_with_logit, decode_boxes, encode_targets, iou, nms, stitch_batch, AnchorLabel,
    BoundingBox, Detection,
};
use crate::error::{Error, Result};
use crate::losses::{
    dispersity_loss, joint_loss, polarization_loss, smooth_l1, softmax_cross_entropy, LossValue,
    LossWeights,
};
use crate::model::SearchModel;
use crate::synthgen::{augment, AnnotatedImage, Dataset, Split, TransformSpec, ALL_TRANSFORMS};
use crate::tensor::{ParamSet, Tensor};

const IOU_POS: f64 = 0.5;
const IOU_NEG: f64 = 0.3;
const NEG_PER_POS: usize = 3;
const MIN_NEG_SAMPLES: usize = 8;
const MAX_CRL_INSTANCES: usize = 32;
const REG_WEIGHT: f64 = 2.0;

/// SGD with classical momentum and optional per-parameter rate multipliers
/// (the representation head learns faster than the shared backbone).
pub struct Sgd {
    pub learning_rate: f64,
    momentum: f64,
    multipliers: Vec<f64>,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, multipliers: Vec<f64>) -> Sgd {
        Sgd { learning_rate, momentum, multipliers, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        for (i, (entry, vel)) in params.iter_mut().zip(&mut self.velocity).enumerate() {
            let rate = self.learning_rate * self.multipliers.get(i).copied().unwrap_or(1.0);
            for ((v, g), p) in vel
                .data_mut()
                .iter_mut()
                .zip(entry.grad.data())
                .zip(entry.value.data_mut())
            {
                *v = self.momentum * *v - rate * g;
                *p += *v;
            }
        }
    }
}

/// Per-step loss components, all already batch-averaged.
#[derive(Clone, Copy, Debug)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub obj: f64,
    pub reg: f64,
    pub cls: f64,
    pub pol: f64,
    pub dis: f64,
    pub joint: f64,
    pub pos_anchors: usize,
    pub crl_instances: usize,
}

impl StepLog {
    pub fn header() -> &'static str {
        "step,epoch,obj,reg,cls,pol,dis,joint,pos_anchors,crl_instances"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.step, self.epoch, self.obj, self.reg, self.cls, self.pol, self.dis, self.joint,
            self.pos_anchors, self.crl_instances
        )
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [
            (self.obj, "objectness"),
            (self.reg, "regression"),
            (self.cls, "classification"),
            (self.pol, "polarization"),
            (self.dis, "dispersity"),
            (self.joint, "joint"),
        ]
        .iter()
        .find(|(v, _)| !v.is_finite())
        .map(|&(_, name)| name)
    }
}

pub struct TrainOutcome {
    pub model: SearchModel,
    pub log: Vec<StepLog>,
}

struct Hyper {
    weights: LossWeights,
    epsilon: f64,
    confidence: f64,
    min_instance_batch: usize,
    code_grad_clip: f64,
    pol_grad_clip: f64,
    pol_start: f64,
    /// Fraction of training elapsed; gates the polarization pressure.
    progress: f64,
}

/// One optimization step on a stitched canvas. Gradients are accumulated
/// into the model's ParamSet; the caller applies the optimizer.
fn train_step(
    model: &mut SearchModel,
    canvas: &AnnotatedImage,
    hp: &Hyper,
    buffer: &mut FeatureBuffer,
    rng: &mut ChaCha8Rng,
    rotation: usize,
) -> Result<StepLog> {
    let x = SearchModel::image_to_input(&canvas.image);
    let fwd = model.forward_backbone(&x)?;
    let det_head = model.forward_det_head(&fwd.feature)?;
    let anchors = model.anchors_for(&fwd.feature)?;
    let gt_boxes: Vec<BoundingBox> = canvas.instances.iter().map(|i| i.bbox).collect();
    let targets = encode_targets(&anchors, &gt_boxes, IOU_POS, IOU_NEG)?;
    let (logits, offsets) = model.read_anchor_outputs(&det_head.map)?;

    // Objectness: all positives plus a sampled slice of negatives.
    let mut pos = Vec::new();
    let mut neg_pool = Vec::new();
    for (a, t) in targets.iter().enumerate() {
        match t.label {
            AnchorLabel::Positive { .. } => pos.push(a),
            AnchorLabel::Negative => neg_pool.push(a),
            AnchorLabel::Ignore => {}
        }
    }
    let want_neg = (NEG_PER_POS * pos.len()).max(MIN_NEG_SAMPLES).min(neg_pool.len());
    let negs: Vec<usize> = rand::seq::index::sample(rng, neg_pool.len(), want_neg)
        .into_iter()
        .map(|i| neg_pool[i])
        .collect();

    let n_obj = (pos.len() + negs.len()).max(1) as f64;
    let mut logit_grads = vec![0.0; anchors.len()];
    let mut obj_loss = 0.0;
    for (&a, target) in pos.iter().zip(std::iter::repeat(&1.0)).chain(negs.iter().zip(std::iter::repeat(&0.0))) {
        let (v, g) = bce_with_logit(logits[a], *target);
        obj_loss += v / n_obj;
        logit_grads[a] = g / n_obj;
    }
    let diverged = |component: &str| Error::Divergence { step: 0, component: component.into() };
    if !obj_loss.is_finite() {
        return Err(diverged("objectness"));
    }

    // Box regression on positive anchors, upweighted so localization gets
    // sharp enough for NMS to merge anchor clusters.
    let mut offset_grads = vec![[0.0f64; 4]; anchors.len()];
    let mut reg_loss = 0.0;
    if !pos.is_empty() {
        let n_pos = pos.len() as f64;
        for &a in &pos {
            if offsets[a].iter().any(|v| !v.is_finite()) {
                return Err(diverged("regression"));
            }
            let lv = smooth_l1(&offsets[a], &targets[a].offsets)?;
            reg_loss += lv.value / n_pos;
            for d in 0..4 {
                offset_grads[a][d] = REG_WEIGHT * lv.gradient[d] / n_pos;
            }
        }
    }

    // Confidence-gated detections feed the representation losses.
    let decoded = decode_boxes(&anchors, &offsets);
    let candidates: Vec<Detection> = logits
        .iter()
        .zip(&decoded)
        .filter_map(|(&logit, bbox)| {
            let score = crate::tensor::sigmoid_scalar(logit);
            (score >= hp.confidence).then_some(Detection { bbox: *bbox, score })
        })
        .collect();
    let mut survivors = nms(&candidates, 0.5);
    survivors.truncate(MAX_CRL_INSTANCES);

    // Keep survivors matching a labeled instance at IoU >= 0.5.
    let mut fed: Vec<(BoundingBox, usize)> = Vec::new();
    for det in &survivors {
        let mut best: Option<(usize, f64)> = None;
        for (gi, inst) in canvas.instances.iter().enumerate() {
            let v = iou(&det.bbox, &inst.bbox)?;
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, v)) = best {
            let class = canvas.instances[gi].class;
            if v >= IOU_POS && class >= 0 {
                fed.push((det.bbox, class as usize));
            }
        }
    }

    let mut cls_sum = 0.0;
    let mut pol_sum = 0.0;
    let mut dis_sum = 0.0;
    let n_real = fed.len();

    struct InstanceState {
        crl: crate::model::CrlForward,
        class: usize,
        ce: LossValue,
        pol: LossValue,
        dis: LossValue,
    }
    let mut states = Vec::with_capacity(n_real);
    for (bbox, class) in &fed {
        let crl = model.forward_crl(&fwd.feature, bbox)?;
        if !crl.code.is_finite() {
            return Err(diverged("latent code"));
        }
        let code = crl.code.data().to_vec();
        let ce = softmax_cross_entropy(&model.classify(&code)?, *class)?;
        let pol = polarization_loss(&code, hp.epsilon)?;
        let dis = dispersity_loss(&code)?;
        states.push(InstanceState { crl, class: *class, ce, pol, dis });
    }

    // Buffer centroids pad the classification batch when detections are
    // scarce; they are constant inputs, so only the classifier learns.
    let mut extras: Vec<(Vec<f64>, usize)> = Vec::new();
    if n_real < hp.min_instance_batch {
        let classes = model.config.classes;
        for offset in 0..classes {
            if n_real + extras.len() >= hp.min_instance_batch {
                break;
            }
            let class = (rotation + offset) % classes;
            if let Some(centroid) = buffer.centroid(class) {
                extras.push((centroid.to_vec(), class));
            }
        }
    }
    let n_cls = (n_real + extras.len()).max(1) as f64;

    for s in &states {
        cls_sum += s.ce.value / n_cls;
        pol_sum += s.pol.value / n_real.max(1) as f64;
        dis_sum += s.dis.value / n_real.max(1) as f64;
    }
    let mut extra_states = Vec::with_capacity(extras.len());
    for (centroid, class) in &extras {
        let ce = softmax_cross_entropy(&model.classify(centroid)?, *class)?;
        cls_sum += ce.value / n_cls;
        extra_states.push((centroid.clone(), ce));
    }

    let joint = joint_loss(
        &LossValue::scalar(cls_sum),
        &LossValue::scalar(pol_sum),
        &LossValue::scalar(dis_sum),
        &hp.weights,
    )?
    .value;

    // Backward: representation head first (accumulates into the shared
    // feature gradient), then detector head and backbone.
    let mut feature_grad = Tensor::zeros(fwd.feature.shape());
    let n_real_f = n_real.max(1) as f64;

    // Batch fire-rate balance: the per-code dispersity term centers each
    // code's mean, but the 50% fire-rate goal is per bit across
    // instances. Push every bit's batch mean toward 0.5 as well.
    let iota = model.config.code_bits;
    let mut bit_means = vec![0.0f64; iota];
    for s in &states {
        for (m, v) in bit_means.iter_mut().zip(s.crl.code.data()) {
            *m += v / n_real_f;
        }
    }
    for s in &states {
        let code = s.crl.code.data().to_vec();
        let logit_grad: Vec<f64> =
            s.ce.gradient.iter().map(|g| g * hp.weights.alpha / n_cls).collect();
        let mut code_grad = model.classify_backward(&code, &logit_grad)?;
        clip_norm(&mut code_grad, hp.code_grad_clip);
        // Classification flows end-to-end into the shared features.
        model.backward_crl(&s.crl, &code_grad, fwd.feature.shape(), Some(&mut feature_grad))?;

        // Polarization and dispersity shape the code distribution; they
        // act on the head only, under a tight clip, and engage only in the
        // late phase of training. Early steps leave the sigmoid
        // unsaturated so classification can organize the codes; the
        // pressure then polarizes them. Without these guards the
        // polarization gradient (which explodes near 0.5) saturates the
        // latent layer within a few steps and freezes the classifier for
        // good.
        let ramp = if hp.progress > hp.pol_start {
            let t = (hp.progress - hp.pol_start) / (1.0 - hp.pol_start);
            t.sqrt()
        } else {
            0.0
        };
        if ramp > 0.0 {
            let mut pol_dis: Vec<f64> = s
                .pol
                .gradient
                .iter()
                .zip(&s.dis.gradient)
                .map(|(pg, dg)| hp.weights.beta * pg / n_real_f + hp.weights.gamma * dg / n_real_f)
                .collect();
            clip_norm(&mut pol_dis, hp.pol_grad_clip * ramp);
            model.backward_crl(&s.crl, &pol_dis, fwd.feature.shape(), None)?;
        }

        // The fire-rate term engages from the start: a weak mean-field
        // pressure that keeps bits from collapsing onto one side while the
        // codes are still malleable. It must stay well below the
        // classification gradient or it smears the class structure.
        if hp.weights.gamma > 0.0 {
            let mut bit_balance: Vec<f64> =
                bit_means.iter().map(|m| (m - 0.5) / n_real_f).collect();
            clip_norm(&mut bit_balance, 0.2 * hp.pol_grad_clip);
            for g in &mut bit_balance {
                *g *= hp.weights.gamma;
            }
            model.backward_crl(&s.crl, &bit_balance, fwd.feature.shape(), None)?;
        }
    }
    for (centroid, ce) in &extra_states {
        let logit_grad: Vec<f64> =
            ce.gradient.iter().map(|g| g * hp.weights.alpha / n_cls).collect();
        model.classify_backward(centroid, &logit_grad)?;
    }

    let dmap = model.anchor_grads_to_map(det_head.map.shape(), &logit_grads, &offset_grads);
    model.backward(&fwd, Some((&det_head, &dmap)), feature_grad)?;

    // Update the per-class centroids with this step's codes.
    for s in &states {
        buffer.update(s.class, &LatentCode::new(s.crl.code.data().to_vec())?)?;
    }

    Ok(StepLog {
        step: 0,
        epoch: 0,
        obj: obj_loss,
        reg: reg_loss,
        cls: cls_sum,
        pol: pol_sum,
        dis: dis_sum,
        joint,
        pos_anchors: pos.len(),
        crl_instances: n_real,
    })
}

fn clip_norm(v: &mut [f64], cap: f64) {
    let norm = v.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > cap {
        let scale = cap / norm;
        for g in v {
            *g *= scale;
        }
    }
}

fn maybe_augment(img: &AnnotatedImage, prob: f64, rng: &mut ChaCha8Rng) -> Result<AnnotatedImage> {
    if prob <= 0.0 || rng.gen::<f64>() >= prob {
        return Ok(img.clone());
    }
    let id = ALL_TRANSFORMS[rng.gen_range(0..ALL_TRANSFORMS.len())];
    let (lo, hi) = TransformSpec::range(id);
    let magnitude = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let (out, _dropped) = augment(img, &TransformSpec { id, magnitude })?;
    // A transform that drops every instance would starve the detector.
    if out.instances.is_empty() && !img.instances.is_empty() {
        return Ok(img.clone());
    }
    Ok(out)
}

/// Core loop shared by scratch training and sketch fine-tuning. Classes in
/// `images` must already be dense in 0..model.classes.
pub fn run_training(
    mut model: SearchModel,
    images: &[AnnotatedImage],
    cfg: &RunConfig,
    learning_rate: f64,
    epochs: usize,
    seed: u64,
    weights: LossWeights,
    use_augment: bool,
) -> Result<TrainOutcome> {
    weights.validate()?;
    let grid = cfg.stitch_rows * cfg.stitch_cols;
    if images.len() < grid {
        return Err(Error::Input(format!(
            "{} training images cannot fill a {}x{} stitch grid",
            images.len(),
            cfg.stitch_rows,
            cfg.stitch_cols
        )));
    }
    let mut hp = Hyper {
        weights,
        epsilon: cfg.epsilon,
        confidence: cfg.confidence,
        min_instance_batch: cfg.min_instance_batch,
        code_grad_clip: cfg.code_grad_clip,
        pol_grad_clip: cfg.pol_grad_clip,
        pol_start: cfg.pol_start,
        progress: 0.0,
    };
    let mut buffer = FeatureBuffer::new(model.config.classes, cfg.buffer_momentum)?;
    let multipliers: Vec<f64> = model
        .params
        .iter()
        .map(|p| if p.name().starts_with("crl.") { cfg.head_lr_mult } else { 1.0 })
        .collect();
    let mut sgd = Sgd::new(learning_rate, cfg.momentum, multipliers);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::new();
    let mut step = 0usize;
    let total_steps = (epochs * (images.len() / grid)).max(1);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(grid) {
            let samples: Vec<AnnotatedImage> = chunk
                .iter()
                .map(|&i| {
                    if use_augment {
                        maybe_augment(&images[i], cfg.augment_prob, &mut rng)
                    } else {
                        Ok(images[i].clone())
                    }
                })
                .collect::<Result<_>>()?;
            let canvas = stitch_batch(&samples, (cfg.stitch_rows, cfg.stitch_cols))?;
            hp.progress = step as f64 / total_steps as f64;
            let mut entry = train_step(&mut model, &canvas, &hp, &mut buffer, &mut rng, step)
                .map_err(|e| match e {
                    Error::Divergence { component, .. } => Error::Divergence { step, component },
                    other => other,
                })?;
            entry.step = step;
            entry.epoch = epoch;
            if let Some(component) = entry.first_non_finite() {
                return Err(Error::Divergence { step, component: component.to_string() });
            }
            // Hold the base rate for the first half, then decay linearly
            // to 10%: the representation head only engages once the
            // detector clears the confidence gate, so early decay would
            // throttle it.
            let t = step as f64 / total_steps as f64;
            sgd.learning_rate =
                learning_rate * if t < 0.5 { 1.0 } else { 1.0 - 1.8 * (t - 0.5) };
            sgd.step(&mut model.params);
            model.params.zero_grads();
            log.push(entry);
            step += 1;
        }
    }
    Ok(TrainOutcome { model, log })
}

/// Scratch training on the labeled train split.
pub fn train_main(
    cfg: &RunConfig,
    dataset: &Dataset,
    seed: u64,
    epochs: usize,
    weights: LossWeights,
) -> Result<TrainOutcome> {
    let records: Vec<_> = dataset.split(Split::Train).collect();
    if records.is_empty() {
        return Err(Error::MissingArtifact("dataset has no train split: run gen first".into()));
    }
    let images: Vec<AnnotatedImage> =
        records.iter().map(|r| dataset.load_image(r)).collect::<Result<_>>()?;
    let model = SearchModel::new(cfg.model_config(cfg.classes), seed)?;
    run_training(model, &images, cfg, cfg.learning_rate, epochs, seed, weights, true)
}

/// Cross-modal fine-tune on the first `sketch_train_pairs` sketch-photo
/// pairs: same backbone and heads, fresh classifier over pair identities.
pub fn train_sketch_finetune(
    cfg: &RunConfig,
    dataset: &Dataset,
    base: &SearchModel,
) -> Result<TrainOutcome> {
    let pairs = cfg.sketch_train_pairs;
    let photos: Vec<_> = dataset.split(Split::PairPhoto).take(pairs).collect();
    let sketches: Vec<_> = dataset.split(Split::PairSketch).take(pairs).collect();
    if photos.len() < pairs || sketches.len() < pairs {
        return Err(Error::MissingArtifact(format!(
            "dataset has {} sketch pairs, fine-tune needs {pairs}",
            photos.len().min(sketches.len())
        )));
    }
    // Dense class ids 0..pairs in pair order, photo and sketch alike.
    let mut images = Vec::with_capacity(2 * pairs);
    for (dense, rec) in photos.iter().chain(sketches.iter()).enumerate() {
        let mut img = dataset.load_image(rec)?;
        let class = (dense % pairs) as i32;
        for inst in &mut img.instances {
            inst.class = class;
        }
        images.push(img);
    }

    // Start from the trained weights, swapping the classifier for one
    // sized to the pair identities.
    let mut model = SearchModel::new(cfg.model_config(pairs), cfg.train_seed ^ 0x5eed)?;
    for entry in model.params.iter_mut() {
        if entry.name() == "crl.classifier.weight" {
            continue;
        }
        let src = base
            .params
            .id_of(entry.name())
            .ok_or_else(|| Error::Format(format!("base model missing '{}'", entry.name())))?;
        if base.params.value(src).shape() != entry.value.shape() {
            return Err(Error::Format(format!(
                "base model parameter '{}' has shape {:?}, fine-tune needs {:?}",
                entry.name(),
                base.params.value(src).shape(),
                entry.value.shape()
            )));
        }
        entry.value = base.params.value(src).clone();
    }
    run_training(
        model,
        &images,
        cfg,
        cfg.finetune_learning_rate,
        cfg.sketch_epochs,
        cfg.train_seed ^ 0x5ce7c4,
        cfg.loss_weights(),
        false,
    )
}
