//! The joint model: a small convolutional backbone producing a shared
//! feature map at stride 8, a detection head (objectness + box offsets per
//! anchor scale) and the compact representation head (instance pooling,
//! two FC layers, sigmoid latent layer and a class projection).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::crl::{instance_pool, instance_pool_backward, InstancePoolCache, LatentCode};
use crate::detector::{build_anchors, decode_boxes, nms, Anchor, BoundingBox, Detection};
use crate::error::{Error, Result};
use crate::synthgen::RgbImage;
use crate::tensor::{
    activation, activation_backward, conv2d, conv2d_backward, fully_connected,
    fully_connected_backward, max_pool, max_pool_backward, Activation, ParamId, ParamSet, Tensor,
};

/// Total downsampling of the three pool stages.
pub const STRIDE: usize = 8;
/// Channels per anchor scale in the detection head: objectness + 4 offsets.
const DET_CHANNELS_PER_SCALE: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone_channels: [usize; 3],
    pub det_hidden: usize,
    pub anchor_scales: Vec<f64>,
    pub pool_size: (usize, usize),
    pub fc_widths: (usize, usize),
    pub code_bits: usize,
    pub classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.iter().any(|&c| c == 0) || self.det_hidden == 0 {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        if self.anchor_scales.is_empty() {
            return Err(Error::Config("anchor scale set must not be empty".into()));
        }
        if self.code_bits == 0 || self.classes == 0 {
            return Err(Error::Config("code_bits and classes must be positive".into()));
        }
        Ok(())
    }

    fn det_channels(&self) -> usize {
        DET_CHANNELS_PER_SCALE * self.anchor_scales.len()
    }

    fn pooled_len(&self) -> usize {
        self.backbone_channels[2] * self.pool_size.0 * self.pool_size.1
    }
}

struct Ids {
    conv: [ParamId; 3],
    det_hidden: ParamId,
    det: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    latent_w: ParamId,
    latent_b: ParamId,
    classifier_w: ParamId,
}

pub struct SearchModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    ids: Ids,
    zero_bias_classes: Tensor,
}

fn conv_kernel_shape(f: usize, c: usize) -> Vec<usize> {
    vec![f, c, 3, 3]
}

impl SearchModel {
    /// Fresh Glorot-initialized model (biases zero).
    pub fn new(config: ModelConfig, seed: u64) -> Result<SearchModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3] = config.backbone_channels;
        let mut params = ParamSet::new();
        let conv_init = |params: &mut ParamSet, name: &str, f: usize, c: usize, rng: &mut ChaCha8Rng| {
            let t = Tensor::glorot_uniform(&conv_kernel_shape(f, c), c * 9, f * 9, rng);
            params.insert(name, t)
        };
        let conv = [
            conv_init(&mut params, "backbone.conv1.kernel", c1, 3, &mut rng)?,
            conv_init(&mut params, "backbone.conv2.kernel", c2, c1, &mut rng)?,
            conv_init(&mut params, "backbone.conv3.kernel", c3, c2, &mut rng)?,
        ];
        let det_hidden = conv_init(&mut params, "det.hidden.kernel", config.det_hidden, c3, &mut rng)?;
        let det = conv_init(&mut params, "det.head.kernel", config.det_channels(), config.det_hidden, &mut rng)?;

        let (w1, w2) = config.fc_widths;
        let pooled = config.pooled_len();
        let fc1_w = params.insert("crl.fc1.weight", Tensor::glorot_uniform(&[w1, pooled], pooled, w1, &mut rng))?;
        let fc1_b = params.insert("crl.fc1.bias", Tensor::zeros(&[w1]))?;
        let fc2_w = params.insert("crl.fc2.weight", Tensor::glorot_uniform(&[w2, w1], w1, w2, &mut rng))?;
        let fc2_b = params.insert("crl.fc2.bias", Tensor::zeros(&[w2]))?;
        let latent_w = params.insert(
            "crl.latent.weight",
            Tensor::glorot_uniform(&[config.code_bits, w2], w2, config.code_bits, &mut rng),
        )?;
        let latent_b = params.insert("crl.latent.bias", Tensor::zeros(&[config.code_bits]))?;
        let classifier_w = params.insert(
            "crl.classifier.weight",
            Tensor::glorot_uniform(&[config.classes, config.code_bits], config.code_bits, config.classes, &mut rng),
        )?;

        let ids =
            Ids { conv, det_hidden, det, fc1_w, fc1_b, fc2_w, fc2_b, latent_w, latent_b, classifier_w };
        Ok(SearchModel {
            zero_bias_classes: Tensor::zeros(&[config.classes]),
            config,
            params,
            ids,
        })
    }

    /// Rebuilds a model around loaded parameters, validating shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<SearchModel> {
        config.validate()?;
        let mut fresh = SearchModel::new(config, 0)?;
        if params.len() != fresh.params.len() {
            return Err(Error::Format(format!(
                "weight file has {} records, model needs {}",
                params.len(),
                fresh.params.len()
            )));
        }
        for expected in fresh.params.iter() {
            let id = params
                .id_of(expected.name())
                .ok_or_else(|| Error::Format(format!("weight file missing parameter '{}'", expected.name())))?;
            if params.value(id).shape() != expected.value.shape() {
                return Err(Error::Format(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    expected.name(),
                    params.value(id).shape(),
                    expected.value.shape()
                )));
            }
        }
        for entry in fresh.params.iter_mut() {
            let id = params.id_of(entry.name()).expect("checked above");
            entry.value = params.value(id).clone();
        }
        Ok(fresh)
    }

    /// Forward through the backbone, keeping every intermediate needed for
    /// the backward pass.
    pub fn forward_backbone(&self, input: &Tensor) -> Result<BackboneForward> {
        let mut stages = Vec::with_capacity(3);
        let mut current = input.clone();
        for id in self.ids.conv {
            let pre = conv2d(&current, self.params.value(id), 1, 1)?;
            let act = activation(&pre, Activation::Relu);
            let (pooled, cache) = max_pool(&act)?;
            stages.push(StageCache { input: current, act_out: act, pool: cache });
            current = pooled;
        }
        Ok(BackboneForward { feature: current, stages })
    }

    /// Detection head: 3x3 conv + relu, then the [5*S, h8, w8] output map.
    pub fn forward_det_head(&self, feature: &Tensor) -> Result<DetHeadForward> {
        let hidden_pre = conv2d(feature, self.params.value(self.ids.det_hidden), 1, 1)?;
        let hidden = activation(&hidden_pre, Activation::Relu);
        let map = conv2d(&hidden, self.params.value(self.ids.det), 1, 1)?;
        Ok(DetHeadForward { hidden, map })
    }

    /// Anchors matching a feature map layout; index order is
    /// (row, col) cells with scales innermost.
    pub fn anchors_for(&self, feature: &Tensor) -> Result<Vec<Anchor>> {
        let (_, h8, w8) = feature.dims3()?;
        build_anchors((h8, w8), STRIDE, &self.config.anchor_scales)
    }

    /// Per-anchor (objectness logit, offsets) read out of the head map.
    pub fn read_anchor_outputs(&self, det_map: &Tensor) -> Result<(Vec<f64>, Vec<[f64; 4]>)> {
        let (c, h8, w8) = det_map.dims3()?;
        let scales = self.config.anchor_scales.len();
        if c != DET_CHANNELS_PER_SCALE * scales {
            return Err(Error::Dimension(format!("det map has {c} channels, expected {}", 5 * scales)));
        }
        let cell = h8 * w8;
        let data = det_map.data();
        let mut logits = Vec::with_capacity(cell * scales);
        let mut offsets = Vec::with_capacity(cell * scales);
        for row in 0..h8 {
            for col in 0..w8 {
                let at = row * w8 + col;
                for s in 0..scales {
                    let base = s * DET_CHANNELS_PER_SCALE;
                    logits.push(data[base * cell + at]);
                    offsets.push([
                        data[(base + 1) * cell + at],
                        data[(base + 2) * cell + at],
                        data[(base + 3) * cell + at],
                        data[(base + 4) * cell + at],
                    ]);
                }
            }
        }
        Ok((logits, offsets))
    }

    /// Scatter per-anchor gradients back into a det-map-shaped tensor.
    pub fn anchor_grads_to_map(
        &self,
        det_map_shape: &[usize],
        logit_grads: &[f64],
        offset_grads: &[[f64; 4]],
    ) -> Tensor {
        let (h8, w8) = (det_map_shape[1], det_map_shape[2]);
        let scales = self.config.anchor_scales.len();
        let cell = h8 * w8;
        let mut grad = Tensor::zeros(det_map_shape);
        let data = grad.data_mut();
        let mut a = 0;
        for row in 0..h8 {
            for col in 0..w8 {
                let at = row * w8 + col;
                for s in 0..scales {
                    let base = s * DET_CHANNELS_PER_SCALE;
                    data[base * cell + at] = logit_grads[a];
                    for d in 0..4 {
                        data[(base + 1 + d) * cell + at] = offset_grads[a][d];
                    }
                    a += 1;
                }
            }
        }
        grad
    }

    /// Full backward: det-map gradient plus an already-accumulated feature
    /// gradient (from CRL heads), through the det head and the backbone.
    pub fn backward(
        &mut self,
        fwd: &BackboneForward,
        det_head: Option<(&DetHeadForward, &Tensor)>,
        mut feature_grad: Tensor,
    ) -> Result<()> {
        if let Some((head, dmap)) = det_head {
            let (dhidden, dkernel) =
                conv2d_backward(&head.hidden, self.params.value(self.ids.det), 1, 1, dmap)?;
            for (g, d) in self.params.grad_mut(self.ids.det).data_mut().iter_mut().zip(dkernel.data()) {
                *g += d;
            }
            let dhidden_pre = activation_backward(&head.hidden, Activation::Relu, &dhidden);
            let (dinput, dkernel) = conv2d_backward(
                &fwd.feature,
                self.params.value(self.ids.det_hidden),
                1,
                1,
                &dhidden_pre,
            )?;
            for (g, d) in
                self.params.grad_mut(self.ids.det_hidden).data_mut().iter_mut().zip(dkernel.data())
            {
                *g += d;
            }
            for (f, d) in feature_grad.data_mut().iter_mut().zip(dinput.data()) {
                *f += d;
            }
        }
        let mut grad = feature_grad;
        for (stage, id) in fwd.stages.iter().zip(self.ids.conv).rev() {
            let unpooled = max_pool_backward(&stage.pool, stage.act_out.shape(), &grad);
            let pre_grad = activation_backward(&stage.act_out, Activation::Relu, &unpooled);
            let (dinput, dkernel) =
                conv2d_backward(&stage.input, self.params.value(id), 1, 1, &pre_grad)?;
            for (g, d) in self.params.grad_mut(id).data_mut().iter_mut().zip(dkernel.data()) {
                *g += d;
            }
            grad = dinput;
        }
        Ok(())
    }

    /// CRL head forward for one instance box.
    pub fn forward_crl(&self, feature: &Tensor, bbox: &BoundingBox) -> Result<CrlForward> {
        let (pooled, pool_cache) = instance_pool(feature, bbox, STRIDE, self.config.pool_size)?;
        let flat = Tensor::new(vec![self.config.pooled_len()], pooled.data().to_vec())?;
        let h1_pre = fully_connected(&flat, self.params.value(self.ids.fc1_w), self.params.value(self.ids.fc1_b))?;
        let h1 = activation(&h1_pre, Activation::Relu);
        let h2_pre = fully_connected(&h1, self.params.value(self.ids.fc2_w), self.params.value(self.ids.fc2_b))?;
        let h2 = activation(&h2_pre, Activation::Relu);
        let z = fully_connected(&h2, self.params.value(self.ids.latent_w), self.params.value(self.ids.latent_b))?;
        let code = activation(&z, Activation::Sigmoid);
        Ok(CrlForward { flat, h1, h2, code, pool_cache })
    }

    /// Class logits for a code (the classification projection has no bias).
    pub fn classify(&self, code: &[f64]) -> Result<Tensor> {
        fully_connected(
            &Tensor::new(vec![code.len()], code.to_vec())?,
            self.params.value(self.ids.classifier_w),
            &self.zero_bias_classes,
        )
    }

    /// Maps a logit gradient back to code space, accumulating the
    /// classifier weight gradient.
    pub fn classify_backward(&mut self, code: &[f64], logit_grad: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::new(vec![code.len()], code.to_vec())?;
        let g = Tensor::new(vec![logit_grad.len()], logit_grad.to_vec())?;
        let (dx, dw, _db) = fully_connected_backward(&x, self.params.value(self.ids.classifier_w), &g)?;
        for (acc, d) in self.params.grad_mut(self.ids.classifier_w).data_mut().iter_mut().zip(dw.data()) {
            *acc += d;
        }
        Ok(dx.data().to_vec())
    }

    /// Backward through the CRL head given the loss gradient w.r.t. the
    /// code, accumulating head parameter gradients. When `feature_grad` is
    /// given, the instance's contribution also flows into the shared
    /// feature map (and from there the backbone).
    pub fn backward_crl(
        &mut self,
        fwd: &CrlForward,
        code_grad: &[f64],
        feature_shape: &[usize],
        feature_grad: Option<&mut Tensor>,
    ) -> Result<()> {
        let dcode = Tensor::new(vec![code_grad.len()], code_grad.to_vec())?;
        let dz = activation_backward(&fwd.code, Activation::Sigmoid, &dcode);
        let (dh2, dwl, dbl) = fully_connected_backward(&fwd.h2, self.params.value(self.ids.latent_w), &dz)?;
        accumulate(self.params.grad_mut(self.ids.latent_w), &dwl);
        accumulate(self.params.grad_mut(self.ids.latent_b), &dbl);
        let dh2_pre = activation_backward(&fwd.h2, Activation::Relu, &dh2);
        let (dh1, dw2, db2) = fully_connected_backward(&fwd.h1, self.params.value(self.ids.fc2_w), &dh2_pre)?;
        accumulate(self.params.grad_mut(self.ids.fc2_w), &dw2);
        accumulate(self.params.grad_mut(self.ids.fc2_b), &db2);
        let dh1_pre = activation_backward(&fwd.h1, Activation::Relu, &dh1);
        let (dflat, dw1, db1) = fully_connected_backward(&fwd.flat, self.params.value(self.ids.fc1_w), &dh1_pre)?;
        accumulate(self.params.grad_mut(self.ids.fc1_w), &dw1);
        accumulate(self.params.grad_mut(self.ids.fc1_b), &db1);
        if let Some(feature_grad) = feature_grad {
            let dpooled = Tensor::new(
                vec![self.config.backbone_channels[2], self.config.pool_size.0, self.config.pool_size.1],
                dflat.data().to_vec(),
            )?;
            instance_pool_backward(&fwd.pool_cache, feature_shape, &dpooled, feature_grad);
        }
        Ok(())
    }

    /// Model input: RGB scaled and centered into [-1, 1].
    pub fn image_to_input(image: &RgbImage) -> Tensor {
        let mut t = image.to_tensor();
        for v in t.data_mut() {
            *v = 2.0 * *v - 1.0;
        }
        t
    }

    /// Runs the detector on an image: backbone, head, decode, confidence
    /// filter, NMS at IoU 0.5, sorted by descending score (anchor-index
    /// order on ties).
    pub fn detect(&self, image: &RgbImage, conf_thresh: f64) -> Result<Vec<Detection>> {
        let fwd = self.forward_backbone(&Self::image_to_input(image))?;
        self.detect_on_feature(&fwd.feature, conf_thresh)
    }

    /// Same as [`SearchModel::detect`] but reusing a computed feature map.
    pub fn detect_on_feature(&self, feature: &Tensor, conf_thresh: f64) -> Result<Vec<Detection>> {
        let det_map = self.forward_det_head(feature)?.map;
        let anchors = self.anchors_for(feature)?;
        let (_, h8, w8) = feature.dims3()?;
        let (img_w, img_h) = ((w8 * STRIDE) as f64, (h8 * STRIDE) as f64);
        let (logits, offsets) = self.read_anchor_outputs(&det_map)?;
        let boxes = decode_boxes(&anchors, &offsets);
        let candidates: Vec<Detection> = logits
            .iter()
            .zip(boxes)
            .filter_map(|(&logit, bbox)| {
                let score = crate::tensor::sigmoid_scalar(logit);
                // Boxes that left the image entirely are garbage decodes.
                let intersects =
                    bbox.u < img_w && bbox.v < img_h && bbox.right() > 0.0 && bbox.bottom() > 0.0;
                (score >= conf_thresh && intersects).then_some(Detection { bbox, score })
            })
            .collect();
        Ok(nms(&candidates, 0.5))
    }

    /// Latent codes for a list of detections on one image, in order.
    pub fn embed(&self, image: &RgbImage, detections: &[Detection]) -> Result<Vec<LatentCode>> {
        if detections.is_empty() {
            return Ok(Vec::new());
        }
        let fwd = self.forward_backbone(&Self::image_to_input(image))?;
        self.embed_on_feature(&fwd.feature, detections)
    }

    pub fn embed_on_feature(&self, feature: &Tensor, detections: &[Detection]) -> Result<Vec<LatentCode>> {
        detections
            .iter()
            .map(|d| {
                let fwd = self.forward_crl(feature, &d.bbox)?;
                LatentCode::new(fwd.code.data().to_vec())
            })
            .collect()
    }
}

fn accumulate(acc: &mut Tensor, delta: &Tensor) {
    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += d;
    }
}

pub struct StageCache {
    input: Tensor,
    act_out: Tensor,
    pool: crate::tensor::PoolCache,
}

pub struct DetHeadForward {
    pub hidden: Tensor,
    pub map: Tensor,
}

pub struct BackboneForward {
    pub feature: Tensor,
    stages: Vec<StageCache>,
}

pub struct CrlForward {
    flat: Tensor,
    h1: Tensor,
    h2: Tensor,
    pub code: Tensor,
    pool_cache: InstancePoolCache,
}
