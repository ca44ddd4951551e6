//! Dual-encoder detector: image tower with anchors and a dense head, text
//! tower over independent concept sequences, and bare dot-product scoring.

pub mod anchors;
pub mod atss;
pub mod checkpoint;
pub mod decode;
pub mod network;

use std::collections::HashMap;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

pub use anchors::AnchorSet;
pub use atss::{atss_assign, centerness_target, AssignmentResult};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use decode::{decode_predictions, nms, DecodeParams, Detection};
pub use network::{ImageBatchOutput, ImageEncoder, ParamStore, TextEncoder};

use crate::data::{TokenSeq, Tokenizer};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Matrix};
use crate::pseudo_label::{RegionQuery, RegionScorer};
use crate::util::{child_seed, l2_normalize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Joint embedding width D.
    pub d_model: usize,
    /// Pyramid strides, ascending powers of two reachable by the backbone.
    pub strides: Vec<usize>,
    /// Anchor side as a multiple of its level's stride.
    pub anchor_scale: f64,
    pub topk_atss: usize,
    /// Output channels of each stride-2 backbone stage.
    pub backbone_channels: Vec<usize>,
    pub head_channels: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    /// L2-normalize both towers' outputs; text rows are then scaled by `logit_scale`.
    pub normalize_embeddings: bool,
    pub logit_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            strides: vec![8, 16],
            anchor_scale: 3.0,
            topk_atss: 9,
            backbone_channels: vec![32, 64, 96, 128],
            head_channels: 96,
            text_width: 64,
            text_layers: 2,
            text_heads: 4,
            vocab_size: 0,
            max_tokens: Tokenizer::DEFAULT_MAX_LEN,
            normalize_embeddings: false,
            logit_scale: 10.0,
        }
    }
}

impl ModelConfig {
    /// Backbone stage index feeding each pyramid level.
    pub fn level_stages(&self) -> Result<Vec<usize>> {
        if self.strides.is_empty() {
            return Err(Error::Config("at least one stride is required".into()));
        }
        let mut out = Vec::new();
        for (i, &s) in self.strides.iter().enumerate() {
            if !s.is_power_of_two() || s < 2 {
                return Err(Error::Config(format!("stride {s} is not a power of two >= 2")));
            }
            let stage = s.trailing_zeros() as usize - 1;
            if stage >= self.backbone_channels.len() {
                return Err(Error::Config(format!(
                    "stride {s} needs {} backbone stages, have {}",
                    stage + 1,
                    self.backbone_channels.len()
                )));
            }
            if i > 0 && s <= self.strides[i - 1] {
                return Err(Error::Config("strides must be strictly increasing".into()));
            }
            out.push(stage);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.level_stages()?;
        if self.d_model == 0 || self.head_channels == 0 || self.text_width == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        if self.text_heads == 0 || self.text_width % self.text_heads != 0 {
            return Err(Error::Config(format!(
                "text_width {} not divisible by text_heads {}",
                self.text_width, self.text_heads
            )));
        }
        if self.vocab_size < 2 || self.max_tokens == 0 {
            return Err(Error::Config("vocab_size and max_tokens must be set".into()));
        }
        if !(self.anchor_scale > 0.0) || self.topk_atss == 0 {
            return Err(Error::Config("anchor_scale and topk_atss must be positive".into()));
        }
        Ok(())
    }

    pub fn coarsest_stride(&self) -> usize {
        self.strides.iter().copied().max().unwrap_or(1)
    }
}

/// Per-image outputs of the image tower.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderOutput {
    /// `M x D`
    pub region_features: Matrix,
    pub anchors: Vec<BBox>,
    pub box_deltas: Vec<[f64; 4]>,
    pub centerness_logits: Vec<f64>,
}

/// `S = F^T (F^I)^T`: `N x D` times `(M x D)^T`.
pub fn alignment_scores(concepts: &Matrix, regions: &Matrix) -> Result<Matrix> {
    let (n, d) = concepts.shape();
    let (m, d2) = regions.shape();
    if d != d2 {
        return Err(Error::Shape(format!(
            "concept width {d} does not match region width {d2}"
        )));
    }
    let mut s = Matrix::zeros(n, m);
    for i in 0..n {
        let a = concepts.row(i);
        for j in 0..m {
            let b = regions.row(j);
            s.set(i, j, a.iter().zip(b).map(|(x, y)| x * y).sum());
        }
    }
    Ok(s)
}

pub(crate) fn tensor_to_matrix(t: &Tensor) -> Result<Matrix> {
    let (r, c) = t.dims2()?;
    let data: Vec<f64> = t
        .flatten_all()?
        .to_vec1::<f32>()?
        .into_iter()
        .map(f64::from)
        .collect();
    Matrix::from_vec(r, c, data)
}

/// Stacks equally sized `H x W x 3` images into a `[B, 3, H, W]` tensor.
pub fn images_to_tensor(images: &[&Image], device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w, c) = first.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if img.dim() != (h, w, 3) {
            return Err(Error::Shape(format!(
                "batch mixes image sizes {:?} and {:?}",
                (h, w, 3),
                img.dim()
            )));
        }
        data.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), h, w, 3), device)?
        .permute((0, 3, 1, 2))?
        .contiguous()?)
}

/// Both towers, their parameters and the tokenizer.
#[derive(Debug, Clone)]
pub struct Detector {
    config: ModelConfig,
    tokenizer: Tokenizer,
    visual: ParamStore,
    text: ParamStore,
    image_encoder: ImageEncoder,
    text_encoder: TextEncoder,
    device: Device,
}

impl Detector {
    /// Fresh parameters; `vocab_size` and `max_tokens` are taken from the tokenizer.
    pub fn new(mut config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.vocab_size = tokenizer.vocab_size();
        config.max_tokens = tokenizer.max_len();
        config.validate()?;
        let device = Device::Cpu;
        let mut visual = ParamStore::default();
        let mut text = ParamStore::default();
        let image_encoder = ImageEncoder::new(&config, &mut visual, child_seed(seed, "init/visual"), &device)?;
        let text_encoder = TextEncoder::new(&config, &mut text, child_seed(seed, "init/text"), &device)?;
        Ok(Detector {
            config,
            tokenizer,
            visual,
            text,
            image_encoder,
            text_encoder,
            device,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Image-tower parameters.
    pub fn visual_params(&self) -> &ParamStore {
        &self.visual
    }

    /// Text-tower parameters.
    pub fn text_params(&self) -> &ParamStore {
        &self.text
    }

    pub fn anchors(&self, height: usize, width: usize) -> Result<AnchorSet> {
        AnchorSet::generate(height, width, &self.config.strides, self.config.anchor_scale)
    }

    fn check_size(&self, image: &Image) -> Result<()> {
        let (h, w, _) = image.dim();
        let stride = self.config.coarsest_stride();
        if h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(Error::Stride {
                height: h,
                width: w,
                stride,
            });
        }
        Ok(())
    }

    /// Batched image tower on tensors (differentiable).
    pub fn forward_images(&self, images: &[&Image]) -> Result<ImageBatchOutput> {
        for img in images {
            self.check_size(img)?;
        }
        let x = images_to_tensor(images, &self.device)?;
        let mut out = self.image_encoder.forward(&x)?;
        if self.config.normalize_embeddings {
            out.features = l2_rows(&out.features)?;
        }
        Ok(out)
    }

    /// Embeds token sequences (differentiable), `[K, D]`.
    pub fn forward_tokens(&self, seqs: &[TokenSeq]) -> Result<Tensor> {
        let t = self.text_encoder.forward(seqs)?;
        if self.config.normalize_embeddings && !seqs.is_empty() {
            Ok((l2_rows(&t)? * self.config.logit_scale)?)
        } else {
            Ok(t)
        }
    }

    /// Embeds texts, running the encoder once per distinct text, `[K, D]`.
    pub fn forward_texts(&self, texts: &[String]) -> Result<Tensor> {
        let mut unique: Vec<&str> = Vec::new();
        let mut slot: HashMap<&str, u32> = HashMap::new();
        let mut index = Vec::with_capacity(texts.len());
        for t in texts {
            let id = *slot.entry(t.as_str()).or_insert_with(|| {
                unique.push(t.as_str());
                (unique.len() - 1) as u32
            });
            index.push(id);
        }
        let seqs: Vec<TokenSeq> = unique.iter().map(|t| self.tokenizer.encode(t)).collect();
        let emb = self.forward_tokens(&seqs)?;
        if unique.len() == texts.len() {
            return Ok(emb);
        }
        let idx = Tensor::from_vec(index, texts.len(), &self.device)?;
        Ok(emb.index_select(&idx, 0)?)
    }

    pub fn encode_image(&self, image: &Image) -> Result<ImageEncoderOutput> {
        let out = self.forward_images(&[image])?;
        let (h, w, _) = image.dim();
        let anchors = self.anchors(h, w)?;
        let region_features = tensor_to_matrix(&out.features.squeeze(0)?)?;
        let deltas = tensor_to_matrix(&out.deltas.squeeze(0)?)?;
        let centerness_logits = out
            .centerness
            .squeeze(0)?
            .to_vec1::<f32>()?
            .into_iter()
            .map(f64::from)
            .collect();
        if region_features.rows() != anchors.len() {
            return Err(Error::Shape(format!(
                "{} region features for {} anchors",
                region_features.rows(),
                anchors.len()
            )));
        }
        Ok(ImageEncoderOutput {
            region_features,
            anchors: anchors.boxes,
            box_deltas: (0..deltas.rows())
                .map(|r| {
                    let v = deltas.row(r);
                    [v[0], v[1], v[2], v[3]]
                })
                .collect(),
            centerness_logits,
        })
    }

    /// `N x D` concept embeddings; rows depend only on their own sequence.
    pub fn encode_tokens(&self, seqs: &[TokenSeq]) -> Result<Matrix> {
        tensor_to_matrix(&self.forward_tokens(seqs)?)
    }

    pub fn encode_concepts(&self, texts: &[String]) -> Result<Matrix> {
        tensor_to_matrix(&self.forward_texts(texts)?)
    }

    /// Detections for one image against `concept_texts` (reported under `concept_names`).
    pub fn detect(
        &self,
        image: &Image,
        concept_texts: &[String],
        concept_names: &[String],
        score_threshold: f64,
        nms_iou: f64,
        max_detections: usize,
    ) -> Result<Vec<Detection>> {
        let out = self.encode_image(image)?;
        let concepts = self.encode_concepts(concept_texts)?;
        let s = alignment_scores(&concepts, &out.region_features)?;
        let (h, w, _) = image.dim();
        decode_predictions(
            &s,
            &out.box_deltas,
            &out.anchors,
            &out.centerness_logits,
            concept_names,
            &DecodeParams {
                score_threshold,
                nms_iou,
                max_detections,
                image_width: w as f64,
                image_height: h as f64,
            },
        )
    }
}

fn l2_rows(t: &Tensor) -> Result<Tensor> {
    let norm = (t.sqr()?.sum_keepdim(candle_core::D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(t.broadcast_div(&norm)?)
}

/// Region scorer backed by a trained detector: a crop is resized to the
/// detector's input size and its region features are pooled with centerness weights.
pub struct ModelScorer {
    detector: Detector,
    input_size: usize,
    id: String,
}

impl ModelScorer {
    pub fn new(detector: Detector, input_size: usize, id: impl Into<String>) -> Result<Self> {
        let stride = detector.config().coarsest_stride();
        if input_size == 0 || input_size % stride != 0 {
            return Err(Error::Stride {
                height: input_size,
                width: input_size,
                stride,
            });
        }
        Ok(ModelScorer {
            detector,
            input_size,
            id: id.into(),
        })
    }
}

impl RegionScorer for ModelScorer {
    fn id(&self) -> String {
        format!("model:{}", self.id)
    }

    fn embed_region(&self, region: &RegionQuery<'_>) -> Result<Vec<f32>> {
        let (h, w, _) = region.crop.dim();
        let full = BBox::new(0.0, 0.0, w as f64, h as f64)?;
        let img = crate::pseudo_label::crop_and_resize(region.crop, &full, self.input_size as u32)?;
        let out = self.detector.encode_image(&img)?;
        let weights: Vec<f64> = out
            .centerness_logits
            .iter()
            .map(|&c| crate::losses::sigmoid(c))
            .collect();
        let total: f64 = weights.iter().sum::<f64>().max(1e-12);
        let d = out.region_features.cols();
        let mut v = vec![0f32; d];
        for (r, wgt) in weights.iter().enumerate() {
            for (k, x) in out.region_features.row(r).iter().enumerate() {
                v[k] += (x * wgt / total) as f32;
            }
        }
        l2_normalize(&mut v);
        Ok(v)
    }

    fn embed_text(&self, prompt: &str) -> Result<Vec<f32>> {
        let m = self.detector.encode_concepts(&[prompt.to_string()])?;
        let mut v: Vec<f32> = m.row(0).iter().map(|&x| x as f32).collect();
        l2_normalize(&mut v);
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn detector() -> Detector {
        let tok = Tokenizer::from_texts(["red square", "blue circle, a round shape."], 8, 16);
        Detector::new(ModelConfig::default(), tok, 3).unwrap()
    }

    #[test]
    fn sixty_four_pixel_input_has_eighty_regions() {
        let d = detector();
        let out = d.encode_image(&Image::zeros((64, 64, 3))).unwrap();
        assert_eq!(out.region_features.shape(), (80, 64));
        assert_eq!(out.anchors.len(), 80);
        assert!(out.region_features.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn indivisible_input_names_stride() {
        let err = detector().encode_image(&Image::zeros((60, 64, 3))).unwrap_err();
        assert!(err.to_string().contains("16"), "{err}");
    }

    #[test]
    fn empty_concept_list_gives_empty_matrix() {
        let m = detector().encode_concepts(&[]).unwrap();
        assert_eq!(m.shape(), (0, 64));
    }

    #[test]
    fn duplicate_texts_give_duplicate_rows() {
        let d = detector();
        let m = d
            .encode_concepts(&["red square".into(), "blue circle".into(), "red square".into()])
            .unwrap();
        assert_eq!(m.row(0), m.row(2));
        assert_ne!(m.row(0), m.row(1));
    }

    #[test]
    fn alignment_scores_checks_width() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 5);
        assert!(alignment_scores(&a, &b).is_err());
        let s = alignment_scores(&a, &Matrix::zeros(4, 3)).unwrap();
        assert_eq!(s.shape(), (2, 4));
        assert!(s.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn initial_scores_start_low() {
        let d = detector();
        let out = d.encode_image(&Image::from_elem((64, 64, 3), 0.3)).unwrap();
        let c = d.encode_concepts(&["red square".into()]).unwrap();
        let s = alignment_scores(&c, &out.region_features).unwrap();
        let mean = s.as_slice().iter().sum::<f64>() / s.as_slice().len() as f64;
        assert!(mean < -2.0, "mean initial score {mean}");
    }

    #[test]
    fn invalid_strides_are_rejected() {
        let cfg = ModelConfig {
            strides: vec![16, 8],
            vocab_size: 10,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            strides: vec![32],
            vocab_size: 10,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
