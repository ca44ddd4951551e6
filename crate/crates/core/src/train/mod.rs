//! Training loop: single-kind batches, paralleled concept inputs, ATSS
//! targets, analytic loss gradients pushed through both towers, and a
//! two-group Adam with step decay.

pub mod ablation;
pub mod optim;

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{AdamConfig, AdamGroup};

use crate::data::{
    load_records, NegativeSource, ParallelInputBuilder, ParallelOptions, ParalleledInput, RecordKind,
    Tokenizer, UnifiedRecord,
};
use crate::dictionary::{normalize_name, ConceptDictionary};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Matrix};
use crate::losses::{total_loss_with_grad, BoxCoder, LossBreakdown, LossConfig, LossInputs};
use crate::model::checkpoint::ArrayMap;
use crate::model::{atss_assign, load_checkpoint, save_checkpoint, Detector, ModelConfig};
use crate::pseudo_label::{
    attach_pseudo_labels, pseudo_label_records, read_proposals, scorer_from_spec, PseudoLabelOptions,
    PseudoLabelRow,
};
use crate::util::{child_seed, read_jsonl, read_lines};

/// Flat training configuration; every key has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub detection: Option<PathBuf>,
    pub grounding: Option<PathBuf>,
    pub imagetext: Option<PathBuf>,
    /// Precomputed pseudo labels for the image-text records.
    pub pseudo_labels: Option<PathBuf>,
    /// Proposals for labeling image-text records in-process when no
    /// pseudo-label file is given.
    pub proposals: Option<PathBuf>,
    pub scorer: String,
    pub dictionary: Option<PathBuf>,
    /// Detection label space (one name per line); defaults to the detection records' classes.
    pub label_space: Option<PathBuf>,
    /// Names never sampled as negatives (one per line).
    pub exclude: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub n: usize,
    pub enrich: bool,
    pub negative_sampling: bool,
    pub label_completion: bool,
    pub detection_negatives: NegativeSource,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_visual: f64,
    pub lr_text: f64,
    /// Epochs (0-based) at which both learning rates are multiplied by `lr_decay`.
    pub milestones: Option<Vec<usize>>,
    pub lr_decay: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    pub seed: u64,
    pub max_steps: Option<u64>,
    pub resume: Option<PathBuf>,
    pub pseudo_label: PseudoLabelOptions,
    #[serde(flatten)]
    pub loss: LossConfig,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            detection: None,
            grounding: None,
            imagetext: None,
            pseudo_labels: None,
            proposals: None,
            scorer: "stub".into(),
            dictionary: None,
            label_space: None,
            exclude: None,
            out_dir: PathBuf::from("run"),
            n: 16,
            enrich: true,
            negative_sampling: true,
            label_completion: true,
            detection_negatives: NegativeSource::LabelSpace,
            epochs: 20,
            batch_size: 8,
            lr_visual: 2e-3,
            lr_text: 2e-4,
            milestones: None,
            lr_decay: 0.1,
            warmup_steps: 50,
            weight_decay: 1e-4,
            max_grad_norm: 10.0,
            seed: 0,
            max_steps: None,
            resume: None,
            pseudo_label: PseudoLabelOptions::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Explicit milestones, or 2/3 and 11/12 of the epoch count.
    pub fn effective_milestones(&self) -> Vec<usize> {
        match &self.milestones {
            Some(m) => m.clone(),
            None => {
                let mut m = vec![self.epochs * 2 / 3, self.epochs * 11 / 12];
                m.dedup();
                m.retain(|&e| e > 0 && e < self.epochs.max(1));
                m
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n == 0 {
            return Err(Error::Config("batch_size and n must be positive".into()));
        }
        if self.lr_visual < 0.0 || self.lr_text < 0.0 || !self.lr_visual.is_finite() || !self.lr_text.is_finite() {
            return Err(Error::Config("learning rates must be finite and nonnegative".into()));
        }
        if self.effective_milestones().windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("milestones must be strictly increasing".into()));
        }
        if self.detection.is_none() && self.grounding.is_none() && self.imagetext.is_none() {
            return Err(Error::Config("no training records given".into()));
        }
        if self.dictionary.is_none() {
            return Err(Error::Config("a dictionary is required".into()));
        }
        Ok(())
    }

    /// Schedule multiplier at `epoch` and global `step`.
    pub fn lr_factor(&self, epoch: usize, step: u64) -> f64 {
        let decays = self.effective_milestones().iter().filter(|&&m| epoch >= m).count();
        let warm = if self.warmup_steps > 0 {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        self.lr_decay.powi(decays as i32) * warm
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    #[serde(rename = "L_ALI")]
    pub l_ali: f64,
    #[serde(rename = "L_CEN")]
    pub l_cen: f64,
    #[serde(rename = "L_REG")]
    pub l_reg: f64,
    pub total: f64,
    pub lr_visual: f64,
    pub lr_text: f64,
    pub kind: RecordKind,
    pub num_positives: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps: u64,
    pub epochs_completed: usize,
    pub losses: Vec<f64>,
    pub elapsed_secs: f64,
}

/// All training state except the data.
pub struct Trainer {
    pub detector: Detector,
    pub visual_opt: AdamGroup,
    pub text_opt: AdamGroup,
    pub loss: LossConfig,
    pub max_grad_norm: f64,
}

/// Per-batch losses and the gradients they produced.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub breakdown: LossBreakdown,
    pub grad_norm: f64,
}

impl Trainer {
    pub fn new(detector: Detector, cfg: &TrainConfig) -> Self {
        let adam = AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        };
        Trainer {
            detector,
            visual_opt: AdamGroup::new("visual", adam),
            text_opt: AdamGroup::new("text", adam),
            loss: cfg.loss,
            max_grad_norm: cfg.max_grad_norm,
        }
    }

    /// Forward, loss and backward for one single-kind batch, then one
    /// optimizer step at the given learning rates.
    pub fn step(
        &mut self,
        records: &[&UnifiedRecord],
        inputs: &[ParalleledInput],
        lr_visual: f64,
        lr_text: f64,
    ) -> Result<StepResult> {
        let (breakdown, surrogate) = batch_objective(&self.detector, records, inputs, &self.loss)?;
        let grads = surrogate.backward()?;
        let sq = self.visual_opt.grad_sq_norm(self.detector.visual_params(), &grads)?
            + self.text_opt.grad_sq_norm(self.detector.text_params(), &grads)?;
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {grad_norm}")));
        }
        let scale = if self.max_grad_norm > 0.0 && grad_norm > self.max_grad_norm {
            self.max_grad_norm / grad_norm
        } else {
            1.0
        };
        self.visual_opt
            .step(self.detector.visual_params(), &grads, lr_visual, scale)?;
        self.text_opt.step(self.detector.text_params(), &grads, lr_text, scale)?;
        Ok(StepResult { breakdown, grad_norm })
    }

    fn optimizer_arrays(&self) -> ArrayMap {
        let mut out = ArrayMap::new();
        self.visual_opt.export(&mut out);
        self.text_opt.export(&mut out);
        out
    }
}

/// Loss over a batch plus a scalar whose gradient w.r.t. every parameter
/// equals the loss gradient: the analytic gradients w.r.t. scores,
/// centerness logits and box deltas are contracted with those outputs.
pub fn batch_objective(
    detector: &Detector,
    records: &[&UnifiedRecord],
    inputs: &[ParalleledInput],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Tensor)> {
    let b = records.len();
    if b == 0 || inputs.len() != b {
        return Err(Error::Shape(format!("{b} records, {} inputs", inputs.len())));
    }
    let n = inputs[0].len();
    if inputs.iter().any(|p| p.len() != n) {
        return Err(Error::Shape("paralleled inputs differ in length".into()));
    }
    let kind = records[0].kind;
    let images: Vec<&crate::data::Image> = records.iter().map(|r| r.image.as_ref()).collect();
    let (h, w, _) = images[0].dim();
    let anchors = detector.anchors(h, w)?;
    let m = anchors.len();

    let texts: Vec<String> = inputs.iter().flat_map(|p| p.concepts.iter().cloned()).collect();
    let concept_emb = detector.forward_texts(&texts)?;
    let d = concept_emb.dim(1)?;
    let concept_emb = concept_emb.reshape((b, n, d))?;
    let img = detector.forward_images(&images)?;
    let scores = concept_emb.matmul(&img.features.transpose(1, 2)?.contiguous()?)?;

    let s_all = scores.flatten_all()?.to_vec1::<f32>()?;
    let c_all = img.centerness.flatten_all()?.to_vec1::<f32>()?;
    let d_all = img.deltas.flatten_all()?.to_vec1::<f32>()?;

    let assignments: Vec<_> = inputs
        .iter()
        .map(|p| atss_assign(&anchors, &p.targets(), n, detector.config().topk_atss))
        .collect();
    let positives: usize = assignments.iter().map(|a| a.num_positives()).sum();
    let norm = (positives as f64).max(1.0);

    let coder = BoxCoder::default();
    let mut g_s = vec![0f32; b * n * m];
    let mut g_c = vec![0f32; b * m];
    let mut g_d = vec![0f32; b * m * 4];
    let mut sum = LossBreakdown::default();
    for i in 0..b {
        let s = Matrix::from_vec(n, m, s_all[i * n * m..(i + 1) * n * m].iter().map(|&v| v as f64).collect())?;
        let cen: Vec<f64> = c_all[i * m..(i + 1) * m].iter().map(|&v| v as f64).collect();
        let asg = &assignments[i];
        let mut pos_anchor = Vec::new();
        let mut pairs: Vec<(BBox, BBox)> = Vec::new();
        for a in 0..m {
            if let Some(target) = asg.reg_targets[a] {
                let dl = delta_at(&d_all, i, m, a);
                pairs.push((coder.decode(&anchors.boxes[a], dl), target));
                pos_anchor.push(a);
            }
        }
        let (br, gr) = total_loss_with_grad(
            &LossInputs {
                scores: &s,
                targets: &asg.g,
                centerness_logits: &cen,
                centerness_targets: &asg.centerness_targets,
                positive_mask: &asg.positive_mask,
                box_pairs: &pairs,
                kind,
            },
            cfg,
            Some(norm),
        )?;
        sum.l_ali += br.l_ali;
        sum.l_cen += br.l_cen;
        sum.l_reg += br.l_reg;
        sum.total += br.total;
        sum.num_positives += br.num_positives;
        sum.reg_weight = br.reg_weight;
        for (k, v) in gr.scores.as_slice().iter().enumerate() {
            g_s[i * n * m + k] = *v as f32;
        }
        for (a, v) in gr.centerness_logits.iter().enumerate() {
            g_c[i * m + a] = *v as f32;
        }
        for (j, &a) in pos_anchor.iter().enumerate() {
            let dl = delta_at(&d_all, i, m, a);
            let gd = coder.backprop(&anchors.boxes[a], dl, gr.boxes[j]);
            for k in 0..4 {
                g_d[(i * m + a) * 4 + k] = gd[k] as f32;
            }
        }
    }
    let dev = detector.device();
    let surrogate = ((scores * Tensor::from_vec(g_s, (b, n, m), dev)?)?.sum_all()?
        + (img.centerness * Tensor::from_vec(g_c, (b, m), dev)?)?.sum_all()?)?;
    let surrogate = (surrogate + (img.deltas * Tensor::from_vec(g_d, (b, m, 4), dev)?)?.sum_all()?)?;
    Ok((sum, surrogate))
}

fn delta_at(all: &[f32], i: usize, m: usize, a: usize) -> [f64; 4] {
    let o = (i * m + a) * 4;
    [all[o] as f64, all[o + 1] as f64, all[o + 2] as f64, all[o + 3] as f64]
}

/// Every text the tokenizer should know: dictionary names and enriched
/// forms plus all record concepts.
pub fn tokenizer_corpus(dict: &ConceptDictionary, records: &[UnifiedRecord]) -> Vec<String> {
    let mut texts: Vec<String> = Vec::new();
    for e in dict.iter() {
        texts.push(crate::dictionary::format_enriched(&e.name, e.definition.as_deref()));
    }
    for r in records {
        texts.extend(r.objects.iter().map(|o| o.concept.clone()));
    }
    texts
}

/// Records of all configured kinds with pseudo labels attached.
pub fn load_training_records(cfg: &TrainConfig, dict: &ConceptDictionary) -> Result<Vec<UnifiedRecord>> {
    let mut records = Vec::new();
    if let Some(p) = &cfg.detection {
        records.extend(load_records(p, RecordKind::Detection)?);
    }
    if let Some(p) = &cfg.grounding {
        records.extend(load_records(p, RecordKind::Grounding)?);
    }
    if let Some(p) = &cfg.imagetext {
        let mut itx = load_records(p, RecordKind::Imagetext)?;
        let rows: Vec<PseudoLabelRow> = if let Some(pl) = &cfg.pseudo_labels {
            read_jsonl(pl)?
        } else if let Some(props) = &cfg.proposals {
            let scorer = scorer_from_spec(&cfg.scorer)?;
            let opts = PseudoLabelOptions {
                use_dictionary: cfg.label_completion,
                ..cfg.pseudo_label
            };
            pseudo_label_records(&itx, &read_proposals(props)?, dict, scorer.as_ref(), &opts, None)?
        } else {
            Vec::new()
        };
        let n = attach_pseudo_labels(&mut itx, &rows);
        log::info!("attached {n} pseudo labels to {} image-text records", itx.len());
        let before = itx.len();
        itx.retain(|r| !r.objects.is_empty());
        if itx.len() < before {
            log::info!("skipping {} image-text records without pseudo labels", before - itx.len());
        }
        records.extend(itx);
    }
    Ok(records)
}

/// Batches of indices into `records`, each of a single kind, shuffled across kinds.
pub fn make_batches(records: &[UnifiedRecord], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    for kind in RecordKind::ALL {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].kind == kind).collect();
        idx.shuffle(&mut rng);
        // group by image size so tensors stack
        let mut by_size: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
        for i in idx {
            by_size.entry((records[i].height(), records[i].width())).or_default().push(i);
        }
        for group in by_size.into_values() {
            batches.extend(group.chunks(batch_size).map(<[usize]>::to_vec));
        }
    }
    batches.shuffle(&mut rng);
    batches
}

fn open_metrics(path: &Path, append: bool) -> Result<std::fs::File> {
    Ok(OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?)
}

/// Runs training as configured; checkpoints and metrics go to `out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let dict_path = cfg.dictionary.as_ref().expect("validated");
    let dict = ConceptDictionary::load(dict_path)?;
    let records = load_training_records(cfg, &dict)?;
    if records.is_empty() {
        return Err(Error::Config("no usable training records".into()));
    }
    let label_space: Vec<String> = match &cfg.label_space {
        Some(p) => read_lines(p)?,
        None => records
            .iter()
            .filter(|r| r.kind == RecordKind::Detection)
            .flat_map(|r| r.objects.iter().map(|o| normalize_name(&o.concept)))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let excluded = match &cfg.exclude {
        Some(p) => read_lines(p)?,
        None => Vec::new(),
    };
    let options = ParallelOptions {
        n: cfg.n,
        enrich: cfg.enrich,
        sample_negatives: cfg.negative_sampling,
        detection_negatives: cfg.detection_negatives,
    };
    let builder = ParallelInputBuilder::new(&dict, options, None)
        .with_label_space(label_space)
        .with_excluded(excluded);

    std::fs::create_dir_all(&cfg.out_dir)?;
    let metrics_path = cfg.out_dir.join("metrics.jsonl");
    let (mut trainer, mut step, start_epoch, mut last_ck) = match &cfg.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.meta.dictionary_hash != dict.content_hash() {
                log::warn!("resuming with a different dictionary than the checkpoint was trained on");
            }
            let mut t = Trainer::new(ck.detector, cfg);
            t.visual_opt.import(&ck.extra)?;
            t.text_opt.import(&ck.extra)?;
            (t, ck.meta.step, ck.meta.epoch + 1, Some(p.clone()))
        }
        None => {
            let tok = Tokenizer::from_texts(
                tokenizer_corpus(&dict, &records).iter().map(String::as_str),
                64,
                cfg.model.max_tokens,
            );
            let det = Detector::new(cfg.model.clone(), tok, child_seed(cfg.seed, "init"))?;
            (Trainer::new(det, cfg), 0, 0, None)
        }
    };
    let mut metrics = open_metrics(&metrics_path, cfg.resume.is_some())?;
    let dict_hash = dict.content_hash();
    let trainer_echo = serde_json::to_value(cfg)?;
    let mut losses = Vec::new();
    let mut epochs_completed = start_epoch;
    let mut stop = false;
    for epoch in start_epoch..cfg.epochs {
        let batches = make_batches(&records, cfg.batch_size, child_seed(cfg.seed, &format!("shuffle/{epoch}")));
        for batch in batches {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                stop = true;
                break;
            }
            let recs: Vec<&UnifiedRecord> = batch.iter().map(|&i| &records[i]).collect();
            let inputs = recs
                .iter()
                .map(|r| builder.build(r, child_seed(cfg.seed, &format!("negatives/{epoch}/{}", r.image_id))))
                .collect::<Result<Vec<_>>>()?;
            let factor = cfg.lr_factor(epoch, step);
            let (lr_v, lr_t) = (cfg.lr_visual * factor, cfg.lr_text * factor);
            let res = match trainer.step(&recs, &inputs, lr_v, lr_t) {
                Ok(r) => r,
                Err(Error::NonFinite(msg)) => {
                    log::error!("non-finite value at step {step}: {msg}");
                    return Err(Error::Diverged {
                        step,
                        last_checkpoint: last_ck,
                    });
                }
                Err(e) => return Err(e),
            };
            let row = MetricsRow {
                step,
                epoch,
                l_ali: res.breakdown.l_ali,
                l_cen: res.breakdown.l_cen,
                l_reg: res.breakdown.l_reg,
                total: res.breakdown.total,
                lr_visual: lr_v,
                lr_text: lr_t,
                kind: recs[0].kind,
                num_positives: res.breakdown.num_positives,
            };
            writeln!(metrics, "{}", serde_json::to_string(&row)?)?;
            losses.push(res.breakdown.total);
            step += 1;
        }
        metrics.flush()?;
        if stop {
            break;
        }
        let path = cfg.out_dir.join(format!("checkpoint-epoch{epoch:03}.safetensors"));
        save_checkpoint(
            &path,
            &trainer.detector,
            &dict_hash,
            step,
            epoch,
            Some(trainer_echo.clone()),
            &trainer.optimizer_arrays(),
        )?;
        let mean = recent_mean(&losses, 20);
        log::info!(
            "epoch {epoch} done: step {step}, recent loss {mean:.4}, {:.0}s elapsed",
            started.elapsed().as_secs_f64()
        );
        last_ck = Some(path);
        epochs_completed = epoch + 1;
    }
    let final_path = cfg.out_dir.join("final.safetensors");
    save_checkpoint(
        &final_path,
        &trainer.detector,
        &dict_hash,
        step,
        epochs_completed.saturating_sub(1),
        Some(trainer_echo),
        &trainer.optimizer_arrays(),
    )?;
    Ok(TrainOutcome {
        checkpoint: final_path,
        metrics: metrics_path,
        steps: step,
        epochs_completed,
        losses,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

fn recent_mean(v: &[f64], k: usize) -> f64 {
    let tail = &v[v.len().saturating_sub(k)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}
