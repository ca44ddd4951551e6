//! Class-wise AP@0.5 with 11-point interpolation, seen/unseen splits and a
//! random-box reference for the unseen concepts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, UnifiedRecord};
use crate::dictionary::{enrich, normalize_name, ConceptDictionary};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{Detection, Detector};

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub enrich: bool,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// Random boxes per image and unseen concept for the reference baseline.
    pub baseline_boxes: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            enrich: true,
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
            baseline_boxes: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptReport {
    /// `None` when the concept has no ground truth.
    pub ap: Option<f64>,
    pub num_ground_truth: usize,
    pub num_detections: usize,
    pub seen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfigEcho {
    pub checkpoint: Option<String>,
    pub dataset: Option<String>,
    pub concepts: Vec<String>,
    /// Exact encoder text for each concept.
    pub concept_texts: Vec<String>,
    pub options: EvalOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_concept: BTreeMap<String, ConceptReport>,
    pub mean_ap: f64,
    pub seen_mean_ap: Option<f64>,
    pub unseen_mean_ap: Option<f64>,
    /// AP of uniformly random boxes on the unseen concepts.
    pub unseen_random_baseline_ap: Option<f64>,
    pub num_images: usize,
    pub num_detections: usize,
    pub config: EvalConfigEcho,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Ranked detections of one concept: `(image index, box, score)`.
pub type ScoredBoxes = Vec<(usize, BBox, f64)>;

/// Greedy VOC matching in score order; returns `(precision, recall)` points.
pub fn precision_recall(detections: &ScoredBoxes, ground_truth: &[Vec<BBox>]) -> Vec<(f64, f64)> {
    let total: usize = ground_truth.iter().map(Vec::len).sum();
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].2.total_cmp(&detections[a].2).then(a.cmp(&b)));
    let mut used: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(order.len());
    for k in order {
        let (img, bbox, _) = &detections[k];
        let gts = ground_truth.get(*img).map(Vec::as_slice).unwrap_or(&[]);
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            let iou = bbox.iou(g);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, iou)) if iou >= IOU_THRESHOLD && !used[*img][j] => {
                used[*img][j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        let recall = if total == 0 { 0.0 } else { tp as f64 / total as f64 };
        curve.push((tp as f64 / (tp + fp) as f64, recall));
    }
    curve
}

/// 11-point interpolated AP: mean over `r in {0, 0.1, ..., 1}` of the best
/// precision at recall `>= r`.
pub fn eleven_point_ap(curve: &[(f64, f64)]) -> f64 {
    (0..=10)
        .map(|i| {
            let r = i as f64 / 10.0;
            curve
                .iter()
                .filter(|(_, rec)| *rec >= r - 1e-12)
                .map(|(p, _)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// AP of one concept; `None` without ground truth.
pub fn average_precision(detections: &ScoredBoxes, ground_truth: &[Vec<BBox>]) -> Option<f64> {
    if ground_truth.iter().all(Vec::is_empty) {
        return None;
    }
    Some(eleven_point_ap(&precision_recall(detections, ground_truth)))
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores precomputed detections (one list per record) against the records' objects.
pub fn score_detections(
    records: &[UnifiedRecord],
    detections: &[Vec<Detection>],
    concepts: &[String],
    unseen: &BTreeSet<String>,
) -> Result<(BTreeMap<String, ConceptReport>, f64, Option<f64>, Option<f64>)> {
    if detections.len() != records.len() {
        return Err(Error::Shape(format!(
            "{} detection lists for {} records",
            detections.len(),
            records.len()
        )));
    }
    let mut per_concept = BTreeMap::new();
    let (mut all, mut seen_aps, mut unseen_aps) = (Vec::new(), Vec::new(), Vec::new());
    for c in concepts {
        let gt: Vec<Vec<BBox>> = records
            .iter()
            .map(|r| {
                r.objects
                    .iter()
                    .filter(|o| normalize_name(&o.concept) == *c)
                    .map(|o| o.bbox)
                    .collect()
            })
            .collect();
        let dets: ScoredBoxes = detections
            .iter()
            .enumerate()
            .flat_map(|(i, d)| {
                d.iter()
                    .filter(|x| x.concept == *c)
                    .map(move |x| (i, x.bbox, x.score))
            })
            .collect();
        let ap = average_precision(&dets, &gt);
        let is_seen = !unseen.contains(c);
        if let Some(a) = ap {
            all.push(a);
            if is_seen {
                seen_aps.push(a);
            } else {
                unseen_aps.push(a);
            }
        }
        per_concept.insert(
            c.clone(),
            ConceptReport {
                ap,
                num_ground_truth: gt.iter().map(Vec::len).sum(),
                num_detections: dets.len(),
                seen: is_seen,
            },
        );
    }
    Ok((per_concept, mean(&all).unwrap_or(0.0), mean(&seen_aps), mean(&unseen_aps)))
}

/// Uniformly random boxes with uniform scores for every unseen concept.
pub fn random_baseline(
    records: &[UnifiedRecord],
    unseen: &[String],
    boxes_per_image: usize,
    seed: u64,
) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut aps = Vec::new();
    for c in unseen {
        let gt: Vec<Vec<BBox>> = records
            .iter()
            .map(|r| r.objects.iter().filter(|o| normalize_name(&o.concept) == *c).map(|o| o.bbox).collect())
            .collect();
        let mut dets = ScoredBoxes::new();
        for (i, r) in records.iter().enumerate() {
            let (w, h) = (r.width() as f64, r.height() as f64);
            for _ in 0..boxes_per_image {
                let (xa, xb) = (rng.gen_range(0.0..w), rng.gen_range(0.0..w));
                let (ya, yb) = (rng.gen_range(0.0..h), rng.gen_range(0.0..h));
                if let Ok(b) = BBox::new(xa.min(xb), ya.min(yb), xa.max(xb), ya.max(yb)) {
                    dets.push((i, b, rng.gen::<f64>()));
                }
            }
        }
        if let Some(ap) = average_precision(&dets, &gt) {
            aps.push(ap);
        }
    }
    mean(&aps)
}

/// Encoder texts for `concepts`: enriched through the dictionary when asked,
/// falling back to the bare name for unknown concepts.
pub fn concept_texts(concepts: &[String], dict: Option<&ConceptDictionary>, enrich_texts: bool) -> Vec<String> {
    concepts
        .iter()
        .map(|c| match (enrich_texts, dict) {
            (true, Some(d)) => {
                if !d.contains(c) {
                    log::info!("`{c}` is not in the dictionary; using the bare name");
                }
                enrich(d, c, None)
            }
            (true, None) => {
                log::info!("no dictionary given; using bare name for `{c}`");
                c.clone()
            }
            (false, _) => c.clone(),
        })
        .collect()
}

/// Detections for every record against the full concept list.
pub fn detect_all(
    detector: &Detector,
    records: &[UnifiedRecord],
    concepts: &[String],
    texts: &[String],
    opts: &EvalOptions,
) -> Result<Vec<Vec<Detection>>> {
    records
        .iter()
        .map(|r| {
            let image: &Image = &r.image;
            detector.detect(
                image,
                texts,
                concepts,
                opts.score_threshold,
                opts.nms_iou,
                opts.max_detections,
            )
        })
        .collect()
}

/// Builds the report from precomputed detections.
pub fn report_from_detections(
    records: &[UnifiedRecord],
    detections: &[Vec<Detection>],
    concepts: &[String],
    texts: &[String],
    unseen: &[String],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let unseen_set: BTreeSet<String> = unseen.iter().map(|c| normalize_name(c)).collect();
    let (per_concept, mean_ap, seen_mean_ap, unseen_mean_ap) =
        score_detections(records, detections, concepts, &unseen_set)?;
    let unseen_list: Vec<String> = concepts.iter().filter(|c| unseen_set.contains(*c)).cloned().collect();
    Ok(EvalReport {
        per_concept,
        mean_ap,
        seen_mean_ap,
        unseen_mean_ap,
        unseen_random_baseline_ap: random_baseline(records, &unseen_list, opts.baseline_boxes, opts.seed),
        num_images: records.len(),
        num_detections: detections.iter().map(Vec::len).sum(),
        config: EvalConfigEcho {
            checkpoint: None,
            dataset: None,
            concepts: concepts.to_vec(),
            concept_texts: texts.to_vec(),
            options: opts.clone(),
        },
    })
}

/// Runs the detector on every record with the full concept list and scores
/// the detections.
pub fn evaluate(
    detector: &Detector,
    records: &[UnifiedRecord],
    concepts: &[String],
    unseen: &[String],
    dict: Option<&ConceptDictionary>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if concepts.is_empty() {
        return Err(Error::Config("empty concept list".into()));
    }
    let concepts: Vec<String> = concepts.iter().map(|c| normalize_name(c)).collect();
    let texts = concept_texts(&concepts, dict, opts.enrich);
    let detections = detect_all(detector, records, &concepts, &texts, opts)?;
    report_from_detections(records, &detections, &concepts, &texts, unseen, opts)
}

/// Precision-recall curves of every concept drawn into a PNG.
pub fn plot_pr_curves(
    records: &[UnifiedRecord],
    detections: &[Vec<Detection>],
    concepts: &[String],
    path: &Path,
) -> Result<()> {
    const SIZE: u32 = 400;
    const PAD: u32 = 30;
    let mut img = image::RgbImage::from_pixel(SIZE, SIZE, image::Rgb([255, 255, 255]));
    let span = (SIZE - 2 * PAD) as f64;
    let to_px = |p: f64, r: f64| -> (u32, u32) {
        let x = PAD + (r.clamp(0.0, 1.0) * span) as u32;
        let y = SIZE - PAD - (p.clamp(0.0, 1.0) * span) as u32;
        (x.min(SIZE - 1), y.min(SIZE - 1))
    };
    for i in 0..=(SIZE - 2 * PAD) {
        img.put_pixel(PAD + i, SIZE - PAD, image::Rgb([0, 0, 0]));
        img.put_pixel(PAD, PAD + i, image::Rgb([0, 0, 0]));
    }
    for (ci, c) in concepts.iter().enumerate() {
        let gt: Vec<Vec<BBox>> = records
            .iter()
            .map(|r| r.objects.iter().filter(|o| normalize_name(&o.concept) == *c).map(|o| o.bbox).collect())
            .collect();
        let dets: ScoredBoxes = detections
            .iter()
            .enumerate()
            .flat_map(|(i, d)| d.iter().filter(|x| x.concept == *c).map(move |x| (i, x.bbox, x.score)))
            .collect();
        let hue = ci as f64 / concepts.len().max(1) as f64;
        let color = image::Rgb([
            (255.0 * (1.0 - hue)) as u8,
            (255.0 * (hue * 2.0).min(1.0) * 0.7) as u8,
            (255.0 * hue) as u8,
        ]);
        for (p, r) in precision_recall(&dets, &gt) {
            let (x, y) = to_px(p, r);
            img.put_pixel(x, y, color);
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> BBox {
        BBox::new(x, x, x + 10.0, x + 10.0).unwrap()
    }

    #[test]
    fn perfect_detections_score_one() {
        let gt = vec![vec![b(0.0), b(20.0)], vec![b(5.0)]];
        let dets = vec![(0, b(0.0), 0.9), (0, b(20.0), 0.8), (1, b(5.0), 0.7)];
        assert_eq!(average_precision(&dets, &gt), Some(1.0));
    }

    #[test]
    fn no_detections_score_zero_and_no_ground_truth_is_none() {
        assert_eq!(average_precision(&vec![], &[vec![b(0.0)]]), Some(0.0));
        assert_eq!(average_precision(&vec![(0, b(0.0), 1.0)], &[vec![]]), None);
    }

    #[test]
    fn duplicate_detection_counts_as_false_positive() {
        let gt = vec![vec![b(0.0)]];
        let curve = precision_recall(&vec![(0, b(0.0), 0.9), (0, b(0.0), 0.8)], &gt);
        assert_eq!(curve, vec![(1.0, 1.0), (0.5, 1.0)]);
    }

    #[test]
    fn eleven_point_interpolation() {
        // one of two objects found at top rank, second never found
        let curve = vec![(1.0, 0.5), (0.5, 0.5)];
        assert!((eleven_point_ap(&curve) - 6.0 / 11.0).abs() < 1e-12);
    }
}
