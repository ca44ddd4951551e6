use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Matrix};
use crate::losses::{sigmoid, BoxCoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub concept: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeParams {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub image_width: f64,
    pub image_height: f64,
}

/// Greedy NMS over `(box, score)` candidates; returns kept indices in score order.
pub fn nms(candidates: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].1.total_cmp(&candidates[a].1).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep
            .iter()
            .all(|&k| candidates[k].0.iou(&candidates[i].0) <= iou_threshold)
        {
            keep.push(i);
        }
    }
    keep
}

/// Dense-head decoding: `score = sigmoid(S[n][m]) * sigmoid(centerness[m])`,
/// boxes from anchors and deltas clipped to the image, class-wise NMS.
pub fn decode_predictions(
    scores: &Matrix,
    box_deltas: &[[f64; 4]],
    anchors: &[BBox],
    centerness_logits: &[f64],
    concept_names: &[String],
    params: &DecodeParams,
) -> Result<Vec<Detection>> {
    let (n, m) = scores.shape();
    if box_deltas.len() != m || anchors.len() != m || centerness_logits.len() != m || concept_names.len() != n {
        return Err(Error::Shape(format!(
            "scores {n}x{m}, deltas {}, anchors {}, centerness {}, names {}",
            box_deltas.len(),
            anchors.len(),
            centerness_logits.len(),
            concept_names.len()
        )));
    }
    let coder = BoxCoder::default();
    let boxes: Vec<Option<BBox>> = anchors
        .iter()
        .zip(box_deltas)
        .map(|(a, d)| coder.decode(a, *d).clip(params.image_width, params.image_height))
        .collect();
    let quality: Vec<f64> = centerness_logits.iter().map(|&c| sigmoid(c)).collect();
    let mut out = Vec::new();
    for c in 0..n {
        if concept_names[c].is_empty() {
            continue;
        }
        let mut cands = Vec::new();
        for a in 0..m {
            let Some(b) = boxes[a] else { continue };
            let s = sigmoid(scores.get(c, a)) * quality[a];
            if s >= params.score_threshold {
                cands.push((b, s));
            }
        }
        for k in nms(&cands, params.nms_iou) {
            out.push(Detection {
                bbox: cands[k].0,
                concept: concept_names[c].clone(),
                score: cands[k].1,
            });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(params.max_detections);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> DecodeParams {
        DecodeParams {
            score_threshold: 0.3,
            nms_iou: 0.5,
            max_detections: 100,
            image_width: 64.0,
            image_height: 64.0,
        }
    }

    #[test]
    fn nms_keeps_one_of_two_identical_boxes() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(nms(&[(b, 0.8), (b, 0.9)], 0.5), vec![1]);
    }

    #[test]
    fn single_confident_anchor_yields_one_detection() {
        let anchors: Vec<BBox> = (0..3)
            .map(|i| BBox::new(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 16.0, 16.0).unwrap())
            .collect();
        let s = Matrix::from_rows(&[vec![-30.0, 30.0, -30.0]]).unwrap();
        let det = decode_predictions(&s, &[[0.0; 4]; 3], &anchors, &[30.0; 3], &["cup".into()], &params()).unwrap();
        assert_eq!(det.len(), 1);
        assert_eq!(det[0].bbox, anchors[1]);
        assert!(det[0].score > 0.99);
    }

    #[test]
    fn low_scores_give_nothing() {
        let anchors = vec![BBox::new(0.0, 0.0, 8.0, 8.0).unwrap()];
        let s = Matrix::from_rows(&[vec![-5.0]]).unwrap();
        let det = decode_predictions(&s, &[[0.0; 4]], &anchors, &[0.0], &["cup".into()], &params()).unwrap();
        assert!(det.is_empty());
    }
}
