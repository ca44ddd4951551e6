//! Adaptive training sample selection.
//!
//! For each object the `topk` anchors closest to its center are taken from
//! every pyramid level; the IoU threshold is the mean plus the (sample)
//! standard deviation of those candidates' IoUs. Candidates at or above the
//! threshold whose centers lie strictly inside the object become positives.
//! An anchor claimed by several objects goes to the one with the highest IoU.

use crate::geometry::{BBox, Matrix};

use super::anchors::AnchorSet;

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// `N x M` binary alignment targets.
    pub g: Matrix,
    /// Object index assigned to each anchor.
    pub assigned_object: Vec<Option<usize>>,
    pub positive_mask: Vec<bool>,
    /// Target box for each positive anchor.
    pub reg_targets: Vec<Option<BBox>>,
    /// FCOS-style centerness in `[0, 1]` for positives, 0 elsewhere.
    pub centerness_targets: Vec<f64>,
}

impl AssignmentResult {
    pub fn num_positives(&self) -> usize {
        self.positive_mask.iter().filter(|&&p| p).count()
    }
}

/// `sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b))` from a point to the box sides.
pub fn centerness_target(cx: f64, cy: f64, target: &BBox) -> f64 {
    let l = cx - target.x1;
    let r = target.x2 - cx;
    let t = cy - target.y1;
    let b = target.y2 - cy;
    if l <= 0.0 || r <= 0.0 || t <= 0.0 || b <= 0.0 {
        return 0.0;
    }
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Assigns anchors to `(box, concept index)` objects; `n` is the number of concept rows of G.
pub fn atss_assign(
    anchors: &AnchorSet,
    objects: &[(BBox, usize)],
    n: usize,
    topk: usize,
) -> AssignmentResult {
    let m = anchors.len();
    let centers: Vec<(f64, f64)> = anchors.boxes.iter().map(BBox::center).collect();
    // best (iou, object) claiming each anchor
    let mut claim: Vec<Option<(f64, usize)>> = vec![None; m];

    for (oi, (obj, _)) in objects.iter().enumerate() {
        let (ocx, ocy) = obj.center();
        let mut candidates: Vec<usize> = Vec::new();
        for range in anchors.level_ranges() {
            let mut idx: Vec<usize> = range.collect();
            idx.sort_by(|&a, &b| {
                let da = (centers[a].0 - ocx).powi(2) + (centers[a].1 - ocy).powi(2);
                let db = (centers[b].0 - ocx).powi(2) + (centers[b].1 - ocy).powi(2);
                da.total_cmp(&db).then(a.cmp(&b))
            });
            candidates.extend(idx.into_iter().take(topk));
        }
        let ious: Vec<f64> = candidates.iter().map(|&a| anchors.boxes[a].iou(obj)).collect();
        let (mean, std) = mean_std(&ious);
        let threshold = mean + std;
        for (&a, &iou) in candidates.iter().zip(&ious) {
            if iou >= threshold && obj.contains_point(centers[a].0, centers[a].1) {
                match claim[a] {
                    Some((best, _)) if best >= iou => {}
                    _ => claim[a] = Some((iou, oi)),
                }
            }
        }
    }

    let mut g = Matrix::zeros(n, m);
    let mut assigned_object = vec![None; m];
    let mut positive_mask = vec![false; m];
    let mut reg_targets = vec![None; m];
    let mut centerness_targets = vec![0.0; m];
    for a in 0..m {
        if let Some((_, oi)) = claim[a] {
            let (bbox, concept) = objects[oi];
            if concept >= n {
                continue;
            }
            g.set(concept, a, 1.0);
            assigned_object[a] = Some(oi);
            positive_mask[a] = true;
            reg_targets[a] = Some(bbox);
            centerness_targets[a] = centerness_target(centers[a].0, centers[a].1, &bbox);
        }
    }
    for (oi, _) in objects.iter().enumerate() {
        if !assigned_object.contains(&Some(oi)) {
            log::debug!("object {oi} received no positive anchors");
        }
    }
    AssignmentResult {
        g,
        assigned_object,
        positive_mask,
        reg_targets,
        centerness_targets,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn object_equal_to_one_anchor_gets_exactly_that_anchor() {
        let anchors = AnchorSet::generate(64, 64, &[8], 3.0).unwrap();
        let target = anchors.boxes[27];
        let r = atss_assign(&anchors, &[(target, 0)], 2, 9);
        assert_eq!(r.num_positives(), 1);
        assert!(r.positive_mask[27]);
        assert_eq!(r.g.as_slice().iter().sum::<f64>(), 1.0);
        assert_eq!(r.g.get(0, 27), 1.0);
        assert!((r.centerness_targets[27] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_objects_no_positives() {
        let anchors = AnchorSet::generate(32, 32, &[8, 16], 3.0).unwrap();
        let r = atss_assign(&anchors, &[], 4, 9);
        assert_eq!(r.num_positives(), 0);
        assert!(r.g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positives_lie_inside_and_columns_have_one_entry() {
        let anchors = AnchorSet::generate(128, 128, &[8, 16], 3.0).unwrap();
        let objs = [
            (BBox::new(44.0, 44.0, 84.0, 84.0).unwrap(), 0),
            (BBox::new(60.0, 50.0, 100.0, 90.0).unwrap(), 1),
        ];
        let r = atss_assign(&anchors, &objs, 3, 9);
        assert!(r.num_positives() > 0);
        for a in 0..anchors.len() {
            let col: f64 = (0..3).map(|n| r.g.get(n, a)).sum();
            assert!(col <= 1.0);
            if let Some(oi) = r.assigned_object[a] {
                let (cx, cy) = anchors.boxes[a].center();
                assert!(objs[oi].0.contains_point(cx, cy));
            }
        }
        assert!((0..anchors.len()).all(|a| r.g.get(2, a) == 0.0));
    }

    #[test]
    fn centerness_target_values() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert!((centerness_target(5.0, 5.0, &b) - 1.0).abs() < 1e-12);
        assert!((centerness_target(2.5, 5.0, &b) - (2.5f64 / 7.5).sqrt()).abs() < 1e-12);
        assert_eq!(centerness_target(-1.0, 5.0, &b), 0.0);
    }
}
