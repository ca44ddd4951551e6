use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// One square anchor per feature-map location, grouped level by level in
/// row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub boxes: Vec<BBox>,
    /// Number of anchors on each pyramid level, in order.
    pub level_sizes: Vec<usize>,
}

impl AnchorSet {
    pub fn generate(height: usize, width: usize, strides: &[usize], anchor_scale: f64) -> Result<Self> {
        let coarsest = strides.iter().copied().max().unwrap_or(1);
        if height % coarsest != 0 || width % coarsest != 0 {
            return Err(Error::Stride {
                height,
                width,
                stride: coarsest,
            });
        }
        let mut boxes = Vec::new();
        let mut level_sizes = Vec::new();
        for &stride in strides {
            let (fh, fw) = (height / stride, width / stride);
            let side = anchor_scale * stride as f64;
            for y in 0..fh {
                for x in 0..fw {
                    let cx = (x as f64 + 0.5) * stride as f64;
                    let cy = (y as f64 + 0.5) * stride as f64;
                    boxes.push(BBox::from_center(cx, cy, side, side)?);
                }
            }
            level_sizes.push(fh * fw);
        }
        Ok(AnchorSet { boxes, level_sizes })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Index ranges of each level within `boxes`.
    pub fn level_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.level_sizes
            .iter()
            .map(|&n| {
                let r = start..start + n;
                start += n;
                r
            })
            .collect()
    }
}
