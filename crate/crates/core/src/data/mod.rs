//! Heterogeneous records, their normalization into a single format, the
//! paralleled concept input, tokenization and the synthetic dataset.

mod paralleled;
mod synthetic;
mod tokenizer;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

pub use paralleled::{
    build_parallel_input, NegativeSource, ParallelInputBuilder, ParallelOptions, ParalleledInput,
};
pub use synthetic::{
    generate_synthetic_dataset, write_dataset, KindRatios, PaletteConcept, Renderer, ShapeKind,
    Split, SyntheticDataset, SyntheticRecord, SyntheticSpec,
};
pub use tokenizer::{TokenSeq, Tokenizer, EOS_ID, PAD_ID};

use crate::dictionary::normalize_name;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::util::read_jsonl;

/// `H x W x C` image with values in `[0, 1]`.
pub type Image = Array3<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Detection,
    Grounding,
    Imagetext,
}

impl RecordKind {
    pub const ALL: [RecordKind; 3] = [RecordKind::Detection, RecordKind::Grounding, RecordKind::Imagetext];

    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Detection => "detection",
            RecordKind::Grounding => "grounding",
            RecordKind::Imagetext => "imagetext",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub concept: String,
}

/// One image with its boxes and positive concept names.
#[derive(Debug, Clone)]
pub struct UnifiedRecord {
    pub image_id: String,
    pub image: Arc<Image>,
    pub objects: Vec<Object>,
    pub kind: RecordKind,
    /// Kept for image-text records only; pseudo-labeling falls back to its noun phrases.
    pub caption: Option<String>,
}

impl UnifiedRecord {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRow {
    pub image_id: String,
    pub image_path: String,
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhraseBox {
    pub phrase: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundingRow {
    pub image_id: String,
    pub image_path: String,
    pub caption: String,
    pub phrase_boxes: Vec<PhraseBox>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageTextRow {
    pub image_id: String,
    pub image_path: String,
    pub caption: String,
}

/// A record as it appears in one of the per-kind source files.
#[derive(Debug, Clone)]
pub enum RawRecord {
    Detection(DetectionRow),
    Grounding(GroundingRow),
    ImageText(ImageTextRow),
}

impl RawRecord {
    pub fn kind(&self) -> RecordKind {
        match self {
            RawRecord::Detection(_) => RecordKind::Detection,
            RawRecord::Grounding(_) => RecordKind::Grounding,
            RawRecord::ImageText(_) => RecordKind::Imagetext,
        }
    }

    pub fn image_id(&self) -> &str {
        match self {
            RawRecord::Detection(r) => &r.image_id,
            RawRecord::Grounding(r) => &r.image_id,
            RawRecord::ImageText(r) => &r.image_id,
        }
    }

    pub fn image_path(&self) -> &str {
        match self {
            RawRecord::Detection(r) => &r.image_path,
            RawRecord::Grounding(r) => &r.image_path,
            RawRecord::ImageText(r) => &r.image_path,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Normalized {
    pub record: UnifiedRecord,
    /// Boxes that became degenerate after clipping to the image.
    pub dropped: usize,
}

/// Converts a source record into the unified format, clipping boxes to the image.
pub fn normalize_record(raw: RawRecord, image: Arc<Image>) -> Result<Normalized> {
    let (h, w) = (image.shape()[0] as f64, image.shape()[1] as f64);
    let kind = raw.kind();
    let mut dropped = 0;
    let mut push = |objects: &mut Vec<Object>, b: [f64; 4], name: &str| -> Result<()> {
        let concept = normalize_name(name);
        if concept.is_empty() {
            return Err(Error::Config("empty concept name in record".into()));
        }
        let clipped = BBox {
            x1: b[0],
            y1: b[1],
            x2: b[2],
            y2: b[3],
        }
        .clip(w, h);
        match clipped {
            Some(bbox) => objects.push(Object { bbox, concept }),
            None => dropped += 1,
        }
        Ok(())
    };
    let mut objects = Vec::new();
    let (image_id, caption) = match raw {
        RawRecord::Detection(r) => {
            if r.boxes.len() != r.classes.len() {
                return Err(Error::Shape(format!(
                    "record {}: {} boxes but {} classes",
                    r.image_id,
                    r.boxes.len(),
                    r.classes.len()
                )));
            }
            for (b, c) in r.boxes.iter().zip(&r.classes) {
                push(&mut objects, *b, c)?;
            }
            (r.image_id, None)
        }
        RawRecord::Grounding(r) => {
            for pb in &r.phrase_boxes {
                push(&mut objects, pb.bbox, &pb.phrase)?;
            }
            (r.image_id, None)
        }
        RawRecord::ImageText(r) => (r.image_id, Some(r.caption)),
    };
    if dropped > 0 {
        log::warn!("{image_id}: dropped {dropped} degenerate box(es) after clipping");
    }
    Ok(Normalized {
        record: UnifiedRecord {
            image_id,
            image,
            objects,
            kind,
            caption,
        },
        dropped,
    })
}

pub fn read_raw_records(path: &Path, kind: RecordKind) -> Result<Vec<RawRecord>> {
    Ok(match kind {
        RecordKind::Detection => read_jsonl::<DetectionRow>(path)?
            .into_iter()
            .map(RawRecord::Detection)
            .collect(),
        RecordKind::Grounding => read_jsonl::<GroundingRow>(path)?
            .into_iter()
            .map(RawRecord::Grounding)
            .collect(),
        RecordKind::Imagetext => read_jsonl::<ImageTextRow>(path)?
            .into_iter()
            .map(RawRecord::ImageText)
            .collect(),
    })
}

pub(crate) fn resolve_path(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads a per-kind record file, reading images relative to the file's directory.
pub fn load_records(path: &Path, kind: RecordKind) -> Result<Vec<UnifiedRecord>> {
    let mut out = Vec::new();
    for raw in read_raw_records(path, kind)? {
        let image = load_image(&resolve_path(path, raw.image_path()))?;
        out.push(normalize_record(raw, Arc::new(image))?.record);
    }
    Ok(out)
}

/// Loads an `H x W x C` float image from `.npy` or any format the `image` crate reads.
pub fn load_image(path: &Path) -> Result<Image> {
    let is_npy = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("npy"));
    if is_npy {
        let arr: Array3<f32> =
            ndarray_npy::read_npy(path).map_err(|e| Error::Npy(format!("{}: {e}", path.display())))?;
        return Ok(arr);
    }
    let rgb = image::open(path)?.to_rgb32f();
    let (w, h) = rgb.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw())
        .map_err(|e| Error::Shape(e.to_string()))
}

pub fn save_npy(path: &Path, image: &Image) -> Result<()> {
    ndarray_npy::write_npy(path, image).map_err(|e| Error::Npy(format!("{}: {e}", path.display())))
}
