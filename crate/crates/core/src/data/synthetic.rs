//! Desk-scale synthetic dataset: colored shapes on a noisy background with
//! exact boxes, split across detection, grounding and image-text kinds.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    save_npy, DetectionRow, GroundingRow, Image, ImageTextRow, Object, PhraseBox, RecordKind,
    UnifiedRecord,
};
use crate::dictionary::{
    build_dictionary, extract_noun_phrases, normalize_name, ConceptDictionary, ConceptSource,
    Lexicon, LexiconRow,
};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::util::{child_seed, write_jsonl};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Ring,
    Cross,
    Star,
    Diamond,
}

impl ShapeKind {
    /// Whether the point `(u, v)` of the unit square lies inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            ShapeKind::Circle => r2 <= 0.25,
            ShapeKind::Square => (0.06..=0.94).contains(&u) && (0.06..=0.94).contains(&v),
            ShapeKind::Triangle => v >= 0.05 && v <= 0.95 && du.abs() <= 0.5 * (v - 0.05) / 0.9,
            ShapeKind::Ring => (0.09..=0.25).contains(&r2),
            ShapeKind::Cross => {
                (du.abs() <= 0.17 && dv.abs() <= 0.5) || (dv.abs() <= 0.17 && du.abs() <= 0.5)
            }
            ShapeKind::Diamond => du.abs() + dv.abs() <= 0.5,
            ShapeKind::Star => {
                let theta = dv.atan2(du) + std::f64::consts::FRAC_PI_2;
                let radius = 0.5 * (0.6 + 0.4 * (5.0 * theta).cos());
                r2.sqrt() <= radius
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Renderer {
    pub shape: ShapeKind,
    /// RGB in `[0, 1]`.
    pub color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteConcept {
    pub name: String,
    pub definition: String,
    pub renderer: Renderer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindRatios {
    pub detection: f64,
    pub grounding: f64,
    pub imagetext: f64,
}

impl Default for KindRatios {
    fn default() -> Self {
        KindRatios {
            detection: 0.6,
            grounding: 0.25,
            imagetext: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_images: usize,
    pub image_size: usize,
    pub palette: Vec<PaletteConcept>,
    /// Palette names that never appear in training images.
    pub holdout: Vec<String>,
    /// Dictionary-only concepts, never rendered.
    pub distractors: Vec<LexiconRow>,
    pub kind_ratios: KindRatios,
    /// Fraction of images reserved for the evaluation split.
    pub eval_fraction: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: usize,
    pub max_object_size: usize,
    pub min_frequency: u64,
    /// Chance that a detection or grounding training image also shows one
    /// unannotated held-out object. Image-text images never do.
    pub unannotated_holdout_rate: f64,
    pub seed: u64,
}

const COLORS: [(&str, [f32; 3]); 4] = [
    ("red", [0.9, 0.15, 0.15]),
    ("green", [0.15, 0.8, 0.2]),
    ("blue", [0.2, 0.3, 0.95]),
    ("yellow", [0.95, 0.9, 0.15]),
];

const SHAPES: [(&str, ShapeKind, &str); 3] = [
    ("circle", ShapeKind::Circle, "a round flat shape"),
    ("square", ShapeKind::Square, "a flat shape with four equal straight sides"),
    ("triangle", ShapeKind::Triangle, "a flat shape with three straight sides"),
];

impl SyntheticSpec {
    /// Four colors by three shapes; one held-out combination per color while
    /// every held-out color and shape still occurs among the training concepts.
    pub fn default_palette() -> Vec<PaletteConcept> {
        let mut out = Vec::new();
        for (cname, color) in COLORS {
            for (sname, shape, sdef) in SHAPES {
                out.push(PaletteConcept {
                    name: format!("{cname} {sname}"),
                    definition: format!("{sdef} that is colored {cname}"),
                    renderer: Renderer { shape, color },
                });
            }
        }
        out
    }

    pub fn default_holdout() -> Vec<String> {
        ["red circle", "green square", "blue triangle", "yellow circle"]
            .map(String::from)
            .to_vec()
    }

    pub fn default_distractors() -> Vec<LexiconRow> {
        [
            ("person", "a human being"),
            ("toothbrush", "small brush has long handle used to clean teeth"),
            ("cup", "A small open container usually used for drinking; usually has a handle."),
            ("stiletto", "A woman's shoe with a thin, high tapering heel."),
            ("rollerblade", "Trademark an in line skate."),
            ("pagoda", "an Asian temple; usually a pyramidal tower with an upward curving roof"),
            ("tree", "a tall perennial woody plant having a main trunk and branches"),
            ("car", "a motor vehicle with four wheels usually propelled by an internal combustion engine"),
            ("motorcycle", "a motor vehicle with two wheels and a strong frame"),
            ("dog", "a domesticated carnivorous mammal kept as a pet"),
            ("bicycle", "a wheeled vehicle that has two wheels and is moved by foot pedals"),
            ("purple star", "a flat shape with five points that is colored purple"),
            ("orange ring", "a flat band shaped like a circle that is colored orange"),
            ("white cross", "a flat shape with two crossing bars that is colored white"),
            ("black diamond", "a flat shape with four equal sides standing on a corner that is colored black"),
            ("cyan star", "a flat shape with five points that is colored cyan"),
        ]
        .into_iter()
        .map(|(n, d)| LexiconRow {
            name: n.into(),
            definition: d.into(),
        })
        .collect()
    }

    pub fn training_concepts(&self) -> Vec<String> {
        let held: BTreeSet<String> = self.holdout.iter().map(|h| normalize_name(h)).collect();
        self.palette
            .iter()
            .map(|p| normalize_name(&p.name))
            .filter(|n| !held.contains(n))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.palette.is_empty() && self.num_images > 0 {
            return Err(Error::Config("palette must not be empty".into()));
        }
        if self.training_concepts().is_empty() && self.num_images > 0 {
            return Err(Error::Config("every palette concept is held out".into()));
        }
        if !(0.0..=1.0).contains(&self.unannotated_holdout_rate) {
            return Err(Error::Config("unannotated_holdout_rate must lie in [0, 1]".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config("need 1 <= min_objects <= max_objects".into()));
        }
        if self.min_object_size < 3
            || self.min_object_size > self.max_object_size
            || self.max_object_size + 2 > self.image_size
        {
            return Err(Error::Config("object sizes must fit inside the image".into()));
        }
        if !(0.0..=1.0).contains(&self.eval_fraction) {
            return Err(Error::Config("eval_fraction must be in [0, 1]".into()));
        }
        let r = self.kind_ratios;
        if [r.detection, r.grounding, r.imagetext].iter().any(|x| *x < 0.0)
            || r.detection + r.grounding + r.imagetext <= 0.0
        {
            return Err(Error::Config("kind ratios must be nonnegative and not all zero".into()));
        }
        Ok(())
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_images: 500,
            image_size: 64,
            palette: Self::default_palette(),
            holdout: Self::default_holdout(),
            distractors: Self::default_distractors(),
            kind_ratios: KindRatios::default(),
            eval_fraction: 0.2,
            min_objects: 1,
            max_objects: 4,
            min_object_size: 12,
            max_object_size: 28,
            min_frequency: 5,
            unannotated_holdout_rate: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct SyntheticRecord {
    /// The record as a training pipeline sees it (image-text records have no objects).
    pub record: UnifiedRecord,
    pub split: Split,
    /// Every rendered object, regardless of kind, including unannotated ones.
    pub ground_truth: Vec<Object>,
    pub caption: String,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub records: Vec<SyntheticRecord>,
    pub dictionary: ConceptDictionary,
    pub lexicon: Lexicon,
    pub training_concepts: Vec<String>,
    pub holdout: Vec<String>,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SyntheticRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn train_records(&self) -> Vec<UnifiedRecord> {
        self.split(Split::Train).map(|r| r.record.clone()).collect()
    }

    /// Evaluation records in detection form.
    pub fn eval_records(&self) -> Vec<UnifiedRecord> {
        self.split(Split::Eval).map(|r| r.record.clone()).collect()
    }

    pub fn palette_names(&self) -> Vec<String> {
        let mut all = self.training_concepts.clone();
        all.extend(self.holdout.iter().cloned());
        all
    }
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let base: f32 = rng.gen_range(0.05..0.35);
    let tint: [f32; 3] = [rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03)];
    let slope: f32 = rng.gen_range(-0.1..0.1);
    let mut img = Image::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let ramp = slope * (x as f32 / size as f32 - 0.5);
            let noise: f32 = rng.gen_range(-0.04..0.04);
            for c in 0..3 {
                img[[y, x, c]] = (base + tint[c] + ramp + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Paints the shape into `img` and returns the tight box of painted pixels.
fn paint(
    img: &mut Image,
    renderer: &Renderer,
    x0: usize,
    y0: usize,
    side: usize,
    rng: &mut ChaCha8Rng,
) -> Option<BBox> {
    let jitter: [f32; 3] = [rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08)];
    let color: Vec<f32> = (0..3).map(|c| (renderer.color[c] + jitter[c]).clamp(0.0, 1.0)).collect();
    let (mut xmin, mut ymin, mut xmax, mut ymax) = (usize::MAX, usize::MAX, 0, 0);
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            let u = (x - x0) as f64 + 0.5;
            let v = (y - y0) as f64 + 0.5;
            if renderer.shape.contains(u / side as f64, v / side as f64) {
                for c in 0..3 {
                    img[[y, x, c]] = color[c];
                }
                xmin = xmin.min(x);
                ymin = ymin.min(y);
                xmax = xmax.max(x);
                ymax = ymax.max(y);
            }
        }
    }
    if xmin == usize::MAX {
        return None;
    }
    BBox::new(xmin as f64, ymin as f64, (xmax + 1) as f64, (ymax + 1) as f64).ok()
}

fn pick_kind(rng: &mut ChaCha8Rng, r: &KindRatios) -> RecordKind {
    let total = r.detection + r.grounding + r.imagetext;
    let x = rng.gen::<f64>() * total;
    if x < r.detection {
        RecordKind::Detection
    } else if x < r.detection + r.grounding {
        RecordKind::Grounding
    } else {
        RecordKind::Imagetext
    }
}

fn caption_for(names: &[String]) -> String {
    let phrases: Vec<String> = names.iter().map(|n| format!("a {n}")).collect();
    match phrases.len() {
        0 => String::new(),
        1 => format!("{} on a plain background", phrases[0]),
        _ => {
            let (last, init) = phrases.split_last().unwrap();
            format!("{} and {}", init.join(", "), last)
        }
    }
}

/// Renders the dataset and its companion dictionary; deterministic per seed.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let training = spec.training_concepts();
    let held: Vec<String> = spec.holdout.iter().map(|h| normalize_name(h)).collect();
    let num_eval = (spec.num_images as f64 * spec.eval_fraction).round() as usize;
    let num_train = spec.num_images - num_eval;
    let mut records = Vec::with_capacity(spec.num_images);
    let mut caption_phrases: Vec<String> = Vec::new();

    for i in 0..spec.num_images {
        let split = if i < num_train { Split::Train } else { Split::Eval };
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(spec.seed, &format!("image/{i}")));
        let kind = match split {
            Split::Eval => RecordKind::Detection,
            Split::Train => pick_kind(&mut rng, &spec.kind_ratios),
        };
        let is_held = |p: &&PaletteConcept| held.contains(&normalize_name(&p.name));
        let allowed: Vec<&PaletteConcept> = spec
            .palette
            .iter()
            .filter(|p| split == Split::Eval || !is_held(p))
            .collect();
        let hidden_pool: Vec<&PaletteConcept> = spec.palette.iter().filter(is_held).collect();
        let sneak = split == Split::Train
            && kind != RecordKind::Imagetext
            && !hidden_pool.is_empty()
            && rng.gen_bool(spec.unannotated_holdout_rate);
        let mut img = background(&mut rng, spec.image_size);
        let want = rng.gen_range(spec.min_objects..=spec.max_objects);
        let mut placed: Vec<(BBox, usize)> = Vec::new();
        let mut objects = Vec::new();
        let mut hidden = Vec::new();
        for slot in 0..want {
            let concealed = sneak && slot == 0;
            let concept = if concealed {
                hidden_pool[rng.gen_range(0..hidden_pool.len())]
            } else {
                allowed[rng.gen_range(0..allowed.len())]
            };
            let mut ok = None;
            for _ in 0..50 {
                let side = rng.gen_range(spec.min_object_size..=spec.max_object_size);
                let x0 = rng.gen_range(1..spec.image_size - side);
                let y0 = rng.gen_range(1..spec.image_size - side);
                let cell = BBox::new(x0 as f64 - 1.0, y0 as f64 - 1.0, (x0 + side + 1) as f64, (y0 + side + 1) as f64)?;
                if placed.iter().all(|(b, _)| b.intersection(&cell) == 0.0) {
                    ok = Some((x0, y0, side, cell));
                    break;
                }
            }
            let Some((x0, y0, side, cell)) = ok else {
                log::debug!("image {i}: placed {} of {want} objects", objects.len());
                break;
            };
            if let Some(bbox) = paint(&mut img, &concept.renderer, x0, y0, side, &mut rng) {
                placed.push((cell, side));
                objects.push(Object {
                    bbox,
                    concept: normalize_name(&concept.name),
                });
                hidden.push(concealed);
            }
        }
        let ground_truth = objects.clone();
        let objects: Vec<Object> = objects
            .into_iter()
            .zip(&hidden)
            .filter(|(_, h)| !**h)
            .map(|(o, _)| o)
            .collect();
        let names: Vec<String> = objects.iter().map(|o| o.concept.clone()).collect();
        let caption = caption_for(&names);
        let record_objects = match kind {
            RecordKind::Detection => objects.clone(),
            RecordKind::Grounding => objects
                .iter()
                .map(|o| Object {
                    bbox: o.bbox,
                    concept: format!("a {}", o.concept),
                })
                .collect(),
            RecordKind::Imagetext => {
                caption_phrases.extend(extract_noun_phrases(&caption));
                Vec::new()
            }
        };
        records.push(SyntheticRecord {
            record: UnifiedRecord {
                image_id: format!("{}{i:05}", if split == Split::Eval { "eval" } else { "img" }),
                image: Arc::new(img),
                objects: record_objects,
                kind,
                caption: (kind == RecordKind::Imagetext).then(|| caption.clone()),
            },
            split,
            ground_truth,
            caption,
        });
    }

    let mut lexicon: Lexicon = spec
        .palette
        .iter()
        .map(|p| (p.name.as_str(), p.definition.as_str()))
        .collect();
    for d in &spec.distractors {
        lexicon.insert(&d.name, &d.definition);
    }
    let mut things: Vec<String> = held.clone();
    things.extend(spec.distractors.iter().map(|d| normalize_name(&d.name)));
    let dictionary = build_dictionary(
        &[
            (ConceptSource::Detection, training.clone()),
            (ConceptSource::Things, things),
            (ConceptSource::Imagetext, caption_phrases),
        ],
        spec.min_frequency,
        &lexicon,
    );
    Ok(SyntheticDataset {
        records,
        dictionary,
        lexicon,
        training_concepts: training,
        holdout: held,
    })
}

#[derive(Serialize)]
struct ManifestRow<'a> {
    image_id: &'a str,
    image_path: String,
    split: Split,
    kind: RecordKind,
    caption: &'a str,
    objects: &'a [Object],
}

#[derive(Serialize)]
struct ProposalRow<'a> {
    image_id: &'a str,
    #[serde(rename = "box")]
    bbox: BBox,
    objectness: f64,
}

/// Writes images as NPY plus per-kind record files, a manifest, the companion
/// dictionary, lexicon, name lists, captions and stub proposals.
pub fn write_dataset(ds: &SyntheticDataset, spec: &SyntheticSpec, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out.join("images"))?;
    let mut det = Vec::new();
    let mut grd = Vec::new();
    let mut itx = Vec::new();
    let mut eval = Vec::new();
    let mut manifest = Vec::new();
    let mut proposals = Vec::new();
    for r in &ds.records {
        let rel = format!("images/{}.npy", r.record.image_id);
        save_npy(&out.join(&rel), &r.record.image)?;
        manifest.push(ManifestRow {
            image_id: &r.record.image_id,
            image_path: rel.clone(),
            split: r.split,
            kind: r.record.kind,
            caption: &r.caption,
            objects: &r.ground_truth,
        });
        let det_row = |objs: &[Object]| DetectionRow {
            image_id: r.record.image_id.clone(),
            image_path: rel.clone(),
            boxes: objs.iter().map(|o| o.bbox.to_array()).collect(),
            classes: objs.iter().map(|o| o.concept.clone()).collect(),
        };
        match (r.split, r.record.kind) {
            (Split::Eval, _) => eval.push(det_row(&r.ground_truth)),
            (Split::Train, RecordKind::Detection) => det.push(det_row(&r.record.objects)),
            (Split::Train, RecordKind::Grounding) => grd.push(GroundingRow {
                image_id: r.record.image_id.clone(),
                image_path: rel.clone(),
                caption: r.caption.clone(),
                phrase_boxes: r
                    .record
                    .objects
                    .iter()
                    .map(|o| PhraseBox {
                        phrase: o.concept.clone(),
                        bbox: o.bbox.to_array(),
                    })
                    .collect(),
            }),
            (Split::Train, RecordKind::Imagetext) => {
                itx.push(ImageTextRow {
                    image_id: r.record.image_id.clone(),
                    image_path: rel.clone(),
                    caption: r.caption.clone(),
                });
                for p in crate::pseudo_label::component_proposals(&r.record.image, 16) {
                    proposals.push((r.record.image_id.clone(), p));
                }
            }
        }
    }
    write_jsonl(&out.join("detection.jsonl"), &det)?;
    write_jsonl(&out.join("grounding.jsonl"), &grd)?;
    write_jsonl(&out.join("imagetext.jsonl"), &itx)?;
    write_jsonl(&out.join("eval.jsonl"), &eval)?;
    write_jsonl(&out.join("manifest.jsonl"), &manifest)?;
    write_jsonl(
        &out.join("proposals.jsonl"),
        proposals.iter().map(|(id, p)| ProposalRow {
            image_id: id,
            bbox: p.bbox,
            objectness: p.objectness,
        }),
    )?;
    ds.dictionary.save(&out.join("dict.jsonl"))?;
    write_jsonl(&out.join("lexicon.jsonl"), ds.lexicon.rows())?;
    let lines = |v: &[String]| v.iter().map(|s| format!("{s}\n")).collect::<String>();
    std::fs::write(out.join("detection_names.txt"), lines(&ds.training_concepts))?;
    let mut things = ds.holdout.clone();
    things.extend(spec.distractors.iter().map(|d| normalize_name(&d.name)));
    std::fs::write(out.join("things_names.txt"), lines(&things))?;
    std::fs::write(out.join("holdout_names.txt"), lines(&ds.holdout))?;
    std::fs::write(out.join("concepts.txt"), lines(&ds.palette_names()))?;
    let captions: Vec<String> = ds
        .split(Split::Train)
        .filter(|r| r.record.kind == RecordKind::Imagetext)
        .map(|r| r.caption.clone())
        .collect();
    std::fs::write(out.join("captions.txt"), lines(&captions))?;
    std::fs::write(out.join("spec.json"), serde_json::to_string_pretty(spec)?)?;
    Ok(())
}
