//! Pseudo-labeling of image-text records: proposal filtering, prompt
//! formatting, cached concept embeddings and per-proposal argmax scoring
//! against either the full dictionary or the caption's noun phrases.

use std::collections::HashMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};
use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Object, RecordKind, UnifiedRecord};
use crate::dictionary::{
    extract_noun_phrases, post_texts, ConceptDictionary, EmbeddingProvider, HashedTrigramProvider,
};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::util::{dot, l2_normalize, read_jsonl, sha256_hex};

pub const DEFAULT_OBJECTNESS_THRESHOLD: f64 = 0.3;
pub const DEFAULT_MIN_AREA: f64 = 6000.0;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.24;
pub const CROP_SIZE: u32 = 224;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub objectness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub concept: String,
    pub score: f64,
}

/// Keeps proposals with `objectness >= objectness_threshold` and `area >= min_area`.
pub fn filter_proposals(
    proposals: &[Proposal],
    objectness_threshold: f64,
    min_area: f64,
) -> Vec<Proposal> {
    proposals
        .iter()
        .filter(|p| p.objectness >= objectness_threshold && p.bbox.area() >= min_area)
        .copied()
        .collect()
}

pub fn format_prompt(category: &str) -> Result<String> {
    let c = category.trim();
    if c.is_empty() {
        return Err(Error::EmptyCategory);
    }
    Ok(format!("a photo of a {c}."))
}

/// A proposal region handed to a [`RegionScorer`].
pub struct RegionQuery<'a> {
    pub image_id: &'a str,
    pub bbox: BBox,
    /// The region cropped and resized to `CROP_SIZE x CROP_SIZE`.
    pub crop: &'a Image,
}

/// Dual encoder for region crops and text prompts; both outputs are unit vectors.
pub trait RegionScorer: Send + Sync {
    /// Identifier used as part of the embedding cache key.
    fn id(&self) -> String;

    fn embed_region(&self, region: &RegionQuery<'_>) -> Result<Vec<f32>>;

    fn embed_text(&self, prompt: &str) -> Result<Vec<f32>>;
}

/// Prompt embeddings for every dictionary concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEmbeddingTable {
    pub dictionary_hash: String,
    pub scorer_id: String,
    pub names: Vec<String>,
    pub vectors: Vec<Vec<f32>>,
}

impl ConceptEmbeddingTable {
    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vectors[i].as_slice())
    }
}

fn cache_path(dir: &Path, dict_hash: &str, scorer_id: &str) -> PathBuf {
    let key = sha256_hex(format!("{dict_hash}\n{scorer_id}").as_bytes());
    dir.join(format!("concept-embeddings-{}.json", &key[..16]))
}

/// Embeds `a photo of a {concept}.` for every concept, reusing an on-disk
/// cache keyed by the dictionary hash and the scorer id.
pub fn precompute_concept_embeddings(
    dict: &ConceptDictionary,
    scorer: &dyn RegionScorer,
    cache_dir: Option<&Path>,
) -> Result<ConceptEmbeddingTable> {
    if dict.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    let dictionary_hash = dict.content_hash();
    let scorer_id = scorer.id();
    let path = cache_dir.map(|d| cache_path(d, &dictionary_hash, &scorer_id));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        let cached: ConceptEmbeddingTable = serde_json::from_slice(&std::fs::read(p)?)?;
        if cached.dictionary_hash == dictionary_hash && cached.scorer_id == scorer_id {
            return Ok(cached);
        }
    }
    let mut names = Vec::with_capacity(dict.len());
    let mut vectors = Vec::with_capacity(dict.len());
    for name in dict.names() {
        let prompt = format_prompt(name)?;
        let mut v = scorer.embed_text(&prompt).map_err(|e| Error::ConceptEmbedding {
            concept: name.to_string(),
            source: Box::new(e),
        })?;
        l2_normalize(&mut v);
        names.push(name.to_string());
        vectors.push(v);
    }
    let table = ConceptEmbeddingTable {
        dictionary_hash,
        scorer_id,
        names,
        vectors,
    };
    if let Some(p) = path {
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&p, serde_json::to_vec(&table)?)?;
    }
    Ok(table)
}

fn to_rgb_buffer(image: &Image) -> Result<ImageBuffer<Rgb<f32>, Vec<f32>>> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let data: Vec<f32> = image.iter().copied().collect();
    ImageBuffer::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))
}

/// Crops `bbox` (expanded to whole pixels) and resizes it bilinearly to `size x size`.
pub fn crop_and_resize(image: &Image, bbox: &BBox, size: u32) -> Result<Image> {
    let (h, w, _) = image.dim();
    let x1 = (bbox.x1.floor().max(0.0) as usize).min(w.saturating_sub(1));
    let y1 = (bbox.y1.floor().max(0.0) as usize).min(h.saturating_sub(1));
    let x2 = (bbox.x2.ceil() as usize).clamp(x1 + 1, w);
    let y2 = (bbox.y2.ceil() as usize).clamp(y1 + 1, h);
    let crop = image.slice(s![y1..y2, x1..x2, ..]).to_owned();
    let buf = to_rgb_buffer(&crop)?;
    let resized = image::imageops::resize(&buf, size, size, FilterType::Triangle);
    Image::from_shape_vec((size as usize, size as usize, 3), resized.into_raw())
        .map_err(|e| Error::Shape(e.to_string()))
}

/// The image-level inputs of [`label_image`].
pub struct LabelInput<'a> {
    pub image_id: &'a str,
    pub image: &'a Image,
    /// Caption used for candidate phrases when the dictionary is not used.
    pub caption: Option<&'a str>,
}

/// Assigns each proposal its best-scoring concept and drops scores below
/// `score_threshold`. With `use_dictionary` every dictionary concept is a
/// candidate (label completion); otherwise only the caption's noun phrases.
pub fn label_image(
    input: &LabelInput<'_>,
    proposals: &[Proposal],
    table: &ConceptEmbeddingTable,
    scorer: &dyn RegionScorer,
    score_threshold: f64,
    use_dictionary: bool,
) -> Result<Vec<PseudoLabel>> {
    let (names, vectors): (Vec<String>, Vec<Vec<f32>>) = if use_dictionary {
        (table.names.clone(), table.vectors.clone())
    } else {
        let phrases = input.caption.map(extract_noun_phrases).unwrap_or_default();
        let mut vecs = Vec::with_capacity(phrases.len());
        for p in &phrases {
            let mut v = scorer.embed_text(&format_prompt(p)?)?;
            l2_normalize(&mut v);
            vecs.push(v);
        }
        (phrases, vecs)
    };
    if names.is_empty() {
        log::warn!("{}: empty candidate set, no pseudo labels", input.image_id);
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for p in proposals {
        let crop = crop_and_resize(input.image, &p.bbox, CROP_SIZE)?;
        let mut region = scorer.embed_region(&RegionQuery {
            image_id: input.image_id,
            bbox: p.bbox,
            crop: &crop,
        })?;
        l2_normalize(&mut region);
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in vectors.iter().enumerate() {
            let s = dot(&region, v);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        if let Some((i, score)) = best {
            // embeddings are f32, so the cut is taken at that precision
            if score as f32 >= score_threshold as f32 {
                out.push(PseudoLabel {
                    bbox: p.bbox,
                    concept: names[i].clone(),
                    score,
                });
            }
        }
    }
    Ok(out)
}

/// Class-agnostic sliding-window proposals scored by how well each window
/// frames the saturated (non-background) pixels around it.
pub fn sliding_window_proposals(image: &Image, sizes: &[usize], stride: usize) -> Vec<Proposal> {
    let (h, w, c) = image.dim();
    let fg: Vec<f32> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let px: Vec<f32> = (0..c).map(|k| image[[y, x, k]]).collect();
            let hi = px.iter().cloned().fold(f32::MIN, f32::max);
            let lo = px.iter().cloned().fold(f32::MAX, f32::min);
            if hi - lo > 0.25 { 1.0 } else { 0.0 }
        })
        .collect();
    // summed-area table
    let mut sat = vec![0f32; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] = fg[y * w + x] + sat[y * (w + 1) + x + 1]
                + sat[(y + 1) * (w + 1) + x]
                - sat[y * (w + 1) + x];
        }
    }
    let sum = |x1: usize, y1: usize, x2: usize, y2: usize| -> f32 {
        sat[y2 * (w + 1) + x2] - sat[y1 * (w + 1) + x2] - sat[y2 * (w + 1) + x1] + sat[y1 * (w + 1) + x1]
    };
    let mut out = Vec::new();
    for &size in sizes {
        if size > h || size > w || size == 0 {
            continue;
        }
        let margin = size / 4;
        for y in (0..=h - size).step_by(stride.max(1)) {
            for x in (0..=w - size).step_by(stride.max(1)) {
                let inside = sum(x, y, x + size, y + size);
                let outer = sum(
                    x.saturating_sub(margin),
                    y.saturating_sub(margin),
                    (x + size + margin).min(w),
                    (y + size + margin).min(h),
                );
                if inside <= 0.0 {
                    continue;
                }
                let area = (size * size) as f32;
                let objectness = 2.0 * inside / (area + outer);
                if let Ok(bbox) = BBox::new(x as f64, y as f64, (x + size) as f64, (y + size) as f64) {
                    out.push(Proposal {
                        bbox,
                        objectness: objectness.clamp(0.0, 1.0) as f64,
                    });
                }
            }
        }
    }
    out.sort_by(|a, b| b.objectness.total_cmp(&a.objectness));
    out.truncate(40);
    out
}

/// Tight boxes around 4-connected blobs of same-colored saturated pixels.
/// Objectness is the blob's fill of its box, floored at 0.5 so discs and
/// triangles survive the usual threshold.
pub fn component_proposals(image: &Image, min_pixels: usize) -> Vec<Proposal> {
    let (h, w, c) = image.dim();
    if c < 3 {
        return Vec::new();
    }
    let label: Vec<Option<&'static str>> = (0..h * w)
        .map(|i| {
            let px = [image[[i / w, i % w, 0]], image[[i / w, i % w, 1]], image[[i / w, i % w, 2]]];
            StubScorer::is_colored(px).then(|| StubScorer::nearest_color(px))
        })
        .collect();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        let Some(color) = label[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let (mut x0, mut y0, mut x1, mut y1, mut n) = (w, h, 0, 0, 0usize);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            n += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut visit = |j: usize| {
                if !seen[j] && label[j] == Some(color) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if n < min_pixels.max(1) {
            continue;
        }
        let area = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
        if let Ok(bbox) = BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64) {
            out.push(Proposal {
                bbox,
                objectness: (n as f64 / area).max(0.5),
            });
        }
    }
    out.sort_by(|a, b| b.objectness.total_cmp(&a.objectness));
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProposalRow {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub objectness: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoLabelRow {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub concept: String,
    pub score: f64,
}

pub fn read_proposals(path: &Path) -> Result<HashMap<String, Vec<Proposal>>> {
    let mut out: HashMap<String, Vec<Proposal>> = HashMap::new();
    for row in read_jsonl::<ProposalRow>(path)? {
        out.entry(row.image_id).or_default().push(Proposal {
            bbox: row.bbox,
            objectness: row.objectness,
        });
    }
    Ok(out)
}

/// Fills image-text records with their pseudo labels. The records keep the
/// image-text kind so the regression loss stays masked for them.
pub fn attach_pseudo_labels(records: &mut [UnifiedRecord], rows: &[PseudoLabelRow]) -> usize {
    let mut by_id: HashMap<&str, Vec<&PseudoLabelRow>> = HashMap::new();
    for r in rows {
        by_id.entry(r.image_id.as_str()).or_default().push(r);
    }
    let mut n = 0;
    for rec in records.iter_mut().filter(|r| r.kind == RecordKind::Imagetext) {
        if let Some(labels) = by_id.get(rec.image_id.as_str()) {
            rec.objects = labels
                .iter()
                .map(|l| Object {
                    bbox: l.bbox,
                    concept: l.concept.clone(),
                })
                .collect();
            n += labels.len();
        }
    }
    n
}

/// Thresholds and candidate mode for [`pseudo_label_records`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelOptions {
    pub objectness_threshold: f64,
    pub min_area: f64,
    pub score_threshold: f64,
    /// Label completion: score against every dictionary concept instead of
    /// only the caption's noun phrases.
    pub use_dictionary: bool,
}

impl Default for PseudoLabelOptions {
    fn default() -> Self {
        PseudoLabelOptions {
            objectness_threshold: DEFAULT_OBJECTNESS_THRESHOLD,
            min_area: DEFAULT_MIN_AREA,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            use_dictionary: false,
        }
    }
}

/// Candidate concept names for one record under the given mode.
pub fn candidate_concepts(
    dict: &ConceptDictionary,
    caption: Option<&str>,
    use_dictionary: bool,
) -> Vec<String> {
    if use_dictionary {
        dict.names().map(str::to_string).collect()
    } else {
        caption.map(extract_noun_phrases).unwrap_or_default()
    }
}

/// Pseudo-labels every image-text record that has proposals.
pub fn pseudo_label_records(
    records: &[UnifiedRecord],
    proposals: &HashMap<String, Vec<Proposal>>,
    dict: &ConceptDictionary,
    scorer: &dyn RegionScorer,
    opts: &PseudoLabelOptions,
    cache_dir: Option<&Path>,
) -> Result<Vec<PseudoLabelRow>> {
    let table = precompute_concept_embeddings(dict, scorer, cache_dir)?;
    let mut out = Vec::new();
    for rec in records.iter().filter(|r| r.kind == RecordKind::Imagetext) {
        let Some(props) = proposals.get(&rec.image_id) else {
            continue;
        };
        let kept = filter_proposals(props, opts.objectness_threshold, opts.min_area);
        let labels = label_image(
            &LabelInput {
                image_id: &rec.image_id,
                image: &rec.image,
                caption: rec.caption.as_deref(),
            },
            &kept,
            &table,
            scorer,
            opts.score_threshold,
            opts.use_dictionary,
        )?;
        out.extend(labels.into_iter().map(|l| PseudoLabelRow {
            image_id: rec.image_id.clone(),
            bbox: l.bbox,
            concept: l.concept,
            score: l.score,
        }));
    }
    Ok(out)
}

/// Builds a scorer from `stub`, `file:PATH`, `http:URL` or `model:CHECKPOINT`.
pub fn scorer_from_spec(spec: &str) -> Result<Box<dyn RegionScorer>> {
    if spec == "stub" {
        return Ok(Box::new(StubScorer::default()));
    }
    match spec.split_once(':') {
        Some(("file", path)) => Ok(Box::new(TableScorer::load(Path::new(path))?)),
        Some(("http", rest)) => {
            let url = if rest.starts_with("//") { format!("http:{rest}") } else { rest.to_string() };
            Ok(Box::new(HttpScorer::new(url, Duration::from_secs(30))))
        }
        Some(("model", path)) => {
            let ck = crate::model::load_checkpoint(Path::new(path))?;
            let size = 4 * ck.detector.config().coarsest_stride();
            Ok(Box::new(crate::model::ModelScorer::new(ck.detector, size, path)?))
        }
        _ => Err(Error::Config(format!(
            "unknown scorer `{spec}`; expected stub, file:PATH, http:URL or model:CHECKPOINT"
        ))),
    }
}

fn region_key(image_id: &str, b: &BBox) -> String {
    format!("{image_id}|{:.1},{:.1},{:.1},{:.1}", b.x1, b.y1, b.x2, b.y2)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScorerFixtureRow {
    Text { text: String, vector: Vec<f32> },
    Region {
        image_id: String,
        #[serde(rename = "box")]
        bbox: BBox,
        vector: Vec<f32>,
    },
}

/// Table-backed scorer: prompt vectors by text, region vectors by `(image_id, box)`.
#[derive(Debug, Clone, Default)]
pub struct TableScorer {
    id: String,
    texts: HashMap<String, Vec<f32>>,
    regions: HashMap<String, Vec<f32>>,
    calls: std::sync::Arc<AtomicUsize>,
}

impl TableScorer {
    pub fn new(id: impl Into<String>) -> Self {
        TableScorer {
            id: id.into(),
            ..Default::default()
        }
    }

    pub fn with_text(mut self, prompt: &str, mut v: Vec<f32>) -> Self {
        l2_normalize(&mut v);
        self.texts.insert(prompt.to_string(), v);
        self
    }

    /// Vector for the `a photo of a {concept}.` prompt.
    pub fn with_concept(self, concept: &str, v: Vec<f32>) -> Self {
        let prompt = format_prompt(concept).expect("nonempty concept");
        self.with_text(&prompt, v)
    }

    pub fn with_region(mut self, image_id: &str, bbox: &BBox, mut v: Vec<f32>) -> Self {
        l2_normalize(&mut v);
        self.regions.insert(region_key(image_id, bbox), v);
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut s = TableScorer::new(format!("file:{}", sha256_hex(&std::fs::read(path)?)));
        for row in read_jsonl::<ScorerFixtureRow>(path)? {
            s = match row {
                ScorerFixtureRow::Text { text, vector } => s.with_text(&text, vector),
                ScorerFixtureRow::Region { image_id, bbox, vector } => {
                    s.with_region(&image_id, &bbox, vector)
                }
            };
        }
        Ok(s)
    }

    /// Number of text embeddings served so far.
    pub fn text_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl RegionScorer for TableScorer {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn embed_region(&self, region: &RegionQuery<'_>) -> Result<Vec<f32>> {
        self.regions
            .get(&region_key(region.image_id, &region.bbox))
            .cloned()
            .ok_or_else(|| Error::Provider(format!("no region vector for {}", region_key(region.image_id, &region.bbox))))
    }

    fn embed_text(&self, prompt: &str) -> Result<Vec<f32>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.texts
            .get(prompt)
            .cloned()
            .ok_or_else(|| Error::Provider(format!("no text vector for `{prompt}`")))
    }
}

const NAMED_COLORS: [(&str, [f32; 3]); 9] = [
    ("red", [0.9, 0.15, 0.15]),
    ("green", [0.15, 0.8, 0.2]),
    ("blue", [0.2, 0.3, 0.95]),
    ("yellow", [0.95, 0.9, 0.15]),
    ("purple", [0.6, 0.2, 0.8]),
    ("orange", [0.95, 0.55, 0.1]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("white", [0.95, 0.95, 0.95]),
    ("black", [0.05, 0.05, 0.05]),
];

/// Deterministic scorer without learned weights: text through hashed
/// trigrams, regions through the trigram vector of a guessed `{color} {shape}`
/// name.
#[derive(Debug, Clone)]
pub struct StubScorer {
    text: HashedTrigramProvider,
}

impl Default for StubScorer {
    fn default() -> Self {
        StubScorer {
            text: HashedTrigramProvider::new(256),
        }
    }
}

impl StubScorer {
    fn is_colored(px: [f32; 3]) -> bool {
        let hi = px.iter().cloned().fold(f32::MIN, f32::max);
        let lo = px.iter().cloned().fold(f32::MAX, f32::min);
        hi - lo > 0.25
    }

    fn nearest_color(mean: [f32; 3]) -> &'static str {
        let d = |c: &[f32; 3]| c.iter().zip(&mean).map(|(x, y)| (x - y).powi(2)).sum::<f32>();
        NAMED_COLORS
            .iter()
            .min_by(|a, b| d(&a.1).total_cmp(&d(&b.1)))
            .map(|(n, _)| *n)
            .unwrap_or("background")
    }

    pub fn dominant_color(crop: &Image) -> Option<&'static str> {
        let (h, w, c) = crop.dim();
        if c < 3 {
            return None;
        }
        let mut acc = [0f64; 3];
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                let px = [crop[[y, x, 0]], crop[[y, x, 1]], crop[[y, x, 2]]];
                if Self::is_colored(px) {
                    for k in 0..3 {
                        acc[k] += px[k] as f64;
                    }
                    n += 1;
                }
            }
        }
        if n * 20 < h * w {
            return None;
        }
        Some(Self::nearest_color(acc.map(|a| (a / n as f64) as f32)))
    }

    /// Guesses a flat shape from how much of its own bounding box the
    /// dominant-color blob fills: squares fill it, discs about π/4,
    /// triangles about half.
    pub fn dominant_shape(crop: &Image, color: &str) -> Option<&'static str> {
        let (h, w, c) = crop.dim();
        if c < 3 {
            return None;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                let px = [crop[[y, x, 0]], crop[[y, x, 1]], crop[[y, x, 2]]];
                if Self::is_colored(px) && Self::nearest_color(px) == color {
                    n += 1;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        if n == 0 {
            return None;
        }
        let fill = n as f64 / ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
        Some(match fill {
            f if f > 0.9 => "square",
            f if f > 0.65 => "circle",
            _ => "triangle",
        })
    }
}

impl RegionScorer for StubScorer {
    fn id(&self) -> String {
        "stub-trigram-v1".into()
    }

    fn embed_region(&self, region: &RegionQuery<'_>) -> Result<Vec<f32>> {
        let word = match Self::dominant_color(region.crop) {
            Some(color) => match Self::dominant_shape(region.crop, color) {
                Some(shape) => format!("{color} {shape}"),
                None => color.to_string(),
            },
            None => "background".to_string(),
        };
        self.text.embed(&format_prompt(&word)?)
    }

    fn embed_text(&self, prompt: &str) -> Result<Vec<f32>> {
        self.text.embed(prompt)
    }
}

/// Remote scorer: `POST {base}/text` with `{"texts": [...]}` and
/// `POST {base}/image` with PNG bytes; both answer `{"vectors": [[...]]}`.
#[derive(Debug, Clone)]
pub struct HttpScorer {
    base: String,
    agent: ureq::Agent,
}

impl HttpScorer {
    pub fn new(base: impl Into<String>, timeout: Duration) -> Self {
        HttpScorer {
            base: base.into().trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

#[derive(Deserialize)]
struct VectorsBody {
    vectors: Vec<Vec<f32>>,
}

impl RegionScorer for HttpScorer {
    fn id(&self) -> String {
        format!("http:{}", self.base)
    }

    fn embed_region(&self, region: &RegionQuery<'_>) -> Result<Vec<f32>> {
        let buf = to_rgb_buffer(region.crop)?;
        let rgb8 = image::DynamicImage::ImageRgb32F(buf).to_rgb8();
        let mut png = Vec::new();
        rgb8.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)?;
        let url = format!("{}/image", self.base);
        let resp = self
            .agent
            .post(&url)
            .set("Content-Type", "image/png")
            .send_bytes(&png)
            .map_err(|e| Error::Provider(format!("POST {url}: {e}")))?;
        if resp.status() != 200 {
            return Err(Error::Provider(format!("POST {url}: status {}", resp.status())));
        }
        let body: VectorsBody = resp
            .into_json()
            .map_err(|e| Error::Provider(format!("POST {url}: bad response body: {e}")))?;
        let mut v = body
            .vectors
            .into_iter()
            .next()
            .ok_or_else(|| Error::Provider(format!("POST {url}: no vectors")))?;
        l2_normalize(&mut v);
        Ok(v)
    }

    fn embed_text(&self, prompt: &str) -> Result<Vec<f32>> {
        let mut v = post_texts(&self.agent, &format!("{}/text", self.base), &[prompt.to_string()])?;
        Ok(v.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prop(obj: f64, x2: f64, y2: f64) -> Proposal {
        Proposal {
            bbox: BBox::new(0.0, 0.0, x2, y2).unwrap(),
            objectness: obj,
        }
    }

    #[test]
    fn filter_boundaries_keep_at_equality() {
        let ps = [
            prop(0.29, 100.0, 100.0),
            prop(0.30, 100.0, 60.0),
            prop(0.9, 5999.0, 1.0),
            prop(0.9, 100.0, 100.0),
        ];
        let kept = filter_proposals(&ps, DEFAULT_OBJECTNESS_THRESHOLD, DEFAULT_MIN_AREA);
        assert_eq!(kept, vec![ps[1], ps[3]]);
        assert_eq!(filter_proposals(&kept, 0.3, 6000.0), kept);
    }

    #[test]
    fn prompt_template() {
        assert_eq!(format_prompt("cat").unwrap(), "a photo of a cat.");
        assert_eq!(format_prompt("herding dog").unwrap(), "a photo of a herding dog.");
        assert_eq!(format_prompt("").unwrap_err().to_string(), "empty category");
    }

    #[test]
    fn crop_resize_has_fixed_size_and_preserves_constant_color() {
        let mut img = Image::zeros((20, 30, 3));
        img.slice_mut(s![5..15, 10..20, ..]).fill(0.5);
        let crop = crop_and_resize(&img, &BBox::new(10.0, 5.0, 20.0, 15.0).unwrap(), 224).unwrap();
        assert_eq!(crop.dim(), (224, 224, 3));
        assert!(crop.iter().all(|v| (v - 0.5).abs() < 1e-5));
    }

    #[test]
    fn sliding_windows_find_a_bright_square() {
        let mut img = Image::from_elem((64, 64, 3), 0.2);
        img.slice_mut(s![20..44, 20..44, 0]).fill(0.9);
        let props = sliding_window_proposals(&img, &[16, 24, 32], 4);
        let best = props[0];
        assert!(best.bbox.iou(&BBox::new(20.0, 20.0, 44.0, 44.0).unwrap()) > 0.7, "{best:?}");
        assert!(props.iter().all(|p| (0.0..=1.0).contains(&p.objectness)));
    }

    #[test]
    fn stub_scorer_prefers_the_matching_color() {
        let mut img = Image::from_elem((224, 224, 3), 0.2);
        img.slice_mut(s![.., .., 0]).fill(0.9);
        let s = StubScorer::default();
        let q = RegionQuery {
            image_id: "x",
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            crop: &img,
        };
        let r = s.embed_region(&q).unwrap();
        let red = s.embed_text("a photo of a red circle.").unwrap();
        let blue = s.embed_text("a photo of a blue circle.").unwrap();
        assert!(dot(&r, &red) > dot(&r, &blue));
    }
}
