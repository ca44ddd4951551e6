//! Python bindings for the concept dictionary, box losses and proposal filter.

use std::path::PathBuf;

use ovdet::dictionary::extract_noun_phrases;
use ovdet::pseudo_label::{Proposal, DEFAULT_MIN_AREA, DEFAULT_OBJECTNESS_THRESHOLD};
use ovdet::{BBox, ConceptDictionary, ConceptSource, Lexicon};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: ovdet::Error) -> PyErr {
    match e {
        ovdet::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn bbox(b: [f64; 4]) -> PyResult<BBox> {
    BBox::new(b[0], b[1], b[2], b[3]).map_err(to_py)
}

/// Generalized IoU of two `[x1, y1, x2, y2]` boxes.
#[pyfunction]
pub fn giou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    ovdet::losses::giou(&bbox(a)?, &bbox(b)?).map_err(to_py)
}

/// Mean `1 - GIoU` over `(predicted, target)` box pairs.
#[pyfunction]
pub fn giou_loss(pairs: Vec<([f64; 4], [f64; 4])>) -> PyResult<f64> {
    let pairs = pairs
        .into_iter()
        .map(|(p, t)| Ok((bbox(p)?, bbox(t)?)))
        .collect::<PyResult<Vec<_>>>()?;
    ovdet::losses::giou_loss(&pairs).map_err(to_py)
}

/// Lemmatized noun phrases of a caption, in order of appearance.
#[pyfunction]
pub fn noun_phrases(caption: &str) -> Vec<String> {
    extract_noun_phrases(caption)
}

/// Keeps `(box, objectness)` proposals that pass both thresholds.
#[pyfunction]
#[pyo3(signature = (proposals, objectness_threshold = DEFAULT_OBJECTNESS_THRESHOLD, min_area = DEFAULT_MIN_AREA))]
pub fn filter_proposals(
    proposals: Vec<([f64; 4], f64)>,
    objectness_threshold: f64,
    min_area: f64,
) -> PyResult<Vec<([f64; 4], f64)>> {
    let proposals = proposals
        .into_iter()
        .map(|(b, objectness)| Ok(Proposal { bbox: bbox(b)?, objectness }))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(ovdet::pseudo_label::filter_proposals(&proposals, objectness_threshold, min_area)
        .into_iter()
        .map(|p| (p.bbox.to_array(), p.objectness))
        .collect())
}

/// Concept dictionary: names with optional definitions.
#[pyclass(name = "Dictionary", frozen)]
pub struct PyDictionary {
    inner: ConceptDictionary,
}

#[pymethods]
impl PyDictionary {
    /// Reads a dictionary from a JSONL file.
    #[staticmethod]
    pub fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ConceptDictionary::load(&path).map_err(to_py)? })
    }

    /// Builds a dictionary from category names, captions and a lexicon.
    #[staticmethod]
    #[pyo3(signature = (detection_names, things_names, captions, lexicon, min_frequency = 100))]
    pub fn build(
        detection_names: Vec<String>,
        things_names: Vec<String>,
        captions: Vec<String>,
        lexicon: Vec<(String, String)>,
        min_frequency: u64,
    ) -> Self {
        let mut lex = Lexicon::new();
        for (name, definition) in &lexicon {
            lex.insert(name, definition);
        }
        let phrases: Vec<String> = captions.iter().flat_map(|c| extract_noun_phrases(c)).collect();
        let sources = [
            (ConceptSource::Detection, detection_names),
            (ConceptSource::Things, things_names),
            (ConceptSource::Imagetext, phrases),
        ];
        Self { inner: ovdet::build_dictionary(&sources, min_frequency, &lex) }
    }

    pub fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    pub fn names(&self) -> Vec<String> {
        self.inner.names().map(str::to_string).collect()
    }

    /// The definition of `name`, or None when absent or undefined.
    pub fn definition(&self, name: &str) -> Option<String> {
        self.inner.lookup(name).and_then(|e| e.definition.clone())
    }

    /// `"{name}, {definition}."`, or `"{name}."` without a definition.
    pub fn enrich(&self, name: &str) -> String {
        ovdet::enrich(&self.inner, name, None)
    }

    pub fn __len__(&self) -> usize {
        self.inner.len()
    }

    pub fn __contains__(&self, name: &str) -> bool {
        self.inner.contains(name)
    }
}

#[pymodule]
fn ovdet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(giou_loss, m)?)?;
    m.add_function(wrap_pyfunction!(noun_phrases, m)?)?;
    m.add_function(wrap_pyfunction!(filter_proposals, m)?)?;
    m.add_class::<PyDictionary>()?;
    Ok(())
}
