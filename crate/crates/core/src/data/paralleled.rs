use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Object, RecordKind, UnifiedRecord};
use crate::dictionary::{
    normalize_name, sample_from_pool, ConceptDictionary, EmbeddingProvider, Enricher,
};
use crate::error::{Error, Result};
use crate::util::child_seed;

/// Where negatives for detection records are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// The detection label space, topped up from the dictionary when exhausted.
    #[default]
    LabelSpace,
    Dictionary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParallelOptions {
    /// Number of concepts per image (N).
    pub n: usize,
    pub enrich: bool,
    pub sample_negatives: bool,
    pub detection_negatives: NegativeSource,
}

impl Default for ParallelOptions {
    fn default() -> Self {
        ParallelOptions {
            n: 150,
            enrich: true,
            sample_negatives: true,
            detection_negatives: NegativeSource::LabelSpace,
        }
    }
}

/// N independent concept texts for one image: positives `[0, k)`, then negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ParalleledInput {
    /// Texts fed to the text encoder (enriched when enabled).
    pub concepts: Vec<String>,
    /// Concept names before enrichment, parallel to `concepts`; pads are `""`.
    pub names: Vec<String>,
    pub positive_count: usize,
    /// Objects whose concept survived truncation.
    pub objects: Vec<Object>,
    /// Index into `concepts` for each entry of `objects`, always `< positive_count`.
    pub concept_index_of_object: Vec<usize>,
    pub kind: RecordKind,
}

impl ParalleledInput {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    /// `(box, concept index)` pairs for assignment.
    pub fn targets(&self) -> Vec<(crate::geometry::BBox, usize)> {
        self.objects
            .iter()
            .zip(&self.concept_index_of_object)
            .map(|(o, &i)| (o.bbox, i))
            .collect()
    }
}

/// Reusable builder holding the dictionary, enrichment cache and label space.
pub struct ParallelInputBuilder<'a> {
    enricher: Enricher<'a>,
    options: ParallelOptions,
    label_space: Vec<String>,
    excluded: BTreeSet<String>,
}

impl<'a> ParallelInputBuilder<'a> {
    pub fn new(
        dict: &'a ConceptDictionary,
        options: ParallelOptions,
        provider: Option<&'a dyn EmbeddingProvider>,
    ) -> Self {
        ParallelInputBuilder {
            enricher: Enricher::new(dict, provider),
            options,
            label_space: Vec::new(),
            excluded: BTreeSet::new(),
        }
    }

    /// Detection label space used when `detection_negatives` is `LabelSpace`.
    pub fn with_label_space(mut self, names: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = names.into_iter().map(|n| normalize_name(&n)).collect();
        self.label_space = set.into_iter().filter(|n| !n.is_empty()).collect();
        self
    }

    /// Names never drawn as negatives (e.g. concepts held out for zero-shot evaluation).
    pub fn with_excluded(mut self, names: impl IntoIterator<Item = String>) -> Self {
        self.excluded = names.into_iter().map(|n| normalize_name(&n)).collect();
        self
    }

    pub fn options(&self) -> &ParallelOptions {
        &self.options
    }

    pub fn enricher(&self) -> &Enricher<'a> {
        &self.enricher
    }

    /// Enriched text for one concept name (or the name itself when enrichment is off).
    pub fn concept_text(&self, name: &str) -> String {
        if name.is_empty() || !self.options.enrich {
            name.to_string()
        } else {
            self.enricher.enrich(name)
        }
    }

    pub fn build(&self, record: &UnifiedRecord, seed: u64) -> Result<ParalleledInput> {
        let n = self.options.n;
        let mut names: Vec<String> = Vec::new();
        let mut objects = Vec::new();
        let mut index = Vec::new();
        for obj in &record.objects {
            let name = normalize_name(&obj.concept);
            let pos = match names.iter().position(|x| *x == name) {
                Some(p) => p,
                None if names.len() < n => {
                    names.push(name);
                    names.len() - 1
                }
                None => continue,
            };
            objects.push(obj.clone());
            index.push(pos);
        }
        let k = names.len();
        let need = n - k;
        if self.options.sample_negatives {
            names.extend(self.negatives(record.kind, &names, need, seed)?);
        } else {
            names.extend(std::iter::repeat_n(String::new(), need));
        }
        let concepts = names.iter().map(|nm| self.concept_text(nm)).collect();
        Ok(ParalleledInput {
            concepts,
            names,
            positive_count: k,
            objects,
            concept_index_of_object: index,
            kind: record.kind,
        })
    }

    fn negatives(
        &self,
        kind: RecordKind,
        positives: &[String],
        need: usize,
        seed: u64,
    ) -> Result<Vec<String>> {
        let mut taken: BTreeSet<String> = positives.iter().cloned().collect();
        taken.extend(self.excluded.iter().cloned());
        let mut out = Vec::with_capacity(need);
        if kind == RecordKind::Detection
            && self.options.detection_negatives == NegativeSource::LabelSpace
        {
            let pool: Vec<&str> = self
                .label_space
                .iter()
                .map(String::as_str)
                .filter(|n| !taken.contains(*n))
                .collect();
            let from_labels = sample_from_pool(&pool, need.min(pool.len()), seed)?;
            taken.extend(from_labels.iter().cloned());
            out.extend(from_labels);
        }
        let rest = need - out.len();
        let pool: Vec<&str> = self
            .enricher
            .dictionary()
            .names()
            .filter(|n| !taken.contains(*n))
            .collect();
        if rest > pool.len() {
            return Err(Error::InsufficientNegatives {
                requested: need,
                available: out.len() + pool.len(),
            });
        }
        out.extend(sample_from_pool(&pool, rest, child_seed(seed, "dictionary"))?);
        Ok(out)
    }
}

/// One-shot convenience wrapper around [`ParallelInputBuilder`].
pub fn build_parallel_input(
    record: &UnifiedRecord,
    dict: &ConceptDictionary,
    options: ParallelOptions,
    provider: Option<&dyn EmbeddingProvider>,
    seed: u64,
) -> Result<ParalleledInput> {
    ParallelInputBuilder::new(dict, options, provider).build(record, seed)
}
