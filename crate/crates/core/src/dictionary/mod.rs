//! Concept dictionary: construction from heterogeneous sources, lookup,
//! embedding-based retrieval, definition enrichment and negative sampling.

mod embedding;
mod nlp;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use embedding::{
    EmbeddingProvider, EmbeddingRow, HashedTrigramProvider, HttpProvider, TableProvider,
};
pub(crate) use embedding::post_texts;
pub use nlp::{extract_noun_phrases, is_stopword, noun_lemma};

use crate::error::{Error, Result};
use crate::util::{dot, read_jsonl, sha256_hex};

/// Trims, lowercases and collapses inner whitespace.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptSource {
    Detection,
    Things,
    Imagetext,
}

impl ConceptSource {
    // lower wins when the same name arrives from several sources
    fn priority(self) -> u8 {
        match self {
            ConceptSource::Detection => 0,
            ConceptSource::Things => 1,
            ConceptSource::Imagetext => 2,
        }
    }
}

impl fmt::Display for ConceptSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConceptSource::Detection => "detection",
            ConceptSource::Things => "things",
            ConceptSource::Imagetext => "imagetext",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub name: String,
    pub definition: Option<String>,
    pub source: ConceptSource,
    pub frequency: u64,
}

impl ConceptEntry {
    pub fn new(name: &str, definition: Option<&str>, source: ConceptSource, frequency: u64) -> Self {
        ConceptEntry {
            name: normalize_name(name),
            definition: definition.map(|d| d.trim().to_string()).filter(|d| !d.is_empty()),
            source,
            frequency,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.name.is_empty() {
            return Err("empty concept name".into());
        }
        if self.name != normalize_name(&self.name) {
            return Err(format!("concept name `{}` is not normalized", self.name));
        }
        if matches!(&self.definition, Some(d) if d.trim().is_empty()) {
            return Err(format!("empty definition for `{}`", self.name));
        }
        Ok(())
    }
}

/// Name-to-definition lexicon (an offline WordNet-style extract).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    definitions: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconRow {
    pub name: String,
    pub definition: String,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, definition: &str) {
        let def = definition.trim();
        if !def.is_empty() {
            self.definitions.insert(normalize_name(name), def.to_string());
        }
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.definitions.get(&normalize_name(name)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.definitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.definitions.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rows: Vec<LexiconRow> = read_jsonl(path)?;
        let mut lex = Lexicon::new();
        for row in rows {
            lex.insert(&row.name, &row.definition);
        }
        Ok(lex)
    }

    pub fn rows(&self) -> impl Iterator<Item = LexiconRow> + '_ {
        self.definitions.iter().map(|(n, d)| LexiconRow {
            name: n.clone(),
            definition: d.clone(),
        })
    }
}

impl<S: AsRef<str>, D: AsRef<str>> FromIterator<(S, D)> for Lexicon {
    fn from_iter<I: IntoIterator<Item = (S, D)>>(iter: I) -> Self {
        let mut lex = Lexicon::new();
        for (n, d) in iter {
            lex.insert(n.as_ref(), d.as_ref());
        }
        lex
    }
}

/// Immutable set of concepts keyed by normalized name, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConceptDictionary {
    entries: BTreeMap<String, ConceptEntry>,
}

impl ConceptDictionary {
    pub fn from_entries(entries: impl IntoIterator<Item = ConceptEntry>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for entry in entries {
            entry.validate().map_err(Error::Config)?;
            if map.contains_key(&entry.name) {
                return Err(Error::DuplicateName(entry.name));
            }
            map.insert(entry.name.clone(), entry);
        }
        Ok(ConceptDictionary { entries: map })
    }

    /// Number of concepts (L).
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ConceptEntry> {
        self.entries.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(&normalize_name(name))
    }

    /// Exact match after normalization.
    pub fn lookup(&self, name: &str) -> Option<&ConceptEntry> {
        let key = normalize_name(name);
        if key.is_empty() {
            return None;
        }
        self.entries.get(&key)
    }

    /// Nearest concept by embedding dot product; exact matches short-circuit.
    ///
    /// Ties resolve to the lexicographically smallest name.
    pub fn retrieve_nearest(
        &self,
        name: &str,
        provider: &dyn EmbeddingProvider,
    ) -> Result<RetrievalResult> {
        if self.is_empty() {
            return Err(Error::EmptyDictionary);
        }
        if let Some(entry) = self.lookup(name) {
            return Ok(RetrievalResult::exact(entry));
        }
        let names: Vec<String> = self.entries.keys().cloned().collect();
        let vectors = provider.embed_batch(&names)?;
        let query = provider.embed(&normalize_name(name))?;
        self.argmax(&query, &names, &vectors)
    }

    fn argmax(&self, query: &[f32], names: &[String], vectors: &[Vec<f32>]) -> Result<RetrievalResult> {
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != query.len() {
                return Err(Error::Shape(format!(
                    "embedding for `{}` has dimension {}, query has {}",
                    names[i],
                    v.len(),
                    query.len()
                )));
            }
            let s = dot(query, v);
            // names are sorted, so strict `>` keeps the smallest name on ties
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        let (i, similarity) = best.ok_or(Error::EmptyDictionary)?;
        let entry = &self.entries[&names[i]];
        Ok(RetrievalResult {
            matched_name: entry.name.clone(),
            definition: entry.definition.clone(),
            similarity,
            exact: false,
        })
    }

    /// Draws `k` distinct names uniformly without replacement from the
    /// dictionary minus `exclude`.
    pub fn sample_negatives(
        &self,
        exclude: &BTreeSet<String>,
        k: usize,
        seed: u64,
    ) -> Result<Vec<String>> {
        let pool: Vec<&str> = self
            .names()
            .filter(|n| !exclude.contains(*n))
            .collect();
        sample_from_pool(&pool, k, seed)
    }

    /// Stable content hash of the serialized dictionary.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        sha256_hex(&buf)
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        for entry in self.iter() {
            serde_json::to_writer(&mut *w, entry)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let entry: ConceptEntry =
                serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            entry.validate().map_err(err)?;
            if map.contains_key(&entry.name) {
                return Err(err(format!("duplicate concept name `{}`", entry.name)));
            }
            map.insert(entry.name.clone(), entry);
        }
        Ok(ConceptDictionary { entries: map })
    }
}

/// Samples `k` distinct items uniformly without replacement, in draw order.
pub fn sample_from_pool(pool: &[&str], k: usize, seed: u64) -> Result<Vec<String>> {
    if k > pool.len() {
        return Err(Error::InsufficientNegatives {
            requested: k,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i].to_string())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub matched_name: String,
    pub definition: Option<String>,
    pub similarity: f64,
    pub exact: bool,
}

impl RetrievalResult {
    fn exact(entry: &ConceptEntry) -> Self {
        RetrievalResult {
            matched_name: entry.name.clone(),
            definition: entry.definition.clone(),
            similarity: 1.0,
            exact: true,
        }
    }
}

/// Builds a dictionary from tagged concept streams.
///
/// Detection and things concepts are kept after deduplication. Image-text
/// concepts need `frequency >= min_frequency` and a lexicon definition. A name
/// seen in several sources keeps the highest-priority source
/// (detection > things > imagetext) with the summed frequency.
pub fn build_dictionary<S: AsRef<str>>(
    sources: &[(ConceptSource, Vec<S>)],
    min_frequency: u64,
    lexicon: &Lexicon,
) -> ConceptDictionary {
    let mut counts: BTreeMap<String, (ConceptSource, u64)> = BTreeMap::new();
    for (source, stream) in sources {
        for raw in stream {
            let name = normalize_name(raw.as_ref());
            if name.is_empty() {
                continue;
            }
            let slot = counts.entry(name).or_insert((*source, 0));
            slot.1 += 1;
            if source.priority() < slot.0.priority() {
                slot.0 = *source;
            }
        }
    }
    let entries = counts.into_iter().filter_map(|(name, (source, frequency))| {
        let definition = lexicon.get(&name).map(str::to_string);
        if source == ConceptSource::Imagetext
            && (frequency < min_frequency || definition.is_none())
        {
            return None;
        }
        Some((
            name.clone(),
            ConceptEntry {
                name,
                definition,
                source,
                frequency,
            },
        ))
    });
    ConceptDictionary {
        entries: entries.collect(),
    }
}

/// Formats `name` with its definition: `"{name}, {definition}."`, or
/// `"{name}."` when no definition is available.
pub fn format_enriched(name: &str, definition: Option<&str>) -> String {
    let name = name.trim();
    let def = definition
        .map(|d| d.trim().trim_end_matches('.').trim_end())
        .filter(|d| !d.is_empty());
    match def {
        Some(d) => {
            let mut chars = d.chars();
            let first = chars.next().map(|c| c.to_lowercase().collect::<String>());
            format!("{name}, {}{}.", first.unwrap_or_default(), chars.as_str())
        }
        None => format!("{}.", name.trim_end_matches('.')),
    }
}

/// Enriches `name` with its dictionary definition, falling back to the
/// nearest concept's definition and finally to the bare name.
pub fn enrich(
    dict: &ConceptDictionary,
    name: &str,
    provider: Option<&dyn EmbeddingProvider>,
) -> String {
    if let Some(entry) = dict.lookup(name) {
        return format_enriched(name, entry.definition.as_deref());
    }
    let retrieved = provider.and_then(|p| match dict.retrieve_nearest(name, p) {
        Ok(r) => r.definition,
        Err(e) => {
            log::debug!("retrieval for `{name}` failed: {e}");
            None
        }
    });
    format_enriched(name, retrieved.as_deref())
}

/// Memoizing enricher that embeds the dictionary names once.
pub struct Enricher<'a> {
    dict: &'a ConceptDictionary,
    provider: Option<&'a dyn EmbeddingProvider>,
    names: Vec<String>,
    name_vectors: Mutex<Option<Vec<Vec<f32>>>>,
    cache: Mutex<HashMap<String, String>>,
}

impl<'a> Enricher<'a> {
    pub fn new(dict: &'a ConceptDictionary, provider: Option<&'a dyn EmbeddingProvider>) -> Self {
        Enricher {
            dict,
            provider,
            names: dict.names().map(str::to_string).collect(),
            name_vectors: Mutex::new(None),
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn dictionary(&self) -> &ConceptDictionary {
        self.dict
    }

    pub fn enrich(&self, name: &str) -> String {
        if let Some(hit) = self.cache.lock().unwrap().get(name) {
            return hit.clone();
        }
        let out = match self.dict.lookup(name) {
            Some(entry) => format_enriched(name, entry.definition.as_deref()),
            None => format_enriched(name, self.retrieve(name).as_deref()),
        };
        self.cache
            .lock()
            .unwrap()
            .insert(name.to_string(), out.clone());
        out
    }

    fn retrieve(&self, name: &str) -> Option<String> {
        let provider = self.provider?;
        if self.dict.is_empty() {
            return None;
        }
        let mut guard = self.name_vectors.lock().unwrap();
        if guard.is_none() {
            match provider.embed_batch(&self.names) {
                Ok(v) => *guard = Some(v),
                Err(e) => {
                    log::warn!("embedding dictionary names failed: {e}");
                    return None;
                }
            }
        }
        let vectors = guard.as_ref()?;
        let query = provider.embed(&normalize_name(name)).ok()?;
        self.dict
            .argmax(&query, &self.names, vectors)
            .ok()
            .and_then(|r| r.definition)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexicon() -> Lexicon {
        [
            ("cup", "A small open container usually used for drinking; usually has a handle."),
            ("person", "a human being"),
            ("pagoda", "an Asian temple; usually a pyramidal tower with an upward curving roof"),
            ("stiletto", "A woman's shoe with a thin, high tapering heel."),
            ("toothbrush", "small brush has long handle used to clean teeth"),
        ]
        .into_iter()
        .collect()
    }

    fn small_dict() -> ConceptDictionary {
        build_dictionary(
            &[(ConceptSource::Detection, vec!["cup", "person", "toothbrush", "stiletto"])],
            100,
            &lexicon(),
        )
    }

    #[test]
    fn imagetext_concepts_below_threshold_are_dropped() {
        let captions = vec!["pagoda"; 99];
        let d = build_dictionary(&[(ConceptSource::Imagetext, captions)], 100, &lexicon());
        assert!(d.is_empty());
        let captions = vec!["pagoda"; 100];
        let d = build_dictionary(&[(ConceptSource::Imagetext, captions)], 100, &lexicon());
        assert_eq!(d.lookup("pagoda").unwrap().frequency, 100);
    }

    #[test]
    fn imagetext_concepts_without_definition_are_dropped() {
        let d = build_dictionary(
            &[(ConceptSource::Imagetext, vec!["zorblax"; 500])],
            100,
            &lexicon(),
        );
        assert!(d.lookup("zorblax").is_none());
    }

    #[test]
    fn detection_concepts_are_kept_with_lexicon_definition() {
        let d = build_dictionary(&[(ConceptSource::Detection, vec!["cup"])], 100, &lexicon());
        let cup = d.lookup("cup").unwrap();
        assert_eq!(
            cup.definition.as_deref(),
            Some("A small open container usually used for drinking; usually has a handle.")
        );
        assert_eq!(cup.source, ConceptSource::Detection);
    }

    #[test]
    fn duplicate_names_keep_detection_source_and_merge_frequency() {
        let d = build_dictionary(
            &[
                (ConceptSource::Imagetext, vec!["cup", "cup"]),
                (ConceptSource::Things, vec!["Cup"]),
                (ConceptSource::Detection, vec!["cup "]),
            ],
            100,
            &lexicon(),
        );
        assert_eq!(d.len(), 1);
        let cup = d.lookup("cup").unwrap();
        assert_eq!(cup.source, ConceptSource::Detection);
        assert_eq!(cup.frequency, 4);
    }

    #[test]
    fn empty_sources_give_empty_dictionary() {
        let d = build_dictionary::<&str>(&[], 100, &Lexicon::new());
        assert_eq!(d.len(), 0);
    }

    #[test]
    fn lookup_normalizes_case_and_whitespace() {
        let d = small_dict();
        assert_eq!(d.lookup("Cup").unwrap().name, "cup");
        assert_eq!(d.lookup("  PERSON ").unwrap().name, "person");
        assert!(d.lookup("hoverboard").is_none());
        assert!(d.lookup("").is_none());
    }

    #[test]
    fn retrieval_on_empty_dictionary_fails() {
        let d = ConceptDictionary::default();
        let err = d
            .retrieve_nearest("cup", &HashedTrigramProvider::default())
            .unwrap_err();
        assert_eq!(err.to_string(), "empty dictionary");
    }

    #[test]
    fn exact_retrieval_has_unit_similarity() {
        let r = small_dict()
            .retrieve_nearest("cup", &HashedTrigramProvider::default())
            .unwrap();
        assert!(r.exact);
        assert_eq!(r.similarity, 1.0);
        assert_eq!(r.matched_name, "cup");
    }

    #[test]
    fn retrieval_ties_go_to_the_smallest_name() {
        let d = build_dictionary(
            &[(ConceptSource::Detection, vec!["pear", "apple"])],
            0,
            &Lexicon::new(),
        );
        let p = TableProvider::from_rows(vec![
            ("pear".into(), vec![1.0, 0.0]),
            ("apple".into(), vec![0.0, 1.0]),
            ("fruit".into(), vec![1.0, 1.0]),
        ])
        .unwrap();
        let r = d.retrieve_nearest("fruit", &p).unwrap();
        assert_eq!(r.matched_name, "apple");
        assert!(!r.exact);
    }

    #[test]
    fn enrichment_formats() {
        let d = small_dict();
        assert_eq!(enrich(&d, "person", None), "person, a human being.");
        assert_eq!(
            enrich(&d, "toothbrush", None),
            "toothbrush, small brush has long handle used to clean teeth."
        );
        assert_eq!(
            enrich(&d, "cup", None),
            "cup, a small open container usually used for drinking; usually has a handle."
        );
        assert_eq!(enrich(&ConceptDictionary::default(), "widgetx", None), "widgetx.");
        assert_eq!(
            enrich(&ConceptDictionary::default(), "widgetx", Some(&HashedTrigramProvider::default())),
            "widgetx."
        );
    }

    #[test]
    fn enricher_matches_free_function() {
        let d = small_dict();
        let p = HashedTrigramProvider::default();
        let e = Enricher::new(&d, Some(&p));
        for name in ["person", "cups", "High Heels", "tooth brush"] {
            assert_eq!(e.enrich(name), enrich(&d, name, Some(&p)));
        }
    }

    #[test]
    fn negatives_exclude_positives_and_are_reproducible() {
        let d = build_dictionary(
            &[(ConceptSource::Detection, vec!["a", "b", "c", "d", "e"])],
            0,
            &Lexicon::new(),
        );
        let pos: BTreeSet<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mut got = d.sample_negatives(&pos, 2, 7).unwrap();
        assert_eq!(got, d.sample_negatives(&pos, 2, 7).unwrap());
        got.sort();
        assert_eq!(got, vec!["d", "e"]);
        assert!(d.sample_negatives(&pos, 0, 7).unwrap().is_empty());
        assert!(matches!(
            d.sample_negatives(&pos, 3, 7),
            Err(Error::InsufficientNegatives { requested: 3, available: 2 })
        ));
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dict.jsonl");
        let d = small_dict();
        d.save(&path).unwrap();
        assert_eq!(ConceptDictionary::load(&path).unwrap(), d);

        std::fs::write(&path, "").unwrap();
        assert_eq!(ConceptDictionary::load(&path).unwrap().len(), 0);

        let line = r#"{"name":"cup","definition":null,"source":"detection","frequency":1}"#;
        std::fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        let err = ConceptDictionary::load(&path).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("cup"), "{err}");

        std::fs::write(&path, format!("{line}\nnot json\n")).unwrap();
        let err = ConceptDictionary::load(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }
}
