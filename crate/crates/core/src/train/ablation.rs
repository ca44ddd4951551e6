//! Stage fingerprints for the ablation switches. Each stage is hashed on a
//! canonical input that no other switch touches, so flipping one switch
//! must change exactly one fingerprint.

use serde::{Deserialize, Serialize};

use crate::data::{ParallelInputBuilder, ParallelOptions, RecordKind, UnifiedRecord};
use crate::dictionary::ConceptDictionary;
use crate::error::Result;
use crate::pseudo_label::candidate_concepts;
use crate::util::{child_seed, sha256_hex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    pub enrich: bool,
    pub negative_sampling: bool,
    pub label_completion: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        AblationToggles {
            enrich: true,
            negative_sampling: true,
            label_completion: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageHashes {
    /// Candidate concept sets handed to the pseudo-labeler.
    pub label_completion: String,
    /// Padded concept-name lists of annotated records.
    pub negative_sampling: String,
    /// Encoder texts of the annotated records' positive concepts.
    pub enrichment: String,
}

fn digest(lines: impl IntoIterator<Item = String>) -> String {
    let mut buf = String::new();
    for l in lines {
        buf.push_str(&l);
        buf.push('\n');
    }
    sha256_hex(buf.as_bytes())
}

pub fn stage_hashes(
    dict: &ConceptDictionary,
    records: &[UnifiedRecord],
    toggles: AblationToggles,
    n: usize,
    seed: u64,
) -> Result<StageHashes> {
    let label_completion = digest(
        records
            .iter()
            .filter(|r| r.kind == RecordKind::Imagetext)
            .map(|r| {
                let c = candidate_concepts(dict, r.caption.as_deref(), toggles.label_completion);
                format!("{}\t{}", r.image_id, c.join("|"))
            }),
    );

    let annotated: Vec<&UnifiedRecord> = records
        .iter()
        .filter(|r| r.kind != RecordKind::Imagetext)
        .collect();
    let label_space: Vec<String> = annotated
        .iter()
        .filter(|r| r.kind == RecordKind::Detection)
        .flat_map(|r| r.objects.iter().map(|o| o.concept.clone()))
        .collect();

    let sampler = ParallelInputBuilder::new(
        dict,
        ParallelOptions {
            n,
            enrich: false,
            sample_negatives: toggles.negative_sampling,
            ..ParallelOptions::default()
        },
        None,
    )
    .with_label_space(label_space.clone());
    let mut names = Vec::new();
    for r in &annotated {
        let p = sampler.build(r, child_seed(seed, &r.image_id))?;
        names.push(format!("{}\t{}", r.image_id, p.names.join("|")));
    }

    let enricher = ParallelInputBuilder::new(
        dict,
        ParallelOptions {
            n,
            enrich: toggles.enrich,
            sample_negatives: false,
            ..ParallelOptions::default()
        },
        None,
    )
    .with_label_space(label_space);
    let mut texts = Vec::new();
    for r in &annotated {
        let p = enricher.build(r, 0)?;
        texts.push(format!("{}\t{}", r.image_id, p.concepts[..p.positive_count].join("|")));
    }

    Ok(StageHashes {
        label_completion,
        negative_sampling: digest(names),
        enrichment: digest(texts),
    })
}
