//! Single-file checkpoints: safetensors arrays plus a JSON metadata block.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::{Detector, ModelConfig};
use crate::data::Tokenizer;
use crate::error::{Error, Result};

const FORMAT: &str = "ovdet-checkpoint-v1";

/// Flattened arrays keyed by name: `(shape, row-major values)`.
pub type ArrayMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub dictionary_hash: String,
    pub step: u64,
    pub epoch: usize,
    /// Opaque trainer state (schedule position, config echo).
    #[serde(default)]
    pub trainer: Option<serde_json::Value>,
}

pub struct Checkpoint {
    pub detector: Detector,
    pub meta: CheckpointMeta,
    /// Arrays stored alongside the parameters, e.g. optimizer moments.
    pub extra: ArrayMap,
}

fn ck_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

/// Writes parameters (`visual/*`, `text/*`), `extra` arrays (`extra/*`) and
/// metadata atomically to `path`.
pub fn save_checkpoint(
    path: &Path,
    detector: &Detector,
    dictionary_hash: &str,
    step: u64,
    epoch: usize,
    trainer: Option<serde_json::Value>,
    extra: &ArrayMap,
) -> Result<()> {
    let mut arrays: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
    let mut put = |prefix: &str, map: ArrayMap| {
        for (k, (shape, data)) in map {
            let bytes = data.iter().flat_map(|f| f.to_le_bytes()).collect();
            arrays.insert(format!("{prefix}/{k}"), (shape, bytes));
        }
    };
    put("visual", detector.visual_params().snapshot()?);
    put("text", detector.text_params().snapshot()?);
    put("extra", extra.clone());
    let views = arrays
        .iter()
        .map(|(k, (shape, bytes))| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (k.clone(), v))
                .map_err(|e| ck_err(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = CheckpointMeta {
        config: detector.config().clone(),
        tokenizer: detector.tokenizer().clone(),
        dictionary_hash: dictionary_hash.to_string(),
        step,
        epoch,
        trainer,
    };
    let info: HashMap<String, String> = [
        ("format".to_string(), FORMAT.to_string()),
        ("meta".to_string(), serde_json::to_string(&meta)?),
    ]
    .into_iter()
    .collect();
    let bytes = safetensors::tensor::serialize(views, &Some(info)).map_err(|e| ck_err(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| ck_err(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ck_err(path, e))?;
    let info = header
        .metadata()
        .as_ref()
        .ok_or_else(|| ck_err(path, "missing metadata"))?;
    if info.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(ck_err(path, "not an ovdet checkpoint"));
    }
    let meta_json = info.get("meta").ok_or_else(|| ck_err(path, "missing meta"))?;
    let mut meta: CheckpointMeta = serde_json::from_str(meta_json)?;
    meta.tokenizer = meta.tokenizer.finish_deserialize();
    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| ck_err(path, e))?;
    let (mut visual, mut text, mut extra) = (ArrayMap::new(), ArrayMap::new(), ArrayMap::new());
    for (name, view) in tensors.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(ck_err(path, format!("{name}: expected f32")));
        }
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let entry = (view.shape().to_vec(), data);
        let (prefix, key) = name
            .split_once('/')
            .ok_or_else(|| ck_err(path, format!("unexpected array {name}")))?;
        let target = match prefix {
            "visual" => &mut visual,
            "text" => &mut text,
            "extra" => &mut extra,
            _ => return Err(ck_err(path, format!("unexpected array {name}"))),
        };
        target.insert(key.to_string(), entry);
    }
    let detector = Detector::new(meta.config.clone(), meta.tokenizer.clone(), 0)?;
    if detector.config() != &meta.config {
        return Err(ck_err(path, "config does not match tokenizer"));
    }
    detector.visual_params().restore(&visual)?;
    detector.text_params().restore(&text)?;
    Ok(Checkpoint {
        detector,
        meta,
        extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;

    #[test]
    fn round_trip_preserves_outputs_and_metadata() {
        let tok = Tokenizer::from_texts(["red square", "blue circle"], 4, 12);
        let a = Detector::new(ModelConfig::default(), tok.clone(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut extra = ArrayMap::new();
        extra.insert("m".into(), (vec![2], vec![0.5, -1.0]));
        save_checkpoint(&path, &a, "abc", 7, 2, Some(serde_json::json!({"k": 1})), &extra).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.meta.step, 7);
        assert_eq!(ck.meta.dictionary_hash, "abc");
        assert_eq!(ck.extra, extra);
        let img = Image::from_elem((32, 32, 3), 0.4);
        assert_eq!(a.encode_image(&img).unwrap(), ck.detector.encode_image(&img).unwrap());
        let t = vec!["red square".to_string()];
        assert_eq!(a.encode_concepts(&t).unwrap(), ck.detector.encode_concepts(&t).unwrap());
        let b = Detector::new(ModelConfig::default(), tok, 2).unwrap();
        assert_ne!(b.encode_concepts(&t).unwrap(), ck.detector.encode_concepts(&t).unwrap());
    }

    #[test]
    fn garbage_file_is_a_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
