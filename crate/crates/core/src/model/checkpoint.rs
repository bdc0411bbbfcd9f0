//! Checkpoint directories: `config.json`, `manifest.json` and `weights.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{config_hash, LoraConfig, ModelConfig};
use super::transformer::{Param, Transformer};
use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const TOKENIZER_FILE: &str = "tokenizer.json";

/// One entry of a tensor manifest. Offsets and lengths are in bytes of the
/// companion binary file, which holds little-endian `f32` data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub format_version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub lora: Option<LoraConfig>,
    /// Tokenizer file stored next to the weights, relative to the directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer: Option<String>,
}

impl Manifest {
    /// Parses and structurally validates a manifest: known dtype, contiguous
    /// in-order layout, lengths consistent with shapes, unique names.
    pub fn parse(file: &str, text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::format(file, e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "{file}: format version {} (supported: {FORMAT_VERSION})",
                m.format_version
            )));
        }
        let mut names = std::collections::HashSet::new();
        let mut next = 0u64;
        for e in &m.tensors {
            if e.dtype != "f32" {
                return Err(Error::format(file, format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
            }
            if !names.insert(e.name.as_str()) {
                return Err(Error::format(file, format!("duplicate tensor {}", e.name)));
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| if d == 0 { None } else { acc.checked_mul(d as u64) })
                .ok_or_else(|| Error::format(file, format!("tensor {}: bad shape {:?}", e.name, e.shape)))?;
            if numel.checked_mul(4) != Some(e.length) {
                return Err(Error::format(
                    file,
                    format!("tensor {}: length {} does not match shape {:?}", e.name, e.length, e.shape),
                ));
            }
            if e.offset != next {
                return Err(Error::format(file, format!("tensor {}: offset {} (expected {next})", e.name, e.offset)));
            }
            next =
                next.checked_add(e.length).ok_or_else(|| Error::format(file, "tensor offsets overflow".to_string()))?;
        }
        Ok(m)
    }

    pub fn total_bytes(&self) -> u64 {
        self.tensors.last().map_or(0, |e| e.offset + e.length)
    }

    /// Slices `bytes` into tensors according to the manifest.
    pub fn read_tensors(&self, file: &str, bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
        if bytes.len() as u64 != self.total_bytes() {
            return Err(Error::format(
                file,
                format!("holds {} bytes but the manifest describes {}", bytes.len(), self.total_bytes()),
            ));
        }
        self.tensors
            .iter()
            .map(|e| {
                let raw = &bytes[e.offset as usize..(e.offset + e.length) as usize];
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                Ok((e.name.clone(), Tensor::new(e.shape.clone(), data)?))
            })
            .collect()
    }
}

/// Writes named tensors as `<stem>.json` (manifest) and `<stem>.bin`.
pub fn write_tensor_bundle(dir: &Path, stem: &str, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = bytes.len() as u64;
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.to_string(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
            length: bytes.len() as u64 - offset,
        });
    }
    let manifest = Manifest { format_version: FORMAT_VERSION, tensors: entries };
    write_json(&dir.join(format!("{stem}.json")), &manifest)?;
    let bin = dir.join(format!("{stem}.bin"));
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))
}

pub fn read_tensor_bundle(dir: &Path, stem: &str) -> Result<Vec<(String, Tensor)>> {
    let manifest_path = dir.join(format!("{stem}.json"));
    let text = crate::error::read_text(&manifest_path)?;
    let manifest = Manifest::parse(&manifest_path.display().to_string(), &text)?;
    let bin = dir.join(format!("{stem}.bin"));
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    manifest.read_tensors(&bin.display().to_string(), &bytes)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = crate::error::read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

/// Saves a model. The weights file is named `weights.bin` with its manifest in
/// `manifest.json`.
pub fn save_model(model: &Transformer, dir: &Path) -> Result<()> {
    write_model(model, dir, None)
}

/// Saves a model together with its tokenizer as `tokenizer.json`.
pub fn save_model_with_tokenizer(model: &Transformer, tok: &Tokenizer, dir: &Path) -> Result<()> {
    if tok.vocab_size() != model.config().vocab {
        return Err(Error::Config(format!(
            "tokenizer has {} tokens but the model vocabulary is {}",
            tok.vocab_size(),
            model.config().vocab
        )));
    }
    write_model(model, dir, Some(tok))
}

fn write_model(model: &Transformer, dir: &Path, tok: Option<&Tokenizer>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(tok) = tok {
        tok.save(&dir.join(TOKENIZER_FILE))?;
    }
    let cfg = CheckpointConfig {
        format_version: FORMAT_VERSION,
        config_hash: model.config_hash(),
        model: model.config().clone(),
        lora: model.lora().cloned(),
        tokenizer: tok.map(|_| TOKENIZER_FILE.to_string()),
    };
    write_json(&dir.join("config.json"), &cfg)?;
    let tensors: Vec<(&str, &Tensor)> = model.params().iter().map(|p| (p.name.as_str(), &p.value)).collect();
    write_tensor_bundle(dir, "weights", &tensors)?;
    // The manifest is conventionally `manifest.json`; the bundle writer names
    // it after the stem, so move it.
    let from = dir.join("weights.json");
    let to = dir.join("manifest.json");
    fs::rename(&from, &to).map_err(|e| Error::io(&to, e))
}

/// Loads a model saved by [`save_model`]. With adapters attached, base
/// weights come back frozen.
pub fn load_model(dir: &Path) -> Result<Transformer> {
    let cfg: CheckpointConfig = read_json(&dir.join("config.json"))?;
    if cfg.format_version != FORMAT_VERSION {
        return Err(Error::Version(format!("checkpoint format version {}", cfg.format_version)));
    }
    let expected = config_hash(&cfg.model, cfg.lora.as_ref());
    if cfg.config_hash != expected {
        return Err(Error::Version(format!(
            "config hash {} does not match its configuration ({expected})",
            cfg.config_hash
        )));
    }
    let manifest_path = dir.join("manifest.json");
    let text = crate::error::read_text(&manifest_path)?;
    let manifest = Manifest::parse(&manifest_path.display().to_string(), &text)?;
    let bin = dir.join("weights.bin");
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let tensors = manifest.read_tensors(&bin.display().to_string(), &bytes)?;
    let has_lora = cfg.lora.is_some();
    let params = tensors
        .into_iter()
        .map(|(name, value)| {
            let frozen = has_lora && !name.contains(".lora_");
            Param { name, value, frozen }
        })
        .collect();
    Transformer::from_params(cfg.model, cfg.lora, params)
}

/// The tokenizer a checkpoint refers to, if it names one.
pub fn load_model_tokenizer(dir: &Path) -> Result<Option<Tokenizer>> {
    let cfg: CheckpointConfig = read_json(&dir.join("config.json"))?;
    let Some(file) = cfg.tokenizer else {
        return Ok(None);
    };
    let tok = Tokenizer::load(&dir.join(&file))?;
    if tok.vocab_size() != cfg.model.vocab {
        return Err(Error::Config(format!(
            "{file} has {} tokens but the model vocabulary is {}",
            tok.vocab_size(),
            cfg.model.vocab
        )));
    }
    Ok(Some(tok))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Transformer {
        let cfg = ModelConfig { n_layers: 1, n_heads: 2, d_model: 8, d_ff: 16, context: 8, ..ModelConfig::tiny(12) };
        Transformer::with_init_std(cfg, 3, 0.5).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = model();
        m.attach_lora(LoraConfig { rank: 2, alpha: 4.0, targets: vec!["wk".into()] }, 1).unwrap();
        save_model(&m, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config_hash(), m.config_hash());
    }

    #[test]
    fn hash_mismatch_is_a_version_error() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&model(), dir.path()).unwrap();
        let path = dir.path().join("config.json");
        let mut cfg: CheckpointConfig = read_json(&path).unwrap();
        cfg.model.d_ff = 32;
        write_json(&path, &cfg).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Version(_))));
    }

    #[test]
    fn manifest_validation() {
        let ok = r#"{"format_version":1,"tensors":[
            {"name":"a","dtype":"f32","shape":[2,3],"offset":0,"length":24},
            {"name":"b","dtype":"f32","shape":[1],"offset":24,"length":4}]}"#;
        let m = Manifest::parse("m", ok).unwrap();
        assert_eq!(m.total_bytes(), 28);
        assert!(m.read_tensors("w", &[0u8; 27]).is_err());
        let t = m.read_tensors("w", &[0u8; 28]).unwrap();
        assert_eq!(t[0].1.shape(), &[2, 3]);
        for bad in [
            ok.replace("\"f32\",\"shape\":[1]", "\"f16\",\"shape\":[1]"),
            ok.replace("\"length\":24", "\"length\":20"),
            ok.replace("\"offset\":24", "\"offset\":28"),
            ok.replace("\"name\":\"b\"", "\"name\":\"a\""),
            ok.replace("[2,3]", "[2,0]"),
            ok.replace("\"format_version\":1", "\"format_version\":2"),
        ] {
            assert!(Manifest::parse("m", &bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn tokenizer_reference_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let tok = Tokenizer::byte_level();
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            context: 8,
            ..ModelConfig::tiny(tok.vocab_size())
        };
        let m = Transformer::new(cfg, 1).unwrap();
        assert!(save_model_with_tokenizer(&model(), &tok, dir.path()).is_err());
        save_model(&m, dir.path()).unwrap();
        assert_eq!(load_model_tokenizer(dir.path()).unwrap(), None);
        save_model_with_tokenizer(&m, &tok, dir.path()).unwrap();
        assert_eq!(load_model_tokenizer(dir.path()).unwrap(), Some(tok));
        assert_eq!(load_model(dir.path()).unwrap().params(), m.params());
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&model(), dir.path()).unwrap();
        let bin = dir.path().join("weights.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Format { .. })));
    }
}
