//! Binary checkpoints.
//!
//! Layout: the 9-byte magic `ATMPTCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the UTF-8 JSON header, then
//! each declared array as contiguous little-endian `f32` values in header
//! order. The header records shapes, the backbone and bank hashes and a
//! SHA-256 of the payload; loading verifies all of them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{FrozenLm, LmConfig, LmParams};
use crate::prompt::{AttentionModule, LogitScaling, PromptOrigin, SoftPrompt};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 9] = b"ATMPTCKPT";
pub const VERSION: u32 = 1;
/// Upper bound on the JSON header, guarding against corrupt length fields.
const MAX_HEADER: u64 = 64 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Lm,
    Prompt,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: CheckpointKind,
    pub seed: u64,
    /// Kind-specific settings (LM config, prompt name/origin, temperature).
    pub config: serde_json::Value,
    pub arrays: Vec<ArraySpec>,
    pub theta_hash: String,
    pub bank_hash: Option<String>,
    pub payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub arrays: Vec<Tensor>,
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

fn payload(arrays: &[Tensor]) -> Vec<u8> {
    arrays.iter().flat_map(|t| t.to_f32_le_bytes()).collect()
}

impl Checkpoint {
    /// Builds a checkpoint; the payload digest is filled in here.
    pub fn new(
        kind: CheckpointKind,
        seed: u64,
        config: serde_json::Value,
        named: Vec<(String, Tensor)>,
        theta_hash: String,
        bank_hash: Option<String>,
    ) -> Self {
        let (specs, arrays): (Vec<ArraySpec>, Vec<Tensor>) = named
            .into_iter()
            .map(|(name, t)| {
                (
                    ArraySpec {
                        name,
                        shape: t.shape().to_vec(),
                    },
                    t,
                )
            })
            .unzip();
        let digest = hex::encode(Sha256::digest(payload(&arrays)));
        Self {
            header: Header {
                kind,
                seed,
                config,
                arrays: specs,
                theta_hash,
                bank_hash,
                payload_sha256: digest,
            },
            arrays,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 12 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend(payload(&self.arrays));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| integrity("bad magic; not a checkpoint"))?;
        if rest.len() < 12 {
            return Err(integrity("truncated preamble"));
        }
        let version = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(integrity(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(rest[4..12].try_into().expect("8 bytes"));
        let rest = &rest[12..];
        if header_len > MAX_HEADER || header_len as usize > rest.len() {
            return Err(integrity(format!("header length {header_len} exceeds file")));
        }
        let (head, body) = rest.split_at(header_len as usize);
        let header: Header =
            serde_json::from_slice(head).map_err(|e| integrity(format!("unreadable header: {e}")))?;
        let expected: usize = header
            .arrays
            .iter()
            .map(|a| a.shape.iter().product::<usize>() * 4)
            .sum();
        if expected != body.len() {
            return Err(integrity(format!(
                "payload is {} bytes, header declares {expected}",
                body.len()
            )));
        }
        if hex::encode(Sha256::digest(body)) != header.payload_sha256 {
            return Err(integrity("payload digest mismatch"));
        }
        let mut offset = 0;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for spec in &header.arrays {
            let n: usize = spec.shape.iter().product();
            let data = body[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            offset += 4 * n;
            arrays.push(Tensor::new(spec.shape.clone(), data).map_err(|_| integrity(format!("bad shape for {}", spec.name)))?);
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.header
            .arrays
            .iter()
            .position(|a| a.name == name)
            .map(|i| &self.arrays[i])
            .ok_or_else(|| integrity(format!("checkpoint has no array `{name}`")))
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Compatibility(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.header.kind
            )));
        }
        Ok(())
    }

    /// Rejects checkpoints made against a different backbone.
    pub fn check_theta(&self, theta_hash: &str) -> Result<()> {
        if self.header.theta_hash != theta_hash {
            return Err(Error::Compatibility(format!(
                "checkpoint was trained against backbone {}, current backbone is {theta_hash}",
                self.header.theta_hash
            )));
        }
        Ok(())
    }
}

pub fn lm_checkpoint(lm: &FrozenLm, seed: u64) -> Result<Checkpoint> {
    let named = lm.params().named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    Ok(Checkpoint::new(
        CheckpointKind::Lm,
        seed,
        serde_json::to_value(lm.config())?,
        named,
        lm.theta_hash(),
        None,
    ))
}

/// Rebuilds the backbone and verifies the stored θ hash.
pub fn load_lm(ckpt: &Checkpoint) -> Result<FrozenLm> {
    ckpt.expect_kind(CheckpointKind::Lm)?;
    let config: LmConfig = serde_json::from_value(ckpt.header.config.clone())?;
    config.validate()?;
    let template = LmParams::<Tensor>::init(&config, &mut crate::Rng::new(0))?;
    let mut failure = None;
    let params = template.map(&mut |name, t| match ckpt.array(name) {
        Ok(a) if a.shape() == t.shape() => a.clone(),
        Ok(a) => {
            failure.get_or_insert(Error::dim("load_lm", t.shape(), a.shape()));
            t.clone()
        }
        Err(e) => {
            failure.get_or_insert(e);
            t.clone()
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let lm = FrozenLm::from_params(config, params)?;
    if lm.theta_hash() != ckpt.header.theta_hash {
        return Err(integrity("backbone weights do not match the stored θ hash"));
    }
    Ok(lm)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptMeta {
    name: String,
    origin: PromptOrigin,
    trainable: bool,
}

pub fn prompt_checkpoint(prompt: &SoftPrompt, theta_hash: &str, bank_hash: Option<String>, seed: u64) -> Result<Checkpoint> {
    let meta = PromptMeta {
        name: prompt.name().to_string(),
        origin: prompt.origin(),
        trainable: prompt.is_trainable(),
    };
    Ok(Checkpoint::new(
        CheckpointKind::Prompt,
        seed,
        serde_json::to_value(meta)?,
        vec![("prompt".into(), prompt.values().clone())],
        theta_hash.to_string(),
        bank_hash,
    ))
}

/// Loads a prompt, refusing one trained against another backbone.
pub fn load_prompt(ckpt: &Checkpoint, theta_hash: &str) -> Result<SoftPrompt> {
    ckpt.expect_kind(CheckpointKind::Prompt)?;
    ckpt.check_theta(theta_hash)?;
    let meta: PromptMeta = serde_json::from_value(ckpt.header.config.clone())?;
    SoftPrompt::new(meta.name, ckpt.array("prompt")?.clone(), meta.trainable, meta.origin)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttentionMeta {
    temperature: f64,
    scaling: LogitScaling,
}

pub fn attention_checkpoint(g: &AttentionModule, theta_hash: &str, bank_hash: Option<String>, seed: u64) -> Result<Checkpoint> {
    let meta = AttentionMeta {
        temperature: g.temperature,
        scaling: g.scaling,
    };
    let named = AttentionModule::<f32>::PARAM_NAMES
        .iter()
        .zip(g.tensors())
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    Ok(Checkpoint::new(
        CheckpointKind::Attention,
        seed,
        serde_json::to_value(meta)?,
        named,
        theta_hash.to_string(),
        bank_hash,
    ))
}

pub fn load_attention(ckpt: &Checkpoint, theta_hash: &str) -> Result<AttentionModule> {
    ckpt.expect_kind(CheckpointKind::Attention)?;
    ckpt.check_theta(theta_hash)?;
    let meta: AttentionMeta = serde_json::from_value(ckpt.header.config.clone())?;
    let g = AttentionModule {
        w_down: ckpt.array("w_down")?.clone(),
        w_up: ckpt.array("w_up")?.clone(),
        ln_gain: ckpt.array("ln_gain")?.clone(),
        ln_bias: ckpt.array("ln_bias")?.clone(),
        temperature: meta.temperature,
        scaling: meta.scaling,
    };
    g.validate()?;
    Ok(g)
}
