//! Binary checkpoints.
//!
//! Layout: the magic `VDMK1`, a little-endian `u64` header length, a JSON
//! header, then every tensor as little-endian `f32` in manifest order.
//! The header is serialized with sorted keys so equal contents give equal
//! bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::maskgen::{GateConfig, GateStack};
use crate::numerics::{Param, Tensor};
use crate::vit::{ViT, ViTConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"VDMK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    config: Value,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub tensors: Vec<Param<f32>>,
    /// Free-form metadata; the only place non-reproducible values may go.
    pub meta: Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|p| {
                let bytes = p.value.numel() * 4;
                let e = TensorEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    offset,
                    bytes,
                };
                offset += bytes;
                e
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors,
            meta: self.meta.clone(),
        };
        // round-trip through Value so every object's keys come out sorted
        let header = serde_json::to_vec(&serde_json::to_value(&header)?)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.tensors {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing VDMK1 magic".into()));
        }
        let len_bytes: [u8; 8] = bytes[5..13].try_into().expect("eight bytes");
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let payload_at = 13usize
            .checked_add(header_len)
            .filter(|&p| p <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[13..payload_at])?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let payload = &bytes[payload_at..];
        let mut expected = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            if e.offset != expected || e.bytes != numel * 4 || e.offset + e.bytes > payload.len() {
                return Err(bad(format!("tensor {} does not tile the payload", e.name)));
            }
            let data = payload[e.offset..e.offset + e.bytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            tensors.push(Param::new(e.name.clone(), Tensor::new(&e.shape, data)?));
            expected += e.bytes;
        }
        if expected != payload.len() {
            return Err(bad(format!("{} trailing payload bytes", payload.len() - expected)));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }
}

pub const VIT_KIND: &str = "vit";
pub const DIFFMASK_KIND: &str = "diffmask";

pub fn vit_checkpoint(vit: &ViT<f32>) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: VIT_KIND.into(),
        config: serde_json::to_value(&vit.config)?,
        tensors: vit.named_params().into_iter().cloned().collect(),
        meta: Value::Null,
    })
}

pub fn load_vit(ckpt: &Checkpoint) -> Result<ViT<f32>> {
    ckpt.expect_kind(VIT_KIND)?;
    let config: ViTConfig = serde_json::from_value(ckpt.config.clone())?;
    config.validate()?;
    ViT::from_params(config, ckpt.tensors.clone())
}

#[derive(Serialize, Deserialize)]
struct StackConfig {
    vit: ViTConfig,
    gates: GateConfig,
}

pub fn stack_checkpoint(vit: &ViTConfig, stack: &GateStack<f32>) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: DIFFMASK_KIND.into(),
        config: serde_json::to_value(StackConfig {
            vit: vit.clone(),
            gates: stack.config.clone(),
        })?,
        tensors: stack.named_params().into_iter().cloned().collect(),
        meta: Value::Null,
    })
}

/// The gate stack and the classifier shape it was trained against.
pub fn load_stack(ckpt: &Checkpoint) -> Result<(ViTConfig, GateStack<f32>)> {
    ckpt.expect_kind(DIFFMASK_KIND)?;
    let c: StackConfig = serde_json::from_value(ckpt.config.clone())?;
    let stack = GateStack::from_params(&c.vit, c.gates, ckpt.tensors.clone())?;
    Ok((c.vit, stack))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 2,
            n_classes: 3,
        }
    }

    #[test]
    fn vit_round_trip_is_byte_identical() {
        let vit = ViT::init(tiny(), 4).unwrap();
        let bytes = vit_checkpoint(&vit).unwrap().to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"VDMK1");
        let back = load_vit(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, vit);
        assert_eq!(vit_checkpoint(&back).unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn stack_round_trip() {
        let cfg = tiny();
        let stack = GateStack::init(&cfg, GateConfig::default(), 1).unwrap();
        let ckpt = stack_checkpoint(&cfg, &stack).unwrap();
        let (vcfg, back) = load_stack(&Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(vcfg, cfg);
        assert_eq!(back, stack);
        assert!(load_vit(&ckpt).is_err());
    }

    #[test]
    fn manifest_tiles_payload() {
        let vit = ViT::init(tiny(), 4).unwrap();
        let bytes = vit_checkpoint(&vit).unwrap().to_bytes().unwrap();
        let n = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[13..13 + n]).unwrap();
        let total: usize = header.tensors.iter().map(|t| t.bytes).sum();
        assert_eq!(13 + n + total, bytes.len());
        assert!(header.tensors.windows(2).all(|w| w[0].offset + w[0].bytes == w[1].offset));
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let vit = ViT::init(tiny(), 4).unwrap();
        let bytes = vit_checkpoint(&vit).unwrap().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Checkpoint(_))));
    }
}
