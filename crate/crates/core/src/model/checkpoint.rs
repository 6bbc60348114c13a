//! Checkpoint files: an 8-byte magic, a little-endian `u32` header length,
//! a JSON header, then the flat weight vector as little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Backbone, BackboneKind, ConvSpec, ConvStack, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::imaging::NormalizeMode;
use crate::taxonomy::{NodeId, Taxonomy};

const MAGIC: &[u8; 8] = b"TXNCKPT1";

/// Everything needed to use a checkpoint besides the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub backbone_name: String,
    /// conv layer specs for backbones that can be rebuilt from them
    pub conv_specs: Option<Vec<ConvSpec>>,
    pub taxonomy_checksum: String,
    pub outputs: Vec<NodeId>,
    pub normalize: NormalizeMode,
    pub n_params: usize,
}

impl CheckpointMeta {
    pub fn new(model: &Model, taxonomy: &Taxonomy, outputs: Vec<NodeId>, normalize: NormalizeMode) -> Result<Self> {
        if outputs.len() != model.num_outputs() {
            return Err(Error::DimensionMismatch(format!(
                "{} output ids for a model with {} outputs",
                outputs.len(),
                model.num_outputs()
            )));
        }
        Ok(CheckpointMeta {
            config: model.config().clone(),
            backbone_name: model.backbone().name().to_string(),
            conv_specs: model.backbone().conv_specs(),
            taxonomy_checksum: taxonomy.checksum().to_string(),
            outputs,
            normalize,
            n_params: model.param_count(),
        })
    }

    /// Fails with a checksum mismatch unless `taxonomy` is the one the
    /// model was trained against.
    pub fn verify_taxonomy(&self, taxonomy: &Taxonomy) -> Result<()> {
        if self.taxonomy_checksum != taxonomy.checksum() {
            return Err(Error::ChecksumMismatch {
                expected: self.taxonomy_checksum.clone(),
                found: taxonomy.checksum().to_string(),
            });
        }
        Ok(())
    }
}

impl Model {
    pub fn save_checkpoint(&self, path: impl AsRef<Path>, meta: &CheckpointMeta) -> Result<()> {
        let header = serde_json::to_vec(meta)?;
        let mut f = std::io::BufWriter::new(fs::File::create(path.as_ref())?);
        f.write_all(MAGIC)?;
        f.write_all(&(header.len() as u32).to_le_bytes())?;
        f.write_all(&header)?;
        for p in self.params() {
            f.write_all(&p.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }
}

fn read(path: &Path) -> Result<(CheckpointMeta, Vec<f32>)> {
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| bad("truncated header".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(body).map_err(|e| bad(format!("bad header: {e}")))?;
    let weights = &bytes[12 + hlen..];
    if weights.len() != 4 * meta.n_params {
        return Err(bad(format!(
            "expected {} weights, found {} bytes",
            meta.n_params,
            weights.len()
        )));
    }
    let params = weights
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((meta, params))
}

/// Loads a checkpoint whose backbone can be rebuilt from the file alone.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    let path = path.as_ref();
    let (meta, params) = read(path)?;
    let backbone: Arc<dyn Backbone> = match (&meta.config.backbone, &meta.conv_specs) {
        (BackboneKind::ToyCnn, Some(specs)) => Arc::new(ConvStack::new(meta.backbone_name.clone(), 1, specs)),
        _ => {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("backbone {} must be supplied by the caller", meta.backbone_name),
            })
        }
    };
    let model = Model::from_params(meta.config.clone(), backbone, params)?;
    Ok((model, meta))
}

/// Loads a checkpoint onto a caller-supplied backbone.
pub fn load_checkpoint_with(path: impl AsRef<Path>, backbone: Arc<dyn Backbone>) -> Result<(Model, CheckpointMeta)> {
    let (meta, params) = read(path.as_ref())?;
    let model = Model::from_params(meta.config.clone(), backbone, params)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use crate::taxonomy::parse_taxonomy;

    #[test]
    fn round_trip_and_checksum_guard() {
        let tax = parse_taxonomy("[findings]\nroot | Root\n  a | A\n  b | B\n").unwrap();
        let outputs = tax.output_ids(false);
        let cfg = ModelConfig {
            head_units: 8,
            ..ModelConfig::with_outputs(outputs.len())
        };
        let model = build_model(&cfg, 3).unwrap();
        let meta = CheckpointMeta::new(&model, &tax, outputs, NormalizeMode::StdDev).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save_checkpoint(&path, &meta).unwrap();
        let (back, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(meta2, meta);
        meta2.verify_taxonomy(&tax).unwrap();

        let other = parse_taxonomy("[findings]\nroot | Root\n  a | A\n  c | C\n").unwrap();
        assert!(matches!(meta2.verify_taxonomy(&other), Err(Error::ChecksumMismatch { .. })));

        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
    }
}
