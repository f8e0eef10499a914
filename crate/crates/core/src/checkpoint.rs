//! Model checkpoints.
//!
//! Layout: the 5-byte magic `OPFL1`, a little-endian `u32` header length, a
//! JSON header, then every model parameter as a little-endian `f64` in the
//! model's flat parameter order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{BlockPartition, Lineage, ModelConfig, OpFlowModel};

pub const MAGIC: &[u8; 5] = b"OPFL1";
pub const FORMAT_VERSION: u32 = 1;

/// One named run of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterSegment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub partitions: Vec<BlockPartition>,
    pub lineage: Lineage,
    pub parameter_count: usize,
    pub layout: Vec<ParameterSegment>,
}

fn layout(model: &OpFlowModel) -> Vec<ParameterSegment> {
    let c = model.channels();
    let np = model.network().parameter_count();
    let per_block = 2 * c + np;
    let mut out = Vec::new();
    for k in 0..model.block_count() {
        let base = k * per_block;
        out.push(ParameterSegment {
            name: format!("block{k}.actnorm.log_scale"),
            offset: base,
            len: c,
        });
        out.push(ParameterSegment {
            name: format!("block{k}.actnorm.bias"),
            offset: base + c,
            len: c,
        });
        out.push(ParameterSegment {
            name: format!("block{k}.coupling.network"),
            offset: base + 2 * c,
            len: np,
        });
    }
    out
}

pub fn header_for(model: &OpFlowModel) -> CheckpointHeader {
    CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: *model.config(),
        partitions: (0..model.block_count()).map(|k| model.partition(k)).collect(),
        lineage: model.lineage.clone(),
        parameter_count: model.parameter_count(),
        layout: layout(model),
    }
}

pub fn to_bytes(model: &OpFlowModel) -> Vec<u8> {
    let header = serde_json::to_vec(&header_for(model)).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(9 + header.len() + 8 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<OpFlowModel> {
    let bad = |reason: &str| Error::format(path, reason);
    if bytes.len() < 9 || &bytes[..5] != MAGIC {
        return Err(bad("not an OPFL1 checkpoint (bad magic)"));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let body = &bytes[9..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("invalid header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(&format!(
            "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let payload = &body[hlen..];
    if payload.len() != 8 * header.parameter_count {
        return Err(bad(&format!(
            "payload holds {} bytes, header declares {} parameters",
            payload.len(),
            header.parameter_count
        )));
    }
    let params: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let model = OpFlowModel::from_parts(header.config, params, header.lineage.clone())
        .map_err(|e| bad(&e.to_string()))?;
    if header_for(&model) != header {
        return Err(bad("header layout does not match the model it describes"));
    }
    Ok(model)
}

pub fn save(model: &OpFlowModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model);
    // write-then-rename so an interrupted save never leaves a torn checkpoint
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<OpFlowModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::PartitionMode;
    use crate::gp::GaussianProcessSpec;
    use crate::grid::{Grid, GridFunction};

    fn model() -> OpFlowModel {
        let cfg = ModelConfig {
            blocks: 3,
            modes: 2,
            width: 4,
            depth: 1,
            ..ModelConfig::new(1, 1, PartitionMode::Domain, GaussianProcessSpec::new(0.2, 0.5).unwrap())
        };
        let mut m = OpFlowModel::new_random(cfg, 77).unwrap();
        m.lineage.train_seed = Some(5);
        m.lineage.iteration = 12;
        m
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.opfl");
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
        assert_eq!(back.lineage, m.lineage);
        let u = GridFunction::from_fn(Grid::line(8).unwrap(), 1, |_, [x, _]| (5.0 * x).sin());
        assert_eq!(
            back.log_likelihood(&u).unwrap().to_bits(),
            m.log_likelihood(&u).unwrap().to_bits()
        );
    }

    #[test]
    fn rejects_bad_files() {
        let m = model();
        let p = Path::new("x");
        let mut bytes = to_bytes(&m);
        assert!(from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        assert!(from_bytes(&bytes[..20], p).is_err());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes, p), Err(Error::Format { .. })));
        let mut header = header_for(&m);
        header.format_version = 9;
        let h = serde_json::to_vec(&header).unwrap();
        let mut v = MAGIC.to_vec();
        v.extend_from_slice(&(h.len() as u32).to_le_bytes());
        v.extend_from_slice(&h);
        v.extend(m.params().iter().flat_map(|x| x.to_le_bytes()));
        assert!(from_bytes(&v, p).is_err());
    }
}
