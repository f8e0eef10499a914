//! Synthetic function datasets and the UFDS1 container.
//!
//! File layout: the 5-byte magic `UFDS1`, a little-endian `u32` header
//! length, a JSON header, then `count x channels x nodes` little-endian reals
//! in `[sample][channel][node]` order (nodes row-major).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{gp_sample, tgp_sample, GaussianProcessSpec, TruncationBounds, DEFAULT_DRAWS_PER_SAMPLE};
use crate::grid::{FunctionBatch, Grid};

pub const MAGIC: &[u8; 5] = b"UFDS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// 1D Gaussian process.
    Gp,
    /// 1D truncated Gaussian process.
    Tgp,
    /// 2D Gaussian random field.
    Grf,
    /// 2D truncated Gaussian random field.
    Tgrf,
}

impl DatasetKind {
    pub fn dims(self) -> usize {
        match self {
            DatasetKind::Gp | DatasetKind::Tgp => 1,
            DatasetKind::Grf | DatasetKind::Tgrf => 2,
        }
    }

    pub fn truncated(self) -> bool {
        matches!(self, DatasetKind::Tgp | DatasetKind::Tgrf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    #[default]
    F32,
    F64,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            ElementType::F32 => 4,
            ElementType::F64 => 8,
        }
    }
}

/// Everything needed to regenerate a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: DatasetKind,
    pub gp: GaussianProcessSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<TruncationBounds>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    /// Free-form content tag, e.g. `gp`, `paired`, `samples`, `posterior`.
    pub kind: String,
    pub count: usize,
    pub channels: usize,
    pub resolution: Vec<usize>,
    pub element_type: ElementType,
    pub row_major: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
    /// Extra provenance (pairing seed, source checkpoint, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

impl DatasetHeader {
    pub fn dims(&self) -> usize {
        self.resolution.len()
    }

    pub fn payload_len(&self) -> usize {
        self.count * self.channels * self.resolution.iter().product::<usize>() * self.element_type.size()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub batch: FunctionBatch,
}

impl Dataset {
    /// Wrap a batch, rounding values to the element type so the in-memory
    /// data equals what a save/load cycle returns.
    pub fn from_batch(kind: &str, batch: FunctionBatch, element_type: ElementType) -> Self {
        let mut batch = batch;
        if element_type == ElementType::F32 {
            batch.values_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        let header = DatasetHeader {
            kind: kind.to_string(),
            count: batch.count(),
            channels: batch.channels(),
            resolution: batch.grid().resolution().to_vec(),
            element_type,
            row_major: true,
            generator: None,
            notes: BTreeMap::new(),
        };
        Self { header, batch }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("dataset header serializes");
        let mut out = Vec::with_capacity(9 + header.len() + self.header.payload_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        match self.header.element_type {
            ElementType::F32 => self.batch.values().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            ElementType::F64 => self.batch.values().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: String| Error::format(path, r);
        if bytes.len() < 9 || &bytes[..5] != MAGIC {
            return Err(bad("not a UFDS1 dataset (bad magic)".into()));
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let body = &bytes[9..];
        if body.len() < hlen {
            return Err(bad(format!("header declares {hlen} bytes, only {} present", body.len())));
        }
        let value: serde_json::Value =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("invalid header: {e}")))?;
        if let Some(t) = value.get("element_type").and_then(|t| t.as_str()) {
            if t != "f32" && t != "f64" {
                return Err(bad(format!("unsupported element type {t:?}")));
            }
        }
        let header: DatasetHeader = serde_json::from_value(value).map_err(|e| bad(format!("invalid header: {e}")))?;
        if !header.row_major {
            return Err(bad("only row-major payloads are supported".into()));
        }
        let payload = &body[hlen..];
        if payload.len() != header.payload_len() {
            return Err(bad(format!(
                "payload holds {} bytes, header implies {} ({} samples x {} channels x {:?} nodes x {} bytes)",
                payload.len(),
                header.payload_len(),
                header.count,
                header.channels,
                header.resolution,
                header.element_type.size()
            )));
        }
        let values: Vec<f64> = match header.element_type {
            ElementType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            ElementType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        let grid = Grid::new(header.dims(), &header.resolution).map_err(|e| bad(e.to_string()))?;
        let batch = FunctionBatch::new(grid, header.channels, header.count, values).map_err(|e| bad(e.to_string()))?;
        Ok(Self { header, batch })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.save(path)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path)
}

/// Generate `count` samples of `kind` on `grid`. Truncated kinds need
/// `bounds` and are produced by whole-function rejection.
pub fn generate_dataset(
    kind: DatasetKind,
    spec: &GaussianProcessSpec,
    bounds: Option<TruncationBounds>,
    grid: &Grid,
    count: usize,
    seed: u64,
    element_type: ElementType,
) -> Result<Dataset> {
    spec.validate()?;
    if grid.dims() != kind.dims() {
        return Err(Error::invalid(format!(
            "{kind:?} data is {}-dimensional, grid is {}-dimensional",
            kind.dims(),
            grid.dims()
        )));
    }
    if kind.truncated() != bounds.is_some() {
        return Err(Error::invalid(if kind.truncated() {
            "truncated kinds require bounds"
        } else {
            "bounds are only valid for truncated kinds"
        }));
    }
    let batch = if count == 0 {
        FunctionBatch::zeros(grid.clone(), 1, 0)
    } else if let Some(b) = bounds {
        tgp_sample(spec, b, grid, count, seed, DEFAULT_DRAWS_PER_SAMPLE.saturating_mul(count as u64))?
    } else {
        gp_sample(spec, grid, count, seed)?
    };
    let tag = serde_json::to_value(kind).expect("kind serializes");
    let mut ds = Dataset::from_batch(tag.as_str().expect("kind is a string"), batch, element_type);
    ds.header.generator = Some(GeneratorSpec {
        kind,
        gp: *spec,
        bounds,
        seed,
    });
    Ok(ds)
}

/// Regenerate a dataset from the generator recorded in its header.
pub fn regenerate(header: &DatasetHeader) -> Result<Dataset> {
    let g = header
        .generator
        .ok_or_else(|| Error::invalid("dataset header has no generator record"))?;
    let grid = Grid::new(header.dims(), &header.resolution)?;
    generate_dataset(g.kind, &g.gp, g.bounds, &grid, header.count, g.seed, header.element_type)
}

/// Shuffle a single-channel batch, split it in half and stack the halves as
/// two channels: sample `i` is `(first[i], second[i])`.
pub fn pair_channels(batch: &FunctionBatch, seed: u64) -> Result<FunctionBatch> {
    if batch.channels() != 1 {
        return Err(Error::invalid("channel pairing needs single-channel data"));
    }
    if !batch.count().is_multiple_of(2) {
        return Err(Error::invalid(format!("channel pairing needs an even sample count, got {}", batch.count())));
    }
    let mut order: Vec<usize> = (0..batch.count()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let half = batch.count() / 2;
    let mut values = Vec::with_capacity(batch.values().len());
    for i in 0..half {
        values.extend_from_slice(batch.sample_values(order[i]));
        values.extend_from_slice(batch.sample_values(order[half + i]));
    }
    FunctionBatch::new(batch.grid().clone(), 2, half, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GaussianProcessSpec {
        GaussianProcessSpec::new(0.5, 1.5).unwrap()
    }

    #[test]
    fn roundtrip_is_exact_for_both_element_types() {
        let dir = tempfile::tempdir().unwrap();
        for et in [ElementType::F32, ElementType::F64] {
            let ds = generate_dataset(DatasetKind::Gp, &spec(), None, &Grid::line(16).unwrap(), 5, 1, et).unwrap();
            let p = dir.path().join("d.ufds");
            save_dataset(&ds, &p).unwrap();
            let back = load_dataset(&p).unwrap();
            assert_eq!(back, ds);
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let ds = generate_dataset(DatasetKind::Gp, &spec(), None, &Grid::line(8).unwrap(), 3, 1, ElementType::F64).unwrap();
        let p = Path::new("x.ufds");
        let mut b = ds.to_bytes();
        let err = Dataset::from_bytes(&b[..b.len() - 5], p).unwrap_err();
        assert!(err.to_string().contains("bytes"), "{err}");
        b[1] = b'X';
        assert!(Dataset::from_bytes(&b, p).is_err());

        let mut h = ds.header.clone();
        let json = serde_json::to_string(&h).unwrap().replace("\"f64\"", "\"f16\"");
        let mut v = MAGIC.to_vec();
        v.extend_from_slice(&(json.len() as u32).to_le_bytes());
        v.extend_from_slice(json.as_bytes());
        let err = Dataset::from_bytes(&v, p).unwrap_err();
        assert!(err.to_string().contains("unsupported element type"));
        h.row_major = false;
        let d = Dataset { header: h, batch: ds.batch.clone() };
        assert!(Dataset::from_bytes(&d.to_bytes(), p).is_err());
    }

    #[test]
    fn empty_dataset() {
        let ds = generate_dataset(DatasetKind::Gp, &spec(), None, &Grid::line(8).unwrap(), 0, 1, ElementType::F32).unwrap();
        assert_eq!(ds.header.count, 0);
        let back = Dataset::from_bytes(&ds.to_bytes(), Path::new("e")).unwrap();
        assert!(back.batch.is_empty());
    }

    #[test]
    fn truncated_kinds_respect_bounds_and_regenerate() {
        let b = TruncationBounds::new(-1.2, 1.2).unwrap();
        let ds = generate_dataset(DatasetKind::Tgp, &spec(), Some(b), &Grid::line(32).unwrap(), 50, 3, ElementType::F32).unwrap();
        assert!(ds.batch.values().iter().all(|v| b.contains(*v)));
        assert_eq!(regenerate(&ds.header).unwrap(), ds);
        assert!(generate_dataset(DatasetKind::Tgp, &spec(), None, &Grid::line(8).unwrap(), 2, 0, ElementType::F32).is_err());
        assert!(generate_dataset(DatasetKind::Gp, &spec(), Some(b), &Grid::line(8).unwrap(), 2, 0, ElementType::F32).is_err());
        assert!(generate_dataset(DatasetKind::Grf, &spec(), None, &Grid::line(8).unwrap(), 2, 0, ElementType::F32).is_err());
        let g = generate_dataset(DatasetKind::Tgrf, &spec(), Some(TruncationBounds::new(-2.0, 2.0).unwrap()), &Grid::square(8).unwrap(), 4, 0, ElementType::F32).unwrap();
        assert!(g.batch.values().iter().all(|v| v.abs() <= 2.0));
    }

    #[test]
    fn pairing() {
        let ds = generate_dataset(DatasetKind::Gp, &spec(), None, &Grid::line(8).unwrap(), 4, 1, ElementType::F64).unwrap();
        let p = pair_channels(&ds.batch, 9).unwrap();
        assert_eq!((p.count(), p.channels()), (2, 2));
        let mut a: Vec<f64> = ds.batch.values().to_vec();
        let mut b: Vec<f64> = p.values().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert_eq!(pair_channels(&ds.batch, 9).unwrap(), p);
        assert!(pair_channels(&ds.batch.select(&[0, 1, 2]), 9).is_err());
    }
}
