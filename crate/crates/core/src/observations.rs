//! Pointwise, possibly noisy observations of a function on grid nodes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{restrict, Grid, GridFunction, IndexSet};

#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    points: IndexSet,
    /// Observed channels of the function; values are stored per entry here.
    channels: Vec<usize>,
    /// `[observed channel][point]`.
    values: Vec<f64>,
    noise_variance: f64,
}

impl Observations {
    /// Single-channel observations of channel 0.
    pub fn new(points: IndexSet, values: Vec<f64>, noise_variance: f64) -> Result<Self> {
        Self::with_channels(points, vec![0], values, noise_variance)
    }

    pub fn with_channels(
        points: IndexSet,
        channels: Vec<usize>,
        values: Vec<f64>,
        noise_variance: f64,
    ) -> Result<Self> {
        if !(noise_variance >= 0.0) || !noise_variance.is_finite() {
            return Err(Error::invalid(format!(
                "noise variance must be a finite value >= 0, got {noise_variance}"
            )));
        }
        if channels.is_empty() {
            return Err(Error::invalid("observations need at least one channel"));
        }
        if values.len() != channels.len() * points.len() {
            return Err(Error::shape(format!(
                "{} observed values for {} points x {} channels",
                values.len(),
                points.len(),
                channels.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("observed values must be finite"));
        }
        Ok(Self {
            points,
            channels,
            values,
            noise_variance,
        })
    }

    /// Zero observations on `grid` (vacuous conditioning).
    pub fn none(grid: &Grid, noise_variance: f64) -> Self {
        Self {
            points: IndexSet::empty(grid),
            channels: vec![0],
            values: Vec::new(),
            noise_variance,
        }
    }

    /// Observe `f` (noise-free) at `points` on the given channels.
    pub fn from_function(
        f: &GridFunction,
        points: IndexSet,
        channels: Vec<usize>,
        noise_variance: f64,
    ) -> Result<Self> {
        let all = restrict(f, &points)?;
        let r = points.len();
        let mut values = Vec::with_capacity(channels.len() * r);
        for &c in &channels {
            if c >= f.channels() {
                return Err(Error::invalid(format!("channel {c} not present")));
            }
            values.extend_from_slice(&all[c * r..(c + 1) * r]);
        }
        Self::with_channels(points, channels, values, noise_variance)
    }

    pub fn points(&self) -> &IndexSet {
        &self.points
    }

    pub fn grid(&self) -> &Grid {
        self.points.grid()
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Values observed on the `slot`-th observed channel.
    pub fn channel_values(&self, slot: usize) -> &[f64] {
        let r = self.points.len();
        &self.values[slot * r..(slot + 1) * r]
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Re-express the same observations on a finer grid whose nodes include
    /// the original observation nodes.
    pub fn transfer_to(&self, grid: &Grid) -> Result<Self> {
        let coords = self.points.coordinates();
        let mut idx = Vec::with_capacity(coords.len());
        for c in coords {
            let node = grid
                .node_at(&c[..grid.dims()], 1e-9)
                .ok_or_else(|| Error::invalid(format!("observation at {c:?} is not a node of the target grid")))?;
            idx.push(node);
        }
        let points = IndexSet::new(grid, idx)?;
        Self::with_channels(points, self.channels.clone(), self.values.clone(), self.noise_variance)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ObservationFile =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        file.into_observations()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ObservationFile::from_observations(self);
        let text = serde_json::to_string_pretty(&file).expect("observation file serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// On-disk observation record. Either `indices` or `coordinates` locates the
/// points; coordinates must coincide with grid nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationFile {
    pub resolution: Vec<usize>,
    pub noise_variance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coordinates: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    /// One list per observed channel, in point order.
    pub values: Vec<Vec<f64>>,
}

fn default_channels() -> Vec<usize> {
    vec![0]
}

impl ObservationFile {
    pub fn into_observations(self) -> Result<Observations> {
        let grid = Grid::new(self.resolution.len(), &self.resolution)?;
        let raw: Vec<usize> = match (self.indices, self.coordinates) {
            (Some(i), None) => i,
            (None, Some(coords)) => coords
                .iter()
                .map(|c| {
                    grid.node_at(c, 1e-9).ok_or_else(|| {
                        Error::Config(format!("observation coordinate {c:?} is not a grid node"))
                    })
                })
                .collect::<Result<_>>()?,
            _ => {
                return Err(Error::Config(
                    "observations need exactly one of `indices` or `coordinates`".into(),
                ))
            }
        };
        if self.values.len() != self.channels.len() {
            return Err(Error::Config("one value list per observed channel expected".into()));
        }
        // keep values aligned with the sorted point order
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by_key(|&i| raw[i]);
        let sorted: Vec<usize> = order.iter().map(|&i| raw[i]).collect();
        let points = IndexSet::new(&grid, sorted)?;
        let mut values = Vec::new();
        for vals in &self.values {
            if vals.len() != raw.len() {
                return Err(Error::Config("value list length differs from point count".into()));
            }
            values.extend(order.iter().map(|&i| vals[i]));
        }
        Observations::with_channels(points, self.channels, values, self.noise_variance)
    }

    pub fn from_observations(obs: &Observations) -> Self {
        Self {
            resolution: obs.grid().resolution().to_vec(),
            noise_variance: obs.noise_variance,
            indices: Some(obs.points.indices().to_vec()),
            coordinates: None,
            channels: obs.channels.clone(),
            values: (0..obs.channels.len())
                .map(|s| obs.channel_values(s).to_vec())
                .collect(),
        }
    }
}
