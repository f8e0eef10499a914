//! Regular grids over `[0,1]^d` (d = 1 or 2) and the functions sampled on them.
//!
//! Nodes are ordered row-major: the last axis varies fastest. Every mask,
//! index set and file format in the crate uses this order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A uniform tensor-product grid with endpoints included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    resolution: Vec<usize>,
    extent: Vec<(f64, f64)>,
}

impl Grid {
    /// Uniform grid over the unit cube with the given per-axis resolution.
    pub fn new(dims: usize, resolution: &[usize]) -> Result<Self> {
        let extent = vec![(0.0, 1.0); dims];
        Self::with_extent(dims, resolution, &extent)
    }

    pub fn with_extent(dims: usize, resolution: &[usize], extent: &[(f64, f64)]) -> Result<Self> {
        if !(1..=2).contains(&dims) {
            return Err(Error::invalid(format!(
                "grid dimension must be 1 or 2, got {dims}"
            )));
        }
        if resolution.len() != dims || extent.len() != dims {
            return Err(Error::invalid(format!(
                "expected {dims} per-axis resolutions/extents, got {}/{}",
                resolution.len(),
                extent.len()
            )));
        }
        if let Some(r) = resolution.iter().find(|&&r| r < 2) {
            return Err(Error::invalid(format!(
                "grid resolution must be at least 2 per axis, got {r}"
            )));
        }
        if let Some(e) = extent.iter().find(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::invalid(format!("invalid axis extent {e:?}")));
        }
        Ok(Self {
            resolution: resolution.to_vec(),
            extent: extent.to_vec(),
        })
    }

    pub fn line(n: usize) -> Result<Self> {
        Self::new(1, &[n])
    }

    pub fn square(n: usize) -> Result<Self> {
        Self::new(2, &[n, n])
    }

    pub fn dims(&self) -> usize {
        self.resolution.len()
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn extent(&self) -> &[(f64, f64)] {
        &self.extent
    }

    pub fn node_count(&self) -> usize {
        self.resolution.iter().product()
    }

    /// Resolution along the slow axis for 2D grids; 1 for 1D grids.
    pub(crate) fn rows(&self) -> usize {
        if self.dims() == 2 {
            self.resolution[0]
        } else {
            1
        }
    }

    /// Resolution along the fast (last) axis.
    pub(crate) fn cols(&self) -> usize {
        *self.resolution.last().expect("grid has at least one axis")
    }

    pub fn axis_coordinates(&self, axis: usize) -> Vec<f64> {
        let n = self.resolution[axis];
        let (lo, hi) = self.extent[axis];
        (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect()
    }

    /// Per-axis index of a node.
    pub fn multi_index(&self, node: usize) -> [usize; 2] {
        if self.dims() == 1 {
            [node, 0]
        } else {
            [node / self.resolution[1], node % self.resolution[1]]
        }
    }

    /// Physical coordinates of every node; the second slot is 0 on 1D grids.
    pub fn node_coordinates(&self) -> Vec<[f64; 2]> {
        let axes: Vec<Vec<f64>> = (0..self.dims()).map(|a| self.axis_coordinates(a)).collect();
        (0..self.node_count())
            .map(|node| {
                let idx = self.multi_index(node);
                if self.dims() == 1 {
                    [axes[0][idx[0]], 0.0]
                } else {
                    [axes[0][idx[0]], axes[1][idx[1]]]
                }
            })
            .collect()
    }

    /// Node whose coordinates coincide with `point` (within `tol` per axis).
    pub fn node_at(&self, point: &[f64], tol: f64) -> Option<usize> {
        if point.len() != self.dims() {
            return None;
        }
        let mut idx = [0usize; 2];
        for axis in 0..self.dims() {
            let (lo, hi) = self.extent[axis];
            let n = self.resolution[axis];
            let pos = (point[axis] - lo) / (hi - lo) * (n - 1) as f64;
            let nearest = pos.round();
            if nearest < 0.0 || nearest > (n - 1) as f64 {
                return None;
            }
            let coord = self.axis_coordinates(axis)[nearest as usize];
            if (coord - point[axis]).abs() > tol {
                return None;
            }
            idx[axis] = nearest as usize;
        }
        Some(if self.dims() == 1 {
            idx[0]
        } else {
            idx[0] * self.resolution[1] + idx[1]
        })
    }

    pub(crate) fn ensure_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: grid {:?} does not match {:?}",
                self.resolution, other.resolution
            )))
        }
    }
}

/// `make_regular_grid` of the operation list.
pub fn make_regular_grid(dims: usize, resolution: &[usize]) -> Result<Grid> {
    Grid::new(dims, resolution)
}

/// A channelled real function sampled on a grid, stored `[channel][node]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Grid,
    channels: usize,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("a grid function needs at least one channel"));
        }
        if values.len() != channels * grid.node_count() {
            return Err(Error::shape(format!(
                "expected {} values ({} channels x {} nodes), got {}",
                channels * grid.node_count(),
                channels,
                grid.node_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("grid function values must be finite".into()));
        }
        Ok(Self {
            grid,
            channels,
            values,
        })
    }

    pub fn zeros(grid: Grid, channels: usize) -> Self {
        let n = grid.node_count() * channels;
        Self {
            grid,
            channels,
            values: vec![0.0; n],
        }
    }

    pub fn from_fn(grid: Grid, channels: usize, f: impl Fn(usize, [f64; 2]) -> f64) -> Self {
        let coords = grid.node_coordinates();
        let values = (0..channels)
            .flat_map(|c| coords.iter().map(move |&x| (c, x)))
            .map(|(c, x)| f(c, x))
            .collect();
        Self {
            grid,
            channels,
            values,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.grid.node_count();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn into_batch(self) -> FunctionBatch {
        FunctionBatch {
            grid: self.grid,
            channels: self.channels,
            count: 1,
            values: self.values,
        }
    }
}

/// A batch of functions on one grid, stored `[sample][channel][node]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionBatch {
    pub(crate) grid: Grid,
    pub(crate) channels: usize,
    pub(crate) count: usize,
    pub(crate) values: Vec<f64>,
}

impl FunctionBatch {
    pub fn new(grid: Grid, channels: usize, count: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("a batch needs at least one channel"));
        }
        let expected = count * channels * grid.node_count();
        if values.len() != expected {
            return Err(Error::shape(format!(
                "expected {expected} batch values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            grid,
            channels,
            count,
            values,
        })
    }

    pub fn zeros(grid: Grid, channels: usize, count: usize) -> Self {
        let n = grid.node_count() * channels * count;
        Self {
            grid,
            channels,
            count,
            values: vec![0.0; n],
        }
    }

    pub fn from_functions(functions: &[GridFunction]) -> Result<Self> {
        let first = functions
            .first()
            .ok_or_else(|| Error::invalid("cannot build a batch from zero functions"))?;
        let mut values = Vec::with_capacity(functions.len() * first.values.len());
        for f in functions {
            f.grid.ensure_same(&first.grid, "batch assembly")?;
            if f.channels != first.channels {
                return Err(Error::shape("batch members differ in channel count"));
            }
            values.extend_from_slice(&f.values);
        }
        Ok(Self {
            grid: first.grid.clone(),
            channels: first.channels,
            count: functions.len(),
            values,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Length of one sample (`channels * nodes`).
    pub fn sample_len(&self) -> usize {
        self.channels * self.grid.node_count()
    }

    pub fn sample_values(&self, i: usize) -> &[f64] {
        let len = self.sample_len();
        &self.values[i * len..(i + 1) * len]
    }

    pub fn sample(&self, i: usize) -> GridFunction {
        GridFunction {
            grid: self.grid.clone(),
            channels: self.channels,
            values: self.sample_values(i).to_vec(),
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = GridFunction> + '_ {
        (0..self.count).map(|i| self.sample(i))
    }

    /// Sub-batch made of the listed samples, in the listed order.
    pub fn select(&self, indices: &[usize]) -> FunctionBatch {
        let len = self.sample_len();
        let mut values = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            values.extend_from_slice(self.sample_values(i));
        }
        FunctionBatch {
            grid: self.grid.clone(),
            channels: self.channels,
            count: indices.len(),
            values,
        }
    }

    /// Keep only one channel of every sample.
    pub fn channel_slice(&self, channel: usize) -> Result<FunctionBatch> {
        if channel >= self.channels {
            return Err(Error::invalid(format!(
                "channel {channel} out of range for {} channels",
                self.channels
            )));
        }
        let n = self.grid.node_count();
        let mut values = Vec::with_capacity(self.count * n);
        for s in 0..self.count {
            let base = s * self.sample_len() + channel * n;
            values.extend_from_slice(&self.values[base..base + n]);
        }
        Ok(FunctionBatch {
            grid: self.grid.clone(),
            channels: 1,
            count: self.count,
            values,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn flipped(self) -> Self {
        match self {
            Parity::Even => Parity::Odd,
            Parity::Odd => Parity::Even,
        }
    }
}

/// Checkerboard indicator: node `i` is on when the sum of its per-axis
/// indices has the requested parity.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckerboardMask {
    grid: Grid,
    parity: Parity,
    indicator: Vec<bool>,
}

impl CheckerboardMask {
    pub fn new(grid: &Grid, parity: Parity) -> Self {
        let want = match parity {
            Parity::Even => 0,
            Parity::Odd => 1,
        };
        let indicator = (0..grid.node_count())
            .map(|node| {
                let [i, j] = grid.multi_index(node);
                (i + j) % 2 == want
            })
            .collect();
        Self {
            grid: grid.clone(),
            parity,
            indicator,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn parity(&self) -> Parity {
        self.parity
    }

    pub fn indicator(&self) -> &[bool] {
        &self.indicator
    }

    pub fn on_count(&self) -> usize {
        self.indicator.iter().filter(|&&b| b).count()
    }
}

pub fn checkerboard_mask(grid: &Grid, parity: Parity) -> CheckerboardMask {
    CheckerboardMask::new(grid, parity)
}

/// Values of a function split by a checkerboard mask, each stored
/// `[channel][selected node]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainHalves {
    pub on: Vec<f64>,
    pub off: Vec<f64>,
    pub channels: usize,
}

pub fn split_domain(f: &GridFunction, mask: &CheckerboardMask) -> Result<DomainHalves> {
    f.grid.ensure_same(&mask.grid, "split_domain")?;
    let mut on = Vec::new();
    let mut off = Vec::new();
    for c in 0..f.channels {
        for (v, &m) in f.channel(c).iter().zip(&mask.indicator) {
            if m {
                on.push(*v);
            } else {
                off.push(*v);
            }
        }
    }
    Ok(DomainHalves {
        on,
        off,
        channels: f.channels,
    })
}

pub fn concat_domain(halves: &DomainHalves, mask: &CheckerboardMask) -> Result<GridFunction> {
    let n = mask.grid.node_count();
    let n_on = mask.on_count();
    let c = halves.channels;
    if halves.on.len() != c * n_on || halves.off.len() != c * (n - n_on) {
        return Err(Error::shape("domain halves do not match the mask"));
    }
    let mut values = Vec::with_capacity(c * n);
    let (mut i_on, mut i_off) = (0, 0);
    for _ in 0..c {
        for &m in &mask.indicator {
            if m {
                values.push(halves.on[i_on]);
                i_on += 1;
            } else {
                values.push(halves.off[i_off]);
                i_off += 1;
            }
        }
    }
    GridFunction::new(mask.grid.clone(), c, values)
}

pub fn split_codomain(f: &GridFunction) -> Result<(GridFunction, GridFunction)> {
    if f.channels < 2 || !f.channels.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "codomain split needs an even channel count >= 2, got {}",
            f.channels
        )));
    }
    let half = f.channels / 2;
    let cut = half * f.grid.node_count();
    Ok((
        GridFunction {
            grid: f.grid.clone(),
            channels: half,
            values: f.values[..cut].to_vec(),
        },
        GridFunction {
            grid: f.grid.clone(),
            channels: half,
            values: f.values[cut..].to_vec(),
        },
    ))
}

pub fn concat_codomain(h1: &GridFunction, h2: &GridFunction) -> Result<GridFunction> {
    h1.grid.ensure_same(&h2.grid, "concat_codomain")?;
    let mut values = h1.values.clone();
    values.extend_from_slice(&h2.values);
    GridFunction::new(h1.grid.clone(), h1.channels + h2.channels, values)
}

/// A strictly increasing set of node indices on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexSet {
    grid: Grid,
    indices: Vec<usize>,
}

impl IndexSet {
    pub fn new(grid: &Grid, indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= grid.node_count()) {
            return Err(Error::invalid(format!(
                "node index {bad} out of range for {} nodes",
                grid.node_count()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("node indices must be strictly increasing"));
        }
        Ok(Self {
            grid: grid.clone(),
            indices,
        })
    }

    /// Sorts and deduplicates before validating.
    pub fn from_unsorted(grid: &Grid, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        Self::new(grid, indices)
    }

    pub fn full(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            indices: (0..grid.node_count()).collect(),
        }
    }

    pub fn empty(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            indices: Vec::new(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn coordinates(&self) -> Vec<[f64; 2]> {
        let all = self.grid.node_coordinates();
        self.indices.iter().map(|&i| all[i]).collect()
    }
}

/// Point evaluation `f|_D`, returned `[channel][point]`.
pub fn restrict(f: &GridFunction, points: &IndexSet) -> Result<Vec<f64>> {
    f.grid.ensure_same(&points.grid, "restrict")?;
    Ok((0..f.channels)
        .flat_map(|c| points.indices.iter().map(move |&i| f.channel(c)[i]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line_fn(values: &[f64]) -> GridFunction {
        GridFunction::new(Grid::line(values.len()).unwrap(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn regular_grid_coordinates() {
        let g = make_regular_grid(1, &[4]).unwrap();
        let x = g.axis_coordinates(0);
        assert_eq!(x, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);

        let g = make_regular_grid(2, &[2, 2]).unwrap();
        assert_eq!(
            g.node_coordinates(),
            vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]
        );
        assert_eq!(make_regular_grid(1, &[128]).unwrap().node_count(), 128);
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(Grid::new(3, &[2, 2, 2]).is_err());
        assert!(Grid::new(0, &[]).is_err());
        assert!(Grid::new(1, &[1]).is_err());
        assert!(Grid::new(2, &[4, 1]).is_err());
    }

    #[test]
    fn node_lookup_by_coordinate() {
        let g = Grid::line(5).unwrap();
        assert_eq!(g.node_at(&[0.5], 1e-9), Some(2));
        assert_eq!(g.node_at(&[0.4], 1e-9), None);
        let g = Grid::square(3).unwrap();
        assert_eq!(g.node_at(&[1.0, 0.5], 1e-9), Some(7));
    }

    #[test]
    fn checkerboard_patterns() {
        let m = checkerboard_mask(&Grid::line(4).unwrap(), Parity::Even);
        assert_eq!(m.indicator(), &[true, false, true, false]);
        let m = checkerboard_mask(&Grid::square(2).unwrap(), Parity::Even);
        assert_eq!(m.indicator(), &[true, false, false, true]);
    }

    #[test]
    fn checkerboard_partition_and_alternation() {
        for grid in [Grid::line(7).unwrap(), Grid::new(2, &[5, 6]).unwrap()] {
            let even = checkerboard_mask(&grid, Parity::Even);
            let odd = checkerboard_mask(&grid, Parity::Odd);
            assert_eq!(even.on_count() + odd.on_count(), grid.node_count());
            for (a, b) in even.indicator().iter().zip(odd.indicator()) {
                assert_ne!(a, b);
            }
            let cols = grid.cols();
            for node in 0..grid.node_count() {
                if (node + 1) % cols != 0 {
                    assert_ne!(even.indicator()[node], even.indicator()[node + 1]);
                }
                if node + cols < grid.node_count() && grid.dims() == 2 {
                    assert_ne!(even.indicator()[node], even.indicator()[node + cols]);
                }
            }
        }
    }

    #[test]
    fn domain_split_examples() {
        let f = line_fn(&[1.0, 2.0, 3.0, 4.0]);
        let mask = checkerboard_mask(f.grid(), Parity::Even);
        let halves = split_domain(&f, &mask).unwrap();
        assert_eq!(halves.on, vec![1.0, 3.0]);
        assert_eq!(halves.off, vec![2.0, 4.0]);
        assert_eq!(concat_domain(&halves, &mask).unwrap(), f);

        let c = line_fn(&[5.0; 6]);
        let halves = split_domain(&c, &checkerboard_mask(c.grid(), Parity::Odd)).unwrap();
        assert!(halves.on.iter().chain(&halves.off).all(|&v| v == 5.0));
    }

    #[test]
    fn domain_split_rejects_grid_mismatch() {
        let f = line_fn(&[1.0, 2.0, 3.0, 4.0]);
        let mask = checkerboard_mask(&Grid::line(5).unwrap(), Parity::Even);
        assert!(split_domain(&f, &mask).is_err());
    }

    #[test]
    fn codomain_split_examples() {
        let g = Grid::line(3).unwrap();
        let f = GridFunction::new(g.clone(), 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let (a, b) = split_codomain(&f).unwrap();
        assert_eq!((a.channels(), b.channels()), (1, 1));
        assert_eq!(a.values(), &[1., 2., 3.]);
        assert_eq!(concat_codomain(&a, &b).unwrap(), f);

        let f4 = GridFunction::from_fn(g.clone(), 4, |c, x| c as f64 + x[0]);
        let (a, b) = split_codomain(&f4).unwrap();
        assert_eq!((a.channels(), b.channels()), (2, 2));

        let odd = GridFunction::zeros(g, 3);
        assert!(split_codomain(&odd).is_err());
    }

    #[test]
    fn restriction_examples() {
        let f = line_fn(&[1.0, 2.0, 3.0, 4.0]);
        let all = IndexSet::full(f.grid());
        assert_eq!(restrict(&f, &all).unwrap(), f.values());
        assert!(restrict(&f, &IndexSet::empty(f.grid())).unwrap().is_empty());
        let pts = IndexSet::new(f.grid(), vec![0, 2]).unwrap();
        assert_eq!(restrict(&f, &pts).unwrap(), vec![1.0, 3.0]);
        assert!(IndexSet::new(f.grid(), vec![4]).is_err());
        assert!(IndexSet::new(f.grid(), vec![2, 2]).is_err());
    }

    #[test]
    fn non_finite_values_rejected() {
        let g = Grid::line(2).unwrap();
        assert!(GridFunction::new(g, 1, vec![0.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn split_concat_roundtrips(values in proptest::collection::vec(-1e6f64..1e6, 2..40),
                                    odd in any::<bool>()) {
            let f = line_fn(&values);
            let parity = if odd { Parity::Odd } else { Parity::Even };
            let mask = checkerboard_mask(f.grid(), parity);
            let back = concat_domain(&split_domain(&f, &mask).unwrap(), &mask).unwrap();
            prop_assert_eq!(&back, &f);

            let two = GridFunction::new(f.grid().clone(), 2,
                values.iter().chain(values.iter().rev()).copied().collect()).unwrap();
            let (a, b) = split_codomain(&two).unwrap();
            prop_assert_eq!(concat_codomain(&a, &b).unwrap(), two);
        }

        #[test]
        fn restriction_commutes_with_roundtrip(values in proptest::collection::vec(-10f64..10., 4..20),
                                               pick in proptest::collection::vec(any::<bool>(), 20)) {
            let f = line_fn(&values);
            let idx: Vec<usize> = (0..values.len()).filter(|&i| pick[i]).collect();
            let pts = IndexSet::new(f.grid(), idx).unwrap();
            let mask = checkerboard_mask(f.grid(), Parity::Even);
            let back = concat_domain(&split_domain(&f, &mask).unwrap(), &mask).unwrap();
            prop_assert_eq!(restrict(&back, &pts).unwrap(), restrict(&f, &pts).unwrap());
        }
    }
}
