//! The invertible operator flow.
//!
//! A model is a stack of blocks, each an actnorm followed by an affine
//! coupling. In the data → latent direction (`model_inverse`, ℱ) block `k`
//! maps `x ↦ coupling_k(actnorm_k(x))`; the latent → data direction
//! (`model_forward`, 𝒢) undoes the blocks in reverse order. The likelihood of a
//! discretised function `u` is the latent GP density of `a = ℱ(u)` plus the
//! accumulated log-determinants of ℱ.
//!
//! Batches are flat buffers laid out `[sample][channel][node]`.

use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{GaussianMomentPair, GaussianProcessSpec, GpFactor};
use crate::grid::{checkerboard_mask, FunctionBatch, Grid, GridFunction, Parity};
use crate::spectral::{Activation, FourierBasis, SpectralOperator, SpectralOperatorConfig, SpectralTape};

pub const DEFAULT_BLOCKS: usize = 8;
pub const DEFAULT_SCALE_BOUND: f64 = 2.0;

/// How a coupling block splits its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    /// Checkerboard split of the grid nodes.
    Domain,
    /// Split of the channels into two halves.
    Codomain,
}

/// Partition of one block; consecutive blocks alternate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockPartition {
    /// Even checkerboard nodes condition, odd nodes are transformed.
    DomainEven,
    DomainOdd,
    /// First channel half conditions, second half is transformed.
    CodomainFirst,
    CodomainSecond,
}

impl BlockPartition {
    pub fn for_block(mode: PartitionMode, k: usize) -> Self {
        match (mode, k % 2) {
            (PartitionMode::Domain, 0) => BlockPartition::DomainEven,
            (PartitionMode::Domain, _) => BlockPartition::DomainOdd,
            (PartitionMode::Codomain, 0) => BlockPartition::CodomainFirst,
            (PartitionMode::Codomain, _) => BlockPartition::CodomainSecond,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: usize,
    pub data_channels: usize,
    pub partition: PartitionMode,
    pub blocks: usize,
    pub modes: usize,
    pub width: usize,
    pub depth: usize,
    pub scale_bound: f64,
    pub latent: GaussianProcessSpec,
    /// Diagonal nugget on the latent covariance; defaults to 1e-6 x variance.
    #[serde(default)]
    pub latent_jitter: Option<f64>,
}

impl ModelConfig {
    /// Desk-scale defaults: 8 blocks, depth 3, width 32, 16 modes in 1D and 12
    /// per axis in 2D, scale bound 2.
    pub fn new(dims: usize, data_channels: usize, partition: PartitionMode, latent: GaussianProcessSpec) -> Self {
        Self {
            dims,
            data_channels,
            partition,
            blocks: DEFAULT_BLOCKS,
            modes: if dims == 1 { 16 } else { 12 },
            width: 32,
            depth: 3,
            scale_bound: DEFAULT_SCALE_BOUND,
            latent,
            latent_jitter: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.dims) {
            return Err(Error::Config(format!("dims must be 1 or 2, got {}", self.dims)));
        }
        if self.data_channels == 0 {
            return Err(Error::Config("data_channels must be at least 1".into()));
        }
        if self.partition == PartitionMode::Codomain && !self.data_channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "codomain partition needs an even channel count, got {}",
                self.data_channels
            )));
        }
        if self.modes == 0 || self.width == 0 {
            return Err(Error::Config("modes and width must be at least 1".into()));
        }
        if !(self.scale_bound > 0.0) || !self.scale_bound.is_finite() {
            return Err(Error::Config("scale_bound must be positive".into()));
        }
        if let Some(j) = self.latent_jitter {
            if !(j >= 0.0) {
                return Err(Error::Config("latent_jitter must be >= 0".into()));
            }
        }
        self.latent.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn jitter(&self) -> f64 {
        self.latent_jitter.unwrap_or_else(|| self.latent.default_jitter())
    }

    pub fn network(&self) -> SpectralOperatorConfig {
        let c = self.data_channels;
        let (in_channels, out_channels) = match self.partition {
            PartitionMode::Domain => (c + 1, 2 * c),
            PartitionMode::Codomain => (c / 2, c),
        };
        SpectralOperatorConfig {
            dims: self.dims,
            modes: self.modes,
            width: self.width,
            depth: self.depth,
            in_channels,
            out_channels,
            activation: Activation::Gelu,
        }
    }
}

/// Per-channel actnorm parameters, `y = exp(log_scale) x + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActNormParams {
    pub log_scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ActNormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            log_scale: vec![0.0; channels],
            bias: vec![0.0; channels],
        }
    }

    /// From positive scales.
    pub fn from_scale(scale: &[f64], bias: &[f64]) -> Result<Self> {
        if scale.len() != bias.len() {
            return Err(Error::shape("scale and bias lengths differ"));
        }
        if let Some(s) = scale.iter().find(|&&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("actnorm scale must be positive, got {s}")));
        }
        Ok(Self {
            log_scale: scale.iter().map(|s| s.ln()).collect(),
            bias: bias.to_vec(),
        })
    }
}

/// Actnorm in the data → latent direction, with its log-determinant
/// `nodes · Σ_c log s_c`.
pub fn actnorm_forward(f: &GridFunction, p: &ActNormParams) -> Result<(GridFunction, f64)> {
    check_actnorm(f, p)?;
    let n = f.grid().node_count();
    let mut v = f.values().to_vec();
    actnorm_apply(&p.log_scale, &p.bias, &mut v, 1, n);
    let logdet = n as f64 * p.log_scale.iter().sum::<f64>();
    Ok((GridFunction::new(f.grid().clone(), f.channels(), v)?, logdet))
}

pub fn actnorm_inverse(f: &GridFunction, p: &ActNormParams) -> Result<GridFunction> {
    check_actnorm(f, p)?;
    let n = f.grid().node_count();
    let mut v = f.values().to_vec();
    actnorm_unapply(&p.log_scale, &p.bias, &mut v, 1, n);
    GridFunction::new(f.grid().clone(), f.channels(), v)
}

fn check_actnorm(f: &GridFunction, p: &ActNormParams) -> Result<()> {
    if p.log_scale.len() != f.channels() || p.bias.len() != f.channels() {
        return Err(Error::shape(format!(
            "actnorm has {} channels, function has {}",
            p.log_scale.len(),
            f.channels()
        )));
    }
    if p.log_scale.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("actnorm scale must be positive and finite"));
    }
    Ok(())
}

fn actnorm_apply(ls: &[f64], b: &[f64], x: &mut [f64], batch: usize, n: usize) {
    let c = ls.len();
    for s in 0..batch {
        for ch in 0..c {
            let (e, bb) = (ls[ch].exp(), b[ch]);
            x[(s * c + ch) * n..(s * c + ch + 1) * n].iter_mut().for_each(|v| *v = e * *v + bb);
        }
    }
}

fn actnorm_unapply(ls: &[f64], b: &[f64], x: &mut [f64], batch: usize, n: usize) {
    let c = ls.len();
    for s in 0..batch {
        for ch in 0..c {
            let (e, bb) = ((-ls[ch]).exp(), b[ch]);
            x[(s * c + ch) * n..(s * c + ch + 1) * n].iter_mut().for_each(|v| *v = (*v - bb) * e);
        }
    }
}

/// Per-grid derived state: Fourier basis, latent factorisation and masks.
#[derive(Debug)]
pub struct GridCache {
    grid: Grid,
    basis: FourierBasis,
    prior: GpFactor,
    /// Indicator (1.0 / 0.0) of even and odd checkerboard nodes.
    masks: [Vec<f64>; 2],
}

impl GridCache {
    fn new(config: &ModelConfig, grid: &Grid) -> Result<Self> {
        // a block-free model never evaluates the basis, so any grid is fine
        let modes = if config.blocks == 0 {
            config.modes.min(grid.resolution().iter().min().copied().unwrap_or(2) / 2).max(1)
        } else {
            config.modes
        };
        let basis = FourierBasis::new(grid, modes)?;
        let prior = GpFactor::new(&config.latent, grid, config.jitter())?;
        let mask = |p| {
            checkerboard_mask(grid, p)
                .indicator()
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect()
        };
        Ok(Self {
            grid: grid.clone(),
            basis,
            prior,
            masks: [mask(Parity::Even), mask(Parity::Odd)],
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn prior(&self) -> &GpFactor {
        &self.prior
    }

    pub fn basis(&self) -> &FourierBasis {
        &self.basis
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockOffsets {
    log_scale: usize,
    bias: usize,
    net: usize,
}

/// Saved state of one block in the data → latent direction.
#[derive(Debug, Clone)]
struct BlockTapeU2A {
    /// Actnorm input.
    x: Vec<f64>,
    /// Coupling input (actnorm output).
    y1: Vec<f64>,
    /// Bounded log-scale field, zero off the transformed half.
    ls: Vec<f64>,
    net: SpectralTape,
}

/// Saved state of one block in the latent → data direction.
#[derive(Debug, Clone)]
struct BlockTapeA2U {
    /// Coupling-inverse output.
    y1: Vec<f64>,
    ls: Vec<f64>,
    net: SpectralTape,
}

/// Data → latent pass recorded for backpropagation.
#[derive(Debug, Clone)]
pub struct InverseTape {
    cache: Arc<GridCache>,
    batch: usize,
    blocks: Vec<BlockTapeU2A>,
}

/// Latent → data pass recorded for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    cache: Arc<GridCache>,
    batch: usize,
    /// Indexed by block number.
    blocks: Vec<BlockTapeA2U>,
}

/// Who trained this model and from which seeds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub init_seed: u64,
    #[serde(default)]
    pub data_seed: Option<u64>,
    #[serde(default)]
    pub train_seed: Option<u64>,
    /// Optimisation iterations applied so far.
    #[serde(default)]
    pub iteration: u64,
}

/// Neural operator flow with a Matérn GP latent.
#[derive(Debug)]
pub struct OpFlowModel {
    config: ModelConfig,
    network: SpectralOperator,
    offsets: Vec<BlockOffsets>,
    params: Vec<f64>,
    pub lineage: Lineage,
    cache: Mutex<Option<Arc<GridCache>>>,
}

impl Clone for OpFlowModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            network: self.network.clone(),
            offsets: self.offsets.clone(),
            params: self.params.clone(),
            lineage: self.lineage.clone(),
            cache: Mutex::new(self.cache.lock().expect("cache lock").clone()),
        }
    }
}

impl OpFlowModel {
    /// Fresh model: identity actnorms and zero final projections, so every
    /// block starts as the identity map.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, true)
    }

    /// As [`OpFlowModel::new`] but with random final projections, so the
    /// couplings are non-trivial from the start.
    pub fn new_random(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, false)
    }

    fn build(config: ModelConfig, seed: u64, zero_projection: bool) -> Result<Self> {
        config.validate()?;
        let network = SpectralOperator::new(config.network())?;
        let c = config.data_channels;
        let per_block = 2 * c + network.parameter_count();
        let offsets: Vec<BlockOffsets> = (0..config.blocks)
            .map(|k| {
                let base = k * per_block;
                BlockOffsets {
                    log_scale: base,
                    bias: base + c,
                    net: base + 2 * c,
                }
            })
            .collect();
        let mut params = vec![0.0; config.blocks * per_block];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for o in &offsets {
            let p = network.init_params(&mut rng, zero_projection);
            params[o.net..o.net + p.len()].copy_from_slice(&p);
        }
        Ok(Self {
            config,
            network,
            offsets,
            params,
            lineage: Lineage {
                init_seed: seed,
                ..Lineage::default()
            },
            cache: Mutex::new(None),
        })
    }

    /// Rebuild from a stored configuration and parameter vector.
    pub fn from_parts(config: ModelConfig, params: Vec<f64>, lineage: Lineage) -> Result<Self> {
        let mut m = Self::new(config, lineage.init_seed)?;
        if params.len() != m.params.len() {
            return Err(Error::shape(format!(
                "{} parameters supplied, model needs {}",
                params.len(),
                m.params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("model parameters must be finite"));
        }
        m.params = params;
        m.lineage = lineage;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn network(&self) -> &SpectralOperator {
        &self.network
    }

    pub fn block_count(&self) -> usize {
        self.config.blocks
    }

    pub fn channels(&self) -> usize {
        self.config.data_channels
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape("parameter vector length differs from model"));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn partition(&self, k: usize) -> BlockPartition {
        BlockPartition::for_block(self.config.partition, k)
    }

    pub fn actnorm(&self, k: usize) -> ActNormParams {
        let c = self.channels();
        let o = self.offsets[k];
        ActNormParams {
            log_scale: self.params[o.log_scale..o.log_scale + c].to_vec(),
            bias: self.params[o.bias..o.bias + c].to_vec(),
        }
    }

    pub fn set_actnorm(&mut self, k: usize, p: &ActNormParams) -> Result<()> {
        let c = self.channels();
        if p.log_scale.len() != c || p.bias.len() != c {
            return Err(Error::shape("actnorm channel count differs from model"));
        }
        let o = self.offsets[k];
        self.params[o.log_scale..o.log_scale + c].copy_from_slice(&p.log_scale);
        self.params[o.bias..o.bias + c].copy_from_slice(&p.bias);
        Ok(())
    }

    fn net_params(&self, k: usize) -> &[f64] {
        let o = self.offsets[k].net;
        &self.params[o..o + self.network.parameter_count()]
    }

    /// Cached basis, latent factorisation and masks for `grid`; refactorised
    /// whenever the grid changes.
    pub fn grid_cache(&self, grid: &Grid) -> Result<Arc<GridCache>> {
        if grid.dims() != self.config.dims {
            return Err(Error::shape(format!(
                "model is {}-dimensional, grid is {}-dimensional",
                self.config.dims,
                grid.dims()
            )));
        }
        let mut slot = self.cache.lock().expect("cache lock");
        if let Some(c) = slot.as_ref() {
            if c.grid == *grid {
                return Ok(Arc::clone(c));
            }
        }
        let fresh = Arc::new(GridCache::new(&self.config, grid)?);
        *slot = Some(Arc::clone(&fresh));
        Ok(fresh)
    }

    /// Latent GP moments on `grid`, flattened `[channel][node]`.
    pub fn latent_moments(&self, grid: &Grid) -> Result<GaussianMomentPair> {
        let cache = self.grid_cache(grid)?;
        let single = cache.prior.covariance();
        let n = grid.node_count();
        let c = self.channels();
        let mut cov = DMatrix::zeros(n * c, n * c);
        for ch in 0..c {
            cov.view_mut((ch * n, ch * n), (n, n)).copy_from(&single);
        }
        Ok(GaussianMomentPair {
            mean: nalgebra::DVector::from_element(n * c, self.config.latent.mean),
            covariance: cov,
        })
    }

    fn check_batch(&self, batch: &FunctionBatch) -> Result<()> {
        if batch.channels() != self.channels() {
            return Err(Error::shape(format!(
                "model has {} channels, data has {}",
                self.channels(),
                batch.channels()
            )));
        }
        Ok(())
    }

    // ----- coupling pieces -------------------------------------------------

    /// Network input built from the conditioning half of `x`.
    fn net_input(&self, cache: &GridCache, part: BlockPartition, x: &[f64], batch: usize) -> Vec<f64> {
        let c = self.channels();
        let n = cache.grid.node_count();
        match part {
            BlockPartition::DomainEven | BlockPartition::DomainOdd => {
                let m = &cache.masks[(part == BlockPartition::DomainOdd) as usize];
                let mut out = vec![0.0; batch * (c + 1) * n];
                for b in 0..batch {
                    for ch in 0..c {
                        let src = &x[(b * c + ch) * n..(b * c + ch + 1) * n];
                        let dst = &mut out[(b * (c + 1) + ch) * n..(b * (c + 1) + ch + 1) * n];
                        for ((d, s), mm) in dst.iter_mut().zip(src).zip(m) {
                            *d = s * mm;
                        }
                    }
                    out[(b * (c + 1) + c) * n..(b * (c + 1) + c + 1) * n].copy_from_slice(m);
                }
                out
            }
            BlockPartition::CodomainFirst | BlockPartition::CodomainSecond => {
                let h = c / 2;
                let first = if part == BlockPartition::CodomainFirst { 0 } else { h };
                let mut out = Vec::with_capacity(batch * h * n);
                for b in 0..batch {
                    out.extend_from_slice(&x[(b * c + first) * n..(b * c + first + h) * n]);
                }
                out
            }
        }
    }

    fn net_input_backward(
        &self,
        cache: &GridCache,
        part: BlockPartition,
        dinput: &[f64],
        batch: usize,
        dx: &mut [f64],
    ) {
        let c = self.channels();
        let n = cache.grid.node_count();
        match part {
            BlockPartition::DomainEven | BlockPartition::DomainOdd => {
                let m = &cache.masks[(part == BlockPartition::DomainOdd) as usize];
                for b in 0..batch {
                    for ch in 0..c {
                        let src = &dinput[(b * (c + 1) + ch) * n..(b * (c + 1) + ch + 1) * n];
                        let dst = &mut dx[(b * c + ch) * n..(b * c + ch + 1) * n];
                        for ((d, s), mm) in dst.iter_mut().zip(src).zip(m) {
                            *d += s * mm;
                        }
                    }
                }
            }
            BlockPartition::CodomainFirst | BlockPartition::CodomainSecond => {
                let h = c / 2;
                let first = if part == BlockPartition::CodomainFirst { 0 } else { h };
                for b in 0..batch {
                    let src = &dinput[b * h * n..(b + 1) * h * n];
                    let dst = &mut dx[(b * c + first) * n..(b * c + first + h) * n];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
    }

    /// For data channel `ch` and node `node`: the network output channels
    /// carrying its raw log-scale and shift, if the entry is transformed.
    fn output_slots(&self, cache: &GridCache, part: BlockPartition, ch: usize, node: usize) -> Option<(usize, usize)> {
        let c = self.channels();
        match part {
            BlockPartition::DomainEven | BlockPartition::DomainOdd => {
                let m = &cache.masks[(part == BlockPartition::DomainOdd) as usize];
                (m[node] == 0.0).then_some((ch, c + ch))
            }
            BlockPartition::CodomainFirst | BlockPartition::CodomainSecond => {
                let h = c / 2;
                let transformed = if part == BlockPartition::CodomainFirst { h } else { 0 };
                (ch >= transformed && ch < transformed + h).then(|| (ch - transformed, h + ch - transformed))
            }
        }
    }

    /// Expand raw network output to full-size `(log_scale, shift)` fields,
    /// zero on the conditioning half.
    fn coupling_fields(&self, cache: &GridCache, part: BlockPartition, raw: &[f64], batch: usize) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels();
        let n = cache.grid.node_count();
        let oc = self.network.config().out_channels;
        let bound = self.config.scale_bound;
        let mut ls = vec![0.0; batch * c * n];
        let mut sh = vec![0.0; batch * c * n];
        for ch in 0..c {
            for node in 0..n {
                if let Some((si, hi)) = self.output_slots(cache, part, ch, node) {
                    for b in 0..batch {
                        let at = (b * c + ch) * n + node;
                        ls[at] = bound * (raw[(b * oc + si) * n + node] / bound).tanh();
                        sh[at] = raw[(b * oc + hi) * n + node];
                    }
                }
            }
        }
        (ls, sh)
    }

    fn coupling_fields_backward(
        &self,
        cache: &GridCache,
        part: BlockPartition,
        ls: &[f64],
        dls: &[f64],
        dsh: &[f64],
        batch: usize,
    ) -> Vec<f64> {
        let c = self.channels();
        let n = cache.grid.node_count();
        let oc = self.network.config().out_channels;
        let bound = self.config.scale_bound;
        let mut draw = vec![0.0; batch * oc * n];
        for ch in 0..c {
            for node in 0..n {
                if let Some((si, hi)) = self.output_slots(cache, part, ch, node) {
                    for b in 0..batch {
                        let at = (b * c + ch) * n + node;
                        let t = ls[at] / bound;
                        draw[(b * oc + si) * n + node] = dls[at] * (1.0 - t * t);
                        draw[(b * oc + hi) * n + node] = dsh[at];
                    }
                }
            }
        }
        draw
    }

    fn transformed_mask(&self, cache: &GridCache, part: BlockPartition) -> Vec<bool> {
        let c = self.channels();
        let n = cache.grid.node_count();
        (0..c * n)
            .map(|i| self.output_slots(cache, part, i / n, i % n).is_some())
            .collect()
    }

    // ----- data → latent ---------------------------------------------------

    fn run_inverse(
        &self,
        cache: &Arc<GridCache>,
        mut x: Vec<f64>,
        batch: usize,
        record: bool,
        per_block: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<(Vec<f64>, Vec<f64>, Option<InverseTape>)> {
        let c = self.channels();
        let n = cache.grid.node_count();
        let mut logdet = vec![0.0; batch];
        let mut tapes = Vec::new();
        let mut block_logdets = Vec::new();
        for k in 0..self.block_count() {
            let part = self.partition(k);
            let act = self.actnorm(k);
            let x_in = if record { Some(x.clone()) } else { None };
            actnorm_apply(&act.log_scale, &act.bias, &mut x, batch, n);
            let act_ld = n as f64 * act.log_scale.iter().sum::<f64>();
            let inp = self.net_input(cache, part, &x, batch);
            let (raw, net_tape) = if record {
                let (r, t) = self.network.apply_taped(&cache.basis, self.net_params(k), &inp, batch)?;
                (r, Some(t))
            } else {
                (self.network.apply(&cache.basis, self.net_params(k), &inp, batch)?, None)
            };
            let (ls, sh) = self.coupling_fields(cache, part, &raw, batch);
            let y1 = if record { Some(x.clone()) } else { None };
            let mut lds = vec![act_ld; batch];
            for b in 0..batch {
                let r = b * c * n..(b + 1) * c * n;
                for ((v, l), s) in x[r.clone()].iter_mut().zip(&ls[r.clone()]).zip(&sh[r.clone()]) {
                    *v = *v * l.exp() + s;
                }
                lds[b] += ls[r].iter().sum::<f64>();
            }
            for (t, l) in logdet.iter_mut().zip(&lds) {
                *t += l;
            }
            block_logdets.push(lds);
            if let (Some(x_in), Some(y1), Some(net)) = (x_in, y1, net_tape) {
                tapes.push(BlockTapeU2A { x: x_in, y1, ls, net });
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite latent values in the data-to-latent pass".into()));
        }
        if let Some(out) = per_block {
            *out = block_logdets;
        }
        let tape = record.then(|| InverseTape {
            cache: Arc::clone(cache),
            batch,
            blocks: tapes,
        });
        Ok((x, logdet, tape))
    }

    /// ℱ on a batch: latent batch and per-sample log-determinants of ∂a/∂u.
    pub fn inverse_batch(&self, u: &FunctionBatch) -> Result<(FunctionBatch, Vec<f64>)> {
        self.check_batch(u)?;
        let cache = self.grid_cache(u.grid())?;
        let (a, ld, _) = self.run_inverse(&cache, u.values().to_vec(), u.count(), false, None)?;
        Ok((FunctionBatch::new(u.grid().clone(), self.channels(), u.count(), a)?, ld))
    }

    /// As [`OpFlowModel::inverse_batch`], recording the pass for
    /// [`OpFlowModel::inverse_backward`].
    pub fn inverse_taped(&self, u: &FunctionBatch) -> Result<(Vec<f64>, Vec<f64>, InverseTape)> {
        self.check_batch(u)?;
        let cache = self.grid_cache(u.grid())?;
        let (a, ld, tape) = self.run_inverse(&cache, u.values().to_vec(), u.count(), true, None)?;
        Ok((a, ld, tape.expect("tape recorded")))
    }

    /// Backpropagate `da` (gradient w.r.t. the latent batch) and `dlogdet`
    /// (per-sample gradient w.r.t. the log-determinant) through ℱ.
    /// Parameter gradients are accumulated into `dparams` when given; the
    /// gradient w.r.t. the data batch is returned.
    pub fn inverse_backward(
        &self,
        tape: &InverseTape,
        da: &[f64],
        dlogdet: &[f64],
        mut dparams: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let cache = &tape.cache;
        let batch = tape.batch;
        let c = self.channels();
        let n = cache.grid.node_count();
        let np = self.network.parameter_count();
        assert_eq!(da.len(), batch * c * n, "latent gradient size");
        assert_eq!(dlogdet.len(), batch, "logdet gradient size");
        let mut dy = da.to_vec();
        for k in (0..self.block_count()).rev() {
            let part = self.partition(k);
            let t = &tape.blocks[k];
            let act = self.actnorm(k);
            let tau = self.transformed_mask(cache, part);
            // coupling: y = y1 e^{ls} + sh on the transformed half
            let mut dls = vec![0.0; batch * c * n];
            let mut dsh = vec![0.0; batch * c * n];
            let mut dy1 = vec![0.0; batch * c * n];
            for b in 0..batch {
                for i in 0..c * n {
                    let at = b * c * n + i;
                    let e = t.ls[at].exp();
                    dy1[at] = dy[at] * e;
                    if tau[i] {
                        dls[at] = dy[at] * t.y1[at] * e + dlogdet[b];
                        dsh[at] = dy[at];
                    }
                }
            }
            let draw = self.coupling_fields_backward(cache, part, &t.ls, &dls, &dsh, batch);
            let inp_len = batch * self.network.config().in_channels * n;
            let mut dinp = vec![0.0; inp_len];
            let o = self.offsets[k];
            let dnet = dparams.as_deref_mut().map(|d| &mut d[o.net..o.net + np]);
            self.network
                .backward(&cache.basis, self.net_params(k), &t.net, &draw, dnet, Some(&mut dinp));
            self.net_input_backward(cache, part, &dinp, batch, &mut dy1);
            // actnorm: y1 = e^{ls_c} x + b_c
            if let Some(d) = dparams.as_deref_mut() {
                let total_g: f64 = dlogdet.iter().sum();
                for ch in 0..c {
                    let e = act.log_scale[ch].exp();
                    let mut gls = n as f64 * total_g;
                    let mut gb = 0.0;
                    for b in 0..batch {
                        let r = (b * c + ch) * n..(b * c + ch + 1) * n;
                        for (g, x) in dy1[r.clone()].iter().zip(&t.x[r]) {
                            gls += g * x * e;
                            gb += g;
                        }
                    }
                    d[o.log_scale + ch] += gls;
                    d[o.bias + ch] += gb;
                }
            }
            for b in 0..batch {
                for ch in 0..c {
                    let e = act.log_scale[ch].exp();
                    dy1[(b * c + ch) * n..(b * c + ch + 1) * n].iter_mut().for_each(|g| *g *= e);
                }
            }
            dy = dy1;
        }
        dy
    }

    // ----- latent → data ---------------------------------------------------

    fn run_forward(
        &self,
        cache: &Arc<GridCache>,
        mut y: Vec<f64>,
        batch: usize,
        record: bool,
    ) -> Result<(Vec<f64>, Option<ForwardTape>)> {
        let c = self.channels();
        let n = cache.grid.node_count();
        let mut tapes: Vec<Option<BlockTapeA2U>> = vec![None; self.block_count()];
        for k in (0..self.block_count()).rev() {
            let part = self.partition(k);
            let inp = self.net_input(cache, part, &y, batch);
            let (raw, net_tape) = if record {
                let (r, t) = self.network.apply_taped(&cache.basis, self.net_params(k), &inp, batch)?;
                (r, Some(t))
            } else {
                (self.network.apply(&cache.basis, self.net_params(k), &inp, batch)?, None)
            };
            let (ls, sh) = self.coupling_fields(cache, part, &raw, batch);
            for ((v, l), s) in y.iter_mut().zip(&ls).zip(&sh) {
                *v = (*v - s) * (-l).exp();
            }
            if let Some(net) = net_tape {
                tapes[k] = Some(BlockTapeA2U {
                    y1: y.clone(),
                    ls,
                    net,
                });
            }
            let act = self.actnorm(k);
            actnorm_unapply(&act.log_scale, &act.bias, &mut y, batch, n);
        }
        debug_assert_eq!(y.len(), batch * c * n);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite values in the latent-to-data pass".into()));
        }
        let tape = record.then(|| ForwardTape {
            cache: Arc::clone(cache),
            batch,
            blocks: tapes.into_iter().map(|t| t.expect("every block recorded")).collect(),
        });
        Ok((y, tape))
    }

    /// 𝒢 on a batch.
    pub fn forward_batch(&self, a: &FunctionBatch) -> Result<FunctionBatch> {
        self.check_batch(a)?;
        let cache = self.grid_cache(a.grid())?;
        let (u, _) = self.run_forward(&cache, a.values().to_vec(), a.count(), false)?;
        FunctionBatch::new(a.grid().clone(), self.channels(), a.count(), u)
    }

    pub fn forward_taped(&self, a: &FunctionBatch) -> Result<(Vec<f64>, ForwardTape)> {
        self.check_batch(a)?;
        let cache = self.grid_cache(a.grid())?;
        let (u, tape) = self.run_forward(&cache, a.values().to_vec(), a.count(), true)?;
        Ok((u, tape.expect("tape recorded")))
    }

    /// Gradient w.r.t. the latent batch of `⟨du, 𝒢(a)⟩`.
    pub fn forward_backward(&self, tape: &ForwardTape, du: &[f64]) -> Vec<f64> {
        let cache = &tape.cache;
        let batch = tape.batch;
        let c = self.channels();
        let n = cache.grid.node_count();
        let mut dx = du.to_vec();
        for k in 0..self.block_count() {
            let part = self.partition(k);
            let t = &tape.blocks[k];
            let act = self.actnorm(k);
            // actnorm inverse: x = (y1 - b) e^{-ls_c}
            for b in 0..batch {
                for ch in 0..c {
                    let e = (-act.log_scale[ch]).exp();
                    dx[(b * c + ch) * n..(b * c + ch + 1) * n].iter_mut().for_each(|g| *g *= e);
                }
            }
            // coupling inverse: y1 = (y2 - sh) e^{-ls} with (ls, sh) from y2's conditioning half
            let tau = self.transformed_mask(cache, part);
            let mut dy2 = vec![0.0; batch * c * n];
            let mut dls = vec![0.0; batch * c * n];
            let mut dsh = vec![0.0; batch * c * n];
            for b in 0..batch {
                for i in 0..c * n {
                    let at = b * c * n + i;
                    let e = (-t.ls[at]).exp();
                    dy2[at] = dx[at] * e;
                    if tau[i] {
                        dsh[at] = -dx[at] * e;
                        dls[at] = -dx[at] * t.y1[at];
                    }
                }
            }
            let draw = self.coupling_fields_backward(cache, part, &t.ls, &dls, &dsh, batch);
            let mut dinp = vec![0.0; batch * self.network.config().in_channels * n];
            self.network
                .backward(&cache.basis, self.net_params(k), &t.net, &draw, None, Some(&mut dinp));
            self.net_input_backward(cache, part, &dinp, batch, &mut dy2);
            dx = dy2;
        }
        dx
    }

    // ----- single functions ------------------------------------------------

    /// ℱ(u) and `log |det ∂a/∂u|`.
    pub fn model_inverse(&self, u: &GridFunction) -> Result<(GridFunction, f64)> {
        let (a, ld) = self.inverse_batch(&u.clone().into_batch())?;
        Ok((a.sample(0), ld[0]))
    }

    /// 𝒢(a).
    pub fn model_forward(&self, a: &GridFunction) -> Result<GridFunction> {
        Ok(self.forward_batch(&a.clone().into_batch())?.sample(0))
    }

    /// ℱ(u) with the log-determinant of every block, in block order.
    pub fn inverse_with_block_logdets(&self, u: &GridFunction) -> Result<(GridFunction, Vec<f64>)> {
        if u.channels() != self.channels() {
            return Err(Error::shape("channel count differs from model"));
        }
        let cache = self.grid_cache(u.grid())?;
        let mut per = Vec::new();
        let (a, _, _) = self.run_inverse(&cache, u.values().to_vec(), 1, false, Some(&mut per))?;
        Ok((
            GridFunction::new(u.grid().clone(), self.channels(), a)?,
            per.into_iter().map(|v| v[0]).collect(),
        ))
    }

    /// Affine coupling of block `k` alone, data → latent direction.
    pub fn coupling_forward(&self, k: usize, f: &GridFunction) -> Result<(GridFunction, f64)> {
        let cache = self.block_check(k, f)?;
        let part = self.partition(k);
        let inp = self.net_input(&cache, part, f.values(), 1);
        let raw = self.network.apply(&cache.basis, self.net_params(k), &inp, 1)?;
        let (ls, sh) = self.coupling_fields(&cache, part, &raw, 1);
        let out: Vec<f64> = f.values().iter().zip(&ls).zip(&sh).map(|((v, l), s)| v * l.exp() + s).collect();
        Ok((GridFunction::new(f.grid().clone(), f.channels(), out)?, ls.iter().sum()))
    }

    /// Exact inverse of [`OpFlowModel::coupling_forward`].
    pub fn coupling_inverse(&self, k: usize, f: &GridFunction) -> Result<GridFunction> {
        let cache = self.block_check(k, f)?;
        let part = self.partition(k);
        let inp = self.net_input(&cache, part, f.values(), 1);
        let raw = self.network.apply(&cache.basis, self.net_params(k), &inp, 1)?;
        let (ls, sh) = self.coupling_fields(&cache, part, &raw, 1);
        let out: Vec<f64> = f.values().iter().zip(&ls).zip(&sh).map(|((v, l), s)| (v - s) * (-l).exp()).collect();
        GridFunction::new(f.grid().clone(), f.channels(), out)
    }

    /// Log-scale and shift fields block `k` would apply to `f`.
    pub fn coupling_network_apply(&self, k: usize, f: &GridFunction) -> Result<(GridFunction, GridFunction)> {
        let cache = self.block_check(k, f)?;
        let part = self.partition(k);
        let inp = self.net_input(&cache, part, f.values(), 1);
        let raw = self.network.apply(&cache.basis, self.net_params(k), &inp, 1)?;
        let (ls, sh) = self.coupling_fields(&cache, part, &raw, 1);
        Ok((
            GridFunction::new(f.grid().clone(), f.channels(), ls)?,
            GridFunction::new(f.grid().clone(), f.channels(), sh)?,
        ))
    }

    fn block_check(&self, k: usize, f: &GridFunction) -> Result<Arc<GridCache>> {
        if k >= self.block_count() {
            return Err(Error::invalid(format!("block {k} out of range")));
        }
        if f.channels() != self.channels() {
            return Err(Error::shape("channel count differs from model"));
        }
        self.grid_cache(f.grid())
    }

    // ----- densities -------------------------------------------------------

    /// Latent log-density of each sample in a flat `[sample][channel][node]`
    /// buffer; channels are independent copies of the latent GP.
    pub fn latent_log_density(&self, cache: &GridCache, a: &[f64]) -> Vec<f64> {
        let c = self.channels();
        let rows = cache.prior.log_density_rows(a);
        rows.chunks(c).map(|r| r.iter().sum()).collect()
    }

    /// Per-sample `log p(u)`.
    pub fn log_likelihood_batch(&self, u: &FunctionBatch) -> Result<Vec<f64>> {
        self.check_batch(u)?;
        let cache = self.grid_cache(u.grid())?;
        let mut out = Vec::with_capacity(u.count());
        const CHUNK: usize = 64;
        let len = u.sample_len();
        for start in (0..u.count()).step_by(CHUNK) {
            let end = (start + CHUNK).min(u.count());
            let (a, ld, _) = self.run_inverse(&cache, u.values()[start * len..end * len].to_vec(), end - start, false, None)?;
            let lp = self.latent_log_density(&cache, &a);
            out.extend(lp.iter().zip(&ld).map(|(p, l)| p + l));
        }
        Ok(out)
    }

    /// Exact point-evaluation log-likelihood `log p_A(ℱ(u)) + log|det ∂ℱ/∂u|`.
    pub fn log_likelihood(&self, u: &GridFunction) -> Result<f64> {
        Ok(self.log_likelihood_batch(&u.clone().into_batch())?[0])
    }

    /// `log p(u)` and its gradient w.r.t. `u`.
    pub fn log_likelihood_grad(&self, u: &GridFunction) -> Result<(f64, Vec<f64>)> {
        let batch = u.clone().into_batch();
        let (a, ld, tape) = self.inverse_taped(&batch)?;
        let lp = self.latent_log_density(&tape.cache, &a)[0] + ld[0];
        let mut da = vec![0.0; a.len()];
        tape.cache.prior.add_log_density_grad(&a, 1.0, &mut da);
        let du = self.inverse_backward(&tape, &da, &[1.0], None);
        Ok((lp, du))
    }

    // ----- sampling --------------------------------------------------------

    /// Latent GP draws on `grid`, `[sample][channel][node]`.
    pub fn sample_latent(&self, grid: &Grid, count: usize, seed: u64) -> Result<FunctionBatch> {
        let cache = self.grid_cache(grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = self.channels();
        let n = grid.node_count();
        let mut v = vec![0.0; count * c * n];
        cache.prior.sample_rows(&mut rng, count * c, &mut v);
        FunctionBatch::new(grid.clone(), c, count, v)
    }

    /// Generate `count` functions on `grid` (any resolution with at least
    /// twice the retained modes per axis).
    pub fn sample(&self, grid: &Grid, count: usize, seed: u64) -> Result<FunctionBatch> {
        if count == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let a = self.sample_latent(grid, count, seed)?;
        let cache = self.grid_cache(grid)?;
        let len = a.sample_len();
        let mut out = Vec::with_capacity(count * len);
        const CHUNK: usize = 64;
        for start in (0..count).step_by(CHUNK) {
            let end = (start + CHUNK).min(count);
            let (u, _) = self.run_forward(&cache, a.values()[start * len..end * len].to_vec(), end - start, false)?;
            out.extend(u);
        }
        FunctionBatch::new(grid.clone(), self.channels(), count, out)
    }

    /// Data-dependent actnorm initialisation: block by block, set each
    /// actnorm so its output on `batch` has per-channel mean 0 and variance 1.
    /// A zero-variance channel keeps scale 1 and is only centred.
    pub fn actnorm_data_init(&mut self, batch: &FunctionBatch) -> Result<()> {
        self.check_batch(batch)?;
        if batch.count() < 2 {
            return Err(Error::invalid("actnorm initialisation needs at least 2 samples"));
        }
        let cache = self.grid_cache(batch.grid())?;
        let c = self.channels();
        let n = batch.grid().node_count();
        let count = batch.count();
        let mut x = batch.values().to_vec();
        for k in 0..self.block_count() {
            let mut p = ActNormParams::identity(c);
            for ch in 0..c {
                let vals = (0..count).flat_map(|b| x[(b * c + ch) * n..(b * c + ch + 1) * n].iter());
                let m = (count * n) as f64;
                let (s1, s2) = vals.fold((0.0, 0.0), |(a, b), &v| (a + v, b + v * v));
                let mean = s1 / m;
                let var = (s2 / m - mean * mean).max(0.0);
                let std = var.sqrt();
                if std > 1e-12 * mean.abs().max(1.0) {
                    p.log_scale[ch] = -std.ln();
                    p.bias[ch] = -mean / std;
                } else {
                    p.bias[ch] = -mean;
                }
            }
            self.set_actnorm(k, &p)?;
            // advance through this block with the new actnorm
            actnorm_apply(&p.log_scale, &p.bias, &mut x, count, n);
            let part = self.partition(k);
            let inp = self.net_input(&cache, part, &x, count);
            let raw = self.network.apply(&cache.basis, self.net_params(k), &inp, count)?;
            let (ls, sh) = self.coupling_fields(&cache, part, &raw, count);
            for ((v, l), s) in x.iter_mut().zip(&ls).zip(&sh) {
                *v = *v * l.exp() + s;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::gp_log_density;
    use rand::Rng;

    fn latent() -> GaussianProcessSpec {
        GaussianProcessSpec::new(0.3, 0.5).unwrap()
    }

    fn tiny(dims: usize, channels: usize, mode: PartitionMode, blocks: usize) -> ModelConfig {
        ModelConfig {
            blocks,
            modes: 2,
            width: 4,
            depth: 1,
            ..ModelConfig::new(dims, channels, mode, latent())
        }
    }

    fn random_function(grid: &Grid, channels: usize, seed: u64) -> GridFunction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..channels * grid.node_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        GridFunction::new(grid.clone(), channels, v).unwrap()
    }

    #[test]
    fn actnorm_examples() {
        let g = Grid::line(4).unwrap();
        let f = GridFunction::from_fn(g.clone(), 1, |_, _| 3.0);
        let p = ActNormParams::from_scale(&[2.0], &[1.0]).unwrap();
        let (y, ld) = actnorm_forward(&f, &p).unwrap();
        assert!(y.values().iter().all(|&v| (v - 7.0).abs() < 1e-15));
        assert!((ld - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!((ld - 2.772589).abs() < 1e-6);
        let back = actnorm_inverse(&y, &p).unwrap();
        assert!(back.values().iter().zip(f.values()).all(|(a, b)| (a - b).abs() < 1e-12));
        let (same, zero) = actnorm_forward(&f, &ActNormParams::identity(1)).unwrap();
        assert_eq!(same, f);
        assert_eq!(zero, 0.0);
        assert!(ActNormParams::from_scale(&[0.0], &[0.0]).is_err());
    }

    #[test]
    fn zero_initialised_blocks_are_identity() {
        for mode in [PartitionMode::Domain, PartitionMode::Codomain] {
            let m = OpFlowModel::new(tiny(1, 2, mode, 4), 0).unwrap();
            let u = random_function(&Grid::line(8).unwrap(), 2, 1);
            let (y, ld) = m.coupling_forward(0, &u).unwrap();
            assert_eq!(y, u);
            assert_eq!(ld, 0.0);
            let (a, ld) = m.model_inverse(&u).unwrap();
            assert_eq!(a, u);
            assert_eq!(ld, 0.0);
            assert_eq!(m.model_forward(&u).unwrap(), u);
        }
    }

    #[test]
    fn coupling_logdet_is_sum_of_log_scales() {
        let m = OpFlowModel::new_random(tiny(1, 1, PartitionMode::Domain, 2), 3).unwrap();
        let u = random_function(&Grid::line(8).unwrap(), 1, 4);
        let (ls, _) = m.coupling_network_apply(0, &u).unwrap();
        let (_, ld) = m.coupling_forward(0, &u).unwrap();
        assert!((ld - ls.values().iter().sum::<f64>()).abs() < 1e-12);
        // conditioning nodes are untouched and carry no log-scale
        let mask = checkerboard_mask(u.grid(), Parity::Even);
        for (i, &on) in mask.indicator().iter().enumerate() {
            if on {
                assert_eq!(ls.values()[i], 0.0);
            }
        }
        assert!(ls.values().iter().all(|v| v.abs() <= DEFAULT_SCALE_BOUND));
    }

    #[test]
    fn couplings_invert() {
        for (mode, dims, ch) in [
            (PartitionMode::Domain, 1, 1),
            (PartitionMode::Domain, 2, 2),
            (PartitionMode::Codomain, 1, 2),
            (PartitionMode::Codomain, 2, 4),
        ] {
            let m = OpFlowModel::new_random(tiny(dims, ch, mode, 3), 5).unwrap();
            let g = Grid::new(dims, &vec![8; dims]).unwrap();
            let u = random_function(&g, ch, 6);
            for k in 0..3 {
                let (y, _) = m.coupling_forward(k, &u).unwrap();
                let back = m.coupling_inverse(k, &y).unwrap();
                let err = back.values().iter().zip(u.values()).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
                assert!(err < 1e-6);
            }
            let (a, _) = m.model_inverse(&u).unwrap();
            let back = m.model_forward(&a).unwrap();
            let err = back.values().iter().zip(u.values()).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
            assert!(err < 1e-10, "{mode:?} {dims}D round trip {err}");
        }
    }

    #[test]
    fn block_logdets_add_up() {
        let m = OpFlowModel::new_random(tiny(1, 1, PartitionMode::Domain, 4), 8).unwrap();
        let u = random_function(&Grid::line(8).unwrap(), 1, 9);
        let (_, per) = m.inverse_with_block_logdets(&u).unwrap();
        let (_, total) = m.model_inverse(&u).unwrap();
        assert!((per.iter().sum::<f64>() - total).abs() < 1e-12);
    }

    #[test]
    fn identity_likelihood_is_latent_density() {
        let m = OpFlowModel::new(tiny(1, 1, PartitionMode::Domain, 4), 0).unwrap();
        let g = Grid::line(16).unwrap();
        let u = random_function(&g, 1, 2);
        let want = gp_log_density(u.values(), &g.node_coordinates(), &latent(), latent().default_jitter()).unwrap();
        assert!((m.log_likelihood(&u).unwrap() - want).abs() < 1e-9);
    }

    /// log|det| of a central-difference Jacobian of ℱ.
    fn fd_logdet(m: &OpFlowModel, u: &GridFunction) -> f64 {
        let n = u.values().len();
        let h = 1e-5;
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut up = u.values().to_vec();
            up[j] += h;
            let mut dn = u.values().to_vec();
            dn[j] -= h;
            let fu = m.model_inverse(&GridFunction::new(u.grid().clone(), u.channels(), up).unwrap()).unwrap().0;
            let fd = m.model_inverse(&GridFunction::new(u.grid().clone(), u.channels(), dn).unwrap()).unwrap().0;
            for i in 0..n {
                jac[(i, j)] = (fu.values()[i] - fd.values()[i]) / (2.0 * h);
            }
        }
        jac.lu().determinant().abs().ln()
    }

    #[test]
    fn analytic_logdet_matches_jacobian() {
        for (mode, ch) in [(PartitionMode::Domain, 1), (PartitionMode::Codomain, 2)] {
            let mut m = OpFlowModel::new_random(tiny(1, ch, mode, 4), 12).unwrap();
            // non-trivial actnorms
            for k in 0..4 {
                let p = ActNormParams {
                    log_scale: (0..ch).map(|c| 0.1 * (k + c) as f64 - 0.15).collect(),
                    bias: vec![0.05 * k as f64; ch],
                };
                m.set_actnorm(k, &p).unwrap();
            }
            let u = random_function(&Grid::line(8).unwrap(), ch, 13);
            let (a, ld) = m.model_inverse(&u).unwrap();
            let fd = fd_logdet(&m, &u);
            assert!((ld - fd).abs() <= 1e-3 * fd.abs().max(1.0), "{mode:?}: {ld} vs {fd}");
            // inverse-function Jacobian
            let back = fd_logdet_forward(&m, &a);
            assert!((ld + back).abs() <= 1e-3 * ld.abs().max(1.0));
        }
    }

    fn fd_logdet_forward(m: &OpFlowModel, a: &GridFunction) -> f64 {
        let n = a.values().len();
        let h = 1e-5;
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut up = a.values().to_vec();
            up[j] += h;
            let mut dn = a.values().to_vec();
            dn[j] -= h;
            let fu = m.model_forward(&GridFunction::new(a.grid().clone(), a.channels(), up).unwrap()).unwrap();
            let fd = m.model_forward(&GridFunction::new(a.grid().clone(), a.channels(), dn).unwrap()).unwrap();
            for i in 0..n {
                jac[(i, j)] = (fu.values()[i] - fd.values()[i]) / (2.0 * h);
            }
        }
        jac.lu().determinant().abs().ln()
    }

    #[test]
    fn likelihood_integrates_to_one_on_two_nodes() {
        let cfg = ModelConfig {
            blocks: 2,
            modes: 1,
            width: 3,
            depth: 1,
            ..ModelConfig::new(1, 1, PartitionMode::Domain, GaussianProcessSpec::new(0.5, 1.5).unwrap())
        };
        let m = OpFlowModel::new_random(cfg, 21).unwrap();
        let g = Grid::line(2).unwrap();
        let steps = 400;
        let h = 8.0 / steps as f64;
        let mut values = Vec::with_capacity(steps * steps * 2);
        for i in 0..steps {
            for j in 0..steps {
                values.push(-4.0 + (i as f64 + 0.5) * h);
                values.push(-4.0 + (j as f64 + 0.5) * h);
            }
        }
        let batch = FunctionBatch::new(g, 1, steps * steps, values).unwrap();
        let lp = m.log_likelihood_batch(&batch).unwrap();
        let mass: f64 = lp.iter().map(|l| l.exp() * h * h).sum();
        assert!((mass - 1.0).abs() < 0.02, "mass {mass}");
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let cfg = tiny(1, 1, PartitionMode::Domain, 2);
        let mut m = OpFlowModel::new_random(cfg, 31).unwrap();
        m.set_actnorm(0, &ActNormParams { log_scale: vec![0.2], bias: vec![-0.1] }).unwrap();
        let g = Grid::line(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let u = FunctionBatch::new(g.clone(), 1, 3, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let nll = |m: &OpFlowModel| -> f64 {
            let lp = m.log_likelihood_batch(&u).unwrap();
            -lp.iter().sum::<f64>() / lp.len() as f64
        };
        let (a, _, tape) = m.inverse_taped(&u).unwrap();
        let mut da = vec![0.0; a.len()];
        tape.cache.prior.add_log_density_grad(&a, -1.0 / 3.0, &mut da);
        let mut dp = vec![0.0; m.parameter_count()];
        let du = m.inverse_backward(&tape, &da, &[-1.0 / 3.0; 3], Some(&mut dp));
        let h = 1e-4;
        let base = m.params().to_vec();
        for k in (0..base.len()).step_by(5) {
            m.params_mut()[k] = base[k] + h;
            let up = nll(&m);
            m.params_mut()[k] = base[k] - h;
            let dn = nll(&m);
            m.params_mut()[k] = base[k];
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - dp[k]).abs() <= 1e-3 * fd.abs().max(1e-2), "param {k}: fd {fd} vs {}", dp[k]);
        }
        // input gradient, through the data side
        for j in 0..8 {
            let mut v = u.values().to_vec();
            v[j] += h;
            let up = -m.log_likelihood_batch(&FunctionBatch::new(g.clone(), 1, 3, v.clone()).unwrap()).unwrap().iter().sum::<f64>() / 3.0;
            v[j] -= 2.0 * h;
            let dn = -m.log_likelihood_batch(&FunctionBatch::new(g.clone(), 1, 3, v).unwrap()).unwrap().iter().sum::<f64>() / 3.0;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - du[j]).abs() <= 1e-3 * fd.abs().max(1e-2));
        }
    }

    #[test]
    fn forward_vjp_matches_finite_differences() {
        for (mode, dims, ch) in [(PartitionMode::Domain, 2, 1), (PartitionMode::Codomain, 1, 2)] {
            let m = OpFlowModel::new_random(tiny(dims, ch, mode, 3), 41).unwrap();
            let g = Grid::new(dims, &vec![6; dims]).unwrap();
            let a = random_function(&g, ch, 42);
            let probe = random_function(&g, ch, 43);
            let (_, tape) = m.forward_taped(&a.clone().into_batch()).unwrap();
            let da = m.forward_backward(&tape, probe.values());
            let obj = |v: Vec<f64>| -> f64 {
                let u = m.model_forward(&GridFunction::new(g.clone(), ch, v).unwrap()).unwrap();
                u.values().iter().zip(probe.values()).map(|(x, y)| x * y).sum()
            };
            let h = 1e-5;
            for j in 0..a.values().len() {
                let mut up = a.values().to_vec();
                up[j] += h;
                let mut dn = a.values().to_vec();
                dn[j] -= h;
                let fd = (obj(up) - obj(dn)) / (2.0 * h);
                assert!((fd - da[j]).abs() <= 1e-3 * fd.abs().max(1e-2), "{mode:?} {j}: {fd} vs {}", da[j]);
            }
        }
    }

    #[test]
    fn data_init_standardises() {
        let mut m = OpFlowModel::new(tiny(1, 1, PartitionMode::Domain, 2), 0).unwrap();
        let g = Grid::line(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let vals: Vec<f64> = (0..64 * 16)
            .map(|_| 5.0 + 2.0 * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let batch = FunctionBatch::new(g, 1, 64, vals).unwrap();
        m.actnorm_data_init(&batch).unwrap();
        let p = m.actnorm(0);
        let mut out = batch.values().to_vec();
        actnorm_apply(&p.log_scale, &p.bias, &mut out, 64, 16);
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / out.len() as f64;
        assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.05);
        assert!((p.log_scale[0].exp() - 0.5).abs() < 0.05);

        let mut again = OpFlowModel::new(tiny(1, 1, PartitionMode::Domain, 2), 0).unwrap();
        again.actnorm_data_init(&batch).unwrap();
        assert_eq!(again.params(), m.params());

        let constant = FunctionBatch::new(Grid::line(16).unwrap(), 1, 2, vec![3.0; 32]).unwrap();
        m.actnorm_data_init(&constant).unwrap();
        assert_eq!(m.actnorm(0).log_scale, vec![0.0]);
    }

    #[test]
    fn super_resolution_sampling() {
        let m = OpFlowModel::new_random(tiny(1, 1, PartitionMode::Domain, 2), 60).unwrap();
        let coarse = m.sample(&Grid::line(16).unwrap(), 2, 1).unwrap();
        let fine = m.sample(&Grid::line(32).unwrap(), 2, 1).unwrap();
        assert_eq!(coarse.grid().node_count(), 16);
        assert_eq!(fine.grid().node_count(), 32);
        assert!(fine.values().iter().all(|v| v.is_finite()));
        // the cache follows the most recent grid
        assert_eq!(m.grid_cache(&Grid::line(32).unwrap()).unwrap().grid().node_count(), 32);
    }
}
