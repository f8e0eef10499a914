//! Matérn Gaussian processes: kernels, exact sampling and densities, analytic
//! regression, truncated-GP rejection samplers, and Wasserstein-2 distances
//! between Gaussian measures.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FunctionBatch, Grid, IndexSet};
use crate::linalg;
use crate::observations::Observations;

/// Diagonal nugget added to GP covariance matrices, relative to the variance.
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// The three Matérn orders with closed-form kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum Roughness {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl TryFrom<f64> for Roughness {
    type Error = Error;

    fn try_from(nu: f64) -> Result<Self> {
        if nu == 0.5 {
            Ok(Roughness::Half)
        } else if nu == 1.5 {
            Ok(Roughness::ThreeHalves)
        } else if nu == 2.5 {
            Ok(Roughness::FiveHalves)
        } else {
            Err(Error::invalid(format!(
                "unsupported Matérn roughness {nu}; expected 0.5, 1.5 or 2.5"
            )))
        }
    }
}

impl From<Roughness> for f64 {
    fn from(r: Roughness) -> f64 {
        match r {
            Roughness::Half => 0.5,
            Roughness::ThreeHalves => 1.5,
            Roughness::FiveHalves => 2.5,
        }
    }
}

/// Isotropic Matérn GP with constant mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianProcessSpec {
    pub length_scale: f64,
    #[serde(rename = "nu")]
    pub roughness: Roughness,
    #[serde(default = "one")]
    pub variance: f64,
    #[serde(default)]
    pub mean: f64,
}

fn one() -> f64 {
    1.0
}

impl GaussianProcessSpec {
    /// Zero-mean, unit-variance spec.
    pub fn new(length_scale: f64, nu: f64) -> Result<Self> {
        let spec = Self {
            length_scale,
            roughness: Roughness::try_from(nu)?,
            variance: 1.0,
            mean: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_variance(mut self, variance: f64) -> Result<Self> {
        self.variance = variance;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale > 0.0) || !self.length_scale.is_finite() {
            return Err(Error::invalid(format!(
                "length scale must be positive, got {}",
                self.length_scale
            )));
        }
        if !(self.variance > 0.0) || !self.variance.is_finite() {
            return Err(Error::invalid(format!(
                "variance must be positive, got {}",
                self.variance
            )));
        }
        if !self.mean.is_finite() {
            return Err(Error::invalid("mean must be finite"));
        }
        Ok(())
    }

    pub fn default_jitter(&self) -> f64 {
        DEFAULT_RELATIVE_JITTER * self.variance
    }
}

/// Closed-form Matérn covariance at distance `d`.
pub fn matern_kernel(d: f64, spec: &GaussianProcessSpec) -> f64 {
    let r = d.abs() / spec.length_scale;
    let shape = match spec.roughness {
        Roughness::Half => (-r).exp(),
        Roughness::ThreeHalves => {
            let s = 3f64.sqrt() * r;
            (1.0 + s) * (-s).exp()
        }
        Roughness::FiveHalves => {
            let s = 5f64.sqrt() * r;
            (1.0 + s + s * s / 3.0) * (-s).exp()
        }
    };
    spec.variance * shape
}

fn distance(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Pairwise kernel matrix plus `jitter * I`.
pub fn covariance_matrix(points: &[[f64; 2]], spec: &GaussianProcessSpec, jitter: f64) -> DMatrix<f64> {
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = matern_kernel(distance(&points[i], &points[j]), spec);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += jitter;
    }
    k
}

/// Mean vector and covariance matrix of a finite-dimensional Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMomentPair {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianMomentPair {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::shape(format!(
                "covariance is {}x{} for a mean of length {n}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        for i in 0..n {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-10 {
                    return Err(Error::invalid("covariance matrix is not symmetric"));
                }
            }
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sub-block on the listed coordinates.
    pub fn marginal(&self, idx: &[usize]) -> GaussianMomentPair {
        let mean = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.mean[i]));
        let cov = DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.covariance[(idx[a], idx[b])]);
        GaussianMomentPair {
            mean,
            covariance: cov,
        }
    }

    pub fn variances(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().copied().collect()
    }
}

/// GP moments on every node of `grid`.
pub fn prior_moments(spec: &GaussianProcessSpec, grid: &Grid, jitter: f64) -> GaussianMomentPair {
    let pts = grid.node_coordinates();
    GaussianMomentPair {
        mean: DVector::from_element(pts.len(), spec.mean),
        covariance: covariance_matrix(&pts, spec, jitter),
    }
}

/// Multivariate normal log-density.
pub fn mvn_log_density(values: &[f64], moments: &GaussianMomentPair) -> Result<f64> {
    let n = moments.dim();
    if values.len() != n {
        return Err(Error::shape(format!(
            "{} values for a {n}-dimensional Gaussian",
            values.len()
        )));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let l = linalg::cholesky(moments.covariance.clone(), "log-density covariance")?;
    let diff = DVector::from_iterator(n, values.iter().zip(moments.mean.iter()).map(|(v, m)| v - m));
    let z = l
        .solve_lower_triangular(&diff)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    Ok(-0.5 * z.norm_squared() - 0.5 * linalg::chol_logdet(&l) - 0.5 * n as f64 * LN_2PI)
}

/// Log-density of GP point evaluations at `points`, covariance `K + jitter I`.
pub fn gp_log_density(
    values: &[f64],
    points: &[[f64; 2]],
    spec: &GaussianProcessSpec,
    jitter: f64,
) -> Result<f64> {
    if values.len() != points.len() {
        return Err(Error::shape(format!(
            "{} values for {} points",
            values.len(),
            points.len()
        )));
    }
    let moments = GaussianMomentPair {
        mean: DVector::from_element(points.len(), spec.mean),
        covariance: covariance_matrix(points, spec, jitter),
    };
    mvn_log_density(values, &moments)
}

/// Condition a Gaussian on noisy observations of some of its coordinates.
pub fn condition_gaussian(
    prior: &GaussianMomentPair,
    observed: &[usize],
    values: &[f64],
    noise_variance: f64,
) -> Result<GaussianMomentPair> {
    if observed.len() != values.len() {
        return Err(Error::shape("observed index and value counts differ"));
    }
    if observed.is_empty() {
        return Ok(prior.clone());
    }
    let n = prior.dim();
    let r = observed.len();
    if let Some(&bad) = observed.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(format!("observed coordinate {bad} out of range")));
    }
    let mut s = DMatrix::from_fn(r, r, |a, b| prior.covariance[(observed[a], observed[b])]);
    for i in 0..r {
        s[(i, i)] += noise_variance;
    }
    let chol = s.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
        context: "observation covariance K + sigma^2 I is singular".into(),
    })?;
    // K_{o,.} : r x n
    let k_on = DMatrix::from_fn(r, n, |a, j| prior.covariance[(observed[a], j)]);
    let resid = DVector::from_iterator(r, observed.iter().zip(values).map(|(&i, &y)| y - prior.mean[i]));
    let alpha = chol.solve(&resid);
    let a = chol.solve(&k_on);
    let mean = &prior.mean + k_on.transpose() * alpha;
    let mut cov = &prior.covariance - k_on.transpose() * a;
    linalg::symmetrize(&mut cov);
    Ok(GaussianMomentPair {
        mean,
        covariance: cov,
    })
}

/// Analytic GP regression posterior on `query` given single-channel `obs`.
pub fn gpr_posterior(
    spec: &GaussianProcessSpec,
    obs: &Observations,
    query: &IndexSet,
) -> Result<GaussianMomentPair> {
    gpr_posterior_with_jitter(spec, obs, query, 0.0)
}

pub fn gpr_posterior_with_jitter(
    spec: &GaussianProcessSpec,
    obs: &Observations,
    query: &IndexSet,
    jitter: f64,
) -> Result<GaussianMomentPair> {
    if obs.channels().len() != 1 {
        return Err(Error::invalid("GP regression expects single-channel observations"));
    }
    obs.grid().ensure_same(query.grid(), "gpr_posterior")?;
    if !(obs.noise_variance() >= 0.0) {
        return Err(Error::invalid("noise variance must be >= 0"));
    }
    // union of nodes: query first, then observation nodes not already queried
    let mut nodes: Vec<usize> = query.indices().to_vec();
    let mut obs_pos = Vec::with_capacity(obs.len());
    for &o in obs.points().indices() {
        match query.indices().binary_search(&o) {
            Ok(p) => obs_pos.push(p),
            Err(_) => {
                obs_pos.push(nodes.len());
                nodes.push(o);
            }
        }
    }
    let coords = obs.grid().node_coordinates();
    let pts: Vec<[f64; 2]> = nodes.iter().map(|&i| coords[i]).collect();
    let prior = GaussianMomentPair {
        mean: DVector::from_element(pts.len(), spec.mean),
        covariance: covariance_matrix(&pts, spec, jitter),
    };
    let post = condition_gaussian(&prior, &obs_pos, obs.channel_values(0), obs.noise_variance())?;
    let q: Vec<usize> = (0..query.len()).collect();
    Ok(post.marginal(&q))
}

/// Cached Cholesky factor of a GP covariance on a grid, used for sampling
/// and for batched latent log-densities.
#[derive(Debug, Clone)]
pub struct GpFactor {
    spec: GaussianProcessSpec,
    grid: Grid,
    jitter: f64,
    n: usize,
    /// Row-major `L^T`, so `x = z L^T` is a row-major GEMM.
    chol_t: Vec<f64>,
    /// Row-major `K^{-1}`, built on first use.
    precision: OnceLock<Vec<f64>>,
    log_det: f64,
}

impl GpFactor {
    /// Factor `K + jitter I`, escalating the jitter x10 (up to 6 times) if the
    /// factorization fails.
    pub fn new(spec: &GaussianProcessSpec, grid: &Grid, jitter: f64) -> Result<Self> {
        spec.validate()?;
        let k = covariance_matrix(&grid.node_coordinates(), spec, 0.0);
        let (l, used) = linalg::cholesky_escalating(&k, jitter, 6, "GP covariance")?;
        let n = k.nrows();
        // nalgebra is column-major: L's storage is L^T row-major.
        let chol_t = l.as_slice().to_vec();
        Ok(Self {
            spec: *spec,
            grid: grid.clone(),
            jitter: used,
            n,
            chol_t,
            precision: OnceLock::new(),
            log_det: linalg::chol_logdet(&l),
        })
    }

    fn lower(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n, self.n, &self.chol_t)
    }

    pub fn spec(&self) -> &GaussianProcessSpec {
        &self.spec
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub(crate) fn precision(&self) -> &[f64] {
        self.precision.get_or_init(|| {
            let n = self.n;
            let linv = linalg::lower_inverse(&self.lower()).expect("Cholesky factor has a positive diagonal");
            let prec = linv.transpose() * &linv;
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] = 0.5 * (prec[(i, j)] + prec[(j, i)]);
                }
            }
            out
        })
    }

    /// Covariance matrix actually factored (kernel plus the jitter used).
    pub fn covariance(&self) -> DMatrix<f64> {
        covariance_matrix(&self.grid.node_coordinates(), &self.spec, self.jitter)
    }

    /// Write `rows` independent draws into `out` (row-major, `rows x n`).
    pub fn sample_rows(&self, rng: &mut impl Rng, rows: usize, out: &mut [f64]) {
        let n = self.n;
        let z: Vec<f64> = (0..rows * n).map(|_| rng.sample(StandardNormal)).collect();
        linalg::matmul_into(rows, n, n, &z, &self.chol_t, 0.0, &mut out[..rows * n]);
        if self.spec.mean != 0.0 {
            out[..rows * n].iter_mut().for_each(|v| *v += self.spec.mean);
        }
    }

    /// Map white rows `z` to GP rows `x = z L^T + m` (the sampling map).
    pub fn color_rows(&self, z: &[f64], out: &mut [f64]) {
        let n = self.n;
        let rows = z.len() / n;
        linalg::matmul_into(rows, n, n, z, &self.chol_t, 0.0, &mut out[..rows * n]);
        if self.spec.mean != 0.0 {
            out[..rows * n].iter_mut().for_each(|v| *v += self.spec.mean);
        }
    }

    /// Pull a cotangent on colored rows back to white rows: `g L`.
    pub fn color_adjoint_rows(&self, g: &[f64], out: &mut [f64]) {
        let n = self.n;
        let rows = g.len() / n;
        // chol_t read with swapped strides is L
        linalg::gemm(rows, n, n, 1.0, g, n, 1, &self.chol_t, 1, n, 0.0, out, n, 1);
    }

    /// Log-density of each length-`n` row of `values`.
    pub fn log_density_rows(&self, values: &[f64]) -> Vec<f64> {
        let n = self.n;
        let rows = values.len() / n;
        let centred: Vec<f64> = values.iter().map(|v| v - self.spec.mean).collect();
        let mut pa = vec![0.0; rows * n];
        linalg::matmul_into(rows, n, n, &centred, self.precision(), 0.0, &mut pa);
        (0..rows)
            .map(|r| {
                let q: f64 = centred[r * n..(r + 1) * n]
                    .iter()
                    .zip(&pa[r * n..(r + 1) * n])
                    .map(|(a, b)| a * b)
                    .sum();
                -0.5 * q - 0.5 * self.log_det - 0.5 * n as f64 * LN_2PI
            })
            .collect()
    }

    /// Gradient `-K^{-1}(x - m)` of the log-density for each row, accumulated
    /// with weight `scale` into `grad`.
    pub fn add_log_density_grad(&self, values: &[f64], scale: f64, grad: &mut [f64]) {
        let n = self.n;
        let rows = values.len() / n;
        let centred: Vec<f64> = values.iter().map(|v| v - self.spec.mean).collect();
        linalg::gemm(
            rows, n, n, -scale, &centred, n, 1, self.precision(), n, 1, 1.0, grad, n, 1,
        );
    }
}

/// `count` independent GP draws on `grid`, reproducible from `seed`.
pub fn gp_sample(spec: &GaussianProcessSpec, grid: &Grid, count: usize, seed: u64) -> Result<FunctionBatch> {
    if count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let factor = GpFactor::new(spec, grid, spec.default_jitter())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid.node_count();
    let mut values = vec![0.0; count * n];
    factor.sample_rows(&mut rng, count, &mut values);
    FunctionBatch::new(grid.clone(), 1, count, values)
}

/// Amplitude bounds of a truncated GP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationBounds {
    pub lower: f64,
    pub upper: f64,
}

impl TruncationBounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::invalid(format!(
                "truncation bounds need lower < upper, got [{lower}, {upper}]"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v <= self.upper
    }
}

/// Default draw budget for rejection samplers, per requested sample.
pub const DEFAULT_DRAWS_PER_SAMPLE: u64 = 100_000;

/// Truncated-GP draws by whole-function rejection against `bounds`.
pub fn tgp_sample(
    spec: &GaussianProcessSpec,
    bounds: TruncationBounds,
    grid: &Grid,
    count: usize,
    seed: u64,
    max_draws: u64,
) -> Result<FunctionBatch> {
    TruncationBounds::new(bounds.lower, bounds.upper)?;
    let factor = GpFactor::new(spec, grid, spec.default_jitter())?;
    let n = grid.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(count * n);
    let mut accepted = 0usize;
    let mut drawn = 0u64;
    const CHUNK: usize = 256;
    let mut buf = vec![0.0; CHUNK * n];
    while accepted < count {
        if drawn >= max_draws {
            return Err(Error::RejectionBudget {
                max_draws,
                accepted,
                requested: count,
            });
        }
        let rows = CHUNK.min((max_draws - drawn) as usize).max(1);
        factor.sample_rows(&mut rng, rows, &mut buf);
        for r in 0..rows {
            drawn += 1;
            let row = &buf[r * n..(r + 1) * n];
            if row.iter().all(|&v| bounds.contains(v)) {
                values.extend_from_slice(row);
                accepted += 1;
                if accepted == count {
                    break;
                }
            }
        }
    }
    FunctionBatch::new(grid.clone(), 1, count, values)
}

/// Rejection sampler for the truncated-GP posterior: a prior draw is kept iff
/// it respects `bounds` everywhere and lies within `tolerance` of every
/// observation.
pub fn tgp_posterior_rejection(
    spec: &GaussianProcessSpec,
    bounds: TruncationBounds,
    obs: &Observations,
    tolerance: f64,
    count: usize,
    seed: u64,
    max_draws: u64,
) -> Result<FunctionBatch> {
    TruncationBounds::new(bounds.lower, bounds.upper)?;
    if !(tolerance > 0.0) {
        return Err(Error::invalid("rejection tolerance must be positive"));
    }
    if obs.channels().len() != 1 {
        return Err(Error::invalid("truncated-GP posterior expects single-channel observations"));
    }
    let grid = obs.grid().clone();
    let n = grid.node_count();
    let r = obs.len();
    // observed nodes first, so the window test only needs the first r normals
    let mut order: Vec<usize> = obs.points().indices().to_vec();
    order.extend((0..n).filter(|i| obs.points().indices().binary_search(i).is_err()));
    let coords = grid.node_coordinates();
    let pts: Vec<[f64; 2]> = order.iter().map(|&i| coords[i]).collect();
    let k = covariance_matrix(&pts, spec, 0.0);
    let (l, _) = linalg::cholesky_escalating(&k, spec.default_jitter(), 6, "truncated GP covariance")?;
    let y = obs.channel_values(0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(count * n);
    let mut z = vec![0.0; n];
    let mut x = vec![0.0; n];
    let mut accepted = 0;
    let mut drawn = 0u64;
    'draw: while accepted < count {
        if drawn >= max_draws {
            return Err(Error::RejectionBudget {
                max_draws,
                accepted,
                requested: count,
            });
        }
        drawn += 1;
        for i in 0..r {
            z[i] = rng.sample(StandardNormal);
            let mut v = spec.mean;
            for j in 0..=i {
                v += l[(i, j)] * z[j];
            }
            if (v - y[i]).abs() > tolerance || !bounds.contains(v) {
                continue 'draw;
            }
            x[i] = v;
        }
        for zi in z.iter_mut().skip(r) {
            *zi = rng.sample(StandardNormal);
        }
        for i in r..n {
            let mut v = spec.mean;
            for j in 0..=i {
                v += l[(i, j)] * z[j];
            }
            if !bounds.contains(v) {
                continue 'draw;
            }
            x[i] = v;
        }
        let mut sample = vec![0.0; n];
        for (pos, &node) in order.iter().enumerate() {
            sample[node] = x[pos];
        }
        values.extend_from_slice(&sample);
        accepted += 1;
    }
    FunctionBatch::new(grid, 1, count, values)
}

fn check_same_dim(p: &GaussianMomentPair, q: &GaussianMomentPair) -> Result<usize> {
    if p.dim() != q.dim() {
        return Err(Error::shape(format!(
            "Gaussian dimensions differ: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    if p.dim() == 0 {
        return Err(Error::invalid("Wasserstein distance needs dimension >= 1"));
    }
    Ok(p.dim())
}

/// Normalised squared 2-Wasserstein distance between Gaussians:
/// `(|h1 - h2|^2 + Tr(K1 + K2 - 2 (K1^½ K2 K1^½)^½)) / l`.
pub fn w2_squared_gaussian(p: &GaussianMomentPair, q: &GaussianMomentPair) -> Result<f64> {
    let l = check_same_dim(p, q)? as f64;
    let mean_term = (&p.mean - &q.mean).norm_squared();
    let s = linalg::sym_sqrt(&p.covariance);
    let m = &s * &q.covariance * &s;
    let cross: f64 = linalg::sym_eigenvalues(&m).iter().map(|&v| v.max(0.0).sqrt()).sum();
    let trace = p.covariance.trace() + q.covariance.trace() - 2.0 * cross;
    Ok(((mean_term + trace) / l).max(0.0))
}

/// Frobenius surrogate `(|h1 - h2|^2 + |K1 - K2|_F^2) / l`.
pub fn w2_approx(p: &GaussianMomentPair, q: &GaussianMomentPair) -> Result<f64> {
    let l = check_same_dim(p, q)? as f64;
    let mean_term = (&p.mean - &q.mean).norm_squared();
    let frob = (&p.covariance - &q.covariance).norm_squared();
    Ok((mean_term + frob) / l)
}

/// Sample mean and (n-1)-normalised sample covariance of the rows of
/// `samples` (row-major, `dim` columns).
pub fn fit_empirical_gaussian(samples: &[f64], dim: usize) -> Result<GaussianMomentPair> {
    if dim == 0 || !samples.len().is_multiple_of(dim) {
        return Err(Error::shape("sample buffer is not a whole number of rows"));
    }
    let n = samples.len() / dim;
    if n < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 samples to fit a covariance, got {n}"
        )));
    }
    let mut mean = vec![0.0; dim];
    for row in samples.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<f64> = samples
        .chunks_exact(dim)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();
    let mut cov = vec![0.0; dim * dim];
    // X^T X with X row-major (n x dim)
    linalg::gemm(
        dim,
        n,
        dim,
        1.0 / (n - 1) as f64,
        &centred,
        1,
        dim,
        &centred,
        dim,
        1,
        0.0,
        &mut cov,
        dim,
        1,
    );
    let mut covariance = DMatrix::from_row_slice(dim, dim, &cov);
    linalg::symmetrize(&mut covariance);
    Ok(GaussianMomentPair {
        mean: DVector::from_vec(mean),
        covariance,
    })
}

/// Empirical moments of a batch, each sample flattened over channels.
pub fn fit_batch(batch: &FunctionBatch) -> Result<GaussianMomentPair> {
    fit_empirical_gaussian(batch.values(), batch.sample_len())
}

/// Moments of a multi-channel GP with independent identical channels,
/// flattened `[channel][node]`.
pub fn channelwise_prior_moments(
    spec: &GaussianProcessSpec,
    grid: &Grid,
    channels: usize,
    jitter: f64,
) -> GaussianMomentPair {
    let single = prior_moments(spec, grid, jitter);
    if channels == 1 {
        return single;
    }
    let n = grid.node_count();
    let mut cov = DMatrix::zeros(n * channels, n * channels);
    for c in 0..channels {
        cov.view_mut((c * n, c * n), (n, n)).copy_from(&single.covariance);
    }
    GaussianMomentPair {
        mean: DVector::from_element(n * channels, spec.mean),
        covariance: cov,
    }
}
