//! Functional regression with a trained flow as the prior: the posterior
//! log-density of a candidate function, its MAP estimate, and Langevin
//! sampling of the posterior in the latent Gaussian space.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::OpFlowModel;
use crate::grid::{FunctionBatch, Grid, GridFunction};
use crate::observations::Observations;

/// Noise variance used by every regression task unless configured.
pub const DEFAULT_NOISE_VARIANCE: f64 = 0.01;

/// Latent magnitude beyond which a chain is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

fn check_obs(obs: &Observations, grid: &Grid, channels: usize) -> Result<()> {
    if obs.grid() != grid {
        return Err(Error::shape(format!(
            "observations live on resolution {:?}, candidate on {:?}",
            obs.grid().resolution(),
            grid.resolution()
        )));
    }
    if let Some(&c) = obs.channels().iter().find(|&&c| c >= channels) {
        return Err(Error::shape(format!("observed channel {c} but the model has {channels}")));
    }
    Ok(())
}

fn require_noise(obs: &Observations) -> Result<()> {
    if !(obs.noise_variance() > 0.0) {
        return Err(Error::invalid("regression needs a positive noise variance"));
    }
    Ok(())
}

/// `-‖ũ_obs − u|_D‖² / 2σ²` and (optionally) its gradient added into `grad`.
fn data_term(obs: &Observations, u: &[f64], n: usize, grad: Option<&mut [f64]>) -> f64 {
    let s2 = obs.noise_variance();
    let pts = obs.points().indices();
    let mut val = 0.0;
    let mut g = grad;
    for (slot, &c) in obs.channels().iter().enumerate() {
        for (&p, &y) in pts.iter().zip(obs.channel_values(slot)) {
            let r = y - u[c * n + p];
            val -= r * r / (2.0 * s2);
            if let Some(g) = g.as_deref_mut() {
                g[c * n + p] += r / s2;
            }
        }
    }
    val
}

/// Posterior log-density of `u` given the observations, up to constants in
/// `u`: the Gaussian data term plus the model log-likelihood.
pub fn posterior_log_density(u: &GridFunction, obs: &Observations, model: &OpFlowModel) -> Result<f64> {
    require_noise(obs)?;
    check_obs(obs, u.grid(), model.channels())?;
    let lp = model.log_likelihood(u)?;
    Ok(data_term(obs, u.values(), u.grid().node_count(), None) + lp)
}

/// [`posterior_log_density`] and its gradient w.r.t. the values of `u`.
pub fn posterior_log_density_grad(u: &GridFunction, obs: &Observations, model: &OpFlowModel) -> Result<(f64, Vec<f64>)> {
    require_noise(obs)?;
    check_obs(obs, u.grid(), model.channels())?;
    let (lp, mut g) = model.log_likelihood_grad(u)?;
    let d = data_term(obs, u.values(), u.grid().node_count(), Some(&mut g));
    Ok((d + lp, g))
}

/// Coordinates in which the MAP search moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coordinates {
    /// Whitened latent coordinates `z`, with `a = L z + m` and `u = 𝒢(a)`.
    #[default]
    Latent,
    /// The data values `u` directly.
    Data,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapConfig {
    #[serde(default = "default_map_iterations")]
    pub max_iterations: usize,
    /// Stop when an accepted step improves the objective by less than this
    /// fraction of its magnitude.
    #[serde(default = "default_map_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub coordinates: Coordinates,
    /// Curvature pairs kept by the quasi-Newton direction.
    #[serde(default = "default_memory")]
    pub memory: usize,
}

fn default_map_iterations() -> usize {
    5000
}
fn default_map_tolerance() -> f64 {
    1e-6
}
fn default_memory() -> usize {
    10
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            max_iterations: default_map_iterations(),
            tolerance: default_map_tolerance(),
            coordinates: Coordinates::Latent,
            memory: default_memory(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapResult {
    pub estimate: GridFunction,
    pub objective: f64,
    pub iterations: usize,
    /// Objective after each accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

/// Objective and gradient in the search coordinates, plus the data-space point.
struct MapProblem<'a> {
    model: &'a OpFlowModel,
    obs: &'a Observations,
    grid: Grid,
    coords: Coordinates,
}

impl MapProblem<'_> {
    fn to_u(&self, x: &[f64]) -> Result<(GridFunction, Option<crate::flow::ForwardTape>)> {
        let c = self.model.channels();
        match self.coords {
            Coordinates::Data => Ok((GridFunction::new(self.grid.clone(), c, x.to_vec())?, None)),
            Coordinates::Latent => {
                let cache = self.model.grid_cache(&self.grid)?;
                let mut a = vec![0.0; x.len()];
                cache.prior().color_rows(x, &mut a);
                let batch = FunctionBatch::new(self.grid.clone(), c, 1, a)?;
                let (u, tape) = self.model.forward_taped(&batch)?;
                Ok((GridFunction::new(self.grid.clone(), c, u)?, Some(tape)))
            }
        }
    }

    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>, GridFunction)> {
        let (u, tape) = self.to_u(x)?;
        let (val, gu) = posterior_log_density_grad(&u, self.obs, self.model)?;
        let g = match tape {
            None => gu,
            Some(tape) => {
                let ga = self.model.forward_backward(&tape, &gu);
                let cache = self.model.grid_cache(&self.grid)?;
                let mut gz = vec![0.0; ga.len()];
                cache.prior().color_adjoint_rows(&ga, &mut gz);
                gz
            }
        };
        Ok((val, g, u))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximise the posterior log-density. The search starts at `𝒢(m)` (the
/// pushforward of the latent mean) and takes quasi-Newton ascent steps with
/// backtracking, accepting only steps that raise the objective.
pub fn map_estimate(obs: &Observations, model: &OpFlowModel, config: &MapConfig) -> Result<MapResult> {
    require_noise(obs)?;
    check_obs(obs, obs.grid(), model.channels())?;
    let grid = obs.grid().clone();
    let problem = MapProblem {
        model,
        obs,
        grid: grid.clone(),
        coords: config.coordinates,
    };
    let len = model.channels() * grid.node_count();
    let mut x = match config.coordinates {
        Coordinates::Latent => vec![0.0; len],
        Coordinates::Data => {
            let mean = model.latent_moments(&grid)?.mean.iter().copied().collect::<Vec<_>>();
            let a = FunctionBatch::new(grid.clone(), model.channels(), 1, mean)?;
            model.forward_batch(&a)?.into_values()
        }
    };
    let (mut f, mut g, mut u) = problem.eval(&x)?;
    if !f.is_finite() {
        return Err(Error::Numerical(format!("MAP objective is {f} at the initial point")));
    }
    let mut trace = vec![f];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::new();
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let gnorm = dot(&g, &g).sqrt();
        if gnorm == 0.0 {
            break;
        }
        // two-loop recursion on the negated objective
        let mut d: Vec<f64> = g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y) in pairs.iter().rev() {
            let rho = 1.0 / dot(y, s);
            let al = rho * dot(s, &d);
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= al * yi);
            alphas.push((al, rho));
        }
        if let Some((s, y)) = pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        } else {
            d.iter_mut().for_each(|v| *v /= gnorm);
        }
        for ((s, y), (al, rho)) in pairs.iter().zip(alphas.into_iter().rev()) {
            let be = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (al - be) * si);
        }
        let mut slope = dot(&d, &g);
        if !(slope > 0.0) {
            pairs.clear();
            d = g.iter().map(|v| v / gnorm).collect();
            slope = gnorm;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            match problem.eval(&xn) {
                Ok((fnew, gnew, unew)) if fnew.is_finite() && fnew >= f + 1e-4 * step * slope => {
                    accepted = Some((xn, fnew, gnew, unew));
                    break;
                }
                Ok(_) | Err(Error::Numerical(_)) => step *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some((xn, fnew, gnew, unew)) = accepted else { break };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        // curvature of the negated objective
        let y: Vec<f64> = g.iter().zip(&gnew).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            pairs.push_back((s, y));
            if pairs.len() > config.memory.max(1) {
                pairs.pop_front();
            }
        }
        let gain = fnew - f;
        x = xn;
        f = fnew;
        g = gnew;
        u = unew;
        trace.push(f);
        if gain <= config.tolerance * f.abs().max(1.0) {
            break;
        }
    }
    Ok(MapResult {
        estimate: u,
        objective: f,
        iterations,
        trace,
    })
}

/// Langevin sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgldConfig {
    pub total_iterations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub step_initial: f64,
    pub step_final: f64,
    pub seed: u64,
}

fn default_temperature() -> f64 {
    1.0
}

impl SgldConfig {
    /// Settings used for the 1D GP and TGP tasks.
    pub fn gp_default(seed: u64) -> Self {
        Self {
            total_iterations: 40_000,
            burn_in: 2_000,
            thinning: 10,
            temperature: 1.0,
            step_initial: 5e-3,
            step_final: 4e-3,
            seed,
        }
    }

    /// Settings used for the 2D GRF task.
    pub fn grf_default(seed: u64) -> Self {
        Self {
            total_iterations: 20_000,
            ..Self::gp_default(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.burn_in >= self.total_iterations {
            return bad("burn_in must be smaller than total_iterations");
        }
        if self.thinning == 0 {
            return bad("thinning must be at least 1");
        }
        if !(self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if !(self.step_initial > 0.0 && self.step_final > 0.0) || self.step_final > self.step_initial {
            return bad("step sizes must be positive and nonincreasing");
        }
        Ok(())
    }

    /// Number of harvested samples, `floor((N − b) / t_N)`.
    pub fn sample_count(&self) -> usize {
        (self.total_iterations - self.burn_in) / self.thinning
    }

    /// Step size at iteration `t`, decaying exponentially from the initial
    /// to the final value over the run.
    pub fn step(&self, t: usize) -> f64 {
        let frac = t as f64 / self.total_iterations.max(1) as f64;
        self.step_initial * (self.step_final / self.step_initial).powf(frac)
    }
}

/// One harvested iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgldRecord {
    pub iteration: usize,
    pub step: f64,
    /// Latent-space target `log p(ũ_obs | 𝒢(a)) + log p_A(a)`.
    pub log_target: f64,
}

#[derive(Debug, Clone)]
pub struct PosteriorResult {
    pub map_estimate: GridFunction,
    pub samples: FunctionBatch,
    pub mean: GridFunction,
    pub std: GridFunction,
    pub log: Vec<SgldRecord>,
    /// Iteration at which the chain diverged; the samples are then partial.
    pub diverged_at: Option<usize>,
}

/// Latent target value and gradient at `a`.
fn latent_target(
    model: &OpFlowModel,
    obs: &Observations,
    grid: &Grid,
    a: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let c = model.channels();
    let n = grid.node_count();
    let cache = model.grid_cache(grid)?;
    let batch = FunctionBatch::new(grid.clone(), c, 1, a.to_vec())?;
    let (u, tape) = model.forward_taped(&batch)?;
    let mut gu = vec![0.0; u.len()];
    let d = data_term(obs, &u, n, Some(&mut gu));
    let mut ga = model.forward_backward(&tape, &gu);
    cache.prior().add_log_density_grad(a, 1.0, &mut ga);
    let lp: f64 = cache.prior().log_density_rows(a).iter().sum();
    Ok((d + lp, ga))
}

/// Langevin chain in the latent space started from `a0`; returns harvested
/// data-space samples, their records and the divergence iteration if any.
pub fn sgld_chain(
    obs: &Observations,
    model: &OpFlowModel,
    config: &SgldConfig,
    a0: &[f64],
) -> Result<(FunctionBatch, Vec<SgldRecord>, Option<usize>)> {
    config.validate()?;
    require_noise(obs)?;
    let grid = obs.grid().clone();
    check_obs(obs, &grid, model.channels())?;
    let c = model.channels();
    let len = c * grid.node_count();
    if a0.len() != len {
        return Err(Error::shape("initial latent state has the wrong length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut a = a0.to_vec();
    let mut samples = Vec::with_capacity(config.sample_count() * len);
    let mut log = Vec::with_capacity(config.sample_count());
    let mut diverged = None;
    let (_, mut grad) = latent_target(model, obs, &grid, &a)?;
    for t in 0..config.total_iterations {
        let eta = config.step(t);
        let noise = (eta * config.temperature).sqrt();
        for (ai, gi) in a.iter_mut().zip(&grad) {
            let xi: f64 = rng.sample(StandardNormal);
            *ai += 0.5 * eta * gi + noise * xi;
        }
        if a.iter().any(|v| !(v.abs() <= DIVERGENCE_LIMIT)) {
            diverged = Some(t);
            break;
        }
        let (target, g) = latent_target(model, obs, &grid, &a)?;
        grad = g;
        let done = t + 1;
        if done > config.burn_in && (done - config.burn_in).is_multiple_of(config.thinning) {
            let u = model.forward_batch(&FunctionBatch::new(grid.clone(), c, 1, a.clone())?)?;
            samples.extend_from_slice(u.values());
            log.push(SgldRecord {
                iteration: t,
                step: eta,
                log_target: target,
            });
        }
    }
    let count = log.len();
    Ok((FunctionBatch::new(grid, c, count, samples)?, log, diverged))
}

/// MAP estimate followed by a Langevin chain started at `ℱ(ū)`.
pub fn sgld_sample(obs: &Observations, model: &OpFlowModel, config: &SgldConfig, map: &MapConfig) -> Result<PosteriorResult> {
    sgld_sample_chains(obs, model, config, map, 1)
}

/// Like [`sgld_sample`] but pools `chains` independent chains (seeds
/// `seed, seed + 1, ...`), all started from the same MAP estimate.
pub fn sgld_sample_chains(
    obs: &Observations,
    model: &OpFlowModel,
    config: &SgldConfig,
    map: &MapConfig,
    chains: usize,
) -> Result<PosteriorResult> {
    config.validate()?;
    if chains == 0 {
        return Err(Error::invalid("at least one chain is required"));
    }
    let m = map_estimate(obs, model, map)?;
    let (a0, _) = model.model_inverse(&m.estimate)?;
    let mut values = Vec::new();
    let mut log = Vec::new();
    let mut diverged_at = None;
    for k in 0..chains {
        let cfg = SgldConfig {
            seed: config.seed.wrapping_add(k as u64),
            ..config.clone()
        };
        let (s, l, d) = sgld_chain(obs, model, &cfg, a0.values())?;
        values.extend_from_slice(s.values());
        log.extend(l);
        diverged_at = diverged_at.or(d);
    }
    let grid = obs.grid().clone();
    let count = log.len();
    let samples = FunctionBatch::new(grid.clone(), model.channels(), count, values)?;
    let (mean, std) = if count >= 2 {
        let s = summarize(&samples, &[])?;
        (s.mean, s.std)
    } else {
        (m.estimate.clone(), GridFunction::zeros(grid, model.channels()))
    };
    Ok(PosteriorResult {
        map_estimate: m.estimate,
        samples,
        mean,
        std,
        log,
        diverged_at,
    })
}

#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    pub mean: GridFunction,
    /// Pointwise standard deviation with the `n − 1` denominator.
    pub std: GridFunction,
    /// Requested quantile levels and their pointwise functions.
    pub quantiles: Vec<(f64, GridFunction)>,
}

/// Pointwise mean, standard deviation and quantiles (linear interpolation
/// between order statistics) of a sample batch.
pub fn summarize(samples: &FunctionBatch, levels: &[f64]) -> Result<PosteriorSummary> {
    let n = samples.count();
    if n < 2 {
        return Err(Error::invalid("summarizing needs at least 2 samples"));
    }
    if let Some(q) = levels.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(Error::invalid(format!("quantile level {q} outside [0, 1]")));
    }
    let len = samples.sample_len();
    let mut mean = vec![0.0; len];
    for i in 0..n {
        mean.iter_mut().zip(samples.sample_values(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; len];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(samples.sample_values(i)).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / (n - 1) as f64).sqrt()).collect();
    let mut qs: Vec<Vec<f64>> = vec![vec![0.0; len]; levels.len()];
    if !levels.is_empty() {
        let mut col = vec![0.0; n];
        for j in 0..len {
            for (i, c) in col.iter_mut().enumerate() {
                *c = samples.sample_values(i)[j];
            }
            col.sort_by(f64::total_cmp);
            for (q, out) in levels.iter().zip(qs.iter_mut()) {
                let pos = q * (n - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                out[j] = col[lo] + (pos - lo as f64) * (col[hi] - col[lo]);
            }
        }
    }
    let grid = samples.grid().clone();
    let c = samples.channels();
    Ok(PosteriorSummary {
        mean: GridFunction::new(grid.clone(), c, mean)?,
        std: GridFunction::new(grid.clone(), c, std)?,
        quantiles: levels
            .iter()
            .zip(qs)
            .map(|(&q, v)| Ok((q, GridFunction::new(grid.clone(), c, v)?)))
            .collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{ModelConfig, PartitionMode};
    use crate::gp::{gp_sample, gpr_posterior, GaussianProcessSpec};
    use crate::grid::IndexSet;

    fn latent() -> GaussianProcessSpec {
        GaussianProcessSpec::new(0.2, 0.5).unwrap()
    }

    fn identity(dims: usize) -> OpFlowModel {
        let cfg = ModelConfig {
            blocks: 0,
            ..ModelConfig::new(dims, 1, PartitionMode::Domain, latent())
        };
        OpFlowModel::new(cfg, 0).unwrap()
    }

    fn tiny(seed: u64) -> OpFlowModel {
        let cfg = ModelConfig {
            blocks: 2,
            modes: 2,
            width: 4,
            depth: 1,
            ..ModelConfig::new(1, 1, PartitionMode::Domain, latent())
        };
        OpFlowModel::new_random(cfg, seed).unwrap()
    }

    fn observations(grid: &Grid, nodes: Vec<usize>, seed: u64) -> (GridFunction, Observations) {
        let truth = gp_sample(&GaussianProcessSpec::new(0.5, 1.5).unwrap(), grid, 1, seed).unwrap().sample(0);
        let pts = IndexSet::new(grid, nodes).unwrap();
        let obs = Observations::from_function(&truth, pts, vec![0], DEFAULT_NOISE_VARIANCE).unwrap();
        (truth, obs)
    }

    #[test]
    fn density_data_term() {
        let grid = Grid::line(8).unwrap();
        let m = tiny(1);
        let (truth, obs) = observations(&grid, vec![1, 5], 2);
        let prior = m.log_likelihood(&truth).unwrap();
        assert!((posterior_log_density(&truth, &obs, &m).unwrap() - prior).abs() < 1e-12);

        let delta = 0.3;
        let mut v = truth.values().to_vec();
        v[5] += delta;
        let moved = GridFunction::new(grid.clone(), 1, v).unwrap();
        let want = m.log_likelihood(&moved).unwrap() - delta * delta / (2.0 * DEFAULT_NOISE_VARIANCE);
        assert!((posterior_log_density(&moved, &obs, &m).unwrap() - want).abs() < 1e-10);

        let other = GridFunction::zeros(Grid::line(16).unwrap(), 1);
        assert!(posterior_log_density(&other, &obs, &m).is_err());
        let noiseless = Observations::new(obs.points().clone(), obs.values().to_vec(), 0.0).unwrap();
        assert!(posterior_log_density(&truth, &noiseless, &m).is_err());
    }

    #[test]
    fn density_gradient_matches_finite_differences() {
        let grid = Grid::line(8).unwrap();
        let m = tiny(3);
        let (truth, obs) = observations(&grid, vec![0, 3, 6], 4);
        let (_, g) = posterior_log_density_grad(&truth, &obs, &m).unwrap();
        let h = 1e-5;
        for k in 0..8 {
            let mut up = truth.values().to_vec();
            up[k] += h;
            let mut dn = truth.values().to_vec();
            dn[k] -= h;
            let f = |v: Vec<f64>| posterior_log_density(&GridFunction::new(grid.clone(), 1, v).unwrap(), &obs, &m).unwrap();
            let fd = (f(up) - f(dn)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-3 * fd.abs().max(1.0), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn map_without_observations_is_the_prior_mode() {
        let grid = Grid::line(32).unwrap();
        let obs = Observations::none(&grid, DEFAULT_NOISE_VARIANCE);
        let r = map_estimate(&obs, &identity(1), &MapConfig::default()).unwrap();
        assert!(r.estimate.values().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn identity_map_matches_gpr_mean() {
        let grid = Grid::line(64).unwrap();
        let (_, obs) = observations(&grid, vec![3, 17, 30, 41, 58], 5);
        let r = map_estimate(&obs, &identity(1), &MapConfig::default()).unwrap();
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0]));
        let post = gpr_posterior(&latent(), &obs, obs.points()).unwrap();
        for (i, &p) in obs.points().indices().iter().enumerate() {
            assert!((r.estimate.values()[p] - post.mean[i]).abs() < 1e-2);
        }
        let full = gpr_posterior(&latent(), &obs, &IndexSet::full(&grid)).unwrap();
        let err = r.estimate.values().iter().zip(full.mean.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-4, "max deviation {err}");
    }

    #[test]
    fn map_is_reparameterization_invariant() {
        let grid = Grid::line(8).unwrap();
        let m = tiny(6);
        let (_, obs) = observations(&grid, vec![1, 4, 6], 7);
        let latent = map_estimate(&obs, &m, &MapConfig::default()).unwrap();
        let data = map_estimate(
            &obs,
            &m,
            &MapConfig {
                coordinates: Coordinates::Data,
                ..MapConfig::default()
            },
        )
        .unwrap();
        assert!((latent.objective - data.objective).abs() < 1e-3, "{} vs {}", latent.objective, data.objective);
    }

    #[test]
    fn sgld_fixed_point_and_counts() {
        let grid = Grid::line(16).unwrap();
        let obs = Observations::none(&grid, 1.0);
        let cfg = SgldConfig {
            total_iterations: 95,
            burn_in: 10,
            thinning: 10,
            temperature: 0.0,
            ..SgldConfig::gp_default(1)
        };
        assert_eq!(cfg.sample_count(), 8);
        let r = sgld_sample(&obs, &identity(1), &cfg, &MapConfig::default()).unwrap();
        assert_eq!(r.samples.count(), 8);
        assert!(r.samples.values().iter().all(|v| *v == 0.0));
        assert!(r.diverged_at.is_none());
    }

    #[test]
    fn sgld_is_reproducible() {
        let grid = Grid::line(8).unwrap();
        let (_, obs) = observations(&grid, vec![2, 5], 8);
        let cfg = SgldConfig {
            total_iterations: 200,
            burn_in: 50,
            thinning: 7,
            ..SgldConfig::gp_default(9)
        };
        let m = tiny(10);
        let a = sgld_sample(&obs, &m, &cfg, &MapConfig::default()).unwrap();
        let b = sgld_sample(&obs, &m, &cfg, &MapConfig::default()).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.samples.count(), 150 / 7);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn sgld_detects_divergence() {
        let grid = Grid::line(8).unwrap();
        let (_, obs) = observations(&grid, vec![2, 5], 8);
        let cfg = SgldConfig {
            total_iterations: 200,
            burn_in: 10,
            thinning: 1,
            step_initial: 50.0,
            step_final: 50.0,
            ..SgldConfig::gp_default(1)
        };
        let r = sgld_sample(&obs, &identity(1), &cfg, &MapConfig::default()).unwrap();
        assert!(r.diverged_at.is_some());
        assert!(r.samples.count() < cfg.sample_count());
    }

    #[test]
    fn config_validation() {
        assert!(SgldConfig::gp_default(0).validate().is_ok());
        let c = SgldConfig {
            burn_in: 50_000,
            ..SgldConfig::gp_default(0)
        };
        assert!(c.validate().is_err());
        let c = SgldConfig {
            step_final: 1.0,
            ..SgldConfig::gp_default(0)
        };
        assert!(c.validate().is_err());
        let c = SgldConfig::gp_default(0);
        assert_eq!(c.step(0), 5e-3);
        assert!((c.step(c.total_iterations) - 4e-3).abs() < 1e-15);
        assert_eq!(c.sample_count(), 3800);
    }

    #[test]
    fn summary_statistics() {
        let grid = Grid::line(2).unwrap();
        let b = FunctionBatch::new(grid.clone(), 1, 2, vec![0.0, 5.0, 2.0, 5.0]).unwrap();
        let s = summarize(&b, &[0.5]).unwrap();
        assert_eq!(s.mean.values(), &[1.0, 5.0]);
        assert!((s.std.values()[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.std.values()[1], 0.0);
        assert_eq!(s.quantiles[0].1.values(), &[1.0, 5.0]);
        assert!(summarize(&b.select(&[0]), &[]).is_err());
    }
}
