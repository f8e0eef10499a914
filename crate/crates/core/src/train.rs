//! Two-phase training: a warmup phase minimising the negative log-likelihood
//! plus `λ·Ŵ₂²` between the latent GP and the empirical Gaussian fit of the
//! pushed-forward batch, then a finetune phase on the likelihood alone. Small
//! latent-GP noise is added to every minibatch.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::flow::{InverseTape, OpFlowModel};
use crate::gp::{GaussianProcessSpec, GpFactor};
use crate::grid::FunctionBatch;
use crate::linalg::gemm;

/// Storage precision of the training data. Arithmetic is always 64-bit;
/// `F32` rounds the data to single precision before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight λ of the Ŵ₂² term during warmup.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Amplitude γ of the injected latent-GP noise; `None` means 0.01 x the
    /// data standard deviation.
    #[serde(default)]
    pub noise_level: Option<f64>,
    pub batch_size: usize,
    pub warmup_iterations: usize,
    pub finetune_iterations: usize,
    pub lr_warmup: f64,
    pub lr_finetune: f64,
    /// Learning-rate multiplier reached at the end of each phase (exponential
    /// decay in between).
    #[serde(default = "default_decay")]
    pub lr_decay_warmup: f64,
    #[serde(default = "default_decay")]
    pub lr_decay_finetune: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    pub seed: u64,
    /// Save a checkpoint every this many iterations (0 disables).
    #[serde(default)]
    pub checkpoint_interval: usize,
    #[serde(default)]
    pub precision: Precision,
    /// Final Ŵ₂² above this raises a warning in the outcome.
    #[serde(default = "default_w2_threshold")]
    pub w2_threshold: f64,
    /// Samples used for actnorm initialisation and the final Ŵ₂² evaluation.
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    /// Log every this many iterations to the history (the last iteration is
    /// always logged).
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_decay() -> f64 {
    0.1
}
fn default_clip() -> f64 {
    5.0
}
fn default_w2_threshold() -> f64 {
    1.0
}
fn default_eval_size() -> usize {
    512
}
fn default_log_interval() -> usize {
    1
}

impl TrainConfig {
    /// Defaults with a 60/40 warmup/finetune split of `iterations`.
    pub fn with_budget(iterations: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        let warmup = (iterations * 3).div_ceil(5);
        Self {
            lambda: default_lambda(),
            noise_level: None,
            batch_size,
            warmup_iterations: warmup,
            finetune_iterations: iterations - warmup,
            lr_warmup: lr,
            lr_finetune: lr * 0.5,
            lr_decay_warmup: default_decay(),
            lr_decay_finetune: default_decay(),
            clip_norm: default_clip(),
            seed,
            checkpoint_interval: 0,
            precision: Precision::F64,
            w2_threshold: default_w2_threshold(),
            eval_size: default_eval_size(),
            log_interval: default_log_interval(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if let Some(g) = self.noise_level {
            if !(g >= 0.0) {
                return bad(format!("noise_level must be >= 0, got {g}"));
            }
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(self.lr_warmup > 0.0) || !(self.lr_finetune > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.lr_finetune > self.lr_warmup {
            return bad("lr_finetune must not exceed lr_warmup".into());
        }
        if !(self.lr_decay_warmup > 0.0 && self.lr_decay_warmup <= 1.0)
            || !(self.lr_decay_finetune > 0.0 && self.lr_decay_finetune <= 1.0)
        {
            return bad("learning-rate decay factors must lie in (0, 1]".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        if self.eval_size < 2 {
            return bad("eval_size must be at least 2".into());
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.warmup_iterations + self.finetune_iterations
    }

    /// Phase and learning rate of global iteration `t`.
    pub fn schedule(&self, t: usize) -> (Phase, f64) {
        if t < self.warmup_iterations {
            let frac = t as f64 / self.warmup_iterations.max(1) as f64;
            (Phase::Warmup, self.lr_warmup * self.lr_decay_warmup.powf(frac))
        } else {
            let frac = (t - self.warmup_iterations) as f64 / self.finetune_iterations.max(1) as f64;
            (Phase::Finetune, self.lr_finetune * self.lr_decay_finetune.powf(frac))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub nll: f64,
    pub w2_hat: f64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
}

impl TrainHistory {
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    /// Ŵ₂² between the latent GP and the fit of ℱ(data) after training.
    pub final_w2_hat: f64,
    pub warning: Option<String>,
}

/// Extra behaviour of a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory receiving periodic and final checkpoints and `history.jsonl`.
    pub out_dir: Option<PathBuf>,
    /// Tag written on every history record (e.g. "ablation").
    pub tag: Option<String>,
}

/// Loss components of one minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub nll: f64,
    pub w2_hat: f64,
    pub total: f64,
}

/// Add `γ ν_i` to every sample, with `ν_i` independent latent-GP draws.
pub fn inject_gp_noise(batch: &FunctionBatch, gamma: f64, spec: &GaussianProcessSpec, seed: u64) -> Result<FunctionBatch> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid("noise level must be >= 0"));
    }
    if gamma == 0.0 {
        return Ok(batch.clone());
    }
    let factor = GpFactor::new(spec, batch.grid(), spec.default_jitter())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = batch.clone();
    add_noise(&factor, gamma, &mut rng, out.values_mut(), batch.count() * batch.channels());
    Ok(out)
}

fn add_noise(factor: &GpFactor, gamma: f64, rng: &mut ChaCha8Rng, values: &mut [f64], rows: usize) {
    let n = factor.grid().node_count();
    let mut nu = vec![0.0; rows * n];
    factor.sample_rows(rng, rows, &mut nu);
    let mean = factor.spec().mean;
    for (v, z) in values.iter_mut().zip(&nu) {
        *v += gamma * (z - mean);
    }
}

/// Ŵ₂² between `(h1, K1)` and the empirical fit of the rows of `a`
/// (`n x l`, row-major), with its gradient w.r.t. `a`.
pub(crate) fn w2_hat_with_grad(a: &[f64], n: usize, h1: &[f64], k1: &[f64]) -> (f64, Vec<f64>) {
    let l = h1.len();
    debug_assert_eq!(a.len(), n * l);
    let mut h2 = vec![0.0; l];
    for row in a.chunks_exact(l) {
        h2.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    h2.iter_mut().for_each(|m| *m /= n as f64);
    let x: Vec<f64> = a
        .chunks_exact(l)
        .flat_map(|row| row.iter().zip(&h2).map(|(v, m)| v - m))
        .collect();
    // D = K2 - K1
    let mut d = k1.iter().map(|v| -v).collect::<Vec<_>>();
    gemm(l, n, l, 1.0 / (n - 1) as f64, &x, 1, l, &x, l, 1, 1.0, &mut d, l, 1);
    let mean_term: f64 = h1.iter().zip(&h2).map(|(a, b)| (a - b).powi(2)).sum();
    let frob: f64 = d.iter().map(|v| v * v).sum();
    let value = (mean_term + frob) / l as f64;

    let mut grad = vec![0.0; n * l];
    gemm(n, l, l, 4.0 / ((n - 1) as f64 * l as f64), &x, l, 1, &d, l, 1, 0.0, &mut grad, l, 1);
    for row in grad.chunks_exact_mut(l) {
        for ((g, a), b) in row.iter_mut().zip(h1).zip(&h2) {
            *g -= 2.0 * (a - b) / (n as f64 * l as f64);
        }
    }
    (value, grad)
}

/// Latent moments flattened over `[channel][node]`, as dense row-major data.
struct LatentTarget {
    h1: Vec<f64>,
    k1: Vec<f64>,
}

impl LatentTarget {
    fn new(model: &OpFlowModel, batch: &FunctionBatch) -> Result<Self> {
        let m = model.latent_moments(batch.grid())?;
        let l = m.dim();
        let mut k1 = vec![0.0; l * l];
        for i in 0..l {
            for j in 0..l {
                k1[i * l + j] = m.covariance[(i, j)];
            }
        }
        Ok(Self {
            h1: m.mean.iter().copied().collect(),
            k1,
        })
    }
}

/// Loss of `batch` and the latent/log-det cotangents that backpropagate it.
fn loss_cotangents(
    model: &OpFlowModel,
    batch: &FunctionBatch,
    lambda: f64,
    target: Option<&LatentTarget>,
) -> Result<(LossParts, Vec<f64>, Vec<f64>, InverseTape)> {
    let n = batch.count();
    let (a, logdet, tape) = model.inverse_taped(batch)?;
    let cache = model.grid_cache(batch.grid())?;
    let lp = model.latent_log_density(&cache, &a);
    let nll = -lp.iter().zip(&logdet).map(|(p, l)| p + l).sum::<f64>() / n as f64;
    let mut da = vec![0.0; a.len()];
    cache.prior().add_log_density_grad(&a, -1.0 / n as f64, &mut da);
    let dlogdet = vec![-1.0 / n as f64; n];
    let mut w2 = 0.0;
    if lambda > 0.0 {
        let owned;
        let t = match target {
            Some(t) => t,
            None => {
                owned = LatentTarget::new(model, batch)?;
                &owned
            }
        };
        let (v, g) = w2_hat_with_grad(&a, n, &t.h1, &t.k1);
        w2 = v;
        da.iter_mut().zip(&g).for_each(|(d, g)| *d += lambda * g);
    }
    let parts = LossParts {
        nll,
        w2_hat: w2,
        total: nll + lambda * w2,
    };
    Ok((parts, da, dlogdet, tape))
}

/// Batch-mean NLL plus `λ·Ŵ₂²`.
pub fn warmup_loss(batch: &FunctionBatch, model: &OpFlowModel, lambda: f64) -> Result<f64> {
    if batch.count() < 2 {
        return Err(Error::invalid("warmup loss needs at least 2 samples"));
    }
    Ok(loss_cotangents(model, batch, lambda, None)?.0.total)
}

/// Batch-mean NLL.
pub fn finetune_loss(batch: &FunctionBatch, model: &OpFlowModel) -> Result<f64> {
    let lp = model.log_likelihood_batch(batch)?;
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Loss components and their gradient w.r.t. the model parameters.
pub fn loss_and_gradient(model: &OpFlowModel, batch: &FunctionBatch, lambda: f64) -> Result<(LossParts, Vec<f64>)> {
    if lambda > 0.0 && batch.count() < 2 {
        return Err(Error::invalid("the Wasserstein term needs at least 2 samples"));
    }
    let (parts, da, dld, tape) = loss_cotangents(model, batch, lambda, None)?;
    let mut grad = vec![0.0; model.parameter_count()];
    model.inverse_backward(&tape, &da, &dld, Some(&mut grad));
    Ok((parts, grad))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Descent step `params -= lr · m̂ / (sqrt(v̂) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / b1t) / ((*v / b2t).sqrt() + self.eps);
        }
    }
}

/// Scale `g` to norm at most `max`; returns the norm before clipping.
pub fn clip_gradient(g: &mut [f64], max: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

fn data_std(batch: &FunctionBatch) -> f64 {
    let v = batch.values();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn round_to_f32(batch: &FunctionBatch) -> FunctionBatch {
    let mut out = batch.clone();
    out.values_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    out
}

fn minibatch(data: &FunctionBatch, rng: &mut ChaCha8Rng, size: usize) -> FunctionBatch {
    let size = size.min(data.count());
    let mut idx = index::sample(rng, data.count(), size).into_vec();
    idx.sort_unstable();
    data.select(&idx)
}

/// Ŵ₂² of the pushforward of (up to) `eval_size` data samples.
pub fn pushforward_w2_hat(model: &OpFlowModel, data: &FunctionBatch, eval_size: usize) -> Result<f64> {
    let take: Vec<usize> = (0..data.count().min(eval_size)).collect();
    let sub = data.select(&take);
    if sub.count() < 2 {
        return Err(Error::invalid("need at least 2 samples for the Wasserstein fit"));
    }
    let target = LatentTarget::new(model, &sub)?;
    let (a, _) = model.inverse_batch(&sub)?;
    Ok(w2_hat_with_grad(a.values(), sub.count(), &target.h1, &target.k1).0)
}

fn write_history_line(out: &Option<PathBuf>, record: &TrainRecord) -> Result<()> {
    if let Some(dir) = out {
        let path = dir.join("history.jsonl");
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn save_checkpoint(model: &OpFlowModel, dir: &Path, name: &str) -> Result<()> {
    checkpoint::save(model, &dir.join(name))
}

/// Run the two-phase schedule from the model's current iteration counter.
///
/// On a non-finite loss the model is restored to the last good parameters,
/// a checkpoint of them is written (when an output directory is set) and
/// [`Error::NonFiniteLoss`] is returned.
pub fn train(model: &mut OpFlowModel, data: &FunctionBatch, config: &TrainConfig, options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training data set is empty"));
    }
    if data.channels() != model.channels() {
        return Err(Error::shape("data channel count differs from the model"));
    }
    if let Some(dir) = &options.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let data = match config.precision {
        Precision::F32 => round_to_f32(data),
        Precision::F64 => data.clone(),
    };
    let gamma = config.noise_level.unwrap_or_else(|| 0.01 * data_std(&data));
    let cache = model.grid_cache(data.grid())?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6e6f_6973_6500_0001);
    model.lineage.train_seed = Some(config.seed);

    let start_iter = model.lineage.iteration as usize;
    let eval_idx: Vec<usize> = (0..data.count().min(config.eval_size)).collect();
    if start_iter == 0 {
        model.actnorm_data_init(&data.select(&eval_idx))?;
    }
    // advance the streams so a resumed run continues where it stopped
    for _ in 0..start_iter {
        let _ = minibatch(&data, &mut data_rng, config.batch_size);
        let mut scratch = vec![0.0; config.batch_size.min(data.count()) * data.sample_len()];
        if gamma > 0.0 {
            add_noise(cache.prior(), gamma, &mut noise_rng, &mut scratch, config.batch_size.min(data.count()) * data.channels());
        }
    }

    let probe = data.select(&(0..config.batch_size.min(data.count())).collect::<Vec<_>>());
    let target = if config.lambda > 0.0 && config.warmup_iterations > start_iter {
        Some(LatentTarget::new(model, &probe)?)
    } else {
        None
    };
    let mut adam = Adam::new(model.parameter_count());
    let mut history = TrainHistory::default();
    let mut last_good = model.params().to_vec();
    let clock = Instant::now();
    let total = config.total_iterations();
    for t in start_iter..total {
        let (phase, lr) = config.schedule(t);
        let mut batch = minibatch(&data, &mut data_rng, config.batch_size);
        if gamma > 0.0 {
            let rows = batch.count() * batch.channels();
            add_noise(cache.prior(), gamma, &mut noise_rng, batch.values_mut(), rows);
        }
        let lambda = if phase == Phase::Warmup { config.lambda } else { 0.0 };
        let step = loss_cotangents(model, &batch, lambda, target.as_ref());
        let (parts, da, dld, tape) = match step {
            Ok(v) if v.0.total.is_finite() => v,
            Ok(_) | Err(Error::Numerical(_)) => {
                model.set_params(&last_good)?;
                model.lineage.iteration = t as u64;
                if let Some(dir) = &options.out_dir {
                    save_checkpoint(model, dir, "last_good.opfl")?;
                }
                return Err(Error::NonFiniteLoss { iteration: t });
            }
            Err(e) => return Err(e),
        };
        let mut grad = vec![0.0; model.parameter_count()];
        model.inverse_backward(&tape, &da, &dld, Some(&mut grad));
        drop(tape);
        if grad.iter().any(|g| !g.is_finite()) {
            model.set_params(&last_good)?;
            model.lineage.iteration = t as u64;
            return Err(Error::NonFiniteLoss { iteration: t });
        }
        last_good.copy_from_slice(model.params());
        let grad_norm = clip_gradient(&mut grad, config.clip_norm);
        adam.step(model.params_mut(), &grad, lr);
        model.lineage.iteration = (t + 1) as u64;

        if (t + 1) % config.log_interval.max(1) == 0 || t + 1 == total {
            let record = TrainRecord {
                iteration: t,
                phase,
                nll: parts.nll,
                w2_hat: parts.w2_hat,
                loss: parts.total,
                lr,
                grad_norm,
                wall_time: clock.elapsed().as_secs_f64(),
                tag: options.tag.clone(),
            };
            write_history_line(&options.out_dir, &record)?;
            history.records.push(record);
        }
        if let Some(dir) = &options.out_dir {
            if config.checkpoint_interval > 0 && (t + 1) % config.checkpoint_interval == 0 {
                save_checkpoint(model, dir, &format!("ckpt_{:07}.opfl", t + 1))?;
            }
        }
    }
    if model.params().iter().any(|p| !p.is_finite()) {
        model.set_params(&last_good)?;
        return Err(Error::NonFiniteLoss { iteration: total });
    }
    let final_w2_hat = pushforward_w2_hat(model, &data, config.eval_size)?;
    let warning = (final_w2_hat > config.w2_threshold).then(|| {
        format!(
            "final Ŵ₂² {final_w2_hat:.4} exceeds the threshold {}",
            config.w2_threshold
        )
    });
    if let Some(dir) = &options.out_dir {
        save_checkpoint(model, dir, "final.opfl")?;
    }
    Ok(TrainOutcome {
        history,
        final_w2_hat,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{ModelConfig, PartitionMode};
    use crate::gp::{fit_empirical_gaussian, gp_sample, w2_approx, GaussianMomentPair};
    use crate::grid::Grid;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    fn latent() -> GaussianProcessSpec {
        GaussianProcessSpec::new(0.2, 0.5).unwrap()
    }

    fn tiny_model(seed: u64) -> OpFlowModel {
        let cfg = ModelConfig {
            blocks: 2,
            modes: 2,
            width: 4,
            depth: 1,
            ..ModelConfig::new(1, 1, PartitionMode::Domain, latent())
        };
        OpFlowModel::new_random(cfg, seed).unwrap()
    }

    fn data(count: usize, seed: u64) -> FunctionBatch {
        gp_sample(&GaussianProcessSpec::new(0.5, 1.5).unwrap(), &Grid::line(8).unwrap(), count, seed).unwrap()
    }

    #[test]
    fn noise_injection() {
        let b = data(4, 1);
        assert_eq!(inject_gp_noise(&b, 0.0, &latent(), 3).unwrap(), b);
        assert_eq!(inject_gp_noise(&b, 0.5, &latent(), 3).unwrap(), inject_gp_noise(&b, 0.5, &latent(), 3).unwrap());
        let zero = FunctionBatch::zeros(Grid::line(8).unwrap(), 1, 1000);
        let noisy = inject_gp_noise(&zero, 1.0, &latent(), 4).unwrap();
        let var = noisy.values().iter().map(|v| v * v).sum::<f64>() / noisy.values().len() as f64;
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn w2_hat_matches_oracle_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, l) = (6, 3);
        let a: Vec<f64> = (0..n * l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h1 = vec![0.1, -0.2, 0.0];
        let k1 = vec![1.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 1.0];
        let (v, g) = w2_hat_with_grad(&a, n, &h1, &k1);
        let p = GaussianMomentPair::new(DVector::from_vec(h1.clone()), DMatrix::from_row_slice(3, 3, &k1)).unwrap();
        let q = fit_empirical_gaussian(&a, l).unwrap();
        assert!((v - w2_approx(&p, &q).unwrap()).abs() < 1e-12);
        let h = 1e-6;
        for k in 0..a.len() {
            let mut up = a.clone();
            up[k] += h;
            let mut dn = a.clone();
            dn[k] -= h;
            let fd = (w2_hat_with_grad(&up, n, &h1, &k1).0 - w2_hat_with_grad(&dn, n, &h1, &k1).0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn loss_relations() {
        let m = tiny_model(1);
        let b = data(5, 2);
        let ft = finetune_loss(&b, &m).unwrap();
        assert!((warmup_loss(&b, &m, 0.0).unwrap() - ft).abs() < 1e-12);
        let rev = b.select(&[4, 3, 2, 1, 0]);
        assert!((finetune_loss(&rev, &m).unwrap() - ft).abs() < 1e-12);
        assert!(warmup_loss(&b, &m, 1.0).unwrap() > ft);

        let id = OpFlowModel::new(*m.config(), 0).unwrap();
        let lp: Vec<f64> = b
            .samples()
            .map(|f| {
                crate::gp::gp_log_density(f.values(), &f.grid().node_coordinates(), &latent(), latent().default_jitter()).unwrap()
            })
            .collect();
        let want = -lp.iter().sum::<f64>() / lp.len() as f64;
        assert!((finetune_loss(&b, &id).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn warmup_gradient_matches_finite_differences() {
        let mut m = tiny_model(7);
        let b = data(6, 8);
        for lambda in [0.0, 1.0] {
            let (_, g) = loss_and_gradient(&m, &b, lambda).unwrap();
            let base = m.params().to_vec();
            let h = 1e-4;
            for k in (0..base.len()).step_by(3) {
                m.params_mut()[k] = base[k] + h;
                let up = warmup_loss(&b, &m, lambda).unwrap();
                m.params_mut()[k] = base[k] - h;
                let dn = warmup_loss(&b, &m, lambda).unwrap();
                m.params_mut()[k] = base[k];
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-3 * fd.abs().max(1e-2), "λ={lambda} k={k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn gradient_step_descends() {
        let mut m = tiny_model(9);
        let b = data(6, 10);
        let before = finetune_loss(&b, &m).unwrap();
        let (_, g) = loss_and_gradient(&m, &b, 0.0).unwrap();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (p, gi) in m.params_mut().iter_mut().zip(&g) {
            *p -= 1e-4 * gi / norm;
        }
        assert!(finetune_loss(&b, &m).unwrap() < before);
    }

    #[test]
    fn identity_model_on_latent_batch_has_small_w2() {
        let spec = GaussianProcessSpec::new(0.1, 0.5).unwrap();
        let cfg = ModelConfig {
            blocks: 0,
            ..ModelConfig::new(1, 1, PartitionMode::Domain, spec)
        };
        let m = OpFlowModel::new(cfg, 0).unwrap();
        let b = gp_sample(&spec, &Grid::line(64).unwrap(), 256, 3).unwrap();
        let w = warmup_loss(&b, &m, 1.0).unwrap() - finetune_loss(&b, &m).unwrap();
        assert!(w < 0.5, "Ŵ₂² {w}");
    }

    #[test]
    fn training_is_reproducible() {
        let d = data(64, 11);
        let cfg = TrainConfig::with_budget(30, 8, 5e-3, 12);
        let run = || {
            let mut m = tiny_model(13);
            let out = train(&mut m, &d, &cfg, &TrainOptions::default()).unwrap();
            (m, out)
        };
        let (m1, o1) = run();
        let (m2, o2) = run();
        assert_eq!(m1.params(), m2.params());
        let strip = |h: &TrainHistory| {
            h.records
                .iter()
                .map(|r| TrainRecord { wall_time: 0.0, ..r.clone() })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&o1.history), strip(&o2.history));
        assert!(o1.history.records.iter().all(|r| r.loss.is_finite()));
        assert_eq!(m1.lineage.iteration, 30);
        let recs = &o1.history.records;
        assert_eq!(recs.len(), 30);
        assert!(recs.windows(2).all(|w| w[0].iteration < w[1].iteration));
        assert_eq!(recs[0].phase, Phase::Warmup);
        assert_eq!(recs[29].phase, Phase::Finetune);
        assert!(recs[29].w2_hat == 0.0);
    }

    #[test]
    fn resume_continues_the_counter() {
        let d = data(32, 14);
        let cfg = TrainConfig::with_budget(10, 4, 1e-3, 15);
        let mut full = tiny_model(16);
        train(&mut full, &d, &cfg, &TrainOptions::default()).unwrap();

        let mut part = tiny_model(16);
        let short = TrainConfig {
            finetune_iterations: 0,
            warmup_iterations: 6,
            ..cfg.clone()
        };
        train(&mut part, &d, &short, &TrainOptions::default()).unwrap();
        assert_eq!(part.lineage.iteration, 6);
        let out = train(&mut part, &d, &cfg, &TrainOptions::default()).unwrap();
        assert_eq!(out.history.records.first().unwrap().iteration, 6);
        assert_eq!(part.lineage.iteration, 10);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::with_budget(10, 4, 1e-3, 0);
        assert!(c.validate().is_ok());
        c.lr_finetune = 1.0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: 1,
            ..TrainConfig::with_budget(10, 4, 1e-3, 0)
        };
        assert!(c.validate().is_err());
        let (p, lr) = TrainConfig::with_budget(10, 4, 1e-3, 0).schedule(0);
        assert_eq!((p, lr), (Phase::Warmup, 1e-3));
    }
}
