//! The `opflow` command-line tool: data generation, training, sampling,
//! regression, evaluation and plotting. Exit codes: 0 success, 2
//! configuration error, 3 numerical failure, 4 I/O error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::datasets::{generate_dataset, pair_channels, Dataset, ElementType};
use crate::error::{Error, Result};
use crate::flow::OpFlowModel;
use crate::gp::gpr_posterior;
use crate::grid::{Grid, GridFunction, IndexSet};
use crate::metrics::{amplitude_histogram, autocovariance, f2id_against, f2id_score, msll, smse, MetricReport};
use crate::observations::Observations;
use crate::plot;
use crate::regression::{sgld_sample_chains, summarize};
use crate::train::{train, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "opflow", version, about = "Neural operator flows for functional regression")]
pub struct Cli {
    /// Directory that relative paths are resolved against.
    #[arg(long, global = true)]
    pub root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from the [data] section.
    GenData(GenDataArgs),
    /// Train (or resume) a model on a dataset.
    Train(TrainArgs),
    /// Draw samples from a trained model at any resolution.
    Sample(SampleArgs),
    /// Posterior MAP estimate and Langevin samples given observations.
    Regress(RegressArgs),
    /// Compare predicted samples against reference samples.
    Eval(EvalArgs),
    /// Render SVG figures for datasets, regression outputs and reports.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides data.seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable the Wasserstein term (λ = 0) and tag the history "ablation".
    #[arg(long)]
    pub ablation: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// Per-axis resolution, e.g. `256` or `64,64`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub resolution: Vec<usize>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Store 64-bit values instead of 32-bit.
    #[arg(long)]
    pub f64: bool,
}

#[derive(Debug, Args)]
pub struct RegressArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Observation file; without it the [regression] observation rule is
    /// applied to a fresh draw from the data process.
    #[arg(long)]
    pub obs: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides regression.sgld.seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted samples (UFDS1).
    #[arg(long)]
    pub data: PathBuf,
    /// Reference samples (UFDS1).
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional config whose [metrics] section sets lags and bins.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Datasets (.ufds), regression summaries or metric reports (.json).
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Regression output written to `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionSummary {
    pub resolution: Vec<usize>,
    pub channels: usize,
    pub map: Vec<f64>,
    pub map_objective: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub quantiles: Vec<(f64, Vec<f64>)>,
    pub sample_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged_at: Option<usize>,
    /// Analytic GP-regression posterior under the data process, when it is Gaussian.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_std: Option<Vec<f64>>,
}

struct Ctx {
    root: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(r) if p.is_relative() => r.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn copy_config(src: &Path, dir: &Path, name: &str) -> Result<()> {
    let text = std::fs::read(src).map_err(|e| Error::io(src, e))?;
    write(&dir.join(name), text)
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn gen_data(ctx: &Ctx, a: &GenDataArgs) -> Result<String> {
    let cfg_path = ctx.path(&a.config);
    let cfg = ExperimentConfig::load(&cfg_path)?;
    let d = cfg.data()?;
    let grid = cfg.grid.grid()?;
    let seed = a.seed.unwrap_or(d.seed);
    let mut ds = generate_dataset(d.kind, &d.gp, d.bounds, &grid, d.count, seed, d.element_type)?;
    if d.pair_channels {
        let ps = d.pairing_seed.expect("validated");
        let generator = ds.header.generator;
        ds = Dataset::from_batch("paired", pair_channels(&ds.batch, ps)?, d.element_type);
        ds.header.generator = generator;
        ds.header.notes.insert("pairing_seed".into(), ps.to_string());
    }
    let out = ctx.path(&a.out);
    let dir = parent_dir(&out);
    create_dir(&dir)?;
    ds.save(&out)?;
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into());
    copy_config(&cfg_path, &dir, &format!("{stem}.config.toml"))?;
    Ok(format!(
        "wrote {} samples x {} channels on {:?} to {}",
        ds.header.count,
        ds.header.channels,
        ds.header.resolution,
        out.display()
    ))
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<String> {
    let cfg_path = ctx.path(&a.config);
    let cfg = ExperimentConfig::load(&cfg_path)?;
    let mut tc = cfg.train()?.clone();
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if a.ablation {
        tc.lambda = 0.0;
    }
    let data = Dataset::load(&ctx.path(&a.data))?;
    let mut model = match &a.ckpt {
        Some(p) => checkpoint::load(&ctx.path(p))?,
        None => {
            let mc = cfg.model_config()?;
            let seed = cfg.model.as_ref().expect("model_config checked").seed;
            let mut m = OpFlowModel::new(mc, seed)?;
            m.lineage.data_seed = data.header.generator.map(|g| g.seed);
            m
        }
    };
    let out = ctx.path(&a.out);
    create_dir(&out)?;
    copy_config(&cfg_path, &out, "config.toml")?;
    let options = TrainOptions {
        out_dir: Some(out.clone()),
        tag: a.ablation.then(|| "ablation".to_string()),
    };
    let outcome = train(&mut model, &data.batch, &tc, &options)?;
    let summary = serde_json::json!({
        "iterations": model.lineage.iteration,
        "final_w2_hat": outcome.final_w2_hat,
        "warning": outcome.warning,
        "lambda": tc.lambda,
        "parameter_count": model.parameter_count(),
    });
    write(&out.join("train_summary.json"), serde_json::to_string_pretty(&summary).expect("json"))?;
    let mut msg = format!(
        "trained to iteration {}; final Ŵ₂² {:.4}; checkpoint {}",
        model.lineage.iteration,
        outcome.final_w2_hat,
        out.join("final.opfl").display()
    );
    if let Some(w) = outcome.warning {
        msg.push_str(&format!("\nwarning: {w}"));
    }
    Ok(msg)
}

fn sample_cmd(ctx: &Ctx, a: &SampleArgs) -> Result<String> {
    if a.count == 0 {
        return Err(Error::invalid("--count must be at least 1"));
    }
    let ckpt = ctx.path(&a.ckpt);
    let model = checkpoint::load(&ckpt)?;
    let grid = Grid::new(a.resolution.len(), &a.resolution)?;
    let batch = model.sample(&grid, a.count, a.seed)?;
    let et = if a.f64 { ElementType::F64 } else { ElementType::F32 };
    let mut ds = Dataset::from_batch("samples", batch, et);
    ds.header.notes.insert("checkpoint".into(), ckpt.display().to_string());
    ds.header.notes.insert("seed".into(), a.seed.to_string());
    let out = ctx.path(&a.out);
    create_dir(&parent_dir(&out))?;
    ds.save(&out)?;
    Ok(format!("wrote {} samples on {:?} to {}", a.count, a.resolution, out.display()))
}

fn regress_cmd(ctx: &Ctx, a: &RegressArgs) -> Result<String> {
    let cfg_path = ctx.path(&a.config);
    let cfg = ExperimentConfig::load(&cfg_path)?;
    let rc = cfg.regression()?;
    let model = checkpoint::load(&ctx.path(&a.ckpt))?;
    let grid = cfg.grid.grid()?;
    let out = ctx.path(&a.out);
    create_dir(&out)?;
    copy_config(&cfg_path, &out, "config.toml")?;

    let mut truth: Option<GridFunction> = None;
    let obs = match &a.obs {
        Some(p) => Observations::load(&ctx.path(p))?,
        None => {
            let rule = rc
                .observations
                .as_ref()
                .ok_or_else(|| Error::Config("regression.observations is required without --obs".into()))?;
            let seed = rc
                .truth_seed
                .ok_or_else(|| Error::Config("regression.truth_seed is required without --obs".into()))?;
            let d = cfg.data()?;
            let one = generate_dataset(d.kind, &d.gp, d.bounds, &grid, 2, seed, ElementType::F64)?;
            let t = if model.channels() == 2 {
                pair_channels(&one.batch, seed)?.sample(0)
            } else {
                one.batch.sample(0)
            };
            let pts = rule.select(&grid)?;
            let o = Observations::from_function(&t, pts, rc.observed_channels.clone(), rc.noise_variance)?;
            Dataset::from_batch("truth", t.clone().into_batch(), ElementType::F64).save(&out.join("truth.ufds"))?;
            truth = Some(t);
            o
        }
    };
    if obs.grid() != &grid {
        return Err(Error::Config(format!(
            "observations are on {:?} but grid.resolution is {:?}",
            obs.grid().resolution(),
            grid.resolution()
        )));
    }
    obs.save(&out.join("observations.json"))?;
    let mut sc = rc.sgld.clone();
    if let Some(s) = a.seed {
        sc.seed = s;
    }
    let post = sgld_sample_chains(&obs, &model, &sc, &rc.map, rc.chains)?;
    Dataset::from_batch("posterior", post.samples.clone(), ElementType::F64).save(&out.join("posterior_samples.ufds"))?;
    let log: String = post.log.iter().map(|r| serde_json::to_string(r).expect("json") + "\n").collect();
    write(&out.join("sgld_log.jsonl"), log)?;

    let quantiles = if post.samples.count() >= 2 {
        summarize(&post.samples, &rc.quantiles)?
            .quantiles
            .into_iter()
            .map(|(q, f)| (q, f.into_values()))
            .collect()
    } else {
        Vec::new()
    };
    // the analytic posterior exists when the data process is Gaussian and single-channel
    let oracle = match cfg.data.as_ref() {
        Some(d) if !d.kind.truncated() && model.channels() == 1 => {
            let p = gpr_posterior(&d.gp, &obs, &IndexSet::full(&grid))?;
            Some((p.mean.iter().copied().collect::<Vec<_>>(), p.variances().iter().map(|v| v.max(0.0).sqrt()).collect::<Vec<_>>()))
        }
        _ => None,
    };
    let map_objective = crate::regression::posterior_log_density(&post.map_estimate, &obs, &model)?;
    let summary = RegressionSummary {
        resolution: grid.resolution().to_vec(),
        channels: model.channels(),
        map: post.map_estimate.values().to_vec(),
        map_objective,
        mean: post.mean.values().to_vec(),
        std: post.std.values().to_vec(),
        quantiles,
        sample_count: post.samples.count(),
        diverged_at: post.diverged_at,
        oracle_mean: oracle.as_ref().map(|o| o.0.clone()),
        oracle_std: oracle.as_ref().map(|o| o.1.clone()),
    };
    write(&out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("json"))?;

    let mut report = MetricReport::default();
    report.insert("sample_count", post.samples.count() as f64)?;
    report.insert("map_objective", map_objective)?;
    let n = grid.node_count();
    if let Some(t) = &truth {
        if post.samples.count() >= 2 {
            let var: Vec<f64> = post.std.values()[..n].iter().map(|s| (s * s).max(1e-12)).collect();
            report.insert("smse_truth", smse(&post.mean.values()[..n], &t.values()[..n])?)?;
            report.insert("msll_truth", msll(&post.mean.values()[..n], &var, &t.values()[..n])?)?;
        }
    }
    if let Some((m, s)) = &oracle {
        if post.samples.count() >= 2 {
            let num: f64 = post.mean.values().iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum();
            let den: f64 = m.iter().map(|b| b * b).sum::<f64>().max(1e-300);
            report.insert("mean_rel_l2_vs_oracle", (num / den).sqrt())?;
            let snum: f64 = post.std.values().iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum();
            let sden: f64 = s.iter().map(|b| b * b).sum::<f64>().max(1e-300);
            report.insert("std_rel_l2_vs_oracle", (snum / sden).sqrt())?;
        }
    }
    report.provenance.insert("checkpoint".into(), ctx.path(&a.ckpt).display().to_string());
    report.provenance.insert("sgld_seed".into(), sc.seed.to_string());
    write(&out.join("metrics.json"), report.to_json())?;
    let mut msg = format!("harvested {} posterior samples into {}", post.samples.count(), out.display());
    if let Some(t) = post.diverged_at {
        msg.push_str(&format!("\nwarning: chain diverged at iteration {t}; results are partial"));
    }
    Ok(msg)
}

fn eval_cmd(ctx: &Ctx, a: &EvalArgs) -> Result<String> {
    let pred_path = ctx.path(&a.data);
    let ref_path = ctx.path(&a.reference);
    let pred = Dataset::load(&pred_path)?;
    let reference = Dataset::load(&ref_path)?;
    let metrics = match &a.config {
        Some(p) => ExperimentConfig::load(&ctx.path(p))?.metrics,
        None => Default::default(),
    };
    let (p, r) = (&pred.batch, &reference.batch);
    if p.grid() != r.grid() || p.channels() != r.channels() {
        return Err(Error::shape("predictions and reference live on different grids or channel counts"));
    }
    if p.count() < 2 || r.count() < 1 {
        return Err(Error::invalid("evaluation needs at least 2 predicted samples and 1 reference sample"));
    }
    let s = summarize(p, &[])?;
    let var: Vec<f64> = s.std.values().iter().map(|v| (v * v).max(1e-12)).collect();
    // predictive mean/variance scored against every reference draw, then averaged
    let mut sm = 0.0;
    let mut ml = 0.0;
    let mut scored = 0usize;
    for i in 0..r.count() {
        let t = r.sample_values(i);
        if let Ok(v) = smse(s.mean.values(), t) {
            sm += v;
            scored += 1;
        }
        ml += msll(s.mean.values(), &var, t)?;
    }
    let mut report = MetricReport::default();
    if scored > 0 {
        report.insert("smse", sm / scored as f64)?;
    }
    report.insert("msll", ml / r.count() as f64)?;
    let limit = match p.grid().dims() {
        1 => p.grid().resolution()[0],
        _ => *p.grid().resolution().iter().min().expect("2 axes"),
    };
    let lag = metrics.max_lag.min(limit - 1);
    report.autocovariance = Some(autocovariance(p, lag)?);
    report.histogram = Some(amplitude_histogram(p, metrics.bins, metrics.histogram_range)?);
    if r.count() >= 2 {
        let rc = autocovariance(r, lag)?;
        let pc = report.autocovariance.as_ref().expect("set above");
        let num: f64 = pc.values.iter().zip(&rc.values).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = rc.values.iter().map(|b| b * b).sum();
        if den > 0.0 {
            report.insert("autocovariance_rel_l2", (num / den).sqrt())?;
        }
    }
    let f2id = match reference.header.generator {
        Some(g) if !g.kind.truncated() => f2id_score(p, &g.gp)?,
        _ if r.count() >= 2 => f2id_against(p, &crate::gp::fit_batch(r)?)?,
        _ => f64::NAN,
    };
    if f2id.is_finite() {
        report.insert("f2id", f2id)?;
    }
    report.provenance.insert("predictions".into(), pred_path.display().to_string());
    report.provenance.insert("reference".into(), ref_path.display().to_string());
    let out = ctx.path(&a.out);
    let dir = parent_dir(&out);
    create_dir(&dir)?;
    write(&out, report.to_json())?;
    for (name, table) in report.curve_tables() {
        write(&dir.join(name), table)?;
    }
    let line = report
        .scalars
        .iter()
        .map(|(k, v)| format!("{k} = {v:.6}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(line)
}

fn plot_cmd(ctx: &Ctx, a: &PlotArgs) -> Result<String> {
    let out = ctx.path(&a.out);
    create_dir(&out)?;
    let mut written = Vec::new();
    for input in &a.inputs {
        let path = ctx.path(input);
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "plot".into());
        let target = out.join(format!("{stem}.svg"));
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.starts_with(crate::datasets::MAGIC) {
            let ds = Dataset::from_bytes(&bytes, &path)?;
            if ds.batch.grid().dims() == 1 {
                plot::plot_samples_1d(&ds.batch, 0, 8, &ds.header.kind, &target)?;
            } else {
                plot::plot_heatmaps(&ds.batch, 0, 9, &target)?;
            }
        } else {
            let value: serde_json::Value =
                serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
            if value.get("map").is_some() {
                let s: RegressionSummary =
                    serde_json::from_value(value).map_err(|e| Error::format(&path, e.to_string()))?;
                plot_summary(&s, &parent_dir(&path), &target)?;
            } else if value.get("scalars").is_some() {
                let r: MetricReport = serde_json::from_value(value).map_err(|e| Error::format(&path, e.to_string()))?;
                let ac: Vec<_> = r.autocovariance.iter().map(|c| ("samples", c)).collect();
                let hs: Vec<_> = r.histogram.iter().map(|h| ("samples", h)).collect();
                plot::plot_metric_curves(&ac, &hs, &target)?;
            } else {
                return Err(Error::format(&path, "unrecognised plot input"));
            }
        }
        written.push(target.display().to_string());
    }
    Ok(format!("wrote {}", written.join(", ")))
}

fn plot_summary(s: &RegressionSummary, dir: &Path, target: &Path) -> Result<()> {
    if s.resolution.len() != 1 {
        let grid = Grid::new(s.resolution.len(), &s.resolution)?;
        let n = grid.node_count();
        let values: Vec<f64> = s.mean[..n].iter().chain(&s.std[..n]).copied().collect();
        let b = crate::grid::FunctionBatch::new(grid, 1, 2, values)?;
        return plot::plot_heatmaps(&b, 0, 2, target);
    }
    let grid = Grid::line(s.resolution[0])?;
    let n = grid.node_count();
    let x = grid.axis_coordinates(0);
    let find = |q: f64| s.quantiles.iter().find(|(l, _)| (l - q).abs() < 1e-9).map(|(_, v)| v[..n].to_vec());
    let (lower, upper) = match (find(0.025), find(0.975)) {
        (Some(l), Some(u)) => (l, u),
        _ => (
            s.mean[..n].iter().zip(&s.std).map(|(m, d)| m - 2.0 * d).collect(),
            s.mean[..n].iter().zip(&s.std).map(|(m, d)| m + 2.0 * d).collect(),
        ),
    };
    let obs = Observations::load(&dir.join("observations.json")).ok();
    let truth = Dataset::load(&dir.join("truth.ufds")).ok().map(|d| d.batch.sample_values(0)[..n].to_vec());
    let reference = match (&s.oracle_mean, &s.oracle_std) {
        (Some(m), Some(sd)) => Some((
            m.clone(),
            m.iter().zip(sd).map(|(a, b)| a - 1.96 * b).collect::<Vec<_>>(),
            m.iter().zip(sd).map(|(a, b)| a + 1.96 * b).collect::<Vec<_>>(),
        )),
        _ => None,
    };
    plot::plot_band(
        &plot::BandPlot {
            x: &x,
            mean: &s.mean[..n],
            lower: &lower,
            upper: &upper,
            truth: truth.as_deref(),
            reference: reference.as_ref().map(|(m, l, u)| (m.as_slice(), l.as_slice(), u.as_slice())),
            observations: obs.as_ref(),
            title: "posterior",
        },
        target,
    )
}

/// Run the tool on `args`; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let ctx = Ctx { root: cli.root.clone() };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Sample(a) => sample_cmd(&ctx, a),
        Command::Regress(a) => regress_cmd(&ctx, a),
        Command::Eval(a) => eval_cmd(&ctx, a),
        Command::Plot(a) => plot_cmd(&ctx, a),
    };
    match result {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
