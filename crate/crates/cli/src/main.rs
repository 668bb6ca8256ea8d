use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use diffmath::Real;
use serde::Serialize;

use relcast::cache::load_or_compute;
use relcast::config::{Domain, FrameMode, RunConfig};
use relcast::decoder::{forecast, forecast_prepared, write_forecasts, ForecastSet};
use relcast::encoders::SceneInputs;
use relcast::evaluation::bench::{runtime_bench, BenchConfig};
use relcast::evaluation::{
    evaluate, evaluate_constant_velocity, sample_efficiency, viewpoint_sweep, write_csv, MetricReport,
    DEFAULT_BUCKETS,
};
use relcast::model::Model;
use relcast::scenarios::io::{load_scenarios, save_scenarios};
use relcast::scenarios::{generate_dataset, BehaviorMix, Template};
use relcast::track::Scenario;
use relcast::training::{train, TrainOptions};

#[derive(Parser)]
#[command(name = "relcast", version, about = "Multi-agent motion forecasting on lane graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Clone)]
struct Common {
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML run configuration with [model], [sampler] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display())),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Urban,
    Highway,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Urban => Domain::Urban,
            DomainArg::Highway => Domain::Highway,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario dataset (JSON lines).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Comma-separated template names, or "all".
        #[arg(long, default_value = "all")]
        template: String,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Agents per scenario: "N" or "MIN-MAX".
        #[arg(long, default_value = "2-6")]
        agents: String,
        /// Overrides the domain of the configuration.
        #[arg(long)]
        domain: Option<DomainArg>,
    },
    /// Train a model; writes model.ckpt, history.csv and per-epoch checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Scenarios evaluated during training.
        #[arg(long)]
        holdout: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
    },
    /// Score a model (or the constant-velocity baseline) on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint; omit together with --baseline.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Score the constant-velocity baseline instead of a model.
        #[arg(long)]
        baseline: bool,
    },
    /// Write multi-modal forecasts for every agent (JSON lines).
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Map-embedding cache directory; created and filled as needed.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Precompute map embeddings for every distinct map in a dataset.
    CacheMap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Time shared against per-agent scene encoding (CSV).
    BenchRuntime {
        #[command(flatten)]
        common: Common,
        /// Benchmark these weights instead of a fresh model.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Evaluate under rotations grouped into angle buckets (CSV).
    SweepViewpoint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BUCKETS)]
        buckets: usize,
    },
    /// Train on growing fractions of a dataset and score a holdout set (CSV).
    SampleEfficiency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        holdout: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,1.0")]
        fractions: Vec<f64>,
        /// Also train the global-frame ablation.
        #[arg(long)]
        with_global: bool,
    },
}

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

fn load_model(path: &Path) -> Result<AnyModel> {
    match Model::<f64>::load(path) {
        Ok(m) => Ok(AnyModel::F64(m)),
        Err(_) => Model::<f32>::load(path)
            .map(AnyModel::F32)
            .with_context(|| format!("loading checkpoint {}", path.display())),
    }
}

macro_rules! with_model {
    ($m:expr, $model:ident => $body:expr) => {
        match $m {
            AnyModel::F32($model) => $body,
            AnyModel::F64($model) => $body,
        }
    };
}

fn load_data(path: &Path) -> Result<Vec<Scenario>> {
    let data = load_scenarios(path).with_context(|| format!("reading {}", path.display()))?;
    if data.is_empty() {
        bail!("{} contains no scenarios", path.display());
    }
    Ok(data)
}

fn check_domain(model_domain: Domain, data: &[Scenario]) -> Result<()> {
    if let Some(sc) = data.iter().find(|s| s.domain != model_domain) {
        bail!("scenario {} is {:?} but the model is {:?}", sc.id, sc.domain, model_domain);
    }
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn parse_agents(s: &str) -> Result<(usize, usize)> {
    let (lo, hi) = match s.split_once('-') {
        Some((a, b)) => (a.trim().parse()?, b.trim().parse()?),
        None => {
            let n = s.trim().parse()?;
            (n, n)
        }
    };
    if lo == 0 || lo > hi {
        bail!("invalid agent range {s:?}");
    }
    Ok((lo, hi))
}

fn parse_templates(s: &str, domain: Domain) -> Result<Vec<Template>> {
    if s == "all" {
        return Ok(Template::for_domain(domain));
    }
    let out = s
        .split(',')
        .map(|t| Template::parse(t.trim()))
        .collect::<relcast::Result<Vec<_>>>()?;
    if let Some(t) = out.iter().find(|t| !t.supports(domain)) {
        bail!("template {} is not available in the {domain:?} domain", t.name());
    }
    Ok(out)
}

fn gen_data(common: &Common, template: &str, count: usize, agents: &str, domain: Option<DomainArg>) -> Result<()> {
    let cfg = common.run_config()?;
    let domain = domain.map(Domain::from).unwrap_or(cfg.model.domain);
    let templates = parse_templates(template, domain)?;
    let data = generate_dataset(
        &templates,
        domain,
        count,
        parse_agents(agents)?,
        &BehaviorMix::for_domain(domain),
        common.seed,
    )?;
    save_scenarios(&common.out, &data)?;
    log::info!("wrote {} scenarios to {}", data.len(), common.out.display());
    Ok(())
}

fn run_train<T: Real>(
    cfg: &RunConfig,
    data: &[Scenario],
    holdout: &[Scenario],
    out: &Path,
) -> Result<()> {
    let mut model = Model::<T>::new(&cfg.model, cfg.train.seed)?;
    let opts = TrainOptions {
        sampler: cfg.sampler.clone(),
        checkpoint_dir: Some(out.join("checkpoints")),
        history_csv: Some(out.join("history.csv")),
    };
    let history = train(&mut model, data, holdout, &cfg.train, &opts)?;
    model.save(&out.join("model.ckpt"), false)?;
    if let Some(last) = history.last() {
        log::info!("final epoch {}: loss {:.4}", last.epoch, last.loss);
    }
    Ok(())
}

fn cmd_train(common: &Common, data: &Path, holdout: Option<&Path>, epochs: Option<usize>, precision: Precision) -> Result<()> {
    let mut cfg = common.run_config()?;
    cfg.train.seed = common.seed;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let data = load_data(data)?;
    check_domain(cfg.model.domain, &data)?;
    let holdout = match holdout {
        Some(p) => load_data(p)?,
        None => Vec::new(),
    };
    check_domain(cfg.model.domain, &holdout)?;
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join("config.toml"), cfg.to_toml_string()?)?;
    match precision {
        Precision::F32 => run_train::<f32>(&cfg, &data, &holdout, &common.out),
        Precision::F64 => run_train::<f64>(&cfg, &data, &holdout, &common.out),
    }
}

fn write_report(out: &Path, report: &MetricReport) -> Result<()> {
    fs::create_dir_all(out)?;
    #[derive(Serialize)]
    struct Json<'a> {
        k: usize,
        aggregate: &'a relcast::evaluation::Summary,
        scenarios: &'a BTreeMap<u64, relcast::evaluation::Summary>,
    }
    write_json(
        &out.join("metrics.json"),
        &Json {
            k: report.k,
            aggregate: &report.aggregate,
            scenarios: &report.scenarios,
        },
    )?;
    write_csv(&out.join("agents.csv"), &report.agents)?;
    Ok(())
}

fn cmd_eval(common: &Common, data: &Path, model: Option<&Path>, baseline: bool) -> Result<()> {
    let cfg = common.run_config()?;
    let data = load_data(data)?;
    let report = match (model, baseline) {
        (None, true) => evaluate_constant_velocity(&data)?,
        (Some(p), false) => {
            let m = load_model(p)?;
            with_model!(&m, model => {
                check_domain(model.cfg().domain, &data)?;
                evaluate(model, &data, &cfg.sampler)?.1
            })
        }
        _ => bail!("give exactly one of --model and --baseline"),
    };
    write_report(&common.out, &report)?;
    let a = &report.aggregate;
    println!(
        "agents {} minADE@{k} {:.3} minFDE@{k} {:.3} brierMinFDE@{k} {:.3} MR@{k} {:.3} minFDE@1 {:.3}",
        a.agents,
        a.min_ade_k,
        a.min_fde_k,
        a.brier_fde_k,
        a.mr_k,
        a.min_fde_1,
        k = report.k
    );
    Ok(())
}

fn cache_path(dir: &Path, si: &SceneInputs) -> PathBuf {
    dir.join(format!("{}.rcmc", hex::encode(si.lane.graph.content_hash())))
}

fn predict_all<T: Real>(
    model: &Model<T>,
    data: &[Scenario],
    sampler: &relcast::config::SamplerConfig,
    cache: Option<&Path>,
) -> Result<ForecastSet> {
    let mut out = Vec::new();
    for sc in data {
        match cache {
            None => out.extend(forecast(model, sc, sampler, None)?),
            Some(dir) => {
                let si = SceneInputs::from_scenario(&model.net, sc)?;
                let (emb, _) = load_or_compute(&cache_path(dir, &si), model, &si.lane)?;
                let ids: Vec<u32> = sc.agents.iter().map(|a| a.id).collect();
                out.extend(forecast_prepared(model, &si, &ids, sc.id, sampler, Some(&emb))?);
            }
        }
    }
    Ok(out)
}

fn cmd_predict(common: &Common, data: &Path, model: &Path, cache: Option<&Path>) -> Result<()> {
    let cfg = common.run_config()?;
    let data = load_data(data)?;
    if let Some(dir) = cache {
        fs::create_dir_all(dir)?;
    }
    let m = load_model(model)?;
    let forecasts = with_model!(&m, model => {
        check_domain(model.cfg().domain, &data)?;
        predict_all(model, &data, &cfg.sampler, cache)?
    });
    let mut w = BufWriter::new(File::create(&common.out).with_context(|| format!("creating {}", common.out.display()))?);
    write_forecasts(&mut w, &forecasts)?;
    w.flush()?;
    log::info!("wrote {} forecasts", forecasts.len());
    Ok(())
}

#[derive(Serialize)]
struct CacheRow {
    scenario_id: u64,
    file: String,
    reused: bool,
}

fn fill_cache<T: Real>(model: &Model<T>, data: &[Scenario], dir: &Path) -> Result<Vec<CacheRow>> {
    let mut rows = Vec::new();
    for sc in data {
        let si = SceneInputs::from_scenario(&model.net, sc)?;
        let path = cache_path(dir, &si);
        let (_, reused) = load_or_compute(&path, model, &si.lane)?;
        rows.push(CacheRow {
            scenario_id: sc.id,
            file: path.file_name().unwrap().to_string_lossy().into_owned(),
            reused,
        });
    }
    Ok(rows)
}

fn cmd_cache_map(common: &Common, data: &Path, model: &Path) -> Result<()> {
    let data = load_data(data)?;
    fs::create_dir_all(&common.out)?;
    let m = load_model(model)?;
    let rows = with_model!(&m, model => {
        check_domain(model.cfg().domain, &data)?;
        fill_cache(model, &data, &common.out)?
    });
    write_csv(&common.out.join("index.csv"), &rows)?;
    let fresh = rows.iter().filter(|r| !r.reused).count();
    println!("{} scenarios, {fresh} embeddings computed", rows.len());
    Ok(())
}

fn cmd_bench(common: &Common, model: Option<&Path>, trials: usize) -> Result<()> {
    let cfg = common.run_config()?;
    let bench = BenchConfig {
        trials: trials.max(1),
        ..BenchConfig::default()
    };
    let m = match model {
        Some(p) => load_model(p)?,
        None => {
            let mut mc = cfg.model.clone();
            mc.domain = Domain::Highway;
            AnyModel::F32(Model::new(&mc, common.seed)?)
        }
    };
    let rows = with_model!(&m, model => {
        if model.cfg().domain != Domain::Highway {
            bail!("the runtime benchmark uses highway-domain models");
        }
        let tol = if matches!(m, AnyModel::F64(_)) { 1e-9 } else { 1e-3 };
        runtime_bench(model, &bench, &cfg.sampler, tol)?
    });
    write_csv(&common.out, &rows)?;
    for r in &rows {
        println!(
            "{:<6} {:?} agents {:>3} nodes {:>4}: {:>9.3} ms ({:.2}x)",
            r.sweep, r.mode, r.agents, r.nodes, r.median_ms, r.relative
        );
    }
    Ok(())
}

fn cmd_sweep(common: &Common, data: &Path, model: &Path, buckets: usize) -> Result<()> {
    let cfg = common.run_config()?;
    let data = load_data(data)?;
    let m = load_model(model)?;
    let report = with_model!(&m, model => {
        check_domain(model.cfg().domain, &data)?;
        viewpoint_sweep(model, &data, &cfg.sampler, buckets, common.seed)?
    });
    write_csv(&common.out, &report.buckets)?;
    for b in &report.buckets {
        println!("[{:>5.1}, {:>5.1}) brierMinFDE {:.6}", b.lo_deg, b.hi_deg, b.brier_fde_k);
    }
    println!("mean {:.6} variance {:.3e}", report.mean, report.variance);
    Ok(())
}

fn cmd_efficiency(common: &Common, data: &Path, holdout: &Path, fractions: &[f64], with_global: bool) -> Result<()> {
    let mut cfg = common.run_config()?;
    cfg.train.seed = common.seed;
    let data = load_data(data)?;
    let holdout = load_data(holdout)?;
    check_domain(cfg.model.domain, &data)?;
    check_domain(cfg.model.domain, &holdout)?;
    let variants: &[FrameMode] = if with_global {
        &[FrameMode::Relative, FrameMode::Global]
    } else {
        &[FrameMode::Relative]
    };
    let rows = sample_efficiency(&cfg.model, &cfg.train, &cfg.sampler, &data, &holdout, fractions, variants)?;
    write_csv(&common.out, &rows)?;
    for r in &rows {
        println!(
            "{:>5.2} ({:>4} scenarios) {:<8} brierMinFDE {:.3} minFDE@1 {:.3}",
            r.fraction, r.train_scenarios, r.variant, r.brier_fde_k, r.min_fde_1
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData {
            common,
            template,
            count,
            agents,
            domain,
        } => gen_data(common, template, *count, agents, *domain),
        Command::Train {
            common,
            data,
            holdout,
            epochs,
            precision,
        } => cmd_train(common, data, holdout.as_deref(), *epochs, *precision),
        Command::Eval {
            common,
            data,
            model,
            baseline,
        } => cmd_eval(common, data, model.as_deref(), *baseline),
        Command::Predict {
            common,
            data,
            model,
            cache,
        } => cmd_predict(common, data, model, cache.as_deref()),
        Command::CacheMap { common, data, model } => cmd_cache_map(common, data, model),
        Command::BenchRuntime { common, model, trials } => cmd_bench(common, model.as_deref(), *trials),
        Command::SweepViewpoint {
            common,
            data,
            model,
            buckets,
        } => cmd_sweep(common, data, model, *buckets),
        Command::SampleEfficiency {
            common,
            data,
            holdout,
            fractions,
            with_global,
        } => cmd_efficiency(common, data, holdout, fractions, *with_global),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
