//! Forecast evaluation and experiment harnesses.

pub mod bench;
pub mod metrics;

use diffmath::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{FrameMode, ModelConfig, SamplerConfig, TrainConfig};
use crate::decoder::{forecast, AgentForecast, ForecastSet, Mode};
use crate::error::{CoreError, Result};
use crate::geometry::Se2;
use crate::model::Model;
use crate::track::Scenario;
use crate::training::{train, TrainOptions};
pub use metrics::{metrics, MetricReport, Summary, MISS_THRESHOLD};

/// Forecasts every scenario and scores them with `K = sampler.k`.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    scenarios: &[Scenario],
    sampler: &SamplerConfig,
) -> Result<(ForecastSet, MetricReport)> {
    let mut all = Vec::new();
    for sc in scenarios {
        all.extend(forecast(model, sc, sampler, None)?);
    }
    let report = metrics(&all, scenarios, sampler.k)?;
    Ok((all, report))
}

/// Constant-velocity extrapolation of the current velocity, one mode with
/// probability 1.
pub fn constant_velocity(scenario: &Scenario) -> ForecastSet {
    let dt = scenario.domain.future_dt();
    let n = scenario.domain.future_len();
    scenario
        .agents
        .iter()
        .map(|a| {
            let p = a.current().c;
            let v = *a.velocities.last().expect("validated track");
            let waypoints: Vec<_> = (1..=n)
                .map(|k| {
                    let t = k as f64 * dt;
                    [p[0] + v[0] * t, p[1] + v[1] * t]
                })
                .collect();
            AgentForecast {
                scenario_id: scenario.id,
                agent_id: a.id,
                modes: vec![Mode {
                    probability: 1.0,
                    goal: *waypoints.last().unwrap(),
                    node: 0,
                    waypoints,
                }],
            }
        })
        .collect()
}

pub fn evaluate_constant_velocity(scenarios: &[Scenario]) -> Result<MetricReport> {
    let all: ForecastSet = scenarios.iter().flat_map(constant_velocity).collect();
    metrics(&all, scenarios, 1)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BucketResult {
    pub bucket: usize,
    pub lo_deg: f64,
    pub hi_deg: f64,
    pub brier_fde_k: f64,
    pub min_fde_k: f64,
    pub min_fde_1: f64,
    pub agents: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub buckets: Vec<BucketResult>,
    pub mean: f64,
    /// Population variance of the bucket BrierMinFDE values.
    pub variance: f64,
}

/// Rotation angle in radians of `scenario` for `bucket`, given `n_buckets`
/// equal sectors of the full turn.
fn bucket_angle(rng: &mut ChaCha8Rng, bucket: usize, n_buckets: usize) -> f64 {
    let width = 2.0 * std::f64::consts::PI / n_buckets as f64;
    bucket as f64 * width + rng.gen::<f64>() * width
}

/// Evaluates every scenario once per bucket, rotated about its bounding-box
/// center by an angle drawn uniformly from the bucket's sector.
pub fn viewpoint_sweep<T: Real>(
    model: &Model<T>,
    scenarios: &[Scenario],
    sampler: &SamplerConfig,
    n_buckets: usize,
    seed: u64,
) -> Result<SweepReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sweep_with(model, scenarios, sampler, n_buckets, |b, _| bucket_angle(&mut rng, b, n_buckets))
}

/// Sweep with explicit angles `angle(bucket, scenario index)`.
pub fn sweep_with<T: Real, F>(
    model: &Model<T>,
    scenarios: &[Scenario],
    sampler: &SamplerConfig,
    n_buckets: usize,
    mut angle: F,
) -> Result<SweepReport>
where
    F: FnMut(usize, usize) -> f64,
{
    if n_buckets == 0 {
        return Err(CoreError::Config("need at least one bucket".into()));
    }
    let width = 360.0 / n_buckets as f64;
    let mut buckets = Vec::with_capacity(n_buckets);
    for b in 0..n_buckets {
        let rotated: Vec<Scenario> = scenarios
            .iter()
            .enumerate()
            .map(|(i, sc)| sc.transformed(&Se2::rotation_about(angle(b, i), sc.bbox_center())))
            .collect();
        let (_, report) = evaluate(model, &rotated, sampler)?;
        let a = &report.aggregate;
        buckets.push(BucketResult {
            bucket: b,
            lo_deg: b as f64 * width,
            hi_deg: (b + 1) as f64 * width,
            brier_fde_k: a.brier_fde_k,
            min_fde_k: a.min_fde_k,
            min_fde_1: a.min_fde_1,
            agents: a.agents,
        });
    }
    let n = n_buckets as f64;
    let mean = buckets.iter().map(|b| b.brier_fde_k).sum::<f64>() / n;
    let variance = buckets.iter().map(|b| (b.brier_fde_k - mean).powi(2)).sum::<f64>() / n;
    Ok(SweepReport {
        buckets,
        mean,
        variance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EfficiencyRow {
    pub fraction: f64,
    pub train_scenarios: usize,
    pub variant: String,
    pub brier_fde_k: f64,
    pub min_fde_k: f64,
    pub min_fde_1: f64,
    pub mr_k: f64,
}

/// Number of training scenarios used for `fraction` of `total`.
pub fn fraction_size(total: usize, fraction: f64) -> usize {
    ((total as f64 * fraction).round() as usize).clamp(1, total)
}

/// Trains from scratch on the leading fraction of `train_set` for each
/// fraction and frame variant, and scores the holdout set.
pub fn sample_efficiency(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    sampler: &SamplerConfig,
    train_set: &[Scenario],
    holdout: &[Scenario],
    fractions: &[f64],
    variants: &[FrameMode],
) -> Result<Vec<EfficiencyRow>> {
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(CoreError::Config("fractions must lie in (0, 1]".into()));
    }
    let mut rows = Vec::new();
    for &fraction in fractions {
        let n = fraction_size(train_set.len(), fraction);
        for &frame in variants {
            let cfg = ModelConfig {
                frame,
                ..model_cfg.clone()
            };
            let mut model = Model::<f32>::new(&cfg, train_cfg.seed)?;
            let opts = TrainOptions {
                sampler: sampler.clone(),
                ..TrainOptions::default()
            };
            train(&mut model, &train_set[..n], &[], train_cfg, &opts)?;
            let (_, report) = evaluate(&model, holdout, sampler)?;
            let a = &report.aggregate;
            rows.push(EfficiencyRow {
                fraction,
                train_scenarios: n,
                variant: match frame {
                    FrameMode::Relative => "relative".into(),
                    FrameMode::Global => "global".into(),
                },
                brier_fde_k: a.brier_fde_k,
                min_fde_k: a.min_fde_k,
                min_fde_1: a.min_fde_1,
                mr_k: a.mr_k,
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<S: Serialize>(path: &std::path::Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Bucket index of a rotation angle.
pub fn bucket_of(angle: f64, n_buckets: usize) -> usize {
    let a = angle.rem_euclid(2.0 * std::f64::consts::PI);
    ((a / (2.0 * std::f64::consts::PI) * n_buckets as f64).floor() as usize).min(n_buckets - 1)
}

/// Default bucket count: sectors of 45 degrees.
pub const DEFAULT_BUCKETS: usize = 8;
