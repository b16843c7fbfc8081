//! The masking-strategy ablation grid and multi-seed statistics runs.

use rayon::prelude::*;
use serde::Serialize;

use super::dataset::load_dataset;
use super::pretrain::pretrain;
use super::probe::linear_probe;
use super::{Stage, TrainConfig, TrainError};
use crate::masking::{SpatialMode, TemporalMode};
use crate::util::thread_cap;
use crate::Real;

/// One grid cell result.
#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub spatial: SpatialMode,
    pub temporal: TemporalMode,
    pub seed: u64,
    pub probe_acc: Real,
}

pub const SPATIAL_MODES: [SpatialMode; 3] = [
    SpatialMode::HighDegree,
    SpatialMode::LowDegree,
    SpatialMode::Uniform,
];
pub const TEMPORAL_MODES: [TemporalMode; 3] = [
    TemporalMode::HighMotion,
    TemporalMode::LowMotion,
    TemporalMode::Random,
];

pub fn mode_label(s: SpatialMode) -> &'static str {
    match s {
        SpatialMode::HighDegree => "hdsm",
        SpatialMode::LowDegree => "ldsm",
        SpatialMode::Uniform => "random",
    }
}

pub fn temporal_label(t: TemporalMode) -> &'static str {
    match t {
        TemporalMode::HighMotion => "hmtm",
        TemporalMode::LowMotion => "lmtm",
        TemporalMode::Random => "random",
    }
}

/// Pretrain + probe with one masking combination applied to both encoders.
pub fn run_cell(
    base: &TrainConfig,
    spatial: SpatialMode,
    temporal: TemporalMode,
    seed: u64,
) -> Result<AblationCell, TrainError> {
    let mut cfg = base.clone();
    cfg.exp.seed = seed;
    cfg.exp.masking.theta_spatial = spatial;
    cfg.exp.masking.phi_spatial = spatial;
    cfg.exp.masking.theta_temporal = temporal;
    cfg.exp.masking.phi_temporal = temporal;
    let ds = load_dataset(&cfg)?;
    let pre_cfg = cfg.exp.resolve(Stage::Pretrain);
    let mut outcome = pretrain(&pre_cfg, &ds, None, false)?;
    let probe_cfg = cfg.exp.resolve(Stage::Probe);
    let probe = linear_probe(&probe_cfg, &ds, &mut outcome.models, None)?;
    Ok(AblationCell {
        spatial,
        temporal,
        seed,
        probe_acc: probe.eval_acc,
    })
}

/// Run the full 3x3 masking grid for every seed. Cells run in parallel
/// (bounded by `ASMA_THREADS`); the output order is fixed regardless of
/// scheduling.
pub fn ablation_grid(base: &TrainConfig, seeds: &[u64]) -> Result<Vec<AblationCell>, TrainError> {
    let mut jobs = Vec::new();
    for spatial in SPATIAL_MODES {
        for temporal in TEMPORAL_MODES {
            for &seed in seeds {
                jobs.push((spatial, temporal, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap())
        .build()
        .expect("thread pool");
    let results: Vec<Result<AblationCell, TrainError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(s, t, seed)| run_cell(base, s, t, seed))
            .collect()
    });
    results.into_iter().collect()
}

/// CSV rendering of the grid with the documented header.
pub fn grid_to_csv(cells: &[AblationCell]) -> String {
    let mut out = String::from("spatial,temporal,seed,probe_acc\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{}\n",
            mode_label(c.spatial),
            temporal_label(c.temporal),
            c.seed,
            c.probe_acc
        ));
    }
    out
}

/// Mean / sample std / min / max of one metric across seeds.
#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub metric: String,
    pub mean: Real,
    pub std: Real,
    pub min: Real,
    pub max: Real,
    pub values: Vec<Real>,
}

impl SeedSummary {
    pub fn from_values(metric: &str, values: Vec<Real>) -> Self {
        let n = values.len() as Real;
        let mean = values.iter().sum::<Real>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let min = values.iter().copied().fold(Real::INFINITY, Real::min);
        let max = values.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        Self {
            metric: metric.to_string(),
            mean,
            std,
            min,
            max,
            values,
        }
    }
}

/// Run a stage once per seed and summarize the final metrics. Pretrain
/// reports the final loss; probe (and later stages) report held-out
/// accuracy after the stage chain up to them.
pub fn multi_seed(
    base: &TrainConfig,
    stage: Stage,
    seeds: &[u64],
) -> Result<Vec<SeedSummary>, TrainError> {
    if seeds.len() < 2 {
        return Err(TrainError::InvalidConfig("need at least 2 seeds".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap())
        .build()
        .expect("thread pool");
    let runs: Vec<Result<Vec<(String, Real)>, TrainError>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let mut cfg = base.clone();
                cfg.exp.seed = seed;
                let ds = load_dataset(&cfg)?;
                let mut outcome = pretrain(&cfg.exp.resolve(Stage::Pretrain), &ds, None, false)?;
                let mut metrics: Vec<(String, Real)> = vec![(
                    "pretrain_loss".to_string(),
                    *outcome.epoch_losses.last().unwrap(),
                )];
                if stage != Stage::Pretrain {
                    let probe =
                        linear_probe(&cfg.exp.resolve(Stage::Probe), &ds, &mut outcome.models, None)?;
                    metrics.push(("probe_acc".to_string(), probe.eval_acc));
                }
                if stage == Stage::Finetune {
                    let ft = super::finetune::finetune(
                        &cfg.exp.resolve(Stage::Finetune),
                        &ds,
                        &mut outcome.models,
                        None,
                    )?;
                    metrics.push(("finetune_acc".to_string(), ft.fused_acc));
                }
                Ok(metrics)
            })
            .collect()
    });
    let runs: Vec<Vec<(String, Real)>> = runs.into_iter().collect::<Result<_, _>>()?;
    let mut summaries = Vec::new();
    for (name, _) in &runs[0] {
        let values: Vec<Real> = runs
            .iter()
            .map(|r| {
                r.iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, v)| *v)
                    .expect("metric present in every run")
            })
            .collect();
        summaries.push(SeedSummary::from_values(name, values));
    }
    Ok(summaries)
}

pub fn seeds_to_csv(summaries: &[SeedSummary]) -> String {
    let mut out = String::from("metric,mean,std,min,max\n");
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.metric, s.mean, s.std, s.min, s.max
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics_are_correct() {
        let s = SeedSummary::from_values("acc", vec![0.8, 0.9, 1.0]);
        assert!((s.mean - 0.9).abs() < 1e-12);
        assert!((s.std - 0.1).abs() < 1e-12);
        assert_eq!(s.min, 0.8);
        assert_eq!(s.max, 1.0);

        let same = SeedSummary::from_values("acc", vec![0.5, 0.5]);
        assert_eq!(same.std, 0.0);
    }

    #[test]
    fn csv_headers_match_contract() {
        let cells = vec![AblationCell {
            spatial: SpatialMode::LowDegree,
            temporal: TemporalMode::HighMotion,
            seed: 3,
            probe_acc: 0.875,
        }];
        let csv = grid_to_csv(&cells);
        assert!(csv.starts_with("spatial,temporal,seed,probe_acc\n"));
        assert!(csv.contains("ldsm,hmtm,3,0.875"));
    }
}
