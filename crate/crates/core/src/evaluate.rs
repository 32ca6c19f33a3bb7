//! Evaluation runs: predict every instance under each output scheme and
//! aggregate the forecast metrics into a report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::checkpoint::Checkpoint;
use crate::data::raster::MapRaster;
use crate::error::{Error, Result};
use crate::metrics::{
    best_of_n, displacement_errors, kde_nll, step_errors, violation_rate, KdeConfig, ViolationConfig,
};
use crate::model::{predict, Model, OutputScheme};
use crate::scene::{all_instances, AgentId, PredictionInstance, Scene, SliceOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub schemes: Vec<OutputScheme>,
    /// Samples per instance for `Full` and `ZMode`.
    pub samples: usize,
    /// `N` of the best-of-N metric; skipped when above `samples`.
    pub best_of: usize,
    /// Prediction steps at which FDE is also reported.
    pub horizons: Vec<usize>,
    pub seed: u64,
    pub kde: KdeConfig,
    pub violation: ViolationConfig,
    pub per_instance: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            schemes: OutputScheme::ALL.to_vec(),
            samples: 2000,
            best_of: 20,
            horizons: Vec::new(),
            seed: 0,
            kde: KdeConfig::default(),
            violation: ViolationConfig::default(),
            per_instance: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() {
            return Err(Error::InvalidInput("at least one output scheme is required".into()));
        }
        let sampled = self.schemes.iter().any(|s| *s != OutputScheme::Mm);
        if sampled && self.samples == 0 {
            return Err(Error::InvalidInput("samples must be at least 1".into()));
        }
        if self.horizons.contains(&0) {
            return Err(Error::InvalidInput("horizons count prediction steps from 1".into()));
        }
        Ok(())
    }
}

/// Metrics of one instance under one scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub node: AgentId,
    pub t: usize,
    /// Mean over returned trajectories.
    pub ade: f64,
    pub fde: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kde_nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_ade: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_fde: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violation_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeReport {
    pub scheme: OutputScheme,
    pub instances: usize,
    /// Trajectories per instance.
    pub samples: usize,
    pub ade: f64,
    pub fde: f64,
    /// `(step, mean displacement at that step)`.
    pub fde_by_horizon: Vec<(usize, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kde_nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_of_n: Option<BestOfN>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violation_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_instance: Vec<InstanceMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestOfN {
    pub n: usize,
    pub ade: f64,
    pub fde: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schemes: Vec<SchemeReport>,
}

impl MetricsReport {
    pub fn scheme(&self, s: OutputScheme) -> Option<&SchemeReport> {
        self.schemes.iter().find(|r| r.scheme == s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table, one row per scheme.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<6} {:>6} {:>7} {:>8} {:>8} {:>9} {:>10} {:>10} {:>9}",
            "scheme", "n", "samples", "ADE", "FDE", "KDE-NLL", "minADE", "minFDE", "viol"
        );
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        for r in &self.schemes {
            let _ = writeln!(
                out,
                "{:<6} {:>6} {:>7} {:>8.4} {:>8.4} {:>9} {:>10} {:>10} {:>9}",
                r.scheme.to_string(),
                r.instances,
                r.samples,
                r.ade,
                r.fde,
                opt(r.kde_nll),
                opt(r.best_of_n.map(|b| b.ade)),
                opt(r.best_of_n.map(|b| b.fde)),
                opt(r.violation_rate),
            );
            for (h, v) in &r.fde_by_horizon {
                let _ = writeln!(out, "{:<6}   FDE@{h}: {v:.4}", "");
            }
        }
        out
    }
}

/// An instance paired with the scene map used for violation counting.
#[derive(Debug, Clone, Copy)]
pub struct EvalItem<'a> {
    pub instance: &'a PredictionInstance,
    pub map: Option<&'a MapRaster>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Evaluates instances that carry a ground-truth future; others are skipped.
pub fn evaluate_instances(model: &Model, items: &[EvalItem<'_>], cfg: &EvalConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let items: Vec<&EvalItem<'_>> = items.iter().filter(|i| i.instance.gt_future.is_some()).collect();
    let mut schemes = Vec::with_capacity(cfg.schemes.len());
    for &scheme in &cfg.schemes {
        let mut rows = Vec::with_capacity(items.len());
        let mut horizon_sums = vec![(0.0, 0usize); cfg.horizons.len()];
        let mut samples = 0;
        for (k, item) in items.iter().enumerate() {
            let inst = item.instance;
            let gt = inst.gt_future.as_ref().expect("filtered");
            let seed = cfg.seed.wrapping_add(k as u64);
            let out = predict(model, inst, scheme, cfg.samples, seed)?;
            samples = out.trajectories.len();
            let errs = out
                .trajectories
                .iter()
                .map(|tr| displacement_errors(tr, gt))
                .collect::<Result<Vec<_>>>()?;
            for (slot, &h) in horizon_sums.iter_mut().zip(&cfg.horizons) {
                if h <= gt.len() {
                    for tr in &out.trajectories {
                        slot.0 += step_errors(tr, gt)?[h - 1];
                        slot.1 += 1;
                    }
                }
            }
            let sampled = scheme != OutputScheme::Mm;
            let kde = if sampled && out.trajectories.len() >= 2 {
                Some(kde_nll(&out.trajectories, gt, &cfg.kde)?)
            } else {
                None
            };
            let best = if sampled && cfg.best_of >= 1 && out.trajectories.len() >= cfg.best_of {
                Some(best_of_n(&out.trajectories, gt, cfg.best_of)?)
            } else {
                None
            };
            let viol = match item.map {
                Some(map) => {
                    // include the segment leaving the current position
                    let p0 = inst.current().pos;
                    let paths: Vec<Vec<[f64; 2]>> = out
                        .trajectories
                        .iter()
                        .map(|tr| std::iter::once(p0).chain(tr.iter().copied()).collect())
                        .collect();
                    Some(violation_rate(&paths, map, &cfg.violation)?)
                }
                None => None,
            };
            rows.push(InstanceMetrics {
                node: inst.node.clone(),
                t: inst.t,
                ade: mean(errs.iter().map(|e| e.0)),
                fde: mean(errs.iter().map(|e| e.1)),
                kde_nll: kde,
                min_ade: best.map(|b| b.0),
                min_fde: best.map(|b| b.1),
                violation_rate: viol,
            });
        }
        let opt_mean = |f: &dyn Fn(&InstanceMetrics) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = rows.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| mean(vals.into_iter()))
        };
        let best_of_n = match (opt_mean(&|r| r.min_ade), opt_mean(&|r| r.min_fde)) {
            (Some(ade), Some(fde)) => Some(BestOfN {
                n: cfg.best_of,
                ade,
                fde,
            }),
            _ => None,
        };
        schemes.push(SchemeReport {
            scheme,
            instances: rows.len(),
            samples,
            ade: if rows.is_empty() {
                0.0
            } else {
                mean(rows.iter().map(|r| r.ade))
            },
            fde: if rows.is_empty() {
                0.0
            } else {
                mean(rows.iter().map(|r| r.fde))
            },
            fde_by_horizon: cfg
                .horizons
                .iter()
                .zip(&horizon_sums)
                .filter(|(_, s)| s.1 > 0)
                .map(|(&h, s)| (h, s.0 / s.1 as f64))
                .collect(),
            kde_nll: opt_mean(&|r| r.kde_nll),
            best_of_n,
            violation_rate: opt_mean(&|r| r.violation_rate),
            per_instance: if cfg.per_instance { rows } else { Vec::new() },
        });
    }
    Ok(MetricsReport { schemes })
}

/// Loads `ckpt`, slices every scene with the checkpoint's class table and
/// evaluates. `expected` guards against evaluating the wrong architecture.
pub fn evaluate_run(
    ckpt: &Checkpoint,
    scenes: &[Scene],
    cfg: &EvalConfig,
    expected: Option<&ModelConfig>,
) -> Result<MetricsReport> {
    if let Some(e) = expected {
        ckpt.check_config(e)?;
    }
    let model = Model::from_checkpoint(ckpt)?;
    let mut opts = SliceOptions::new(model.config.classes.clone());
    opts.min_history = model.config.min_history;
    opts.require_gt = true;
    if model.config.use_map {
        opts.map = Some(model.config.map.crop);
    }
    let mut owned = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        for inst in all_instances(scene, &opts)? {
            if model.nodes.contains_key(&inst.class) && (!model.config.use_robot || inst.ego_future.is_some()) {
                owned.push((si, inst));
            }
        }
    }
    let items: Vec<EvalItem<'_>> = owned
        .iter()
        .map(|(si, inst)| EvalItem {
            instance: inst,
            map: scenes[*si].map.as_ref(),
        })
        .collect();
    evaluate_instances(&model, &items, cfg)
}
