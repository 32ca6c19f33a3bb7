//! Training objective and loops: the information-regularized ELBO with an
//! annealed KL weight, map-CNN pre-training, and the seeded training loop.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::standardize::{StandardizationStats, StandardizedInstance};
use crate::decoder::{mixture_log_prob_tape, Feedback};
use crate::encoder::{EncoderInputs, MapEncoder};
use crate::error::{Error, Result};
use crate::latent::{kl_tape, mutual_information_tape, one_hot};
use crate::model::{sample_rng, Model};
use crate::nn::{
    optimizer_step, Activation, AdamConfig, AdamState, Dense, Matrix, ParamBuilder, ParamStore, StepOutcome, Tape, Var,
};
use crate::scene::{AgentClass, EdgeType, PredictionInstance};

/// Objective terms for one batch, in nats. `total` is maximized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub mutual_information: f64,
    pub beta: f64,
    pub alpha: f64,
}

/// Sigmoid annealing of the KL weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaSchedule {
    pub min: f64,
    pub max: f64,
    pub midpoint: f64,
    pub rate: f64,
}

impl BetaSchedule {
    /// Midpoint at 40% of training; 10% to 90% of the rise spans half of it.
    pub fn for_run(iterations: usize, use_map: bool) -> Self {
        let n = iterations.max(1) as f64;
        Self {
            min: 0.05,
            max: if use_map { 5.0 } else { 1.0 },
            midpoint: 0.4 * n,
            // σ(x) goes 0.1 → 0.9 over Δx = 2 ln 9
            rate: 4.0 * 9f64.ln() / n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min >= 0.0 && self.min <= self.max) {
            return Err(Error::InvalidInput(format!(
                "beta schedule needs 0 <= min <= max, got {} and {}",
                self.min, self.max
            )));
        }
        if !(self.rate >= 0.0 && self.rate.is_finite() && self.midpoint.is_finite()) {
            return Err(Error::InvalidInput("beta rate must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

pub fn beta_schedule(iteration: usize, s: &BetaSchedule) -> f64 {
    let x = s.rate * (iteration as f64 - s.midpoint);
    s.min + (s.max - s.min) * crate::nn::sigmoid(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// `None` derives the schedule from `iterations` and map use.
    pub beta: Option<BetaSchedule>,
    pub alpha: f64,
    pub teacher_forcing: bool,
    pub seed: u64,
    /// Map-CNN pre-training steps; 0 skips the phase.
    pub pretrain_iterations: usize,
    /// Intermediate checkpoint interval; `None` writes only the final one.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 4000,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            beta: None,
            alpha: 1.0,
            teacher_forcing: true,
            seed: 0,
            pretrain_iterations: 500,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput(
                "iterations and batch_size must be at least 1".into(),
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidInput(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning rate must be positive".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::InvalidInput("checkpoint_every must be at least 1".into()));
        }
        if let Some(b) = &self.beta {
            b.validate()?;
        }
        Ok(())
    }

    pub fn schedule(&self, use_map: bool) -> BetaSchedule {
        self.beta
            .unwrap_or_else(|| BetaSchedule::for_run(self.iterations, use_map))
    }
}

/// Tape handles of the objective terms.
#[derive(Debug, Clone, Copy)]
pub struct ElboVars {
    /// Negated total, the quantity minimized.
    pub loss: Var,
    pub total: Var,
    pub reconstruction: Var,
    pub kl: Var,
    pub mutual_information: Var,
}

/// How reconstruction feeds velocities back during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainFeedback {
    Teacher,
    /// Sampled from the step mixture with per-row streams of this seed.
    Sampled(u64),
}

/// Objective for a same-class batch on `tape`, with the expectation over
/// `q` taken exactly by enumerating every latent value.
pub fn elbo_terms(
    model: &Model,
    tape: &mut Tape<'_>,
    class: AgentClass,
    batch: &[&StandardizedInstance],
    beta: f64,
    alpha: f64,
    feedback: TrainFeedback,
) -> Result<ElboVars> {
    let node = model.node(class)?;
    let b = batch.len();
    let zn = model.config.latent_size;
    let gts: Vec<&Vec<[f64; 2]>> = batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.gt_velocities
                .as_ref()
                .ok_or_else(|| Error::Missing(format!("ground-truth future of batch row {i}")))
        })
        .collect::<Result<_>>()?;
    let horizon = gts[0].len();
    if horizon == 0 || gts.iter().any(|g| g.len() != horizon) {
        return Err(Error::InvalidInput("batch rows need one common nonzero horizon".into()));
    }

    let (inputs, bb) = model.encode(tape, class, batch)?;
    let e_y = node.encoder.encode_node_future(tape, &inputs)?;
    let p_logits = node.prior.forward(tape, bb.e_x)?;
    let log_p = tape.log_softmax(p_logits);
    let xy = tape.concat_cols(&[bb.e_x, e_y])?;
    let q_logits = node.recognition.forward(tape, xy)?;
    let log_q = tape.log_softmax(q_logits);

    // row r = i·Z + z
    let rows = b * zn;
    let idx: Vec<usize> = (0..rows).map(|r| r / zn).collect();
    let zs: Vec<usize> = (0..rows).map(|r| r % zn).collect();
    let e_rep = tape.gather_rows(bb.e_x, &idx)?;
    let z = one_hot(&zs, zn);
    let start = Matrix::from_shape_fn((rows, 2), |(r, d)| batch[r / zn].current_velocity[d]);
    let targets: Vec<Matrix> = (0..horizon)
        .map(|t| Matrix::from_shape_fn((rows, 2), |(r, d)| gts[r / zn][t][d]))
        .collect();
    let scale = model.velocity_scale(class);
    let lp = match feedback {
        TrainFeedback::Teacher => node.decoder.sequence_log_prob::<ChaCha8Rng>(
            tape,
            e_rep,
            &z,
            &start,
            &targets,
            &scale,
            Feedback::Teacher,
        )?,
        TrainFeedback::Sampled(seed) => {
            let mut rngs: Vec<ChaCha8Rng> = (0..rows).map(|r| sample_rng(seed, r)).collect();
            node.decoder
                .sequence_log_prob(tape, e_rep, &z, &start, &targets, &scale, Feedback::Sampled(&mut rngs))?
        }
    };
    let lp = tape.reshape(lp, b, zn)?;
    let q = tape.exp(log_q);
    let weighted = tape.mul(q, lp)?;
    let per_row = tape.sum_cols(weighted);
    let reconstruction = tape.mean_all(per_row);
    let kl_rows = kl_tape(tape, log_q, log_p)?;
    let kl = tape.mean_all(kl_rows);
    let mutual_information = mutual_information_tape(tape, log_p)?;

    let bkl = tape.scale(kl, -beta);
    let ami = tape.scale(mutual_information, alpha);
    let total = tape.add(reconstruction, bkl)?;
    let total = tape.add(total, ami)?;
    let loss = tape.scale(total, -1.0);
    Ok(ElboVars {
        loss,
        total,
        reconstruction,
        kl,
        mutual_information,
    })
}

/// Objective over a mixed-class batch: each class's terms are weighted by its
/// share of the batch so every term stays a per-instance mean. Returns the
/// scalar loss handle and the report.
pub fn elbo_loss(
    model: &Model,
    tape: &mut Tape<'_>,
    batch: &[&StandardizedInstance],
    classes: &[AgentClass],
    beta: f64,
    alpha: f64,
    feedback: TrainFeedback,
) -> Result<(Var, LossReport)> {
    if batch.is_empty() || batch.len() != classes.len() {
        return Err(Error::InvalidInput("batch needs one class per instance".into()));
    }
    let n = batch.len() as f64;
    let mut loss: Option<Var> = None;
    let mut report = LossReport {
        total: 0.0,
        reconstruction: 0.0,
        kl: 0.0,
        mutual_information: 0.0,
        beta,
        alpha,
    };
    let present: BTreeSet<AgentClass> = classes.iter().copied().collect();
    for class in present {
        let part: Vec<&StandardizedInstance> = batch
            .iter()
            .zip(classes)
            .filter(|(_, c)| **c == class)
            .map(|(s, _)| *s)
            .collect();
        let w = part.len() as f64 / n;
        let v = elbo_terms(model, tape, class, &part, beta, alpha, feedback)?;
        report.total += w * tape.scalar(v.total);
        report.reconstruction += w * tape.scalar(v.reconstruction);
        // both are nonnegative in exact arithmetic; drop roundoff below zero
        report.kl += w * tape.scalar(v.kl).max(0.0);
        report.mutual_information += w * tape.scalar(v.mutual_information).max(0.0);
        let scaled = tape.scale(v.loss, w);
        loss = Some(match loss {
            None => scaled,
            Some(l) => tape.add(l, scaled)?,
        });
    }
    Ok((loss.expect("nonempty batch"), report))
}

/// Result of map-CNN pre-training.
#[derive(Debug, Clone)]
pub struct PretrainResult {
    /// Only the `theta/<class>/map/…` parameters.
    pub params: ParamStore,
    /// Mean negative log-likelihood per step, per class in order.
    pub losses: Vec<(AgentClass, Vec<f64>)>,
}

/// Pre-trains each class's map CNN through a throwaway head that decodes the
/// map features alone into per-step velocity mixtures.
pub fn pretrain_map_cnn(
    model: &Model,
    data: &[(AgentClass, StandardizedInstance)],
    iterations: usize,
    batch_size: usize,
    optimizer: &AdamConfig,
    seed: u64,
) -> Result<PretrainResult> {
    if !model.config.use_map {
        return Err(Error::InvalidInput("map encoding is disabled".into()));
    }
    if !data.iter().any(|(_, s)| s.map.is_some() && s.gt_velocities.is_some()) {
        return Err(Error::Missing(
            "no instance carries both a map crop and a ground-truth future".into(),
        ));
    }
    let cfg = &model.config;
    let k = cfg.mixture_components;
    let mut out = ParamStore::new();
    let mut losses = Vec::new();
    for &class in &cfg.node_classes {
        let items: Vec<&StandardizedInstance> = data
            .iter()
            .filter(|(c, s)| *c == class && s.map.is_some() && s.gt_velocities.is_some())
            .map(|(_, s)| s)
            .collect();
        if items.is_empty() {
            continue;
        }
        let horizon = items[0].gt_velocities.as_ref().expect("filtered").len();
        let items: Vec<&StandardizedInstance> = items
            .into_iter()
            .filter(|s| s.gt_velocities.as_ref().is_some_and(|g| g.len() == horizon))
            .collect();
        let prefix = format!("theta/{class}/map");
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (encoder, head) = {
            let mut root = ParamBuilder::new(&mut store, &mut rng, "");
            let encoder = MapEncoder::new(&mut root.scope(&prefix), cfg)?;
            let head = Dense::new(
                &mut root.scope(&format!("psi/{class}/map_pretrain/head")),
                cfg.map.dense,
                horizon * 6 * k,
                Activation::Identity,
            )?;
            (encoder, head)
        };
        for e in model.params.subset(&format!("{prefix}/")).entries() {
            store.assign(&e.name, e.value.clone())?;
        }
        let scale = model.velocity_scale(class);
        let mut state = AdamState::new(&store);
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut cursor = order.len();
        let mut log = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let mut pick = Vec::with_capacity(batch_size);
            while pick.len() < batch_size.min(items.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                pick.push(items[order[cursor]]);
                cursor += 1;
            }
            let b = pick.len();
            let inputs = EncoderInputs::build(cfg, class, &pick)?;
            let (value, grads) = {
                let mut tape = Tape::new(&store);
                let x = tape.constant(inputs.map.clone().ok_or_else(|| Error::Missing("map crops".into()))?);
                let feat = encoder.forward(&mut tape, x)?;
                let raw = head.forward(&mut tape, feat)?;
                let mut total: Option<Var> = None;
                for t in 0..horizon {
                    let step = tape.slice_cols(raw, t * 6 * k, 6 * k)?;
                    let v =
                        Matrix::from_shape_fn((b, 2), |(r, d)| pick[r].gt_velocities.as_ref().expect("filtered")[t][d]);
                    let lp = mixture_log_prob_tape(&mut tape, step, &v, &scale, k, cfg.sigma_min, cfg.rho_max)?;
                    total = Some(match total {
                        None => lp,
                        Some(a) => tape.add(a, lp)?,
                    });
                }
                let mean = tape.mean_all(total.expect("nonzero horizon"));
                let loss = tape.scale(mean, -1.0 / horizon as f64);
                (tape.scalar(loss), tape.gradients(loss)?)
            };
            log.push(value);
            optimizer_step(&mut store, &grads, &mut state, optimizer)?;
        }
        for e in store.subset(&format!("{prefix}/")).entries() {
            out.insert(e.name.clone(), e.value.clone())?;
        }
        losses.push((class, log));
    }
    Ok(PretrainResult { params: out, losses })
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    #[serde(flatten)]
    pub report: LossReport,
    pub grad_norm: f64,
    /// Whether the optimizer skipped the step on non-finite gradients.
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainRecord>,
    pub pretrain: Option<PretrainResult>,
}

/// Node classes and edge types present in `instances`.
pub fn infer_graph_types(instances: &[PredictionInstance]) -> (Vec<AgentClass>, Vec<EdgeType>) {
    let classes: BTreeSet<AgentClass> = instances.iter().map(|i| i.class).collect();
    let edges: BTreeSet<EdgeType> = instances
        .iter()
        .flat_map(|i| i.neighbors.iter().filter(|(_, v)| !v.is_empty()).map(|(et, _)| *et))
        .collect();
    (classes.into_iter().collect(), edges.into_iter().collect())
}

/// Trains from scratch. `node_classes` and `edge_types` of `config` are
/// replaced with those present in the data. With `checkpoint_path`, the
/// final checkpoint (and intermediate ones, if configured) is written there;
/// on divergence the last good parameters are written before erroring.
pub fn train(
    instances: &[PredictionInstance],
    mut config: ModelConfig,
    tc: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    let usable: Vec<&PredictionInstance> = instances
        .iter()
        .filter(|i| i.gt_future.is_some())
        .filter(|i| !config.use_map || i.map_crop.is_some())
        .filter(|i| !config.use_robot || i.ego_future.is_some())
        .collect();
    if usable.is_empty() {
        return Err(Error::InvalidInput(
            "no training instance has the required ground truth, map and plan".into(),
        ));
    }
    let owned: Vec<PredictionInstance> = usable.iter().map(|i| (*i).clone()).collect();
    let (classes, edges) = infer_graph_types(&owned);
    config.node_classes = classes;
    config.edge_types = edges;
    config.validate()?;
    let stats = StandardizationStats::fit(&owned);
    let mut model = Model::new(config, stats, tc.seed)?;
    let data: Vec<(AgentClass, StandardizedInstance)> = owned
        .iter()
        .map(|i| Ok((i.class, model.standardize(i)?)))
        .collect::<Result<_>>()?;

    let pretrain = if model.config.use_map && tc.pretrain_iterations > 0 {
        let res = pretrain_map_cnn(
            &model,
            &data,
            tc.pretrain_iterations,
            tc.batch_size,
            &tc.optimizer,
            tc.seed.wrapping_add(1),
        )?;
        for e in res.params.entries() {
            model.params.assign(&e.name, e.value.clone())?;
        }
        Some(res)
    } else {
        None
    };

    let schedule = tc.schedule(model.config.use_map);
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(tc.iterations);
    let mut last_good = model.params.clone();
    let bsz = tc.batch_size.min(data.len());
    for it in 0..tc.iterations {
        let mut pick = Vec::with_capacity(bsz);
        while pick.len() < bsz {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            pick.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<&StandardizedInstance> = pick.iter().map(|&i| &data[i].1).collect();
        let classes: Vec<AgentClass> = pick.iter().map(|&i| data[i].0).collect();
        let beta = beta_schedule(it, &schedule);
        let feedback = if tc.teacher_forcing {
            TrainFeedback::Teacher
        } else {
            TrainFeedback::Sampled(tc.seed ^ (it as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        };
        let (report, grads) = {
            let mut tape = Tape::new(&model.params);
            let (loss, report) = elbo_loss(&model, &mut tape, &batch, &classes, beta, tc.alpha, feedback)?;
            if !tape.scalar(loss).is_finite() {
                let reason = format!("objective evaluated to {}", report.total);
                return Err(diverged(&model, last_good, it, tc.seed, checkpoint_path, reason));
            }
            (report, tape.gradients(loss)?)
        };
        let outcome = optimizer_step(&mut model.params, &grads, &mut state, &tc.optimizer)?;
        let (grad_norm, skipped) = match outcome {
            StepOutcome::Applied { grad_norm, .. } => (grad_norm, false),
            StepOutcome::Skipped => (f64::NAN, true),
        };
        if model
            .params
            .entries()
            .iter()
            .any(|e| e.value.iter().any(|v| !v.is_finite()))
        {
            return Err(diverged(
                &model,
                last_good,
                it,
                tc.seed,
                checkpoint_path,
                "non-finite parameters".into(),
            ));
        }
        last_good.clone_from(&model.params);
        log.push(TrainRecord {
            iteration: it,
            report,
            grad_norm,
            skipped,
        });
        if let (Some(every), Some(path)) = (tc.checkpoint_every, checkpoint_path) {
            if (it + 1) % every == 0 && it + 1 < tc.iterations {
                save_checkpoint(path, &model.checkpoint(it + 1, tc.seed))?;
            }
        }
    }
    let checkpoint = model.checkpoint(tc.iterations, tc.seed);
    if let Some(path) = checkpoint_path {
        save_checkpoint(path, &checkpoint)?;
    }
    Ok(TrainOutcome {
        model,
        checkpoint,
        log,
        pretrain,
    })
}

fn diverged(
    model: &Model,
    good: ParamStore,
    iteration: usize,
    seed: u64,
    path: Option<&Path>,
    reason: String,
) -> Error {
    if let Some(path) = path {
        let mut ckpt = model.checkpoint(iteration, seed);
        ckpt.params = good;
        if let Err(e) = save_checkpoint(path, &ckpt) {
            return Error::Diverged {
                iteration,
                reason: format!("{reason}; saving the last good checkpoint also failed: {e}"),
            };
        }
    }
    Error::Diverged { iteration, reason }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = BetaSchedule::for_run(1000, false);
        // the start sits 1.6 ln 9 below the midpoint in sigmoid units
        let start = s.min + (s.max - s.min) / (1.0 + 9f64.powf(1.6));
        assert!((beta_schedule(0, &s) - start).abs() < 1e-12);
        assert!((beta_schedule(400, &s) - 0.525).abs() < 1e-12);
        assert!((beta_schedule(100_000, &s) - 1.0).abs() < 1e-12);
        let lo = s.min + 0.1 * (s.max - s.min);
        let hi = s.min + 0.9 * (s.max - s.min);
        assert!((beta_schedule(150, &s) - lo).abs() < 1e-9);
        assert!((beta_schedule(650, &s) - hi).abs() < 1e-9);
        assert_eq!(BetaSchedule::for_run(10, true).max, 5.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            alpha: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            beta: Some(BetaSchedule {
                min: 2.0,
                max: 1.0,
                midpoint: 0.0,
                rate: 1.0,
            }),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
