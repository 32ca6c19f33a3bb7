//! The assembled forecaster: one node model per class over a shared
//! parameter store, and the three prediction output schemes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::checkpoint::Checkpoint;
use crate::data::standardize::{standardize, StandardizationStats, StandardizedInstance};
use crate::decoder::{integrate, Decoder, Feedback, GmmSequence, Rollout, VelocityScale};
use crate::encoder::{Backbone, EncoderInputs, NodeEncoder};
use crate::error::{Error, Result};
use crate::latent::DiscreteDistribution;
use crate::nn::{Activation, Dense, Matrix, ParamBuilder, ParamStore, Tape};
use crate::scene::{AgentClass, AgentId, PredictionInstance};

#[derive(Debug, Clone)]
pub struct NodeModel {
    pub class: AgentClass,
    pub encoder: NodeEncoder,
    /// `p_θ(z | x)` logits from `e_x`.
    pub prior: Dense,
    /// `q_φ(z | x, y)` logits from `[e_x, e_y]`.
    pub recognition: Dense,
    pub decoder: Decoder,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub stats: StandardizationStats,
    pub params: ParamStore,
    pub nodes: BTreeMap<AgentClass, NodeModel>,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, stats: StandardizationStats, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes = BTreeMap::new();
        {
            let mut root = ParamBuilder::new(&mut params, &mut rng, "");
            for &class in &config.node_classes {
                let encoder = NodeEncoder::new(&mut root, &config, class)?;
                let d = config.backbone_width(class);
                let prior = Dense::new(
                    &mut root.scope(&format!("theta/{class}/prior")),
                    d,
                    config.latent_size,
                    Activation::Identity,
                )?;
                let recognition = Dense::new(
                    &mut root.scope(&format!("phi/{class}/recognition")),
                    d + 2 * config.future_hidden,
                    config.latent_size,
                    Activation::Identity,
                )?;
                let decoder = Decoder::new(&mut root, &config, class)?;
                nodes.insert(
                    class,
                    NodeModel {
                        class,
                        encoder,
                        prior,
                        recognition,
                        decoder,
                    },
                );
            }
        }
        Ok(Self {
            config,
            stats,
            params,
            nodes,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(ckpt.config.clone(), ckpt.stats.clone(), ckpt.seed)?;
        ckpt.load_into(&mut model.params)?;
        Ok(model)
    }

    pub fn checkpoint(&self, iteration: usize, seed: u64) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            stats: self.stats.clone(),
            iteration,
            seed,
            params: self.params.clone(),
        }
    }

    pub fn node(&self, class: AgentClass) -> Result<&NodeModel> {
        self.nodes
            .get(&class)
            .ok_or_else(|| Error::InvalidInput(format!("model has no node model for class {class}")))
    }

    pub fn velocity_scale(&self, class: AgentClass) -> VelocityScale {
        VelocityScale::from_stats(&self.stats.class(class))
    }

    pub fn standardize(&self, inst: &PredictionInstance) -> Result<StandardizedInstance> {
        inst.validate()?;
        self.node(inst.class)?;
        if self.config.use_map && inst.map_crop.is_none() {
            return Err(Error::Missing(format!("map crop for `{}`", inst.node)));
        }
        if self.config.use_robot && inst.ego_future.is_none() {
            return Err(Error::Missing(format!("ego plan for `{}`", inst.node)));
        }
        Ok(standardize(inst, &self.stats))
    }

    /// Encodes a same-class batch on `tape`.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        class: AgentClass,
        batch: &[&StandardizedInstance],
    ) -> Result<(EncoderInputs, Backbone)> {
        let node = self.node(class)?;
        let inputs = EncoderInputs::build(&self.config, class, batch)?;
        let backbone = node.encoder.assemble_backbone(tape, &inputs)?;
        Ok((inputs, backbone))
    }

    /// `e_x` for one instance, as a `[1 × D]` matrix.
    pub fn backbone_value(&self, inst: &StandardizedInstance, class: AgentClass) -> Result<Matrix> {
        let mut tape = Tape::new(&self.params);
        let (_, bb) = self.encode(&mut tape, class, &[inst])?;
        Ok(tape.value(bb.e_x).clone())
    }

    pub fn prior(&self, inst: &PredictionInstance) -> Result<DiscreteDistribution> {
        let s = self.standardize(inst)?;
        let e_x = self.backbone_value(&s, inst.class)?;
        self.prior_from_backbone(inst.class, &e_x)
    }

    fn prior_from_backbone(&self, class: AgentClass, e_x: &Matrix) -> Result<DiscreteDistribution> {
        let logits = self.node(class)?.prior.eval(&self.params, e_x)?;
        DiscreteDistribution::from_logits(logits.row(0).to_vec())
    }
}

/// Output configuration of a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OutputScheme {
    /// `z ~ p_θ`, then a sampled rollout.
    Full,
    /// `z` fixed to the most likely mode, sampled rollouts.
    ZMode,
    /// Most likely `z`, then the greedy most likely trajectory.
    #[serde(rename = "MM")]
    Mm,
}

impl OutputScheme {
    pub const ALL: [OutputScheme; 3] = [OutputScheme::Full, OutputScheme::ZMode, OutputScheme::Mm];
}

impl fmt::Display for OutputScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputScheme::Full => "Full",
            OutputScheme::ZMode => "ZMode",
            OutputScheme::Mm => "MM",
        })
    }
}

impl FromStr for OutputScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "full" => Ok(OutputScheme::Full),
            "zmode" => Ok(OutputScheme::ZMode),
            "mm" => Ok(OutputScheme::Mm),
            _ => Err(Error::InvalidInput(format!("unknown output scheme `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutput {
    pub scheme: OutputScheme,
    pub node: AgentId,
    pub t: usize,
    /// `n × T` positions (m).
    pub trajectories: Vec<Vec<[f64; 2]>>,
    /// Latent class behind each trajectory.
    pub latent: Vec<usize>,
    /// `p_θ(z | x)`.
    pub prior: Vec<f64>,
    /// Mode-fed mixture sequence for every latent class, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gmms: Option<Vec<GmmSequence>>,
}

/// Independent per-sample stream: sample `i` of a call seeded with `seed`.
pub fn sample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// Forecasts for one instance. `Full` and `ZMode` draw `n_samples`
/// trajectories; `MM` always returns exactly one.
pub fn predict(
    model: &Model,
    inst: &PredictionInstance,
    scheme: OutputScheme,
    n_samples: usize,
    seed: u64,
) -> Result<PredictionOutput> {
    let s = model.standardize(inst)?;
    let node = model.node(inst.class)?;
    let e_x = model.backbone_value(&s, inst.class)?;
    let prior = model.prior_from_backbone(inst.class, &e_x)?;
    let scale = model.velocity_scale(inst.class);
    let start = inst.current().vel;

    let (latent, rollouts): (Vec<usize>, Vec<Rollout>) = match scheme {
        OutputScheme::Mm => {
            let z = vec![prior.mode()];
            let r = node.decoder.rollout::<ChaCha8Rng>(
                &model.params,
                &e_x,
                &z,
                inst.horizon,
                start,
                &scale,
                Feedback::Mode,
            )?;
            (z, r)
        }
        OutputScheme::Full | OutputScheme::ZMode => {
            if n_samples == 0 {
                return Err(Error::InvalidInput("n_samples must be at least 1".into()));
            }
            let mut rngs: Vec<ChaCha8Rng> = (0..n_samples).map(|i| sample_rng(seed, i)).collect();
            let z: Vec<usize> = if scheme == OutputScheme::Full {
                rngs.iter_mut().map(|r| prior.sample(r)).collect()
            } else {
                vec![prior.mode(); n_samples]
            };
            let rows = e_x.broadcast((n_samples, e_x.ncols())).expect("one row").to_owned();
            let r = node.decoder.rollout(
                &model.params,
                &rows,
                &z,
                inst.horizon,
                start,
                &scale,
                Feedback::Sampled(&mut rngs),
            )?;
            (z, r)
        }
    };
    let origin = inst.current().pos;
    let trajectories = rollouts
        .iter()
        .map(|r| integrate(&r.velocities, origin, inst.dt))
        .collect();
    Ok(PredictionOutput {
        scheme,
        node: inst.node.clone(),
        t: inst.t,
        trajectories,
        latent,
        prior: prior.probs,
        gmms: None,
    })
}

/// Mode-fed mixture sequences for every latent class.
pub fn enumerate_gmms(model: &Model, inst: &PredictionInstance) -> Result<Vec<GmmSequence>> {
    let s = model.standardize(inst)?;
    let node = model.node(inst.class)?;
    let e_x = model.backbone_value(&s, inst.class)?;
    let zs: Vec<usize> = (0..model.config.latent_size).collect();
    let rows: Array2<f64> = e_x.broadcast((zs.len(), e_x.ncols())).expect("one row").to_owned();
    let rollouts = node.decoder.rollout::<ChaCha8Rng>(
        &model.params,
        &rows,
        &zs,
        inst.horizon,
        inst.current().vel,
        &model.velocity_scale(inst.class),
        Feedback::Mode,
    )?;
    Ok(rollouts
        .into_iter()
        .map(|r| GmmSequence {
            steps: r.gmms,
            dt: inst.dt,
            origin: inst.current().pos,
        })
        .collect())
}
