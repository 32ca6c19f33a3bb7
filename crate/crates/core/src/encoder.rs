//! Backbone encoder: node history, typed edge influence, local map and ego
//! plan, concatenated into `e_x`; plus the ground-truth future encoder that
//! feeds the recognition network.

use ndarray::Array2;

use crate::config::ModelConfig;
use crate::data::standardize::StandardizedInstance;
use crate::error::{Error, Result};
use crate::nn::{Activation, AdditiveAttention, BiLstm, Conv2d, Dense, Lstm, Matrix, ParamBuilder, Tape, Var};
use crate::scene::{AgentClass, EdgeType};

/// Time-major batch tensors for instances of one class.
#[derive(Debug, Clone)]
pub struct EncoderInputs {
    pub rows: usize,
    /// `len × [B × 6]`, front-padded with zeros.
    pub history: Vec<Matrix>,
    /// `len × [B × 1]`, 1 where the step is real.
    pub masks: Vec<Matrix>,
    /// Per configured edge type: `len × [B × 12]` inputs and a `[B × 1]` presence column.
    pub edges: Vec<(EdgeType, Vec<Matrix>, Matrix)>,
    pub map: Option<Matrix>,
    /// `T × [B × 6]`.
    pub robot: Option<Vec<Matrix>>,
    /// `T × [B × 4]`.
    pub future: Option<Vec<Matrix>>,
}

impl EncoderInputs {
    pub fn build(cfg: &ModelConfig, class: AgentClass, batch: &[&StandardizedInstance]) -> Result<Self> {
        let rows = batch.len();
        if rows == 0 {
            return Err(Error::InvalidInput("empty encoder batch".into()));
        }
        if let Some(i) = batch.iter().position(|s| s.history.is_empty()) {
            return Err(Error::InvalidInput(format!("instance {i} has an empty history")));
        }
        let len = batch.iter().map(|s| s.history.len()).max().expect("nonempty");
        let mut history = vec![Matrix::zeros((rows, 6)); len];
        let mut masks = vec![Matrix::zeros((rows, 1)); len];
        for (b, s) in batch.iter().enumerate() {
            let pad = len - s.history.len();
            for (k, st) in s.history.iter().enumerate() {
                for d in 0..6 {
                    history[pad + k][[b, d]] = st[d];
                }
                masks[pad + k][[b, 0]] = 1.0;
            }
        }

        let mut edges = Vec::new();
        if cfg.use_edges {
            for et in cfg.edge_types_into(class) {
                let mut steps = vec![Matrix::zeros((rows, 12)); len];
                let mut present = Matrix::zeros((rows, 1));
                for (b, s) in batch.iter().enumerate() {
                    let pad = len - s.history.len();
                    let neighbors = s.neighbors.get(&et).map(Vec::as_slice).unwrap_or(&[]);
                    if !neighbors.is_empty() {
                        present[[b, 0]] = 1.0;
                    }
                    for k in 0..s.history.len() {
                        for nb in neighbors {
                            for d in 0..6 {
                                steps[pad + k][[b, d]] += nb[k][d];
                            }
                        }
                        for d in 0..6 {
                            steps[pad + k][[b, 6 + d]] = s.history[k][d];
                        }
                    }
                }
                edges.push((et, steps, present));
            }
        }

        let map = if cfg.use_map {
            let width = cfg.map.channels * cfg.map.crop.size() * cfg.map.crop.size();
            let mut m = Matrix::zeros((rows, width));
            for (b, s) in batch.iter().enumerate() {
                let crop = s
                    .map
                    .as_ref()
                    .ok_or_else(|| Error::Missing(format!("map crop for batch row {b}")))?;
                if crop.len() != width {
                    return Err(Error::Shape {
                        op: "encode_map",
                        expected: format!("{width} map values"),
                        got: crop.len().to_string(),
                    });
                }
                m.row_mut(b).assign(&ndarray::ArrayView1::from(crop.as_slice()));
            }
            Some(m)
        } else {
            None
        };

        let robot = if cfg.use_robot {
            let plans: Vec<&Vec<[f64; 6]>> = batch
                .iter()
                .enumerate()
                .map(|(b, s)| {
                    s.ego_future
                        .as_ref()
                        .filter(|p| !p.is_empty())
                        .ok_or_else(|| Error::Missing(format!("ego plan for batch row {b}")))
                })
                .collect::<Result<_>>()?;
            Some(time_major(&plans, "ego plan")?)
        } else {
            None
        };

        let future = match batch.iter().map(|s| s.future.as_ref()).collect::<Option<Vec<_>>>() {
            Some(f) => Some(time_major(&f, "ground-truth future")?),
            None => None,
        };

        Ok(Self {
            rows,
            history,
            masks,
            edges,
            map,
            robot,
            future,
        })
    }
}

fn time_major<const D: usize>(seqs: &[&Vec<[f64; D]>], what: &str) -> Result<Vec<Matrix>> {
    let len = seqs[0].len();
    if len == 0 || seqs.iter().any(|s| s.len() != len) {
        return Err(Error::InvalidInput(format!(
            "{what} sequences must share a nonzero length"
        )));
    }
    Ok((0..len)
        .map(|k| Array2::from_shape_fn((seqs.len(), D), |(b, d)| seqs[b][k][d]))
        .collect())
}

/// Three convolutions and a dense layer over the local map crop.
#[derive(Debug, Clone)]
pub struct MapEncoder {
    pub convs: Vec<Conv2d>,
    pub dense: Dense,
}

impl MapEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let geoms = cfg.map.geometries()?;
        let convs = geoms
            .iter()
            .enumerate()
            .map(|(i, g)| Conv2d::new(&mut pb.scope(&format!("conv{}", i + 1)), *g, Activation::Relu))
            .collect::<Result<Vec<_>>>()?;
        let dense = Dense::new(
            &mut pb.scope("dense"),
            geoms[2].out_len(),
            cfg.map.dense,
            Activation::Relu,
        )?;
        Ok(Self { convs, dense })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(tape, h)?;
        }
        self.dense.forward(tape, h)
    }
}

/// Encoded backbone with the span of each component.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub e_x: Var,
    pub history: Var,
    /// `(component, start, width)` in concatenation order.
    pub layout: Vec<(&'static str, usize, usize)>,
    /// `[B × K]` attention weights over the configured edge types.
    pub edge_weights: Option<Var>,
    /// Per configured edge type, its `[B × edge_hidden]` encoding.
    pub edge_encodings: Vec<Var>,
}

impl Backbone {
    pub fn width(&self) -> usize {
        self.layout.iter().map(|c| c.2).sum()
    }
}

/// All encoders of one node class.
#[derive(Debug, Clone)]
pub struct NodeEncoder {
    pub class: AgentClass,
    pub history: Lstm,
    pub edges: Vec<(EdgeType, Lstm)>,
    pub attention: Option<AdditiveAttention>,
    pub map: Option<MapEncoder>,
    pub robot: Option<BiLstm>,
    pub future: BiLstm,
    layout: Vec<(&'static str, usize)>,
}

impl NodeEncoder {
    /// Registers parameters under `theta/<class>/…` and `phi/<class>/…`.
    pub fn new(root: &mut ParamBuilder<'_>, cfg: &ModelConfig, class: AgentClass) -> Result<Self> {
        let mut theta = root.scope(&format!("theta/{class}"));
        let history = Lstm::new(&mut theta.scope("history"), 6, cfg.history_hidden)?;
        let mut edges = Vec::new();
        let mut attention = None;
        if cfg.has_edges(class) {
            for et in cfg.edge_types_into(class) {
                let lstm = Lstm::new(&mut theta.scope(&format!("edge/{et}")), 12, cfg.edge_hidden)?;
                edges.push((et, lstm));
            }
            attention = Some(AdditiveAttention::new(
                &mut theta.scope("edge_attention"),
                cfg.history_hidden,
                cfg.edge_hidden,
                cfg.attention_dim,
            )?);
        }
        let map = if cfg.use_map {
            Some(MapEncoder::new(&mut theta.scope("map"), cfg)?)
        } else {
            None
        };
        let robot = if cfg.use_robot {
            Some(BiLstm::new(&mut theta.scope("robot"), 6, cfg.future_hidden)?)
        } else {
            None
        };
        let future = BiLstm::new(&mut root.scope(&format!("phi/{class}/future")), 4, cfg.future_hidden)?;
        Ok(Self {
            class,
            history,
            edges,
            attention,
            map,
            robot,
            future,
            layout: cfg.backbone_layout(class),
        })
    }

    fn constants(tape: &mut Tape<'_>, ms: &[Matrix]) -> Vec<Var> {
        ms.iter().map(|m| tape.constant(m.clone())).collect()
    }

    /// Final hidden state of the history LSTM, `[B × history_hidden]`.
    pub fn encode_history(&self, tape: &mut Tape<'_>, inputs: &EncoderInputs) -> Result<Var> {
        let xs = Self::constants(tape, &inputs.history);
        let ms = Self::constants(tape, &inputs.masks);
        Ok(self.history.run(tape, &xs, Some(&ms))?.0)
    }

    /// Attention-combined edge influence `[B × edge_hidden]`, the attention
    /// weights `[B × K]`, and every per-type encoding.
    pub fn encode_edges(
        &self,
        tape: &mut Tape<'_>,
        inputs: &EncoderInputs,
        query: Var,
    ) -> Result<(Var, Var, Vec<Var>)> {
        let attention = self
            .attention
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("edge encoding disabled for this class".into()))?;
        if inputs.edges.len() != self.edges.len() {
            return Err(Error::InvalidInput(
                "edge inputs do not match the configured edge types".into(),
            ));
        }
        let ms = Self::constants(tape, &inputs.masks);
        let mut keys = Vec::with_capacity(self.edges.len());
        let mut mask = Matrix::zeros((inputs.rows, self.edges.len()));
        for (j, ((et, lstm), (iet, steps, present))) in self.edges.iter().zip(&inputs.edges).enumerate() {
            if et != iet {
                return Err(Error::InvalidInput(format!("edge input {iet} where {et} was expected")));
            }
            let xs = Self::constants(tape, steps);
            keys.push(lstm.run(tape, &xs, Some(&ms))?.0);
            mask.column_mut(j).assign(&present.column(0));
        }
        let (context, weights) = attention.forward(tape, query, &keys, &mask)?;
        Ok((context, weights, keys))
    }

    pub fn encode_map(&self, tape: &mut Tape<'_>, inputs: &EncoderInputs) -> Result<Var> {
        let enc = self
            .map
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("map encoding disabled".into()))?;
        let m = inputs.map.as_ref().ok_or_else(|| Error::Missing("map crops".into()))?;
        let x = tape.constant(m.clone());
        enc.forward(tape, x)
    }

    pub fn encode_robot_future(&self, tape: &mut Tape<'_>, inputs: &EncoderInputs) -> Result<Var> {
        let enc = self
            .robot
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("robot-future encoding disabled".into()))?;
        let plan = inputs.robot.as_ref().ok_or_else(|| Error::Missing("ego plan".into()))?;
        let xs = Self::constants(tape, plan);
        enc.encode(tape, &xs, None)
    }

    /// Recognition features of the ground-truth future, `[B × 2·future_hidden]`.
    pub fn encode_node_future(&self, tape: &mut Tape<'_>, inputs: &EncoderInputs) -> Result<Var> {
        let fut = inputs
            .future
            .as_ref()
            .ok_or_else(|| Error::Missing("ground-truth future".into()))?;
        let xs = Self::constants(tape, fut);
        self.future.encode(tape, &xs, None)
    }

    pub fn assemble_backbone(&self, tape: &mut Tape<'_>, inputs: &EncoderInputs) -> Result<Backbone> {
        let history = self.encode_history(tape, inputs)?;
        let mut parts = vec![history];
        let mut edge_weights = None;
        let mut edge_encodings = Vec::new();
        for &(name, _) in &self.layout[1..] {
            let v = match name {
                "edges" => {
                    let (ctx, w, keys) = self.encode_edges(tape, inputs, history)?;
                    edge_weights = Some(w);
                    edge_encodings = keys;
                    ctx
                }
                "map" => self.encode_map(tape, inputs)?,
                "robot_future" => self.encode_robot_future(tape, inputs)?,
                other => return Err(Error::InvalidInput(format!("unknown backbone component {other}"))),
            };
            parts.push(v);
        }
        let mut layout = Vec::with_capacity(self.layout.len());
        let mut start = 0;
        for (&(name, width), &p) in self.layout.iter().zip(&parts) {
            let got = tape.shape(p).1;
            if got != width {
                return Err(Error::Shape {
                    op: "assemble_backbone",
                    expected: format!("{name} width {width}"),
                    got: got.to_string(),
                });
            }
            layout.push((name, start, width));
            start += width;
        }
        let e_x = tape.concat_cols(&parts)?;
        Ok(Backbone {
            e_x,
            history,
            layout,
            edge_weights,
            edge_encodings,
        })
    }

    pub fn backbone_width(&self) -> usize {
        self.layout.iter().map(|c| c.1).sum()
    }
}
