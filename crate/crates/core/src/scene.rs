//! Scene abstraction: agent tracks, dynamic states, the directed
//! perception-range edge rule, and per-timestep prediction instances.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::raster::{crop_rotate_map, CropSpec, MapCrop, MapRaster};
use crate::error::{Error, Result};

/// Semantic category of an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentClass {
    Pedestrian,
    Bicycle,
    Car,
    Bus,
    Truck,
}

impl AgentClass {
    pub const ALL: [AgentClass; 5] = [
        AgentClass::Pedestrian,
        AgentClass::Bicycle,
        AgentClass::Car,
        AgentClass::Bus,
        AgentClass::Truck,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentClass::Pedestrian => "Pedestrian",
            AgentClass::Bicycle => "Bicycle",
            AgentClass::Car => "Car",
            AgentClass::Bus => "Bus",
            AgentClass::Truck => "Truck",
        }
    }
}

impl fmt::Display for AgentClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AgentClass::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown agent class `{s}`")))
    }
}

/// Per-class perception range and horizons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    /// Distance (m) within which agents of this class perceive others.
    pub perception_range: f64,
    /// History horizon `H` in timesteps; instances carry up to `H + 1` states.
    pub history: usize,
    /// Prediction horizon `T` in timesteps.
    pub horizon: usize,
}

impl ClassSpec {
    pub fn default_for(class: AgentClass) -> Self {
        match class {
            AgentClass::Pedestrian => ClassSpec {
                perception_range: 5.0,
                history: 8,
                horizon: 12,
            },
            AgentClass::Bicycle => ClassSpec {
                perception_range: 10.0,
                history: 4,
                horizon: 6,
            },
            AgentClass::Car | AgentClass::Bus | AgentClass::Truck => ClassSpec {
                perception_range: 30.0,
                history: 4,
                horizon: 6,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.perception_range > 0.0 && self.perception_range.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "perception range must be positive, got {}",
                self.perception_range
            )));
        }
        if self.history < 1 || self.horizon < 1 {
            return Err(Error::InvalidInput("history and horizon must be at least 1".into()));
        }
        Ok(())
    }
}

/// Class lookup with built-in defaults for classes that are not listed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassTable(pub BTreeMap<AgentClass, ClassSpec>);

impl ClassTable {
    pub fn spec(&self, class: AgentClass) -> ClassSpec {
        self.0
            .get(&class)
            .copied()
            .unwrap_or_else(|| ClassSpec::default_for(class))
    }

    pub fn with(mut self, class: AgentClass, spec: ClassSpec) -> Self {
        self.0.insert(class, spec);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.0.values().try_for_each(ClassSpec::validate)
    }
}

/// Dynamic state `[p, ṗ, p̈]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 6]", into = "[f64; 6]")]
pub struct State {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub acc: [f64; 2],
}

impl State {
    pub const DIM: usize = 6;

    pub fn to_array(self) -> [f64; 6] {
        [
            self.pos[0],
            self.pos[1],
            self.vel[0],
            self.vel[1],
            self.acc[0],
            self.acc[1],
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl From<[f64; 6]> for State {
    fn from(a: [f64; 6]) -> Self {
        State {
            pos: [a[0], a[1]],
            vel: [a[2], a[3]],
            acc: [a[4], a[5]],
        }
    }
}

impl From<State> for [f64; 6] {
    fn from(s: State) -> Self {
        s.to_array()
    }
}

/// Velocities and accelerations by finite differences: central at interior
/// points, one-sided at the ends (the first velocity is the first forward
/// difference; boundary accelerations copy their interior neighbour).
pub fn derive_states(positions: &[[f64; 2]], dt: f64) -> Result<Vec<State>> {
    if positions.is_empty() {
        return Err(Error::InvalidInput("derive_states needs at least one position".into()));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    if let Some(index) = positions.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::NonFinitePosition {
            index,
            what: format!("{:?}", positions[index]),
        });
    }
    let n = positions.len();
    let mut states: Vec<State> = positions
        .iter()
        .map(|&pos| State {
            pos,
            ..State::default()
        })
        .collect();
    if n == 1 {
        return Ok(states);
    }
    for d in 0..2 {
        states[0].vel[d] = (positions[1][d] - positions[0][d]) / dt;
        states[n - 1].vel[d] = (positions[n - 1][d] - positions[n - 2][d]) / dt;
        for i in 1..n - 1 {
            states[i].vel[d] = (positions[i + 1][d] - positions[i - 1][d]) / (2.0 * dt);
        }
        if n >= 3 {
            for i in 1..n - 1 {
                states[i].acc[d] = (positions[i + 1][d] - 2.0 * positions[i][d] + positions[i - 1][d]) / (dt * dt);
            }
            states[0].acc[d] = states[1].acc[d];
            states[n - 1].acc[d] = states[n - 2].acc[d];
        }
    }
    Ok(states)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub String);

impl AgentId {
    pub fn new(s: impl Into<String>) -> Self {
        AgentId(s.into())
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One tracked agent, defined on the contiguous span
/// `[first_timestep, last_timestep()]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentNode {
    pub id: AgentId,
    pub class: AgentClass,
    pub first_timestep: usize,
    pub positions: Vec<[f64; 2]>,
    pub states: Vec<State>,
}

impl AgentNode {
    pub fn new(
        id: AgentId,
        class: AgentClass,
        first_timestep: usize,
        positions: Vec<[f64; 2]>,
        dt: f64,
    ) -> Result<Self> {
        let states = derive_states(&positions, dt)?;
        Ok(Self {
            id,
            class,
            first_timestep,
            positions,
            states,
        })
    }

    pub fn last_timestep(&self) -> usize {
        self.first_timestep + self.positions.len() - 1
    }

    pub fn alive_at(&self, t: usize) -> bool {
        t >= self.first_timestep && t <= self.last_timestep()
    }

    pub fn position_at(&self, t: usize) -> Option<[f64; 2]> {
        self.alive_at(t).then(|| self.positions[t - self.first_timestep])
    }

    /// States over `[from, to]` derived only from positions up to `to`, so the
    /// last state never looks past `to`.
    pub fn causal_states(&self, from: usize, to: usize, dt: f64) -> Result<Vec<State>> {
        if !self.alive_at(from) || !self.alive_at(to) || from > to {
            return Err(Error::InvalidInput(format!(
                "agent {} has no data on [{from}, {to}]",
                self.id
            )));
        }
        let upto = &self.positions[..=to - self.first_timestep];
        let states = derive_states(upto, dt)?;
        Ok(states[from - self.first_timestep..].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub dt: f64,
    pub agents: Vec<AgentNode>,
    pub map: Option<MapRaster>,
    pub ego: Option<AgentId>,
}

impl Scene {
    pub fn new(name: impl Into<String>, dt: f64, agents: Vec<AgentNode>) -> Result<Self> {
        let scene = Scene {
            name: name.into(),
            dt,
            agents,
            map: None,
            ego: None,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn with_map(mut self, map: MapRaster) -> Self {
        self.map = Some(map);
        self
    }

    pub fn with_ego(mut self, ego: AgentId) -> Result<Self> {
        if self.agent(&ego).is_none() {
            return Err(Error::InvalidInput(format!("ego agent `{ego}` not in scene")));
        }
        self.ego = Some(ego);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidInput(format!("dt must be positive, got {}", self.dt)));
        }
        let mut seen = std::collections::HashSet::new();
        for a in &self.agents {
            if !seen.insert(&a.id) {
                return Err(Error::InvalidInput(format!("duplicate agent id `{}`", a.id)));
            }
            if a.positions.is_empty() || a.positions.len() != a.states.len() {
                return Err(Error::InvalidInput(format!("agent `{}` has inconsistent track", a.id)));
            }
            if !a.states.iter().all(State::is_finite) {
                return Err(Error::InvalidInput(format!("agent `{}` has non-finite states", a.id)));
            }
        }
        Ok(())
    }

    pub fn agent(&self, id: &AgentId) -> Option<&AgentNode> {
        self.agents.iter().find(|a| &a.id == id)
    }

    /// One past the last timestep with any agent.
    pub fn timesteps(&self) -> usize {
        self.agents.iter().map(|a| a.last_timestep() + 1).max().unwrap_or(0)
    }

    fn alive_indices(&self, t: usize) -> Vec<usize> {
        (0..self.agents.len()).filter(|&i| self.agents[i].alive_at(t)).collect()
    }
}

/// Ordered pair of classes `source → target`; all edges of one type share
/// encoder weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeType {
    pub source: AgentClass,
    pub target: AgentClass,
}

impl EdgeType {
    pub fn new(source: AgentClass, target: AgentClass) -> Self {
        Self { source, target }
    }
}

impl fmt::Display for EdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.source, self.target)
    }
}

impl FromStr for EdgeType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once("->")
            .ok_or_else(|| Error::InvalidInput(format!("edge type `{s}` is not `Source->Target`")))?;
        Ok(EdgeType::new(a.trim().parse()?, b.trim().parse()?))
    }
}

impl Serialize for EdgeType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EdgeType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectedEdge {
    pub source: AgentId,
    pub target: AgentId,
    pub edge_type: EdgeType,
}

/// `(source index, target index)` pairs for every agent pair alive at `t` with
/// `‖p_source − p_target‖ ≤ d_{class(target)}`.
fn edge_indices(scene: &Scene, t: usize, classes: &ClassTable) -> Vec<(usize, usize)> {
    let alive = scene.alive_indices(t);
    let mut out = Vec::new();
    for &j in &alive {
        let range = classes.spec(scene.agents[j].class).perception_range;
        let pj = scene.agents[j].position_at(t).expect("alive");
        for &i in &alive {
            if i == j {
                continue;
            }
            let pi = scene.agents[i].position_at(t).expect("alive");
            let d = ((pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2)).sqrt();
            if d <= range {
                out.push((i, j));
            }
        }
    }
    out
}

/// Directed edges at timestep `t`. An edge `i → j` means `j` perceives `i`,
/// so the threshold is the target's perception range.
pub fn build_edges(scene: &Scene, t: usize, classes: &ClassTable) -> Vec<DirectedEdge> {
    edge_indices(scene, t, classes)
        .into_iter()
        .map(|(i, j)| {
            let (a, b) = (&scene.agents[i], &scene.agents[j]);
            DirectedEdge {
                source: a.id.clone(),
                target: b.id.clone(),
                edge_type: EdgeType::new(a.class, b.class),
            }
        })
        .collect()
}

/// A neighbour's states over the tail of the modeled agent's history window;
/// the last entry is at the prediction timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborHistory {
    pub id: AgentId,
    pub class: AgentClass,
    pub states: Vec<State>,
}

/// One modeled agent at one prediction timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionInstance {
    pub node: AgentId,
    pub class: AgentClass,
    pub t: usize,
    pub dt: f64,
    /// Prediction horizon `T` for this agent's class.
    pub horizon: usize,
    /// States over `[t − h, t]`, oldest first, `h ≤ H`.
    pub history: Vec<State>,
    #[serde(default)]
    pub neighbors: BTreeMap<EdgeType, Vec<NeighborHistory>>,
    #[serde(default)]
    pub map_crop: Option<MapCrop>,
    /// Planned ego states over `(t, t + T]`.
    #[serde(default)]
    pub ego_future: Option<Vec<State>>,
    #[serde(default)]
    pub ego_class: Option<AgentClass>,
    /// Ground-truth positions over `(t, t + T]`.
    #[serde(default)]
    pub gt_future: Option<Vec<[f64; 2]>>,
}

impl PredictionInstance {
    pub fn current(&self) -> &State {
        self.history.last().expect("instances have at least one state")
    }

    /// Velocities that integrate (forward Euler) exactly to the ground truth.
    pub fn gt_velocities(&self) -> Option<Vec<[f64; 2]>> {
        let gt = self.gt_future.as_ref()?;
        let mut prev = self.current().pos;
        Some(
            gt.iter()
                .map(|p| {
                    let v = [(p[0] - prev[0]) / self.dt, (p[1] - prev[1]) / self.dt];
                    prev = *p;
                    v
                })
                .collect(),
        )
    }

    /// Heading of the most recent non-negligible velocity, 0 if none.
    pub fn heading(&self) -> f64 {
        heading_of(&self.history)
    }

    pub fn validate(&self) -> Result<()> {
        if self.history.is_empty() {
            return Err(Error::InvalidInput(format!(
                "instance for `{}` has empty history",
                self.node
            )));
        }
        if !(self.dt > 0.0) || self.horizon == 0 {
            return Err(Error::InvalidInput("instance needs dt > 0 and horizon ≥ 1".into()));
        }
        if let Some(gt) = &self.gt_future {
            if gt.len() != self.horizon {
                return Err(Error::InvalidInput(format!(
                    "gt_future has {} steps, horizon is {}",
                    gt.len(),
                    self.horizon
                )));
            }
        }
        if let Some(ego) = &self.ego_future {
            if ego.is_empty() {
                return Err(Error::InvalidInput("ego_future is empty".into()));
            }
        }
        let states = self
            .history
            .iter()
            .chain(self.neighbors.values().flatten().flat_map(|n| n.states.iter()))
            .chain(self.ego_future.iter().flatten());
        for s in states {
            if !s.is_finite() {
                return Err(Error::InvalidInput("instance contains non-finite states".into()));
            }
        }
        Ok(())
    }
}

/// States along a planned path over `(t, t + T]` that leaves `current`.
pub fn plan_from_positions(current: [f64; 2], positions: &[[f64; 2]], dt: f64) -> Result<Vec<State>> {
    if positions.is_empty() {
        return Err(Error::InvalidInput("empty plan".into()));
    }
    let mut path = Vec::with_capacity(positions.len() + 1);
    path.push(current);
    path.extend_from_slice(positions);
    Ok(derive_states(&path, dt)?.split_off(1))
}

pub(crate) fn heading_of(states: &[State]) -> f64 {
    states
        .iter()
        .rev()
        .find(|s| s.vel[0].hypot(s.vel[1]) > 1e-3)
        .map(|s| s.vel[1].atan2(s.vel[0]))
        .unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceOptions {
    pub classes: ClassTable,
    /// Minimum number of history states (including the current one).
    pub min_history: usize,
    pub require_gt: bool,
    /// Map crop geometry; crops are attached only when the scene has a map.
    pub map: Option<CropSpec>,
}

impl SliceOptions {
    pub fn new(classes: ClassTable) -> Self {
        Self {
            classes,
            min_history: 2,
            require_gt: false,
            map: None,
        }
    }
}

/// Prediction instances for every non-ego agent alive at `t` with enough
/// history. Edges are computed at `t` only.
pub fn slice_instances(scene: &Scene, t: usize, opts: &SliceOptions) -> Result<Vec<PredictionInstance>> {
    let edges = edge_indices(scene, t, &opts.classes);
    let ego_idx = scene
        .ego
        .as_ref()
        .and_then(|id| scene.agents.iter().position(|a| &a.id == id));
    let mut out = Vec::new();
    for (j, agent) in scene.agents.iter().enumerate() {
        if !agent.alive_at(t) || Some(j) == ego_idx {
            continue;
        }
        let spec = opts.classes.spec(agent.class);
        let available = t - agent.first_timestep + 1;
        let len = available.min(spec.history + 1);
        if len < opts.min_history.max(1) {
            continue;
        }
        let start = t + 1 - len;
        let gt_future = (agent.last_timestep() >= t + spec.horizon).then(|| {
            (t + 1..=t + spec.horizon)
                .map(|k| agent.position_at(k).expect("alive"))
                .collect::<Vec<_>>()
        });
        if opts.require_gt && gt_future.is_none() {
            continue;
        }
        let history = agent.causal_states(start, t, scene.dt)?;

        let mut neighbors: BTreeMap<EdgeType, Vec<NeighborHistory>> = BTreeMap::new();
        for &(i, _) in edges.iter().filter(|(_, tgt)| *tgt == j) {
            let nb = &scene.agents[i];
            let from = start.max(nb.first_timestep);
            neighbors
                .entry(EdgeType::new(nb.class, agent.class))
                .or_default()
                .push(NeighborHistory {
                    id: nb.id.clone(),
                    class: nb.class,
                    states: nb.causal_states(from, t, scene.dt)?,
                });
        }

        let (ego_future, ego_class) = match ego_idx.map(|e| &scene.agents[e]) {
            Some(ego) if ego.alive_at(t) && ego.last_timestep() >= t + spec.horizon => {
                let plan = ego.causal_states(t + 1, t + spec.horizon, scene.dt)?;
                (Some(plan), Some(ego.class))
            }
            _ => (None, None),
        };

        let map_crop = match (&opts.map, &scene.map) {
            (Some(crop), Some(map)) => {
                let heading = heading_of(&history);
                Some(crop_rotate_map(
                    map,
                    history.last().expect("nonempty").pos,
                    heading,
                    crop,
                ))
            }
            _ => None,
        };

        out.push(PredictionInstance {
            node: agent.id.clone(),
            class: agent.class,
            t,
            dt: scene.dt,
            horizon: spec.horizon,
            history,
            neighbors,
            map_crop,
            ego_future,
            ego_class,
            gt_future,
        });
    }
    Ok(out)
}

/// Instances over every timestep of the scene.
pub fn all_instances(scene: &Scene, opts: &SliceOptions) -> Result<Vec<PredictionInstance>> {
    let mut out = Vec::new();
    for t in 0..scene.timesteps() {
        out.extend(slice_instances(scene, t, opts)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(id: &str, class: AgentClass, first: usize, positions: Vec<[f64; 2]>) -> AgentNode {
        AgentNode::new(AgentId::new(id), class, first, positions, 1.0).unwrap()
    }

    #[test]
    fn stationary_agent_has_zero_derivatives() {
        let s = derive_states(&[[2.0, 3.0]; 5], 0.4).unwrap();
        assert!(s.iter().all(|s| s.vel == [0.0, 0.0] && s.acc == [0.0, 0.0]));
    }

    #[test]
    fn uniform_motion_has_unit_velocity() {
        let p: Vec<[f64; 2]> = (0..6).map(|t| [t as f64, 0.0]).collect();
        let s = derive_states(&p, 1.0).unwrap();
        for st in &s[1..5] {
            assert_eq!(st.vel, [1.0, 0.0]);
            assert_eq!(st.acc, [0.0, 0.0]);
        }
    }

    #[test]
    fn quadratic_motion_interior_acceleration_is_two() {
        let p: Vec<[f64; 2]> = (0..7).map(|t| [(t * t) as f64, 0.0]).collect();
        let s = derive_states(&p, 1.0).unwrap();
        for (i, st) in s.iter().enumerate().take(6).skip(1) {
            assert_eq!(st.acc[0], 2.0);
            // central difference of t² is exactly 2t
            assert_eq!(st.vel[0], 2.0 * i as f64);
        }
        // first-frame velocity is the first forward difference
        assert_eq!(s[0].vel[0], 1.0);
    }

    #[test]
    fn non_finite_position_reports_index() {
        let err = derive_states(&[[0.0, 0.0], [f64::NAN, 1.0]], 1.0).unwrap_err();
        assert!(matches!(err, Error::NonFinitePosition { index: 1, .. }));
        assert!(derive_states(&[], 1.0).is_err());
        assert!(derive_states(&[[0.0, 0.0]], 0.0).is_err());
    }

    #[test]
    fn edges_use_target_range() {
        let classes = ClassTable::default();
        let scene = Scene::new(
            "s",
            0.5,
            vec![
                agent("p1", AgentClass::Pedestrian, 0, vec![[0.0, 0.0]]),
                agent("p2", AgentClass::Pedestrian, 0, vec![[1.0, 0.0]]),
            ],
        )
        .unwrap();
        assert_eq!(build_edges(&scene, 0, &classes).len(), 2);

        let scene = Scene::new(
            "s",
            0.5,
            vec![
                agent("ped", AgentClass::Pedestrian, 0, vec![[0.0, 0.0]]),
                agent("car", AgentClass::Car, 0, vec![[10.0, 0.0]]),
            ],
        )
        .unwrap();
        let edges = build_edges(&scene, 0, &classes);
        assert_eq!(edges.len(), 1);
        assert_eq!(edges[0].source.0, "ped");
        assert_eq!(edges[0].edge_type.to_string(), "Pedestrian->Car");
        let empty = Scene::new("e", 0.5, vec![]).unwrap();
        assert!(build_edges(&empty, 0, &classes).is_empty());
    }

    #[test]
    fn slicing_respects_min_history_and_windows() {
        let classes = ClassTable::default().with(
            AgentClass::Pedestrian,
            ClassSpec {
                perception_range: 5.0,
                history: 3,
                horizon: 2,
            },
        );
        let track = |n: usize| (0..n).map(|t| [t as f64, 0.0]).collect::<Vec<_>>();
        let scene = Scene::new(
            "s",
            1.0,
            vec![
                agent("old", AgentClass::Pedestrian, 0, track(10)),
                agent(
                    "new",
                    AgentClass::Pedestrian,
                    5,
                    vec![[5.0, 1.0], [6.0, 1.0], [7.0, 1.0]],
                ),
            ],
        )
        .unwrap();
        let mut opts = SliceOptions::new(classes);
        let inst = slice_instances(&scene, 5, &opts).unwrap();
        assert_eq!(inst.len(), 1, "agent appearing at t is excluded");
        let i = &inst[0];
        assert_eq!(i.history.len(), 4);
        assert_eq!(i.gt_future.as_ref().unwrap(), &vec![[6.0, 0.0], [7.0, 0.0]]);
        // neighbor window only covers timesteps where the neighbour existed
        let nb = &i.neighbors[&EdgeType::new(AgentClass::Pedestrian, AgentClass::Pedestrian)];
        assert_eq!(nb[0].states.len(), 1);
        // last state is causal: backward difference at t
        assert_eq!(i.current().vel, [1.0, 0.0]);

        opts.require_gt = true;
        assert!(slice_instances(&scene, 9, &opts).unwrap().is_empty());
        opts.require_gt = false;
        let late = slice_instances(&scene, 9, &opts).unwrap();
        assert!(late[0].gt_future.is_none());
    }

    #[test]
    fn ego_future_attached_with_full_horizon() {
        let classes = ClassTable::default();
        let t_len = 20;
        let track = |y: f64| (0..t_len).map(|t| [t as f64, y]).collect::<Vec<_>>();
        let scene = Scene::new(
            "s",
            0.5,
            vec![
                agent("ego", AgentClass::Car, 0, track(0.0)),
                agent("a", AgentClass::Car, 0, track(3.0)),
                agent("b", AgentClass::Car, 0, track(-3.0)),
            ],
        )
        .unwrap()
        .with_ego(AgentId::new("ego"))
        .unwrap();
        let inst = slice_instances(&scene, 6, &SliceOptions::new(classes)).unwrap();
        assert_eq!(inst.len(), 2, "ego itself is not a modeled node");
        for i in &inst {
            assert_eq!(i.ego_future.as_ref().unwrap().len(), 6);
            assert_eq!(i.ego_class, Some(AgentClass::Car));
        }
    }

    #[test]
    fn edge_type_string_roundtrip() {
        let e = EdgeType::new(AgentClass::Bus, AgentClass::Pedestrian);
        assert_eq!(e.to_string().parse::<EdgeType>().unwrap(), e);
        assert!("Bus".parse::<EdgeType>().is_err());
    }
}
