//! Deterministic synthetic scenes for desk-scale experiments.

use std::f64::consts::FRAC_PI_4;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::raster::MapRaster;
use crate::error::{Error, Result};
use crate::scene::{AgentClass, AgentId, AgentNode, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    TwoModeFork,
    CorridorWithWalls,
    CarFollowing,
    Crossing,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::TwoModeFork => "two_mode_fork",
            Scenario::CorridorWithWalls => "corridor_with_walls",
            Scenario::CarFollowing => "car_following",
            Scenario::Crossing => "crossing",
        }
    }

    pub fn dt(self) -> f64 {
        match self {
            Scenario::CarFollowing => 0.5,
            _ => 0.4,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Scenario::TwoModeFork,
            Scenario::CorridorWithWalls,
            Scenario::CarFollowing,
            Scenario::Crossing,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub scenario: Scenario,
    /// Number of generated agents; for `car_following`, the number of
    /// followers behind the ego leader.
    pub agents: usize,
}

/// Steps of straight approach before the fork point.
pub const FORK_STEP: usize = 12;
/// Steps over which the heading turns by ±45°.
pub const FORK_TURN_STEPS: usize = 4;
const FORK_TAIL: usize = 16;
const FORK_LANE_SPACING: f64 = 12.0;

/// Side of the square map region owned by each corridor.
pub const CORRIDOR_REGION: f64 = 32.0;
pub const CORRIDOR_MAP_RESOLUTION: f64 = 0.5;
const CORRIDOR_HALF_WIDTH: f64 = 1.0;

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Scene> {
    if spec.agents == 0 {
        return Err(Error::InvalidInput("synthetic scene needs at least one agent".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let name = format!("{}-{seed}", spec.scenario);
    match spec.scenario {
        Scenario::TwoModeFork => two_mode_fork(&name, spec.agents, &mut rng),
        Scenario::CorridorWithWalls => corridor_with_walls(&name, spec.agents, &mut rng),
        Scenario::CarFollowing => car_following(&name, spec.agents, &mut rng),
        Scenario::Crossing => crossing(&name, spec.agents, &mut rng),
    }
}

fn jitter(rng: &mut ChaCha8Rng, sigma: f64) -> [f64; 2] {
    let n = Normal::new(0.0, sigma).expect("valid sigma");
    [n.sample(rng), n.sample(rng)]
}

/// Agents walk along +x in separate lanes, reach `x = 0` after `FORK_STEP`
/// steps, then turn left or right by 45°.
fn two_mode_fork(name: &str, n: usize, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let dt = Scenario::TwoModeFork.dt();
    let mut agents = Vec::with_capacity(n);
    for i in 0..n {
        let speed = rng.random_range(1.1..1.3);
        let left = rng.random_bool(0.5);
        let start = rng.random_range(0..8);
        let lane = i as f64 * FORK_LANE_SPACING;
        let step = speed * dt;
        let mut p = [-(FORK_STEP as f64) * step, lane];
        let mut positions = vec![p];
        for k in 1..=FORK_STEP + FORK_TAIL {
            let turn = k.saturating_sub(FORK_STEP).min(FORK_TURN_STEPS) as f64 / FORK_TURN_STEPS as f64;
            let heading = if left { turn * FRAC_PI_4 } else { -turn * FRAC_PI_4 };
            p = [p[0] + step * heading.cos(), p[1] + step * heading.sin()];
            positions.push(p);
        }
        for p in positions.iter_mut() {
            let e = jitter(rng, 0.01);
            p[0] += e[0];
            p[1] += e[1];
        }
        agents.push(AgentNode::new(
            AgentId(format!("ped{i}")),
            AgentClass::Pedestrian,
            start,
            positions,
            dt,
        )?);
    }
    Scene::new(name, dt, agents)
}

/// Lateral direction taken at the fork: +1 left, −1 right.
pub fn fork_direction(agent: &AgentNode) -> i32 {
    let first = agent.positions[0][1];
    let last = agent.positions[agent.positions.len() - 1][1];
    if last > first {
        1
    } else {
        -1
    }
}

struct Corridor {
    origin: [f64; 2],
    up: bool,
}

impl Corridor {
    fn free(&self, p: [f64; 2]) -> bool {
        let (x, y) = (p[0] - self.origin[0], p[1] - self.origin[1]);
        let c = CORRIDOR_REGION / 2.0;
        let h = CORRIDOR_HALF_WIDTH;
        let horizontal = (1.0..=c + h).contains(&x) && (c - h..=c + h).contains(&y);
        let vertical = (c - h..=c + h).contains(&x)
            && if self.up {
                (c - h..=CORRIDOR_REGION - 1.0).contains(&y)
            } else {
                (1.0..=c + h).contains(&y)
            };
        horizontal || vertical
    }

    /// Centerline point at arc length `s` from the start.
    fn point(&self, s: f64) -> [f64; 2] {
        let c = CORRIDOR_REGION / 2.0;
        let r = CORRIDOR_HALF_WIDTH;
        let sign = if self.up { 1.0 } else { -1.0 };
        let straight = c - r - 2.0;
        let arc = std::f64::consts::FRAC_PI_2 * r;
        let (x, y) = if s <= straight {
            (2.0 + s, c)
        } else if s <= straight + arc {
            let a = (s - straight) / r;
            (c - r + r * a.sin(), c + sign * r * (1.0 - a.cos()))
        } else {
            (c, c + sign * (r + s - straight - arc))
        };
        [self.origin[0] + x, self.origin[1] + y]
    }

    fn length(&self) -> f64 {
        let c = CORRIDOR_REGION / 2.0;
        (c - CORRIDOR_HALF_WIDTH - 2.0)
            + std::f64::consts::FRAC_PI_2 * CORRIDOR_HALF_WIDTH
            + (c - 3.0 - CORRIDOR_HALF_WIDTH)
    }
}

/// One L-shaped corridor per agent, bending up or down at random. The
/// occupancy raster is 1 on walls and 0 inside corridors.
fn corridor_with_walls(name: &str, n: usize, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let dt = Scenario::CorridorWithWalls.dt();
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let corridors: Vec<Corridor> = (0..n)
        .map(|i| Corridor {
            origin: [(i % cols) as f64 * CORRIDOR_REGION, (i / cols) as f64 * CORRIDOR_REGION],
            up: rng.random_bool(0.5),
        })
        .collect();

    let res = CORRIDOR_MAP_RESOLUTION;
    let cells = (CORRIDOR_REGION / res) as usize;
    let mut map = MapRaster::zeros(cols * cells, rows * cells, 1, res, [0.0, 0.0])?;
    for row in 0..map.height {
        for col in 0..map.width {
            let p = map.cell_center(row, col);
            let region = (p[1] / CORRIDOR_REGION) as usize * cols + (p[0] / CORRIDOR_REGION) as usize;
            let free = corridors.get(region).is_some_and(|c| c.free(p));
            map.set(0, row, col, if free { 0.0 } else { 1.0 });
        }
    }

    let mut agents = Vec::with_capacity(n);
    for (i, c) in corridors.iter().enumerate() {
        let speed = rng.random_range(1.0..1.4);
        let start = rng.random_range(0..10);
        let steps = (c.length() / (speed * dt)).floor() as usize;
        let positions = (0..=steps).map(|k| c.point(k as f64 * speed * dt)).collect();
        agents.push(AgentNode::new(
            AgentId(format!("ped{i}")),
            AgentClass::Pedestrian,
            start,
            positions,
            dt,
        )?);
    }
    Ok(Scene::new(name, dt, agents)?.with_map(map))
}

pub const CAR_FOLLOWING_STEPS: usize = 60;

/// An ego leader with a randomly varying speed profile and a chain of
/// followers that track their predecessor's speed at a time-headway gap.
fn car_following(name: &str, followers: usize, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let dt = Scenario::CarFollowing.dt();
    let steps = CAR_FOLLOWING_STEPS;
    let headway = |v: f64| 4.0 + 1.0 * v;

    let mut speed = rng.random_range(8.0..14.0);
    let mut target = speed;
    let mut lead = vec![[0.0f64, speed]];
    for k in 1..steps {
        if k % 8 == 0 || rng.random_bool(0.05) {
            target = rng.random_range(3.0..20.0);
        }
        let accel = (0.8 * (target - speed)).clamp(-3.0, 2.5);
        speed = (speed + accel * dt).max(0.0);
        let x = lead[k - 1][0] + speed * dt;
        lead.push([x, speed]);
    }
    let mut tracks = vec![lead];
    for _ in 0..followers {
        let prev = tracks.last().expect("leader exists");
        let mut v = (prev[0][1] + rng.random_range(-2.0..2.0)).max(0.0);
        let mut x = prev[0][0] - headway(v) - rng.random_range(-2.0..2.0);
        let mut track = vec![[x, v]];
        for k in 1..steps {
            let (xl, vl) = (prev[k - 1][0], prev[k - 1][1]);
            let gap = xl - x;
            let accel = (1.0 * (vl - v) + 0.3 * (gap - headway(v))).clamp(-5.0, 3.0);
            v = (v + accel * dt).max(0.0);
            x += v * dt;
            track.push([x, v]);
        }
        tracks.push(track);
    }
    let mut agents = Vec::with_capacity(tracks.len());
    for (i, t) in tracks.iter().enumerate() {
        let id = if i == 0 { "ego".to_string() } else { format!("car{i}") };
        let positions = t.iter().map(|s| [s[0], 0.0]).collect();
        agents.push(AgentNode::new(AgentId(id), AgentClass::Car, 0, positions, dt)?);
    }
    Scene::new(name, dt, agents)?.with_ego(AgentId::new("ego"))
}

/// Two perpendicular pedestrian streams through the origin.
fn crossing(name: &str, n: usize, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let dt = Scenario::Crossing.dt();
    let mut agents = Vec::with_capacity(n);
    for i in 0..n {
        let speed = rng.random_range(1.0..1.4);
        let offset = rng.random_range(-1.0..1.0);
        let start = i * 3 + rng.random_range(0..3);
        let steps = (30.0 / (speed * dt)) as usize;
        let horizontal = i % 2 == 0;
        let positions = (0..=steps)
            .map(|k| {
                let s = -15.0 + k as f64 * speed * dt;
                if horizontal {
                    [s, offset]
                } else {
                    [offset, s]
                }
            })
            .collect();
        agents.push(AgentNode::new(
            AgentId(format!("ped{i}")),
            AgentClass::Pedestrian,
            start,
            positions,
            dt,
        )?);
    }
    Scene::new(name, dt, agents)
}
