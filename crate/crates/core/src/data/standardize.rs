//! Per-class state normalization.
//!
//! Positions are first expressed relative to the modeled agent's current
//! position, then every dimension is shifted and scaled by class statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scene::{AgentClass, EdgeType, PredictionInstance, State};

/// Lower bound on every standard deviation.
pub const STD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mean: [f64; 6],
    pub std: [f64; 6],
}

impl ClassStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 6],
            std: [1.0; 6],
        }
    }

    /// Mean and (floored, population) standard deviation of `rows`.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64; 6]>) -> Self {
        let mut n = 0usize;
        let mut sum = [0.0; 6];
        let mut sq = [0.0; 6];
        let rows: Vec<&[f64; 6]> = rows.into_iter().collect();
        for r in &rows {
            n += 1;
            for d in 0..6 {
                sum[d] += r[d];
            }
        }
        if n == 0 {
            return Self::identity();
        }
        let mean = sum.map(|s| s / n as f64);
        for r in &rows {
            for d in 0..6 {
                sq[d] += (r[d] - mean[d]).powi(2);
            }
        }
        let std = std::array::from_fn(|d| (sq[d] / n as f64).sqrt().max(STD_FLOOR));
        Self { mean, std }
    }

    pub fn standardize(&self, x: &[f64; 6]) -> [f64; 6] {
        std::array::from_fn(|d| (x[d] - self.mean[d]) / self.std[d])
    }

    pub fn unstandardize(&self, z: &[f64; 6]) -> [f64; 6] {
        std::array::from_fn(|d| z[d] * self.std[d] + self.mean[d])
    }

    pub fn vel_mean(&self) -> [f64; 2] {
        [self.mean[2], self.mean[3]]
    }

    pub fn vel_std(&self) -> [f64; 2] {
        [self.std[2], self.std[3]]
    }

    pub fn pos_std(&self) -> [f64; 2] {
        [self.std[0], self.std[1]]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub classes: BTreeMap<AgentClass, ClassStats>,
}

fn relative(s: &State, origin: [f64; 2]) -> [f64; 6] {
    let mut a = s.to_array();
    a[0] -= origin[0];
    a[1] -= origin[1];
    a
}

impl StandardizationStats {
    /// Statistics over the history states of the given (training) instances,
    /// grouped by the modeled agent's class.
    pub fn fit(instances: &[PredictionInstance]) -> Self {
        let mut rows: BTreeMap<AgentClass, Vec<[f64; 6]>> = BTreeMap::new();
        for inst in instances {
            let origin = inst.current().pos;
            rows.entry(inst.class)
                .or_default()
                .extend(inst.history.iter().map(|s| relative(s, origin)));
        }
        Self {
            classes: rows.into_iter().map(|(c, r)| (c, ClassStats::fit(r.iter()))).collect(),
        }
    }

    pub fn class(&self, class: AgentClass) -> ClassStats {
        self.classes.get(&class).copied().unwrap_or_else(ClassStats::identity)
    }

    pub fn standardize_state(&self, class: AgentClass, s: &State, origin: [f64; 2]) -> [f64; 6] {
        self.class(class).standardize(&relative(s, origin))
    }

    pub fn unstandardize_state(&self, class: AgentClass, z: &[f64; 6], origin: [f64; 2]) -> State {
        let mut a = self.class(class).unstandardize(z);
        a[0] += origin[0];
        a[1] += origin[1];
        State::from(a)
    }
}

/// Network-ready view of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedInstance {
    pub origin: [f64; 2],
    pub history: Vec<[f64; 6]>,
    /// Each neighbour front-padded with zeros to `history.len()` steps.
    pub neighbors: BTreeMap<EdgeType, Vec<Vec<[f64; 6]>>>,
    pub ego_future: Option<Vec<[f64; 6]>>,
    /// Ground-truth future as `[relative position / pos std, standardized velocity]`.
    pub future: Option<Vec<[f64; 4]>>,
    /// Raw ground-truth velocities (m/s).
    pub gt_velocities: Option<Vec<[f64; 2]>>,
    /// Flattened map crop, channel-major.
    pub map: Option<Vec<f64>>,
    /// Velocity at the prediction timestep (m/s).
    pub current_velocity: [f64; 2],
}

pub fn standardize(inst: &PredictionInstance, stats: &StandardizationStats) -> StandardizedInstance {
    let origin = inst.current().pos;
    let own = stats.class(inst.class);
    let history: Vec<[f64; 6]> = inst
        .history
        .iter()
        .map(|s| stats.standardize_state(inst.class, s, origin))
        .collect();
    let len = history.len();
    let neighbors = inst
        .neighbors
        .iter()
        .map(|(et, list)| {
            let seqs = list
                .iter()
                .map(|nb| {
                    let tail = &nb.states[nb.states.len().saturating_sub(len)..];
                    let mut seq = vec![[0.0; 6]; len - tail.len()];
                    seq.extend(tail.iter().map(|s| stats.standardize_state(nb.class, s, origin)));
                    seq
                })
                .collect();
            (*et, seqs)
        })
        .collect();
    let ego_future = inst.ego_future.as_ref().map(|plan| {
        let class = inst.ego_class.unwrap_or(inst.class);
        plan.iter().map(|s| stats.standardize_state(class, s, origin)).collect()
    });
    let gt_velocities = inst.gt_velocities();
    let future = inst.gt_future.as_ref().zip(gt_velocities.as_ref()).map(|(pos, vel)| {
        let (ps, vm, vs) = (own.pos_std(), own.vel_mean(), own.vel_std());
        pos.iter()
            .zip(vel)
            .map(|(p, v)| {
                [
                    (p[0] - origin[0]) / ps[0],
                    (p[1] - origin[1]) / ps[1],
                    (v[0] - vm[0]) / vs[0],
                    (v[1] - vm[1]) / vs[1],
                ]
            })
            .collect()
    });
    StandardizedInstance {
        origin,
        history,
        neighbors,
        ego_future,
        future,
        gt_velocities,
        map: inst.map_crop.as_ref().map(|m| m.values.clone()),
        current_velocity: inst.current().vel,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_floors_std() {
        let rows = [[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; 4];
        let st = ClassStats::fit(rows.iter());
        assert_eq!(st.mean, rows[0]);
        assert!(st.std.iter().all(|&s| s == STD_FLOOR));
        assert_eq!(st.standardize(&rows[0]), [0.0; 6]);
    }

    #[test]
    fn roundtrip_identity() {
        let rows: Vec<[f64; 6]> = (0..10)
            .map(|i| std::array::from_fn(|d| (i * d) as f64 * 0.3 - 1.0))
            .collect();
        let st = ClassStats::fit(rows.iter());
        for r in &rows {
            let back = st.unstandardize(&st.standardize(r));
            for d in 0..6 {
                assert!((back[d] - r[d]).abs() <= 1e-9 * r[d].abs().max(1.0));
            }
        }
    }
}
