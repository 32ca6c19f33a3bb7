//! Scene abstraction and data-loading oracles.

use std::collections::BTreeSet;

use proptest::prelude::*;
use trajectron::data::raster::{crop_rotate_map, load_map_raster, write_map_raster, CropSpec, MapRaster};
use trajectron::data::standardize::{ClassStats, STD_FLOOR};
use trajectron::data::synth::{generate_synthetic, Scenario, SyntheticSpec};
use trajectron::data::text::{load_trajectory_text, write_trajectory_text, TextFormat};
use trajectron::scene::*;

fn table() -> ClassTable {
    let spec = |range| ClassSpec {
        perception_range: range,
        history: 4,
        horizon: 4,
    };
    ClassTable::default()
        .with(AgentClass::Pedestrian, spec(5.0))
        .with(AgentClass::Car, spec(30.0))
}

fn snapshot(agents: &[(bool, [f64; 2])], offset: [f64; 2]) -> Scene {
    let nodes = agents
        .iter()
        .enumerate()
        .map(|(i, (car, p))| {
            let class = if *car { AgentClass::Car } else { AgentClass::Pedestrian };
            let pos = [p[0] + offset[0], p[1] + offset[1]];
            AgentNode::new(AgentId(format!("a{i}")), class, 0, vec![pos, pos], 0.5).unwrap()
        })
        .collect();
    Scene::new("snap", 0.5, nodes).unwrap()
}

fn edge_set(scene: &Scene, t: usize) -> BTreeSet<(String, String)> {
    build_edges(scene, t, &table())
        .into_iter()
        .map(|e| (e.source.0, e.target.0))
        .collect()
}

fn agents() -> impl Strategy<Value = Vec<(bool, [f64; 2])>> {
    prop::collection::vec((any::<bool>(), prop::array::uniform2(-40.0..40.0f64)), 0..20)
}

proptest! {
    #[test]
    fn edges_equal_pairwise_brute_force(agents in agents()) {
        let scene = snapshot(&agents, [0.0, 0.0]);
        let mut expected = BTreeSet::new();
        for (i, (_, pi)) in agents.iter().enumerate() {
            for (j, (car_j, pj)) in agents.iter().enumerate() {
                let range = if *car_j { 30.0 } else { 5.0 };
                if i != j && ((pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2)).sqrt() <= range {
                    expected.insert((format!("a{i}"), format!("a{j}")));
                }
            }
        }
        prop_assert_eq!(edge_set(&scene, 0), expected);
        for e in build_edges(&scene, 0, &table()) {
            prop_assert_ne!(e.source, e.target);
        }
    }

    #[test]
    fn edges_are_translation_invariant(agents in agents(), offset in prop::array::uniform2(-100.0..100.0f64)) {
        let a = edge_set(&snapshot(&agents, [0.0, 0.0]), 1);
        let b = edge_set(&snapshot(&agents, offset), 1);
        prop_assert_eq!(a, b);
    }

    /// Central differences are exact on quadratics.
    #[test]
    fn quadratic_motion_is_differentiated_exactly(
        a in prop::array::uniform2(-5.0..5.0f64),
        b in prop::array::uniform2(-5.0..5.0f64),
        c in prop::array::uniform2(-2.0..2.0f64),
        dt in 0.1..1.0f64,
        n in 3usize..12,
    ) {
        let p = |t: f64| [a[0] + b[0] * t + c[0] * t * t, a[1] + b[1] * t + c[1] * t * t];
        let pos: Vec<[f64; 2]> = (0..n).map(|k| p(k as f64 * dt)).collect();
        let states = derive_states(&pos, dt).unwrap();
        for (k, s) in states.iter().enumerate().take(n - 1).skip(1) {
            let t = k as f64 * dt;
            for d in 0..2 {
                prop_assert!((s.vel[d] - (b[d] + 2.0 * c[d] * t)).abs() < 1e-8);
                prop_assert!((s.acc[d] - 2.0 * c[d]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn raster_write_read_is_bit_identical(
        w in 1usize..12,
        h in 1usize..12,
        ch in 1usize..3,
        res in 0.05..2.0f64,
        origin in prop::array::uniform2(-100.0..100.0f64),
        seed in any::<u64>(),
    ) {
        let values: Vec<f32> = (0..w * h * ch)
            .map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 40) as f32) / (1u64 << 24) as f32)
            .collect();
        let map = MapRaster::new(w, h, ch, res, origin, values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.grid");
        write_map_raster(&path, &map).unwrap();
        let back = load_map_raster(&path).unwrap();
        prop_assert_eq!(back.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), map.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back, map);
    }
}

#[test]
fn interior_velocity_error_is_second_order() {
    let err = |dt: f64| {
        let pos: Vec<[f64; 2]> = (0..=4)
            .map(|k| {
                let t = 1.0 + (k as f64 - 2.0) * dt;
                [t.sin(), t.cos()]
            })
            .collect();
        let s = derive_states(&pos, dt).unwrap();
        (s[2].vel[0] - 1f64.cos()).abs().max((s[2].vel[1] + 1f64.sin()).abs())
    };
    for dt in [0.2, 0.1, 0.05] {
        let ratio = err(dt) / err(dt / 2.0);
        assert!((ratio - 4.0).abs() < 0.1, "dt {dt}: ratio {ratio}");
    }
}

#[test]
fn quarter_turn_crop_is_rotated_axis_aligned_crop() {
    // asymmetric pattern, no two cells equal
    let (w, h) = (40, 30);
    let values = (0..w * h).map(|i| i as f32 / (w * h) as f32).collect();
    let map = MapRaster::new(w, h, 1, 0.5, [-10.0, -5.0], values).unwrap();
    let spec = CropSpec {
        rear_fraction: 0.5,
        ..CropSpec::new(6.0, 0.5)
    };
    let n = spec.size();
    // agent on a cell corner so sample points land on cell centers
    let p = [0.0, 2.0];
    let c0 = crop_rotate_map(&map, p, 0.0, &spec);
    let c90 = crop_rotate_map(&map, p, std::f64::consts::FRAC_PI_2, &spec);
    for row in 0..n {
        for col in 0..n {
            assert_eq!(c90.get(0, row, col), c0.get(0, col, n - 1 - row), "cell ({row}, {col})");
        }
    }
    assert_ne!(c0, c90);
}

#[test]
fn constant_dataset_has_constant_mean_and_floored_std() {
    let row = [1.5, -2.0, 0.25, 3.0, 0.0, -7.0];
    let rows = vec![row; 25];
    let stats = ClassStats::fit(rows.iter());
    assert_eq!(stats.mean, row);
    assert!(stats.std.iter().all(|&s| s == STD_FLOOR));
    assert_eq!(stats.standardize(&row), [0.0; 6]);
}

#[test]
fn synthetic_scene_survives_text_roundtrip() {
    let scene = generate_synthetic(
        &SyntheticSpec {
            scenario: Scenario::Crossing,
            agents: 12,
        },
        4,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.txt");
    write_trajectory_text(&path, &scene).unwrap();
    let back = load_trajectory_text(&path, TextFormat::Auto, scene.dt).unwrap();
    assert_eq!(back.agents.len(), scene.agents.len());
    // the loader counts timesteps from the file's first frame
    let shift = scene.agents.iter().map(|a| a.first_timestep).min().unwrap();
    for a in &scene.agents {
        let b = back.agent(&a.id).unwrap();
        assert_eq!(b.class, a.class);
        assert_eq!(b.first_timestep + shift, a.first_timestep);
        assert_eq!(b.positions, a.positions);
    }
}

#[test]
fn ego_scene_instances_carry_full_plans() {
    let scene = generate_synthetic(
        &SyntheticSpec {
            scenario: Scenario::CarFollowing,
            agents: 3,
        },
        9,
    )
    .unwrap();
    let mut opts = SliceOptions::new(table());
    opts.require_gt = true;
    let insts = all_instances(&scene, &opts).unwrap();
    assert!(!insts.is_empty());
    for i in &insts {
        assert_eq!(i.ego_future.as_ref().unwrap().len(), 4);
        assert_eq!(i.gt_future.as_ref().unwrap().len(), 4);
        assert!(i.history.len() <= 5);
        assert_ne!(i.node.0, "ego");
    }
}
