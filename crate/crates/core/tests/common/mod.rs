#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajectron::config::{MapEncoderConfig, ModelConfig};
use trajectron::data::raster::{CropSpec, MapRaster};
use trajectron::data::standardize::{StandardizationStats, StandardizedInstance};
use trajectron::model::Model;
use trajectron::nn::{GradRecord, ParamStore};
use trajectron::scene::{
    slice_instances, AgentClass, AgentId, AgentNode, ClassSpec, ClassTable, EdgeType, PredictionInstance, Scene,
    SliceOptions,
};

/// Worst mismatch between analytical and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with a denominator floor so entries whose true gradient is
/// at the roundoff level of the difference quotient do not dominate.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central finite differences of `loss` over every scalar in `store`
/// (or only parameters whose name passes `filter`).
pub fn finite_difference_check(
    store: &ParamStore,
    grads: &GradRecord,
    step: f64,
    floor: f64,
    filter: impl Fn(&str) -> bool,
    loss: impl Fn(&ParamStore) -> f64,
) -> GradCheck {
    fd_check(store, grads, step, floor, filter, loss, false)
}

/// Same as [`finite_difference_check`] with the five-point central stencil,
/// whose O(h^4) truncation error allows a larger step and so far less
/// cancellation noise on big objectives.
pub fn finite_difference_check_o4(
    store: &ParamStore,
    grads: &GradRecord,
    step: f64,
    floor: f64,
    filter: impl Fn(&str) -> bool,
    loss: impl Fn(&ParamStore) -> f64,
) -> GradCheck {
    fd_check(store, grads, step, floor, filter, loss, true)
}

fn fd_check(
    store: &ParamStore,
    grads: &GradRecord,
    step: f64,
    floor: f64,
    filter: impl Fn(&str) -> bool,
    loss: impl Fn(&ParamStore) -> f64,
    fourth_order: bool,
) -> GradCheck {
    let mut work = store.clone();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst_param: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if !filter(&name) {
            continue;
        }
        let n = store.value(id).len();
        for k in 0..n {
            let orig = store.value(id).as_slice().unwrap()[k];
            let mut at = |x: f64| {
                work.value_mut(id).as_slice_mut().unwrap()[k] = x;
                loss(&work)
            };
            let numeric = if fourth_order {
                let (u1, d1) = (at(orig + step), at(orig - step));
                let (u2, d2) = (at(orig + 2.0 * step), at(orig - 2.0 * step));
                (8.0 * (u1 - d1) - (u2 - d2)) / (12.0 * step)
            } else {
                (at(orig + step) - at(orig - step)) / (2.0 * step)
            };
            work.value_mut(id).as_slice_mut().unwrap()[k] = orig;
            let analytic = grads.get(id).as_slice().unwrap()[k];
            let e = rel_err(analytic, numeric, floor);
            out.checked += 1;
            if e > out.max_rel_err {
                out.max_rel_err = e;
                out.worst_param = format!("{name}[{k}]");
                out.analytic = analytic;
                out.numeric = numeric;
            }
        }
    }
    out
}

pub fn pedestrian_table(range: f64, history: usize, horizon: usize) -> ClassTable {
    ClassTable::default().with(
        AgentClass::Pedestrian,
        ClassSpec {
            perception_range: range,
            history,
            horizon,
        },
    )
}

pub fn ped() -> AgentClass {
    AgentClass::Pedestrian
}

/// Four pedestrians (one of them the ego) walking near each other over a
/// random occupancy map.
pub fn mini_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 0.4;
    let agents = ["a", "b", "c", "robot"]
        .iter()
        .map(|name| {
            let p0 = [rng.random_range(6.0..12.0), rng.random_range(6.0..12.0)];
            let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let positions = (0..10)
                .map(|k| {
                    let k = k as f64;
                    [
                        p0[0] + v[0] * k * dt + 0.05 * rng.random::<f64>(),
                        p0[1] + v[1] * k * dt + 0.05 * rng.random::<f64>(),
                    ]
                })
                .collect();
            AgentNode::new(AgentId::new(*name), ped(), 0, positions, dt).unwrap()
        })
        .collect();
    let values = (0..40 * 40).map(|_| rng.random::<f32>()).collect();
    let map = MapRaster::new(40, 40, 1, 0.5, [0.0, 0.0], values).unwrap();
    Scene::new("mini", dt, agents)
        .unwrap()
        .with_map(map)
        .with_ego(AgentId::new("robot"))
        .unwrap()
}

pub fn mini_config() -> ModelConfig {
    ModelConfig {
        classes: pedestrian_table(50.0, 3, 3),
        node_classes: vec![ped()],
        edge_types: vec![EdgeType::new(ped(), ped())],
        latent_size: 3,
        history_hidden: 4,
        edge_hidden: 4,
        attention_dim: 4,
        future_hidden: 4,
        decoder_hidden: 8,
        mixture_components: 2,
        sigma_min: 1e-3,
        rho_max: 0.999,
        min_history: 2,
        use_edges: true,
        use_map: true,
        use_robot: true,
        map: MapEncoderConfig {
            crop: CropSpec::new(6.0, 0.5),
            channels: 1,
            conv_channels: [2, 2, 2],
            kernel: 3,
            strides: [1, 2, 1],
            dense: 4,
        },
    }
}

/// Random full model and a batch of two instances with neighbours, map crops
/// and ego plans.
pub fn mini_setup(seed: u64) -> (Model, Vec<StandardizedInstance>, Vec<PredictionInstance>) {
    let cfg = mini_config();
    let scene = mini_scene(seed);
    let mut opts = SliceOptions::new(cfg.classes.clone());
    opts.require_gt = true;
    opts.map = Some(cfg.map.crop);
    let insts: Vec<PredictionInstance> = slice_instances(&scene, 4, &opts).unwrap().into_iter().take(2).collect();
    assert_eq!(insts.len(), 2);
    for i in &insts {
        assert!(!i.neighbors.is_empty() && i.map_crop.is_some() && i.ego_future.is_some());
        assert_eq!(i.map_crop.as_ref().unwrap().size, 12);
    }
    let stats = StandardizationStats::fit(&insts);
    let model = Model::new(cfg, stats, seed).unwrap();
    let std: Vec<StandardizedInstance> = insts.iter().map(|i| model.standardize(i).unwrap()).collect();
    (model, std, insts)
}
