use serde::Serialize;

use super::{Dataset, RunConfig};
use crate::decoder::{decoder_forward, init_params, SceneInput};
use crate::error::Result;
use crate::losses::{total_loss, TopoLoss};
use crate::nn::{grad_check, GradCheckOptions, GradReport};
use crate::scene::{BevSpec, Category, Centerline, SceneGraph, TrafficElement};

/// Smallest configuration that still runs every module: 3 queries of 3 points,
/// width 8, 2 heads, 2 layers on an 8×6 grid.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    let m = &mut c.model;
    m.n_queries = 3;
    m.n_points = 3;
    m.d_model = 8;
    m.heads = 2;
    m.layers = 2;
    m.d_sim = 4;
    m.rel_hidden = 4;
    m.mask_dim = 4;
    m.window_radius = 1;
    c.bev = BevSpec {
        height_cells: 8,
        width_cells: 6,
        meters_per_cell: 1.0,
        lane_width: 2.0,
        feature_channels: 6,
    };
    c.gen.max_lanes = 1;
    c.loss.topo = TopoLoss::Atl;
    c.bev_noise = 0.0;
    c
}

fn line(id: usize, pts: &[[f64; 2]]) -> Centerline {
    Centerline {
        id,
        points: pts.to_vec(),
    }
}

/// A two-lane chain and a three-lane fork on the tiny grid, each with one traffic
/// element governing the entry lane.
pub fn gradcheck_scenes(spec: &BevSpec) -> Vec<SceneGraph> {
    let te = vec![TrafficElement {
        id: 0,
        bbox: [0.3, 0.2, 0.5, 0.4],
        category: Category::SignalGreen,
    }];
    let two = SceneGraph {
        centerlines: vec![
            line(0, &[[2.5, 0.5], [2.7, 2.0], [2.5, 4.0]]),
            line(1, &[[2.5, 4.0], [2.2, 6.0], [2.5, 7.5]]),
        ],
        adjacency: vec![vec![0, 1], vec![0, 0]],
        traffic: te.clone(),
        l2t: vec![vec![1], vec![0]],
        spec: spec.clone(),
    };
    let three = SceneGraph {
        centerlines: vec![
            line(0, &[[3.0, 0.5], [3.0, 3.5]]),
            line(1, &[[3.0, 3.5], [2.0, 5.5], [1.5, 7.5]]),
            line(2, &[[3.0, 3.5], [4.0, 5.5], [4.5, 7.5]]),
        ],
        adjacency: vec![vec![0, 1, 1], vec![0, 0, 0], vec![0, 0, 0]],
        traffic: te,
        l2t: vec![vec![1], vec![0], vec![0]],
        spec: spec.clone(),
    };
    vec![two, three]
}

#[derive(Clone, Debug, Serialize)]
pub struct SceneGradReport {
    pub scene: String,
    pub report: GradReport,
}

/// Central-difference check of the full composed loss on the two built-in scenes.
/// `corrupt` scales the analytic gradient (1.0 for a real check).
pub fn gradcheck(cfg: &RunConfig, corrupt: f64) -> Result<Vec<SceneGradReport>> {
    cfg.validate()?;
    let data = Dataset::new(gradcheck_scenes(&cfg.bev), cfg)?;
    // small steps: the composed loss is sharply curved and has ReLU kinks nearby
    let opts = GradCheckOptions {
        eps: 1e-5,
        max_entries: Some(16),
        corrupt,
        ..Default::default()
    };
    let mut out = Vec::new();
    for i in 0..data.len() {
        let mut store = init_params(&cfg.model, cfg.bev.feature_channels, cfg.seed)?;
        let f = |g: &mut crate::nn::Graph, s: &crate::nn::ParamStore| {
            let input = SceneInput {
                bev: data.bev[i].clone(),
                spec: &cfg.bev,
                traffic: &data.scenes[i].traffic,
                te_seed: cfg.seed,
            };
            let o = decoder_forward(g, s, &cfg.model, &input)?;
            Ok(total_loss(g, &o, &data.targets[i], &cfg.model, &cfg.loss)?.total)
        };
        let report = grad_check(&mut store, f, &opts)?;
        out.push(SceneGradReport {
            scene: format!("{}-instance", data.scenes[i].num_lines()),
            report,
        });
    }
    Ok(out)
}
