use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BevSpec, Category, Centerline, SceneGraph, TrafficElement};
use crate::error::{Error, Result};
use crate::geometry::{dist, Point};

/// Generator settings. Lanes run along +y in parallel corridors spaced
/// `lane_width + 1` meters apart; a corridor may split into two successive
/// centerlines, and a split point may sprout a fork or receive a merge from a
/// free neighbouring corridor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub min_lanes: usize,
    pub max_lanes: usize,
    pub split_prob: f64,
    pub fork_prob: f64,
    pub merge_prob: f64,
    /// Bound on lateral wiggle of a corridor, meters.
    pub curvature: f64,
    pub points_per_line: usize,
    pub min_traffic: usize,
    pub max_traffic: usize,
    /// Forces at least one connected pair per scene.
    pub topology_rich: bool,
    pub connection_tolerance: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            min_lanes: 1,
            max_lanes: 3,
            split_prob: 0.6,
            fork_prob: 0.5,
            merge_prob: 0.3,
            curvature: 0.5,
            points_per_line: 20,
            min_traffic: 1,
            max_traffic: 3,
            topology_rich: true,
            connection_tolerance: 0.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self, spec: &BevSpec) -> Result<()> {
        spec.validate()?;
        let probs = [self.split_prob, self.fork_prob, self.merge_prob];
        if self.min_lanes == 0
            || self.max_lanes < self.min_lanes
            || self.points_per_line < 2
            || self.max_traffic < self.min_traffic
            || probs.iter().any(|p| !(0.0..=1.0).contains(p))
            || !(self.curvature >= 0.0)
            || !(self.connection_tolerance > 0.0)
        {
            return Err(Error::Config(format!("invalid generator config {self:?}")));
        }
        if self.max_lanes > slot_count(spec) {
            return Err(Error::Config(format!(
                "{} lanes requested but the BEV fits {}",
                self.max_lanes,
                slot_count(spec)
            )));
        }
        Ok(())
    }
}

fn slot_spacing(spec: &BevSpec) -> f64 {
    spec.lane_width + 1.0
}

fn slot_count(spec: &BevSpec) -> usize {
    (spec.width_m() / slot_spacing(spec)).floor() as usize
}

fn slot_x(spec: &BevSpec, k: usize) -> f64 {
    let s = slot_spacing(spec);
    let margin = (spec.width_m() - slot_count(spec) as f64 * s) / 2.0;
    margin + (k as f64 + 0.5) * s
}

/// Lateral position of a corridor as a function of y.
#[derive(Clone, Copy)]
struct Corridor {
    x0: f64,
    b: [f64; 3],
    h: f64,
}

impl Corridor {
    fn x(&self, y: f64) -> f64 {
        let t = y / self.h;
        self.x0 + self.b[0] + self.b[1] * (t - 0.5) + self.b[2] * 4.0 * t * (1.0 - t)
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn sample_curve(n: usize, y0: f64, y1: f64, f: impl Fn(f64) -> f64) -> Vec<Point> {
    (0..n)
        .map(|i| {
            let y = y0 + (y1 - y0) * i as f64 / (n - 1) as f64;
            [f(y), y]
        })
        .collect()
}

/// Deterministic scene for `seed`.
pub fn sample_scene(seed: u64, cfg: &GenConfig, spec: &BevSpec) -> Result<SceneGraph> {
    cfg.validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = spec.height_m();
    let n_slots = slot_count(spec);
    let n_lanes = rng.gen_range(cfg.min_lanes..=cfg.max_lanes);
    let mut slots: Vec<usize> = (0..n_slots).collect();
    slots.shuffle(&mut rng);
    let mut used = vec![false; n_slots];
    let mut chosen: Vec<usize> = slots[..n_lanes].to_vec();
    chosen.sort_unstable();
    for &k in &chosen {
        used[k] = true;
    }

    // wiggle budget split over the three shape terms: |b0| + |b1|/2 + |b2| <= curvature
    let c = cfg.curvature;
    let corridors: Vec<Corridor> = (0..n_slots)
        .map(|k| {
            let b = if c > 0.0 {
                [
                    rng.gen_range(-c / 3.0..=c / 3.0),
                    rng.gen_range(-2.0 * c / 3.0..=2.0 * c / 3.0),
                    rng.gen_range(-c / 3.0..=c / 3.0),
                ]
            } else {
                [0.0; 3]
            };
            Corridor {
                x0: slot_x(spec, k),
                b,
                h,
            }
        })
        .collect();

    let mut splits: Vec<bool> = chosen.iter().map(|_| rng.gen_bool(cfg.split_prob)).collect();
    if cfg.topology_rich && !splits.iter().any(|&s| s) {
        splits[0] = true;
    }

    let n = cfg.points_per_line;
    let mut lines: Vec<Vec<Point>> = Vec::new();
    for (ci, &k) in chosen.iter().enumerate() {
        let cor = corridors[k];
        if !splits[ci] {
            lines.push(sample_curve(n, 0.0, h, |y| cor.x(y)));
            continue;
        }
        let ys = rng.gen_range(0.3 * h..=0.7 * h);
        let xs = cor.x(ys);
        lines.push(sample_curve(n, 0.0, ys, |y| cor.x(y)));
        lines.push(sample_curve(n, ys, h, |y| cor.x(y)));
        let mut neighbours: Vec<usize> = [k.wrapping_sub(1), k + 1]
            .into_iter()
            .filter(|&j| j < n_slots)
            .collect();
        neighbours.shuffle(&mut rng);
        let fork = rng.gen_bool(cfg.fork_prob);
        let merge = rng.gen_bool(cfg.merge_prob);
        if fork {
            if let Some(&j) = neighbours.iter().find(|&&j| !used[j]) {
                used[j] = true;
                let nb = corridors[j];
                lines.push(sample_curve(n, ys, h, |y| {
                    xs + (nb.x(y) - xs) * smoothstep((y - ys) / (h - ys))
                }));
            }
        }
        if merge {
            if let Some(&j) = neighbours.iter().find(|&&j| !used[j]) {
                used[j] = true;
                let nb = corridors[j];
                lines.push(sample_curve(n, 0.0, ys, |y| {
                    nb.x(y) + (xs - nb.x(y)) * smoothstep(y / ys)
                }));
            }
        }
    }

    let centerlines: Vec<Centerline> = lines
        .into_iter()
        .enumerate()
        .map(|(id, points)| Centerline { id, points })
        .collect();
    let g = centerlines.len();
    let mut adjacency = vec![vec![0u8; g]; g];
    for i in 0..g {
        for j in 0..g {
            if i != j
                && dist(centerlines[i].end(), centerlines[j].start()) <= cfg.connection_tolerance
            {
                adjacency[i][j] = 1;
            }
        }
    }

    let m = rng.gen_range(cfg.min_traffic..=cfg.max_traffic);
    let w = spec.width_m();
    let entries: Vec<f64> = centerlines
        .iter()
        .filter(|c| c.start()[1] <= cfg.connection_tolerance)
        .map(|c| c.start()[0] / w)
        .collect();
    let mut traffic = Vec::with_capacity(m);
    for id in 0..m {
        let bw = rng.gen_range(0.12..0.3);
        let cx = if !entries.is_empty() && rng.gen_bool(0.75) {
            entries[rng.gen_range(0..entries.len())] + rng.gen_range(-0.3 * bw..0.3 * bw)
        } else {
            rng.gen_range(0.0..1.0)
        };
        let x0 = (cx - bw / 2.0).clamp(0.0, 1.0 - bw);
        let y0 = rng.gen_range(0.1..0.6);
        let bh = rng.gen_range(0.1..0.3);
        let category = Category::ALL[rng.gen_range(0..Category::ALL.len())];
        traffic.push(TrafficElement {
            id,
            bbox: [x0, y0, x0 + bw, y0 + bh],
            category,
        });
    }
    // an element governs every entry lane whose start lies under its horizontal span
    let l2t = centerlines
        .iter()
        .map(|c| {
            traffic
                .iter()
                .map(|t| {
                    let u = c.start()[0] / w;
                    u8::from(c.start()[1] <= cfg.connection_tolerance && u >= t.bbox[0] && u <= t.bbox[2])
                })
                .collect()
        })
        .collect();

    Ok(SceneGraph {
        centerlines,
        adjacency,
        traffic,
        l2t,
        spec: spec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_straight_lane_has_no_edges() {
        let cfg = GenConfig {
            min_lanes: 1,
            max_lanes: 1,
            split_prob: 0.0,
            fork_prob: 0.0,
            merge_prob: 0.0,
            curvature: 0.0,
            topology_rich: false,
            ..Default::default()
        };
        let s = sample_scene(7, &cfg, &BevSpec::default()).unwrap();
        assert_eq!(s.num_lines(), 1);
        assert_eq!(s.adjacency, vec![vec![0]]);
        let xs: Vec<f64> = s.centerlines[0].points.iter().map(|p| p[0]).collect();
        assert!(xs.iter().all(|&x| x == xs[0]));
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = GenConfig::default();
        let a = sample_scene(11, &cfg, &BevSpec::default()).unwrap().to_json().unwrap();
        let b = sample_scene(11, &cfg, &BevSpec::default()).unwrap().to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_lanes_is_config_error() {
        let cfg = GenConfig {
            min_lanes: 0,
            ..Default::default()
        };
        assert!(matches!(
            sample_scene(0, &cfg, &BevSpec::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rich_scenes_have_an_edge() {
        for seed in 0..50 {
            let s = sample_scene(seed, &GenConfig::default(), &BevSpec::default()).unwrap();
            assert!(s.num_edges() >= 1);
            s.validate(0.5).unwrap();
        }
    }
}
