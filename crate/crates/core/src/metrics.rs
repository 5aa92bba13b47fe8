//! Detection and topology scores: DET_l, DET_t, TOP_ll, TOP_lt and their aggregate.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist, resample, Point};
use crate::scene::{Category, SceneGraph};

/// Fréchet thresholds in meters for DET_l; the middle one also fixes the matching
/// used by the topology scores.
pub const DET_L_THRESHOLDS: [f64; 3] = [1.0, 1.5, 2.0];
pub const DET_T_IOU: f64 = 0.75;

/// Discrete Fréchet distance.
pub fn frechet(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("frechet of an empty polyline".into()));
    }
    let m = b.len();
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for (i, pa) in a.iter().enumerate() {
        for (j, pb) in b.iter().enumerate() {
            let d = dist(*pa, *pb);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => cur[j - 1].max(d),
                (_, 0) => prev[0].max(d),
                _ => prev[j].min(prev[j - 1]).min(cur[j - 1]).max(d),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// All-point interpolated AP of a ranked list of hits against `n_gt` positives.
/// `None` when there is nothing to retrieve.
pub fn average_precision(ranked_hits: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut prec = Vec::with_capacity(ranked_hits.len());
    let mut rec = Vec::with_capacity(ranked_hits.len());
    let mut tp = 0usize;
    for (k, &hit) in ranked_hits.iter().enumerate() {
        tp += usize::from(hit);
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    // precision envelope from the right
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last = 0.0;
    for k in 0..prec.len() {
        if rec[k] > last {
            ap += (rec[k] - last) * prec[k];
            last = rec[k];
        }
    }
    Some(ap)
}

/// Indices sorted by descending score, ties by ascending index.
fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Greedy confidence-descending one-to-one matching: each prediction takes the
/// closest free ground truth with `cost <= thresh`. `cost` is `preds × gts`.
/// Returns the matched ground truth of every prediction.
pub fn greedy_match(scores: &[f64], cost: &[Vec<f64>], thresh: f64, higher_is_better: bool) -> Vec<Option<usize>> {
    let n_gt = cost.first().map_or(0, Vec::len);
    let mut taken = vec![false; n_gt];
    let mut out = vec![None; scores.len()];
    for i in rank(scores) {
        let mut best: Option<usize> = None;
        for j in 0..n_gt {
            let c = cost[i][j];
            let ok = if higher_is_better { c >= thresh } else { c <= thresh };
            if taken[j] || !ok {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) if higher_is_better => c > cost[i][b],
                Some(b) => c < cost[i][b],
            };
            if better {
                best = Some(j);
            }
        }
        if let Some(j) = best {
            taken[j] = true;
            out[i] = Some(j);
        }
    }
    out
}

fn ap_of_matching(scores: &[f64], matched: &[Option<usize>], n_gt: usize) -> Option<f64> {
    let hits: Vec<bool> = rank(scores).into_iter().map(|i| matched[i].is_some()).collect();
    average_precision(&hits, n_gt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanePred {
    pub points: Vec<Point>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficPred {
    pub bbox: [f64; 4],
    pub category: Category,
    pub score: f64,
}

/// Decoded predictions for one scene. `l2l` is `lanes × lanes` and `l2t` is
/// `lanes × traffic`, both probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub lanes: Vec<LanePred>,
    pub l2l: Vec<Vec<f64>>,
    pub traffic: Vec<TrafficPred>,
    pub l2t: Vec<Vec<f64>>,
}

impl ScenePrediction {
    /// The ground truth restated as a prediction with unit confidence.
    pub fn from_ground_truth(scene: &SceneGraph) -> Self {
        let f = |m: &Vec<Vec<u8>>| m.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect();
        Self {
            lanes: scene
                .centerlines
                .iter()
                .map(|c| LanePred {
                    points: c.points.clone(),
                    score: 1.0,
                })
                .collect(),
            l2l: f(&scene.adjacency),
            traffic: scene
                .traffic
                .iter()
                .map(|t| TrafficPred {
                    bbox: t.bbox,
                    category: t.category,
                    score: 1.0,
                })
                .collect(),
            l2t: f(&scene.l2t),
        }
    }
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// `preds × gts` Fréchet distances with ground truth resampled to the prediction's
/// point count.
fn frechet_matrix(pred: &ScenePrediction, gt: &SceneGraph) -> Result<Vec<Vec<f64>>> {
    pred.lanes
        .iter()
        .map(|l| {
            gt.centerlines
                .iter()
                .map(|c| frechet(&l.points, &resample(&c.points, l.points.len().max(2))))
                .collect()
        })
        .collect()
}

/// DET_l per threshold and the lane matching at the middle threshold (gt → pred).
pub fn det_l(pred: &ScenePrediction, gt: &SceneGraph) -> Result<(Option<[f64; 3]>, Vec<Option<usize>>)> {
    let cost = frechet_matrix(pred, gt)?;
    let scores: Vec<f64> = pred.lanes.iter().map(|l| l.score).collect();
    let g = gt.num_lines();
    let mut aps = [0.0; 3];
    let mut gt_to_pred = vec![None; g];
    for (k, &t) in DET_L_THRESHOLDS.iter().enumerate() {
        let m = greedy_match(&scores, &cost, t, false);
        match ap_of_matching(&scores, &m, g) {
            Some(ap) => aps[k] = ap,
            None => return Ok((None, gt_to_pred)),
        }
        if k == 1 {
            for (i, j) in m.iter().enumerate() {
                if let Some(j) = j {
                    gt_to_pred[*j] = Some(i);
                }
            }
        }
    }
    Ok((Some(aps), gt_to_pred))
}

/// DET_t (macro AP over categories present in the ground truth) and the traffic
/// matching (gt → pred).
pub fn det_t(pred: &ScenePrediction, gt: &SceneGraph) -> (Option<f64>, Vec<Option<usize>>) {
    let mut gt_to_pred = vec![None; gt.num_traffic()];
    let mut aps = Vec::new();
    for cat in Category::ALL {
        let pi: Vec<usize> = (0..pred.traffic.len()).filter(|&i| pred.traffic[i].category == cat).collect();
        let gi: Vec<usize> = (0..gt.num_traffic()).filter(|&j| gt.traffic[j].category == cat).collect();
        if gi.is_empty() {
            continue;
        }
        let scores: Vec<f64> = pi.iter().map(|&i| pred.traffic[i].score).collect();
        let cost: Vec<Vec<f64>> = pi
            .iter()
            .map(|&i| gi.iter().map(|&j| iou(&pred.traffic[i].bbox, &gt.traffic[j].bbox)).collect())
            .collect();
        let m = greedy_match(&scores, &cost, DET_T_IOU, true);
        for (a, j) in m.iter().enumerate() {
            if let Some(j) = j {
                gt_to_pred[gi[*j]] = Some(pi[a]);
            }
        }
        aps.extend(ap_of_matching(&scores, &m, gi.len()));
    }
    let v = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
    (v, gt_to_pred)
}

/// Ranked incident-edge AP averaged over vertices with at least one true edge.
///
/// `gt[r][c]` is a bipartite (or square) relation; rows and columns are vertices
/// of their own. A vertex's list holds every projected edge touching it, scored by
/// `prob(r, c)` (`None` when either endpoint is unmatched, which drops the edge).
fn ranked_edge_ap(gt: &[Vec<u8>], cols: usize, prob: impl Fn(usize, usize) -> Option<f64>, square: bool) -> Option<f64> {
    let rows = gt.len();
    let edge_list = |edges: Vec<(usize, usize)>| {
        let n_gt = edges.iter().filter(|&&(r, c)| gt[r][c] == 1).count();
        if n_gt == 0 {
            return None;
        }
        let mut scored: Vec<(f64, usize, bool)> = edges
            .into_iter()
            .filter_map(|(r, c)| prob(r, c).map(|p| (p, r * cols + c, gt[r][c] == 1)))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let hits: Vec<bool> = scored.iter().map(|s| s.2).collect();
        average_precision(&hits, n_gt)
    };
    let mut aps = Vec::new();
    if square {
        for v in 0..rows {
            let mut e: Vec<(usize, usize)> = (0..cols).filter(|&u| u != v).map(|u| (v, u)).collect();
            e.extend((0..rows).filter(|&u| u != v).map(|u| (u, v)));
            aps.extend(edge_list(e));
        }
    } else {
        for r in 0..rows {
            aps.extend(edge_list((0..cols).map(|c| (r, c)).collect()));
        }
        for c in 0..cols {
            aps.extend(edge_list((0..rows).map(|r| (r, c)).collect()));
        }
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// TOP_ll from predicted lane-lane probabilities and the lane matching (gt → pred).
pub fn top_ll(l2l: &[Vec<f64>], lane_match: &[Option<usize>], gt_adj: &[Vec<u8>]) -> Option<f64> {
    let g = gt_adj.len();
    ranked_edge_ap(
        gt_adj,
        g,
        |r, c| match (lane_match[r], lane_match[c]) {
            (Some(a), Some(b)) => Some(l2l[a][b]),
            _ => None,
        },
        true,
    )
}

/// TOP_lt over the bipartite lane × traffic graph.
pub fn top_lt(
    l2t: &[Vec<f64>],
    lane_match: &[Option<usize>],
    te_match: &[Option<usize>],
    gt_l2t: &[Vec<u8>],
) -> Option<f64> {
    let m = te_match.len();
    ranked_edge_ap(
        gt_l2t,
        m,
        |r, c| match (lane_match[r], te_match[c]) {
            (Some(a), Some(b)) => Some(l2t[a][b]),
            _ => None,
        },
        false,
    )
}

pub fn ols_mean(det_l: f64, det_t: f64, top_ll: f64, top_lt: f64) -> f64 {
    (det_l + det_t + top_ll + top_lt) / 4.0
}

pub fn ols_sqrt(det_l: f64, det_t: f64, top_ll: f64, top_lt: f64) -> f64 {
    (det_l + det_t + top_ll.sqrt() + top_lt.sqrt()) / 4.0
}

/// Scores of one scene; `None` where the scene has nothing to score.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneScores {
    pub det_l: Option<f64>,
    pub det_l_at: Option<[f64; 3]>,
    pub det_t: Option<f64>,
    pub top_ll: Option<f64>,
    pub top_lt: Option<f64>,
}

pub fn evaluate_scene(pred: &ScenePrediction, gt: &SceneGraph) -> Result<SceneScores> {
    let (at, lane_match) = det_l(pred, gt)?;
    let (dt, te_match) = det_t(pred, gt);
    Ok(SceneScores {
        det_l: at.map(|a| a.iter().sum::<f64>() / 3.0),
        det_l_at: at,
        det_t: dt,
        top_ll: top_ll(&pred.l2l, &lane_match, &gt.adjacency),
        top_lt: top_lt(&pred.l2t, &lane_match, &te_match, &gt.l2t),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub det_l: f64,
    /// DET_l at each threshold, keyed by the threshold in meters.
    pub det_l_at: Vec<(f64, f64)>,
    pub det_t: f64,
    pub top_ll: f64,
    pub top_lt: f64,
    pub ols_mean: f64,
    pub ols_sqrt: f64,
    pub per_scene: Vec<SceneScores>,
}

fn mean_some(v: impl Iterator<Item = Option<f64>>) -> f64 {
    let (s, n) = v.flatten().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    /// Scene-level averages; scenes without anything to score for a metric are
    /// left out of that metric's mean.
    pub fn aggregate(per_scene: Vec<SceneScores>) -> Self {
        let det_l = mean_some(per_scene.iter().map(|s| s.det_l));
        let det_l_at = (0..3)
            .map(|k| (DET_L_THRESHOLDS[k], mean_some(per_scene.iter().map(|s| s.det_l_at.map(|a| a[k])))))
            .collect();
        let det_t = mean_some(per_scene.iter().map(|s| s.det_t));
        let top_ll = mean_some(per_scene.iter().map(|s| s.top_ll));
        let top_lt = mean_some(per_scene.iter().map(|s| s.top_lt));
        Self {
            scenes: per_scene.len(),
            det_l,
            det_l_at,
            det_t,
            top_ll,
            top_lt,
            ols_mean: ols_mean(det_l, det_t, top_ll, top_lt),
            ols_sqrt: ols_sqrt(det_l, det_t, top_ll, top_lt),
            per_scene,
        }
    }

    /// One row per scene; missing values are empty fields.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let mut s = String::from("scene,det_l,det_l_1.0,det_l_1.5,det_l_2.0,det_t,top_ll,top_lt\n");
        for (i, r) in self.per_scene.iter().enumerate() {
            let at = |k: usize| f(r.det_l_at.map(|a| a[k]));
            let _ = writeln!(
                s,
                "{i},{},{},{},{},{},{},{}",
                f(r.det_l),
                at(0),
                at(1),
                at(2),
                f(r.det_t),
                f(r.top_ll),
                f(r.top_lt)
            );
        }
        s
    }

    /// Parses [`EvalReport::to_csv`] output back into per-scene scores.
    pub fn scores_from_csv(csv: &str) -> Result<Vec<SceneScores>> {
        let parse = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| Error::Input(format!("csv field {s:?}: {e}")))
            }
        };
        let mut out = Vec::new();
        for line in csv.lines().skip(1).filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Input(format!("csv row {line:?}")));
            }
            let at = [parse(f[2])?, parse(f[3])?, parse(f[4])?];
            out.push(SceneScores {
                det_l: parse(f[1])?,
                det_l_at: match at {
                    [Some(a), Some(b), Some(c)] => Some([a, b, c]),
                    _ => None,
                },
                det_t: parse(f[5])?,
                top_ll: parse(f[6])?,
                top_lt: parse(f[7])?,
            });
        }
        Ok(out)
    }
}
