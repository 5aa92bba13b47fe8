use serde::Serialize;

use super::{ddt_seg_loss, dt_seg_loss, focal_loss, hungarian, topo_loss, LossConfig, DICE_SMOOTH};
use crate::decoder::{DecoderOutput, LayerOutput, ModelConfig, SegSupervision};
use crate::error::{Error, Result};
use crate::geometry::{resample, Point};
use crate::nn::{Graph, Tensor, Var};
use crate::scene::{ddt_mask, distance_field, SceneGraph, DDT_CLASSES};

/// Per-scene supervision, prepared once and reused every step.
#[derive(Clone, Debug)]
pub struct SceneTargets {
    /// Every centerline resampled to `P` points, normalized by the BEV extent.
    pub points: Vec<Vec<Point>>,
    pub ddt: Vec<Vec<u8>>,
    pub dt: Vec<Vec<f64>>,
    pub adjacency: Vec<Vec<u8>>,
    pub l2t: Vec<Vec<u8>>,
    /// `[M×4]` boxes and category ids, in scene order.
    pub boxes: Vec<[f64; 4]>,
    pub categories: Vec<usize>,
    pub cells: usize,
    /// BEV width and height in meters.
    pub extent: [f64; 2],
}

impl SceneTargets {
    pub fn new(scene: &SceneGraph, n_points: usize) -> Result<Self> {
        let spec = &scene.spec;
        let (w, h) = (spec.width_m(), spec.height_m());
        let mut points = Vec::new();
        let mut ddt = Vec::new();
        let mut dt = Vec::new();
        for line in &scene.centerlines {
            let r = resample(&line.points, n_points);
            points.push(r.iter().map(|p| [p[0] / w, p[1] / h]).collect());
            ddt.push(ddt_mask(line, spec)?.classes);
            dt.push(distance_field(line, spec)?);
        }
        Ok(Self {
            points,
            ddt,
            dt,
            adjacency: scene.adjacency.clone(),
            l2t: scene.l2t.clone(),
            boxes: scene.traffic.iter().map(|t| t.bbox).collect(),
            categories: scene.traffic.iter().map(|t| t.category.index()).collect(),
            cells: spec.cells(),
            extent: [w, h],
        })
    }

    pub fn num_lines(&self) -> usize {
        self.points.len()
    }

    fn binary_classes(&self, g: usize) -> Vec<u8> {
        self.ddt[g].iter().map(|&c| if c < 5 { 0 } else { 5 }).collect()
    }
}

fn log_softmax_rows(t: &Tensor) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.len());
    for r in 0..t.rows() {
        let row = t.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// Log-probabilities and probabilities of every query's mask, with per-class
/// probability mass, computed once per layer for the matching cost.
struct MaskStats {
    ls: Vec<f64>,
    pr: Vec<f64>,
    /// `[N×classes]` summed probabilities over cells.
    mass: Vec<f64>,
}

impl MaskStats {
    fn new(t: &Tensor, n: usize) -> Self {
        let ls = log_softmax_rows(t);
        let pr: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
        let per_q = pr.len() / n;
        let mut mass = vec![0.0; n * DDT_CLASSES];
        for q in 0..n {
            for (i, v) in pr[q * per_q..(q + 1) * per_q].iter().enumerate() {
                mass[q * DDT_CLASSES + i % DDT_CLASSES] += v;
            }
        }
        Self { ls, pr, mass }
    }
}

/// Value-only segmentation cost of query `q` against line `gt`, mirroring the loss.
fn seg_cost(m: &MaskStats, q: usize, gt: usize, t: &SceneTargets, mode: SegSupervision) -> f64 {
    let cells = t.cells;
    let span = q * cells * DDT_CLASSES..(q + 1) * cells * DDT_CLASSES;
    let (block, prob) = (&m.ls[span.clone()], &m.pr[span]);
    if mode == SegSupervision::Dt {
        let mut s = 0.0;
        for c in 0..cells {
            let u: f64 = (0..DDT_CLASSES)
                .map(|k| prob[c * DDT_CLASSES + k] * (k as f64 + 0.5) / DDT_CLASSES as f64)
                .sum();
            s += (u - t.dt[gt][c]).abs();
        }
        return s / cells as f64;
    }
    let binary = mode == SegSupervision::Binary;
    let mut ce = 0.0;
    let mut inter = [0.0; DDT_CLASSES];
    let mut sy = [0.0; DDT_CLASSES];
    for (c, &y) in t.ddt[gt].iter().enumerate() {
        let y = if binary && y < 5 { 0 } else if binary { 5 } else { y as usize };
        ce -= block[c * DDT_CLASSES + y];
        inter[y] += prob[c * DDT_CLASSES + y];
        sy[y] += 1.0;
    }
    let sp = &m.mass[q * DDT_CLASSES..(q + 1) * DDT_CLASSES];
    let dice: f64 = (0..DDT_CLASSES)
        .map(|k| (2.0 * inter[k] + DICE_SMOOTH) / (sp[k] + sy[k] + DICE_SMOOTH))
        .sum::<f64>()
        / DDT_CLASSES as f64;
    ce / cells as f64 + 1.0 - dice
}

/// Optimal query for every ground-truth line of one decoder layer, as
/// `(query, line)` pairs in line order.
pub fn match_layer(
    g: &Graph,
    layer: &LayerOutput,
    targets: &SceneTargets,
    model: &ModelConfig,
    cfg: &LossConfig,
) -> Result<Vec<(usize, usize)>> {
    let (n, p) = (model.n_queries, model.n_points);
    let gt = targets.num_lines();
    if gt > n {
        return Err(Error::Capacity { gt, queries: n });
    }
    if gt == 0 {
        return Ok(Vec::new());
    }
    let cls = g.value(layer.cls);
    let pts = g.value(layer.points);
    let [w, h] = targets.extent;
    let ls = layer.ddt.map(|d| MaskStats::new(g.value(d), n));
    let mut cost = vec![0.0; gt * n];
    for j in 0..gt {
        for q in 0..n {
            let prob = 1.0 / (1.0 + (-cls.data()[q]).exp());
            let mut l1 = 0.0;
            for (k, tp) in targets.points[j].iter().enumerate() {
                let row = pts.row(q * p + k);
                l1 += (row[0] / w - tp[0]).abs() + (row[1] / h - tp[1]).abs();
            }
            let mut c = -cfg.lambda_cls * prob + cfg.lambda_reg * l1 / p as f64;
            if let Some(ls) = &ls {
                c += cfg.lambda_mask * seg_cost(ls, q, j, targets, model.seg_supervision);
            }
            cost[j * n + q] = c;
        }
    }
    let cols = hungarian(&cost, gt, n)?;
    Ok(cols.into_iter().enumerate().map(|(j, q)| (q, j)).collect())
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub seg: f64,
    pub topo_l2l: f64,
    pub topo_l2t: f64,
    pub te: f64,
    pub total: f64,
    /// Objective of each supervised layer, before the traffic term.
    pub layer_totals: Vec<f64>,
}

pub struct LossOutput {
    pub total: Var,
    pub parts: LossBreakdown,
    /// `(query, line)` pairs of the last layer.
    pub assignment: Vec<(usize, usize)>,
}

fn zero(g: &mut Graph) -> Var {
    g.input(Tensor::scalar(0.0))
}

/// Lane-lane labels for the queries: `adj(line(i), line(j))` when both are matched.
fn l2l_labels(assign: &[(usize, usize)], t: &SceneTargets, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * n];
    for &(qi, gi) in assign {
        for &(qj, gj) in assign {
            y[qi * n + qj] = f64::from(t.adjacency[gi][gj]);
        }
    }
    y
}

fn l2t_labels(assign: &[(usize, usize)], t: &SceneTargets, n: usize) -> Vec<f64> {
    let m = t.boxes.len();
    let mut y = vec![0.0; n * m];
    for &(q, gi) in assign {
        for k in 0..m {
            y[q * m + k] = f64::from(t.l2t[gi][k]);
        }
    }
    y
}

/// Instance labels repeated for each of the `p` point rows.
fn per_point(labels: &[f64], cols: usize, p: usize) -> Vec<f64> {
    labels
        .chunks(cols)
        .flat_map(|row| std::iter::repeat(row).take(p).flatten().copied())
        .collect()
}

struct LayerLoss {
    total: Var,
    parts: LossBreakdown,
    assign: Vec<(usize, usize)>,
}

fn layer_loss(
    g: &mut Graph,
    layer: &LayerOutput,
    t: &SceneTargets,
    model: &ModelConfig,
    cfg: &LossConfig,
) -> Result<LayerLoss> {
    let (n, p) = (model.n_queries, model.n_points);
    let assign = match_layer(g, layer, t, model, cfg)?;
    let k = assign.len();

    let mut cls_y = vec![0.0; n];
    for &(q, _) in &assign {
        cls_y[q] = 1.0;
    }
    let cls = focal_loss(g, layer.cls, &cls_y, cfg.focal_alpha, cfg.focal_gamma)?;

    let (reg, seg) = if k == 0 {
        (zero(g), zero(g))
    } else {
        let rows: Vec<usize> = assign.iter().flat_map(|&(q, _)| q * p..(q + 1) * p).collect();
        let inv = g.input(Tensor::new(vec![2], vec![1.0 / t.extent[0], 1.0 / t.extent[1]])?);
        let pts = g.gather_rows(layer.points, rows.clone())?;
        let pts = g.mul_row(pts, inv)?;
        let gt: Vec<f64> = assign.iter().flat_map(|&(_, j)| t.points[j].iter().flatten().copied()).collect();
        let gt = g.input(Tensor::matrix(k * p, 2, gt)?);
        let d = g.sub(pts, gt)?;
        let d = g.abs(d);
        let d = g.sum(d);
        let reg_xy = g.scale(d, 1.0 / (k * p) as f64);
        let z = g.gather_rows(layer.z, rows)?;
        let z = g.abs(z);
        let reg_z = g.mean(z);
        let reg = g.add(reg_xy, reg_z)?;

        let seg = match layer.ddt {
            Some(ddt) => {
                let cells = t.cells;
                let flat = g.reshape(ddt, &[n * cells, DDT_CLASSES])?;
                let idx: Vec<usize> = assign
                    .iter()
                    .flat_map(|&(q, _)| q * cells..(q + 1) * cells)
                    .collect();
                let x = g.gather_rows(flat, idx)?;
                match model.seg_supervision {
                    SegSupervision::Dt => {
                        let y: Vec<f64> = assign.iter().flat_map(|&(_, j)| t.dt[j].iter().copied()).collect();
                        dt_seg_loss(g, x, &y)?
                    }
                    SegSupervision::Binary => {
                        let y: Vec<u8> = assign.iter().flat_map(|&(_, j)| t.binary_classes(j)).collect();
                        ddt_seg_loss(g, x, &y, cells)?
                    }
                    _ => {
                        let y: Vec<u8> = assign.iter().flat_map(|&(_, j)| t.ddt[j].iter().copied()).collect();
                        ddt_seg_loss(g, x, &y, cells)?
                    }
                }
            }
            None => zero(g),
        };
        (reg, seg)
    };

    let y_ll = l2l_labels(&assign, t, n);
    let mut topo_ll = topo_loss(g, layer.topo.l2l, &y_ll, cfg)?;
    if let Some(tp) = layer.topo.t_p2i {
        let l = topo_loss(g, tp, &per_point(&y_ll, n, p), cfg)?;
        topo_ll = g.add(topo_ll, l)?;
    }
    let topo_lt = match &layer.topo.l2t {
        Some(o) => {
            let y = l2t_labels(&assign, t, n);
            let mut l = topo_loss(g, o.fused, &y, cfg)?;
            if let Some(tp) = o.t_p2t {
                let lp = topo_loss(g, tp, &per_point(&y, t.boxes.len(), p), cfg)?;
                l = g.add(l, lp)?;
            }
            l
        }
        None => zero(g),
    };

    let parts = LossBreakdown {
        cls: g.value(cls).item(),
        reg: g.value(reg).item(),
        seg: g.value(seg).item(),
        topo_l2l: g.value(topo_ll).item(),
        topo_l2t: g.value(topo_lt).item(),
        ..Default::default()
    };
    let a = g.scale(cls, cfg.lambda_cls);
    let b = g.scale(reg, cfg.lambda_reg);
    let c = g.scale(seg, cfg.lambda_mask);
    let topo = g.add(topo_ll, topo_lt)?;
    let d = g.scale(topo, cfg.w_topo);
    let s = g.add(a, b)?;
    let s = g.add(s, c)?;
    let total = g.add(s, d)?;
    Ok(LayerLoss { total, parts, assign })
}

/// Traffic-token detection: box L1 plus category cross-entropy, tokens 1:1 with
/// the scene's elements.
fn te_loss(g: &mut Graph, out: &DecoderOutput, t: &SceneTargets) -> Result<Var> {
    let Some(te) = &out.traffic else {
        return Ok(zero(g));
    };
    let m = te.m;
    let boxes: Vec<f64> = t.boxes.iter().flatten().copied().collect();
    let y = g.input(Tensor::matrix(m, 4, boxes)?);
    let d = g.sub(te.boxes, y)?;
    let d = g.abs(d);
    let l1 = g.mean(d);
    let mut onehot = vec![0.0; m * 3];
    for (i, &c) in t.categories.iter().enumerate() {
        onehot[i * 3 + c] = 1.0;
    }
    let oh = g.input(Tensor::matrix(m, 3, onehot)?);
    let ls = g.log_softmax(te.cls);
    let ly = g.mul(ls, oh)?;
    let ce = g.sum(ly);
    let ce = g.scale(ce, -1.0 / m as f64);
    g.add(l1, ce)
}

/// Sum of the per-layer objectives (last layer only without deep supervision) and
/// the traffic-token loss.
pub fn total_loss(
    g: &mut Graph,
    out: &DecoderOutput,
    targets: &SceneTargets,
    model: &ModelConfig,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    if targets.boxes.len() != out.traffic.as_ref().map_or(0, |t| t.m) {
        return Err(Error::Input("traffic tokens do not match targets".into()));
    }
    let first = if cfg.deep_supervision { 0 } else { out.layers.len() - 1 };
    let mut total = zero(g);
    let mut parts = LossBreakdown::default();
    let mut assignment = Vec::new();
    for layer in &out.layers[first..] {
        let l = layer_loss(g, layer, targets, model, cfg)?;
        total = g.add(total, l.total)?;
        parts.cls += l.parts.cls;
        parts.reg += l.parts.reg;
        parts.seg += l.parts.seg;
        parts.topo_l2l += l.parts.topo_l2l;
        parts.topo_l2t += l.parts.topo_l2t;
        parts.layer_totals.push(g.value(l.total).item());
        assignment = l.assign;
    }
    let te = te_loss(g, out, targets)?;
    parts.te = g.value(te).item();
    let te = g.scale(te, cfg.w_te);
    let total = g.add(total, te)?;
    parts.total = g.value(total).item();
    if !parts.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {parts:?}")));
    }
    Ok(LossOutput {
        total,
        parts,
        assignment,
    })
}
