use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use super::{evaluate, train, Dataset, RunConfig};
use crate::decoder::{Representation, SegSupervision};
use crate::error::{Error, Result};
use crate::losses::TopoLoss;

/// One toggle dimension of the ablation space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Representation,
    P2pConstrain,
    Integrator,
    SegSupervision,
    Cyclic,
    ForwardWeights,
    P2iBranch,
    TopoLoss,
    /// `(λ_neg, λ_pos)` of the adaptive loss.
    AtlLambda,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "representation" | "repr" => Axis::Representation,
            "p2p_constrain" | "p2p" => Axis::P2pConstrain,
            "integrator" => Axis::Integrator,
            "seg_supervision" | "seg" => Axis::SegSupervision,
            "cyclic" => Axis::Cyclic,
            "forward_weights" => Axis::ForwardWeights,
            "p2i_branch" | "p2i" => Axis::P2iBranch,
            "topo_loss" | "loss" => Axis::TopoLoss,
            "atl_lambda" => Axis::AtlLambda,
            other => return Err(Error::Config(format!("unknown ablation axis `{other}`"))),
        })
    }
}

impl Axis {
    /// Every setting along this axis as `(label, config)` derived from `base`.
    pub fn settings(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |label: &str, f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            (label.to_string(), c)
        };
        match self {
            Axis::Representation => vec![
                with("repr=ins", &|c| c.model.representation = Representation::Ins),
                with("repr=ins_pts", &|c| c.model.representation = Representation::InsPts),
            ],
            Axis::P2pConstrain => vec![
                with("p2p=off", &|c| c.model.p2p_constrain = false),
                with("p2p=on", &|c| c.model.p2p_constrain = true),
            ],
            Axis::Integrator => vec![
                with("integrator=off", &|c| c.model.integrator = false),
                with("integrator=on", &|c| c.model.integrator = true),
            ],
            Axis::SegSupervision => vec![
                with("seg=off", &|c| c.model.seg_supervision = SegSupervision::Off),
                with("seg=binary", &|c| c.model.seg_supervision = SegSupervision::Binary),
                with("seg=dt", &|c| c.model.seg_supervision = SegSupervision::Dt),
                with("seg=ddt", &|c| c.model.seg_supervision = SegSupervision::Ddt),
            ],
            Axis::Cyclic => vec![
                with("cyclic=off", &|c| c.model.cyclic = false),
                with("cyclic=on", &|c| c.model.cyclic = true),
            ],
            Axis::ForwardWeights => vec![
                with("forward_weights=off", &|c| c.model.forward_weights = false),
                with("forward_weights=on", &|c| c.model.forward_weights = true),
            ],
            Axis::P2iBranch => vec![
                with("p2i=off", &|c| c.model.p2i_branch = false),
                with("p2i=on", &|c| c.model.p2i_branch = true),
            ],
            Axis::TopoLoss => vec![
                with("topo_loss=focal", &|c| c.loss.topo = TopoLoss::Focal),
                with("topo_loss=dice", &|c| c.loss.topo = TopoLoss::Dice),
                with("topo_loss=atl", &|c| c.loss.topo = TopoLoss::Atl),
            ],
            Axis::AtlLambda => [(5.0, 200.0), (5.0, 400.0), (5.0, 800.0), (10.0, 400.0)]
                .into_iter()
                .map(|(n, p)| {
                    let mut c = base.clone();
                    c.loss.topo = TopoLoss::Atl;
                    c.loss.lambda_neg = n;
                    c.loss.lambda_pos = p;
                    (format!("atl={n}/{p}"), c)
                })
                .collect(),
        }
    }
}

/// Cartesian product of the axes' settings; a single base row for no axes.
pub fn expand(base: &RunConfig, axes: &[Axis]) -> Vec<(String, RunConfig)> {
    let mut rows = vec![(String::new(), base.clone())];
    for &axis in axes {
        let mut next = Vec::new();
        for (label, cfg) in &rows {
            for (l, c) in axis.settings(cfg) {
                let joined = if label.is_empty() { l } else { format!("{label};{l}") };
                next.push((joined, c));
            }
        }
        rows = next;
    }
    if rows.len() == 1 && rows[0].0.is_empty() {
        rows[0].0 = "base".into();
    }
    rows
}

/// Configurations for the rows of the three published ablations: representation
/// and segmentation, cyclic flow with the point-level branch, and topology losses.
pub fn reference_ablation_rows() -> Vec<(String, RunConfig)> {
    let base = RunConfig::default();
    let mut rows = Vec::new();
    let repr = |r: Representation, p2p: bool, integ: bool, seg: SegSupervision| {
        let mut c = base.clone();
        c.model.representation = r;
        c.model.p2p_constrain = p2p;
        c.model.integrator = integ;
        c.model.seg_supervision = seg;
        c.loss.topo = TopoLoss::Focal;
        c
    };
    use Representation::*;
    use SegSupervision::*;
    rows.push(("repr:ins".to_string(), repr(Ins, false, false, Off)));
    rows.push(("repr:ins_pts".to_string(), repr(InsPts, false, false, Off)));
    rows.push(("repr:+p2p".to_string(), repr(InsPts, true, false, Off)));
    rows.push(("repr:+integrator".to_string(), repr(InsPts, true, true, Off)));
    rows.push(("repr:+seg_binary".to_string(), repr(InsPts, true, true, Binary)));
    rows.push(("repr:+seg_dt".to_string(), repr(InsPts, true, true, Dt)));
    rows.push(("repr:+seg_ddt".to_string(), repr(InsPts, true, true, Ddt)));

    let cyc = |p2i: bool, fw: bool, cyclic: bool| {
        let mut c = base.clone();
        c.model.p2i_branch = p2i;
        c.model.forward_weights = fw;
        c.model.cyclic = cyclic;
        c
    };
    rows.push(("cyclic:q_ins".to_string(), cyc(false, false, false)));
    rows.push(("cyclic:+w_i2i+t_i2i".to_string(), cyc(false, true, true)));
    rows.push(("cyclic:+q_pts+w_p2i+t_p2i".to_string(), cyc(true, true, true)));

    for (label, c) in Axis::TopoLoss.settings(&base) {
        if label != "topo_loss=atl" {
            rows.push((format!("loss:{label}"), c));
        }
    }
    for (label, c) in Axis::AtlLambda.settings(&base) {
        rows.push((format!("loss:{label}"), c));
    }
    rows
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    /// Objective of decoder layer 0 on the first batch scene at step 0.
    pub layer0_loss_step0: f64,
    pub first_topo: f64,
    pub final_topo: f64,
    pub final_loss: f64,
    pub det_l: f64,
    pub det_t: f64,
    pub top_ll: f64,
    pub top_lt: f64,
    pub ols_mean: f64,
    pub ols_sqrt: f64,
}

/// Trains and evaluates every combination, sharing the base seed.
pub fn ablate(base: &RunConfig, axes: &[Axis], data: &Dataset) -> Result<Vec<AblationRow>> {
    let mut out = Vec::new();
    for (label, cfg) in expand(base, axes) {
        let run = train(&cfg, data, None, None)?;
        let report = evaluate(&run.store, &cfg, data)?;
        let topo = |i: usize| run.log.get(i).map_or(0.0, |l| l.loss.topo_l2l + l.loss.topo_l2t);
        out.push(AblationRow {
            label,
            layer0_loss_step0: run.log.first().and_then(|l| l.layer_totals.first().copied()).unwrap_or(0.0),
            first_topo: topo(0),
            final_topo: topo(run.log.len().saturating_sub(1)),
            final_loss: run.log.last().map_or(0.0, |l| l.loss.total),
            det_l: report.det_l,
            det_t: report.det_t,
            top_ll: report.top_ll,
            top_lt: report.top_lt,
            ols_mean: report.ols_mean,
            ols_sqrt: report.ols_sqrt,
        });
    }
    Ok(out)
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "label,layer0_loss_step0,first_topo,final_topo,final_loss,det_l,det_t,top_ll,top_lt,ols_mean,ols_sqrt\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.label,
            r.layer0_loss_step0,
            r.first_topo,
            r.final_topo,
            r.final_loss,
            r.det_l,
            r.det_t,
            r.top_ll,
            r.top_lt,
            r.ols_mean,
            r.ols_sqrt
        );
    }
    s
}
