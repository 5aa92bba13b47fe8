//! Run orchestration: scene sets, training, evaluation, ablations and gradient checks.

mod ablate;
mod config;
mod gradcheck;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::decoder::{decoder_forward, init_params, DecoderOutput, SceneInput};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, SceneTargets};
use crate::metrics::{evaluate_scene, EvalReport, LanePred, ScenePrediction, TrafficPred};
use crate::nn::{AdamW, Graph, ParamStore, Tensor};
use crate::scene::{rasterize_bev, sample_scene, SceneGraph};
use crate::topology::decode_traffic;

pub use ablate::{ablate, expand, reference_ablation_rows, rows_to_csv, AblationRow, Axis};
pub use config::{OptimConfig, RunConfig};
pub use gradcheck::{gradcheck, gradcheck_scenes, tiny_config, SceneGradReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Seed of scene `i` in a set generated from `base`.
pub fn scene_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

pub fn generate_scenes(cfg: &RunConfig) -> Result<Vec<SceneGraph>> {
    cfg.bev.validate()?;
    (0..cfg.scenes)
        .map(|i| sample_scene(scene_seed(cfg.seed, i), &cfg.gen, &cfg.bev))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub lanes: usize,
    pub edges: usize,
    pub traffic: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub base_seed: u64,
    pub scenes: Vec<ManifestEntry>,
    /// Scene count keyed by the number of lane-graph edges.
    pub edge_histogram: BTreeMap<usize, usize>,
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(cfg.scenes);
    let mut hist = BTreeMap::new();
    for (i, s) in generate_scenes(cfg)?.iter().enumerate() {
        let file = format!("scene_{i:04}.json");
        s.save(&out.join(&file))?;
        *hist.entry(s.num_edges()).or_insert(0) += 1;
        entries.push(ManifestEntry {
            file,
            seed: scene_seed(cfg.seed, i),
            lanes: s.num_lines(),
            edges: s.num_edges(),
            traffic: s.num_traffic(),
        });
    }
    let m = Manifest {
        base_seed: cfg.seed,
        scenes: entries,
        edge_histogram: hist,
    };
    std::fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)?)?;
    Ok(m)
}

pub fn load_scenes(dir: &Path) -> Result<Vec<SceneGraph>> {
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    m.scenes.iter().map(|e| SceneGraph::load(&dir.join(&e.file))).collect()
}

/// Scenes with their rasters and supervision, ready for repeated passes.
pub struct Dataset {
    pub scenes: Vec<SceneGraph>,
    pub bev: Vec<Tensor>,
    pub targets: Vec<SceneTargets>,
}

impl Dataset {
    pub fn new(scenes: Vec<SceneGraph>, cfg: &RunConfig) -> Result<Self> {
        let mut bev = Vec::with_capacity(scenes.len());
        let mut targets = Vec::with_capacity(scenes.len());
        for (i, s) in scenes.iter().enumerate() {
            s.validate(cfg.gen.connection_tolerance)?;
            if s.spec != cfg.bev {
                return Err(Error::Config(format!("scene {i} was rasterized for a different BEV")));
            }
            if s.num_lines() > cfg.model.n_queries {
                return Err(Error::Capacity {
                    gt: s.num_lines(),
                    queries: cfg.model.n_queries,
                });
            }
            let noise_seed = scene_seed(cfg.seed ^ 0xB5, i);
            bev.push(rasterize_bev(s, &cfg.bev, cfg.bev_noise, noise_seed)?.to_tensor());
            targets.push(SceneTargets::new(s, cfg.model.n_points)?);
        }
        Ok(Self { scenes, bev, targets })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

fn forward(g: &mut Graph, store: &ParamStore, cfg: &RunConfig, data: &Dataset, i: usize, te_seed: u64) -> Result<DecoderOutput> {
    let input = SceneInput {
        bev: data.bev[i].clone(),
        spec: &cfg.bev,
        traffic: &data.scenes[i].traffic,
        te_seed,
    };
    decoder_forward(g, store, &cfg.model, &input)
}

fn sigmoid_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect())
        .collect()
}

/// Decodes the last decoder layer into scored lanes, traffic elements and
/// topology probabilities.
pub fn decode_prediction(g: &Graph, out: &DecoderOutput, cfg: &RunConfig) -> ScenePrediction {
    let last = out.layers.last().expect("at least one layer");
    let p = cfg.model.n_points;
    let cls = g.value(last.cls);
    let pts = g.value(last.points);
    let lanes = (0..cfg.model.n_queries)
        .map(|q| LanePred {
            points: (0..p).map(|k| [pts.at(q * p + k, 0), pts.at(q * p + k, 1)]).collect(),
            score: 1.0 / (1.0 + (-cls.data()[q]).exp()),
        })
        .collect();
    let traffic = match &out.traffic {
        Some(te) => decode_traffic(g.value(te.boxes), g.value(te.cls))
            .into_iter()
            .map(|(bbox, category, score)| TrafficPred { bbox, category, score })
            .collect(),
        None => Vec::new(),
    };
    let l2t = match &last.topo.l2t {
        Some(o) => sigmoid_rows(g.value(o.fused)),
        None => vec![Vec::new(); cfg.model.n_queries],
    };
    ScenePrediction {
        lanes,
        l2l: sigmoid_rows(g.value(last.topo.l2l)),
        traffic,
        l2t,
    }
}

/// Seed for the traffic-token jitter at evaluation time.
fn eval_te_seed(i: usize) -> u64 {
    scene_seed(0xE7A1, i)
}

pub fn predict(store: &ParamStore, cfg: &RunConfig, data: &Dataset, i: usize) -> Result<ScenePrediction> {
    let mut g = Graph::new();
    let out = forward(&mut g, store, cfg, data, i, eval_te_seed(i))?;
    Ok(decode_prediction(&g, &out, cfg))
}

pub fn evaluate(store: &ParamStore, cfg: &RunConfig, data: &Dataset) -> Result<EvalReport> {
    let mut per = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let pred = predict(store, cfg, data, i)?;
        per.push(evaluate_scene(&pred, &data.scenes[i])?);
    }
    Ok(EvalReport::aggregate(per))
}

/// Long-format CSV of the predicted lane-lane probabilities, one row per cell.
pub fn topology_heatmap_csv(store: &ParamStore, cfg: &RunConfig, data: &Dataset) -> Result<String> {
    let mut s = String::from("scene,row,col,prob\n");
    for i in 0..data.len() {
        let pred = predict(store, cfg, data, i)?;
        for (r, row) in pred.l2l.iter().enumerate() {
            for (c, p) in row.iter().enumerate() {
                let _ = writeln!(s, "{i},{r},{c},{p}");
            }
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossBreakdown,
    /// Per-layer totals of the first scene of the batch.
    pub layer_totals: Vec<f64>,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub log: Vec<StepLog>,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    word_pos: String,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed().to_vec(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, cfg: &RunConfig, step: usize, rng: &ChaCha8Rng) -> Result<()> {
    let extra = json!({ "config": cfg, "step": step, "rng": rng_state(rng) });
    let f = BufWriter::new(File::create(path)?);
    store.write_checkpoint(f, &extra)
}

pub struct Checkpoint {
    pub store: ParamStore,
    pub config: RunConfig,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (store, header) = ParamStore::read_checkpoint(BufReader::new(File::open(path)?))?;
    let field = |k: &str| -> Result<Value> {
        header
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Compatibility(format!("checkpoint header lacks `{k}`")))
    };
    let config: RunConfig = serde_json::from_value(field("config")?)?;
    let step = field("step")?.as_u64().unwrap_or(0) as usize;
    let st: RngState = serde_json::from_value(field("rng")?)?;
    let seed: [u8; 32] = st
        .seed
        .try_into()
        .map_err(|_| Error::Compatibility("rng seed must be 32 bytes".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(
        st.word_pos
            .parse()
            .map_err(|_| Error::Compatibility("bad rng word position".into()))?,
    );
    Ok(Checkpoint {
        store,
        config,
        step,
        rng,
    })
}

fn log_header() -> &'static str {
    "step,total,cls,reg,seg,topo_l2l,topo_l2t,te,grad_norm\n"
}

fn log_line(l: &StepLog) -> String {
    let p = &l.loss;
    format!(
        "{},{},{},{},{},{},{},{},{}\n",
        l.step, p.total, p.cls, p.reg, p.seg, p.topo_l2l, p.topo_l2t, p.te, l.grad_norm
    )
}

fn add_parts(acc: &mut LossBreakdown, p: &LossBreakdown, w: f64) {
    acc.cls += w * p.cls;
    acc.reg += w * p.reg;
    acc.seg += w * p.seg;
    acc.topo_l2l += w * p.topo_l2l;
    acc.topo_l2t += w * p.topo_l2t;
    acc.te += w * p.te;
    acc.total += w * p.total;
}

fn lr_at(o: &OptimConfig, step: usize) -> f64 {
    let Some(f) = o.decay_from else { return o.lr };
    let start = f * o.steps as f64;
    let left = o.steps as f64 - start;
    if (step as f64) < start || left <= 0.0 {
        return o.lr;
    }
    o.lr * (1.0 - (step as f64 - start) / left)
}

/// Deterministic training on `data`. Starts from `init` when given, otherwise from a
/// fresh initialization seeded by `cfg.seed`. With `out`, writes the step log,
/// periodic checkpoints and the final checkpoint.
pub fn train(cfg: &RunConfig, data: &Dataset, init: Option<ParamStore>, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("no training scenes".into()));
    }
    let fresh = init_params(&cfg.model, cfg.bev.feature_channels, cfg.seed)?;
    let mut store = match init {
        Some(s) => {
            s.check_compatible(&fresh)?;
            s
        }
        None => fresh,
    };
    let mut opt = AdamW::new(&store, cfg.optim.lr, cfg.optim.weight_decay);
    opt.clip = cfg.optim.clip;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1);
    let mut log = Vec::with_capacity(cfg.optim.steps);
    let mut log_text = String::from(log_header());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let b = cfg.optim.batch;
    for step in 0..cfg.optim.steps {
        store.zero_grad();
        let mut parts = LossBreakdown::default();
        let mut layer_totals = Vec::new();
        for k in 0..b {
            let i = rng.gen_range(0..data.len());
            let te_seed = rng.gen::<u64>();
            let mut g = Graph::new();
            let res = forward(&mut g, &store, cfg, data, i, te_seed)
                .and_then(|o| total_loss(&mut g, &o, &data.targets[i], &cfg.model, &cfg.loss));
            let l = match res {
                Ok(l) => l,
                Err(e @ Error::Numeric(_)) => {
                    dump_failure(out, step, i, &e, &log)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if k == 0 {
                layer_totals = l.parts.layer_totals.clone();
            }
            add_parts(&mut parts, &l.parts, 1.0 / b as f64);
            let scaled = g.scale(l.total, 1.0 / b as f64);
            g.backward(scaled, &mut store)?;
        }
        opt.lr = lr_at(&cfg.optim, step);
        let grad_norm = match opt.step(&mut store) {
            Ok(n) => n,
            Err(e @ Error::Numeric(_)) => {
                dump_failure(out, step, usize::MAX, &e, &log)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let entry = StepLog {
            step,
            loss: parts,
            layer_totals,
            grad_norm,
        };
        log_text.push_str(&log_line(&entry));
        if step % 100 == 0 {
            info!("step {step} loss {:.4} grad {:.3}", entry.loss.total, grad_norm);
        }
        log.push(entry);
        if let Some(dir) = out {
            let every = cfg.optim.checkpoint_every;
            if every > 0 && (step + 1) % every == 0 && step + 1 < cfg.optim.steps {
                save_checkpoint(&dir.join(format!("checkpoint_{:06}.bin", step + 1)), &store, cfg, step + 1, &rng)?;
            }
        }
    }
    if let Some(dir) = out {
        std::fs::write(dir.join("train_log.csv"), log_text)?;
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &store, cfg, cfg.optim.steps, &rng)?;
    }
    Ok(TrainOutcome { store, log })
}

fn dump_failure(out: Option<&Path>, step: usize, scene: usize, e: &Error, log: &[StepLog]) -> Result<()> {
    let Some(dir) = out else { return Ok(()) };
    let recent: Vec<&StepLog> = log.iter().rev().take(10).collect();
    let dump = json!({
        "step": step,
        "scene": (scene != usize::MAX).then_some(scene),
        "error": e.to_string(),
        "recent": recent,
    });
    std::fs::write(dir.join("numeric_failure.json"), serde_json::to_string_pretty(&dump)?)?;
    Ok(())
}

/// Output files of [`cmd_eval`].
pub struct EvalFiles {
    pub report: PathBuf,
    pub csv: PathBuf,
    pub heatmap: PathBuf,
}

/// Evaluates a checkpoint on the scenes in `data_dir`, rebuilding the model from the
/// checkpoint's own configuration.
pub fn cmd_eval(checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<(EvalReport, EvalFiles)> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = ck.config;
    let reference = init_params(&cfg.model, cfg.bev.feature_channels, cfg.seed)?;
    ck.store.check_compatible(&reference)?;
    let data = Dataset::new(load_scenes(data_dir)?, &cfg)?;
    let report = evaluate(&ck.store, &cfg, &data)?;
    std::fs::create_dir_all(out)?;
    let files = EvalFiles {
        report: out.join("report.json"),
        csv: out.join("per_scene.csv"),
        heatmap: out.join("topology_heatmap.csv"),
    };
    std::fs::write(&files.report, serde_json::to_string_pretty(&report)?)?;
    std::fs::write(&files.csv, report.to_csv())?;
    std::fs::write(&files.heatmap, topology_heatmap_csv(&ck.store, &cfg, &data)?)?;
    Ok((report, files))
}

/// Trains on the scenes in `data_dir` (or on a freshly generated in-memory set when
/// `data_dir` is `None`).
pub fn cmd_train(cfg: &RunConfig, data_dir: Option<&Path>, out: &Path) -> Result<TrainOutcome> {
    let scenes = match data_dir {
        Some(d) => load_scenes(d)?,
        None => generate_scenes(cfg)?,
    };
    let data = Dataset::new(scenes, cfg)?;
    train(cfg, &data, None, Some(out))
}
