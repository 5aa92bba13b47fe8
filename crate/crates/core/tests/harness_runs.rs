use std::collections::BTreeMap;

use lanetopo::decoder::init_params;
use lanetopo::harness::*;
use lanetopo::metrics::{evaluate_scene, EvalReport, ScenePrediction};
use lanetopo::scene::SceneGraph;
use lanetopo::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick(scenes: usize, steps: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.scenes = scenes;
    cfg.optim.steps = steps;
    cfg.optim.batch = 1;
    cfg.optim.checkpoint_every = 0;
    cfg
}

fn files(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn generate_is_deterministic() {
    let cfg = quick(5, 0);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_generate(&cfg, a.path()).unwrap();
    cmd_generate(&cfg, b.path()).unwrap();
    let fa = files(a.path());
    assert_eq!(fa.len(), 6);
    assert_eq!(fa, files(b.path()));
}

#[test]
fn generate_zero_scenes_writes_only_the_manifest() {
    let cfg = quick(0, 0);
    let d = tempfile::tempdir().unwrap();
    let m = cmd_generate(&cfg, d.path()).unwrap();
    assert!(m.scenes.is_empty());
    assert_eq!(files(d.path()).keys().collect::<Vec<_>>(), vec![MANIFEST_FILE]);
}

#[test]
fn manifest_histogram_matches_a_recount() {
    let mut cfg = quick(100, 0);
    cfg.gen.fork_prob = 0.5;
    let d = tempfile::tempdir().unwrap();
    let m = cmd_generate(&cfg, d.path()).unwrap();
    let mut hist = BTreeMap::new();
    for e in &m.scenes {
        let s = SceneGraph::load(&d.path().join(&e.file)).unwrap();
        let edges: usize = s.adjacency.iter().flatten().map(|&v| v as usize).sum();
        *hist.entry(edges).or_insert(0usize) += 1;
    }
    assert_eq!(hist, m.edge_histogram);
    assert_eq!(load_scenes(d.path()).unwrap().len(), 100);
}

#[test]
fn zero_steps_leave_the_initialization() {
    let cfg = quick(2, 0);
    let data = Dataset::new(generate_scenes(&cfg).unwrap(), &cfg).unwrap();
    let out = tempfile::tempdir().unwrap();
    let run = train(&cfg, &data, None, Some(out.path())).unwrap();
    assert!(run.log.is_empty());
    let init = init_params(&cfg.model, cfg.bev.feature_channels, cfg.seed).unwrap();
    let ck = load_checkpoint(&out.path().join(CHECKPOINT_FILE)).unwrap();
    for (name, p) in init.iter() {
        assert_eq!(ck.store.get(name).unwrap().data(), p.value.data());
    }
}

#[test]
fn one_step_twice_gives_identical_checkpoints() {
    let cfg = quick(2, 1);
    let data = Dataset::new(generate_scenes(&cfg).unwrap(), &cfg).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train(&cfg, &data, None, Some(a.path())).unwrap();
    train(&cfg, &data, None, Some(b.path())).unwrap();
    let ca = std::fs::read(a.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ca, std::fs::read(b.path().join(CHECKPOINT_FILE)).unwrap());
    let init = init_params(&cfg.model, cfg.bev.feature_channels, cfg.seed).unwrap();
    let ck = load_checkpoint(&a.path().join(CHECKPOINT_FILE)).unwrap();
    assert_ne!(ck.store.get("head.cls.w").unwrap().data(), init.get("head.cls.w").unwrap().data());
    assert_eq!(ck.step, 1);
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let cfg = quick(3, 2);
    let data = Dataset::new(generate_scenes(&cfg).unwrap(), &cfg).unwrap();
    let run = train(&cfg, &data, None, None).unwrap();
    let before = evaluate(&run.store, &cfg, &data).unwrap();
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("c.bin");
    let rng = ChaCha8Rng::seed_from_u64(77);
    save_checkpoint(&path, &run.store, &cfg, 2, &rng).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.config, cfg);
    assert_eq!(ck.rng, rng);
    for (name, p) in run.store.iter() {
        let q = ck.store.get(name).unwrap();
        assert!(p.value.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let after = evaluate(&ck.store, &ck.config, &data).unwrap();
    assert_eq!(before.to_csv(), after.to_csv());
}

#[test]
fn eval_files_agree_with_the_report() {
    let cfg = quick(3, 1);
    let data_dir = tempfile::tempdir().unwrap();
    cmd_generate(&cfg, data_dir.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    cmd_train(&cfg, Some(data_dir.path()), out.path()).unwrap();
    let ev = tempfile::tempdir().unwrap();
    let (report, f) = cmd_eval(&out.path().join(CHECKPOINT_FILE), data_dir.path(), ev.path()).unwrap();
    let json: EvalReport = serde_json::from_str(&std::fs::read_to_string(&f.report).unwrap()).unwrap();
    assert_eq!(json.det_l, report.det_l);
    let per = EvalReport::scores_from_csv(&std::fs::read_to_string(&f.csv).unwrap()).unwrap();
    let re = EvalReport::aggregate(per);
    for (a, b) in [
        (re.det_l, report.det_l),
        (re.det_t, report.det_t),
        (re.top_ll, report.top_ll),
        (re.top_lt, report.top_lt),
        (re.ols_mean, report.ols_mean),
    ] {
        assert!((a - b).abs() < 1e-12);
    }
    let heat = std::fs::read_to_string(&f.heatmap).unwrap();
    let n = cfg.model.n_queries;
    assert_eq!(heat.lines().count(), 1 + 3 * n * n);
}

#[test]
fn eval_rejects_a_mismatched_checkpoint() {
    let cfg = quick(1, 0);
    let data_dir = tempfile::tempdir().unwrap();
    cmd_generate(&cfg, data_dir.path()).unwrap();
    let mut other = cfg.clone();
    other.model.n_queries = 5;
    let store = init_params(&other.model, other.bev.feature_channels, 0).unwrap();
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("c.bin");
    save_checkpoint(&path, &store, &cfg, 0, &ChaCha8Rng::seed_from_u64(0)).unwrap();
    let r = cmd_eval(&path, data_dir.path(), d.path());
    assert!(matches!(r, Err(Error::Compatibility(_))));
}

#[test]
fn ground_truth_predictions_score_one() {
    let cfg = quick(20, 0);
    for s in generate_scenes(&cfg).unwrap() {
        let sc = evaluate_scene(&ScenePrediction::from_ground_truth(&s), &s).unwrap();
        assert_eq!(sc.det_l, Some(1.0));
        assert_eq!(sc.det_t, Some(1.0));
        if let Some(t) = sc.top_ll {
            assert_eq!(t, 1.0);
        }
        if let Some(t) = sc.top_lt {
            assert_eq!(t, 1.0);
        }
    }
}

#[test]
fn untrained_model_barely_detects() {
    let cfg = quick(5, 0);
    let data = Dataset::new(generate_scenes(&cfg).unwrap(), &cfg).unwrap();
    let store = init_params(&cfg.model, cfg.bev.feature_channels, 0).unwrap();
    assert!(evaluate(&store, &cfg, &data).unwrap().det_l < 0.2);
}

#[test]
fn ablate_without_axes_is_one_row() {
    let cfg = quick(2, 1);
    let data = Dataset::new(generate_scenes(&cfg).unwrap(), &cfg).unwrap();
    let rows = ablate(&cfg, &[], &data).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].label, "base");
    assert_eq!(rows_to_csv(&rows).lines().count(), 2);
}

#[test]
fn cyclic_rows_share_the_first_layer_loss() {
    let cfg = quick(2, 1);
    let data = Dataset::new(generate_scenes(&cfg).unwrap(), &cfg).unwrap();
    let rows = ablate(&cfg, &[Axis::Cyclic], &data).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].layer0_loss_step0, rows[1].layer0_loss_step0);
    assert_ne!(rows[0].final_loss, rows[1].final_loss);
}

#[test]
fn topology_loss_rows_differ() {
    let cfg = quick(2, 2);
    let data = Dataset::new(generate_scenes(&cfg).unwrap(), &cfg).unwrap();
    let mut rows = ablate(&cfg, &[Axis::TopoLoss], &data).unwrap();
    rows.retain(|r| r.label != "topo_loss=dice");
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.final_loss.is_finite()));
    assert_ne!(rows[0].first_topo, rows[1].first_topo);
}

#[test]
fn every_reference_row_is_a_valid_distinct_config() {
    let rows = reference_ablation_rows();
    assert_eq!(rows.len(), 7 + 3 + 2 + 4);
    // rows of one table differ; tables may share the full-model row
    let table = |l: &str| l.split(':').next().unwrap().to_string();
    for (i, (label, c)) in rows.iter().enumerate() {
        c.validate().unwrap_or_else(|e| panic!("{label}: {e}"));
        for (l2, c2) in rows[i + 1..].iter().filter(|(l2, _)| table(l2) == table(label)) {
            assert!(c != c2, "{label} and {l2} coincide");
        }
    }
    let all = [
        Axis::Representation,
        Axis::P2pConstrain,
        Axis::Integrator,
        Axis::SegSupervision,
        Axis::Cyclic,
        Axis::ForwardWeights,
        Axis::P2iBranch,
        Axis::TopoLoss,
        Axis::AtlLambda,
    ];
    let grid = expand(&RunConfig::default(), &all);
    assert_eq!(grid.len(), 2 * 2 * 2 * 4 * 2 * 2 * 2 * 3 * 4);
    for (label, c) in &grid {
        c.validate().unwrap_or_else(|e| panic!("{label}: {e}"));
    }
    assert!("nonsense".parse::<Axis>().is_err());
}

#[test]
fn config_text_forms_agree() {
    let kv = "seed = 4\noptim.lr = 0.001\nmodel.seg_supervision = dt\nloss.topo = adaptive\n# comment\n";
    let js = r#"{"seed": 4, "optim": {"lr": 0.001}, "model": {"seg_supervision": "dt"}, "loss": {"topo": "atl"}}"#;
    assert_eq!(RunConfig::parse(kv).unwrap(), RunConfig::parse(js).unwrap());
    assert!(matches!(RunConfig::parse("model.nope = 1"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::parse("optim.lr = -1"), Err(Error::Config(_))));
}

#[test]
fn corrupted_gradients_fail_the_check() {
    let reports = gradcheck(&tiny_config(), 1.01).unwrap();
    assert!(reports.iter().all(|r| !r.report.passed));
}
