//! Acceptance gate. Prints one line per criterion; criteria 1-10 are gated, 11 is
//! reported only.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use lanetopo::decoder::{decoder_forward, init_params, SceneInput};
use lanetopo::geometry::{densify, dist, Point};
use lanetopo::harness::{evaluate, generate_scenes, gradcheck, tiny_config, train, Dataset, RunConfig};
use lanetopo::losses::{adaptive_topo_loss, hungarian};
use lanetopo::masks::build_p2p_mask;
use lanetopo::metrics::{average_precision, frechet, top_ll};
use lanetopo::nn::layers::{add_attention, masked_attention};
use lanetopo::nn::{Graph, ParamStore, Tensor};
use lanetopo::scene::{ddt_mask, sample_scene, BevSpec, GenConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DDT_BUDGET: Duration = Duration::from_secs(5);
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);
const OVERFIT_STEPS: usize = 2000;
const OVERFIT_DET_L: f64 = 0.85;
const OVERFIT_TOP_LL: f64 = 0.70;
const EQUIVARIANCE_TOL: f64 = 1e-8;
const AGG_MEAN_TOL: f64 = 1e-8;
const HAND_TOL: f64 = 1e-10;
const ATL_TOL: f64 = 1e-6;
const FRECHET_TOL: f64 = 1e-9;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_STEPS: usize = 600;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run_criterion(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    let tag = if n == 11 {
        "REPORT"
    } else if o.pass {
        "PASS"
    } else {
        "FAIL"
    };
    println!("criterion {n:>2} [{tag}] {name}: {} ({:.1}s)", o.detail, t.elapsed().as_secs_f64());
    o.pass
}

fn c1_ddt_oracle() -> Outcome {
    let spec = BevSpec {
        height_cells: 32,
        width_cells: 32,
        ..BevSpec::default()
    };
    let gen = GenConfig::default();
    let half = spec.lane_width / 2.0;
    let mut elapsed = Duration::ZERO;
    let (mut lines, mut cells) = (0usize, 0usize);
    for seed in 0..200 {
        let scene = sample_scene(1000 + seed, &gen, &spec).unwrap();
        for line in &scene.centerlines {
            let t = Instant::now();
            let m = ddt_mask(line, &spec).unwrap();
            elapsed += t.elapsed();
            let dense = densify(&line.points, spec.meters_per_cell);
            for row in 0..spec.height_cells {
                for col in 0..spec.width_cells {
                    let c = spec.cell_center(row, col);
                    let d = dense.iter().map(|&p| dist(c, p)).fold(f64::INFINITY, f64::min);
                    let u = d.min(half) / half;
                    let class = ((6.0 * u).floor() as u8).min(5);
                    if m.at(row, col) != class {
                        return outcome(false, format!("scene {seed} line {} cell ({row},{col})", line.id));
                    }
                    cells += 1;
                }
            }
            lines += 1;
        }
    }
    outcome(
        elapsed < DDT_BUDGET,
        format!("{lines} lines, {cells} cells exact; ddt_mask time {:.3}s", elapsed.as_secs_f64()),
    )
}

fn c2_mask_isolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0usize;
    for _ in 0..100 {
        let n = rng.gen_range(1..7);
        let p = rng.gen_range(2..8);
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let c = heads * rng.gen_range(1..5);
        let mut s = ParamStore::new();
        add_attention(&mut s, &mut rng, "a", c).unwrap();
        let mut g = Graph::new();
        let x: Vec<f64> = (0..n * p * c).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let x = g.input(Tensor::matrix(n * p, c, x).unwrap());
        let mask = build_p2p_mask(n, p);
        let att = masked_attention(&mut g, &s, "a", x, x, x, None, Some(&mask), heads).unwrap();
        let w = g.value(att.weights).data();
        let np = n * p;
        for h in 0..heads {
            for a in 0..np {
                for b in 0..np {
                    if a / p != b / p {
                        if w[(h * np + a) * np + b] != 0.0 {
                            return outcome(false, format!("n={n} p={p}: weight {a}->{b} nonzero"));
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    outcome(true, format!("100 configurations, {checked} cross-instance weights exactly 0"))
}

fn c3_integrator() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.scenes = 1;
    let data = Dataset::new(generate_scenes(&cfg).unwrap(), &cfg).unwrap();
    let (n, p) = (cfg.model.n_queries, cfg.model.n_points);
    let input = SceneInput {
        bev: data.bev[0].clone(),
        spec: &cfg.bev,
        traffic: &data.scenes[0].traffic,
        te_seed: 0,
    };
    let mut store = init_params(&cfg.model, cfg.bev.feature_channels, 0).unwrap();
    // aggregation weights start at zero
    let mut g = Graph::new();
    let out = decoder_forward(&mut g, &store, &cfg.model, &input).unwrap();
    let mut mean_err: f64 = 0.0;
    for l in &out.layers {
        let (qi, qp) = (g.value(l.q_ins), g.value(l.q_pts));
        for i in 0..n {
            for c in 0..qi.cols() {
                let m = (0..p).map(|k| qp.at(i * p + k, c)).sum::<f64>() / p as f64;
                mean_err = mean_err.max((qi.at(i, c) - m).abs());
            }
        }
    }

    // aggregation hand case: weights ln(1..P) give point k the share k / Σk
    let w: Vec<f64> = (1..=p).map(|k| (k as f64).ln()).collect();
    let total = (p * (p + 1) / 2) as f64;
    for l in 0..cfg.model.layers {
        store.set(&format!("dec.{l}.w_agg"), Tensor::matrix(1, p, w.clone()).unwrap()).unwrap();
    }
    let mut g = Graph::new();
    let out = decoder_forward(&mut g, &store, &cfg.model, &input).unwrap();
    let mut agg_err: f64 = 0.0;
    for l in &out.layers {
        let (qi, qp) = (g.value(l.q_ins), g.value(l.q_pts));
        for i in 0..n {
            for c in 0..qi.cols() {
                let s: f64 = (0..p).map(|k| (k + 1) as f64 / total * qp.at(i * p + k, c)).sum();
                agg_err = agg_err.max((qi.at(i, c) - s).abs());
            }
        }
    }

    // point update hand case on scalar identity projections
    let mut s = ParamStore::new();
    for proj in ["q", "k", "v", "o"] {
        s.insert(format!("a.{proj}.w"), Tensor::eye(1)).unwrap();
        s.insert(format!("a.{proj}.b"), Tensor::zeros(&[1])).unwrap();
    }
    let mut g = Graph::new();
    let q = g.input(Tensor::matrix(1, 1, vec![1.0]).unwrap());
    let kv = g.input(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
    let bias = g.input(Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap());
    let att = masked_attention(&mut g, &s, "a", q, kv, kv, Some(bias), None, 1).unwrap();
    let qh = g.add(q, att.values).unwrap();
    let upd_err = (g.value(qh).item() - 2.5).abs();

    outcome(
        mean_err <= AGG_MEAN_TOL && agg_err <= HAND_TOL && upd_err <= HAND_TOL,
        format!("zero-weight mean err {mean_err:.1e}, aggregation err {agg_err:.1e}, point update err {upd_err:.1e}"),
    )
}

fn c4_gradcheck() -> Outcome {
    let t = Instant::now();
    let reports = gradcheck(&tiny_config(), 1.0).unwrap();
    let elapsed = t.elapsed();
    let worst = reports.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max);
    let pass = reports.iter().all(|r| r.report.passed) && elapsed < GRADCHECK_BUDGET;
    let scenes: Vec<&str> = reports.iter().map(|r| r.scene.as_str()).collect();
    outcome(
        pass,
        format!("scenes {scenes:?}, max rel err {worst:.2e} (tol 1e-3), {:.1}s", elapsed.as_secs_f64()),
    )
}

fn logit(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

/// Loss value and its derivative with respect to the probability `x`.
fn atl_at(x: f64, y: f64, neg: f64, pos: f64) -> (f64, f64) {
    let mut s = ParamStore::new();
    s.insert("z", Tensor::scalar(logit(x))).unwrap();
    let mut g = Graph::new();
    let z = g.param(&s, "z").unwrap();
    let l = adaptive_topo_loss(&mut g, z, &[y], neg, pos).unwrap();
    let v = g.value(l).item();
    g.backward(l, &mut s).unwrap();
    let dz = s.grad("z").unwrap().item();
    (v, dz / (x * (1.0 - x)))
}

fn c5_atl() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let (v, _) = atl_at(0.5, 0.0, 5.0, 400.0);
    let oracle = (2.5f64).exp() * ln2;
    let e1 = (v - oracle).abs();
    let e1_hand = (v - 8.444).abs();

    let mut bce_err: f64 = 0.0;
    for &x in &[0.1, 0.3, 0.5, 0.8, 0.95] {
        for &y in &[0.0, 1.0] {
            let (v, _) = atl_at(x, y, 0.0, 1.0);
            let bce = -(y * f64::ln(x) + (1.0 - y) * f64::ln(1.0 - x));
            bce_err = bce_err.max((v - bce).abs());
        }
    }

    let grid: Vec<f64> = (1..100).map(|k| k as f64 / 100.0).collect();
    let neg: Vec<f64> = grid.iter().map(|&x| atl_at(x, 0.0, 5.0, 400.0).0).collect();
    let pos: Vec<f64> = grid.iter().map(|&x| atl_at(x, 1.0, 5.0, 400.0).0).collect();
    let mono = neg.windows(2).all(|w| w[1] > w[0]) && pos.windows(2).all(|w| w[1] < w[0]);

    let mut steep = true;
    for &lam in &[1.0, 5.0, 10.0] {
        let (_, d_atl) = atl_at(0.9, 0.0, lam, 400.0);
        let (_, d_bce) = atl_at(0.9, 0.0, 0.0, 400.0);
        steep &= d_atl / d_bce >= (0.9 * lam).exp() - ATL_TOL;
    }
    outcome(
        e1 <= ATL_TOL && bce_err <= ATL_TOL && mono && steep,
        format!(
            "x=0.5 value {v:.6} (e^2.5 ln2 err {e1:.1e}, vs 8.444 {e1_hand:.1e}), BCE collapse err {bce_err:.1e}, monotone {mono}, steepening {steep}"
        ),
    )
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn c6_hungarian() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..1000 {
        let cols = rng.gen_range(1..=6);
        let rows = rng.gen_range(1..=cols);
        let cost: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0..100) as f64).collect();
        let a = hungarian(&cost, rows, cols).unwrap();
        let got: f64 = a.iter().enumerate().map(|(r, &c)| cost[r * cols + c]).sum();
        let best = permutations(cols)
            .iter()
            .map(|perm| (0..rows).map(|r| cost[r * cols + perm[r]]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        if got != best {
            return outcome(false, format!("case {case}: {got} vs brute force {best}"));
        }
    }
    outcome(true, "1000 matrices up to 6x6, optimal cost identical")
}

fn frechet_enumerated(a: &[Point], b: &[Point]) -> f64 {
    // every monotone coupling as a sequence of steps
    fn walk(a: &[Point], b: &[Point], i: usize, j: usize, worst: f64, best: &mut f64) {
        let worst = worst.max(dist(a[i], b[j]));
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(worst);
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, worst, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, worst, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, worst, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

fn c7_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut fr_err: f64 = 0.0;
    for _ in 0..500 {
        let la = rng.gen_range(1..=6);
        let lb = rng.gen_range(1..=6);
        let a: Vec<Point> = (0..la).map(|_| [rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)]).collect();
        let b: Vec<Point> = (0..lb).map(|_| [rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)]).collect();
        fr_err = fr_err.max((frechet(&a, &b).unwrap() - frechet_enumerated(&a, &b)).abs());
    }

    let mut invariant = true;
    for _ in 0..200 {
        let g = rng.gen_range(2..6);
        let adj: Vec<Vec<u8>> = (0..g).map(|i| (0..g).map(|j| u8::from(i != j && rng.gen_bool(0.35))).collect()).collect();
        let probs: Vec<Vec<f64>> = (0..g).map(|_| (0..g).map(|_| rng.gen_range(0..6) as f64 / 6.0).collect()).collect();
        let m: Vec<Option<usize>> = (0..g).map(|i| if rng.gen_bool(0.9) { Some(i) } else { None }).collect();
        let base = top_ll(&probs, &m, &adj);
        let warped: Vec<Vec<f64>> = probs.iter().map(|r| r.iter().map(|&x| (4.0 * x).exp() - 3.0).collect()).collect();
        invariant &= top_ll(&warped, &m, &adj) == base;
    }

    let (t, f) = (true, false);
    let hand = [
        (average_precision(&[t, t], 2), 1.0),
        (average_precision(&[f, t], 1), 0.5),
        (average_precision(&[t, f, t], 2), 0.5 + 0.5 * 2.0 / 3.0),
        (average_precision(&[f, f, t, t], 3), 1.0 / 3.0),
        (average_precision(&[t, f, f, t, f], 4), 0.25 + 0.25 * 0.5),
    ];
    let ap_ok = hand.iter().all(|(v, e)| *v == Some(*e));
    outcome(
        fr_err <= FRECHET_TOL && invariant && ap_ok,
        format!("frechet max err {fr_err:.1e} over 500 cases, TOP rank invariance {invariant}, AP hand cases {ap_ok}"),
    )
}

fn c8_equivariance() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.seed = 31;
    let data = Dataset::new(generate_scenes(&cfg).unwrap(), &cfg).unwrap();
    let (n, p) = (cfg.model.n_queries, cfg.model.n_points);
    let store = init_params(&cfg.model, cfg.bev.feature_channels, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let permute = |t: &Tensor, perm: &[usize], block: usize| {
        let cols = t.len() / (perm.len() * block);
        let mut d = Vec::with_capacity(t.len());
        for &src in perm {
            d.extend_from_slice(&t.data()[src * block * cols..(src + 1) * block * cols]);
        }
        Tensor::new(t.shape().to_vec(), d).unwrap()
    };
    let mut worst: f64 = 0.0;
    for i in 0..data.len() {
        let mut perm: Vec<usize> = (0..n).collect();
        for k in (1..n).rev() {
            perm.swap(k, rng.gen_range(0..=k));
        }
        let mut ps = store.clone();
        for (name, block) in [("query.ins", 1), ("query.pts", p), ("query.ref", p)] {
            ps.set(name, permute(store.get(name).unwrap(), &perm, block)).unwrap();
        }
        let input = SceneInput {
            bev: data.bev[i].clone(),
            spec: &cfg.bev,
            traffic: &data.scenes[i].traffic,
            te_seed: 3,
        };
        let mut ga = Graph::new();
        let a = decoder_forward(&mut ga, &store, &cfg.model, &input).unwrap();
        let mut gb = Graph::new();
        let b = decoder_forward(&mut gb, &ps, &cfg.model, &input).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            let diff = |x: &Tensor, y: &Tensor| x.data().iter().zip(y.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            worst = worst.max(diff(&permute(ga.value(la.cls), &perm, 1), gb.value(lb.cls)));
            worst = worst.max(diff(&permute(ga.value(la.points), &perm, p), gb.value(lb.points)));
            let (ta, tb) = (ga.value(la.topo.l2l), gb.value(lb.topo.l2l));
            for r in 0..n {
                for c in 0..n {
                    worst = worst.max((ta.at(perm[r], perm[c]) - tb.at(r, c)).abs());
                }
            }
        }
    }
    outcome(
        worst <= EQUIVARIANCE_TOL,
        format!("{} scenes, max deviation {worst:.1e}", data.len()),
    )
}

fn c9_cyclic_wiring() -> Outcome {
    let on = RunConfig::default();
    let mut off = on.clone();
    off.model.cyclic = false;
    let data = Dataset::new(generate_scenes(&on).unwrap(), &on).unwrap();
    let store = init_params(&on.model, on.bev.feature_channels, 0).unwrap();
    let input = SceneInput {
        bev: data.bev[0].clone(),
        spec: &on.bev,
        traffic: &data.scenes[0].traffic,
        te_seed: 1,
    };
    let mut ga = Graph::new();
    let a = decoder_forward(&mut ga, &store, &on.model, &input).unwrap();
    let mut gb = Graph::new();
    let b = decoder_forward(&mut gb, &store, &off.model, &input).unwrap();
    let same0 = [
        (a.layers[0].cls, b.layers[0].cls),
        (a.layers[0].points, b.layers[0].points),
        (a.layers[0].q_ins, b.layers[0].q_ins),
        (a.layers[0].topo.l2l, b.layers[0].topo.l2l),
    ]
    .iter()
    .all(|&(x, y)| ga.value(x).data() == gb.value(y).data());
    let differ1 = ga.value(a.layers[1].q_ins).data() != gb.value(b.layers[1].q_ins).data()
        && ga.value(a.layers[1].topo.l2l).data() != gb.value(b.layers[1].topo.l2l).data();
    outcome(same0 && differ1, format!("layer 0 identical {same0}, layer 1 differs {differ1}"))
}

fn desk_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg
}

fn c10_overfit() -> Outcome {
    let mut cfg = desk_config(0);
    cfg.optim.steps = OVERFIT_STEPS;
    let t = Instant::now();
    let data = Dataset::new(generate_scenes(&cfg).unwrap(), &cfg).unwrap();
    let run = train(&cfg, &data, None, None).unwrap();
    let report = evaluate(&run.store, &cfg, &data).unwrap();
    let elapsed = t.elapsed();
    let first = run.log.first().map_or(f64::NAN, |l| l.loss.total);
    let last = run.log.last().map_or(f64::NAN, |l| l.loss.total);
    outcome(
        report.det_l >= OVERFIT_DET_L && report.top_ll >= OVERFIT_TOP_LL && elapsed < OVERFIT_BUDGET,
        format!(
            "DET_l {:.3} (>= {OVERFIT_DET_L}), TOP_ll {:.3} (>= {OVERFIT_TOP_LL}), DET_t {:.3}, TOP_lt {:.3}, loss {first:.1} -> {last:.2}, {:.0}s",
            report.det_l,
            report.top_ll,
            report.det_t,
            report.top_lt,
            elapsed.as_secs_f64()
        ),
    )
}

fn c11_directional() -> Outcome {
    let scenes = generate_scenes(&desk_config(0)).unwrap();
    let mut full = Vec::new();
    let mut bare = Vec::new();
    for seed in ABLATION_SEEDS {
        let mut on = desk_config(seed);
        on.optim.steps = ABLATION_STEPS;
        let mut off = on.clone();
        off.model.cyclic = false;
        off.model.p2i_branch = false;
        off.model.seg_supervision = lanetopo::decoder::SegSupervision::Off;
        for (cfg, acc) in [(&on, &mut full), (&off, &mut bare)] {
            let data = Dataset::new(scenes.clone(), cfg).unwrap();
            let run = train(cfg, &data, None, None).unwrap();
            acc.push(evaluate(&run.store, cfg, &data).unwrap().top_ll);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&full), mean(&bare));
    outcome(
        a >= b,
        format!("mean TOP_ll with cyclic+p2i+ddt {a:.3} {full:.3?} vs without {b:.3} {bare:.3?}, {ABLATION_STEPS} steps; direction holds: {}", a >= b),
    )
}

#[test]
fn acceptance() {
    let gated: Vec<(usize, &str, fn() -> Outcome)> = vec![
        (1, "DDT oracle", c1_ddt_oracle),
        (2, "mask isolation", c2_mask_isolation),
        (3, "integrator contracts", c3_integrator),
        (4, "gradient suite", c4_gradcheck),
        (5, "adaptive loss arithmetic", c5_atl),
        (6, "hungarian vs brute force", c6_hungarian),
        (7, "metric oracles", c7_metrics),
        (8, "permutation equivariance", c8_equivariance),
        (9, "cyclic wiring", c9_cyclic_wiring),
        (10, "overfit smoke", c10_overfit),
    ];
    let mut failed = Vec::new();
    for (n, name, f) in gated {
        if !run_criterion(n, name, f) {
            failed.push(n);
        }
    }
    run_criterion(11, "directional ablation", c11_directional);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
