//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run everything with `cargo test -p relcast --test acceptance`, or pick
//! criteria by number: `cargo test -p relcast --test acceptance -- 4 9`.

use std::cell::OnceCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use diffmath::gradcheck::{check_inputs, check_params, GradReport};
use diffmath::nn::{Activation, Conv1dResidual, GruCell, Linear, Mlp};
use diffmath::{ParamId, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use relcast::cache::{cache_load, cache_store, compute_map_embedding, CacheLookup, StaleReason};
use relcast::config::{Domain, FrameMode, ModelConfig, SamplerConfig, TrainConfig};
use relcast::decoder::{forecast, forecast_prepared, greedy_sample, write_forecasts, AgentForecast, GoalPick, Mode};
use relcast::encoders::{encode, encode_history, encode_lane_graph, SceneInputs};
use relcast::evaluation::bench::{runtime_bench, BenchConfig, EncodeMode};
use relcast::evaluation::metrics::agent_metrics;
use relcast::evaluation::{evaluate, evaluate_constant_velocity, metrics, sweep_with, viewpoint_sweep};
use relcast::geometry::{FreqBank, Pose2, Se2, Vec2};
use relcast::hmp::{EdgeAttr, EdgeSet, HeteroGraph, HmpStack};
use relcast::lanegraph::lane_graph;
use relcast::model::Model;
use relcast::scenarios::io::write_scenarios;
use relcast::scenarios::templates::multi_lane_straight;
use relcast::scenarios::{generate, generate_dataset, BehaviorMix, Template};
use relcast::track::{AgentClass, AgentTrack, Scenario};
use relcast::training::{prepare_sample, read_history, scene_loss, train, TrainOptions};

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn random_se2(r: &mut ChaCha8Rng) -> Se2 {
    Se2::new(
        r.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        [r.gen_range(-1000.0..1000.0), r.gen_range(-1000.0..1000.0)],
    )
}

/// Mixed urban and highway scenarios over every template.
fn mixed_scenarios(count: usize, seed: u64) -> Result<Vec<Scenario>, String> {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let domain = if i % 2 == 0 { Domain::Highway } else { Domain::Urban };
        let templates = Template::for_domain(domain);
        let t = templates[(i / 2) % templates.len()];
        let n = r.gen_range(1..=5);
        out.push(generate(t, domain, n, &BehaviorMix::for_domain(domain), r.gen()).map_err(e)?);
    }
    Ok(out)
}

/// Largest discrepancy between forecasts on the moved scene and the
/// original forecasts moved by `t`.
fn forecast_gap(a: &[AgentForecast], b: &[AgentForecast], t: &Se2) -> Result<f64, String> {
    ensure(a.len() == b.len(), || "forecast counts differ".into())?;
    let mut gap: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        ensure(x.agent_id == y.agent_id && x.modes.len() == y.modes.len(), || "agent mismatch".into())?;
        for (m, n) in x.modes.iter().zip(&y.modes) {
            if m.node != n.node {
                return Ok(f64::INFINITY);
            }
            gap = gap.max((m.probability - n.probability).abs());
            for (p, q) in m.waypoints.iter().zip(&n.waypoints) {
                let p = t.apply_point(*p);
                gap = gap.max((p[0] - q[0]).abs()).max((p[1] - q[1]).abs());
            }
        }
    }
    Ok(gap)
}

// ---------------------------------------------------------------- 1

fn c1_end_to_end_invariance() -> Outcome {
    let scenarios = mixed_scenarios(100, 101)?;
    let sampler = SamplerConfig::default();
    let mut r = rng(102);
    let mut worst = [0.0f64; 2];
    for domain in [Domain::Highway, Domain::Urban] {
        let m64 = Model::<f64>::new(&ModelConfig::compact(domain), 7).map_err(e)?;
        let m32: Model<f32> = m64.cast().map_err(e)?;
        for sc in scenarios.iter().filter(|s| s.domain == domain) {
            let t = random_se2(&mut r);
            let moved = sc.transformed(&t);
            let a = forecast(&m64, sc, &sampler, None).map_err(e)?;
            let b = forecast(&m64, &moved, &sampler, None).map_err(e)?;
            worst[0] = worst[0].max(forecast_gap(&a, &b, &t)?);
            let a = forecast(&m32, sc, &sampler, None).map_err(e)?;
            let b = forecast(&m32, &moved, &sampler, None).map_err(e)?;
            worst[1] = worst[1].max(forecast_gap(&a, &b, &t)?);
        }
    }
    let detail = format!("{} scenarios, max gap f64 {:.2e}, f32 {:.2e}", scenarios.len(), worst[0], worst[1]);
    ensure(worst[0] <= 1e-9 && worst[1] <= 1e-5, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 2

fn c2_encoding_invariance() -> Outcome {
    let mut r = rng(201);
    let bank = FreqBank::new(16, -1.0).map_err(e)?;
    let mut geom: f64 = 0.0;
    for _ in 0..1000 {
        let a = Pose2::from_angle([r.gen_range(-200.0..200.0), r.gen_range(-200.0..200.0)], r.gen_range(-4.0..4.0));
        let b = Pose2::from_angle([r.gen_range(-200.0..200.0), r.gen_range(-200.0..200.0)], r.gen_range(-4.0..4.0));
        let t = random_se2(&mut r);
        let x = bank.rel_geom(&a, &b).to_vec();
        let y = bank.rel_geom(&t.apply(&a), &t.apply(&b)).to_vec();
        geom = x.iter().zip(&y).fold(geom, |g, (p, q)| g.max((p - q).abs()));
    }
    let scenarios = mixed_scenarios(30, 202)?;
    let mut emb: f64 = 0.0;
    for domain in [Domain::Highway, Domain::Urban] {
        let model = Model::<f64>::new(&ModelConfig::compact(domain), 3).map_err(e)?;
        let run = |sc: &Scenario| -> Result<Vec<Tensor<f64>>, String> {
            let si = SceneInputs::from_scenario(&model.net, sc).map_err(e)?;
            let mut tape = Tape::new();
            let h = encode_history(&mut tape, &model, &si.history).map_err(e)?;
            let l = encode_lane_graph(&mut tape, &model, &si.lane).map_err(e)?;
            let s = encode(&mut tape, &model, &si, None).map_err(e)?;
            Ok([h, l, s.agents, s.map].iter().map(|v| tape.value(*v).clone()).collect())
        };
        for sc in scenarios.iter().filter(|s| s.domain == domain) {
            let base = run(sc)?;
            let moved = run(&sc.transformed(&random_se2(&mut r)))?;
            for (x, y) in base.iter().zip(&moved) {
                emb = emb.max(x.max_abs_diff(y));
            }
        }
    }
    let detail = format!("rel_geom max diff {geom:.2e} (1000 pairs), embeddings {emb:.2e} (30 scenes)");
    ensure(geom <= 1e-9 && emb <= 1e-9, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 3

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    // magnitudes kept away from zero so relu kinks are not straddled
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| r.gen_range(0.1..1.0) * if r.gen() { 1.0 } else { -1.0 })
            .collect(),
    )
    .unwrap()
}

/// Two vehicles on a short two-lane road; 24 lane-graph nodes.
fn small_scene() -> Scenario {
    let domain = Domain::Highway;
    let map = multi_lane_straight(2, 120.0, 25.0);
    let hist = domain.history_len();
    let agents = (0..2)
        .map(|i| {
            let y = map.lanes[i].centerline[0][1];
            let v = 7.0 + i as f64;
            let x0 = 10.0 + 5.0 * i as f64;
            let poses = (0..hist)
                .map(|t| Pose2::from_angle([x0 + 0.1 * v * t as f64, y], 0.0))
                .collect::<Vec<_>>();
            let now = poses[hist - 1].c;
            let future = (1..=domain.future_len())
                .map(|k| {
                    let s = k as f64 * domain.future_dt();
                    [now[0] + v * s, now[1] + 0.02 * i as f64 * s * s]
                })
                .collect::<Vec<_>>();
            AgentTrack {
                id: i as u32 + 1,
                class: AgentClass::Vehicle,
                size: [4.5, 2.0],
                poses,
                velocities: vec![[v, 0.0]; hist],
                observed: vec![true; hist],
                future_valid: vec![true; future.len()],
                future,
            }
        })
        .collect();
    Scenario {
        id: 0,
        domain,
        template: "small".into(),
        map,
        agents,
    }
}

fn c3_gradients() -> Outcome {
    const EPS: f64 = 1e-6;
    const EPS_LOSS: f64 = 1e-5;
    let mut r = rng(301);
    let mut results: Vec<(&str, GradReport)> = Vec::new();
    let a = random_matrix(&mut r, 3, 4);
    let b = random_matrix(&mut r, 3, 4);
    let c = random_matrix(&mut r, 4, 2);
    let bias = Tensor::vector(vec![0.3, -0.1, 0.7, 0.2]);
    let w = random_matrix(&mut r, 3, 4);
    type Unary = fn(&mut Tape<f64>, diffmath::Var) -> diffmath::Result<diffmath::Var>;
    let unary: Vec<(&str, Unary)> = vec![
        ("affine", |t, x| t.affine(x, -0.7, 0.2)),
        ("scale", |t, x| t.scale(x, 1.3)),
        ("relu", |t, x| t.relu(x)),
        ("sigmoid", |t, x| t.sigmoid(x)),
        ("tanh", |t, x| t.tanh(x)),
        ("slice_cols", |t, x| t.slice_cols(x, 1, 2)),
        ("slice_rows", |t, x| t.slice_rows(x, 1, 2)),
        ("gather_rows", |t, x| t.gather_rows(x, &[2, 0, 2, 1])),
        ("reshape", |t, x| t.reshape(x, vec![4, 3])),
        ("mean", |t, x| t.mean(x)),
        ("segment_max", |t, x| t.segment_max(x, &[1, 0, 1], 3)),
    ];
    // weighted sum with a fixed random weight keeps every output entry in play
    let reduce = |t: &mut Tape<f64>, y: diffmath::Var| -> diffmath::Result<diffmath::Var> {
        let v = t.value(y).clone();
        let wt = Tensor::new(v.shape().to_vec(), (0..v.len()).map(|i| 0.5 + (i % 7) as f64 * 0.3).collect())?;
        let wv = t.constant(wt)?;
        let p = t.mul(y, wv)?;
        t.sum(p)
    };
    for (name, op) in &unary {
        let rep = check_inputs(&[a.clone()], |t, v| {
            let y = op(t, v[0])?;
            reduce(t, y)
        }, EPS)
        .map_err(e)?;
        results.push((name, rep));
    }
    let binary: Vec<(&str, Tensor<f64>, Tensor<f64>, fn(&mut Tape<f64>, diffmath::Var, diffmath::Var) -> diffmath::Result<diffmath::Var>)> = vec![
        ("add", a.clone(), b.clone(), |t, x, y| t.add(x, y)),
        ("sub", a.clone(), b.clone(), |t, x, y| t.sub(x, y)),
        ("mul", a.clone(), b.clone(), |t, x, y| t.mul(x, y)),
        ("matmul", a.clone(), c.clone(), |t, x, y| t.matmul(x, y)),
        ("add_row", a.clone(), bias.clone(), |t, x, y| t.add_row(x, y)),
        ("concat_cols", a.clone(), random_matrix(&mut r, 3, 2), |t, x, y| t.concat_cols(&[x, y])),
        ("concat_rows", a.clone(), w.clone(), |t, x, y| t.concat_rows(&[x, y])),
    ];
    for (name, x, y, op) in &binary {
        let rep = check_inputs(&[x.clone(), y.clone()], |t, v| {
            let out = op(t, v[0], v[1])?;
            reduce(t, out)
        }, EPS)
        .map_err(e)?;
        results.push((name, rep));
    }
    let logits = Tensor::vector(vec![0.3, -1.2, 0.8, 0.1, -0.4]);
    for gamma in [0.0, 2.0] {
        let rep = check_inputs(&[logits.clone()], |t, v| t.focal_loss(v[0], 2, gamma), EPS).map_err(e)?;
        results.push(("focal_loss", rep));
    }
    let target = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 - 5.0) * 0.4).collect()).unwrap();
    let rep = check_inputs(&[a.clone()], |t, v| t.huber(v[0], &target, 1.0), EPS).map_err(e)?;
    results.push(("huber", rep));

    // layers, with respect to parameters and inputs
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, &mut r, "lin", 4, 3).map_err(e)?;
    let mlp = Mlp::new(&mut store, &mut r, "mlp", 4, &[(5, Activation::Relu), (2, Activation::None)]).map_err(e)?;
    let conv = Conv1dResidual::new(&mut store, &mut r, "conv", 4, 3, 3).map_err(e)?;
    let gru = GruCell::new(&mut store, &mut r, "gru", 4, 3).map_err(e)?;
    let seq = random_matrix(&mut r, 6, 4);
    let h0 = random_matrix(&mut r, 6, 3);
    let layers = |t: &mut Tape<f64>, s: &ParamStore<f64>, x: diffmath::Var| -> diffmath::Result<diffmath::Var> {
        let y1 = lin.forward(t, s, x)?;
        let y2 = mlp.forward(t, s, x)?;
        let y3 = conv.forward(t, s, x, 2, 3)?;
        let h = t.constant(h0.clone())?;
        let y4 = gru.forward(t, s, h, x)?;
        let parts = [reduce(t, y1)?, reduce(t, y2)?, reduce(t, y3)?, reduce(t, y4)?];
        let ab = t.add(parts[0], parts[1])?;
        let cd = t.add(parts[2], parts[3])?;
        t.add(ab, cd)
    };
    let rep = check_params(&mut store, |t, s| {
        let x = t.constant(seq.clone())?;
        layers(t, s, x)
    }, EPS, None)
    .map_err(e)?;
    results.push(("linear/mlp/conv1d/gru params", rep));
    let rep = check_inputs(&[seq.clone()], |t, v| layers(t, &store, v[0]), EPS).map_err(e)?;
    results.push(("linear/mlp/conv1d/gru inputs", rep));

    // heterogeneous message passing with edge attributes
    let mut store = ParamStore::<f64>::new();
    let stack = HmpStack::new(&mut store, &mut r, "hmp", 2, 2, 3, 3, 2).map_err(e)?;
    let line = |n: usize| (0..n).map(|i| Pose2::from_angle([i as f64, 0.0], 0.0)).collect::<Vec<_>>();
    let g = HeteroGraph {
        poses: vec![line(3), line(2)],
        edge_sets: vec![
            EdgeSet::new(0, 0, 0, &[(0, 1), (1, 2), (2, 0)]),
            EdgeSet::new(1, 1, 0, &[(0, 2), (1, 2)]),
            EdgeSet::new(2, 0, 1, &[(0, 0), (2, 1)]),
        ],
    };
    let x0 = random_matrix(&mut r, 3, 3);
    let x1 = random_matrix(&mut r, 2, 3);
    let attrs: Vec<Tensor<f64>> = g.edge_sets.iter().map(|es| random_matrix(&mut r, es.len(), 2)).collect();
    let rep = check_params(&mut store, |t, s| {
        let a = t.constant(x0.clone())?;
        let b = t.constant(x1.clone())?;
        let av = attrs.iter().map(|x| t.constant(x.clone()).map(EdgeAttr::Rows)).collect::<diffmath::Result<Vec<_>>>()?;
        let out = stack
            .forward(t, s, &g, &[a, b], &av)
            .map_err(|err| diffmath::DiffError::InvalidArgument(err.to_string()))?;
        let cat = t.concat_rows(&out)?;
        reduce(t, cat)
    }, EPS, None)
    .map_err(e)?;
    results.push(("hmp stack", rep));

    // full training objective on a small scene, sampled parameter entries
    let cfg = ModelConfig {
        hidden: 8,
        pair_dim: 4,
        n_freq: 4,
        ..ModelConfig::compact(Domain::Highway)
    };
    let mut model = Model::<f64>::new(&cfg, 11).map_err(e)?;
    let sc = small_scene();
    let tcfg = TrainConfig::default();
    let sample = prepare_sample(&model, &sc, tcfg.margin).map_err(e)?;
    ensure(sample.mask.any(), || "gradient scene has no supervision".into())?;
    let net = model.net.clone();
    let rep = check_params(&mut model.store, |t, s| {
        let m = Model { net: net.clone(), store: s.clone() };
        let (loss, _) = scene_loss(t, &m, &sample.inputs, &sample.mask, sample.mask.norm(), &tcfg)
            .map_err(|err| diffmath::DiffError::InvalidArgument(err.to_string()))?
            .expect("supervised");
        Ok(loss)
    }, EPS_LOSS, None)
    .map_err(e)?;
    results.push(("full training loss", rep));
    // detach blocks the gradient exactly
    let mut tape = Tape::new();
    let x = tape.input(a.clone()).map_err(e)?;
    let d = tape.detach(x).map_err(e)?;
    let sq = tape.mul(d, d).map_err(e)?;
    let both = tape.add(sq, x).map_err(e)?;
    let out = tape.sum(both).map_err(e)?;
    let g = tape.backward(out).map_err(e)?;
    ensure(g.wrt(x).map(|t| t.data().iter().all(|&v| v == 1.0)) == Some(true), || "detach leaks gradient".into())?;

    let worst = results
        .iter()
        .max_by(|x, y| x.1.max_rel_err.total_cmp(&y.1.max_rel_err))
        .unwrap();
    let checked: usize = results.iter().map(|x| x.1.checked).sum();
    let detail = format!(
        "{} checks, {checked} entries, worst rel err {:.2e} ({})",
        results.len(),
        worst.1.max_rel_err,
        worst.0
    );
    let failing: Vec<String> = results
        .iter()
        .filter(|x| !(x.1.max_rel_err < 1e-5))
        .map(|x| format!("{} {:.2e}", x.0, x.1.max_rel_err))
        .collect();
    ensure(failing.is_empty(), || format!("{detail}; failing: {}", failing.join(", ")))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 4

/// Reference greedy selection written directly from the rule: among nodes
/// farther than gamma from every pick, take the highest probability divided
/// by tau once per pick within nu; first index wins ties. Distances within
/// 1e-9 m of a threshold count as on the threshold.
fn naive_sampler(probs: &[f64], centers: &[Vec2], k: usize, gamma: f64, nu: f64, tau: f64) -> Vec<(usize, f64)> {
    let d = |i: usize, j: usize| ((centers[i][0] - centers[j][0]).powi(2) + (centers[i][1] - centers[j][1]).powi(2)).sqrt();
    let mut picks: Vec<usize> = Vec::new();
    while picks.len() < k {
        let mut best: Option<usize> = None;
        let mut best_score = f64::NEG_INFINITY;
        for i in 0..probs.len() {
            if picks.iter().any(|&p| d(i, p) < gamma - 1e-9) {
                continue;
            }
            let near = picks.iter().filter(|&&p| d(i, p) < nu - 1e-9).count() as i32;
            let score = probs[i] / tau.powi(near);
            if best.is_none() || score > best_score {
                best = Some(i);
                best_score = score;
            }
        }
        match best {
            Some(i) => picks.push(i),
            None => break,
        }
    }
    let mass: Vec<f64> = picks.iter().map(|&i| probs[i].max(f64::MIN_POSITIVE)).collect();
    let total: f64 = mass.iter().sum();
    let mut out: Vec<(usize, f64)> = picks.iter().zip(&mass).map(|(&i, &m)| (i, m / total)).collect();
    if out.len() < k {
        let (node, p) = out.pop().unwrap();
        let copies = k - out.len();
        out.extend(std::iter::repeat((node, p / copies as f64)).take(copies));
    }
    out
}

fn adversarial_field(r: &mut ChaCha8Rng, case: usize) -> (Vec<f64>, Vec<Vec2>) {
    match case % 5 {
        // equal probabilities on a grid whose spacing hits gamma and nu
        // exactly, sometimes rotated so the distances carry rounding error
        0 => {
            let side = r.gen_range(2..8);
            let spacing = [1.0, 2.0, 4.0][r.gen_range(0..3)];
            let t = if r.gen_bool(0.5) { random_se2(r) } else { Se2::identity() };
            let centers: Vec<Vec2> = (0..side * side)
                .map(|i| t.apply_point([(i % side) as f64 * spacing, (i / side) as f64 * spacing]))
                .collect();
            (vec![1.0 / centers.len() as f64; centers.len()], centers)
        }
        // fewer candidates than modes
        1 => {
            let n = r.gen_range(1..6);
            let centers = (0..n).map(|i| [i as f64 * 10.0, 0.0]).collect();
            let probs = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
            (probs, centers)
        }
        // everything inside gamma of the first pick
        2 => {
            let n = r.gen_range(2..20);
            let centers = (0..n).map(|_| [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)]).collect();
            let probs = (0..n).map(|_| (r.gen_range(0..3) as f64) * 0.25).collect();
            (probs, centers)
        }
        // duplicated centers and tied probabilities
        3 => {
            let n = r.gen_range(4..40);
            let centers: Vec<Vec2> = (0..n).map(|i| [(i / 3) as f64 * 3.0, 0.0]).collect();
            let probs = (0..n).map(|i| if i % 2 == 0 { 0.5 } else { 0.05 }).collect();
            (probs, centers)
        }
        // zero probabilities with one dominant node
        _ => {
            let n = r.gen_range(3..30);
            let centers = (0..n).map(|_| [r.gen_range(-20.0..20.0), r.gen_range(-20.0..20.0)]).collect();
            let mut probs = vec![0.0; n];
            probs[r.gen_range(0..n)] = 1.0;
            (probs, centers)
        }
    }
}

fn c4_sampler_oracle() -> Outcome {
    let cfg = SamplerConfig::default();
    ensure((cfg.gamma, cfg.nu, cfg.tau) == (2.0, 4.0, 10.0), || "unexpected sampler defaults".into())?;
    let mut r = rng(401);
    let mut fields = Vec::new();
    for _ in 0..200 {
        let n = r.gen_range(1..300);
        let extent = r.gen_range(5.0..80.0);
        let centers: Vec<Vec2> = (0..n).map(|_| [r.gen_range(0.0..extent), r.gen_range(0.0..extent)]).collect();
        let raw: Vec<f64> = (0..n).map(|_| r.gen_range(0.0f64..1.0).powi(3)).collect();
        let s: f64 = raw.iter().sum();
        fields.push((raw.iter().map(|p| p / s).collect::<Vec<_>>(), centers));
    }
    for case in 0..50 {
        fields.push(adversarial_field(&mut r, case));
    }
    let mut mismatches = 0;
    for (probs, centers) in &fields {
        let got: Vec<GoalPick> = greedy_sample(probs, centers, &cfg).map_err(e)?;
        let want = naive_sampler(probs, centers, cfg.k, cfg.gamma, cfg.nu, cfg.tau);
        let same = got.len() == want.len()
            && got.iter().zip(&want).all(|(g, w)| g.node == w.0 && g.prob == w.1);
        if !same {
            mismatches += 1;
        }
    }
    let detail = format!("{} fields (200 random, 50 adversarial), {mismatches} mismatches", fields.len());
    ensure(mismatches == 0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 5

fn c5_cache() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let sampler = SamplerConfig::default();
    let mut r = rng(501);
    let scenarios = mixed_scenarios(20, 502)?;
    let mut gap: f64 = 0.0;
    let (mut stale_total, mut stale_found) = (0usize, 0usize);
    for domain in [Domain::Highway, Domain::Urban] {
        let model = Model::<f64>::new(&ModelConfig::compact(domain), 5).map_err(e)?;
        let wh = model.checkpoint_hash();
        for sc in scenarios.iter().filter(|s| s.domain == domain) {
            let si = SceneInputs::from_scenario(&model.net, sc).map_err(e)?;
            let path = dir.path().join(format!("{}.rcmc", sc.id));
            let emb = compute_map_embedding(&model, &si.lane).map_err(e)?;
            cache_store(&path, &si.lane.graph, &emb, &wh).map_err(e)?;
            let cached = match cache_load::<f64>(&path, &si.lane.graph, &wh).map_err(e)? {
                CacheLookup::Hit(t) => t,
                other => return Err(format!("expected a cache hit, got {other:?}")),
            };
            let ids: Vec<u32> = sc.agents.iter().map(|a| a.id).collect();
            let fresh = forecast(&model, sc, &sampler, None).map_err(e)?;
            let warm = forecast_prepared(&model, &si, &ids, sc.id, &sampler, Some(&cached)).map_err(e)?;
            gap = gap.max(forecast_gap(&fresh, &warm, &Se2::identity())?);

            // modified maps: a moved vertex, a new speed limit or a new lane width
            for trial in 0..6 {
                let mut map = sc.map.clone();
                let lane = r.gen_range(0..map.lanes.len());
                let l = &mut map.lanes[lane];
                match trial % 3 {
                    0 => {
                        let v = r.gen_range(0..l.centerline.len());
                        l.centerline[v][r.gen_range(0..2)] += r.gen_range(0.01..1.0) * if r.gen() { 1.0 } else { -1.0 };
                    }
                    1 => l.speed_limit += r.gen_range(0.5..5.0),
                    _ => l.width *= r.gen_range(0.8..0.99),
                }
                let g = lane_graph(&map, domain.interval(), model.cfg().conflict_radius).map_err(e)?;
                stale_total += 1;
                if cache_load::<f64>(&path, &g, &wh).map_err(e)? == CacheLookup::Stale(StaleReason::GraphChanged) {
                    stale_found += 1;
                }
            }
            // modified checkpoints: nudge one weight
            for _ in 0..5 {
                let mut other = model.cast::<f64>().map_err(e)?;
                let ids: Vec<ParamId> = other.store.ids().collect();
                let id = *ids.choose(&mut r).unwrap();
                let n = other.store.value(id).len();
                let j = r.gen_range(0..n);
                let v = &mut other.store.value_mut(id).data_mut()[j];
                *v = if r.gen() { v.next_up() } else { *v + r.gen_range(-0.1..0.1) };
                stale_total += 1;
                if other.checkpoint_hash() != wh
                    && cache_load::<f64>(&path, &si.lane.graph, &other.checkpoint_hash()).map_err(e)?
                        == CacheLookup::Stale(StaleReason::WeightsChanged)
                {
                    stale_found += 1;
                }
            }
            // a different precision never reuses the entry
            stale_total += 1;
            if cache_load::<f32>(&path, &si.lane.graph, &wh).map_err(e)? == CacheLookup::Stale(StaleReason::DTypeChanged) {
                stale_found += 1;
            }
        }
    }
    let detail = format!("max cached/fresh gap {gap:.2e}; stale detected {stale_found}/{stale_total}");
    ensure(gap <= 1e-9 && stale_found == stale_total, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 6

fn c6_runtime() -> Outcome {
    let model = Model::<f32>::new(&ModelConfig::compact(Domain::Highway), 6).map_err(e)?;
    let cfg = BenchConfig::default();
    ensure(cfg.trials >= 20 && cfg.fixed_nodes == 250, || "benchmark configuration too small".into())?;
    let rows = runtime_bench(&model, &cfg, &SamplerConfig::default(), 1e-3).map_err(e)?;
    let pick = |mode: EncodeMode, agents: usize| {
        rows.iter()
            .find(|r| r.sweep == "agents" && r.mode == mode && r.agents == agents)
            .map(|r| r.median_ms)
            .unwrap()
    };
    let shared = pick(EncodeMode::Shared, 40) / pick(EncodeMode::Shared, 1);
    let per_agent = pick(EncodeMode::PerAgent, 40) / pick(EncodeMode::PerAgent, 1);
    let detail = format!(
        "250 nodes, 1 -> 40 agents: shared {shared:.2}x, per-agent {per_agent:.2}x (median of {})",
        cfg.trials
    );
    ensure(shared <= 1.5 && per_agent >= 3.0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 7 and 8

struct Trained {
    model: Model<f32>,
    train_set: Vec<Scenario>,
    holdout: Vec<Scenario>,
    seconds: f64,
}

fn learning_config() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: 8,
        lr: 1e-3,
        lr_step: 20,
        eval_every: 0,
        seed: 8,
        ..TrainConfig::default()
    }
}

fn train_toy() -> Result<Trained, String> {
    let t0 = Instant::now();
    let mix = BehaviorMix::for_domain(Domain::Urban);
    let templates = [Template::Fork, Template::Intersection];
    let train_set = generate_dataset(&templates, Domain::Urban, 500, (2, 6), &mix, 801).map_err(e)?;
    let holdout = generate_dataset(&templates, Domain::Urban, 100, (2, 6), &mix, 802).map_err(e)?;
    let mut model = Model::<f32>::new(&ModelConfig::compact(Domain::Urban), 8).map_err(e)?;
    train(&mut model, &train_set, &[], &learning_config(), &TrainOptions::default()).map_err(e)?;
    Ok(Trained {
        model,
        train_set,
        holdout,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

fn c7_viewpoint_sweep(toy: &Trained) -> Outcome {
    let t0 = Instant::now();
    let sampler = SamplerConfig::default();
    let eval_set = &toy.holdout[..50];
    let model: Model<f64> = toy.model.cast().map_err(e)?;
    let rel = viewpoint_sweep(&model, eval_set, &sampler, 8, 701).map_err(e)?;

    let mut global = Model::<f32>::new(
        &ModelConfig {
            frame: FrameMode::Global,
            ..ModelConfig::compact(Domain::Urban)
        },
        8,
    )
    .map_err(e)?;
    let brief = TrainConfig {
        epochs: 3,
        ..learning_config()
    };
    train(&mut global, &toy.train_set[..100], &[], &brief, &TrainOptions::default()).map_err(e)?;
    let global: Model<f64> = global.cast().map_err(e)?;
    let glob = viewpoint_sweep(&global, eval_set, &sampler, 8, 701).map_err(e)?;

    // rotation of the zero bucket by zero is plain evaluation
    let zero = sweep_with(&model, eval_set, &sampler, 1, |_, _| 0.0).map_err(e)?;
    let (_, plain) = evaluate(&model, eval_set, &sampler).map_err(e)?;

    let detail = format!(
        "trained: mean {:.4}, variance {:.2e} (limit {:.2e}); global ablation variance {:.2e}; {:.0} s",
        rel.mean,
        rel.variance,
        1e-6 * rel.mean,
        glob.variance,
        t0.elapsed().as_secs_f64() + toy.seconds
    );
    ensure(
        rel.variance <= 1e-6 * rel.mean
            && glob.variance > rel.variance
            && zero.buckets[0].brier_fde_k == plain.aggregate.brier_fde_k,
        || detail.clone(),
    )?;
    Ok(detail)
}

fn c8_learning_signal(toy: &Trained) -> Outcome {
    let sampler = SamplerConfig::default();
    let (_, report) = evaluate(&toy.model, &toy.holdout, &sampler).map_err(e)?;
    let cv = evaluate_constant_velocity(&toy.holdout).map_err(e)?;
    let fork = report.filtered(&toy.holdout, &["fork"]);
    let gain = 1.0 - report.aggregate.min_fde_1 / cv.aggregate.min_fde_1;
    let detail = format!(
        "minFDE@1 {:.2} vs constant velocity {:.2} ({:.0}% better); fork MR@6 {:.3} over {} agents; trained in {:.0} s",
        report.aggregate.min_fde_1,
        cv.aggregate.min_fde_1,
        100.0 * gain,
        fork.mr_k,
        fork.agents,
        toy.seconds
    );
    ensure(gain >= 0.30 && fork.mr_k < 0.5 && fork.agents > 0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

struct Naive {
    min_ade: f64,
    min_fde: f64,
    brier: f64,
    miss: f64,
    ate: f64,
    cte: f64,
    penalty: f64,
}

/// Loop oracle for one agent at `k` modes.
fn naive_metrics(modes: &[Mode], gt: &[Vec2], heading: Vec2, k: usize) -> Naive {
    let t = gt.len();
    let l2 = |p: Vec2, q: Vec2| (p[0] - q[0]).hypot(p[1] - q[1]);
    let mut best = 0;
    let mut best_fde = f64::INFINITY;
    let mut min_ade = f64::INFINITY;
    for (i, m) in modes.iter().take(k).enumerate() {
        let fde = l2(m.waypoints[t - 1], gt[t - 1]);
        if fde < best_fde {
            best_fde = fde;
            best = i;
        }
        let mut s = 0.0;
        for j in 0..t {
            s += l2(m.waypoints[j], gt[j]);
        }
        min_ade = min_ade.min(s / t as f64);
    }
    // endpoint tangent: backward difference, falling back along the track
    let mut tangent = heading;
    for j in 0..t {
        let (a, b) = if t == 1 {
            (0, 0)
        } else if j == 0 {
            (0, 1)
        } else if j == t - 1 {
            (j - 1, j)
        } else {
            (j - 1, j + 1)
        };
        let d = [gt[b][0] - gt[a][0], gt[b][1] - gt[a][1]];
        let n = d[0].hypot(d[1]);
        if n >= 1e-12 {
            tangent = [d[0] / n, d[1] / n];
        }
    }
    let err = [modes[best].waypoints[t - 1][0] - gt[t - 1][0], modes[best].waypoints[t - 1][1] - gt[t - 1][1]];
    let penalty = (1.0 - modes[best].probability).powi(2);
    Naive {
        min_ade,
        min_fde: best_fde,
        brier: best_fde + penalty,
        miss: if best_fde > 2.0 { 1.0 } else { 0.0 },
        ate: (err[0] * tangent[0] + err[1] * tangent[1]).abs(),
        cte: (tangent[0] * err[1] - tangent[1] * err[0]).abs(),
        penalty,
    }
}

fn random_case(r: &mut ChaCha8Rng, id: u32, t: usize) -> (AgentTrack, AgentForecast) {
    let heading = r.gen_range(-3.0..3.0f64);
    let h = [heading.cos(), heading.sin()];
    let stationary = r.gen_bool(0.1);
    let mut p = [r.gen_range(-50.0..50.0), r.gen_range(-50.0..50.0)];
    let mut gt = Vec::with_capacity(t);
    let mut dir = heading;
    for _ in 0..t {
        if !stationary {
            dir += r.gen_range(-0.2..0.2);
            let step = r.gen_range(0.0..2.0);
            p = [p[0] + step * dir.cos(), p[1] + step * dir.sin()];
        }
        gt.push(p);
    }
    let k = 6;
    let mut probs: Vec<f64> = (0..k).map(|_| r.gen_range(0.0..1.0)).collect();
    let s: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|x| *x /= s);
    let mut modes: Vec<Mode> = (0..k)
        .map(|i| {
            let noise = r.gen_range(0.0..6.0);
            let waypoints: Vec<Vec2> = gt
                .iter()
                .map(|q| [q[0] + r.gen_range(-noise..noise), q[1] + r.gen_range(-noise..noise)])
                .collect();
            Mode {
                probability: probs[i],
                goal: *waypoints.last().unwrap(),
                node: i,
                waypoints,
            }
        })
        .collect();
    if r.gen_bool(0.2) {
        // exact FDE tie between two modes
        let w = modes[1].waypoints.clone();
        modes[3].waypoints = w;
    }
    let track = AgentTrack {
        id,
        class: AgentClass::Vehicle,
        size: [4.5, 2.0],
        poses: vec![Pose2 { c: gt[0], h }],
        velocities: vec![[0.0, 0.0]],
        observed: vec![true],
        future: gt,
        future_valid: vec![true; t],
    };
    let f = AgentForecast {
        scenario_id: 0,
        agent_id: id,
        modes,
    };
    (track, f)
}

fn c9_metric_oracle() -> Outcome {
    let mut r = rng(901);
    let (mut compared, mut mismatches) = (0usize, 0usize);
    let mut decomposition: f64 = 0.0;
    let base = generate(Template::Straight, Domain::Highway, 1, &BehaviorMix::for_domain(Domain::Highway), 0).map_err(e)?;
    for set in 0..100u64 {
        let t = if set % 10 == 0 { 1 } else { r.gen_range(2..30) };
        let n = r.gen_range(1..8);
        let cases: Vec<(AgentTrack, AgentForecast)> = (0..n).map(|i| random_case(&mut r, i as u32 + 1, t)).collect();
        let mut sc = base.clone();
        sc.id = set;
        sc.agents = cases.iter().map(|c| c.0.clone()).collect();
        let forecasts: Vec<AgentForecast> = cases
            .iter()
            .map(|c| AgentForecast {
                scenario_id: set,
                ..c.1.clone()
            })
            .collect();
        let report = metrics(&forecasts, std::slice::from_ref(&sc), 6).map_err(e)?;
        let mut sums = [0.0f64; 4];
        for (((track, f), ff), got) in cases.iter().zip(&forecasts).zip(&report.agents) {
            let h = track.poses[0].h;
            let one = naive_metrics(&f.modes, &track.future, h, 1);
            let six = naive_metrics(&f.modes, &track.future, h, 6);
            let want = [
                one.min_ade, one.min_fde, one.brier, one.miss, six.min_ade, six.min_fde, six.brier, six.miss, one.ate,
                one.cte, six.ate + six.penalty, six.cte + six.penalty,
            ];
            let have = [
                got.min_ade_1, got.min_fde_1, got.brier_fde_1, got.miss_1, got.min_ade_k, got.min_fde_k,
                got.brier_fde_k, got.miss_k, got.ate_1, got.cte_1, got.brier_ate_k, got.brier_cte_k,
            ];
            compared += want.len();
            mismatches += want.iter().zip(&have).filter(|(w, h)| w != h).count();
            decomposition = decomposition.max((got.ate_1.powi(2) + got.cte_1.powi(2) - got.min_fde_1.powi(2)).abs());
            let single = agent_metrics(ff, track, 6).map_err(e)?;
            mismatches += (single != *got) as usize;
            if !(got.min_fde_k <= got.min_fde_1
                && got.min_ade_k <= got.min_ade_1
                && got.brier_fde_k >= got.min_fde_k
                && (0.0..=1.0).contains(&got.miss_k))
            {
                mismatches += 1;
            }
            sums[0] += six.min_fde;
            sums[1] += six.brier;
            sums[2] += six.miss;
            sums[3] += one.min_ade;
        }
        let m = n as f64;
        let agg = &report.aggregate;
        let want = [sums[0] / m, sums[1] / m, sums[2] / m, sums[3] / m];
        let have = [agg.min_fde_k, agg.brier_fde_k, agg.mr_k, agg.min_ade_1];
        compared += 4;
        mismatches += want.iter().zip(&have).filter(|(w, h)| w != h).count();
    }
    let detail = format!("100 sets, {compared} values, {mismatches} mismatches; max |ATE²+CTE²-FDE²| {decomposition:.2e}");
    ensure(mismatches == 0 && decomposition <= 1e-9, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 10

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn determinism_run(dir: &std::path::Path) -> Result<[String; 4], String> {
    let mix = BehaviorMix::default();
    let templates = [Template::Fork, Template::Intersection, Template::CrosswalkStreet];
    let data = generate_dataset(&templates, Domain::Urban, 30, (1, 5), &mix, 1001).map_err(e)?;
    let bytes = write_scenarios(Vec::new(), &data).map_err(e)?;
    let (train_set, holdout) = data.split_at(24);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 1002,
        ..TrainConfig::default()
    };
    std::fs::create_dir_all(dir).map_err(e)?;
    let opts = TrainOptions {
        sampler: SamplerConfig::default(),
        checkpoint_dir: Some(dir.join("ckpt")),
        history_csv: Some(dir.join("history.csv")),
    };
    let mut model = Model::<f32>::new(&ModelConfig::compact(Domain::Urban), 1003).map_err(e)?;
    let history = train(&mut model, train_set, holdout, &cfg, &opts).map_err(e)?;
    ensure(read_history(&dir.join("history.csv")).map_err(e)? == history, || "history file does not round trip".into())?;
    let csv = std::fs::read(dir.join("history.csv")).map_err(e)?;
    let ckpt = std::fs::read(dir.join("ckpt").join("epoch_001.ckpt")).map_err(e)?;
    let mut forecasts = Vec::new();
    for sc in holdout {
        write_forecasts(&mut forecasts, &forecast(&model, sc, &SamplerConfig::default(), None).map_err(e)?).map_err(e)?;
    }
    Ok([sha(&bytes), sha(&csv), sha(&ckpt), sha(&forecasts)])
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let a = determinism_run(&dir.path().join("a"))?;
    let b = determinism_run(&dir.path().join("b"))?;
    let names = ["dataset", "history", "checkpoint", "forecasts"];
    let differ: Vec<&str> = names.iter().zip(a.iter().zip(&b)).filter(|(_, (x, y))| x != y).map(|(n, _)| *n).collect();
    let mix = BehaviorMix::default();
    let other = generate_dataset(&[Template::Fork], Domain::Urban, 3, (1, 5), &mix, 1).map_err(e)?;
    let again = generate_dataset(&[Template::Fork], Domain::Urban, 3, (1, 5), &mix, 2).map_err(e)?;
    ensure(other != again, || "different seeds gave the same dataset".into())?;
    let detail = format!("dataset {}, history {}, forecasts {} identical across runs", &a[0][..12], &a[1][..12], &a[3][..12]);
    ensure(differ.is_empty(), || format!("differs between runs: {}", differ.join(", ")))?;
    Ok(detail)
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let toy: OnceCell<Result<Trained, String>> = OnceCell::new();
    let get_toy = || toy.get_or_init(train_toy).as_ref().map_err(|err| err.clone());

    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "end-to-end viewpoint invariance", Box::new(c1_end_to_end_invariance)),
        (2, "encoding invariance", Box::new(c2_encoding_invariance)),
        (3, "gradient correctness", Box::new(c3_gradients)),
        (4, "greedy sampler oracle", Box::new(c4_sampler_oracle)),
        (5, "map-embedding cache", Box::new(c5_cache)),
        (6, "runtime scaling", Box::new(c6_runtime)),
        (7, "viewpoint sweep", Box::new(|| c7_viewpoint_sweep(get_toy()?))),
        (8, "learning signal", Box::new(|| c8_learning_signal(get_toy()?))),
        (9, "metric oracle", Box::new(c9_metric_oracle)),
        (10, "determinism", Box::new(c10_determinism)),
    ];
    let mut failed = 0;
    for (n, name, run) in &criteria {
        if !on(*n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
