//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//!
//! The heavy tests take a shared lock so their wall-clock budgets are not
//! distorted by other tests running on the same cores.

mod common;

use chrono::DateTime;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Hypergeometric};
use std::collections::HashMap;
use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};
use transllm::cli::{self, Command, RunConfig, RunDir};
use transllm::data_io::{periodicity_score, synth_generate, write_series, SynthConfig};
use transllm::dispatch_sim::{
    baseline_policy, evaluate_policy, matching_outcome, synth_scenarios, BaselineKind, Concentration,
    DispatchObservation, DispatchScenario, ScenarioConfig,
};
use transllm::gradcheck::{check_gradients, GradCheckOptions};
use transllm::graph::{build_grid_adjacency, build_semantic, dtw_distance, AdjacencyPair};
use transllm::heads::{DispatchHead, ForecastHead};
use transllm::llm_bridge::{
    wire_request, Backend, LmConfig, Position, PromptProgram, Projection, RemoteLm, SequenceLayout, SurrogateLm,
};
use transllm::losses_metrics::{
    dispatch_loss_var, entropy, metric_dispatch, reward_grid, wasserstein_1d, DistanceCosts, LossWeights,
    RewardParams,
};
use transllm::params::ParamStore;
use transllm::prompt_router::{router_losses, PromptPool, RouteMode, Router, RouterDecision, TaskKind};
use transllm::st_encoder::{attention_mask, EncoderConfig, GraphAttention, StBlock, StEncoder, TemporalConv};
use transllm::training::{
    evaluate_dispatch, evaluate_forecast, load_checkpoint, persistence_metrics, prepare_dispatch, prepare_forecast,
    prepare_forecast_eval, run_schedule, train_stage_a, train_stage_b, ModelConfig, Stage, SplitConfig, TaskData,
    TrainConfig, TrainLog, Model,
};
use transllm::Error;

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

// Written to the stdout handle directly so the verdict shows even when the
// harness captures output.
fn report(n: usize, name: &str, outcome: Result<String, String>) {
    let line = match &outcome {
        Ok(msg) => format!("PASS criterion {n} ({name}): {msg}"),
        Err(msg) => format!("FAIL criterion {n} ({name}): {msg}"),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
    if let Err(msg) = outcome {
        panic!("criterion {n} failed: {msg}");
    }
}

fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn random_scenario(rng: &mut ChaCha8Rng) -> DispatchScenario {
    let cell = |rng: &mut ChaCha8Rng| (0..9).map(|_| rng.random_range(0.0..12.0)).collect::<Vec<f64>>();
    let mut vacant = vec![0.0; 9];
    vacant[4] = rng.random_range(1.0..15.0);
    let demand_next = cell(rng);
    let competitors_next = cell(rng);
    DispatchScenario {
        obs: DispatchObservation {
            vacant,
            demand_hist: vec![cell(rng); 3],
            competitor_hist: vec![cell(rng); 3],
            timestamp: DateTime::from_timestamp(0, 0).unwrap(),
        },
        demand_next,
        competitors_next,
        p_real: Some(random_simplex(rng, 9)),
        costs: DistanceCosts::default(),
    }
}

// ---------------------------------------------------------------------------
// 1. gradients

const GRAD_SEEDS: u64 = 20;
const GRAD_TOL: f64 = 1e-4;

/// Worst relative error of `build` over all seeds.
fn grad_sweep(build: impl Fn(u64) -> f64) -> f64 {
    (0..GRAD_SEEDS).map(build).fold(0.0, f64::max)
}

fn small_encoder_cfg() -> EncoderConfig {
    EncoderConfig {
        n_blocks: 1,
        d: 4,
        gat_heads: 2,
        ..Default::default()
    }
}

fn ring_pair(n: usize) -> AdjacencyPair {
    let a = Array2::from_shape_fn((n, n), |(i, j)| if (i + 1) % n == j || (j + 1) % n == i { 1.0 } else { 0.0 });
    let b = Array2::from_shape_fn((n, n), |(i, j)| if i != j && (i + j) % 2 == 0 { 1.0 } else { 0.0 });
    AdjacencyPair::new(a, b).unwrap()
}

fn grad_tcn(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (nodes, k) = (3, 5);
    let a = TemporalConv::init(&mut store, "a", 3, 4, 2, 1, &mut rng);
    let b = TemporalConv::init(&mut store, "b", 4, 4, 3, 2, &mut rng);
    let x = rand_matrix(k * nodes, 3, &mut rng);
    let r = rand_matrix(k * nodes, 4, &mut rng);
    check_gradients(&store, &GradCheckOptions::default(), |tape, s| {
        let xv = tape.constant(x.clone());
        let h = a.forward(tape, s, xv, nodes);
        let h = b.forward(tape, s, h, nodes);
        let rv = tape.constant(r.clone());
        let p = tape.mul(h, rv);
        tape.sum(p)
    })
    .max_rel_err
}

fn grad_gat(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let nodes = 4;
    let g = GraphAttention::init(&mut store, "gat", 3, 4, 2, 0.2, &mut rng);
    let mask = attention_mask(&ring_pair(nodes).a_sp);
    let x = rand_matrix(2 * nodes, 3, &mut rng);
    let r = rand_matrix(2 * nodes, 4, &mut rng);
    check_gradients(&store, &GradCheckOptions::default(), |tape, s| {
        let xv = tape.constant(x.clone());
        let h = g.forward(tape, s, xv, &mask, nodes);
        let rv = tape.constant(r.clone());
        let p = tape.mul(h, rv);
        tape.sum(p)
    })
    .max_rel_err
}

fn grad_st_block(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let nodes = 3;
    let blk = StBlock::init(&mut store, "blk", 2, nodes, &small_encoder_cfg(), &mut rng);
    let mask = attention_mask(&ring_pair(nodes).a_sp);
    let x = rand_matrix(4 * nodes, 2, &mut rng);
    let r = rand_matrix(4 * nodes, 4, &mut rng);
    check_gradients(&store, &GradCheckOptions::default(), |tape, s| {
        let xv = tape.constant(x.clone());
        let h = blk.forward(tape, s, xv, &mask, nodes);
        let rv = tape.constant(r.clone());
        let p = tape.mul(h, rv);
        tape.sum(p)
    })
    .max_rel_err
}

fn grad_encoder(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (nodes, k, t) = (3, 4, 3);
    let enc = StEncoder::init(&mut store, &small_encoder_cfg(), 2, nodes, k, t, &mut rng).unwrap();
    let pair = ring_pair(nodes);
    let x = rand_matrix(k * nodes, 2, &mut rng);
    let r = rand_matrix(t * nodes, 8, &mut rng);
    let opts = GradCheckOptions {
        max_coords_per_param: Some(12),
        seed,
        ..Default::default()
    };
    check_gradients(&store, &opts, |tape, s| {
        let xv = tape.constant(x.clone());
        let vars = enc.forward(tape, s, xv, &pair).unwrap();
        let rv = tape.constant(r.clone());
        let p = tape.mul(vars.h_f, rv);
        tape.sum(p)
    })
    .max_rel_err
}

fn grad_projection(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let proj = Projection::init(&mut store, 5, 3, &mut rng);
    store.get_mut(proj.b).mapv_inplace(|_| rng.random_range(-1.0..1.0));
    let e = rand_matrix(4, 5, &mut rng);
    let r = rand_matrix(4, 3, &mut rng);
    check_gradients(&store, &GradCheckOptions::default(), |tape, s| {
        let ev = tape.constant(e.clone());
        let y = proj.forward(tape, s, ev).unwrap();
        let y = tape.mul(y, y);
        let rv = tape.constant(r.clone());
        let p = tape.mul(y, rv);
        tape.sum(p)
    })
    .max_rel_err
}

fn grad_surrogate(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let lm = SurrogateLm::init(
        &mut store,
        &LmConfig {
            d_model: 4,
            layers: 2,
            mlp_hidden: 6,
        },
        &mut rng,
    );
    let his = store.insert("his", rand_matrix(2, 4, &mut rng));
    let pre = store.insert("pre", rand_matrix(2, 4, &mut rng));
    let layout = SequenceLayout::build(&PromptProgram::parse("a <HIS_EMB> b <PRE_EMB> c"), 2, "d e").unwrap();
    let opts = GradCheckOptions {
        max_coords_per_param: Some(24),
        seed,
        ..Default::default()
    };
    check_gradients(&store, &opts, |tape, s| {
        let h = tape.param(s, his);
        let p = tape.param(s, pre);
        let x = lm.embed(tape, s, &layout, Some(h), Some(p), layout.len()).unwrap();
        let y = lm.forward(tape, s, x);
        let ce = lm.cross_entropy(tape, s, y, &layout).unwrap().unwrap();
        let sq = tape.mul(y, y);
        let sq = tape.mean(sq);
        tape.add(ce, sq)
    })
    .max_rel_err
}

fn grad_forecast_head(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = ForecastHead::init(&mut store, 12, 5, 4, 3, &mut rng);
    let flat = rand_matrix(2, 12, &mut rng);
    let hp = rand_matrix(2, 5, &mut rng);
    let y = rand_matrix(2, 3, &mut rng).mapv(|v| v * 5.0);
    check_gradients(&store, &GradCheckOptions::default(), |tape, s| {
        let f = tape.constant(flat.clone());
        let h = tape.constant(hp.clone());
        let p = head.forward(tape, s, f, h).unwrap();
        let t = tape.constant(y.clone());
        let d = tape.sub(p, t);
        let d = tape.abs(d);
        tape.mean(d)
    })
    .max_rel_err
}

fn grad_dispatch_head(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = DispatchHead::init(&mut store, 4, &mut rng);
    let hp = rand_matrix(1, 4, &mut rng);
    let r = rand_matrix(1, 9, &mut rng);
    check_gradients(&store, &GradCheckOptions::default(), |tape, s| {
        let h = tape.constant(hp.clone());
        let pi = head.forward(tape, s, h).unwrap();
        let rv = tape.constant(r.clone());
        let p = tape.mul(pi, rv);
        tape.sum(p)
    })
    .max_rel_err
}

fn grad_dispatch_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sc = random_scenario(&mut rng);
    let mut store = ParamStore::new();
    let z = store.insert("z", rand_matrix(1, 9, &mut rng));
    check_gradients(&store, &GradCheckOptions::default(), |tape, s| {
        let zv = tape.param(s, z);
        let pi = tape.softmax(zv);
        dispatch_loss_var(tape, pi, &sc, &LossWeights::default(), &RewardParams::default())
            .unwrap()
            .total
    })
    .max_rel_err
}

#[test]
fn criterion_1_gradient_integrity() {
    let _g = heavy();
    let start = Instant::now();
    let ops: [(&str, fn(u64) -> f64); 9] = [
        ("tcn", grad_tcn),
        ("gat", grad_gat),
        ("st_block", grad_st_block),
        ("encoder", grad_encoder),
        ("projection", grad_projection),
        ("surrogate_lm", grad_surrogate),
        ("forecast_head", grad_forecast_head),
        ("dispatch_head", grad_dispatch_head),
        ("dispatch_loss", grad_dispatch_loss),
    ];
    let mut worst = Vec::new();
    let mut failed = Vec::new();
    for (name, f) in ops {
        let e = grad_sweep(f);
        if !(e < GRAD_TOL) {
            failed.push(format!("{name} {e:.2e}"));
        }
        worst.push(format!("{name} {e:.1e}"));
    }
    let elapsed = start.elapsed();
    let outcome = if !failed.is_empty() {
        Err(format!("relative error >= {GRAD_TOL}: {}", failed.join(", ")))
    } else if elapsed > Duration::from_secs(120) {
        Err(format!("took {elapsed:?}"))
    } else {
        Ok(format!("{} seeds each, worst [{}], {:.1}s", GRAD_SEEDS, worst.join(", "), elapsed.as_secs_f64()))
    };
    report(1, "gradient integrity", outcome);
}

// ---------------------------------------------------------------------------
// 2. oracles

fn dtw_memo(a: &[f64], b: &[f64], i: usize, j: usize, memo: &mut HashMap<(usize, usize), f64>) -> f64 {
    if let Some(&v) = memo.get(&(i, j)) {
        return v;
    }
    let cost = (a[i] - b[j]).abs();
    let v = if i == 0 && j == 0 {
        cost
    } else {
        let mut best = f64::INFINITY;
        if i > 0 {
            best = best.min(dtw_memo(a, b, i - 1, j, memo));
        }
        if j > 0 {
            best = best.min(dtw_memo(a, b, i, j - 1, memo));
        }
        if i > 0 && j > 0 {
            best = best.min(dtw_memo(a, b, i - 1, j - 1, memo));
        }
        cost + best
    };
    memo.insert((i, j), v);
    v
}

/// Exact transport on a line with unit spacing: surplus mass is shipped
/// left to right in order.
fn transport_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut supply: Vec<(usize, f64)> = a.iter().copied().enumerate().filter(|(_, v)| *v > 0.0).collect();
    let mut demand: Vec<(usize, f64)> = b.iter().copied().enumerate().filter(|(_, v)| *v > 0.0).collect();
    let (mut i, mut j, mut cost) = (0, 0, 0.0);
    while i < supply.len() && j < demand.len() {
        let m = supply[i].1.min(demand[j].1);
        cost += m * (supply[i].0 as f64 - demand[j].0 as f64).abs();
        supply[i].1 -= m;
        demand[j].1 -= m;
        if supply[i].1 <= 1e-15 {
            i += 1;
        }
        if demand[j].1 <= 1e-15 {
            j += 1;
        }
    }
    cost
}

fn naive_periodicity(x: &[f64]) -> f64 {
    let l = x.len();
    let mean_abs = x.iter().map(|v| v.abs()).sum::<f64>() / l as f64;
    let mut peak = 0.0f64;
    for k in 1..l {
        let (mut re, mut im) = (0.0, 0.0);
        for (n, &v) in x.iter().enumerate() {
            let ang = -std::f64::consts::TAU * (k * n % l) as f64 / l as f64;
            re += v * ang.cos();
            im += v * ang.sin();
        }
        peak = peak.max((re * re + im * im).sqrt());
    }
    peak / mean_abs
}

const MATCH_TRIALS: usize = 100_000;

/// Integer-vehicle simulator: in each cell `min(demand, supply)` vehicles
/// are picked uniformly at random without replacement and we count ours.
/// Returns the sample mean of our total matches and its standard error,
/// taken from the exact hypergeometric variance so that rare-event cells
/// do not rely on a noisy variance estimate.
fn atomic_matching(ours: &[u64], comp: &[u64], demand: &[u64], rng: &mut ChaCha8Rng) -> (f64, f64) {
    let mut var = 0.0;
    let samplers: Vec<Option<Hypergeometric>> = (0..ours.len())
        .map(|g| {
            let supply = ours[g] + comp[g];
            let draws = demand[g].min(supply);
            if ours[g] == 0 || draws == 0 {
                return None;
            }
            let (big_n, k, n) = (supply as f64, ours[g] as f64, draws as f64);
            if supply > 1 {
                var += n * (k / big_n) * (1.0 - k / big_n) * (big_n - n) / (big_n - 1.0);
            }
            Some(Hypergeometric::new(supply, ours[g], draws).unwrap())
        })
        .collect();
    let mut s = 0.0;
    for _ in 0..MATCH_TRIALS {
        let total: u64 = samplers.iter().flatten().map(|h| h.sample(rng)).sum();
        s += total as f64;
    }
    let n = MATCH_TRIALS as f64;
    (s / n, (var / n).sqrt())
}

#[test]
fn criterion_2_oracle_equivalence() {
    let _g = heavy();
    // With 200 independent 3-sigma checks an exact implementation still
    // trips at least one about 40% of the time, so the seed is pinned; the
    // mean z^2 check below is what guards against a real bias.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut problems = Vec::new();

    let mut dtw_bad = 0;
    for _ in 0..1000 {
        let la = rng.random_range(1..=8);
        let lb = rng.random_range(1..=8);
        let a: Vec<f64> = (0..la).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..lb).map(|_| rng.random_range(-3.0..3.0)).collect();
        let fast = dtw_distance(&a, &b).unwrap();
        let slow = dtw_memo(&a, &b, la - 1, lb - 1, &mut HashMap::new());
        if fast != slow {
            dtw_bad += 1;
        }
    }
    if dtw_bad > 0 {
        problems.push(format!("dtw mismatched on {dtw_bad}/1000 pairs"));
    }

    let mut w_worst = 0.0f64;
    for _ in 0..1000 {
        let a = random_simplex(&mut rng, 9);
        let b = random_simplex(&mut rng, 9);
        w_worst = w_worst.max((wasserstein_1d(&a, &b).unwrap() - transport_oracle(&a, &b)).abs());
    }
    if !(w_worst <= 1e-9) {
        problems.push(format!("wasserstein off by {w_worst:e}"));
    }

    let mut p_worst = 0.0f64;
    for _ in 0..300 {
        let l = rng.random_range(4..=256);
        let period = rng.random_range(2.0..64.0);
        let x: Vec<f64> = (0..l)
            .map(|t| 5.0 + 3.0 * (std::f64::consts::TAU * t as f64 / period).sin() + rng.random_range(-1.0..1.0))
            .collect();
        p_worst = p_worst.max((periodicity_score(&x) - naive_periodicity(&x)).abs());
    }
    if !(p_worst <= 1e-9) {
        problems.push(format!("periodicity off by {p_worst:e}"));
    }

    let v0 = 20u64;
    let mut max_z = 0.0f64;
    let (mut z2_sum, mut z_count) = (0.0, 0usize);
    let mut match_bad = 0;
    for _ in 0..200 {
        let weights = random_simplex(&mut rng, 9);
        let mut ours = vec![0u64; 9];
        for _ in 0..v0 {
            let u: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            let g = weights.iter().position(|w| {
                acc += w;
                u < acc
            });
            ours[g.unwrap_or(8)] += 1;
        }
        let comp: Vec<u64> = (0..9).map(|_| rng.random_range(0..=8)).collect();
        let demand: Vec<u64> = (0..9).map(|_| rng.random_range(0..=15)).collect();
        let pi: Vec<f64> = ours.iter().map(|&n| n as f64 / v0 as f64).collect();
        let fluid = matching_outcome(
            v0 as f64,
            &pi,
            &demand.iter().map(|&d| d as f64).collect::<Vec<_>>(),
            &comp.iter().map(|&c| c as f64).collect::<Vec<_>>(),
        )
        .unwrap()
        .matched_ours
        .iter()
        .sum::<f64>();
        let (mean, se) = atomic_matching(&ours, &comp, &demand, &mut rng);
        let diff = (fluid - mean).abs();
        if se < 1e-12 {
            if diff > 1e-9 {
                match_bad += 1;
            }
        } else {
            let z = diff / se;
            max_z = max_z.max(z);
            z2_sum += z * z;
            z_count += 1;
            if z > 3.0 {
                match_bad += 1;
            }
        }
    }
    if match_bad > 0 {
        problems.push(format!("matching outside 3 sigma on {match_bad}/200 scenarios (max z {max_z:.2}, mean z^2 {:.2} over {z_count})", z2_sum / z_count.max(1) as f64));
    }
    // Under exact agreement the z-scores are standard normal, so the mean
    // of z² should sit near 1.
    let mean_z2 = z2_sum / z_count.max(1) as f64;
    if !(0.6..=1.6).contains(&mean_z2) {
        problems.push(format!("matching mean z^2 {mean_z2:.2} over {z_count} scenarios"));
    }

    let outcome = if problems.is_empty() {
        Ok(format!(
            "dtw exact on 1000 pairs, W1 max err {w_worst:.1e}, periodicity max err {p_worst:.1e}, matching max z {max_z:.2}, mean z^2 {mean_z2:.2}"
        ))
    } else {
        Err(problems.join("; "))
    };
    report(2, "oracle equivalence", outcome);
}

// ---------------------------------------------------------------------------
// 3. hand arithmetic

#[test]
fn criterion_3_hand_arithmetic() {
    let tol = 1e-6;
    let mut problems = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        if !((got - want).abs() < tol) {
            problems.push(format!("{name}: got {got}, want {want}"));
        }
    };
    let uniform = vec![1.0 / 9.0; 9];
    check("uniform entropy", entropy(&uniform).unwrap(), 9f64.ln());
    let mut point = vec![0.0; 9];
    point[0] = 1.0;
    check("uniform vs point W-Dist", wasserstein_1d(&uniform, &point).unwrap(), 4.0);
    let mut costs = DistanceCosts::default();
    costs.d_g[0] = 3.0;
    let r = reward_grid(&[0.5], &costs, &RewardParams { beta: 2.0, gamma: 0.05 });
    check("R_g", r[0], 0.85);
    let decision = RouterDecision {
        actions: vec![0],
        logprobs: vec![0.5f64.ln()],
        values: vec![0.0],
        greedy: false,
        ctx: Vec::new(),
    };
    let l = router_losses(&decision, 1.0).unwrap();
    // 0.6931 is ln 2 to four places.
    check("actor loss", l[0].0, 2f64.ln());
    check("actor loss rounded", (l[0].0 * 1e4).round() / 1e4, 0.6931);
    check("critic loss", l[0].1, 1.0);
    let mut sc = random_scenario(&mut ChaCha8Rng::seed_from_u64(0));
    sc.costs = DistanceCosts::from_cell_size(3.0);
    let mdd = metric_dispatch(&[uniform.clone()], &[sc]).unwrap().mdd;
    check("uniform MDD", mdd, (12.0 + 12.0 * 2f64.sqrt()) / 9.0);
    check("uniform MDD rounded", (mdd * 1e4).round() / 1e4, 3.2190);
    let outcome = if problems.is_empty() {
        Ok(format!("ln 9, W 4.0, R_g 0.85, router ({:.4}, {:.1}), MDD {mdd:.4}", l[0].0, l[0].1))
    } else {
        Err(problems.join("; "))
    };
    report(3, "hand arithmetic", outcome);
}

// ---------------------------------------------------------------------------
// 4. forecasting end to end

const FORECAST_RATIO: f64 = 0.7;
const STEPS_PER_DAY: usize = 96;

fn forecast_run(seed: u64) -> Result<(f64, f64, f64, Duration), Error> {
    let start = Instant::now();
    let sc = SynthConfig {
        n_nodes: 20,
        length: STEPS_PER_DAY * 8,
        steps_per_day: STEPS_PER_DAY,
        interval_minutes: (1440 / STEPS_PER_DAY) as u32,
        noise_sigma: 1.0,
        ..Default::default()
    };
    let ds = synth_generate(&sc, seed)?;
    let train_end = (ds.len() as f64 * 0.7).round() as usize;
    let pair = AdjacencyPair::new(build_grid_adjacency(4, 5), build_semantic(&ds.slice_steps(0, train_end), 10)?)?;
    let split = SplitConfig {
        stride: 4,
        ..Default::default()
    };
    let splits = prepare_forecast(&ds, &pair, 12, 12, &split)?;
    let mcfg = ModelConfig {
        encoder: EncoderConfig {
            d: 8,
            gat_heads: 2,
            ..Default::default()
        },
        lm: LmConfig {
            d_model: 8,
            layers: 2,
            mlp_hidden: 16,
        },
        head_hidden: 64,
        ..Default::default()
    };
    let mut model = Model::new(mcfg, PromptPool::default_for(TaskKind::Forecast), seed)?;
    let tc = TrainConfig {
        lr: 0.1,
        epochs_stage_a: 120,
        batch_size: 4,
        seed,
        nodes_per_window: Some(4),
        ..Default::default()
    };
    run_schedule(&mut model, &TaskData::Forecast(splits.train.clone()), &tc)?;
    let (m, _) = evaluate_forecast(&model, &splits.test, 12)?;
    let base = persistence_metrics(&splits.test)?;
    Ok((m.mae, base.mae, m.mae / base.mae, start.elapsed()))
}

#[test]
fn criterion_4_forecasting_end_to_end() {
    let _g = heavy();
    let mut lines = Vec::new();
    let mut failed = false;
    for seed in 0..3 {
        match forecast_run(seed) {
            Ok((mae, base, ratio, t)) => {
                let ok = ratio <= FORECAST_RATIO && t < Duration::from_secs(300);
                failed |= !ok;
                lines.push(format!(
                    "seed {seed}: MAE {mae:.3} vs persistence {base:.3} (ratio {ratio:.3}), {:.0}s{}",
                    t.as_secs_f64(),
                    if ok { "" } else { " FAIL" }
                ));
            }
            Err(e) => {
                failed = true;
                lines.push(format!("seed {seed}: error {e}"));
            }
        }
    }
    let msg = lines.join("; ");
    report(4, "forecasting", if failed { Err(msg) } else { Ok(msg) });
}

// ---------------------------------------------------------------------------
// 5. dispatch end to end

fn dispatch_model_config() -> ModelConfig {
    ModelConfig {
        task: TaskKind::Dispatch,
        nodes: 9,
        in_features: 2,
        history_len: 9,
        horizon: 1,
        n_patches: 3,
        encoder: EncoderConfig {
            d: 8,
            gat_heads: 2,
            ..Default::default()
        },
        lm: LmConfig {
            d_model: 8,
            layers: 2,
            mlp_hidden: 16,
        },
        head_hidden: 64,
        router_hidden: 64,
    }
}

struct DispatchRun {
    model_mmr: f64,
    stay_mmr: f64,
    model_w: f64,
    uniform_w: f64,
    elapsed: Duration,
}

fn dispatch_run(seed: u64) -> Result<DispatchRun, Error> {
    let start = Instant::now();
    let sc = ScenarioConfig {
        count: 1000,
        concentration: Concentration::Cell(1),
        ..Default::default()
    };
    let train = prepare_dispatch(synth_scenarios(&sc, seed)?, None, None, sc.interval_minutes)?;
    let test = prepare_dispatch(
        synth_scenarios(&sc, seed + 1000)?,
        Some(train.stats.clone()),
        Some(train.pair.clone()),
        sc.interval_minutes,
    )?;
    let mut model = Model::new(dispatch_model_config(), PromptPool::default_for(TaskKind::Dispatch), seed)?;
    let tc = TrainConfig {
        task: TaskKind::Dispatch,
        lr: 0.1,
        epochs_stage_a: 3,
        batch_size: 16,
        router_lr: 0.01,
        seed,
        ..Default::default()
    };
    run_schedule(&mut model, &TaskData::Dispatch(train), &tc)?;
    let (m, _) = evaluate_dispatch(&model, &test, 3)?;
    let stay = evaluate_policy(|s| baseline_policy(BaselineKind::StayPut, s), &test.scenarios)?;
    let uni = evaluate_policy(|s| baseline_policy(BaselineKind::Uniform, s), &test.scenarios)?;
    Ok(DispatchRun {
        model_mmr: m.mmr,
        stay_mmr: stay.mmr,
        model_w: m.w_dist,
        uniform_w: uni.w_dist,
        elapsed: start.elapsed(),
    })
}

#[test]
fn criterion_5_dispatch_end_to_end() {
    let _g = heavy();
    let mut lines = Vec::new();
    let mut failed = false;
    for seed in 0..3 {
        match dispatch_run(seed) {
            Ok(r) => {
                let ok = r.model_mmr >= 1.10 * r.stay_mmr && r.model_w < r.uniform_w && r.elapsed < Duration::from_secs(300);
                failed |= !ok;
                lines.push(format!(
                    "seed {seed}: MMR {:.3} vs stay-put {:.3}, W-Dist {:.3} vs uniform {:.3}, {:.0}s{}",
                    r.model_mmr,
                    r.stay_mmr,
                    r.model_w,
                    r.uniform_w,
                    r.elapsed.as_secs_f64(),
                    if ok { "" } else { " FAIL" }
                ));
            }
            Err(e) => {
                failed = true;
                lines.push(format!("seed {seed}: error {e}"));
            }
        }
    }
    let msg = lines.join("; ");
    report(5, "dispatch", if failed { Err(msg) } else { Ok(msg) });
}

// ---------------------------------------------------------------------------
// 6. router convergence

const BANDIT_UPDATES: usize = 2000;
const BANDIT_BATCH: usize = 8;
const BANDIT_LR: f64 = 0.05;

/// Fraction of greedy picks on the rewarded candidate, worst slot.
fn bandit_run(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = [4usize, 4, 4, 4];
    let ctx_dim = 8;
    let mut store = ParamStore::new();
    let router = Router::init(&mut store, ctx_dim, &sizes, 64, &mut rng);
    let target: Vec<usize> = sizes.iter().map(|&n| rng.random_range(0..n)).collect();
    let ctx = |rng: &mut ChaCha8Rng| (0..ctx_dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    for _ in 0..BANDIT_UPDATES {
        let batch: Vec<(RouterDecision, f64)> = (0..BANDIT_BATCH)
            .map(|_| {
                let c = ctx(&mut rng);
                let d = router.route(&store, &c, RouteMode::Sample, &mut rng).unwrap();
                let hits = d.actions.iter().zip(&target).filter(|(a, t)| a == t).count();
                let reward = hits as f64 / sizes.len() as f64;
                (d, reward)
            })
            .collect();
        router.update(&mut store, &batch, BANDIT_LR).unwrap();
    }
    let trials = 200;
    let mut hits = vec![0usize; sizes.len()];
    for _ in 0..trials {
        let c = ctx(&mut rng);
        let d = router.route(&store, &c, RouteMode::Greedy, &mut rng).unwrap();
        for (k, (&a, &t)) in d.actions.iter().zip(&target).enumerate() {
            hits[k] += (a == t) as usize;
        }
    }
    hits.iter().map(|&h| h as f64 / trials as f64).fold(1.0, f64::min)
}

#[test]
fn criterion_6_router_convergence() {
    let _g = heavy();
    let results: Vec<f64> = (0..20).map(bandit_run).collect();
    let converged = results.iter().filter(|&&f| f >= 0.9).count();
    let msg = format!(
        "{converged}/20 seeds at >= 0.9 on every slot (worst-slot frequencies {:?})",
        results.iter().map(|f| format!("{f:.2}")).collect::<Vec<_>>()
    );
    report(6, "router convergence", if converged >= 18 { Ok(msg) } else { Err(msg) });
}

// ---------------------------------------------------------------------------
// 7. two-stage contract

fn tiny_forecast() -> (Model, TaskData) {
    let sc = SynthConfig {
        n_nodes: 4,
        length: 96 * 2,
        steps_per_day: 96,
        interval_minutes: 15,
        ..Default::default()
    };
    let ds = synth_generate(&sc, 5).unwrap();
    let pair = AdjacencyPair::new(build_grid_adjacency(2, 2), build_semantic(&ds, 2).unwrap()).unwrap();
    let splits = prepare_forecast(&ds, &pair, 12, 12, &SplitConfig { stride: 12, ..Default::default() }).unwrap();
    let cfg = ModelConfig {
        nodes: 4,
        n_patches: 3,
        encoder: EncoderConfig {
            n_blocks: 1,
            d: 4,
            gat_heads: 2,
            ..Default::default()
        },
        lm: LmConfig {
            d_model: 4,
            layers: 1,
            mlp_hidden: 8,
        },
        head_hidden: 8,
        router_hidden: 8,
        ..Default::default()
    };
    let model = Model::new(cfg, PromptPool::default_for(TaskKind::Forecast), 3).unwrap();
    (model, TaskData::Forecast(splits.train))
}

#[test]
fn criterion_7_two_stage_contract() {
    let mut problems = Vec::new();
    let tc = TrainConfig {
        lr: 0.05,
        router_lr: 0.05,
        batch_size: 2,
        seed: 9,
        ..Default::default()
    };

    let (mut m, data) = tiny_forecast();
    let (r0, n0) = (m.router_hash(), m.non_router_hash());
    let mut log = TrainLog::default();
    train_stage_a(&mut m, &data, &tc, &mut log).unwrap();
    let (r1, n1) = (m.router_hash(), m.non_router_hash());
    if r1 != r0 {
        problems.push("stage A changed router parameters".to_string());
    }
    if n1 == n0 {
        problems.push("stage A left the main parameters unchanged".to_string());
    }
    train_stage_b(&mut m, &data, &tc, &mut log).unwrap();
    if m.non_router_hash() != n1 {
        problems.push("stage B changed non-router parameters".to_string());
    }
    if m.router_hash() == r1 {
        problems.push("stage B left the router unchanged".to_string());
    }

    let run = || {
        let (mut m, data) = tiny_forecast();
        let log = run_schedule(&mut m, &data, &tc).unwrap();
        (m.store.hash_all(), serde_json::to_string(&log).unwrap())
    };
    let (h1, l1) = run();
    let (h2, l2) = run();
    if h1 != h2 || l1 != l2 {
        problems.push("two runs with the same seed differ".to_string());
    }

    let defaults = TrainConfig::default();
    let (mut m, data) = tiny_forecast();
    let log = run_schedule(
        &mut m,
        &data,
        &TrainConfig {
            lr: 0.05,
            batch_size: 2,
            ..defaults.clone()
        },
    )
    .unwrap();
    if defaults.alternations != 1 || log.stages != vec![Stage::A, Stage::B] {
        problems.push(format!("default schedule is {:?}", log.stages));
    }

    let outcome = if problems.is_empty() {
        Ok("stage hashes isolated, bit-identical reruns, default schedule [A, B]".to_string())
    } else {
        Err(problems.join("; "))
    };
    report(7, "two-stage contract", outcome);
}

// ---------------------------------------------------------------------------
// 8. zero-shot

fn sha(path: &std::path::Path) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn zero_shot_check(dir: &std::path::Path) -> Result<String, String> {
    let e = |e: Error| e.to_string();
    let mut cfg = RunConfig {
        seed: 4,
        out_dir: dir.join("run"),
        synth: SynthConfig {
            n_nodes: 6,
            length: 96 * 3,
            steps_per_day: 96,
            interval_minutes: 15,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.model.encoder = EncoderConfig {
        n_blocks: 1,
        d: 4,
        gat_heads: 2,
        ..Default::default()
    };
    cfg.model.lm = LmConfig {
        d_model: 4,
        layers: 1,
        mlp_hidden: 8,
    };
    cfg.model.head_hidden = 16;
    cfg.graph.semantic_degree = 2;
    cfg.split.stride = 12;
    cfg.train.lr = 0.3;
    cfg.train.epochs_stage_a = 2;
    cfg.train.batch_size = 4;
    cfg.train.nodes_per_window = Some(2);
    cli::run(Command::Synth, cfg.clone()).map_err(e)?;
    cli::run(Command::Train, cfg.clone()).map_err(e)?;

    // Domain B: more nodes, different phases.
    let phases_b: Vec<f64> = (0..9).map(|n| 0.5 + 0.61 * n as f64).collect();
    let ds_b = synth_generate(
        &SynthConfig {
            n_nodes: 9,
            length: 96 * 2,
            steps_per_day: 96,
            interval_minutes: 15,
            phases: Some(phases_b),
            ..Default::default()
        },
        77,
    )
    .map_err(e)?;
    let series_b = dir.join("domain_b.csv");
    write_series(&ds_b, &series_b).map_err(e)?;

    let rd = RunDir::new(cfg.out_dir.clone());
    let ck_before = sha(&rd.checkpoint());
    let sweep = vec![1, 3, 6, 12];
    cfg.zero_shot.data.series = Some(series_b.clone());
    cfg.zero_shot.n_patches = sweep.clone();
    cfg.zero_shot.stride = 6;
    cli::run(Command::ZeroShot, cfg.clone()).map_err(e)?;
    if sha(&rd.checkpoint()) != ck_before {
        return Err("checkpoint changed".into());
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(rd.metrics()).map_err(|x| x.to_string())?).map_err(|x| x.to_string())?;
    if metrics["nodes"] != 9 {
        return Err(format!("metrics report {} nodes", metrics["nodes"]));
    }
    let mut maes = Vec::new();
    for n_p in &sweep {
        let mae = metrics["by_n_patches"][n_p.to_string()]["mae"].as_f64();
        match mae {
            Some(v) if v.is_finite() => maes.push(format!("N_p {n_p}: {v:.3}")),
            _ => return Err(format!("no finite MAE for N_p {n_p}")),
        }
    }

    let (model, _) = load_checkpoint(rd.checkpoint()).map_err(e)?;
    let hash = model.store.hash_all();
    if metrics["parameter_hash"] != hash.as_str() {
        return Err("reported parameter hash differs from the checkpoint".into());
    }
    let pair_b = AdjacencyPair::new(build_grid_adjacency(3, 3), build_semantic(&ds_b, 2).map_err(e)?).map_err(e)?;
    let data_b = prepare_forecast_eval(&ds_b, &pair_b, 12, 12, 24).map_err(e)?;
    for &n_p in &sweep {
        let (pred, decisions) = model.forecast_window(&data_b, &data_b.windows[0], n_p).map_err(e)?;
        if pred.dim() != (9, 12) || decisions.len() != 9 {
            return Err(format!("N_p {n_p}: prediction {:?}, {} decisions", pred.dim(), decisions.len()));
        }
        let program = PromptProgram::parse(&model.pool.base_template());
        let layout = SequenceLayout::build(&program, n_p, "").map_err(e)?;
        let patches = layout.positions.iter().filter(|p| matches!(p, Position::Patch(..))).count();
        if patches != n_p * 2 {
            return Err(format!("N_p {n_p}: layout holds {patches} patch positions"));
        }
    }
    if model.forecast_window(&data_b, &data_b.windows[0], 13).is_ok() {
        return Err("N_p above the horizon was accepted".into());
    }
    if model.store.hash_all() != hash {
        return Err("parameters changed during evaluation".into());
    }
    Ok(format!("6 -> 9 nodes, {}", maes.join(", ")))
}

#[test]
fn criterion_8_zero_shot() {
    let _g = heavy();
    let dir = tempfile::tempdir().unwrap();
    report(8, "zero-shot", zero_shot_check(dir.path()));
}

// ---------------------------------------------------------------------------
// 9. wire protocol

fn wire_check() -> Result<String, String> {
    use common::{echo_handler, spawn, Reply};
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let layout = SequenceLayout::build(&PromptProgram::parse("a <HIS_EMB> b c <PRE_EMB> d"), 3, "").map_err(|e| e.to_string())?;
    let his = rand_matrix(3, d, &mut rng);
    let pre = rand_matrix(3, d, &mut rng);

    // Round trip: injected rows come back where the layout expects them.
    let stub = spawn(echo_handler(d));
    let client = RemoteLm::new(stub.url.clone(), d);
    let req = wire_request(&layout, Some(&his), Some(&pre)).map_err(|e| e.to_string())?;
    let resp = client.forward(&req).map_err(|e| e.to_string())?;
    if resp.hidden.len() != layout.len() {
        return Err(format!("{} hidden rows for {} positions", resp.hidden.len(), layout.len()));
    }
    for (i, p) in layout.positions.iter().enumerate() {
        let want = match p {
            Position::Patch(transllm::llm_bridge::SpanKind::His, j) => Some(his.row(*j).to_vec()),
            Position::Patch(transllm::llm_bridge::SpanKind::Pre, j) => Some(pre.row(*j).to_vec()),
            _ => None,
        };
        if let Some(w) = want {
            if resp.hidden[i] != w {
                return Err(format!("position {i} does not echo its injected vector"));
            }
        }
    }
    let starts = vec![layout.his_start.unwrap(), layout.pre_start.unwrap()];
    if resp.st_indices != starts {
        return Err(format!("st indices {:?}, layout has {:?}", resp.st_indices, starts));
    }
    let state = client.pre_state(&layout, Some(&his), Some(&pre)).map_err(|e| e.to_string())?;
    if state != resp.hidden[layout.pre_start.unwrap()] {
        return Err("pre_state is not the row at <st_start>".into());
    }

    // A model served through the remote backend.
    let (mut model, data) = tiny_forecast();
    model.backend = Backend::Remote(RemoteLm::new(stub.url.clone(), 4));
    let TaskData::Forecast(fd) = &data else { unreachable!() };
    let (pred, _) = model.forecast_window(fd, &fd.windows[0], 3).map_err(|e| e.to_string())?;
    if pred.dim() != (4, 12) || pred.iter().any(|v| !v.is_finite()) {
        return Err(format!("remote-backed forecast has shape {:?}", pred.dim()));
    }

    let mut kinds = Vec::new();
    let fast = |url: &str| {
        let mut c = RemoteLm::new(url, d);
        c.timeout = Duration::from_millis(300);
        c
    };

    // Timeout: three attempts, then a timeout error.
    let body = serde_json::to_string(&common::echo_forward(&req, d)).unwrap();
    let slow = spawn(move |_, _| Reply::Delay(Duration::from_millis(1500), body.clone()));
    match fast(&slow.url).forward(&req) {
        Err(e @ Error::RemoteTimeout { retries: 2, .. }) => kinds.push(e.kind()),
        other => return Err(format!("timeout case gave {other:?}")),
    }
    std::thread::sleep(Duration::from_millis(100));
    if slow.hits() != 3 {
        return Err(format!("timeout case hit the server {} times", slow.hits()));
    }

    // Retries: two 503s, then success.
    let echo = echo_handler(d);
    let flaky = spawn(move |n, b| if n < 2 { Reply::Json(503, r#"{"error":"busy"}"#.into()) } else { echo(n, b) });
    fast(&flaky.url).forward(&req).map_err(|e| format!("recovering server: {e}"))?;
    if flaky.hits() != 3 {
        return Err(format!("recovering server hit {} times", flaky.hits()));
    }
    let down = spawn(|_, _| Reply::Json(503, r#"{"error":"busy"}"#.into()));
    match fast(&down.url).forward(&req) {
        Err(e @ Error::RemoteStatus { status: 503, retries: 2, .. }) => kinds.push(e.kind()),
        other => return Err(format!("persistent 503 gave {other:?}")),
    }
    if down.hits() != 3 {
        return Err(format!("persistent 503 hit {} times", down.hits()));
    }

    // Malformed bodies are not retried.
    let junk = spawn(|_, _| Reply::Json(200, "not json".into()));
    match fast(&junk.url).forward(&req) {
        Err(e @ Error::RemoteMalformed(_)) => kinds.push(e.kind()),
        other => return Err(format!("malformed body gave {other:?}")),
    }
    let short = spawn(|_, _| Reply::Json(200, r#"{"hidden":[[0,0,0,0]],"st_indices":[0]}"#.into()));
    if !matches!(fast(&short.url).forward(&req), Err(Error::RemoteMalformed(_))) {
        return Err("short hidden list accepted".into());
    }
    if junk.hits() != 1 || short.hits() != 1 {
        return Err("malformed responses were retried".into());
    }

    // Nothing listening.
    let closed = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}", l.local_addr().unwrap())
    };
    match fast(&closed).forward(&req) {
        Err(e @ Error::RemoteTransport { retries: 2, .. }) => kinds.push(e.kind()),
        other => return Err(format!("refused connection gave {other:?}")),
    }

    let mut distinct = kinds.clone();
    distinct.sort();
    distinct.dedup();
    if distinct.len() != kinds.len() {
        return Err(format!("error kinds are not distinct: {kinds:?}"));
    }
    Ok(format!("round trip aligned over {} positions, errors {kinds:?}", layout.len()))
}

#[test]
fn criterion_9_wire_protocol() {
    report(9, "wire protocol", wire_check());
}
