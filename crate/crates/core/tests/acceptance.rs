//! Acceptance suite. Every criterion is one test that prints a single
//! `[PASS]`/`[FAIL]` line with its measurement and then asserts.
//!
//! Run with `cargo test -p crpo-core --test acceptance -- --nocapture
//! --test-threads=1` to see the lines in order.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use crpo_core::adapt::{
    gate_advantage, identification_entropy, kl_target, pi_update_beta, GateParams,
};
use crpo_core::advantage::{combine, grpo_advantage, style_advantage_renorm};
use crpo_core::env::{CharacterUniverse, Prompt, UniverseParams};
use crpo_core::objective::{
    clipped_term, kl_penalty_estimate, objective_gradient, objective_value, ObjectiveOptions,
};
use crpo_core::policy::{PolicyParams, PolicyShape, PriorConfig};
use crpo_core::report::write_report_csv;
use crpo_core::sampler::batch_groups;
use crpo_core::trainer::{train_with, TrainConfig, TrainReport};
use crpo_core::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Long-running criteria hold this lock so their wall-clock budgets are
/// measured without competing test threads.
static HEAVY: Mutex<()> = Mutex::new(());

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const STEPS: usize = 300;

fn verdict(id: u32, name: &str, pass: bool, detail: &str, elapsed: Duration, budget: Duration) {
    let in_budget = elapsed < budget;
    let ok = pass && in_budget;
    println!(
        "[{}] {id:>2} {name}: {detail} ({:.2}s, budget {}s{})",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs(),
        if in_budget { "" } else { ", over budget" },
    );
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
    assert!(
        in_budget,
        "criterion {id} ({name}) exceeded its {}s budget",
        budget.as_secs()
    );
}

fn default_universe() -> CharacterUniverse {
    CharacterUniverse::build(&UniverseParams::default()).unwrap()
}

fn run(cfg: &TrainConfig, u: &CharacterUniverse) -> TrainReport {
    train_with(cfg, u, Execution::default()).unwrap().report
}

fn final_task_style(r: &TrainReport) -> (f64, f64) {
    let last = r.final_step().expect("non-empty run");
    (last.mean_task, last.mean_style)
}

// Population statistics through the pairwise-difference identity
// var = sum_{i<j} (x_i - x_j)^2 / n^2, independent of the library's two-pass form.
fn oracle_group_advantage(xs: &[f64], eps: f64) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let mut pair = 0.0;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            pair += (xs[i] - xs[j]).powi(2);
        }
    }
    let std = (pair / (n * n)).sqrt();
    xs.iter().map(|x| (x - mean) / (std + eps)).collect()
}

#[test]
fn c01_group_advantage_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let g = rng.gen_range(2..=16);
        let scale = 10f64.powi(rng.gen_range(-2..=2));
        let xs: Vec<f64> = (0..g).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let got = grpo_advantage(&xs, 1e-8).unwrap();
        let want = oracle_group_advantage(&xs, 1e-8);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(
        1,
        "group advantage vs brute-force oracle",
        worst < 1e-9,
        &format!("max abs error {worst:.2e} over 10^4 groups (limit 1e-9)"),
        started.elapsed(),
        Duration::from_secs(5),
    );
}

#[test]
#[allow(clippy::approx_constant)]
fn c02_worked_values() {
    let started = Instant::now();
    let shape = PolicyShape {
        characters: 1,
        queries: 1,
        positions: 1,
        vocab: 2,
    };
    let two = PolicyParams::from_logits(shape, vec![1.0, 0.0]).unwrap();
    let p = two.position_distribution(&Prompt::new(0, 0), 0, 1.0);
    let renorm = style_advantage_renorm(&[0.5, 0.5, -2.0], 1e-8).unwrap();
    let checks: Vec<(&str, f64, f64)> = vec![
        ("softmax(1,0)[0]", p[0], 0.731_058_578_630_004_9),
        ("softmax(1,0)[1]", p[1], 0.268_941_421_369_995_1),
        (
            "binary entropy at 0.9",
            identification_entropy(0.9),
            0.468_996,
        ),
        ("renorm[0]", renorm[0], 0.707_107),
        ("renorm[1]", renorm[1], 0.707_107),
        ("renorm[2]", renorm[2], -1.414_214),
        (
            "beta update",
            pi_update_beta(0.01, 0.3, 0.1, 0.2, 0.1),
            0.0102,
        ),
        ("clipped term", clipped_term(1.5, -1.0, 0.2), -1.5),
        ("kl penalty", kl_penalty_estimate(0.0, 2f64.ln()), 0.306_853),
        ("combine", combine(1.0, -1.0, 0.55), 0.10),
    ];
    let worst = checks
        .iter()
        .map(|(_, got, want)| (got - want).abs())
        .fold(0.0, f64::max);
    let failing: Vec<&str> = checks
        .iter()
        .filter(|(_, got, want)| (got - want).abs() >= 1e-6)
        .map(|(n, _, _)| *n)
        .collect();
    verdict(
        2,
        "worked values",
        failing.is_empty(),
        &format!(
            "{} values, max deviation {worst:.1e} (limit 1e-6), failing {failing:?}",
            checks.len()
        ),
        started.elapsed(),
        Duration::from_secs(1),
    );
}

#[test]
fn c03_gradient_check() {
    let started = Instant::now();
    let u = CharacterUniverse::build(&UniverseParams {
        seed: 3,
        num_characters: 2,
        vocab_size: 4,
        markers_per_char: (1, 1),
        num_queries: 2,
        response_len: 2,
    })
    .unwrap();
    let reference = PolicyParams::pretrained(&u, &PriorConfig::default(), 11);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut old = reference.clone();
    old.logits
        .iter_mut()
        .for_each(|x| *x += rng.gen_range(-0.5..0.5));
    let mut params = old.clone();
    params
        .logits
        .iter_mut()
        .for_each(|x| *x += rng.gen_range(-0.05..0.05));
    let prompts: Vec<Prompt> = (0..6).map(|i| Prompt::new(1, i % 2)).collect();
    let groups = batch_groups(&old, &prompts, 4, 1, 1.0, 9, Execution::Sequential).unwrap();
    let advantages: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| (0..g.len()).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let betas = [0.3, 0.3];
    let opts = ObjectiveOptions::default();
    let analytic = objective_gradient(
        &groups,
        &advantages,
        &params,
        &old,
        &reference,
        &betas,
        &opts,
        Execution::Sequential,
    )
    .unwrap();
    let f = |p: &PolicyParams| {
        objective_value(&groups, &advantages, p, &old, &reference, &betas, &opts).unwrap()
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, &g) in analytic.iter().enumerate() {
        let mut plus = params.clone();
        plus.logits[i] += h;
        let mut minus = params.clone();
        minus.logits[i] -= h;
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        let denom = g.abs().max(fd.abs()).max(1e-8);
        worst = worst.max((g - fd).abs() / denom);
    }
    let nonzero = analytic.iter().filter(|g| g.abs() > 1e-12).count();
    verdict(
        3,
        "objective gradient vs central differences",
        worst < 1e-4 && nonzero > 0,
        &format!(
            "max relative error {worst:.2e} over {} parameters, {nonzero} nonzero (limit 1e-4)",
            analytic.len()
        ),
        started.elapsed(),
        Duration::from_secs(10),
    );
}

#[test]
fn c04_controller_convergence() {
    let started = Instant::now();
    let gate = GateParams::default();
    let d_targ = gate.d_base;
    let beta0 = 0.01;
    let k = 5.0 * d_targ * beta0;
    let mut beta = beta0;
    let mut reached = None;
    for step in 0..=200 {
        let d = k / beta;
        if (d / d_targ - 1.0).abs() < 0.05 {
            reached = Some(step);
            break;
        }
        beta = pi_update_beta(beta, d, d_targ, gate.delta_bound, gate.k_p);
    }
    verdict(
        4,
        "controller convergence on D = k/beta",
        reached.is_some(),
        &format!("|D/d_targ - 1| < 0.05 reached at step {reached:?} (limit 200)"),
        started.elapsed(),
        Duration::from_secs(1),
    );
}

#[test]
fn c05_anchor_amplification() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA5C);
    let mut held = 0;
    let mut first_violation = None;
    for trial in 0..1000 {
        let g = rng.gen_range(2..=16);
        let mut xs: Vec<f64> = (0..g - 1).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let floor = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        xs.push(floor - rng.gen_range(0.01..3.0));
        let anchor = g - 1;
        let mean = xs.iter().sum::<f64>() / g as f64;
        let mut control = xs.clone();
        control[anchor] = mean;
        let with_anchor = style_advantage_renorm(&xs, 1e-8).unwrap();
        let without = style_advantage_renorm(&control, 1e-8).unwrap();
        if (0..anchor).all(|i| with_anchor[i] > without[i]) {
            held += 1;
        } else if first_violation.is_none() {
            first_violation = Some((trial, xs.clone()));
        }
    }
    let detail = match &first_violation {
        None => "every non-anchor member raised in 1000/1000 groups".to_string(),
        Some((t, xs)) => format!(
            "every non-anchor member raised in {held}/1000 groups (required 1000); first violation at trial {t}: {xs:.3?}"
        ),
    };
    verdict(
        5,
        "anchor amplification",
        held == 1000,
        &detail,
        started.elapsed(),
        Duration::from_secs(5),
    );
}

#[test]
fn c06_gate_envelope() {
    let started = Instant::now();
    let gamma = GateParams::default().gamma;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6A7E);
    let mut monotone = true;
    let mut worst_end: f64 = 0.0;
    for _ in 0..100 {
        let a: f64 = rng.gen_range(-3.0..3.0);
        let g: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norms: Vec<f64> = (0..=100)
            .map(|k| {
                let w = gate_advantage(a, k as f64 / 100.0, gamma).unwrap();
                g.iter().map(|x| (w * x).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        monotone &= norms.windows(2).all(|w| w[1] <= w[0]);
        worst_end = worst_end.max((norms[100] - (1.0 - gamma) * a.abs() * g_norm).abs());
    }
    verdict(
        6,
        "gate monotonicity and envelope",
        monotone && worst_end < 1e-12,
        &format!("nonincreasing on 101-point grid: {monotone}; |value at 1 - (1-gamma)|ag|| max {worst_end:.1e} (limit 1e-12)"),
        started.elapsed(),
        Duration::from_secs(1),
    );
}

#[test]
fn c07_kl_target_monotone() {
    let started = Instant::now();
    let gate = GateParams::default();
    let t = |r: f64| kl_target(gate.d_base, r, gate.clamp_min, gate.clamp_max);
    let grid: Vec<f64> = (0..=490).map(|i| 0.1 + i as f64 * 0.01).collect();
    let values: Vec<f64> = grid.iter().map(|&r| t(r)).collect();
    let monotone = values.windows(2).all(|w| w[1] >= w[0]);
    let at_one = t(1.0) == gate.d_base;
    let low = grid
        .iter()
        .zip(&values)
        .filter(|(r, _)| **r <= gate.clamp_min)
        .all(|(_, v)| *v == gate.d_base * gate.clamp_min);
    let high = grid
        .iter()
        .zip(&values)
        .filter(|(r, _)| **r >= gate.clamp_max)
        .all(|(_, v)| *v == gate.d_base * gate.clamp_max);
    verdict(
        7,
        "KL target monotonicity",
        monotone && at_one && low && high,
        &format!(
            "nondecreasing {monotone}, d_base at r=1 {at_one}, saturates low {low} high {high}"
        ),
        started.elapsed(),
        Duration::from_secs(1),
    );
}

fn quartile_means(xs: &[f64]) -> (f64, f64) {
    let q = xs.len() / 4;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&xs[..q]), mean(&xs[xs.len() - q..]))
}

#[test]
fn c08_end_to_end_dynamics() {
    let _lock = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let u = default_universe();
    let mut style_wins = 0;
    let mut tracked = 0;
    let mut spread_ok = 0;
    let mut h_curve = vec![0.0; STEPS];
    let mut lines = Vec::new();
    for seed in SEEDS {
        let crpo = run(
            &TrainConfig {
                seed,
                epochs: STEPS,
                ..TrainConfig::default()
            },
            &u,
        );
        let grpo = run(
            &TrainConfig {
                seed,
                epochs: STEPS,
                ..TrainConfig::grpo()
            },
            &u,
        );
        let (ct, cs) = final_task_style(&crpo);
        let (gt, gs) = final_task_style(&grpo);
        if cs > gs && (ct - gt).abs() <= 0.05 {
            style_wins += 1;
        }
        for (acc, m) in h_curve.iter_mut().zip(&crpo.steps) {
            *acc += m.mean_h_id / SEEDS.len() as f64;
        }
        let ratios: Vec<f64> = crpo
            .characters
            .iter()
            .map(|c| c.final_kl / c.d_targ)
            .collect();
        if ratios.iter().all(|r| (r - 1.0).abs() <= 0.5) {
            tracked += 1;
        }
        let kls: Vec<f64> = grpo.characters.iter().map(|c| c.final_kl).collect();
        let spread = kls.iter().cloned().fold(0.0, f64::max)
            / kls.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread >= 2.0 {
            spread_ok += 1;
        }
        lines.push(format!(
            "seed {seed}: crpo task {ct:.3} style {cs:.3} | grpo task {gt:.3} style {gs:.3} | crpo kl/d_targ {ratios:.2?} | grpo kl spread {spread:.2}"
        ));
    }
    let (h_first, h_last) = quartile_means(&h_curve);
    for l in &lines {
        println!("     {l}");
    }
    let a = style_wins >= 4;
    let b = h_last < h_first;
    let c = tracked == SEEDS.len() && spread_ok == SEEDS.len();
    verdict(
        8,
        "end-to-end CRPO vs GRPO dynamics",
        a && b && c,
        &format!(
            "(a) style win at task parity in {style_wins}/5 seeds (need 4): {a}; (b) H_id quartiles {h_first:.4} -> {h_last:.4}: {b}; \
             (c) CRPO within 50% of d_targ in {tracked}/5, GRPO spread >= 2x in {spread_ok}/5: {c}"
        ),
        started.elapsed(),
        Duration::from_secs(120),
    );
}

#[test]
fn c09_ablation_direction() {
    let _lock = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let u = default_universe();
    type Knockout = fn(&mut TrainConfig);
    let ablations: [(&str, Knockout); 3] = [
        ("dual-stream", |c| c.dual_stream = false),
        ("adaptation", |c| {
            c.gating = false;
            c.kl_relaxation = false;
        }),
        ("anchor", |c| c.anchors_per_group = 0),
    ];
    let mut degraded = [0usize; 3];
    for seed in SEEDS {
        let base = TrainConfig {
            seed,
            epochs: STEPS,
            ..TrainConfig::default()
        };
        let full = final_task_style(&run(&base, &u)).1;
        let mut row = format!("seed {seed}: full style {full:.3}");
        for (i, (name, disable)) in ablations.iter().enumerate() {
            let mut cfg = base.clone();
            disable(&mut cfg);
            let style = final_task_style(&run(&cfg, &u)).1;
            if style < full {
                degraded[i] += 1;
            }
            row += &format!(" | w/o {name} {style:.3}");
        }
        println!("     {row}");
    }
    let ok = degraded.iter().all(|&d| d >= 3);
    verdict(
        9,
        "ablation direction",
        ok,
        &format!(
            "style degraded in dual-stream {}/5, adaptation {}/5, anchor {}/5 (need 3 each)",
            degraded[0], degraded[1], degraded[2]
        ),
        started.elapsed(),
        Duration::from_secs(360),
    );
}

#[test]
fn c10_reproducibility() {
    let _lock = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let u = default_universe();
    let cfg = TrainConfig {
        seed: 7,
        epochs: STEPS,
        ..TrainConfig::default()
    };
    let csv = |r: &TrainReport| {
        let mut buf = Vec::new();
        write_report_csv(&mut buf, r).unwrap();
        buf
    };
    let first = csv(&run(&cfg, &u));
    let second = csv(&run(&cfg, &u));
    verdict(
        10,
        "bit-identical reports",
        first == second && !first.is_empty(),
        &format!(
            "two runs of seed 7 produce {} and {} identical bytes: {}",
            first.len(),
            second.len(),
            first == second
        ),
        started.elapsed(),
        Duration::from_secs(120),
    );
}
