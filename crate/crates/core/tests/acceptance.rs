//! Acceptance suite: ten criteria, one PASS/FAIL line each. Runs with a
//! custom harness so the lines are always shown. `ACCEPTANCE_ONLY=2,5`
//! restricts the run to the listed criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use hiplan::analysis::{
    critic_value_grid, example1_diffuser_argmax, example1_empirical_check, example1_grid, example1_q_policy, example1_samples,
    grid_spearman, guidance_value_grid, oracle_value_grid,
};
use hiplan::conductor::{DConductorConfig, GuidanceNet};
use hiplan::data::{sample_subgoal_index, Dataset, Normalizer};
use hiplan::diffusion::{
    self, denoise_loss_with, fit_unconditional, standard_normal, Denoiser, DiffusionSchedule, FitConfig, Guidance, Inpaint,
    SamplerOptions, ScheduleKind,
};
use hiplan::env::{PointMassEnv, ScriptedPolicy, ToyAction, ToyMdp};
use hiplan::experiment::{
    evaluate_seeds, generate_dataset, make_agent, reference_scores, train_conductor, train_performer, ConductorTable, DataConfig,
    PerformerTable, Policy,
};
use hiplan::nn::{grad_check, Checkpoint, MlpNet};
use hiplan::orchestrator::{ConductorKind, ConductorModel, PerformerKind, PerformerModel, ReferenceScores, Variant};
use hiplan::performer::{chain_noise, min_q_and_grad, ActorCriticConfig, CriticBatch, DiffusionActorCritic, RewardScheme};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];
const EVAL_EPISODES: usize = 20;
const OMEGA_GRID: [f64; 4] = [0.1, 0.01, 0.001, 0.0001];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn within(elapsed: Duration, limit_secs: f64) -> bool {
    elapsed.as_secs_f64() < limit_secs
}

// 1. Closed-form example: diffuser argmax vs the inequality, Q-policy optimality.
fn example1_exact() -> Outcome {
    let t = Instant::now();
    let mdp = ToyMdp::default();
    let grid = example1_grid();
    let mut argmax_ok = 0;
    let mut q_ok = 0;
    for inst in &grid {
        let predicted = if inst.n1 as f64 * inst.g1 > inst.n2 as f64 * inst.g2 { ToyAction::B1 } else { ToyAction::B2 };
        argmax_ok += usize::from(example1_diffuser_argmax(inst) == predicted);
        q_ok += usize::from(matches!(example1_q_policy(inst, &mdp), Ok(ToyAction::B2)));
    }
    let el = t.elapsed();
    let pass = grid.len() == 20 * 20 * 5 * 5 && argmax_ok == grid.len() && q_ok == grid.len() && within(el, 1.0);
    outcome(pass, format!("argmax {argmax_ok}/{n}, Q-policy b2 {q_ok}/{n}, {:.3}s (< 1s)", el.as_secs_f64(), n = grid.len()))
}

// 2. A trained 1-D diffusion model reproduces the category frequencies.
fn frequency_matching() -> Outcome {
    let t = Instant::now();
    let sched = DiffusionSchedule::new(20, ScheduleKind::Cosine).unwrap();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (i, (n1, n2)) in [(1usize, 1usize), (3, 1), (9, 1)].into_iter().enumerate() {
        let mut r = rng(200 + i as u64);
        let mut den = Denoiser::new(1, 0, 64, 3, &mut r);
        let cfg = FitConfig {
            steps: 3000,
            batch: 256,
            lr: 2e-3,
            lr_floor: 0.05,
        };
        fit_unconditional(&mut den, &example1_samples(n1, n2), &sched, cfg, &mut r).unwrap();
        let rep = example1_empirical_check(n1 as u64, n2 as u64, &den, &sched, None, 10_000, &mut r).unwrap();
        worst = worst.max(rep.max_abs_error);
        parts.push(format!("({n1},{n2}) b1 {:.3} vs {:.3}", rep.observed_b1, rep.expected_b1));
    }
    let el = t.elapsed();
    outcome(
        worst <= 0.05 && within(el, 300.0),
        format!("{}; max error {:.1}pp (<= 5pp), {:.0}s (< 300s)", parts.join(", "), worst * 100.0, el.as_secs_f64()),
    )
}

// 3. Analytic gradients of every training loss against central differences.
fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let tol = 1e-4;
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    let mut note = |name: &str, seed: u64, rel: f64, pass: bool| {
        worst = worst.max(rel);
        if !pass {
            failures.push(format!("{name}#{seed}"));
        }
    };
    let ac_config = ActorCriticConfig {
        hidden: 10,
        depth: 2,
        diffusion_steps: 4,
        ..ActorCriticConfig::default()
    };
    let random = |rows: usize, cols: usize, r: &mut ChaCha8Rng| Array2::from_shape_simple_fn((rows, cols), || r.random_range(-1.0..1.0));
    for seed in 0..10u64 {
        // denoise
        let mut r = rng(1000 + seed);
        let den = Denoiser::new(4, 2, 12, 2, &mut r);
        let s = DiffusionSchedule::new(20, ScheduleKind::Cosine).unwrap();
        let (x0, cond) = (random(5, 4, &mut r), random(5, 2, &mut r));
        let m: Vec<usize> = (0..5).map(|_| r.random_range(1..=20)).collect();
        let eps = standard_normal(5, 4, &mut r);
        let (_, g) = denoise_loss_with(&den, x0.view(), cond.view(), &s, &m, eps.view()).unwrap();
        let mut probe = den.clone();
        let rep = grad_check(
            &den.net.flat_params(),
            &g.flatten(),
            |p| {
                probe.net.set_flat_params(p).unwrap();
                denoise_loss_with(&probe, x0.view(), cond.view(), &s, &m, eps.view()).unwrap().0
            },
            1e-4,
        );
        note("denoise", seed, rep.max_rel_error, rep.passes(tol));

        // guidance
        let g_net = GuidanceNet::new(6, 10, 2, &mut r);
        let s = DiffusionSchedule::new(10, ScheduleKind::Cosine).unwrap();
        let x0 = random(5, 6, &mut r);
        let ret = Array1::from_shape_simple_fn(5, || r.random_range(0.0..3.0));
        let m: Vec<usize> = (0..5).map(|_| r.random_range(1..=10)).collect();
        let eps = standard_normal(5, 6, &mut r);
        let (_, grads) = hiplan::conductor::guidance_loss_with(&g_net, x0.view(), &ret, &m, eps.view(), &s).unwrap();
        let mut probe = g_net.clone();
        let rep = grad_check(
            &g_net.net.flat_params(),
            &grads.flatten(),
            |p| {
                probe.net.set_flat_params(p).unwrap();
                hiplan::conductor::guidance_loss_with(&probe, x0.view(), &ret, &m, eps.view(), &s).unwrap().0
            },
            1e-5,
        );
        note("guidance", seed, rep.max_rel_error, rep.passes(tol));

        // bc
        let mut ac = DiffusionActorCritic::new(3, 2, ac_config, &mut r).unwrap();
        let (c, a) = (random(5, 3, &mut r), random(5, 2, &mut r));
        let m: Vec<usize> = (0..5).map(|_| r.random_range(1..=4)).collect();
        let eps = standard_normal(5, 2, &mut r);
        let (_, g) = ac.bc_loss_with(c.view(), a.view(), &m, eps.view()).unwrap();
        let mut probe = ac.clone();
        let rep = grad_check(
            &ac.actor.net.flat_params(),
            &g.flatten(),
            |p| {
                probe.actor.net.set_flat_params(p).unwrap();
                probe.bc_loss_with(c.view(), a.view(), &m, eps.view()).unwrap().0
            },
            1e-5,
        );
        note("bc", seed, rep.max_rel_error, rep.passes(tol));

        // td, with distinct targets so the min is exercised
        ac.targets[1] = MlpNet::new(&[5, 10, 10, 1], &mut r);
        let batch = CriticBatch {
            cond: random(6, 3, &mut r),
            actions: random(6, 2, &mut r),
            rewards: Array1::from_shape_simple_fn(6, || r.random_range(0.0..2.0)),
            dones: Array1::from_shape_simple_fn(6, || if r.random_bool(0.2) { 1.0 } else { 0.0 }),
            next_cond: random(6, 3, &mut r),
        };
        let next = random(6, 2, &mut r);
        let (_, grads) = ac.td_loss_with(&batch, &next).unwrap();
        for (i, g) in grads.iter().enumerate() {
            let mut probe = ac.clone();
            let rep = grad_check(
                &ac.critics[i].flat_params(),
                &g.flatten(),
                |p| {
                    probe.critics[i].set_flat_params(p).unwrap();
                    probe.td_loss_with(&batch, &next).unwrap().0
                },
                1e-5,
            );
            note("td", seed, rep.max_rel_error, rep.passes(tol));
        }

        // policy improvement; the scale alpha / mean|Q| is a constant of the loss
        let cond = random(5, 3, &mut r);
        let (top, noise) = chain_noise(5, 2, 4, &mut r);
        let (_, g) = ac.policy_improve_loss_with(cond.view(), &top, &noise).unwrap();
        let a0 = ac.chain_actions(cond.view(), &top, &noise).unwrap();
        let (q0, _) = min_q_and_grad(&ac.critics, cond.view(), &a0).unwrap();
        let alpha_hat = ac.config.alpha / q0.mapv(f64::abs).mean().unwrap();
        let mut probe = ac.clone();
        let rep = grad_check(
            &ac.actor.net.flat_params(),
            &g.flatten(),
            |p| {
                probe.actor.net.set_flat_params(p).unwrap();
                let a = probe.chain_actions(cond.view(), &top, &noise).unwrap();
                let (q, _) = min_q_and_grad(&probe.critics, cond.view(), &a).unwrap();
                -alpha_hat * q.mean().unwrap()
            },
            1e-5,
        );
        note("improve", seed, rep.max_rel_error, rep.passes(tol));
    }
    let el = t.elapsed();
    let detail = format!(
        "5 losses x 10 seeds, worst relative error {worst:.2e} (< 1e-4), failures [{}], {:.1}s (< 60s)",
        failures.join(" "),
        el.as_secs_f64()
    );
    outcome(failures.is_empty() && within(el, 60.0), detail)
}

// 4. A trained sampler reproduces the moments of N(0.5, 0.1^2).
fn moment_recovery() -> Outcome {
    let t = Instant::now();
    let mut r = rng(400);
    let data = Array2::from_shape_simple_fn((10_000, 1), || 0.5 + 0.1 * r.sample::<f64, _>(rand_distr::StandardNormal));
    let sched = DiffusionSchedule::new(50, ScheduleKind::Cosine).unwrap();
    let mut den = Denoiser::new(1, 0, 64, 3, &mut r);
    let cfg = FitConfig {
        steps: 4000,
        batch: 256,
        lr: 2e-3,
        lr_floor: 0.05,
    };
    fit_unconditional(&mut den, &data, &sched, cfg, &mut r).unwrap();
    let empty = Array2::zeros((10_000, 0));
    let x = diffusion::sample(&den, 10_000, empty.view(), &sched, None, None, SamplerOptions::default(), &mut r).unwrap();
    let mean = x.mean().unwrap();
    let sd = x.column(0).std(1.0);
    let el = t.elapsed();
    outcome(
        (mean - 0.5).abs() <= 0.05 && (sd - 0.1).abs() <= 0.03 && within(el, 300.0),
        format!("mean {mean:.4} (0.5 +- 0.05), sd {sd:.4} (0.1 +- 0.03), {:.0}s (< 300s)", el.as_secs_f64()),
    )
}

// 5. One-step TD on the single-state MDP with constant reward. Logged
// actions span the whole action range, so the policy's next action always
// lies inside the data.
fn td_fixed_point() -> Outcome {
    let t = Instant::now();
    let (r_const, gamma) = (1.0, 0.9);
    let oracle = r_const / (1.0 - gamma);
    let config = ActorCriticConfig {
        hidden: 32,
        depth: 2,
        gamma,
        eta: 1.0,
        critic_lr: 1e-2,
        lr_floor: 1e-3,
        ..ActorCriticConfig::default()
    };
    let mut r = rng(500);
    let mut ac = DiffusionActorCritic::new(1, 1, config, &mut r).unwrap();
    let mut optim = ac.optimizers();
    let steps = 3000;
    let state = ToyMdp::STATE[0];
    for step in 0..steps {
        let batch = CriticBatch {
            cond: Array2::from_elem((64, 1), state),
            actions: Array2::from_shape_simple_fn((64, 1), || r.random_range(-1.0..1.0)),
            rewards: Array1::from_elem(64, r_const),
            dones: Array1::zeros(64),
            next_cond: Array2::from_elem((64, 1), state),
        };
        ac.update(&batch, &mut optim, ac.lr_scale(step, steps), step, &mut r).unwrap();
    }
    let probe_actions = Array2::from_shape_vec((5, 1), vec![-1.0, -0.5, 0.0, 0.5, 1.0]).unwrap();
    let q = ac.q_values(Array2::from_elem((5, 1), state).view(), probe_actions.view()).unwrap();
    let err = q.iter().map(|v| (v - oracle).abs()).fold(0.0, f64::max);
    let el = t.elapsed();
    outcome(
        err <= 1e-2 && within(el, 60.0),
        format!("Q(c, a) over a in [-1, 1]: {:.4?}, oracle {oracle:.4}, max error {err:.2e} (<= 1e-2), {:.1}s (< 60s)", q.to_vec(), el.as_secs_f64()),
    )
}

// 10. Property suites.
fn properties() -> Outcome {
    let t = Instant::now();
    let runner = || TestRunner::new(PropConfig { cases: 64, ..PropConfig::default() });
    let mut results: Vec<(&str, Result<(), String>)> = Vec::new();

    let r = runner().run(&(any::<u64>(), 1usize..4, 2usize..10), |(seed, dim, rows)| {
        let mut g = rng(seed);
        let den = Denoiser::new(dim, 0, 8, 2, &mut g);
        let sched = DiffusionSchedule::new(6, ScheduleKind::Cosine).unwrap();
        let guide = hiplan::analysis::LinearGuide { slope: 3.0 };
        let empty = Array2::zeros((rows, 0));
        let a = diffusion::sample(&den, rows, empty.view(), &sched, None, None, SamplerOptions::default(), &mut rng(seed ^ 1)).unwrap();
        let zero = Guidance { guide: &guide, omega: 0.0 };
        let b = diffusion::sample(&den, rows, empty.view(), &sched, Some(zero), None, SamplerOptions::default(), &mut rng(seed ^ 1)).unwrap();
        let same = a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
        prop_assert!(same);
        Ok(())
    });
    results.push(("omega=0 bitwise", r.map_err(|e| e.to_string())));

    let r = runner().run(&(any::<u64>(), proptest::collection::vec(-1.0f64..1.0, 1..4)), |(seed, vals)| {
        let mut g = rng(seed);
        let dim = 5;
        let den = Denoiser::new(dim, 0, 8, 2, &mut g);
        let sched = DiffusionSchedule::new(5, ScheduleKind::Cosine).unwrap();
        let idx: Vec<usize> = (0..vals.len()).map(|i| (i * 2) % dim).collect();
        let pin = Inpaint::broadcast(idx.clone(), &vals, 3);
        let guide = hiplan::analysis::LinearGuide { slope: 2.0 };
        let gd = Guidance { guide: &guide, omega: 0.5 };
        let empty = Array2::zeros((3, 0));
        let mut exact = true;
        diffusion::sample_traced(&den, 3, empty.view(), &sched, Some(gd), Some(&pin), SamplerOptions::default(), &mut g, &mut |_, x| {
            for row in x.rows() {
                for (j, &i) in idx.iter().enumerate() {
                    exact &= row[i] == vals[j];
                }
            }
        })
        .unwrap();
        prop_assert!(exact);
        Ok(())
    });
    results.push(("inpainting exact", r.map_err(|e| e.to_string())));

    let r = runner().run(&(any::<u64>(), 1usize..200, 1usize..10, 0.01f64..=1.0), |(seed, len, k, p)| {
        let mut g = rng(seed);
        let t = g.random_range(0..len);
        let i = sample_subgoal_index(t, k, p, len, &mut g);
        prop_assert!(i >= t && i < len);
        Ok(())
    });
    results.push(("sub-goal index legal", r.map_err(|e| e.to_string())));

    let r = runner().run(&proptest::collection::vec(proptest::collection::vec(-50.0f32..50.0, 3), 2..20), |rows| {
        let norm = Normalizer::fit(3, rows.iter().map(|r| r.as_slice()));
        for row in &rows {
            let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let back = norm.denormalize(&norm.normalize(&row));
            for (a, b) in row.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
            }
        }
        Ok(())
    });
    results.push(("normalization round-trip", r.map_err(|e| e.to_string())));

    let r = runner().run(&(any::<u64>(), proptest::collection::vec(1usize..8, 2..5)), |(seed, widths)| {
        let net = MlpNet::new(&widths, &mut rng(seed));
        let ckpt = Checkpoint::new("probe", serde_json::json!({ "seed": seed })).with_net("net", &net);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        prop_assert_eq!(&back, &ckpt);
        let same = back.net("net").unwrap().flat_params().iter().zip(net.flat_params()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
        Ok(())
    });
    results.push(("checkpoint round-trip", r.map_err(|e| e.to_string())));

    let el = t.elapsed();
    let failed: Vec<String> = results.iter().filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}"))).collect();
    let pass = failed.is_empty() && within(el, 60.0);
    let detail = if failed.is_empty() {
        format!("{} properties x 64 cases, {:.1}s (< 60s)", results.len(), el.as_secs_f64())
    } else {
        failed.join("; ")
    };
    outcome(pass, detail)
}

/// Per-seed OpenMaze artefacts shared by criteria 6, 7 and 9.
struct OpenMazeSeed {
    dataset: Dataset,
    flat_q: PerformerModel,
    flat_diffuser: ConductorModel,
    q_secs: f64,
    diffuser_secs: f64,
}

fn open_maze_q_table() -> PerformerTable {
    let mut t = PerformerTable {
        kind: PerformerKind::Q,
        steps: 2000,
        ..PerformerTable::default()
    };
    t.q.reward = RewardScheme::Both;
    t.q.ac.gamma = 0.99;
    t
}

fn open_maze_seed(seed: u64) -> OpenMazeSeed {
    let env = PointMassEnv::open_maze();
    let data = DataConfig {
        behavior: ScriptedPolicy::RandomGoalAvoider { exclusion_radius: 2.0 },
        episodes: 100,
        seed,
    };
    let dataset = generate_dataset(&env, &data).unwrap();
    let t = Instant::now();
    let (flat_q, _) = train_performer(&open_maze_q_table(), &dataset, seed, None, usize::MAX).unwrap();
    let q_secs = t.elapsed().as_secs_f64();
    let diffuser = ConductorTable {
        kind: ConductorKind::Diffusion,
        steps: 4000,
        diffusion: DConductorConfig {
            interval: 1,
            horizon: 24,
            augmented: true,
            plan_samples: 16,
            lr_floor: 0.1,
            ..DConductorConfig::default()
        },
        ..ConductorTable::default()
    };
    let t = Instant::now();
    let (flat_diffuser, _) = train_conductor(&diffuser, &dataset, seed, None, usize::MAX).unwrap();
    OpenMazeSeed {
        dataset,
        flat_q,
        flat_diffuser,
        q_secs,
        diffuser_secs: t.elapsed().as_secs_f64(),
    }
}

/// Best normalized score over the guidance-scale grid, with its scale.
fn best_over_omega(policy: Policy, c: &ConductorModel, p: Option<&PerformerModel>, env: &PointMassEnv, seed: u64, refs: ReferenceScores) -> (f64, f64) {
    OMEGA_GRID
        .iter()
        .map(|&w| {
            let reports = evaluate_seeds(&mut || make_agent(policy, Some(c), p, env, None, Some(w)), env, EVAL_EPISODES, &[100 + seed], refs).unwrap();
            (reports[0].normalized_mean, w)
        })
        .fold((f64::NEG_INFINITY, 0.0), |best, x| if x.0 > best.0 { x } else { best })
}

// 6. Flat Q-Performer vs value-guided flat diffuser on OpenMaze.
fn open_maze_gap(seeds: &[OpenMazeSeed]) -> Outcome {
    let t = Instant::now();
    let env = PointMassEnv::open_maze();
    let refs = reference_scores(&env).unwrap();
    let mut q_scores = Vec::new();
    let mut d_scores = Vec::new();
    let mut parts = Vec::new();
    for (s, &seed) in seeds.iter().zip(&SEEDS) {
        let q = evaluate_seeds(&mut || make_agent(Policy::FlatQ, None, Some(&s.flat_q), &env, None, None), &env, EVAL_EPISODES, &[100 + seed], refs)
            .unwrap()[0]
            .normalized_mean;
        let (d, w) = best_over_omega(Policy::FlatDiffuser, &s.flat_diffuser, None, &env, seed, refs);
        parts.push(format!("seed {seed}: Q {q:.1} vs diffuser {d:.1} (w={w})"));
        q_scores.push(q);
        d_scores.push(d);
    }
    let train: f64 = seeds.iter().map(|s| s.q_secs + s.diffuser_secs).sum();
    let el = t.elapsed().as_secs_f64() + train;
    let gap = mean(&q_scores) - mean(&d_scores);
    outcome(
        gap >= 5.0 && el < 1800.0,
        format!("{}; mean gap {gap:.1} (>= 5), {el:.0}s incl. training (< 1800s)", parts.join("; ")),
    )
}

// 7. Value-map rank correlation with the oracle, critic vs guidance.
fn value_map_order(seeds: &[OpenMazeSeed]) -> Outcome {
    let t = Instant::now();
    let env = PointMassEnv::open_maze();
    let mut pass = true;
    let mut parts = Vec::new();
    for (s, &seed) in seeds.iter().zip(&SEEDS) {
        let (PerformerModel::Q(q), ConductorModel::Diffusion(d)) = (&s.flat_q, &s.flat_diffuser) else {
            unreachable!("kinds fixed above")
        };
        let oracle = oracle_value_grid(&env, 20, q.config.ac.gamma).unwrap();
        let rq = grid_spearman(&critic_value_grid(q, &env, 20).unwrap(), &oracle).unwrap();
        let rd = grid_spearman(&guidance_value_grid(d, &env, 20).unwrap(), &oracle).unwrap();
        pass &= rq > rd;
        parts.push(format!("seed {seed}: critic {rq:.3} vs guidance {rd:.3}"));
    }
    let el = t.elapsed();
    outcome(pass && within(el, 600.0), format!("{}; 20x20 grids, {:.1}s given checkpoints (< 600s)", parts.join("; "), el.as_secs_f64()))
}

// 9. PlanDQ vs PlanDD on dense OpenMaze, each at its best guidance scale.
fn variant_order(seeds: &[OpenMazeSeed]) -> Outcome {
    let env = PointMassEnv::open_maze();
    let refs = reference_scores(&env).unwrap();
    let conductor = ConductorTable {
        kind: ConductorKind::Diffusion,
        steps: 4000,
        diffusion: DConductorConfig {
            interval: 4,
            horizon: 8,
            augmented: false,
            plan_samples: 8,
            lr_floor: 0.1,
            ..DConductorConfig::default()
        },
        ..ConductorTable::default()
    };
    let mut dperf = PerformerTable {
        kind: PerformerKind::Diffusion,
        steps: 4000,
        ..PerformerTable::default()
    };
    dperf.diffusion.lr_floor = 0.1;
    let (mut dq, mut dd) = (Vec::new(), Vec::new());
    let mut parts = Vec::new();
    for (s, &seed) in seeds.iter().zip(&SEEDS) {
        let (c, _) = train_conductor(&conductor, &s.dataset, seed, None, usize::MAX).unwrap();
        let (p, _) = train_performer(&dperf, &s.dataset, seed, None, usize::MAX).unwrap();
        let (a, wa) = best_over_omega(Policy::Hierarchical(Variant::PlanDQ), &c, Some(&s.flat_q), &env, seed, refs);
        let (b, wb) = best_over_omega(Policy::Hierarchical(Variant::PlanDD), &c, Some(&p), &env, seed, refs);
        parts.push(format!("seed {seed}: PlanDQ {a:.1} (w={wa}) vs PlanDD {b:.1} (w={wb})"));
        dq.push(a);
        dd.push(b);
    }
    let (a, b) = (mean(&dq), mean(&dd));
    outcome(a >= b, format!("{}; means {a:.1} vs {b:.1}", parts.join("; ")))
}

// 8. Hierarchy benefit on the sparse U-maze.
fn hierarchy_benefit() -> Outcome {
    let t = Instant::now();
    let env = PointMassEnv::u_maze();
    let refs = reference_scores(&env).unwrap();
    let mut perf = open_maze_q_table();
    // Stochastic single-sample actions; best-of-N by Q pins the agent
    // against the cup wall on this map.
    perf.q.act_candidates = 1;
    let conductor = ConductorTable {
        kind: ConductorKind::Diffusion,
        steps: 4000,
        diffusion: DConductorConfig {
            interval: 4,
            horizon: 8,
            augmented: false,
            inpaint_goal: true,
            lr_floor: 0.1,
            ..DConductorConfig::default()
        },
        ..ConductorTable::default()
    };
    let (mut all_ge, mut strict) = (true, 0);
    let mut parts = Vec::new();
    for seed in SEEDS {
        let data = DataConfig {
            behavior: ScriptedPolicy::RandomGoalAvoider { exclusion_radius: 0.0 },
            episodes: 100,
            seed,
        };
        let ds = generate_dataset(&env, &data).unwrap();
        let (p, _) = train_performer(&perf, &ds, seed, None, usize::MAX).unwrap();
        let (c, _) = train_conductor(&conductor, &ds, seed, None, usize::MAX).unwrap();
        let run = |policy| {
            evaluate_seeds(&mut || make_agent(policy, Some(&c), Some(&p), &env, None, None), &env, EVAL_EPISODES, &[100 + seed], refs).unwrap()[0]
                .success_rate
        };
        let (h, f) = (run(Policy::Hierarchical(Variant::PlanDQ)), run(Policy::FlatQ));
        all_ge &= h >= f;
        strict += usize::from(h > f);
        parts.push(format!("seed {seed}: PlanDQ {h:.2} vs flat {f:.2}"));
    }
    let el = t.elapsed();
    outcome(
        all_ge && strict >= 2 && within(el, 2700.0),
        format!("{}; strictly higher in {strict}/3 (>= 2), {:.0}s (< 2700s)", parts.join("; "), el.as_secs_f64()),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    // Under `cargo test -- --list` and friends, do nothing.
    if std::env::args().any(|a| a == "--list") {
        return;
    }

    let mut failed = Vec::new();
    let mut report = |i: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} [{i:>2}] {name}: {} [{:.1}s]", o.detail, t.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(i);
        }
    };

    if wanted(1) {
        report(1, "closed-form argmax and Q-policy grid", &mut example1_exact);
    }
    if wanted(2) {
        report(2, "frequency matching of a trained sampler", &mut frequency_matching);
    }
    if wanted(3) {
        report(3, "gradient suite", &mut gradient_suite);
    }
    if wanted(4) {
        report(4, "DDPM moment recovery", &mut moment_recovery);
    }
    if wanted(5) {
        report(5, "TD fixed point", &mut td_fixed_point);
    }
    if wanted(10) {
        report(10, "determinism and invariants", &mut properties);
    }
    if [6, 7, 9].into_iter().any(wanted) {
        let seeds: Vec<OpenMazeSeed> = SEEDS.iter().map(|&s| open_maze_seed(s)).collect();
        if wanted(6) {
            report(6, "OpenMaze flat Q vs flat diffuser gap", &mut || open_maze_gap(&seeds));
        }
        if wanted(7) {
            report(7, "value-map rank correlation order", &mut || value_map_order(&seeds));
        }
        if wanted(9) {
            report(9, "PlanDQ >= PlanDD on dense OpenMaze", &mut || variant_order(&seeds));
        }
    }
    if wanted(8) {
        report(8, "hierarchy benefit on sparse U-maze", &mut hierarchy_benefit);
    }

    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
