//! WebAssembly bindings for the demo page in `www/`.
//!
//! Each export returns a JSON string; the `*_json` functions hold the logic
//! so it can be tested natively.

use hiplan::analysis::{
    example1_diffuser_argmax, example1_diffuser_policy, example1_flip_threshold, example1_q_policy, oracle_value_grid,
    Example1Instance, LinearGuide,
};
use hiplan::diffusion::{sample, DiffusionSchedule, Guidance, PointMixtureOracle, SamplerOptions, ScheduleKind};
use hiplan::env::{scripted_collect, PointMassEnv, ScriptedPolicy, ToyAction, ToyMdp};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn action_name(a: ToyAction) -> &'static str {
    match a {
        ToyAction::B1 => "b1",
        ToyAction::B2 => "b2",
    }
}

/// Diffuser and Q-learning choices on the two-action toy MDP.
pub fn example1_json(n1: u32, n2: u32, g1: f64, g2: f64) -> Result<Value, String> {
    let inst = Example1Instance::new(n1.into(), n2.into(), g1, g2).map_err(|e| e.to_string())?;
    let (p1, p2) = example1_diffuser_policy(&inst);
    let q = match example1_q_policy(&inst, &ToyMdp::default()) {
        Ok(a) => action_name(a).to_string(),
        Err(e) => format!("undefined ({e})"),
    };
    Ok(json!({
        "p_b1": p1,
        "p_b2": p2,
        "diffuser": action_name(example1_diffuser_argmax(&inst)),
        "q": q,
        "flip_ratio": example1_flip_threshold(g1, g2),
    }))
}

/// Histogram of guided samples from the exact denoiser of the toy data
/// (`n1` copies of b1, `n2` of b2) under a linear guide favouring b2.
#[allow(clippy::too_many_arguments)]
pub fn guided_samples_json(n1: u32, n2: u32, slope: f64, omega: f64, steps: usize, samples: usize, bins: usize, seed: u64) -> Result<Value, String> {
    if n1 + n2 == 0 || samples == 0 || bins == 0 {
        return Err("need observations, samples and bins".into());
    }
    let schedule = DiffusionSchedule::new(steps, ScheduleKind::Cosine).map_err(|e| e.to_string())?;
    let oracle = PointMixtureOracle {
        points: vec![vec![ToyAction::B1.encode()], vec![ToyAction::B2.encode()]],
        weights: vec![n1.into(), n2.into()],
        schedule: schedule.clone(),
    };
    let guide = LinearGuide { slope };
    let guidance = (omega != 0.0).then_some(Guidance { guide: &guide, omega });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cond = Array2::zeros((samples, 0));
    let x = sample(&oracle, samples, cond.view(), &schedule, guidance, None, SamplerOptions::default(), &mut rng).map_err(|e| e.to_string())?;
    let mut counts = vec![0usize; bins];
    for &v in x.iter() {
        let b = (((v + 1.0) / 2.0) * bins as f64).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let b1 = x.iter().filter(|&&v| ToyAction::decode(v) == ToyAction::B1).count();
    Ok(json!({
        "counts": counts,
        "range": [-1.0, 1.0],
        "frac_b1": b1 as f64 / samples as f64,
        "data_frac_b1": f64::from(n1) / f64::from(n1 + n2),
    }))
}

/// Maze geometry, the straight-line controller's value grid and one
/// scripted rollout.
pub fn maze_scene_json(maze: &str, resolution: usize, gamma: f64, behavior: &str, seed: u64) -> Result<Value, String> {
    let env = match maze {
        "open_maze" => PointMassEnv::open_maze(),
        "u_maze" => PointMassEnv::u_maze(),
        other => return Err(format!("unknown maze {other:?}")),
    };
    let policy = match behavior {
        "expert" => ScriptedPolicy::WaypointExpert,
        "avoider" => ScriptedPolicy::RandomGoalAvoider { exclusion_radius: 2.0 },
        "random" => ScriptedPolicy::UniformRandom,
        other => return Err(format!("unknown behavior {other:?}")),
    };
    let grid = oracle_value_grid(&env, resolution, gamma).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<f64>> = grid.values.outer_iter().map(|r| r.to_vec()).collect();
    let col = scripted_collect(&env, policy, 1, seed).map_err(|e| e.to_string())?;
    let traj = &col.trajectories[0];
    let path: Vec<[f64; 2]> = (0..traj.len()).map(|t| PointMassEnv::position(&traj.state(t))).collect();
    let succeeded = path.last().is_some_and(|&p| hiplan::env::distance(p, env.goal) <= env.goal_radius);
    Ok(json!({
        "bounds": { "min": env.bounds.min, "max": env.bounds.max },
        "walls": env.walls.iter().map(|w| [w.a, w.b]).collect::<Vec<_>>(),
        "goal": env.goal,
        "goal_radius": env.goal_radius,
        "values": rows,
        "path": path,
        "succeeded": succeeded,
    }))
}

fn export(v: Result<Value, String>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn example1(n1: u32, n2: u32, g1: f64, g2: f64) -> Result<String, JsError> {
    export(example1_json(n1, n2, g1, g2))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn guided_samples(n1: u32, n2: u32, slope: f64, omega: f64, steps: usize, samples: usize, bins: usize, seed: u64) -> Result<String, JsError> {
    export(guided_samples_json(n1, n2, slope, omega, steps, samples, bins, seed))
}

#[wasm_bindgen]
pub fn maze_scene(maze: &str, resolution: usize, gamma: f64, behavior: &str, seed: u64) -> Result<String, JsError> {
    export(maze_scene_json(maze, resolution, gamma, behavior, seed))
}
