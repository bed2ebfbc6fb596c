// Throwaway debugging aid: replay greedy episodes from a checkpoint and dump
// per-step agent positions.

use std::sync::Arc;

use anyhow::Result;
use netmapf::gridworld::{generate_map, reset_episode, Action, JointAction, Sim};
use netmapf::io::load_config;
use netmapf::learner::greedy_action;
use netmapf::neural::{encode_batch, forward_q, load_checkpoint};
use netmapf::observe::Observation;
use netmapf::radio::RadioMap;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = load_checkpoint(std::path::Path::new(&args[1]))?;
    let cfg = load_config(std::path::Path::new(&args[2]))?;
    let stage_idx: usize = args.get(3).map_or(0, |s| s.parse().unwrap());
    let stage = &cfg.train.stages[stage_idx];
    let summary: usize = args.get(4).map_or(0, |s| s.parse().unwrap());
    let params = ckpt.params;

    // summary mode: aggregate reach/hold stats over many greedy episodes
    if summary > 0 {
        let mut wins = 0usize;
        let mut all_reached = 0usize;
        let mut reach_events = 0usize;
        let mut hold_losses = 0usize; // reached a goal, later seen off it
        let mut agent_eps = 0usize;
        for e in 0..summary as u64 {
            let seed = 777u64.wrapping_add(1 + e).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let map = Arc::new(generate_map(
                stage.map, stage.width, stage.height, seed, cfg.env.density,
            )?);
            let radio = Arc::new(RadioMap::uniform(&map, cfg.train.uniform_sinr_db));
            let state = reset_episode(
                map.clone(), stage.n_agents, seed, cfg.env.swap_fraction, stage.max_steps,
            )?;
            let mut sim = Sim::new(
                state, radio, cfg.env.clone(), cfg.obs.clone(), cfg.reward.clone(),
            )?;
            let n = sim.state.n_agents();
            let mut reached = vec![false; n];
            let mut lost = vec![false; n];
            let mut obs = sim.observations();
            while !sim.state.terminal {
                let refs: Vec<&Observation> = obs.iter().collect();
                let (s, v) = encode_batch::<f32>(&refs, &params.cfg)?;
                let q = forward_q(&params, &s, &v)?;
                let joint = JointAction {
                    actions: (0..n)
                        .map(|i| Action::from_index(greedy_action(q.row(i).as_slice().unwrap())))
                        .collect(),
                };
                let (_, next_obs, _) = sim.step(&joint)?;
                for (i, a) in sim.state.agents.iter().enumerate() {
                    if a.at_goal {
                        reached[i] = true;
                    } else if reached[i] {
                        lost[i] = true;
                    }
                }
                obs = next_obs;
            }
            wins += usize::from(sim.state.success);
            all_reached += usize::from(reached.iter().all(|&r| r));
            reach_events += reached.iter().filter(|&&r| r).count();
            hold_losses += lost.iter().filter(|&&l| l).count();
            agent_eps += n;
        }
        println!(
            "episodes {summary}: success {:.2}, all-ever-reached {:.2}, per-agent reach {:.2}, hold-loss {:.2}",
            wins as f64 / summary as f64,
            all_reached as f64 / summary as f64,
            reach_events as f64 / agent_eps as f64,
            hold_losses as f64 / reach_events.max(1) as f64,
        );
        return Ok(());
    }

    for e in 0..5u64 {
        let seed = 12345u64.wrapping_add(1 + e).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let map = Arc::new(generate_map(
            stage.map,
            stage.width,
            stage.height,
            seed,
            cfg.env.density,
        )?);
        let radio = Arc::new(RadioMap::uniform(&map, cfg.train.uniform_sinr_db));
        let state = reset_episode(
            map.clone(),
            stage.n_agents,
            seed,
            cfg.env.swap_fraction,
            stage.max_steps,
        )?;
        println!("=== episode {e} ===");
        for (i, a) in state.agents.iter().enumerate() {
            println!("agent {i}: start {:?} goal {:?}", a.pos, a.goal);
        }
        let mut sim = Sim::new(
            state,
            radio,
            cfg.env.clone(),
            cfg.obs.clone(),
            cfg.reward.clone(),
        )?;
        let mut obs = sim.observations();
        while !sim.state.terminal {
            let refs: Vec<&Observation> = obs.iter().collect();
            let (s, v) = encode_batch::<f32>(&refs, &params.cfg)?;
            let q = forward_q(&params, &s, &v)?;
            let actions: Vec<Action> = (0..sim.state.n_agents())
                .map(|i| Action::from_index(greedy_action(q.row(i).as_slice().unwrap())))
                .collect();
            if sim.state.timestep < 15 {
                for i in 0..sim.state.n_agents() {
                    let qs: Vec<f32> = q.row(i).iter().map(|x| (x * 1000.0).round() / 1000.0).collect();
                    println!("  q[{i}] UDLRS={qs:?} vec={:?}", obs[i].vector);
                }
            }
            let names: Vec<&str> = actions
                .iter()
                .map(|a| match a {
                    Action::Up => "U",
                    Action::Down => "D",
                    Action::Left => "L",
                    Action::Right => "R",
                    Action::Stay => "S",
                })
                .collect();
            let joint = JointAction { actions };
            let (out, next_obs, rewards) = sim.step(&joint)?;
            let pos: Vec<_> = sim.state.agents.iter().map(|a| (a.pos, a.at_goal)).collect();
            println!(
                "t={:3} act={:?} pos={:?} r={:?} coll={:?} term={}",
                sim.state.timestep, names, pos, rewards, out.collided, out.terminal
            );
            obs = next_obs;
            if sim.state.timestep > 60 && !sim.state.terminal {
                println!("(truncated)");
                break;
            }
        }
        println!("success={} steps={}", sim.state.success, sim.state.timestep);
    }
    Ok(())
}
