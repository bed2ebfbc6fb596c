// Throwaway debugging aid: synchronous DQN on a fixed 6x6 single-agent task.
// If this cannot learn, the learning stack is broken somewhere.

use std::sync::Arc;

use anyhow::Result;
use netmapf::gridworld::{
    Action, AgentState, Cell, EpisodeState, GridMap, JointAction, Sim,
};
use netmapf::learner::{greedy_action, learn_step, select_action, LearnerConfig};
use netmapf::neural::{
    encode_batch, forward_q, init_network, AdamWConfig, NetConfig, OptimizerState,
};
use netmapf::observe::{ObsConfig, Observation};
use netmapf::radio::RadioMap;
use netmapf::replay::{PerBuffer, ReplayConfig, Transition};
use netmapf::reward::RewardConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let width: usize = args.get(1).map_or(6, |s| s.parse().unwrap());
    let density: f64 = args.get(2).map_or(0.0, |s| s.parse().unwrap());
    let randomize = args.get(3).is_some();
    let max_steps: u32 = 4 * width as u32;
    let lr: f64 = args.get(4).map_or(3e-4, |s| s.parse().unwrap());
    let fov_r: usize = args.get(5).map_or(5, |s| s.parse().unwrap());
    let n_agents: usize = args.get(6).map_or(1, |s| s.parse().unwrap());
    let path_conflict: f64 = args.get(7).map_or(-1.0, |s| s.parse().unwrap());
    let big = args.get(8).map(String::as_str) == Some("big");
    let wd: f64 = args.get(9).map_or(1e-2, |s| s.parse().unwrap());
    let ws: f64 = args.get(10).map_or(10.0, |s| s.parse().unwrap());
    let reward_cfg = RewardConfig { path_conflict, ..Default::default() };
    let obs_cfg = ObsConfig { fov_r, ..Default::default() };
    let net_cfg = NetConfig {
        conv_filters: if big { vec![32, 32] } else { vec![16, 16] },
        vector_hidden: if big { 64 } else { 32 },
        merge_hidden: if big { 128 } else { 64 },
        input_channels: 4,
        fov_side: 2 * fov_r + 1,
        vector_len: 13,
        n_actions: 5,
        goal_scale: 8.49,
        waypoint_scale: ws,
        ..Default::default()
    };
    let lcfg = LearnerConfig {
        discount: 0.99,
        eps_horizon: 20_000,
        eps_final: 0.05,
        batch_size: 32,
        learning_starts: 500,
        ..Default::default()
    };
    let mut online = init_network::<f32>(&net_cfg, 1);
    let mut target = online.clone();
    let mut opt = OptimizerState::new(
        &online,
        AdamWConfig { lr, weight_decay: wd, ..Default::default() },
    );
    let mut buffer = PerBuffer::new(ReplayConfig { capacity: 20_000, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let new_sim_in = |seed: u64, width: usize, n_agents: usize, max_steps: u32| {
        let (map, state) = if randomize {
            let map = Arc::new(
                netmapf::gridworld::generate_map(
                    netmapf::gridworld::MapKind::Random,
                    width,
                    width,
                    seed,
                    density,
                )
                .expect("map"),
            );
            let state =
                netmapf::gridworld::reset_episode(map.clone(), n_agents, seed, 0.0, max_steps)
                    .expect("reset");
            (map, state)
        } else {
            let map = Arc::new(GridMap::new(width, width, vec![0; width * width], 1.0).unwrap());
            let state = EpisodeState {
                map: map.clone(),
                agents: vec![AgentState {
                    id: 0,
                    pos: (1, 1),
                    start: (1, 1),
                    goal: (width as i32 - 2, width as i32 - 2),
                    at_goal: false,
                }],
                timestep: 0,
                max_steps,
                rng_seed: 0,
                terminal: false,
                success: false,
            };
            (map, state)
        };
        let radio = Arc::new(RadioMap::uniform(&map, 25.0));
        Sim::new(
            state,
            radio,
            Default::default(),
            obs_cfg.clone(),
            reward_cfg.clone(),
        )
        .expect("sim")
    };
    let new_sim = |seed: u64| new_sim_in(seed, width, n_agents, max_steps);

    let mut env_steps = 0u64;
    let mut learn_steps = 0u64;
    for episode in 0..20_000u64 {
        let mut sim = new_sim(episode);
        let mut obs = sim.observations();
        while !sim.state.terminal {
            let eps = (1.0 - env_steps as f64 / lcfg.eps_horizon as f64).max(lcfg.eps_final);
            let refs: Vec<&Observation> = obs.iter().collect();
            let (s, v) = encode_batch::<f32>(&refs, &net_cfg)?;
            let q = forward_q(&online, &s, &v)?;
            let acts: Vec<usize> = (0..obs.len())
                .map(|i| select_action(q.row(i).as_slice().unwrap(), eps, &mut rng))
                .collect();
            let joint = JointAction {
                actions: acts.iter().map(|&a| Action::from_index(a)).collect(),
            };
            let (out, next_obs, rewards) = sim.step(&joint)?;
            for i in 0..obs.len() {
                buffer.push(Transition {
                    obs: obs[i].clone(),
                    action: acts[i] as u8,
                    reward: rewards[i] as f32,
                    next_obs: next_obs[i].clone(),
                    done: out.terminal,
                });
            }
            obs = next_obs;
            env_steps += 1;
            if buffer.len() >= lcfg.learning_starts && env_steps % 4 == 0 {
                learn_step(&mut online, &mut target, &mut opt, &mut buffer, &lcfg, learn_steps, &mut rng)?;
                learn_steps += 1;
            }
        }
        if episode % 500 == 0 {
            let mut wins = 0usize;
            let mut steps_sum = 0u32;
            let n_probe = 30u64;
            for k in 0..n_probe {
                let mut sim = new_sim(1_000_000 + k);
                let mut gobs = sim.observations();
                while !sim.state.terminal {
                    let refs: Vec<&Observation> = gobs.iter().collect();
                    let (s, v) = encode_batch::<f32>(&refs, &net_cfg)?;
                    let q = forward_q(&online, &s, &v)?;
                    let joint = JointAction {
                        actions: (0..gobs.len())
                            .map(|i| Action::from_index(greedy_action(q.row(i).as_slice().unwrap())))
                            .collect(),
                    };
                    let (_, next_obs, _) = sim.step(&joint)?;
                    gobs = next_obs;
                }
                wins += usize::from(sim.state.success);
                steps_sum += sim.state.timestep;
            }
            println!(
                "ep {episode:5} env {env_steps:7} learn {learn_steps:6} greedy success {:.2} mean steps {:.1}",
                wins as f64 / n_probe as f64,
                steps_sum as f64 / n_probe as f64
            );
        }
        if env_steps > 120_000 {
            break;
        }
    }

    // dump a few failed greedy episodes at the training scale
    let mut dumped = 0;
    for k in 0..200u64 {
        if dumped >= 4 {
            break;
        }
        let mut sim = new_sim_in(3_000_000 + k, width, n_agents, max_steps);
        let mut gobs = sim.observations();
        let mut track: Vec<(Vec<usize>, Vec<Cell>)> = Vec::new();
        while !sim.state.terminal {
            let refs: Vec<&Observation> = gobs.iter().collect();
            let (s, v) = encode_batch::<f32>(&refs, &net_cfg)?;
            let q = forward_q(&online, &s, &v)?;
            let acts: Vec<usize> = (0..gobs.len())
                .map(|i| greedy_action(q.row(i).as_slice().unwrap()))
                .collect();
            let joint = JointAction {
                actions: acts.iter().map(|&a| Action::from_index(a)).collect(),
            };
            let (_, next_obs, _) = sim.step(&joint)?;
            track.push((acts, sim.state.agents.iter().map(|a| a.pos).collect()));
            gobs = next_obs;
        }
        if !sim.state.success {
            dumped += 1;
            println!("--- failed episode {k}");
            for (i, a) in sim.state.agents.iter().enumerate() {
                println!("agent {i}: start {:?} goal {:?}", a.start, a.goal);
            }
            for (t, (acts, pos)) in track.iter().enumerate().take(30) {
                println!("t={t:2} acts={acts:?} pos={pos:?}");
            }
        }
    }

    // zero-shot transfer probes on other scales / agent counts;
    // `mask` additionally zeroes the agent/comm-path channels at eval
    for &(w, n, mask) in &[
        (8usize, 1usize, false),
        (8, 2, false),
        (8, 2, true),
        (16, 1, false),
        (16, 2, false),
        (16, 2, true),
    ] {
        let mut wins = 0usize;
        let n_probe = 100u64;
        for k in 0..n_probe {
            let mut sim = new_sim_in(2_000_000 + k, w, n, 4 * w as u32);
            let mut gobs = sim.observations();
            while !sim.state.terminal {
                if mask {
                    for o in gobs.iter_mut() {
                        let m = o.fov_side * o.fov_side;
                        o.spatial[m..3 * m].fill(0.0);
                    }
                }
                let refs: Vec<&Observation> = gobs.iter().collect();
                let (s, v) = encode_batch::<f32>(&refs, &net_cfg)?;
                let q = forward_q(&online, &s, &v)?;
                let joint = JointAction {
                    actions: (0..gobs.len())
                        .map(|i| Action::from_index(greedy_action(q.row(i).as_slice().unwrap())))
                        .collect(),
                };
                let (_, next_obs, _) = sim.step(&joint)?;
                gobs = next_obs;
            }
            wins += usize::from(sim.state.success);
        }
        println!(
            "transfer {w}x{w} n={n} mask={mask}: success {:.2}",
            wins as f64 / n_probe as f64
        );
    }
    Ok(())
}
