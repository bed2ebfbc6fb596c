//! Network-aware multi-agent path finding: grid environment, cellular radio
//! model, asymmetric observations, prioritized replay, and an asynchronous
//! actor-learner DDQN training engine.

pub mod bench;
pub mod gridworld;
pub mod io;
pub mod learner;
pub mod neural;
pub mod observe;
pub mod orchestrator;
pub mod pathfind;
pub mod radio;
pub mod replay;
pub mod reward;
