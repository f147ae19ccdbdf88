use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{analyze, ActionId, AgentId, FaultVerdict, Rollout, Scenario, StateId, TablePolicy};

const AGENT_POOL: &[&str] = &[
    "Orchestrator",
    "WebSurfer",
    "Planning_Expert",
    "Verification_Expert",
    "Coder",
    "FileSurfer",
];

const VERBS: &[&str] = &[
    "search", "lookup", "summarize", "compute", "verify", "plan", "click", "read", "answer",
    "retry", "cite", "guess",
];

/// Size caps for random scenarios; the defaults keep exhaustive search cheap.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorParams {
    pub min_agents: usize,
    pub max_agents: usize,
    pub min_states: usize,
    pub max_states: usize,
    pub max_actions_per_agent: usize,
    pub min_horizon: usize,
    pub max_horizon: usize,
    pub flaw_probability: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            min_agents: 2,
            max_agents: 4,
            min_states: 4,
            max_states: 64,
            max_actions_per_agent: 8,
            min_horizon: 3,
            max_horizon: 12,
            flaw_probability: 0.35,
        }
    }
}

pub fn generate_scenario<R: Rng>(rng: &mut R, params: &GeneratorParams, name: &str) -> Scenario {
    let n_agents = rng.random_range(params.min_agents..=params.max_agents);
    let n_states = rng.random_range(params.min_states..=params.max_states);
    let horizon = rng.random_range(params.min_horizon..=params.max_horizon);

    let mut pool: Vec<&str> = AGENT_POOL.to_vec();
    pool.shuffle(rng);
    let agents: Vec<String> = pool[..n_agents].iter().map(|s| s.to_string()).collect();
    let states: Vec<String> = (0..n_states).map(|i| format!("s{i}")).collect();

    let mut actions = Vec::new();
    let mut agent_actions = Vec::with_capacity(n_agents);
    for agent in &agents {
        let k = rng.random_range(2..=params.max_actions_per_agent);
        let mut verbs: Vec<&str> = VERBS.to_vec();
        verbs.shuffle(rng);
        let mut set = BTreeSet::new();
        for verb in &verbs[..k] {
            set.insert(ActionId(actions.len()));
            actions.push(format!("{}.{verb}", agent.to_lowercase()));
        }
        agent_actions.push(set);
    }

    let schedule: Vec<AgentId> = (0..horizon)
        .map(|_| AgentId(rng.random_range(0..n_agents)))
        .collect();
    let transition: Vec<Vec<StateId>> = (0..n_states)
        .map(|_| {
            (0..actions.len())
                .map(|_| StateId(rng.random_range(0..n_states)))
                .collect()
        })
        .collect();
    let initial = StateId(0);
    let n_success = (n_states / 8).max(1);
    let mut candidates: Vec<usize> = (1..n_states).collect();
    candidates.shuffle(rng);
    let success = candidates[..n_success].iter().map(|&s| StateId(s)).collect();

    let table = agent_actions
        .iter()
        .map(|set| {
            let allowed: Vec<ActionId> = set.iter().copied().collect();
            (0..n_states)
                .map(|_| allowed[rng.random_range(0..allowed.len())])
                .collect()
        })
        .collect();
    let flawed_actions = (0..actions.len())
        .filter(|_| rng.random_bool(params.flaw_probability))
        .map(ActionId)
        .collect();

    let scenario = Scenario {
        name: name.to_string(),
        description: format!(
            "Randomly generated {n_agents}-agent system over {n_states} states, horizon {horizon}."
        ),
        agents,
        states,
        actions,
        agent_actions,
        schedule,
        transition,
        initial,
        success,
        policy: TablePolicy::new(table),
        flawed_actions,
        epsilon: 0.5,
    };
    debug_assert!(scenario.validate().is_ok());
    scenario
}

/// Draws scenarios from a seeded stream until one fails with a decisive fault.
pub fn generate_faulty_scenario(
    seed: u64,
    params: &GeneratorParams,
    name: &str,
) -> (Scenario, Rollout, FaultVerdict) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let scenario = generate_scenario(&mut rng, params, name);
        let run = scenario.roll();
        let verdict = analyze(&scenario, &run, &scenario.declared_judge());
        if verdict.decisive.is_some() {
            return (scenario, run, verdict);
        }
    }
}
