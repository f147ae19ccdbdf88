//! Deterministic finite multi-agent systems with an exhaustive intervention
//! oracle.
//!
//! A [`Scenario`] is a turn-based system: a schedule picks the single active
//! agent at each step, the agent's policy picks an action from its own action
//! subset, and a total transition table moves the state. The outcome of a run
//! is whether the terminal state lies in the success set.
//!
//! The oracle classifies every step fault (a step whose action the local judge
//! scores above epsilon) as causal, when some replacement action taken by the
//! same agent at that step leads the regenerated run to success, or trivial
//! otherwise. The decisive fault is the earliest causal one.

mod export;
mod file;
mod generate;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use export::export_as_trajectory;
pub use file::{load_scenario, parse_scenario, scenario_to_toml, ScenarioFile};
pub use generate::{generate_faulty_scenario, generate_scenario, GeneratorParams};

#[derive(Debug, Error, PartialEq)]
pub enum FaultLabError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("step {step}: agent {agent} may not take action {action}")]
    IllegalAction {
        step: usize,
        agent: String,
        action: String,
    },
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
    #[error("step {0} is not a step-level fault")]
    NotAStepFault(usize),
    #[error("trajectory has no decisive fault")]
    NoDecisiveFault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActionId(pub usize);

/// Picks the action an agent takes in a state.
pub trait Policy {
    fn act(&self, agent: AgentId, state: StateId) -> ActionId;
}

/// Total `[agent][state] -> action` table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TablePolicy {
    table: Vec<Vec<ActionId>>,
}

impl TablePolicy {
    pub fn new(table: Vec<Vec<ActionId>>) -> Self {
        TablePolicy { table }
    }

    pub fn table(&self) -> &[Vec<ActionId>] {
        &self.table
    }
}

impl Policy for TablePolicy {
    fn act(&self, agent: AgentId, state: StateId) -> ActionId {
        self.table[agent.0][state.0]
    }
}

impl<F: Fn(AgentId, StateId) -> ActionId> Policy for F {
    fn act(&self, agent: AgentId, state: StateId) -> ActionId {
        self(agent, state)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub agents: Vec<String>,
    pub states: Vec<String>,
    pub actions: Vec<String>,
    /// Allowed actions per agent.
    pub agent_actions: Vec<BTreeSet<ActionId>>,
    /// Active agent per step; its length is the horizon.
    pub schedule: Vec<AgentId>,
    /// `[state][action] -> next state`.
    pub transition: Vec<Vec<StateId>>,
    pub initial: StateId,
    pub success: BTreeSet<StateId>,
    pub policy: TablePolicy,
    pub flawed_actions: BTreeSet<ActionId>,
    pub epsilon: f64,
}

impl Scenario {
    /// Checks the structural invariants; every constructor funnels through here.
    pub fn validate(&self) -> Result<(), FaultLabError> {
        let bad = |m: String| Err(FaultLabError::InvalidScenario(m));
        let (n_agents, n_states, n_actions) =
            (self.agents.len(), self.states.len(), self.actions.len());
        if n_agents == 0 || n_states == 0 || n_actions == 0 {
            return bad("agents, states and actions must be non-empty".into());
        }
        if self.schedule.is_empty() {
            return bad("horizon must be at least 1".into());
        }
        if self.agent_actions.len() != n_agents {
            return bad("one action subset per agent required".into());
        }
        for (i, set) in self.agent_actions.iter().enumerate() {
            if set.is_empty() {
                return bad(format!("agent {} has no actions", self.agents[i]));
            }
            if set.iter().any(|a| a.0 >= n_actions) {
                return bad(format!("agent {} lists an unknown action", self.agents[i]));
            }
        }
        if self.schedule.iter().any(|a| a.0 >= n_agents) {
            return bad("schedule names an unknown agent".into());
        }
        if self.transition.len() != n_states
            || self.transition.iter().any(|row| row.len() != n_actions)
        {
            return bad("transition table must cover states x actions".into());
        }
        if self.transition.iter().flatten().any(|s| s.0 >= n_states) {
            return bad("transition targets an unknown state".into());
        }
        if self.initial.0 >= n_states || self.success.iter().any(|s| s.0 >= n_states) {
            return bad("unknown initial or success state".into());
        }
        let table = self.policy.table();
        if table.len() != n_agents || table.iter().any(|row| row.len() != n_states) {
            return bad("policy must cover agents x states".into());
        }
        for (agent, row) in table.iter().enumerate() {
            for (state, action) in row.iter().enumerate() {
                if !self.agent_actions[agent].contains(action) {
                    return bad(format!(
                        "policy of {} in state {} picks disallowed action",
                        self.agents[agent], self.states[state]
                    ));
                }
            }
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.schedule.len()
    }

    pub fn active_agent(&self, t: usize) -> AgentId {
        self.schedule[t]
    }

    pub fn step(&self, state: StateId, action: ActionId) -> StateId {
        self.transition[state.0][action.0]
    }

    pub fn state_id(&self, name: &str) -> Option<StateId> {
        self.states.iter().position(|s| s == name).map(StateId)
    }

    pub fn action_id(&self, name: &str) -> Option<ActionId> {
        self.actions.iter().position(|s| s == name).map(ActionId)
    }

    pub fn agent_id(&self, name: &str) -> Option<AgentId> {
        self.agents.iter().position(|s| s == name).map(AgentId)
    }

    /// The judge fixtures use: score 1 for declared flawed actions, 0 otherwise.
    pub fn declared_judge(&self) -> DeclaredFlawJudge {
        DeclaredFlawJudge {
            flawed: self.flawed_actions.clone(),
            epsilon: self.epsilon,
        }
    }

    /// Rolls the scenario forward under its own policy.
    pub fn roll(&self) -> Rollout {
        roll_forward(self, &self.policy).expect("validated scenario policy is legal")
    }
}

/// A concrete run: `states[t]` is the state before action `actions[t]`;
/// `states` has one more entry than `actions`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rollout {
    pub states: Vec<StateId>,
    pub actions: Vec<ActionId>,
}

impl Rollout {
    pub fn terminal(&self) -> StateId {
        *self.states.last().expect("rollouts hold at least the initial state")
    }
}

/// Local per-step judge: a fault exists at `t` when `score > epsilon`.
pub trait LocalJudge {
    fn score(&self, state: StateId, action: ActionId) -> f64;
    fn epsilon(&self) -> f64;

    fn is_step_fault(&self, state: StateId, action: ActionId) -> bool {
        self.score(state, action) > self.epsilon()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeclaredFlawJudge {
    pub flawed: BTreeSet<ActionId>,
    pub epsilon: f64,
}

impl LocalJudge for DeclaredFlawJudge {
    fn score(&self, _state: StateId, action: ActionId) -> f64 {
        if self.flawed.contains(&action) {
            1.0
        } else {
            0.0
        }
    }

    fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// Judge backed by an explicit score table; unlisted pairs score 0.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TableJudge {
    pub scores: BTreeMap<(StateId, ActionId), f64>,
    pub epsilon: f64,
}

impl LocalJudge for TableJudge {
    fn score(&self, state: StateId, action: ActionId) -> f64 {
        self.scores.get(&(state, action)).copied().unwrap_or(0.0)
    }

    fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

fn continue_from(
    scenario: &Scenario,
    policy: &dyn Policy,
    mut run: Rollout,
    from: usize,
) -> Result<Rollout, FaultLabError> {
    let mut state = run.terminal();
    for t in from..scenario.horizon() {
        let agent = scenario.active_agent(t);
        let action = policy.act(agent, state);
        if !scenario.agent_actions[agent.0].contains(&action) {
            return Err(FaultLabError::IllegalAction {
                step: t,
                agent: scenario.agents[agent.0].clone(),
                action: scenario
                    .actions
                    .get(action.0)
                    .cloned()
                    .unwrap_or_else(|| format!("#{}", action.0)),
            });
        }
        state = scenario.step(state, action);
        run.actions.push(action);
        run.states.push(state);
    }
    Ok(run)
}

/// Produces exactly `horizon` actions starting from the initial state.
pub fn roll_forward(scenario: &Scenario, policy: &dyn Policy) -> Result<Rollout, FaultLabError> {
    let start = Rollout {
        states: vec![scenario.initial],
        actions: Vec::new(),
    };
    continue_from(scenario, policy, start, 0)
}

/// `1` when the terminal state is a success state, else `0`.
pub fn outcome(scenario: &Scenario, run: &Rollout) -> u8 {
    u8::from(scenario.success.contains(&run.terminal()))
}

/// The counterfactual run after replacing the action at `t`; later actions are
/// regenerated by the scenario policy from the intervened state.
pub fn intervene(
    scenario: &Scenario,
    run: &Rollout,
    t: usize,
    replacement: ActionId,
) -> Result<Rollout, FaultLabError> {
    if t >= run.actions.len() {
        return Err(FaultLabError::PreconditionViolation(format!(
            "step {t} outside horizon {}",
            run.actions.len()
        )));
    }
    let agent = scenario.active_agent(t);
    if !scenario.agent_actions[agent.0].contains(&replacement) {
        return Err(FaultLabError::IllegalAction {
            step: t,
            agent: scenario.agents[agent.0].clone(),
            action: scenario.actions[replacement.0].clone(),
        });
    }
    let mut prefix = Rollout {
        states: run.states[..=t].to_vec(),
        actions: run.actions[..t].to_vec(),
    };
    let next = scenario.step(run.states[t], replacement);
    prefix.actions.push(replacement);
    prefix.states.push(next);
    continue_from(scenario, &scenario.policy, prefix, t + 1)
}

fn require_failed(scenario: &Scenario, run: &Rollout, t: usize) -> Result<(), FaultLabError> {
    if outcome(scenario, run) == 1 {
        return Err(FaultLabError::PreconditionViolation(
            "trajectory already succeeds".into(),
        ));
    }
    if t >= run.actions.len() {
        return Err(FaultLabError::PreconditionViolation(format!(
            "step {t} outside horizon {}",
            run.actions.len()
        )));
    }
    Ok(())
}

/// First replacement (in action-id order) from the active agent's subset that
/// cures the run, if any.
pub fn causal_witness(
    scenario: &Scenario,
    run: &Rollout,
    t: usize,
) -> Result<Option<ActionId>, FaultLabError> {
    require_failed(scenario, run, t)?;
    let agent = scenario.active_agent(t);
    for &candidate in &scenario.agent_actions[agent.0] {
        let cf = intervene(scenario, run, t, candidate)?;
        if outcome(scenario, &cf) == 1 {
            return Ok(Some(candidate));
        }
    }
    Ok(None)
}

pub fn is_causal_fault(scenario: &Scenario, run: &Rollout, t: usize) -> Result<bool, FaultLabError> {
    Ok(causal_witness(scenario, run, t)?.is_some())
}

pub fn is_trivial_fault(
    scenario: &Scenario,
    run: &Rollout,
    t: usize,
    judge: &dyn LocalJudge,
) -> Result<bool, FaultLabError> {
    require_failed(scenario, run, t)?;
    if !judge.is_step_fault(run.states[t], run.actions[t]) {
        return Err(FaultLabError::NotAStepFault(t));
    }
    Ok(!is_causal_fault(scenario, run, t)?)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FaultVerdict {
    pub step_faults: BTreeSet<usize>,
    pub causal_steps: BTreeSet<usize>,
    pub trivial_steps: BTreeSet<usize>,
    /// A curing replacement for every causal step.
    pub witnesses: BTreeMap<usize, ActionId>,
    pub decisive: Option<(AgentId, usize)>,
}

/// Classifies every step of a run. Successful runs yield an empty verdict.
pub fn analyze(scenario: &Scenario, run: &Rollout, judge: &dyn LocalJudge) -> FaultVerdict {
    let mut verdict = FaultVerdict::default();
    if outcome(scenario, run) == 1 {
        return verdict;
    }
    for t in 0..run.actions.len() {
        if !judge.is_step_fault(run.states[t], run.actions[t]) {
            continue;
        }
        verdict.step_faults.insert(t);
        match causal_witness(scenario, run, t).expect("run failed and t in range") {
            Some(w) => {
                verdict.causal_steps.insert(t);
                verdict.witnesses.insert(t, w);
            }
            None => {
                verdict.trivial_steps.insert(t);
            }
        }
    }
    verdict.decisive = verdict
        .causal_steps
        .first()
        .map(|&t| (scenario.active_agent(t), t));
    verdict
}

/// Earliest step that is both a step fault and curable; absent for runs that
/// succeed or have no such step.
pub fn decisive_fault(
    scenario: &Scenario,
    run: &Rollout,
    judge: &dyn LocalJudge,
) -> Option<(AgentId, usize)> {
    if outcome(scenario, run) == 1 {
        return None;
    }
    (0..run.actions.len())
        .filter(|&t| judge.is_step_fault(run.states[t], run.actions[t]))
        .find(|&t| is_causal_fault(scenario, run, t).unwrap_or(false))
        .map(|t| (scenario.active_agent(t), t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(name: &str) -> Scenario {
        let path = format!("{}/fixtures/faultlab/{name}.toml", env!("CARGO_MANIFEST_DIR"));
        load_scenario(std::path::Path::new(&path)).unwrap()
    }

    #[test]
    fn identity_transition_keeps_initial_state() {
        let s = parse_scenario(
            r#"
            name = "identity"
            agents = ["a", "b"]
            states = ["s0", "s1"]
            initial = "s0"
            success = ["s1"]
            horizon = 5
            [actions]
            a = ["noop"]
            b = ["noop"]
            [policy.a]
            default = "noop"
            [policy.b]
            default = "noop"
            "#,
        )
        .unwrap();
        let run = s.roll();
        assert_eq!(run.actions.len(), 5);
        assert!(run.states.iter().all(|&st| st == s.initial));
        assert_eq!(outcome(&s, &run), 0);
    }

    #[test]
    fn round_robin_schedule() {
        let s = parse_scenario(
            r#"
            name = "rr"
            agents = ["a", "b", "c"]
            states = ["s0"]
            initial = "s0"
            success = []
            horizon = 6
            [actions]
            a = ["x"]
            b = ["x"]
            c = ["x"]
            [policy.a]
            default = "x"
            [policy.b]
            default = "x"
            [policy.c]
            default = "x"
            "#,
        )
        .unwrap();
        let names: Vec<&str> = s.schedule.iter().map(|a| s.agents[a.0].as_str()).collect();
        assert_eq!(names, ["a", "b", "c", "a", "b", "c"]);
        // empty success set: nothing ever succeeds
        assert_eq!(outcome(&s, &s.roll()), 0);
        assert_eq!(decisive_fault(&s, &s.roll(), &s.declared_judge()), None);
    }

    #[test]
    fn illegal_policy_action_is_reported() {
        let s = fixture("planted_lookup");
        let bad = |_a: AgentId, _s: StateId| s.action_id("submit").unwrap();
        let err = roll_forward(&s, &bad).unwrap_err();
        assert!(matches!(err, FaultLabError::IllegalAction { step: 0, .. }));
    }

    #[test]
    fn planted_fault_is_cured_by_right_lookup() {
        let s = fixture("planted_lookup");
        let run = s.roll();
        assert_eq!(outcome(&s, &run), 0);
        assert_eq!(run.actions[2], s.action_id("wrong_lookup").unwrap());
        let cured = intervene(&s, &run, 2, s.action_id("right_lookup").unwrap()).unwrap();
        assert_eq!(outcome(&s, &cured), 1);
        assert!(is_causal_fault(&s, &run, 2).unwrap());
        assert!(!is_trivial_fault(&s, &run, 2, &s.declared_judge()).unwrap());
        assert_eq!(
            decisive_fault(&s, &run, &s.declared_judge()),
            Some((s.agent_id("websurfer").unwrap(), 2))
        );
    }

    #[test]
    fn corrected_fault_is_trivial() {
        let s = fixture("corrected_then_doomed");
        let run = s.roll();
        let judge = s.declared_judge();
        let v = analyze(&s, &run, &judge);
        assert_eq!(v.step_faults, BTreeSet::from([1, 4]));
        assert_eq!(v.trivial_steps, BTreeSet::from([1]));
        assert_eq!(v.causal_steps, BTreeSet::from([4]));
        assert!(is_trivial_fault(&s, &run, 1, &judge).unwrap());
        assert_eq!(v.decisive, Some((s.active_agent(4), 4)));
    }

    #[test]
    fn earliest_causal_fault_wins() {
        let s = fixture("two_causal");
        let run = s.roll();
        let v = analyze(&s, &run, &s.declared_judge());
        assert_eq!(v.causal_steps, BTreeSet::from([2, 5]));
        assert_eq!(v.decisive, Some((s.active_agent(2), 2)));
        assert_eq!(decisive_fault(&s, &run, &s.declared_judge()), v.decisive);
    }

    #[test]
    fn last_step_counterfactual() {
        let s = fixture("last_step");
        let run = s.roll();
        let last = s.horizon() - 1;
        assert!(is_causal_fault(&s, &run, last).unwrap());
    }

    #[test]
    fn preconditions() {
        let s = fixture("planted_lookup");
        let run = s.roll();
        let cured = intervene(&s, &run, 2, s.action_id("right_lookup").unwrap()).unwrap();
        assert!(matches!(
            is_causal_fault(&s, &cured, 2),
            Err(FaultLabError::PreconditionViolation(_))
        ));
        assert_eq!(decisive_fault(&s, &cured, &s.declared_judge()), None);
        assert_eq!(
            is_trivial_fault(&s, &run, 0, &s.declared_judge()),
            Err(FaultLabError::NotAStepFault(0))
        );
        assert!(matches!(
            is_causal_fault(&s, &run, 99),
            Err(FaultLabError::PreconditionViolation(_))
        ));
    }

    #[test]
    fn raising_epsilon_only_removes_faults() {
        let s = fixture("two_causal");
        let run = s.roll();
        let mut judge = TableJudge::default();
        for (t, (&st, &a)) in run.states.iter().zip(&run.actions).enumerate() {
            judge.scores.insert((st, a), t as f64 / 10.0);
        }
        let mut prev: Option<BTreeSet<usize>> = None;
        for eps in [0.0, 0.15, 0.25, 0.35, 0.45, 0.55, 0.9] {
            judge.epsilon = eps;
            let faults = analyze(&s, &run, &judge).step_faults;
            if let Some(p) = &prev {
                assert!(faults.is_subset(p));
            }
            prev = Some(faults);
        }
    }
}
