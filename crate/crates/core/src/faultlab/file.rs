//! TOML scenario fixtures.
//!
//! ```toml
//! name = "planted_lookup"
//! agents = ["orchestrator", "planner", "websurfer"]
//! states = ["idle", "assigned"]
//! initial = "idle"
//! success = ["assigned"]
//! horizon = 6                 # schedule defaults to round-robin over `agents`
//! flawed_actions = ["skip"]
//! epsilon = 0.5
//!
//! [actions]
//! orchestrator = ["assign", "skip"]
//!
//! [[transitions]]             # unlisted (state, action) pairs self-loop;
//! from = "idle"               # `from = "*"` applies to every state and is
//! action = "assign"           # overridden by specific entries
//! to = "assigned"
//!
//! [policy.orchestrator]
//! default = "assign"
//! by_state = { assigned = "skip" }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActionId, AgentId, FaultLabError, Scenario, StateId, TablePolicy};

fn default_epsilon() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionEntry {
    pub from: String,
    pub action: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub by_state: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub agents: Vec<String>,
    pub states: Vec<String>,
    pub initial: String,
    pub success: Vec<String>,
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<String>>,
    #[serde(default)]
    pub flawed_actions: Vec<String>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub actions: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub transitions: Vec<TransitionEntry>,
    pub policy: BTreeMap<String, PolicyEntry>,
}

fn lookup<T>(
    names: &[String],
    name: &str,
    kind: &str,
    wrap: fn(usize) -> T,
) -> Result<T, FaultLabError> {
    names
        .iter()
        .position(|n| n == name)
        .map(wrap)
        .ok_or_else(|| FaultLabError::InvalidScenario(format!("unknown {kind} {name:?}")))
}

impl ScenarioFile {
    pub fn into_scenario(self) -> Result<Scenario, FaultLabError> {
        let invalid = |m: String| FaultLabError::InvalidScenario(m);

        let mut actions: Vec<String> = Vec::new();
        for agent in &self.agents {
            for a in self.actions.get(agent).into_iter().flatten() {
                if !actions.contains(a) {
                    actions.push(a.clone());
                }
            }
        }
        if let Some(stray) = self.actions.keys().find(|k| !self.agents.contains(k)) {
            return Err(invalid(format!("actions listed for unknown agent {stray:?}")));
        }
        let agent_actions = self
            .agents
            .iter()
            .map(|agent| {
                self.actions
                    .get(agent)
                    .into_iter()
                    .flatten()
                    .map(|a| lookup(&actions, a, "action", ActionId))
                    .collect::<Result<BTreeSet<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;

        let schedule = match &self.schedule {
            Some(list) => {
                if list.len() != self.horizon {
                    return Err(invalid(format!(
                        "schedule has {} entries for horizon {}",
                        list.len(),
                        self.horizon
                    )));
                }
                list.iter()
                    .map(|a| lookup(&self.agents, a, "agent", AgentId))
                    .collect::<Result<Vec<_>, _>>()?
            }
            None if self.agents.is_empty() => Vec::new(),
            None => (0..self.horizon)
                .map(|t| AgentId(t % self.agents.len()))
                .collect(),
        };

        let n_states = self.states.len();
        let mut transition: Vec<Vec<StateId>> = (0..n_states)
            .map(|s| vec![StateId(s); actions.len()])
            .collect();
        let (wild, specific): (Vec<_>, Vec<_>) =
            self.transitions.iter().partition(|e| e.from == "*");
        for entry in wild.into_iter().chain(specific) {
            let action = lookup(&actions, &entry.action, "action", ActionId)?;
            let to = lookup(&self.states, &entry.to, "state", StateId)?;
            if entry.from == "*" {
                for row in transition.iter_mut() {
                    row[action.0] = to;
                }
            } else {
                let from = lookup(&self.states, &entry.from, "state", StateId)?;
                transition[from.0][action.0] = to;
            }
        }

        let mut table = Vec::with_capacity(self.agents.len());
        for agent in &self.agents {
            let entry = self
                .policy
                .get(agent)
                .ok_or_else(|| invalid(format!("no policy for agent {agent:?}")))?;
            let default = entry
                .default
                .as_deref()
                .map(|a| lookup(&actions, a, "action", ActionId))
                .transpose()?;
            let mut row = Vec::with_capacity(n_states);
            for state in &self.states {
                let action = match entry.by_state.get(state) {
                    Some(a) => lookup(&actions, a, "action", ActionId)?,
                    None => default.ok_or_else(|| {
                        invalid(format!("policy of {agent:?} undefined in state {state:?}"))
                    })?,
                };
                row.push(action);
            }
            for s in entry.by_state.keys() {
                lookup(&self.states, s, "state", StateId)?;
            }
            table.push(row);
        }

        let scenario = Scenario {
            initial: lookup(&self.states, &self.initial, "state", StateId)?,
            success: self
                .success
                .iter()
                .map(|s| lookup(&self.states, s, "state", StateId))
                .collect::<Result<_, _>>()?,
            flawed_actions: self
                .flawed_actions
                .iter()
                .map(|a| lookup(&actions, a, "action", ActionId))
                .collect::<Result<_, _>>()?,
            name: self.name,
            description: self.description,
            agents: self.agents,
            states: self.states,
            actions,
            agent_actions,
            schedule,
            transition,
            policy: TablePolicy::new(table),
            epsilon: self.epsilon,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_scenario(s: &Scenario) -> Self {
        let mut transitions = Vec::new();
        for (from, row) in s.transition.iter().enumerate() {
            for (action, to) in row.iter().enumerate() {
                if to.0 != from {
                    transitions.push(TransitionEntry {
                        from: s.states[from].clone(),
                        action: s.actions[action].clone(),
                        to: s.states[to.0].clone(),
                    });
                }
            }
        }
        let policy = s
            .agents
            .iter()
            .enumerate()
            .map(|(i, agent)| {
                let by_state = s.policy.table()[i]
                    .iter()
                    .enumerate()
                    .map(|(st, a)| (s.states[st].clone(), s.actions[a.0].clone()))
                    .collect();
                (
                    agent.clone(),
                    PolicyEntry {
                        default: None,
                        by_state,
                    },
                )
            })
            .collect();
        ScenarioFile {
            name: s.name.clone(),
            description: s.description.clone(),
            agents: s.agents.clone(),
            states: s.states.clone(),
            initial: s.states[s.initial.0].clone(),
            success: s.success.iter().map(|x| s.states[x.0].clone()).collect(),
            horizon: s.horizon(),
            schedule: Some(s.schedule.iter().map(|a| s.agents[a.0].clone()).collect()),
            flawed_actions: s
                .flawed_actions
                .iter()
                .map(|a| s.actions[a.0].clone())
                .collect(),
            epsilon: s.epsilon,
            actions: s
                .agents
                .iter()
                .zip(&s.agent_actions)
                .map(|(agent, set)| {
                    (
                        agent.clone(),
                        set.iter().map(|a| s.actions[a.0].clone()).collect(),
                    )
                })
                .collect(),
            transitions,
            policy,
        }
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario, FaultLabError> {
    let file: ScenarioFile =
        toml::from_str(text).map_err(|e| FaultLabError::InvalidScenario(e.to_string()))?;
    file.into_scenario()
}

pub fn load_scenario(path: &Path) -> Result<Scenario, FaultLabError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| FaultLabError::InvalidScenario(format!("{}: {e}", path.display())))?;
    parse_scenario(&text)
}

pub fn scenario_to_toml(s: &Scenario) -> String {
    toml::to_string(&ScenarioFile::from_scenario(s)).expect("scenario files serialize")
}
