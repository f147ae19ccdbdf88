use crate::trace::{DatasetRecord, GroundTruthLabel, Trajectory};

use super::{analyze, FaultLabError, Rollout, Scenario};

/// Renders a failed run as a Who&When-style record labeled with the oracle's
/// decisive fault.
pub fn export_as_trajectory(
    scenario: &Scenario,
    run: &Rollout,
    record_id: &str,
) -> Result<DatasetRecord, FaultLabError> {
    let verdict = analyze(scenario, run, &scenario.declared_judge());
    let (agent, t) = verdict.decisive.ok_or(FaultLabError::NoDecisiveFault)?;
    let witness = verdict.witnesses[&t];

    let success: Vec<&str> = scenario
        .success
        .iter()
        .map(|s| scenario.states[s.0].as_str())
        .collect();
    let problem = format!(
        "{} Starting from state {}, the agents must reach one of [{}] after exactly {} steps.",
        scenario.description,
        scenario.states[scenario.initial.0],
        success.join(", "),
        scenario.horizon()
    );
    let steps = run.actions.iter().enumerate().map(|(i, action)| {
        let who = &scenario.agents[scenario.active_agent(i).0];
        let content = format!(
            "In state {} I perform `{}`. The system moves to state {}.",
            scenario.states[run.states[i].0],
            scenario.actions[action.0],
            scenario.states[run.states[i + 1].0]
        );
        (who.clone(), content)
    });
    let mut trajectory = Trajectory::from_pairs(problem, steps);
    trajectory.final_outcome = Some(false);

    Ok(DatasetRecord {
        record_id: record_id.to_string(),
        trajectory,
        label: GroundTruthLabel {
            mistake_agent: scenario.agents[agent.0].clone(),
            mistake_step: t,
            mistake_reason: Some(format!(
                "`{}` at step {t} is flawed; replacing it with `{}` leads to success.",
                scenario.actions[run.actions[t].0], scenario.actions[witness.0]
            )),
        },
        ground_truth_answer: Some(success.join(", ")),
    })
}
