//! Expert planner: breadth-first navigation over (cell, facing) states plus
//! scripted manipulation sequences per task type.

use crate::actions::Action;
use crate::classes::class_info;
use crate::env::Env;
use crate::world::{Dir, TaskKind};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GoalKind {
    GotoLocation,
    PickupObject,
    PutObject,
    HeatObject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerGoal {
    pub kind: GoalKind,
    /// Class named in the instruction for this goal.
    pub class: usize,
    /// Instance the expert acts on.
    pub instance: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertStep {
    pub action: Action,
    pub target: Option<usize>,
}

/// Task resolved to concrete instances by the sampler.
#[derive(Debug, Clone)]
pub struct ResolvedTask {
    pub kind: TaskKind,
    pub object_instances: Vec<usize>,
    pub receptacle_instance: usize,
    pub microwave_instance: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("no path to instance {0}")]
    NoPath(usize),
    #[error("expert action {0:?} failed during planning")]
    ScriptFailed(Action),
}

/// Shortest action sequence (MoveAhead / RotateLeft / RotateRight) from the
/// current pose to any pose facing the target instance's cell. An empty
/// navigation need still emits a look-around wiggle so every goal owns at
/// least one trajectory step.
fn goto_actions(env: &Env, target: usize) -> Result<Vec<Action>, PlanError> {
    let goal_cell = env.room.objects[target].cell;
    let start = (env.pose.cell, env.pose.facing);
    let at_goal = |cell: (i32, i32), facing: Dir| {
        let (dx, dy) = facing.delta();
        (cell.0 + dx, cell.1 + dy) == goal_cell
    };
    if at_goal(start.0, start.1) {
        return Ok(vec![Action::RotateLeft, Action::RotateRight]);
    }
    let mut prev: HashMap<((i32, i32), Dir), (((i32, i32), Dir), Action)> = HashMap::new();
    let mut queue = VecDeque::new();
    queue.push_back(start);
    prev.insert(start, (start, Action::MoveAhead));
    while let Some((cell, facing)) = queue.pop_front() {
        for action in [Action::MoveAhead, Action::RotateLeft, Action::RotateRight] {
            let next = match action {
                Action::MoveAhead => {
                    let (dx, dy) = facing.delta();
                    let nc = (cell.0 + dx, cell.1 + dy);
                    if env.room.blocked(nc) {
                        continue;
                    }
                    (nc, facing)
                }
                Action::RotateLeft => (cell, facing.left()),
                Action::RotateRight => (cell, facing.right()),
                _ => unreachable!(),
            };
            if prev.contains_key(&next) {
                continue;
            }
            prev.insert(next, ((cell, facing), action));
            if at_goal(next.0, next.1) {
                let mut actions = Vec::new();
                let mut cur = next;
                while cur != start {
                    let (p, a) = prev[&cur];
                    actions.push(a);
                    cur = p;
                }
                actions.reverse();
                return Ok(actions);
            }
            queue.push_back(next);
        }
    }
    Err(PlanError::NoPath(target))
}

fn apply_all(env: &mut Env, steps: &[ExpertStep]) -> Result<(), PlanError> {
    for s in steps {
        if !env.apply_action(s.action, s.target) {
            return Err(PlanError::ScriptFailed(s.action));
        }
    }
    Ok(())
}

fn goto_goal(env: &mut Env, instance: usize) -> Result<(PlannerGoal, Vec<ExpertStep>), PlanError> {
    let actions = goto_actions(env, instance)?;
    let steps: Vec<ExpertStep> = actions
        .into_iter()
        .map(|action| ExpertStep { action, target: None })
        .collect();
    apply_all(env, &steps)?;
    Ok((
        PlannerGoal {
            kind: GoalKind::GotoLocation,
            class: env.room.objects[instance].class,
            instance,
        },
        steps,
    ))
}

fn pickup_goal(env: &mut Env, instance: usize) -> Result<(PlannerGoal, Vec<ExpertStep>), PlanError> {
    let mut steps = Vec::new();
    let parent = env.room.objects[instance].parent;
    let opened = match parent {
        Some(p) if class_info(env.room.objects[p].class).openable && !env.room.objects[p].open => {
            steps.push(ExpertStep {
                action: Action::Open,
                target: Some(p),
            });
            Some(p)
        }
        _ => None,
    };
    steps.push(ExpertStep {
        action: Action::Pickup,
        target: Some(instance),
    });
    if let Some(p) = opened {
        steps.push(ExpertStep {
            action: Action::Close,
            target: Some(p),
        });
    }
    apply_all(env, &steps)?;
    Ok((
        PlannerGoal {
            kind: GoalKind::PickupObject,
            class: env.room.objects[instance].class,
            instance,
        },
        steps,
    ))
}

fn put_goal(env: &mut Env, recep: usize) -> Result<(PlannerGoal, Vec<ExpertStep>), PlanError> {
    let mut steps = Vec::new();
    let openable = class_info(env.room.objects[recep].class).openable;
    let opened = openable && !env.room.objects[recep].open;
    if opened {
        steps.push(ExpertStep {
            action: Action::Open,
            target: Some(recep),
        });
    }
    steps.push(ExpertStep {
        action: Action::Put,
        target: Some(recep),
    });
    if opened {
        steps.push(ExpertStep {
            action: Action::Close,
            target: Some(recep),
        });
    }
    apply_all(env, &steps)?;
    Ok((
        PlannerGoal {
            kind: GoalKind::PutObject,
            class: env.room.objects[recep].class,
            instance: recep,
        },
        steps,
    ))
}

/// Microwave routine: stow, run, retrieve.
fn heat_goal(env: &mut Env, micro: usize, obj: usize) -> Result<(PlannerGoal, Vec<ExpertStep>), PlanError> {
    let mut steps = Vec::new();
    if !env.room.objects[micro].open {
        steps.push(ExpertStep {
            action: Action::Open,
            target: Some(micro),
        });
    }
    for (action, target) in [
        (Action::Put, micro),
        (Action::Close, micro),
        (Action::ToggleOn, micro),
        (Action::ToggleOff, micro),
        (Action::Open, micro),
        (Action::Pickup, obj),
        (Action::Close, micro),
    ] {
        steps.push(ExpertStep {
            action,
            target: Some(target),
        });
    }
    apply_all(env, &steps)?;
    Ok((
        PlannerGoal {
            kind: GoalKind::HeatObject,
            class: env.room.objects[obj].class,
            instance: micro,
        },
        steps,
    ))
}

/// Produce the full expert plan, mutating `env` along the way. On success the
/// environment is left in the task's goal state.
pub fn plan_expert(
    env: &mut Env,
    task: &ResolvedTask,
) -> Result<Vec<(PlannerGoal, Vec<ExpertStep>)>, PlanError> {
    let mut goals = Vec::new();
    match task.kind {
        TaskKind::PickPlace | TaskKind::PickTwoPlace => {
            for &obj in &task.object_instances {
                goals.push(goto_goal(env, obj)?);
                goals.push(pickup_goal(env, obj)?);
                goals.push(goto_goal(env, task.receptacle_instance)?);
                goals.push(put_goal(env, task.receptacle_instance)?);
            }
        }
        TaskKind::HeatPlace => {
            let obj = task.object_instances[0];
            let micro = task.microwave_instance.expect("heat task needs a microwave");
            goals.push(goto_goal(env, obj)?);
            goals.push(pickup_goal(env, obj)?);
            goals.push(goto_goal(env, micro)?);
            goals.push(heat_goal(env, micro, obj)?);
            goals.push(goto_goal(env, task.receptacle_instance)?);
            goals.push(put_goal(env, task.receptacle_instance)?);
        }
    }
    Ok(goals)
}
