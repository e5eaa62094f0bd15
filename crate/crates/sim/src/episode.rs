//! Episode assembly: seeded room generation, task sampling, expert planning,
//! instruction generation, and JSONL serialization.

use crate::classes::{class_info, pickupable_ids, receptacle_ids, ClassId};
use crate::env::Env;
use crate::error::SimError;
use crate::language::generate_instructions;
use crate::planner::{plan_expert, PlannerGoal, ResolvedTask};
use crate::render::RenderConfig;
use crate::world::{check_goal_conditions, AgentPose, Dir, ObjectInst, Room, TaskKind, TaskSpec};
use gridhome_tensor::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

pub const RAW_SCHEMA_VERSION: u32 = 1;

/// Composite episode seed: the layout word fixes the room, the variation
/// word drives task choice, instruction phrasing, and detector noise. Seen
/// versus unseen splits reuse or refresh the layout word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSeed {
    pub layout: u64,
    pub variation: u64,
}

pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b.rotate_left(17))
        .wrapping_add(0x517c_c1b7_2722_0a95);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 27)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajStep {
    pub action: crate::actions::Action,
    pub target: Option<usize>,
    pub goal_idx: usize,
    pub last_of_goal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub schema_version: u32,
    pub seed: EpisodeSeed,
    pub task: TaskSpec,
    pub initial_room: Room,
    pub initial_pose: AgentPose,
    pub goal_text: String,
    pub instructions: Vec<String>,
    pub planner_goals: Vec<PlannerGoal>,
    pub trajectory: Vec<TrajStep>,
    /// Instruction i supervises trajectory steps [start, end).
    pub instruction_spans: Vec<(usize, usize)>,
    /// Instruction i unpacks planner goal `instruction_goal[i]`.
    pub instruction_goal: Vec<usize>,
}

impl Episode {
    pub fn expert_len(&self) -> usize {
        self.trajectory.len()
    }
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub width: i32,
    pub height: i32,
    pub render: RenderConfig,
    pub max_task_retries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            width: 8,
            height: 8,
            render: RenderConfig::default(),
            max_task_retries: 40,
        }
    }
}

fn free_cell(room: &Room, rng: &mut Rng, tries: usize) -> Option<(i32, i32)> {
    for _ in 0..tries {
        let cell = (rng.index(room.width as usize) as i32, rng.index(room.height as usize) as i32);
        if room.top_level_at(cell).is_none() {
            return Some(cell);
        }
    }
    None
}

/// Room layout from the layout stream: receptacles, loose objects, agent.
fn generate_room(rng: &mut Rng, width: i32, height: i32) -> Result<(Room, AgentPose), SimError> {
    let mut room = Room {
        width,
        height,
        objects: Vec::new(),
    };
    let mut recep_classes: Vec<ClassId> = receptacle_ids().collect();
    rng.shuffle(&mut recep_classes);
    let mut n_recep = 4 + rng.index(3);
    let microwave = crate::classes::class_by_name("microwave").unwrap();
    if !recep_classes[..n_recep].contains(&microwave) && rng.bernoulli(0.6) {
        recep_classes[n_recep - 1] = microwave;
    }
    n_recep = n_recep.min(recep_classes.len());
    for &class in &recep_classes[..n_recep] {
        let Some(cell) = free_cell(&room, rng, 64) else {
            return Err(SimError::Generation("no free cell for receptacle".into()));
        };
        let id = room.objects.len();
        room.objects.push(ObjectInst {
            id,
            class,
            cell,
            parent: None,
            open: false,
            toggled: false,
            sliced: false,
            hot: false,
            held: false,
        });
    }

    let item_classes: Vec<ClassId> = pickupable_ids().collect();
    let n_items = 4 + rng.index(4);
    let mut chosen: Vec<ClassId> = (0..n_items)
        .map(|_| *rng.choose(&item_classes))
        .collect();
    let has_dup = chosen
        .iter()
        .any(|c| chosen.iter().filter(|&&x| x == *c).count() >= 2);
    if !has_dup && rng.bernoulli(0.5) {
        chosen[n_items - 1] = chosen[0];
    }
    for class in chosen {
        let id = room.objects.len();
        let recep_hosts: Vec<usize> = room
            .objects
            .iter()
            .filter(|o| {
                class_info(o.class).receptacle_capacity.is_some() && room.capacity_left(o.id) > 0
            })
            .map(|o| o.id)
            .collect();
        if !recep_hosts.is_empty() && rng.bernoulli(0.6) {
            let host = *rng.choose(&recep_hosts);
            let cell = room.objects[host].cell;
            room.objects.push(ObjectInst {
                id,
                class,
                cell,
                parent: Some(host),
                open: false,
                toggled: false,
                sliced: false,
                hot: false,
                held: false,
            });
        } else {
            let Some(cell) = free_cell(&room, rng, 64) else {
                return Err(SimError::Generation("no free cell for object".into()));
            };
            room.objects.push(ObjectInst {
                id,
                class,
                cell,
                parent: None,
                open: false,
                toggled: false,
                sliced: false,
                hot: false,
                held: false,
            });
        }
    }

    // Agent placement with a basic mobility check.
    for _ in 0..32 {
        let Some(cell) = free_cell(&room, rng, 64) else {
            return Err(SimError::Generation("no free cell for agent".into()));
        };
        let facing = *rng.choose(&Dir::ALL);
        let has_exit = Dir::ALL.iter().any(|d| {
            let (dx, dy) = d.delta();
            !room.blocked((cell.0 + dx, cell.1 + dy))
        });
        if has_exit {
            return Ok((room, AgentPose { cell, facing, pitch: 0 }));
        }
    }
    Err(SimError::Generation("agent is boxed in".into()))
}

/// Pick a task the current room can support. Tasks already satisfied by the
/// initial state are rejected.
fn sample_task(room: &Room, rng: &mut Rng, forced: Option<TaskSpec>) -> Option<ResolvedTask> {
    let microwave_class = crate::classes::class_by_name("microwave").unwrap();
    let micro = room
        .instances_of(microwave_class)
        .into_iter()
        .find(|&m| room.contents(m).is_empty() && !room.objects[m].open);

    let satisfied = |obj_class: ClassId, recep_class: ClassId| {
        room.objects.iter().any(|o| {
            o.class == obj_class
                && o.parent
                    .map(|p| room.objects[p].class == recep_class)
                    .unwrap_or(false)
        })
    };

    let mut kinds = match forced {
        Some(spec) => vec![spec.kind],
        None => {
            let mut k = vec![TaskKind::PickPlace];
            let has_pair = pickupable_ids().any(|c| room.instances_of(c).len() >= 2);
            if has_pair {
                k.push(TaskKind::PickTwoPlace);
            }
            if micro.is_some() {
                k.push(TaskKind::HeatPlace);
            }
            k
        }
    };
    rng.shuffle(&mut kinds);

    for kind in kinds {
        let needed = match kind {
            TaskKind::PickTwoPlace => 2,
            _ => 1,
        };
        let mut pairs = Vec::new();
        for obj_class in pickupable_ids() {
            if forced.map(|f| f.object_class != obj_class).unwrap_or(false) {
                continue;
            }
            if kind == TaskKind::HeatPlace && !class_info(obj_class).heatable {
                continue;
            }
            let instances: Vec<usize> = room
                .instances_of(obj_class)
                .into_iter()
                .filter(|&i| {
                    !room.objects[i].hot
                        && !(micro.is_some() && room.objects[i].parent == micro)
                })
                .collect();
            if instances.len() < needed {
                continue;
            }
            for recep in room.objects.iter().filter(|o| {
                class_info(o.class).receptacle_capacity.is_some()
            }) {
                if forced
                    .map(|f| f.receptacle_class != recep.class)
                    .unwrap_or(false)
                {
                    continue;
                }
                if kind == TaskKind::HeatPlace && recep.class == microwave_class {
                    continue;
                }
                if room.capacity_left(recep.id) < needed || satisfied(obj_class, recep.class) {
                    continue;
                }
                // Moving an object onto the receptacle it already occupies is
                // covered by the satisfied() rejection above.
                pairs.push((recep.id, instances.clone()));
            }
        }
        if pairs.is_empty() {
            continue;
        }
        let (recep_inst, mut instances) = pairs[rng.index(pairs.len())].clone();
        rng.shuffle(&mut instances);
        return Some(ResolvedTask {
            kind,
            object_instances: instances[..needed].to_vec(),
            receptacle_instance: recep_inst,
            microwave_instance: micro,
        });
    }
    None
}

/// Deterministic episode construction. The task is rejection-sampled until
/// the expert planner solves it and the goal check passes.
pub fn build_episode(
    seed: EpisodeSeed,
    cfg: &GenConfig,
    forced: Option<TaskSpec>,
) -> Result<Episode, SimError> {
    let mut layout_rng = Rng::new(mix_seed(seed.layout, 0x4c41_594f_5554));
    let (room, pose) = generate_room(&mut layout_rng, cfg.width, cfg.height)?;
    let mut task_rng = Rng::new(mix_seed(seed.variation, mix_seed(seed.layout, 0x5441_534b)));

    for _ in 0..cfg.max_task_retries {
        let Some(resolved) = sample_task(&room, &mut task_rng, forced) else {
            continue;
        };
        let mut env = Env::new(room.clone(), pose);
        let Ok(goals) = plan_expert(&mut env, &resolved) else {
            continue;
        };
        let task = TaskSpec {
            kind: resolved.kind,
            object_class: env.room.objects[resolved.object_instances[0]].class,
            receptacle_class: env.room.objects[resolved.receptacle_instance].class,
        };
        let check = check_goal_conditions(&env.room, &task);
        if !check.success {
            continue;
        }

        let mut language_rng = task_rng.fork();
        let goal_list: Vec<PlannerGoal> = goals.iter().map(|(g, _)| *g).collect();
        let (goal_text, instructions) =
            generate_instructions(&task, &goal_list, &mut language_rng);

        let mut trajectory = Vec::new();
        let mut spans = Vec::new();
        for (gi, (_, steps)) in goals.iter().enumerate() {
            let start = trajectory.len();
            for (si, s) in steps.iter().enumerate() {
                trajectory.push(TrajStep {
                    action: s.action,
                    target: s.target,
                    goal_idx: gi,
                    last_of_goal: si + 1 == steps.len(),
                });
            }
            spans.push((start, trajectory.len()));
        }
        let instruction_goal = (0..goal_list.len()).collect();

        return Ok(Episode {
            schema_version: RAW_SCHEMA_VERSION,
            seed,
            task,
            initial_room: room,
            initial_pose: pose,
            goal_text,
            instructions,
            planner_goals: goal_list,
            trajectory,
            instruction_spans: spans,
            instruction_goal,
        });
    }
    Err(SimError::Generation(format!(
        "no solvable task for seed {seed:?} after {} retries",
        cfg.max_task_retries
    )))
}

/// Replay the stored expert trajectory on a fresh environment, asserting
/// every API call succeeds. Returns the final environment.
pub fn replay_expert(episode: &Episode) -> Result<Env, SimError> {
    let mut env = Env::new(episode.initial_room.clone(), episode.initial_pose);
    for (i, step) in episode.trajectory.iter().enumerate() {
        if !env.apply_action(step.action, step.target) {
            return Err(SimError::Generation(format!(
                "expert step {i} ({:?}) failed on replay",
                step.action
            )));
        }
    }
    Ok(env)
}

pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<(), SimError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in episodes {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_episodes(path: &Path) -> Result<Vec<Episode>, SimError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Episode = serde_json::from_str(&line)?;
        if e.schema_version != RAW_SCHEMA_VERSION {
            return Err(SimError::Schema(format!(
                "episode schema {} unsupported (expected {RAW_SCHEMA_VERSION})",
                e.schema_version
            )));
        }
        out.push(e);
    }
    Ok(out)
}
