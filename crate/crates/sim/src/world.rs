//! Rooms, object instances, agent pose, tasks, and goal-condition checks.

use crate::classes::{class_info, ClassId};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dir {
    North,
    East,
    South,
    West,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::North, Dir::East, Dir::South, Dir::West];

    /// Grid delta; y grows southward.
    pub fn delta(self) -> (i32, i32) {
        match self {
            Dir::North => (0, -1),
            Dir::East => (1, 0),
            Dir::South => (0, 1),
            Dir::West => (-1, 0),
        }
    }

    pub fn left(self) -> Dir {
        match self {
            Dir::North => Dir::West,
            Dir::West => Dir::South,
            Dir::South => Dir::East,
            Dir::East => Dir::North,
        }
    }

    pub fn right(self) -> Dir {
        self.left().left().left()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPose {
    pub cell: (i32, i32),
    pub facing: Dir,
    /// Camera pitch: -1 down, 0 level, +1 up.
    pub pitch: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInst {
    pub id: usize,
    pub class: ClassId,
    pub cell: (i32, i32),
    /// Receptacle instance currently holding this object.
    pub parent: Option<usize>,
    pub open: bool,
    pub toggled: bool,
    pub sliced: bool,
    pub hot: bool,
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub width: i32,
    pub height: i32,
    pub objects: Vec<ObjectInst>,
}

impl Room {
    pub fn in_bounds(&self, cell: (i32, i32)) -> bool {
        cell.0 >= 0 && cell.0 < self.width && cell.1 >= 0 && cell.1 < self.height
    }

    pub fn object(&self, id: usize) -> &ObjectInst {
        &self.objects[id]
    }

    pub fn object_mut(&mut self, id: usize) -> &mut ObjectInst {
        &mut self.objects[id]
    }

    /// Top-level (unparented, unheld) object occupying a cell, if any.
    pub fn top_level_at(&self, cell: (i32, i32)) -> Option<usize> {
        self.objects
            .iter()
            .find(|o| o.cell == cell && o.parent.is_none() && !o.held)
            .map(|o| o.id)
    }

    /// Cells the agent cannot stand on.
    pub fn blocked(&self, cell: (i32, i32)) -> bool {
        !self.in_bounds(cell) || self.top_level_at(cell).is_some()
    }

    pub fn contents(&self, recep_id: usize) -> Vec<usize> {
        self.objects
            .iter()
            .filter(|o| o.parent == Some(recep_id))
            .map(|o| o.id)
            .collect()
    }

    pub fn capacity_left(&self, recep_id: usize) -> usize {
        let cap = class_info(self.objects[recep_id].class)
            .receptacle_capacity
            .unwrap_or(0);
        cap.saturating_sub(self.contents(recep_id).len())
    }

    /// Hidden inside a closed receptacle?
    pub fn concealed(&self, id: usize) -> bool {
        match self.objects[id].parent {
            Some(p) => {
                let parent = &self.objects[p];
                class_info(parent.class).openable && !parent.open
            }
            None => false,
        }
    }

    /// Visible to the detector: not held, not inside a closed receptacle.
    pub fn detectable(&self, id: usize) -> bool {
        !self.objects[id].held && !self.concealed(id)
    }

    pub fn held_object(&self) -> Option<usize> {
        self.objects.iter().find(|o| o.held).map(|o| o.id)
    }

    pub fn instances_of(&self, class: ClassId) -> Vec<usize> {
        self.objects
            .iter()
            .filter(|o| o.class == class)
            .map(|o| o.id)
            .collect()
    }

    /// The object graph must stay a forest with one held object at most.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.objects.iter().filter(|o| o.held).count() > 1 {
            return Err("more than one object held".into());
        }
        for o in &self.objects {
            let mut seen = vec![o.id];
            let mut cur = o.parent;
            while let Some(p) = cur {
                if seen.contains(&p) {
                    return Err(format!("parent cycle at object {}", o.id));
                }
                seen.push(p);
                cur = self.objects[p].parent;
            }
            if let Some(p) = o.parent {
                if !o.held && self.objects[p].cell != o.cell {
                    return Err(format!("object {} strayed from its receptacle cell", o.id));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    PickPlace,
    PickTwoPlace,
    HeatPlace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub object_class: ClassId,
    pub receptacle_class: ClassId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GoalCheck {
    pub satisfied: usize,
    pub total: usize,
    pub success: bool,
}

/// Per-task checklist of goal conditions. Scored in [0, 1] as
/// satisfied/total; success requires the full checklist.
pub fn check_goal_conditions(room: &Room, task: &TaskSpec) -> GoalCheck {
    let on_target_recep = |o: &ObjectInst| {
        o.parent
            .map(|p| room.objects[p].class == task.receptacle_class)
            .unwrap_or(false)
    };
    match task.kind {
        TaskKind::PickPlace => {
            let placed = room
                .objects
                .iter()
                .any(|o| o.class == task.object_class && on_target_recep(o));
            GoalCheck {
                satisfied: placed as usize,
                total: 1,
                success: placed,
            }
        }
        TaskKind::PickTwoPlace => {
            let placed = room
                .objects
                .iter()
                .filter(|o| o.class == task.object_class && on_target_recep(o))
                .count();
            GoalCheck {
                satisfied: placed.min(2),
                total: 2,
                success: placed >= 2,
            }
        }
        TaskKind::HeatPlace => {
            let heated = room
                .objects
                .iter()
                .any(|o| o.class == task.object_class && o.hot);
            let placed = room
                .objects
                .iter()
                .any(|o| o.class == task.object_class && on_target_recep(o));
            let both_same_instance = room
                .objects
                .iter()
                .any(|o| o.class == task.object_class && o.hot && on_target_recep(o));
            GoalCheck {
                satisfied: heated as usize + placed as usize,
                total: 2,
                success: both_same_instance,
            }
        }
    }
}
