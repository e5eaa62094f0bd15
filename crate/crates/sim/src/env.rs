//! Closed-loop environment: applies actions with ALFRED-style failure
//! semantics. Failures are data, not errors; ten of them end the episode.

use crate::actions::Action;
use crate::classes::class_info;
use crate::render::{render_panorama, PanoramaObservation, RenderConfig};
use crate::world::{AgentPose, Room};
use gridhome_tensor::Rng;

pub const FAILURE_BUDGET: u32 = 10;

#[derive(Debug, Clone)]
pub struct StepResult {
    pub api_success: bool,
    pub failures: u32,
    pub terminated: bool,
    pub observation: PanoramaObservation,
}

pub struct Env {
    pub room: Room,
    pub pose: AgentPose,
    pub failures: u32,
    pub terminated: bool,
    pub steps: usize,
}

impl Env {
    pub fn new(room: Room, pose: AgentPose) -> Self {
        Env {
            room,
            pose,
            failures: 0,
            terminated: false,
            steps: 0,
        }
    }

    pub fn observe(&self, cfg: &RenderConfig, rng: &mut Rng) -> PanoramaObservation {
        render_panorama(&self.room, &self.pose, cfg, rng, self.steps)
    }

    fn facing_cell(&self) -> (i32, i32) {
        let (dx, dy) = self.pose.facing.delta();
        (self.pose.cell.0 + dx, self.pose.cell.1 + dy)
    }

    /// Target instance directly ahead and visible.
    fn reachable(&self, id: usize) -> bool {
        self.room.objects[id].cell == self.facing_cell()
            && self.room.detectable(id)
            && !self.room.objects[id].held
    }

    /// Apply one action. Navigation ignores the target; manipulation resolves
    /// it to an object instance and checks preconditions.
    pub fn step(
        &mut self,
        action: Action,
        target: Option<usize>,
        cfg: &RenderConfig,
        rng: &mut Rng,
    ) -> StepResult {
        assert!(!self.terminated, "step on a terminated episode");
        let ok = self.apply_action(action, target);
        self.steps += 1;
        if !ok {
            self.failures += 1;
            if self.failures >= FAILURE_BUDGET {
                self.terminated = true;
            }
        }
        debug_assert!(self.room.check_invariants().is_ok());
        StepResult {
            api_success: ok,
            failures: self.failures,
            terminated: self.terminated,
            observation: self.observe(cfg, rng),
        }
    }

    /// State transition without rendering or failure accounting; used by the
    /// planner and by replay paths. Returns API success.
    pub fn apply_action(&mut self, action: Action, target: Option<usize>) -> bool {
        match action {
            Action::MoveAhead => {
                let next = self.facing_cell();
                if self.room.blocked(next) {
                    return false;
                }
                self.pose.cell = next;
                if let Some(held) = self.room.held_object() {
                    self.room.object_mut(held).cell = next;
                }
                true
            }
            Action::RotateLeft => {
                self.pose.facing = self.pose.facing.left();
                true
            }
            Action::RotateRight => {
                self.pose.facing = self.pose.facing.right();
                true
            }
            Action::LookUp => {
                if self.pose.pitch >= 1 {
                    return false;
                }
                self.pose.pitch += 1;
                true
            }
            Action::LookDown => {
                if self.pose.pitch <= -1 {
                    return false;
                }
                self.pose.pitch -= 1;
                true
            }
            Action::Pickup => self.manipulate(target, |env, id| {
                let o = &env.room.objects[id];
                if !class_info(o.class).pickupable || env.room.held_object().is_some() {
                    return false;
                }
                let obj = env.room.object_mut(id);
                obj.parent = None;
                obj.held = true;
                obj.cell = env.pose.cell;
                true
            }),
            Action::Put => self.manipulate(target, |env, id| {
                let Some(held) = env.room.held_object() else {
                    return false;
                };
                let recep = &env.room.objects[id];
                let info = class_info(recep.class);
                if info.receptacle_capacity.is_none()
                    || (info.openable && !recep.open)
                    || env.room.capacity_left(id) == 0
                {
                    return false;
                }
                let cell = recep.cell;
                let obj = env.room.object_mut(held);
                obj.held = false;
                obj.parent = Some(id);
                obj.cell = cell;
                true
            }),
            Action::Open => self.manipulate(target, |env, id| {
                let o = &env.room.objects[id];
                if !class_info(o.class).openable || o.open {
                    return false;
                }
                env.room.object_mut(id).open = true;
                true
            }),
            Action::Close => self.manipulate(target, |env, id| {
                let o = &env.room.objects[id];
                if !class_info(o.class).openable || !o.open {
                    return false;
                }
                env.room.object_mut(id).open = false;
                true
            }),
            Action::ToggleOn => self.manipulate(target, |env, id| {
                let o = &env.room.objects[id];
                let info = class_info(o.class);
                if !info.toggleable || o.toggled {
                    return false;
                }
                // A microwave heats only when running closed.
                if info.openable && o.open {
                    return false;
                }
                env.room.object_mut(id).toggled = true;
                if info.openable {
                    for c in env.room.contents(id) {
                        env.room.object_mut(c).hot = true;
                    }
                }
                true
            }),
            Action::ToggleOff => self.manipulate(target, |env, id| {
                let o = &env.room.objects[id];
                if !class_info(o.class).toggleable || !o.toggled {
                    return false;
                }
                env.room.object_mut(id).toggled = false;
                true
            }),
            Action::Slice => self.manipulate(target, |env, id| {
                let o = &env.room.objects[id];
                if !class_info(o.class).sliceable || o.sliced {
                    return false;
                }
                let holds_slicer = env
                    .room
                    .held_object()
                    .map(|h| class_info(env.room.objects[h].class).slicer)
                    .unwrap_or(false);
                if !holds_slicer {
                    return false;
                }
                env.room.object_mut(id).sliced = true;
                true
            }),
        }
    }

    fn manipulate(&mut self, target: Option<usize>, f: impl FnOnce(&mut Self, usize) -> bool) -> bool {
        let Some(id) = target else {
            return false;
        };
        if id >= self.room.objects.len() || !self.reachable(id) {
            return false;
        }
        f(self, id)
    }
}
