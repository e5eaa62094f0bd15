//! GridHome: a deterministic grid-world household simulator with panoramic
//! object detections, a 12-action API with failure semantics, task sampling,
//! an expert planner, and templated instruction generation.

pub mod actions;
pub mod classes;
pub mod env;
mod error;
pub mod episode;
pub mod language;
pub mod planner;
pub mod render;
pub mod world;

pub use actions::{Action, ACTIONS, ACTION_VOCAB, START_ID};
pub use env::{Env, StepResult, FAILURE_BUDGET};
pub use episode::{
    build_episode, mix_seed, read_episodes, replay_expert, write_episodes, Episode, EpisodeSeed,
    GenConfig, TrajStep, RAW_SCHEMA_VERSION,
};
pub use error::SimError;
pub use planner::{ExpertStep, GoalKind, PlannerGoal};
pub use render::{
    appearance_vector, gold_box, render_panorama, Detection, NoiseConfig, PanoramaObservation,
    RenderConfig, VIEW_BACK, VIEW_FRONT, VIEW_LEFT, VIEW_RIGHT,
};
pub use world::{
    check_goal_conditions, AgentPose, Dir, GoalCheck, ObjectInst, Room, TaskKind, TaskSpec,
};
