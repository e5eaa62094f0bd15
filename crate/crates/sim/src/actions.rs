//! The fixed action set: 5 navigation actions, 7 manipulation actions, and a
//! start-of-episode marker used only as a decoder input.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    MoveAhead,
    RotateLeft,
    RotateRight,
    LookUp,
    LookDown,
    Pickup,
    Put,
    Open,
    Close,
    ToggleOn,
    ToggleOff,
    Slice,
}

pub const ACTIONS: [Action; 12] = [
    Action::MoveAhead,
    Action::RotateLeft,
    Action::RotateRight,
    Action::LookUp,
    Action::LookDown,
    Action::Pickup,
    Action::Put,
    Action::Open,
    Action::Close,
    Action::ToggleOn,
    Action::ToggleOff,
    Action::Slice,
];

/// Decoder-side id of the start marker; total embedding rows = 13.
pub const START_ID: usize = 12;
pub const ACTION_VOCAB: usize = 13;

impl Action {
    pub fn id(self) -> usize {
        ACTIONS.iter().position(|&a| a == self).unwrap()
    }

    pub fn from_id(id: usize) -> Option<Action> {
        ACTIONS.get(id).copied()
    }

    pub fn is_navigation(self) -> bool {
        matches!(
            self,
            Action::MoveAhead
                | Action::RotateLeft
                | Action::RotateRight
                | Action::LookUp
                | Action::LookDown
        )
    }

    pub fn is_manipulation(self) -> bool {
        !self.is_navigation()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::MoveAhead => "MoveAhead",
            Action::RotateLeft => "RotateLeft",
            Action::RotateRight => "RotateRight",
            Action::LookUp => "LookUp",
            Action::LookDown => "LookDown",
            Action::Pickup => "Pickup",
            Action::Put => "Put",
            Action::Open => "Open",
            Action::Close => "Close",
            Action::ToggleOn => "ToggleOn",
            Action::ToggleOff => "ToggleOff",
            Action::Slice => "Slice",
        }
    }
}

pub fn navigation_ids() -> impl Iterator<Item = usize> {
    ACTIONS.iter().filter(|a| a.is_navigation()).map(|a| a.id())
}
