//! Templated instruction generation and the token vocabulary.

use crate::classes::{class_name, pickupable_ids, CLASSES};
use crate::planner::{GoalKind, PlannerGoal};
use crate::world::{TaskKind, TaskSpec};
use gridhome_tensor::Rng;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const CLS: &str = "<cls>";
pub const SEP: &str = "<sep>";
pub const MASK: &str = "<mask>";

const GOTO: [&str; 4] = [
    "go to the {x}",
    "walk to the {x}",
    "head to the {x}",
    "move to the {x}",
];
const PICKUP: [&str; 3] = ["pick up the {x}", "grab the {x}", "take the {x}"];
const PUT: [&str; 3] = [
    "put the {x} on the {y}",
    "place the {x} on the {y}",
    "set the {x} on the {y}",
];
const HEAT: [&str; 3] = [
    "heat the {x} in the microwave",
    "cook the {x} in the microwave",
    "warm the {x} in the microwave",
];
const GOAL_PICK: [&str; 2] = ["put a {x} on the {y}", "move a {x} to the {y}"];
const GOAL_TWO: [&str; 2] = ["put two {x}s on the {y}", "place two {x}s on the {y}"];
const GOAL_HEAT: [&str; 2] = [
    "put a hot {x} on the {y}",
    "heat a {x} and put it on the {y}",
];

fn fill(template: &str, x: &str, y: &str) -> String {
    template.replace("{x}", x).replace("{y}", y)
}

/// One goal sentence plus one sentence per planner goal, with seeded synonym
/// sampling. Class names appear verbatim.
pub fn generate_instructions(
    task: &TaskSpec,
    goals: &[PlannerGoal],
    rng: &mut Rng,
) -> (String, Vec<String>) {
    let obj = class_name(task.object_class);
    let recep = class_name(task.receptacle_class);
    let goal_text = match task.kind {
        TaskKind::PickPlace => fill(rng.choose(&GOAL_PICK), obj, recep),
        TaskKind::PickTwoPlace => fill(rng.choose(&GOAL_TWO), obj, recep),
        TaskKind::HeatPlace => fill(rng.choose(&GOAL_HEAT), obj, recep),
    };
    let steps = goals
        .iter()
        .map(|g| match g.kind {
            GoalKind::GotoLocation => fill(rng.choose(&GOTO), class_name(g.class), ""),
            GoalKind::PickupObject => fill(rng.choose(&PICKUP), class_name(g.class), ""),
            GoalKind::PutObject => fill(rng.choose(&PUT), obj, class_name(g.class)),
            GoalKind::HeatObject => fill(rng.choose(&HEAT), class_name(g.class), ""),
        })
        .collect();
    (goal_text, steps)
}

/// Full token inventory: reserved markers first (ids 0..per the file
/// contract), then every word any template or class name can produce.
pub fn vocabulary_tokens() -> Vec<String> {
    let mut words = std::collections::BTreeSet::new();
    for t in GOTO
        .iter()
        .chain(&PICKUP)
        .chain(&PUT)
        .chain(&HEAT)
        .chain(&GOAL_PICK)
        .chain(&GOAL_TWO)
        .chain(&GOAL_HEAT)
    {
        for w in t.split_whitespace() {
            // Placeholder slots are covered by class names and their plurals.
            if !w.contains('{') {
                words.insert(w.to_string());
            }
        }
    }
    for c in &CLASSES {
        words.insert(c.name.to_string());
    }
    // Plural surface forms used by the pick-two goal templates.
    for id in pickupable_ids() {
        words.insert(format!("{}s", class_name(id)));
    }
    let mut out = vec![
        PAD.to_string(),
        UNK.to_string(),
        CLS.to_string(),
        SEP.to_string(),
        MASK.to_string(),
    ];
    out.extend(words);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_deterministic_and_reserved_first() {
        let a = vocabulary_tokens();
        let b = vocabulary_tokens();
        assert_eq!(a, b);
        assert_eq!(&a[..5], &[PAD, UNK, CLS, SEP, MASK]);
        assert!(a.contains(&"mugs".to_string()));
        assert!(a.iter().skip(5).all(|w| !w.contains('{')));
    }
}
