//! Environment semantics, rendering geometry, planner optimality, and
//! episode generation checks.

use gridhome_sim::*;
use gridhome_tensor::Rng;
use std::collections::{HashMap, HashSet, VecDeque};
use std::f64::consts::PI;

fn obj(id: usize, class: &str, cell: (i32, i32), parent: Option<usize>) -> ObjectInst {
    ObjectInst {
        id,
        class: classes::class_by_name(class).unwrap(),
        cell,
        parent,
        open: false,
        toggled: false,
        sliced: false,
        hot: false,
        held: false,
    }
}

fn small_room() -> (Room, AgentPose) {
    let room = Room {
        width: 6,
        height: 6,
        objects: vec![
            obj(0, "table", (4, 2), None),
            obj(1, "mug", (4, 2), Some(0)),
            obj(2, "microwave", (1, 4), None),
            obj(3, "apple", (2, 2), None),
        ],
    };
    let pose = AgentPose {
        cell: (2, 4),
        facing: Dir::North,
        pitch: 0,
    };
    (room, pose)
}

#[test]
fn blocked_move_fails_without_relocation() {
    let (room, _) = small_room();
    let pose = AgentPose {
        cell: (0, 0),
        facing: Dir::North,
        pitch: 0,
    };
    let mut env = Env::new(room, pose);
    let cfg = RenderConfig::default();
    let mut rng = Rng::new(0);
    let r = env.step(Action::MoveAhead, None, &cfg, &mut rng);
    assert!(!r.api_success);
    assert_eq!(env.pose.cell, (0, 0));
    assert_eq!(r.failures, 1);
    assert!(!r.terminated);
}

#[test]
fn pickup_preconditions() {
    let (room, _) = small_room();
    // Facing the table cell from the west.
    let pose = AgentPose {
        cell: (3, 2),
        facing: Dir::East,
        pitch: 0,
    };
    let mut env = Env::new(room, pose);
    let cfg = RenderConfig::default();
    let mut rng = Rng::new(0);
    // Table is not pickupable.
    assert!(!env.step(Action::Pickup, Some(0), &cfg, &mut rng).api_success);
    // Mug on the table is.
    assert!(env.step(Action::Pickup, Some(1), &cfg, &mut rng).api_success);
    assert!(env.room.objects[1].held);
    // Hand already full.
    assert!(!env.step(Action::Pickup, Some(0), &cfg, &mut rng).api_success);
}

#[test]
fn concealed_objects_are_not_detectable_until_opened() {
    let mut room = Room {
        width: 6,
        height: 6,
        objects: vec![obj(0, "fridge", (3, 3), None), obj(1, "egg", (3, 3), Some(0))],
    };
    let pose = AgentPose {
        cell: (3, 4),
        facing: Dir::North,
        pitch: 0,
    };
    assert!(!room.detectable(1));
    let cfg = RenderConfig {
        noise: NoiseConfig::off(),
        ..Default::default()
    };
    let mut rng = Rng::new(0);
    let pano = render_panorama(&room, &pose, &cfg, &mut rng, 0);
    assert!(pano.flatten().all(|d| d.instance != 1));

    let mut env = Env::new(room.clone(), pose);
    // Pickup through the closed door fails; open first, then it works.
    assert!(!env.step(Action::Pickup, Some(1), &cfg, &mut rng).api_success);
    assert!(env.step(Action::Open, Some(0), &cfg, &mut rng).api_success);
    assert!(env.step(Action::Pickup, Some(1), &cfg, &mut rng).api_success);

    room.objects[0].open = true;
    assert!(room.detectable(1));
}

#[test]
fn ten_failures_terminate() {
    let (room, _) = small_room();
    let pose = AgentPose {
        cell: (0, 0),
        facing: Dir::North,
        pitch: 0,
    };
    let mut env = Env::new(room, pose);
    let cfg = RenderConfig::default();
    let mut rng = Rng::new(0);
    for i in 1..=10 {
        let r = env.step(Action::MoveAhead, None, &cfg, &mut rng);
        assert!(!r.api_success);
        assert_eq!(r.failures, i);
        assert_eq!(r.terminated, i == 10, "termination fires exactly at ten");
    }
}

#[test]
fn microwave_heats_contents_only_when_closed() {
    let room = Room {
        width: 6,
        height: 6,
        objects: vec![obj(0, "microwave", (2, 2), None), obj(1, "potato", (1, 1), None)],
    };
    let pose = AgentPose {
        cell: (2, 3),
        facing: Dir::North,
        pitch: 0,
    };
    let mut env = Env::new(room, pose);
    // Scripted: grab potato is elsewhere, so fake by direct state for this check.
    env.room.object_mut(1).held = true;
    env.room.object_mut(1).cell = env.pose.cell;
    assert!(env.apply_action(Action::Open, Some(0)));
    assert!(env.apply_action(Action::Put, Some(0)));
    // Running an open microwave is refused.
    assert!(!env.apply_action(Action::ToggleOn, Some(0)));
    assert!(env.apply_action(Action::Close, Some(0)));
    assert!(env.apply_action(Action::ToggleOn, Some(0)));
    assert!(env.room.objects[1].hot);
}

#[test]
fn panorama_heading_geometry() {
    let room = Room {
        width: 8,
        height: 8,
        objects: vec![obj(0, "table", (4, 3), None), obj(1, "shelf", (4, 5), None)],
    };
    // Facing north: table directly ahead at distance 1, shelf directly behind.
    let pose = AgentPose {
        cell: (4, 4),
        facing: Dir::North,
        pitch: 0,
    };
    let cfg = RenderConfig {
        noise: NoiseConfig::off(),
        ..Default::default()
    };
    let mut rng = Rng::new(0);
    let pano = render_panorama(&room, &pose, &cfg, &mut rng, 0);
    let front: Vec<_> = pano.front().iter().collect();
    assert_eq!(front.len(), 1);
    assert_eq!(front[0].instance, 0);
    assert!(front[0].horiz_heading.abs() < 1e-12);

    let back = &pano.views[VIEW_BACK as usize];
    assert_eq!(back.len(), 1);
    assert_eq!(back[0].instance, 1);
    assert!((back[0].horiz_heading.abs() - PI).abs() < 1e-12);
}

#[test]
fn rendered_area_matches_closed_form_catalog() {
    // Catalog of (class, distance) pairs placed straight ahead and far from
    // frame edges; expected area is (w/d) * (h/d) with both clamped to
    // [0.02, 0.9].
    let catalog = [("table", 2.0), ("mug", 1.0), ("fridge", 3.0), ("apple", 2.0)];
    for (name, dist) in catalog {
        let class = classes::class_by_name(name).unwrap();
        let room = Room {
            width: 12,
            height: 12,
            objects: vec![obj(0, name, (5, 5 - dist as i32), None)],
        };
        let pose = AgentPose {
            cell: (5, 5),
            facing: Dir::North,
            pitch: 0,
        };
        let cfg = RenderConfig {
            noise: NoiseConfig::off(),
            ..Default::default()
        };
        let mut rng = Rng::new(0);
        let pano = render_panorama(&room, &pose, &cfg, &mut rng, 0);
        let det = pano.front().first().expect("object ahead must render");
        let size = classes::class_info(class).size;
        let expect = (size.0 / dist).clamp(0.02, 0.9) * (size.1 / dist).clamp(0.02, 0.9);
        assert!(
            (det.rel_area - expect).abs() < 1e-9,
            "{name} at {dist}: got {}, want {expect}",
            det.rel_area
        );
    }
}

#[test]
fn panorama_completeness_noise_off() {
    // Every detectable object appears in exactly one view at level pitch.
    let ep = build_episode(
        EpisodeSeed { layout: 5, variation: 9 },
        &GenConfig::default(),
        None,
    )
    .unwrap();
    let room = &ep.initial_room;
    let cfg = RenderConfig {
        noise: NoiseConfig::off(),
        n_front: 64,
        n_side: 64,
        ..Default::default()
    };
    let mut rng = Rng::new(0);
    let pano = render_panorama(room, &ep.initial_pose, &cfg, &mut rng, 0);
    let mut seen = HashMap::new();
    for d in pano.flatten() {
        *seen.entry(d.instance).or_insert(0usize) += 1;
    }
    for o in &room.objects {
        let expected = usize::from(room.detectable(o.id) && o.cell != ep.initial_pose.cell);
        assert_eq!(
            seen.get(&o.id).copied().unwrap_or(0),
            expected,
            "object {} ({})",
            o.id,
            classes::class_name(o.class)
        );
    }
}

#[test]
fn detection_caps_respected() {
    let ep = build_episode(
        EpisodeSeed { layout: 6, variation: 2 },
        &GenConfig::default(),
        None,
    )
    .unwrap();
    let cfg = RenderConfig {
        n_front: 2,
        n_side: 1,
        ..Default::default()
    };
    let mut rng = Rng::new(3);
    let pano = render_panorama(&ep.initial_room, &ep.initial_pose, &cfg, &mut rng, 0);
    assert!(pano.front().len() <= 2);
    for v in 1..4 {
        assert!(pano.views[v].len() <= 1);
    }
}

#[test]
fn same_seed_identical_episode_serialization() {
    let seed = EpisodeSeed { layout: 11, variation: 7 };
    let cfg = GenConfig::default();
    let a = build_episode(seed, &cfg, None).unwrap();
    let b = build_episode(seed, &cfg, None).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn expert_replay_succeeds_and_satisfies_goals() {
    for layout in 0..12u64 {
        let seed = EpisodeSeed { layout, variation: layout * 31 + 1 };
        let ep = build_episode(seed, &GenConfig::default(), None).unwrap();
        let env = replay_expert(&ep).expect("expert replay");
        let check = check_goal_conditions(&env.room, &ep.task);
        assert!(check.success, "layout {layout}: {:?}", ep.task);
        assert_eq!(check.satisfied, check.total);
    }
}

#[test]
fn episode_spans_partition_trajectory() {
    let ep = build_episode(
        EpisodeSeed { layout: 3, variation: 4 },
        &GenConfig::default(),
        None,
    )
    .unwrap();
    assert_eq!(ep.instructions.len(), ep.planner_goals.len());
    assert_eq!(ep.instruction_spans.len(), ep.instructions.len());
    let mut cursor = 0;
    for (i, &(s, e)) in ep.instruction_spans.iter().enumerate() {
        assert_eq!(s, cursor, "span {i} starts where the previous ended");
        assert!(e > s, "span {i} is non-empty");
        cursor = e;
        // Last step of each span carries the last_of_goal flag.
        assert!(ep.trajectory[e - 1].last_of_goal);
        for t in s..e - 1 {
            assert!(!ep.trajectory[t].last_of_goal);
        }
    }
    assert_eq!(cursor, ep.trajectory.len());
    // Manipulation steps always carry a gold target.
    for t in &ep.trajectory {
        if t.action.is_manipulation() {
            assert!(t.target.is_some());
        }
    }
}

#[test]
fn pick_and_place_has_expected_goal_structure() {
    let mut found = false;
    for v in 0..40u64 {
        let ep = build_episode(
            EpisodeSeed { layout: 20, variation: v },
            &GenConfig::default(),
            None,
        )
        .unwrap();
        if ep.task.kind == TaskKind::PickPlace {
            found = true;
            assert!(ep.planner_goals.len() >= 2);
            assert_eq!(ep.planner_goals[0].kind, GoalKind::GotoLocation);
            assert!(ep
                .planner_goals
                .iter()
                .any(|g| g.kind == GoalKind::PickupObject));
            assert!(ep.planner_goals.iter().any(|g| g.kind == GoalKind::PutObject));
            break;
        }
    }
    assert!(found, "no pick&place sampled in 40 variations");
}

#[test]
fn heat_episode_contains_microwave_motif() {
    let mut found = false;
    for layout in 0..60u64 {
        let ep = build_episode(
            EpisodeSeed { layout, variation: layout + 100 },
            &GenConfig::default(),
            None,
        );
        let Ok(ep) = ep else { continue };
        if ep.task.kind != TaskKind::HeatPlace {
            continue;
        }
        found = true;
        let motif = [
            Action::Open,
            Action::Put,
            Action::Close,
            Action::ToggleOn,
            Action::ToggleOff,
            Action::Open,
            Action::Pickup,
        ];
        let actions: Vec<Action> = ep.trajectory.iter().map(|t| t.action).collect();
        let mut mi = 0;
        for a in actions {
            if mi < motif.len() && a == motif[mi] {
                mi += 1;
            }
        }
        assert_eq!(mi, motif.len(), "microwave motif missing");
        break;
    }
    assert!(found, "no heat&place episode in 60 layouts");
}

#[test]
fn goal_conditions_pick_two_partial_credit() {
    let mut room = Room {
        width: 6,
        height: 6,
        objects: vec![
            obj(0, "table", (1, 1), None),
            obj(1, "mug", (3, 3), None),
            obj(2, "mug", (4, 4), None),
        ],
    };
    let task = TaskSpec {
        kind: TaskKind::PickTwoPlace,
        object_class: classes::class_by_name("mug").unwrap(),
        receptacle_class: classes::class_by_name("table").unwrap(),
    };
    let c0 = check_goal_conditions(&room, &task);
    assert_eq!((c0.satisfied, c0.total, c0.success), (0, 2, false));

    room.objects[1].parent = Some(0);
    room.objects[1].cell = (1, 1);
    let c1 = check_goal_conditions(&room, &task);
    assert_eq!((c1.satisfied, c1.total, c1.success), (1, 2, false));
    assert!((c1.satisfied as f64 / c1.total as f64 - 0.5).abs() < 1e-12);

    room.objects[2].parent = Some(0);
    room.objects[2].cell = (1, 1);
    let c2 = check_goal_conditions(&room, &task);
    assert_eq!((c2.satisfied, c2.total, c2.success), (2, 2, true));
}

/// Independent BFS over the full (cell, facing) graph, no planner code.
fn oracle_distance(room: &Room, start: (i32, i32), facing: Dir, target_cell: (i32, i32)) -> Option<usize> {
    let mut dist = HashMap::new();
    let mut q = VecDeque::new();
    dist.insert((start, facing), 0usize);
    q.push_back((start, facing));
    while let Some((cell, f)) = q.pop_front() {
        let d = dist[&(cell, f)];
        let (dx, dy) = f.delta();
        if (cell.0 + dx, cell.1 + dy) == target_cell {
            return Some(d);
        }
        let mut nexts = vec![(cell, f.left()), (cell, f.right())];
        let ahead = (cell.0 + dx, cell.1 + dy);
        if !room.blocked(ahead) {
            nexts.push((ahead, f));
        }
        for n in nexts {
            if !dist.contains_key(&n) {
                dist.insert(n, d + 1);
                q.push_back(n);
            }
        }
    }
    None
}

#[test]
fn expert_navigation_is_shortest_path() {
    for layout in 0..10u64 {
        let ep = build_episode(
            EpisodeSeed { layout: layout + 50, variation: 1 },
            &GenConfig::default(),
            None,
        )
        .unwrap();
        // Walk the trajectory, checking each GotoLocation span against the
        // oracle distance measured from the span's starting state.
        let mut env = Env::new(ep.initial_room.clone(), ep.initial_pose);
        for (i, &(s, e)) in ep.instruction_spans.iter().enumerate() {
            let goal = &ep.planner_goals[ep.instruction_goal[i]];
            if goal.kind == GoalKind::GotoLocation {
                let target_cell = env.room.objects[goal.instance].cell;
                let oracle = oracle_distance(&env.room, env.pose.cell, env.pose.facing, target_cell)
                    .expect("oracle path");
                let span_len = e - s;
                if oracle == 0 {
                    assert_eq!(span_len, 2, "wiggle for already-facing goals");
                } else {
                    assert_eq!(span_len, oracle, "span {i} of layout {layout}");
                }
            }
            for t in s..e {
                assert!(env.apply_action(ep.trajectory[t].action, ep.trajectory[t].target));
            }
        }
    }
}

#[test]
fn episode_jsonl_round_trip() {
    let dir = std::env::temp_dir().join(format!("gh_ep_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("episodes.jsonl");
    let eps: Vec<Episode> = (0..3)
        .map(|i| {
            build_episode(
                EpisodeSeed { layout: i, variation: i * 7 },
                &GenConfig::default(),
                None,
            )
            .unwrap()
        })
        .collect();
    write_episodes(&path, &eps).unwrap();
    let back = read_episodes(&path).unwrap();
    assert_eq!(eps, back);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn instructions_mention_task_classes() {
    let ep = build_episode(
        EpisodeSeed { layout: 40, variation: 3 },
        &GenConfig::default(),
        None,
    )
    .unwrap();
    let obj = classes::class_name(ep.task.object_class);
    let recep = classes::class_name(ep.task.receptacle_class);
    assert!(ep.goal_text.contains(obj), "{}", ep.goal_text);
    assert!(ep.goal_text.contains(recep), "{}", ep.goal_text);
    // Every instruction token is in the vocabulary.
    let vocab: HashSet<String> = language::vocabulary_tokens().into_iter().collect();
    for sentence in std::iter::once(&ep.goal_text).chain(&ep.instructions) {
        for w in sentence.split_whitespace() {
            assert!(vocab.contains(w), "token {w} missing from vocabulary");
        }
    }
}

#[test]
fn appearance_vectors_are_stable_and_class_dominated() {
    let a1 = appearance_vector(3, 7, 8);
    let a2 = appearance_vector(3, 7, 8);
    assert_eq!(a1, a2);
    let b = appearance_vector(3, 9, 8);
    let c = appearance_vector(4, 7, 8);
    let d2 = |x: &[f64], y: &[f64]| -> f64 {
        x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    assert!(d2(&a1, &b) < d2(&a1, &c), "same class should be closer");
}
