//! Panoramic detection rendering.
//!
//! Four virtual views (front, left, back, right) are derived from the agent
//! pose without turning the agent. Box geometry follows a closed-form rule:
//! apparent size is class size over distance, horizontal placement follows
//! the bearing within the view, and vertical placement follows elevation
//! relative to the camera. An optional noise model jitters boxes, drops
//! detections, and confuses class ids.

use crate::classes::{class_info, ClassId, CLASS_COUNT};
use crate::world::{AgentPose, Dir, Room};
use gridhome_tensor::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

pub const VIEW_FRONT: u8 = 0;
pub const VIEW_LEFT: u8 = 1;
pub const VIEW_BACK: u8 = 2;
pub const VIEW_RIGHT: u8 = 3;

const CAMERA_HEIGHT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: ClassId,
    /// Ground-truth instance provenance; bookkeeping only, never a model
    /// input feature.
    pub instance: usize,
    /// (x1, y1, x2, y2) normalized to [0, 1], x1 < x2 and y1 < y2.
    pub bbox: [f64; 4],
    /// Box area over frame area.
    pub rel_area: f64,
    /// Radians from camera pitch.
    pub vert_heading: f64,
    /// Radians from agent facing; directly behind is pi.
    pub horiz_heading: f64,
    pub appearance: Vec<f64>,
    pub view: u8,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PanoramaObservation {
    /// Indexed by view id: front, left, back, right.
    pub views: [Vec<Detection>; 4],
    pub timestep: usize,
}

impl PanoramaObservation {
    pub fn front(&self) -> &[Detection] {
        &self.views[VIEW_FRONT as usize]
    }

    /// All detections in view order front, left, back, right.
    pub fn flatten(&self) -> impl Iterator<Item = &Detection> {
        self.views.iter().flatten()
    }

    pub fn total(&self) -> usize {
        self.views.iter().map(|v| v.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub box_sigma: f64,
    pub drop_rate: f64,
    pub confusion_rate: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            enabled: true,
            box_sigma: 0.02,
            drop_rate: 0.05,
            confusion_rate: 0.02,
        }
    }
}

impl NoiseConfig {
    pub fn off() -> Self {
        NoiseConfig {
            enabled: false,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub d_app: usize,
    pub n_front: usize,
    pub n_side: usize,
    pub range: f64,
    pub noise: NoiseConfig,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            d_app: 8,
            n_front: 12,
            n_side: 6,
            range: 100.0,
            noise: NoiseConfig::default(),
        }
    }
}

fn wrap_pi(a: f64) -> f64 {
    let mut a = a;
    while a > PI {
        a -= 2.0 * PI;
    }
    while a <= -PI {
        a += 2.0 * PI;
    }
    a
}

fn dir_vec(d: Dir) -> (f64, f64) {
    let (x, y) = d.delta();
    (x as f64, y as f64)
}

fn elevation(room: &Room, id: usize) -> f64 {
    let o = &room.objects[id];
    if o.parent.is_some() {
        0.9
    } else if class_info(o.class).pickupable {
        0.15
    } else {
        0.5
    }
}

struct RawGeometry {
    view: u8,
    bbox: [f64; 4],
    vert_heading: f64,
    horiz_heading: f64,
}

/// Noise-free projection of one object, if it falls inside some view.
fn project(room: &Room, pose: &AgentPose, id: usize, range: f64) -> Option<RawGeometry> {
    let o = &room.objects[id];
    let dx = (o.cell.0 - pose.cell.0) as f64;
    let dy = (o.cell.1 - pose.cell.1) as f64;
    let dist = (dx * dx + dy * dy).sqrt();
    if dist < 1e-9 || dist > range {
        return None;
    }
    let elev = elevation(room, id);
    // Pitch gates floor-level versus elevated detections.
    match pose.pitch {
        1 if elev < 0.5 => return None,
        -1 if elev >= 0.5 && dist > 2.0 => return None,
        _ => {}
    }
    let f = dir_vec(pose.facing);
    let r = dir_vec(pose.facing.right());
    let fwd = dx * f.0 + dy * f.1;
    let lat = dx * r.0 + dy * r.1;
    let theta = lat.atan2(fwd);

    let (view, center) = if (-FRAC_PI_4..FRAC_PI_4).contains(&theta) {
        (VIEW_FRONT, 0.0)
    } else if (FRAC_PI_4..3.0 * FRAC_PI_4).contains(&theta) {
        (VIEW_RIGHT, FRAC_PI_2)
    } else if theta >= 3.0 * FRAC_PI_4 || theta < -3.0 * FRAC_PI_4 {
        (VIEW_BACK, PI)
    } else {
        (VIEW_LEFT, -FRAC_PI_2)
    };
    let phi = wrap_pi(theta - center);
    let cx = 0.5 + phi / FRAC_PI_2;
    let cy = 0.5 + (CAMERA_HEIGHT - elev) / dist.max(0.5) * 0.35 + pose.pitch as f64 * 0.25;

    let size = class_info(o.class).size;
    let w = (size.0 / dist).clamp(0.02, 0.9);
    let h = (size.1 / dist).clamp(0.02, 0.9);
    let x1 = (cx - w / 2.0).clamp(0.0, 0.999);
    let x2 = (cx + w / 2.0).clamp(0.001, 1.0);
    let y1 = (cy - h / 2.0).clamp(0.0, 0.999);
    let y2 = (cy + h / 2.0).clamp(0.001, 1.0);
    debug_assert!(x1 < x2 && y1 < y2);

    Some(RawGeometry {
        view,
        bbox: [x1, y1, x2, y2],
        vert_heading: (elev - CAMERA_HEIGHT).atan2(dist) - pose.pitch as f64 * (PI / 6.0),
        horiz_heading: theta,
    })
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn splitmix_normal(state: &mut u64) -> f64 {
    let u1 = ((splitmix(state) >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
    let u2 = (splitmix(state) >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Stand-in for frozen visual features: a fixed per-class embedding plus a
/// per-instance Gaussian jitter, both pure functions of their seeds.
pub fn appearance_vector(class: ClassId, instance: usize, d_app: usize) -> Vec<f64> {
    let mut class_state = 0xa11ce5_u64 ^ (class as u64).wrapping_mul(0x2545_f491_4f6c_dd1d);
    let mut inst_state = 0xb0b5_u64
        ^ (class as u64).wrapping_mul(0x9e37_79b9)
        ^ (instance as u64).wrapping_mul(0x85eb_ca6b);
    (0..d_app)
        .map(|_| splitmix_normal(&mut class_state) + 0.1 * splitmix_normal(&mut inst_state))
        .collect()
}

/// Render the four-view panorama. Detector noise draws from `rng`, so the
/// caller controls the stream; with noise disabled the output is a pure
/// function of (room, pose, cfg).
pub fn render_panorama(
    room: &Room,
    pose: &AgentPose,
    cfg: &RenderConfig,
    rng: &mut Rng,
    timestep: usize,
) -> PanoramaObservation {
    let mut views: [Vec<Detection>; 4] = Default::default();
    for o in &room.objects {
        if !room.detectable(o.id) {
            continue;
        }
        let Some(raw) = project(room, pose, o.id, cfg.range) else {
            continue;
        };
        let noise = &cfg.noise;
        if noise.enabled && rng.bernoulli(noise.drop_rate) {
            continue;
        }
        let mut bbox = raw.bbox;
        let mut class = o.class;
        let mut confidence = 1.0;
        if noise.enabled {
            for b in bbox.iter_mut() {
                *b += rng.normal_scaled(0.0, noise.box_sigma);
            }
            if bbox[0] > bbox[2] {
                bbox.swap(0, 2);
            }
            if bbox[1] > bbox[3] {
                bbox.swap(1, 3);
            }
            bbox[0] = bbox[0].clamp(0.0, 0.998);
            bbox[1] = bbox[1].clamp(0.0, 0.998);
            bbox[2] = bbox[2].clamp(bbox[0] + 0.001, 1.0);
            bbox[3] = bbox[3].clamp(bbox[1] + 0.001, 1.0);
            if rng.bernoulli(noise.confusion_rate) {
                class = (class + 1 + rng.index(CLASS_COUNT - 1)) % CLASS_COUNT;
            }
            confidence = (1.0 - rng.normal_scaled(0.0, 0.15).abs()).clamp(0.05, 1.0);
        }
        views[raw.view as usize].push(Detection {
            class,
            instance: o.id,
            bbox,
            rel_area: (bbox[2] - bbox[0]) * (bbox[3] - bbox[1]),
            vert_heading: raw.vert_heading,
            horiz_heading: raw.horiz_heading,
            appearance: appearance_vector(o.class, o.id, cfg.d_app),
            view: raw.view,
            confidence,
        });
    }
    // Caps: keep the most confident detections; ties break by class id then
    // leftmost box edge.
    for (vi, view) in views.iter_mut().enumerate() {
        view.sort_by(|a, b| {
            b.confidence
                .partial_cmp(&a.confidence)
                .unwrap()
                .then(a.class.cmp(&b.class))
                .then(a.bbox[0].partial_cmp(&b.bbox[0]).unwrap())
        });
        let cap = if vi == VIEW_FRONT as usize {
            cfg.n_front
        } else {
            cfg.n_side
        };
        view.truncate(cap);
    }
    PanoramaObservation { views, timestep }
}

/// Noise-free box of a specific instance in the current pose, with its view.
/// This is the gold geometry used for IoU-based label matching.
pub fn gold_box(room: &Room, pose: &AgentPose, instance: usize, range: f64) -> Option<(u8, [f64; 4])> {
    if !room.detectable(instance) {
        return None;
    }
    project(room, pose, instance, range).map(|raw| (raw.view, raw.bbox))
}
