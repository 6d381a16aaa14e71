//! Scene sampling: object, hand placement for a target occlusion ratio, and
//! the five question-answer pairs.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::render::{render_scene, view_rotation, CoarseDepth, SceneRender};
use super::shapes::{ObjectClass, ObjectParams, Occluder, Pose, Primitive};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};

pub const INSTRUCTIONS: [&str; 5] = [
    "What's the object in the hand?",
    "Is the object in the hand round?",
    "Is the object in the hand long?",
    "Is the object in the hand thin?",
    "Describe the object in the hand.",
];

/// Objects with a bounding radius below this are described as small.
pub const SMALL_RADIUS: f64 = 0.475;

const MAX_PLACEMENT_ATTEMPTS: usize = 100;
const PLACEMENT_TOLERANCE: f64 = 0.005;
const COARSE_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Distribution of the per-scene occlusion target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OcclusionTarget {
    Beta { a: f64, b: f64 },
    Fixed { ratio: f64 },
}

impl Default for OcclusionTarget {
    fn default() -> Self {
        OcclusionTarget::Beta { a: 2.0, b: 6.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub num_views: usize,
    pub classes: Vec<ObjectClass>,
    pub occlusion: OcclusionTarget,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_views: 2,
            classes: ObjectClass::ALL.to_vec(),
            occlusion: OcclusionTarget::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_views == 0 {
            return Err(Error::domain("scene spec needs at least one view"));
        }
        if self.classes.is_empty() {
            return Err(Error::domain("scene spec has no object classes"));
        }
        match self.occlusion {
            OcclusionTarget::Beta { a, b } if a <= 0.0 || b <= 0.0 => {
                Err(Error::domain(format!("invalid beta parameters ({a}, {b})")))
            }
            OcclusionTarget::Fixed { ratio } if !(0.0..=1.0).contains(&ratio) => {
                Err(Error::domain(format!("occlusion target {ratio} outside [0,1]")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub instruction: String,
    pub answer: String,
}

/// One rendered view of one object instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub instance_id: String,
    pub split: Split,
    pub object_class: ObjectClass,
    pub object: ObjectParams,
    pub occluder: Occluder,
    pub view_id: usize,
    pub num_views: usize,
    pub occlusion_ratio: f64,
    pub target_occlusion: f64,
    /// Set when the target could not be reached.
    pub placement_flagged: bool,
    pub image: String,
    pub clean_image: String,
    pub mask_image: String,
    pub qa: Vec<QaPair>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attributes {
    pub round: bool,
    pub long: bool,
    pub thin: bool,
}

pub fn attributes(p: &Primitive) -> Attributes {
    match *p {
        Primitive::Sphere { .. } => Attributes {
            round: true,
            long: false,
            thin: false,
        },
        Primitive::Cylinder {
            radius,
            half_height,
        } => Attributes {
            round: false,
            long: true,
            thin: radius / (2.0 * half_height) < 0.25,
        },
        Primitive::Box { half_extents } => {
            let max = half_extents.iter().cloned().fold(f64::MIN, f64::max);
            let min = half_extents.iter().cloned().fold(f64::MAX, f64::min);
            Attributes {
                round: false,
                long: max / min >= 2.0,
                thin: min / max < 0.25,
            }
        }
        Primitive::Torus { .. } => Attributes {
            round: true,
            long: false,
            thin: true,
        },
        Primitive::Capsule {
            radius,
            half_length,
        } => Attributes {
            round: false,
            long: true,
            thin: radius / (2.0 * (half_length + radius)) < 0.25,
        },
    }
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

pub fn describe(obj: &ObjectParams) -> String {
    let class = obj.class();
    let size = if obj.bounding_radius() < SMALL_RADIUS {
        "small"
    } else {
        "large"
    };
    format!("a {size} {} {}", class.color_name(), class.name())
}

pub fn instruction_set(obj: &ObjectParams) -> Vec<QaPair> {
    let a = attributes(&obj.primitive);
    let answers = [
        obj.class().name().to_string(),
        yes_no(a.round),
        yes_no(a.long),
        yes_no(a.thin),
        describe(obj),
    ];
    INSTRUCTIONS
        .iter()
        .zip(answers)
        .map(|(i, answer)| QaPair {
            instruction: i.to_string(),
            answer,
        })
        .collect()
}

fn sample_primitive<R: Rng>(class: ObjectClass, s: f64, rng: &mut R) -> Primitive {
    match class {
        ObjectClass::Sphere => Primitive::Sphere { radius: s },
        ObjectClass::Cylinder => {
            let aspect: f64 = rng.random_range(0.12..0.6);
            let half_height = s / (1.0 + 4.0 * aspect * aspect).sqrt();
            Primitive::Cylinder {
                radius: 2.0 * aspect * half_height,
                half_height,
            }
        }
        ObjectClass::Box => {
            let mut e = [
                1.0,
                rng.random_range(0.15..1.0),
                rng.random_range(0.15..1.0),
            ];
            let k = s / geom::norm(e);
            e.iter_mut().for_each(|v| *v *= k);
            let shift = rng.random_range(0..3);
            e.rotate_left(shift);
            Primitive::Box { half_extents: e }
        }
        ObjectClass::Torus => {
            let q: f64 = rng.random_range(0.2..0.45);
            let major = s / (1.0 + q);
            Primitive::Torus {
                major,
                minor: q * major,
            }
        }
        ObjectClass::Capsule => {
            let q: f64 = rng.random_range(0.1..0.4);
            // r / (2 (L + r)) = q with L + r = s
            let radius = 2.0 * q * s;
            Primitive::Capsule {
                radius,
                half_length: s - radius,
            }
        }
    }
}

pub fn sample_object<R: Rng>(class: ObjectClass, rng: &mut R) -> ObjectParams {
    let s = rng.random_range(0.35..0.6);
    let primitive = sample_primitive(class, s, rng);
    let off_r = rng.random_range(0.0..0.15);
    let off_a = rng.random_range(0.0..std::f64::consts::TAU);
    ObjectParams {
        primitive,
        pose: Pose {
            center: [off_r * off_a.cos(), off_r * off_a.sin(), 0.0],
            roll: rng.random_range(-0.6..0.6),
            tilt: rng.random_range(-0.3..0.3),
        },
    }
}

/// Mean coarse occlusion over all views for a given hand.
fn coarse_ratio(depths: &[CoarseDepth], occ: &Occluder, num_views: usize) -> f64 {
    let total: f64 = depths
        .iter()
        .enumerate()
        .map(|(v, d)| d.occlusion_ratio(occ, view_rotation(v, num_views)))
        .sum();
    total / depths.len() as f64
}

pub struct Placement {
    pub occluder: Occluder,
    pub flagged: bool,
}

/// Slides a hand laterally in front of the object until the mean coarse
/// occlusion over the views matches `target`.
pub fn place_occluder<R: Rng>(object: &ObjectParams, target: f64, num_views: usize, rng: &mut R) -> Placement {
    let obj_r = object.bounding_radius();
    let size = obj_r * rng.random_range(0.85..1.15);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let curls: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..0.8)).collect();
    let finger_dir = phi + std::f64::consts::PI + rng.random_range(-0.4..0.4);
    let c = object.pose.center;
    let base = Occluder::articulated([0.0; 3], size, finger_dir, &curls);
    let (_, occ_r) = base.bounding_sphere();
    let dz = obj_r + 0.55 * size + 0.05;
    let dir: Vec3 = [phi.cos(), phi.sin(), 0.0];
    let at = |d: f64| base.translated(geom::add(c, [d * dir[0], d * dir[1], dz]));

    let depths: Vec<CoarseDepth> = (0..num_views)
        .map(|v| CoarseDepth::new(object, view_rotation(v, num_views), COARSE_STRIDE))
        .collect();
    let d_far = 2.0 * (obj_r + occ_r) + dz;
    if target <= 0.0 {
        return Placement {
            occluder: at(d_far),
            flagged: coarse_ratio(&depths, &at(d_far), num_views) > 0.0,
        };
    }
    let r0 = coarse_ratio(&depths, &at(0.0), num_views);
    if r0 < target {
        return Placement {
            occluder: at(0.0),
            flagged: true,
        };
    }
    let (mut lo, mut hi) = (0.0, d_far);
    let mut best = (0.0, (r0 - target).abs());
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let mid = 0.5 * (lo + hi);
        let r = coarse_ratio(&depths, &at(mid), num_views);
        if (r - target).abs() < best.1 {
            best = (mid, (r - target).abs());
        }
        if best.1 < PLACEMENT_TOLERANCE || hi - lo < 1e-6 {
            break;
        }
        if r > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Placement {
        occluder: at(best.0),
        flagged: best.1 > 0.05,
    }
}

/// Sampled object instance before rendering.
#[derive(Clone, Debug)]
pub struct Instance {
    pub object: ObjectParams,
    pub occluder: Occluder,
    pub target: f64,
    pub flagged: bool,
}

pub fn sample_instance(seed: u64, spec: &SceneSpec) -> Result<Instance> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class = *spec.classes.choose(&mut rng).expect("validated non-empty");
    let object = sample_object(class, &mut rng);
    let target = match spec.occlusion {
        OcclusionTarget::Beta { a, b } => Beta::new(a, b)
            .map_err(|e| Error::domain(e.to_string()))?
            .sample(&mut rng),
        OcclusionTarget::Fixed { ratio } => ratio,
    };
    let placement = place_occluder(&object, target, spec.num_views, &mut rng);
    Ok(Instance {
        object,
        occluder: placement.occluder,
        target,
        flagged: placement.flagged,
    })
}

/// Relative paths of the three images of a scene.
pub fn image_paths(scene_id: &str) -> (String, String, String) {
    (
        format!("images/{scene_id}.png"),
        format!("images/{scene_id}_clean.png"),
        format!("masks/{scene_id}.png"),
    )
}

/// Samples an instance and renders every view. Deterministic in `seed`.
pub fn generate_scene(
    seed: u64,
    instance_id: &str,
    split: Split,
    spec: &SceneSpec,
) -> Result<Vec<(SceneRecord, SceneRender)>> {
    let inst = sample_instance(seed, spec)?;
    let qa = instruction_set(&inst.object);
    let mut out = Vec::with_capacity(spec.num_views);
    for view_id in 0..spec.num_views {
        let render = render_scene(
            &inst.object,
            Some(&inst.occluder),
            view_rotation(view_id, spec.num_views),
        );
        let scene_id = format!("{instance_id}-v{view_id}");
        let (image, clean_image, mask_image) = image_paths(&scene_id);
        let record = SceneRecord {
            scene_id,
            instance_id: instance_id.to_string(),
            split,
            object_class: inst.object.class(),
            object: inst.object,
            occluder: inst.occluder.clone(),
            view_id,
            num_views: spec.num_views,
            occlusion_ratio: render.occlusion_ratio(),
            target_occlusion: inst.target,
            placement_flagged: inst.flagged,
            image,
            clean_image,
            mask_image,
            qa: qa.clone(),
            seed,
        };
        out.push((record, render));
    }
    Ok(out)
}
