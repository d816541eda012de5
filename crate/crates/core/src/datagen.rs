//! Procedural articulated body: labeled pose trajectories, forward
//! kinematics, tube meshing, and stratified dataset assembly.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::augment::{AugmentError, BodyPartition, PoseCorpus, PoseRecord, PoseSequence};
use crate::mesh::{DatasetSplit, ManifestRecord, MeshError, MeshFrame, MeshSequence, Split};
use crate::seed;

pub const JOINT_COUNT: usize = 15;
/// Vertices per tube cross-section.
pub const RING_RESOLUTION: usize = 8;
/// Cross-sections per limb tube.
pub const RINGS_PER_LIMB: usize = 4;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("unknown action class {0:?}")]
    UnknownClass(String),
    #[error("limb ending at joint {joint} has non-positive {what} {value}")]
    DegenerateLimb { joint: usize, what: &'static str, value: f64 },
    #[error("{0}")]
    Argument(String),
    #[error(transparent)]
    Pose(#[from] AugmentError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone, Copy)]
struct JointDef {
    name: &'static str,
    parent: Option<usize>,
    /// Rest direction of the limb from the parent to this joint.
    direction: [f64; 3],
    length: f64,
    radius: f64,
}

const fn j(name: &'static str, parent: usize, direction: [f64; 3], length: f64, radius: f64) -> JointDef {
    JointDef {
        name,
        parent: Some(parent),
        direction,
        length,
        radius,
    }
}

// y up, +x to the body's left, -z forward.
const JOINTS: [JointDef; JOINT_COUNT] = [
    JointDef {
        name: "pelvis",
        parent: None,
        direction: [0.0, 0.0, 0.0],
        length: 0.0,
        radius: 0.0,
    },
    j("chest", 0, [0.0, 1.0, 0.0], 0.45, 0.12),
    j("head", 1, [0.0, 1.0, 0.0], 0.30, 0.09),
    j("hip_left", 0, [1.0, 0.0, 0.0], 0.10, 0.07),
    j("knee_left", 3, [0.0, -1.0, 0.0], 0.45, 0.06),
    j("ankle_left", 4, [0.0, -1.0, 0.0], 0.42, 0.05),
    j("hip_right", 0, [-1.0, 0.0, 0.0], 0.10, 0.07),
    j("knee_right", 6, [0.0, -1.0, 0.0], 0.45, 0.06),
    j("ankle_right", 7, [0.0, -1.0, 0.0], 0.42, 0.05),
    j("shoulder_left", 1, [1.0, 0.0, 0.0], 0.18, 0.05),
    j("elbow_left", 9, [0.0, -1.0, 0.0], 0.30, 0.04),
    j("wrist_left", 10, [0.0, -1.0, 0.0], 0.26, 0.035),
    j("shoulder_right", 1, [-1.0, 0.0, 0.0], 0.18, 0.05),
    j("elbow_right", 12, [0.0, -1.0, 0.0], 0.30, 0.04),
    j("wrist_right", 13, [0.0, -1.0, 0.0], 0.26, 0.035),
];

/// The default body partition: bone, leg_left, leg_right, arm_left, arm_right.
pub fn default_partition() -> BodyPartition {
    BodyPartition::new(
        [
            vec![0, 1, 2],
            vec![3, 4, 5],
            vec![6, 7, 8],
            vec![9, 10, 11],
            vec![12, 13, 14],
        ],
        JOINT_COUNT,
    )
    .expect("static partition is valid")
}

/// A 15-joint tree rooted at the pelvis. `shape_params` holds the 14 limb
/// lengths followed by the 14 limb radii, indexed by the limb's end joint.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicBody {
    pub shape_params: Vec<f64>,
}

impl Default for KinematicBody {
    fn default() -> Self {
        let lengths = JOINTS[1..].iter().map(|d| d.length);
        let radii = JOINTS[1..].iter().map(|d| d.radius);
        Self {
            shape_params: lengths.chain(radii).collect(),
        }
    }
}

impl KinematicBody {
    pub fn from_shape_params(shape_params: Vec<f64>) -> Result<Self, DatagenError> {
        if shape_params.len() != 2 * (JOINT_COUNT - 1) {
            return Err(DatagenError::Argument(format!(
                "body needs {} shape parameters, got {}",
                2 * (JOINT_COUNT - 1),
                shape_params.len()
            )));
        }
        let body = Self { shape_params };
        for joint in 1..JOINT_COUNT {
            for (what, value) in [("length", body.length(joint)), ("radius", body.radius(joint))] {
                if !(value > 0.0) {
                    return Err(DatagenError::DegenerateLimb { joint, what, value });
                }
            }
        }
        Ok(body)
    }

    /// Default proportions scaled per limb by a seeded factor in [0.9, 1.1].
    pub fn jittered<R: Rng>(rng: &mut R) -> Self {
        let mut body = Self::default();
        for v in &mut body.shape_params {
            *v *= rng.gen_range(0.9..1.1);
        }
        body
    }

    pub fn joint_count(&self) -> usize {
        JOINT_COUNT
    }

    pub fn joint_name(joint: usize) -> &'static str {
        JOINTS[joint].name
    }

    pub fn parent(joint: usize) -> Option<usize> {
        JOINTS[joint].parent
    }

    pub fn length(&self, joint: usize) -> f64 {
        self.shape_params[joint - 1]
    }

    pub fn radius(&self, joint: usize) -> f64 {
        self.shape_params[JOINT_COUNT - 1 + joint - 1]
    }

    pub fn set_length(&mut self, joint: usize, value: f64) {
        self.shape_params[joint - 1] = value;
    }

    /// Joints in the subtree rooted at `joint`, including itself.
    pub fn descendants(joint: usize) -> Vec<usize> {
        let mut out = vec![joint];
        // parents precede children in the joint table
        for c in joint + 1..JOINT_COUNT {
            if JOINTS[c].parent.is_some_and(|p| out.contains(&p)) {
                out.push(c);
            }
        }
        out
    }
}

type Mat3 = [[f64; 3]; 3];

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn rodrigues(a: [f64; 3]) -> Mat3 {
    let angle = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    if angle == 0.0 {
        return IDENTITY;
    }
    let [x, y, z] = a.map(|v| v / angle);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            out[i][k] = (0..3).map(|m| a[i][m] * b[m][k]).sum();
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

/// Global joint positions and orientations for one frame of axis-angle pose.
fn forward_kinematics(body: &KinematicBody, pose: &[[f64; 3]]) -> (Vec<[f64; 3]>, Vec<Mat3>) {
    let mut pos = vec![[0.0; 3]; JOINT_COUNT];
    let mut rot = vec![IDENTITY; JOINT_COUNT];
    rot[0] = rodrigues(pose[0]);
    for joint in 1..JOINT_COUNT {
        let p = JOINTS[joint].parent.expect("non-root");
        let offset = mat_vec(&rot[p], JOINTS[joint].direction.map(|d| d * body.length(joint)));
        pos[joint] = [0, 1, 2].map(|i| pos[p][i] + offset[i]);
        rot[joint] = mat_mul(&rot[p], &rodrigues(pose[joint]));
    }
    (pos, rot)
}

fn ring_basis(direction: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    // rest directions are axis-aligned
    if direction[1] != 0.0 {
        ([1.0, 0.0, 0.0], [0.0, 0.0, 1.0])
    } else {
        ([0.0, 1.0, 0.0], [0.0, 0.0, 1.0])
    }
}

/// Mesh topology shared by every frame: one vertex per joint, then for each
/// limb `RINGS_PER_LIMB` rings of `RING_RESOLUTION` vertices.
pub fn body_edges() -> Vec<[u32; 2]> {
    let mut edges = Vec::new();
    let r = RING_RESOLUTION;
    for joint in 1..JOINT_COUNT {
        let base = limb_vertex_base(joint);
        let parent = JOINTS[joint].parent.expect("non-root");
        for ring in 0..RINGS_PER_LIMB {
            for a in 0..r {
                let v = base + ring * r + a;
                edges.push([v, base + ring * r + (a + 1) % r]);
                if ring + 1 < RINGS_PER_LIMB {
                    edges.push([v, base + (ring + 1) * r + a]);
                    edges.push([v, base + (ring + 1) * r + (a + 1) % r]);
                }
            }
        }
        for a in 0..r {
            edges.push([parent, base + a]);
            edges.push([joint, base + (RINGS_PER_LIMB - 1) * r + a]);
        }
    }
    edges
        .into_iter()
        .map(|[a, b]| [a as u32, b as u32])
        .collect()
}

fn limb_vertex_base(joint: usize) -> usize {
    JOINT_COUNT + (joint - 1) * RINGS_PER_LIMB * RING_RESOLUTION
}

/// Vertex range of the tube ending at `joint`.
pub fn limb_vertices(joint: usize) -> std::ops::Range<usize> {
    let base = limb_vertex_base(joint);
    base..base + RINGS_PER_LIMB * RING_RESOLUTION
}

pub fn body_vertex_count() -> usize {
    JOINT_COUNT + (JOINT_COUNT - 1) * RINGS_PER_LIMB * RING_RESOLUTION
}

fn frame_vertices(body: &KinematicBody, pose: &[[f64; 3]]) -> Vec<[f32; 3]> {
    let (pos, rot) = forward_kinematics(body, pose);
    let mut out: Vec<[f32; 3]> = pos.iter().map(|p| p.map(|c| c as f32)).collect();
    for joint in 1..JOINT_COUNT {
        let parent = JOINTS[joint].parent.expect("non-root");
        let (u0, v0) = ring_basis(JOINTS[joint].direction);
        let (u, v) = (mat_vec(&rot[parent], u0), mat_vec(&rot[parent], v0));
        let radius = body.radius(joint);
        for ring in 0..RINGS_PER_LIMB {
            let s = (ring as f64 + 0.5) / RINGS_PER_LIMB as f64;
            let axis = [0, 1, 2].map(|i| pos[parent][i] + s * (pos[joint][i] - pos[parent][i]));
            for a in 0..RING_RESOLUTION {
                let (sa, ca) = (2.0 * PI * a as f64 / RING_RESOLUTION as f64).sin_cos();
                out.push([0, 1, 2].map(|i| (axis[i] + radius * (ca * u[i] + sa * v[i])) as f32));
            }
        }
    }
    out
}

/// Forward kinematics plus tube skinning for every frame; topology is
/// constant across frames.
pub fn pose_to_mesh(
    pose: &PoseSequence,
    body: &KinematicBody,
    id: impl Into<String>,
) -> Result<MeshSequence, DatagenError> {
    if pose.joints() != JOINT_COUNT {
        return Err(DatagenError::Argument(format!(
            "pose has {} joints, body has {JOINT_COUNT}",
            pose.joints()
        )));
    }
    let body = KinematicBody::from_shape_params(body.shape_params.clone())?;
    let edges = body_edges();
    let frames = (0..pose.frames())
        .map(|f| MeshFrame::new(frame_vertices(&body, pose.frame(f)), edges.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MeshSequence::new(id, pose.label, frames)?)
}

/// Meshes a pose whose `shape_params` describe its own body.
pub fn pose_to_own_mesh(pose: &PoseSequence, id: impl Into<String>) -> Result<MeshSequence, DatagenError> {
    let body = KinematicBody::from_shape_params(pose.shape_params.clone())?;
    pose_to_mesh(pose, &body, id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionClass {
    Still,
    WaveLeft,
    WaveRight,
    Walk,
    Squat,
    Jump,
}

impl ActionClass {
    pub const ALL: [ActionClass; 6] = [
        ActionClass::Still,
        ActionClass::WaveLeft,
        ActionClass::WaveRight,
        ActionClass::Walk,
        ActionClass::Squat,
        ActionClass::Jump,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionClass::Still => "still",
            ActionClass::WaveLeft => "wave_left",
            ActionClass::WaveRight => "wave_right",
            ActionClass::Walk => "walk",
            ActionClass::Squat => "squat",
            ActionClass::Jump => "jump",
        }
    }
}

impl FromStr for ActionClass {
    type Err = DatagenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| DatagenError::UnknownClass(s.to_string()))
    }
}

/// Angle of one oscillating degree of freedom at frame `f`.
struct Osc {
    freq: f64,
    phase: f64,
    gain: f64,
}

impl Osc {
    fn at(&self, f: usize, phase_shift: f64) -> f64 {
        (2.0 * PI * self.freq * f as f64 + self.phase + phase_shift).sin()
    }
}

/// Seeded class trajectory of `t` frames. Every sequence carries a small
/// static posture offset; only the class's moving joints vary over time.
pub fn generate_pose_sequence(class: ActionClass, t: usize, seed: u64) -> Result<PoseSequence, DatagenError> {
    if t < 2 {
        return Err(DatagenError::Argument(format!("pose sequence needs t >= 2, got {t}")));
    }
    let mut rng = seed::rng(seed, &[]);
    let rest: Vec<[f64; 3]> = (0..JOINT_COUNT)
        .map(|_| [0; 3].map(|_| rng.gen_range(-0.05..0.05)))
        .collect();
    let osc = Osc {
        freq: rng.gen_range(0.06..0.12),
        phase: rng.gen_range(0.0..2.0 * PI),
        gain: rng.gen_range(0.8..1.2),
    };
    let body = KinematicBody::jittered(&mut rng);
    let g = osc.gain;

    let mut theta = Vec::with_capacity(t * JOINT_COUNT);
    for f in 0..t {
        let mut frame = rest.clone();
        let mut add = |joint: usize, axis: usize, v: f64| frame[joint][axis] += v;
        let s = osc.at(f, 0.0);
        match class {
            ActionClass::Still => {}
            ActionClass::WaveLeft => {
                add(9, 2, g * (2.3 + 0.3 * s));
                add(10, 2, g * (0.7 + 0.5 * osc.at(f, 0.5 * PI)));
                add(11, 2, g * 0.3 * s);
            }
            ActionClass::WaveRight => {
                add(12, 2, -g * (2.3 + 0.3 * s));
                add(13, 2, -g * (0.7 + 0.5 * osc.at(f, 0.5 * PI)));
                add(14, 2, -g * 0.3 * s);
            }
            ActionClass::Walk => {
                add(3, 0, -g * 0.5 * s);
                add(6, 0, g * 0.5 * s);
                add(4, 0, g * 0.4 * (1.0 + osc.at(f, 0.5 * PI)));
                add(7, 0, g * 0.4 * (1.0 - osc.at(f, 0.5 * PI)));
                add(9, 0, g * 0.4 * s);
                add(12, 0, -g * 0.4 * s);
            }
            ActionClass::Squat => {
                let depth = 0.5 * (1.0 - s);
                add(0, 0, -g * 0.3 * depth);
                add(3, 0, -g * 1.2 * depth);
                add(6, 0, -g * 1.2 * depth);
                add(4, 0, g * 1.8 * depth);
                add(7, 0, g * 1.8 * depth);
            }
            ActionClass::Jump => {
                let crouch = 0.5 * (1.0 - osc.at(f, 0.0));
                add(3, 0, -g * 0.6 * crouch);
                add(6, 0, -g * 0.6 * crouch);
                add(4, 0, g * 0.9 * crouch);
                add(7, 0, g * 0.9 * crouch);
                add(9, 2, g * (1.6 + 1.0 * s));
                add(12, 2, -g * (1.6 + 1.0 * s));
            }
        }
        theta.extend(frame);
    }
    Ok(PoseSequence::new(
        t,
        JOINT_COUNT,
        theta,
        body.shape_params,
        vec![class.id() as f64, osc.freq, osc.phase, osc.gain],
    )?
    .with_label(Some(class.id())))
}

/// A generated corpus: meshes, their source poses, manifest and split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub sequences: Vec<MeshSequence>,
    pub poses: PoseCorpus,
    pub manifest: Vec<ManifestRecord>,
    pub split: DatasetSplit,
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub classes: Vec<ActionClass>,
    pub per_class: usize,
    /// Inclusive frame-count range.
    pub t_range: (usize, usize),
    /// Train, test, val.
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: ActionClass::ALL.to_vec(),
            per_class: 10,
            t_range: (16, 32),
            ratios: [0.7, 0.15, 0.15],
            seed: 0,
        }
    }
}

/// Largest-remainder apportionment of `n` items by `ratios`; ties go to the
/// lower index.
pub fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let ideal: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (ideal[a] - ideal[a].floor(), ideal[b] - ideal[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class split counts whose rows sum to the class sizes and whose columns
/// sum to the global largest-remainder totals. Each cell is the floor or
/// ceiling of its proportional share.
fn stratified_counts(class_sizes: &[usize], ratios: &[f64; 3]) -> Vec<[usize; 3]> {
    let total: usize = class_sizes.iter().sum();
    let targets = largest_remainder(total, ratios);
    let ideal: Vec<[f64; 3]> = class_sizes
        .iter()
        .map(|&n| [0, 1, 2].map(|s| n as f64 * targets[s] as f64 / total as f64))
        .collect();
    let mut counts: Vec<[usize; 3]> = ideal.iter().map(|row| row.map(|x| x.floor() as usize)).collect();
    let mut bumped = vec![[false; 3]; class_sizes.len()];
    let row_deficit = |counts: &[[usize; 3]], c: usize| class_sizes[c] - counts[c].iter().sum::<usize>();
    let col_deficit = |counts: &[[usize; 3]], s: usize| targets[s] - counts.iter().map(|r| r[s]).sum::<usize>();

    // greedy by fractional part, then augmenting paths for whatever is left
    let mut cells: Vec<(usize, usize)> = (0..class_sizes.len()).flat_map(|c| (0..3).map(move |s| (c, s))).collect();
    let frac = |c: usize, s: usize| ideal[c][s] - ideal[c][s].floor();
    cells.sort_by(|&(c1, s1), &(c2, s2)| frac(c2, s2).total_cmp(&frac(c1, s1)).then((c1, s1).cmp(&(c2, s2))));
    for &(c, s) in &cells {
        if frac(c, s) > 0.0 && row_deficit(&counts, c) > 0 && col_deficit(&counts, s) > 0 {
            counts[c][s] += 1;
            bumped[c][s] = true;
        }
    }
    while let Some(c) = (0..class_sizes.len()).find(|&c| row_deficit(&counts, c) > 0) {
        let mut visited = vec![false; class_sizes.len()];
        if !augment(c, &mut counts, &mut bumped, &ideal, &targets, &mut visited) {
            // no floor/ceil rounding exists; fall back to any split with room
            let s = (0..3).find(|&s| col_deficit(&counts, s) > 0).expect("totals agree");
            counts[c][s] += 1;
        }
    }
    counts
}

fn augment(
    c: usize,
    counts: &mut [[usize; 3]],
    bumped: &mut [[bool; 3]],
    ideal: &[[f64; 3]],
    targets: &[usize],
    visited: &mut [bool],
) -> bool {
    visited[c] = true;
    for s in 0..3 {
        if bumped[c][s] || ideal[c][s].fract() == 0.0 {
            continue;
        }
        let col: usize = counts.iter().map(|r| r[s]).sum();
        if col < targets[s] {
            counts[c][s] += 1;
            bumped[c][s] = true;
            return true;
        }
        for other in 0..counts.len() {
            if !visited[other] && bumped[other][s] {
                counts[other][s] -= 1;
                bumped[other][s] = false;
                if augment(other, counts, bumped, ideal, targets, visited) {
                    counts[c][s] += 1;
                    bumped[c][s] = true;
                    return true;
                }
                counts[other][s] += 1;
                bumped[other][s] = true;
            }
        }
    }
    false
}

/// Generates `per_class` labeled sequences per class and a stratified,
/// seeded train/test/val split.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset, DatagenError> {
    if spec.per_class < 3 {
        return Err(DatagenError::Argument(format!(
            "per_class = {} is too small to stratify (need >= 3)",
            spec.per_class
        )));
    }
    if spec.classes.is_empty() {
        return Err(DatagenError::Argument("no classes".into()));
    }
    let sum: f64 = spec.ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || spec.ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
        return Err(DatagenError::Argument(format!(
            "split ratios {:?} must be in [0, 1] and sum to 1",
            spec.ratios
        )));
    }
    let (lo, hi) = spec.t_range;
    if lo < 2 || lo > hi {
        return Err(DatagenError::Argument(format!("t_range ({lo}, {hi}) must satisfy 2 <= lo <= hi")));
    }

    let jobs: Vec<(ActionClass, usize)> = spec
        .classes
        .iter()
        .flat_map(|&c| (0..spec.per_class).map(move |i| (c, i)))
        .collect();
    let generated = jobs
        .par_iter()
        .map(|&(class, i)| {
            let s = seed::derive_seed(spec.seed, &[class.id() as u64, i as u64]);
            let t = seed::rng(s, &[0]).gen_range(lo..=hi);
            let pose = generate_pose_sequence(class, t, s)?;
            let id = format!("{}_{i:03}", class.name());
            let mesh = pose_to_own_mesh(&pose, id.clone())?;
            Ok((PoseRecord { id, pose, provenance: None }, mesh))
        })
        .collect::<Result<Vec<_>, DatagenError>>()?;
    let (records, sequences): (Vec<_>, Vec<_>) = generated.into_iter().unzip();

    let sizes = vec![spec.per_class; spec.classes.len()];
    let counts = stratified_counts(&sizes, &spec.ratios);
    let mut split = DatasetSplit {
        train: Vec::new(),
        test: Vec::new(),
        val: Vec::new(),
        ratios: spec.ratios,
    };
    let mut split_rng = seed::rng(spec.seed, &[u64::MAX]);
    for (ci, row) in counts.iter().enumerate() {
        let mut ids: Vec<String> = records[ci * spec.per_class..(ci + 1) * spec.per_class]
            .iter()
            .map(|r| r.id.clone())
            .collect();
        ids.shuffle(&mut split_rng);
        let mut it = ids.into_iter();
        split.train.extend(it.by_ref().take(row[0]));
        split.test.extend(it.by_ref().take(row[1]));
        split.val.extend(it);
    }
    split.train.sort();
    split.test.sort();
    split.val.sort();

    let manifest = records
        .iter()
        .map(|r| ManifestRecord {
            id: r.id.clone(),
            label: r.pose.label,
            split: split.split_of(&r.id).expect("every id is split"),
        })
        .collect();
    Ok(Dataset {
        sequences,
        poses: PoseCorpus {
            partition: default_partition(),
            records,
        },
        manifest,
        split,
    })
}

/// Split assignment helper for manifests built outside `make_dataset`.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let c = largest_remainder(n, &ratios);
    [c[0], c[1], c[2]]
}

impl Dataset {
    pub fn ids_in(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.split.train,
            Split::Test => &self.split.test,
            Split::Val => &self.split.val,
            Split::Pretrain => &[],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn part_variance(pose: &PoseSequence, joints: &[usize]) -> f64 {
        let t = pose.frames() as f64;
        let mut total = 0.0;
        for &j in joints {
            for a in 0..3 {
                let mean = (0..pose.frames()).map(|f| pose.joint(f, j)[a]).sum::<f64>() / t;
                total += (0..pose.frames()).map(|f| (pose.joint(f, j)[a] - mean).powi(2)).sum::<f64>() / t;
            }
        }
        total
    }

    #[test]
    fn still_is_constant_and_meshes_identically() {
        let pose = generate_pose_sequence(ActionClass::Still, 5, 3).unwrap();
        for f in 1..5 {
            assert_eq!(pose.frame(f), pose.frame(0));
        }
        let mesh = pose_to_own_mesh(&pose, "s").unwrap();
        for f in 1..5 {
            assert_eq!(mesh.frames[f], mesh.frames[0]);
        }
    }

    #[test]
    fn wave_left_moves_only_left_arm() {
        let partition = default_partition();
        for seed in 0..10 {
            let pose = generate_pose_sequence(ActionClass::WaveLeft, 24, seed).unwrap();
            for p in 0..5 {
                let v = part_variance(&pose, partition.part(p));
                if p == 3 {
                    assert!(v > 1e-3, "arm_left variance {v}");
                } else {
                    assert!(v < 1e-20, "part {p} varies: {v}");
                }
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_pose_sequence(ActionClass::Walk, 20, 11).unwrap();
        assert_eq!(a, generate_pose_sequence(ActionClass::Walk, 20, 11).unwrap());
        assert_ne!(a, generate_pose_sequence(ActionClass::Walk, 20, 12).unwrap());
        assert!(generate_pose_sequence(ActionClass::Walk, 1, 0).is_err());
        assert!("dance".parse::<ActionClass>().is_err());
        assert_eq!("squat".parse::<ActionClass>().unwrap(), ActionClass::Squat);
    }

    #[test]
    fn meshes_are_valid_connected_and_shared_topology() {
        for seed in 0..100 {
            let class = ActionClass::ALL[seed as usize % 6];
            let pose = generate_pose_sequence(class, 3, seed).unwrap();
            let mesh = pose_to_own_mesh(&pose, "m").unwrap();
            for frame in &mesh.frames {
                assert!(frame.validate().is_empty());
                assert_eq!(frame.edges(), mesh.frames[0].edges());
                assert_eq!(frame.vertex_count(), body_vertex_count());
            }
        }
        let frame = pose_to_own_mesh(&generate_pose_sequence(ActionClass::Jump, 2, 0).unwrap(), "m")
            .unwrap()
            .frames
            .remove(0);
        let d = crate::geometry::geodesic_distances(&frame, 0).unwrap();
        assert!(d.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn doubling_a_limb_moves_only_its_subtree() {
        let pose = generate_pose_sequence(ActionClass::Walk, 2, 5).unwrap();
        let body = KinematicBody::from_shape_params(pose.shape_params.clone()).unwrap();
        for joint in [1, 4, 10] {
            let mut longer = body.clone();
            longer.set_length(joint, 2.0 * body.length(joint));
            let a = pose_to_mesh(&pose, &body, "a").unwrap();
            let b = pose_to_mesh(&pose, &longer, "b").unwrap();
            let subtree = KinematicBody::descendants(joint);
            let mut expected: Vec<usize> = subtree.clone();
            for &d in &subtree {
                expected.extend(limb_vertices(d));
            }
            // tubes hanging off a moved joint move with it
            for c in 1..JOINT_COUNT {
                if JOINTS[c].parent.is_some_and(|p| subtree.contains(&p)) {
                    expected.extend(limb_vertices(c));
                }
            }
            expected.sort();
            expected.dedup();
            let moved: Vec<usize> = (0..body_vertex_count())
                .filter(|&v| a.frames[0].vertices()[v] != b.frames[0].vertices()[v])
                .collect();
            assert_eq!(moved, expected, "joint {joint}");
        }
        let mut bad = body.clone();
        bad.set_length(4, 0.0);
        assert!(matches!(
            pose_to_mesh(&pose, &bad, "x"),
            Err(DatagenError::DegenerateLimb { joint: 4, .. })
        ));
    }

    #[test]
    fn split_counts_follow_largest_remainder() {
        assert_eq!(split_counts(60, [0.7, 0.15, 0.15]), [42, 9, 9]);
        assert_eq!(split_counts(10, [0.7, 0.15, 0.15]), [7, 2, 1]);
        let rows = stratified_counts(&[10; 6], &[0.7, 0.15, 0.15]);
        let cols: Vec<usize> = (0..3).map(|s| rows.iter().map(|r| r[s]).sum()).collect();
        assert_eq!(cols, vec![42, 9, 9]);
        for r in &rows {
            assert_eq!(r.iter().sum::<usize>(), 10);
            assert!(r[0] == 7 && (1..=2).contains(&r[1]) && (1..=2).contains(&r[2]));
        }
        let rows = stratified_counts(&[3; 7], &[0.7, 0.15, 0.15]);
        let cols: Vec<usize> = (0..3).map(|s| rows.iter().map(|r| r[s]).sum()).collect();
        assert_eq!(cols, split_counts(21, [0.7, 0.15, 0.15]).to_vec());
    }

    #[test]
    fn dataset_is_stratified_and_reproducible() {
        let spec = DatasetSpec {
            t_range: (4, 6),
            ..Default::default()
        };
        let ds = make_dataset(&spec).unwrap();
        assert_eq!(ds.sequences.len(), 60);
        assert_eq!((ds.split.train.len(), ds.split.test.len(), ds.split.val.len()), (42, 9, 9));
        let ids: Vec<String> = ds.sequences.iter().map(|s| s.id.clone()).collect();
        ds.split.check(&ids).unwrap();
        for split in [Split::Train, Split::Test, Split::Val] {
            let mut classes: Vec<usize> = ds
                .manifest
                .iter()
                .filter(|r| r.split == split)
                .map(|r| r.label.unwrap())
                .collect();
            classes.sort();
            classes.dedup();
            assert_eq!(classes, (0..6).collect::<Vec<_>>(), "{split:?}");
        }
        let again = make_dataset(&spec).unwrap();
        assert_eq!(
            crate::mesh::format_manifest(&ds.manifest),
            crate::mesh::format_manifest(&again.manifest)
        );
        assert!(make_dataset(&DatasetSpec { per_class: 2, ..spec.clone() }).is_err());
        assert!(make_dataset(&DatasetSpec { ratios: [0.7, 0.2, 0.2], ..spec }).is_err());
    }

    #[test]
    fn classes_separate_by_part_variance() {
        let partition = default_partition();
        let features = |class: ActionClass, seed: u64| -> Vec<f64> {
            let pose = generate_pose_sequence(class, 24, seed).unwrap();
            (0..5).map(|p| part_variance(&pose, partition.part(p))).collect()
        };
        let centroids: Vec<Vec<f64>> = ActionClass::ALL
            .iter()
            .map(|&c| {
                let fs: Vec<Vec<f64>> = (0..20).map(|s| features(c, s)).collect();
                (0..5).map(|d| fs.iter().map(|f| f[d]).sum::<f64>() / 20.0).collect()
            })
            .collect();
        let mut correct = 0;
        let mut total = 0;
        for (ci, &c) in ActionClass::ALL.iter().enumerate() {
            for s in 100..120 {
                let f = features(c, s);
                let best = (0..6)
                    .min_by(|&a, &b| {
                        let da: f64 = f.iter().zip(&centroids[a]).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = f.iter().zip(&centroids[b]).map(|(x, y)| (x - y).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                correct += (best == ci) as usize;
                total += 1;
            }
        }
        assert!(correct as f64 / total as f64 > 0.9, "{correct}/{total}");
    }
}
