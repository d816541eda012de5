//! Joint Shuffle: new pose sequences assembled from the body parts of five
//! donor sequences, plus the pose corpus file format.
//!
//! Pose corpus layout (little-endian):
//!
//! ```text
//! magic "POSE", version u16 = 1, n u32 (joints)
//! 5 parts in order bone, leg_left, leg_right, arm_left, arm_right:
//!     count u32, joint indices count * u32
//! sequence count u32
//! per sequence:
//!     id_len u32, id utf-8
//!     t u32, theta t * n * 3 * f64 (axis-angle, radians, frame-major)
//!     shape count u32, f64 values; dyn count u32, f64 values
//!     label i32 (-1 = unlabeled)
//!     provenance flag u8; if 1: 5 * u32 donor index per part, u32 shape donor
//! ```

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::binio::{FormatError, Reader, Writer};
use crate::seed;

pub const POSE_MAGIC: &[u8; 4] = b"POSE";
pub const POSE_VERSION: u16 = 1;
pub const PART_COUNT: usize = 5;
pub const PART_NAMES: [&str; PART_COUNT] = ["bone", "leg_left", "leg_right", "arm_left", "arm_right"];

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("pose sequence: {0}")]
    InvalidPose(String),
    #[error("body partition: {0}")]
    InvalidPartition(String),
    #[error("joint shuffle needs at least 5 sequences, pool has {0}")]
    PoolTooSmall(usize),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Axis-angle joint rotations over time, plus per-sequence body shape and
/// opaque motion metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    frames: usize,
    joints: usize,
    theta: Vec<[f64; 3]>,
    pub shape_params: Vec<f64>,
    pub dyn_params: Vec<f64>,
    pub label: Option<usize>,
}

impl PoseSequence {
    /// `theta` is frame-major: `theta[f * joints + j]`.
    pub fn new(
        frames: usize,
        joints: usize,
        theta: Vec<[f64; 3]>,
        shape_params: Vec<f64>,
        dyn_params: Vec<f64>,
    ) -> Result<Self, AugmentError> {
        if frames == 0 || joints == 0 {
            return Err(AugmentError::InvalidPose("needs t >= 1 and n >= 1".into()));
        }
        if theta.len() != frames * joints {
            return Err(AugmentError::InvalidPose(format!(
                "theta has {} entries, expected {frames} x {joints}",
                theta.len()
            )));
        }
        if !theta.iter().flatten().all(|a| a.is_finite()) {
            return Err(AugmentError::InvalidPose("non-finite joint angle".into()));
        }
        Ok(Self {
            frames,
            joints,
            theta,
            shape_params,
            dyn_params,
            label: None,
        })
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn theta(&self) -> &[[f64; 3]] {
        &self.theta
    }

    pub fn joint(&self, frame: usize, joint: usize) -> [f64; 3] {
        self.theta[frame * self.joints + joint]
    }

    pub fn frame(&self, frame: usize) -> &[[f64; 3]] {
        &self.theta[frame * self.joints..(frame + 1) * self.joints]
    }

    /// Tiles the whole sequence from its start and truncates to `t` frames.
    pub fn tiled(&self, t: usize) -> Vec<[f64; 3]> {
        (0..t).flat_map(|f| self.frame(f % self.frames).iter().copied()).collect()
    }
}

/// Disjoint joint-index sets covering all joints, in the order
/// bone, leg_left, leg_right, arm_left, arm_right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BodyPartition {
    parts: [Vec<usize>; PART_COUNT],
    joints: usize,
}

impl BodyPartition {
    pub fn new(parts: [Vec<usize>; PART_COUNT], joints: usize) -> Result<Self, AugmentError> {
        let mut owner = vec![None; joints];
        for (p, set) in parts.iter().enumerate() {
            for &j in set {
                if j >= joints {
                    return Err(AugmentError::InvalidPartition(format!(
                        "joint {j} out of range for {joints} joints"
                    )));
                }
                if let Some(prev) = owner[j] {
                    return Err(AugmentError::InvalidPartition(format!(
                        "joint {j} in both {} and {}",
                        PART_NAMES[prev], PART_NAMES[p]
                    )));
                }
                owner[j] = Some(p);
            }
        }
        if let Some(j) = owner.iter().position(Option::is_none) {
            return Err(AugmentError::InvalidPartition(format!("joint {j} is in no part")));
        }
        Ok(Self { parts, joints })
    }

    pub fn parts(&self) -> &[Vec<usize>; PART_COUNT] {
        &self.parts
    }

    pub fn part(&self, p: usize) -> &[usize] {
        &self.parts[p]
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    /// Part index owning each joint.
    pub fn owner_of(&self) -> Vec<usize> {
        let mut owner = vec![0; self.joints];
        for (p, set) in self.parts.iter().enumerate() {
            for &j in set {
                owner[j] = p;
            }
        }
        owner
    }
}

/// Which pool sequence fed each part, and which donated shape/dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub part_sources: [usize; PART_COUNT],
    pub shape_source: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ShuffleOptions {
    /// Draw a random part-to-donor assignment; `false` feeds part `i` from
    /// the `i`-th sampled sequence.
    pub randomize_assignment: bool,
}

impl Default for ShuffleOptions {
    fn default() -> Self {
        Self {
            randomize_assignment: true,
        }
    }
}

fn check_pool(pool: &[PoseSequence], partition: &BodyPartition) -> Result<(), AugmentError> {
    if pool.len() < PART_COUNT {
        return Err(AugmentError::PoolTooSmall(pool.len()));
    }
    if let Some(s) = pool.iter().find(|s| s.joints != partition.joints) {
        return Err(AugmentError::InvalidPartition(format!(
            "partition covers {} joints, sequence has {}",
            partition.joints, s.joints
        )));
    }
    Ok(())
}

/// One Joint Shuffle draw from `pool`.
pub fn joint_shuffle<R: Rng>(
    pool: &[PoseSequence],
    partition: &BodyPartition,
    rng: &mut R,
    opts: ShuffleOptions,
) -> Result<(PoseSequence, Provenance), AugmentError> {
    check_pool(pool, partition)?;
    let mut donors: Vec<usize> = index::sample(rng, pool.len(), PART_COUNT).into_vec();
    if opts.randomize_assignment {
        donors.shuffle(rng);
    } else {
        donors.sort_unstable();
    }
    let part_sources: [usize; PART_COUNT] = donors.clone().try_into().expect("five donors");
    let shape_source = donors[rng.gen_range(0..PART_COUNT)];

    let n = partition.joints;
    let t_max = part_sources.iter().map(|&d| pool[d].frames).max().expect("nonempty");
    let mut theta = vec![[0.0; 3]; t_max * n];
    for (p, &d) in part_sources.iter().enumerate() {
        let padded = pool[d].tiled(t_max);
        for f in 0..t_max {
            for &j in partition.part(p) {
                theta[f * n + j] = padded[f * n + j];
            }
        }
    }
    let donor = &pool[shape_source];
    let seq = PoseSequence::new(
        t_max,
        n,
        theta,
        donor.shape_params.clone(),
        donor.dyn_params.clone(),
    )?;
    Ok((
        seq,
        Provenance {
            part_sources,
            shape_source,
        },
    ))
}

/// Number of distinct five-sequence subsets of a pool of `b`.
pub fn subset_capacity(b: usize) -> u128 {
    if b < PART_COUNT {
        return 0;
    }
    let b = b as u128;
    b * (b - 1) * (b - 2) * (b - 3) * (b - 4) / 120
}

/// `m` independent shuffles; draw `i` uses its own stream derived from `seed`.
pub fn synthesize_corpus(
    pool: &[PoseSequence],
    m: usize,
    partition: &BodyPartition,
    seed: u64,
    opts: ShuffleOptions,
) -> Result<Vec<(PoseSequence, Provenance)>, AugmentError> {
    check_pool(pool, partition)?;
    let capacity = subset_capacity(pool.len());
    if m as u128 > capacity {
        log::info!(
            "requested {m} shuffles from {capacity} distinct donor subsets; subsets will repeat"
        );
    }
    (0..m)
        .into_par_iter()
        .map(|i| joint_shuffle(pool, partition, &mut seed::rng(seed, &[i as u64]), opts))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub id: String,
    pub pose: PoseSequence,
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseCorpus {
    pub partition: BodyPartition,
    pub records: Vec<PoseRecord>,
}

impl PoseCorpus {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(POSE_MAGIC);
        w.u16(POSE_VERSION);
        w.len_u32(self.partition.joints);
        for part in self.partition.parts() {
            w.len_u32(part.len());
            for &j in part {
                w.len_u32(j);
            }
        }
        w.len_u32(self.records.len());
        for r in &self.records {
            w.len_u32(r.id.len());
            w.bytes(r.id.as_bytes());
            w.len_u32(r.pose.frames);
            for a in r.pose.theta.iter().flatten() {
                w.f64(*a);
            }
            w.len_u32(r.pose.shape_params.len());
            r.pose.shape_params.iter().for_each(|&v| w.f64(v));
            w.len_u32(r.pose.dyn_params.len());
            r.pose.dyn_params.iter().for_each(|&v| w.f64(v));
            w.i32(r.pose.label.map(|l| l as i32).unwrap_or(-1));
            match r.provenance {
                None => w.u8(0),
                Some(p) => {
                    w.u8(1);
                    p.part_sources.iter().for_each(|&s| w.len_u32(s));
                    w.len_u32(p.shape_source);
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AugmentError> {
        let mut r = Reader::new(bytes);
        r.magic(POSE_MAGIC)?;
        let at = r.offset();
        let version = r.u16("version")?;
        if version != POSE_VERSION {
            return Err(FormatError {
                offset: at,
                message: format!("unsupported version {version}"),
            }
            .into());
        }
        let n = r.u32("joint count")? as usize;
        let mut parts: [Vec<usize>; PART_COUNT] = Default::default();
        for part in parts.iter_mut() {
            let c = r.count("part size", 4)?;
            for _ in 0..c {
                part.push(r.u32("joint index")? as usize);
            }
        }
        let at = r.offset();
        let partition = BodyPartition::new(parts, n).map_err(|e| FormatError {
            offset: at,
            message: e.to_string(),
        })?;
        let count = r.count("sequence count", 4)?;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.offset();
            let len = r.count("id length", 1)?;
            let id = String::from_utf8(r.take(len, "id")?.to_vec()).map_err(|_| FormatError {
                offset: at,
                message: "id is not utf-8".into(),
            })?;
            let t = r.count("frame count", n * 24)?;
            let mut theta = Vec::with_capacity(t * n);
            for _ in 0..t * n {
                theta.push([r.f64("theta")?, r.f64("theta")?, r.f64("theta")?]);
            }
            let sc = r.count("shape count", 8)?;
            let shape: Vec<f64> = (0..sc).map(|_| r.f64("shape")).collect::<Result<_, _>>()?;
            let dc = r.count("dyn count", 8)?;
            let dynp: Vec<f64> = (0..dc).map(|_| r.f64("dyn")).collect::<Result<_, _>>()?;
            let label = r.i32("label")?;
            let provenance = match r.u8("provenance flag")? {
                0 => None,
                1 => {
                    let mut part_sources = [0; PART_COUNT];
                    for s in part_sources.iter_mut() {
                        *s = r.u32("donor")? as usize;
                    }
                    Some(Provenance {
                        part_sources,
                        shape_source: r.u32("shape donor")? as usize,
                    })
                }
                other => return Err(r.error(format!("bad provenance flag {other}")).into()),
            };
            let at = r.offset();
            let pose = PoseSequence::new(t, n, theta, shape, dynp)
                .map_err(|e| FormatError {
                    offset: at,
                    message: e.to_string(),
                })?
                .with_label((label >= 0).then_some(label as usize));
            records.push(PoseRecord { id, pose, provenance });
        }
        r.finish()?;
        Ok(Self { partition, records })
    }

    pub fn save(&self, path: &Path) -> Result<(), AugmentError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| AugmentError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, AugmentError> {
        let bytes = std::fs::read(path).map_err(|source| AugmentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
