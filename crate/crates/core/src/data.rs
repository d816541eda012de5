//! Model-ready patch tensors for a mesh sequence.
//!
//! Patches are ordered frame-major: patch `p` belongs to frame `p / c`. Every
//! per-neighbor array is row-major with `k` rows per patch.
//!
//! Neighborhood features are divided by the frame's mean neighbor distance
//! (per metric), so the local channels are O(1) whatever `k` and the body
//! scale. Positions and reconstruction targets stay in meters.

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{build_frame_patches_with, GeometryError, Neighborhood, PatchOptions};
use crate::mesh::{MeshError, MeshSequence};

#[derive(Debug, Error)]
pub enum InputError {
    #[error("sequence {id}, frame {frame}: {source}")]
    Geometry {
        id: String,
        frame: usize,
        #[source]
        source: GeometryError,
    },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputOptions {
    /// Patches per frame.
    pub c: usize,
    /// Neighbors per patch.
    pub k: usize,
    /// Resample every sequence to this many frames.
    pub frames: Option<usize>,
    pub include_center: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInput {
    pub id: String,
    pub label: Option<usize>,
    pub t: usize,
    pub c: usize,
    /// Rows per neighborhood; the center occupies one when included.
    pub k: usize,
    /// `[t * c, 3]` center positions.
    pub centers: Vec<f64>,
    /// `[t * c * k, 4]` geodesic displacement plus surface distance, frame
    /// normalized.
    pub geo_features: Vec<f64>,
    /// `[t * c * k, 3]` geodesic neighbor positions.
    pub geo_points: Vec<f64>,
    /// `[t * c * k, 3]` euclidean displacements, frame normalized.
    pub euc_features: Vec<f64>,
    /// `[t * c * k, 3]` euclidean neighbor positions.
    pub euc_points: Vec<f64>,
    /// `[t * c * (k + 1), 3]` reconstruction targets: each patch center
    /// followed by its geodesic neighbors.
    pub targets: Vec<f64>,
}

impl SequenceInput {
    pub fn patch_count(&self) -> usize {
        self.t * self.c
    }

    pub fn frame_of(&self, patch: usize) -> usize {
        patch / self.c
    }

    pub fn points_per_patch(&self) -> usize {
        self.k + 1
    }

    pub fn center(&self, patch: usize) -> [f64; 3] {
        let s = &self.centers[patch * 3..patch * 3 + 3];
        [s[0], s[1], s[2]]
    }

    /// Flat `[k + 1, 3]` target points of one patch.
    pub fn patch_targets(&self, patch: usize) -> &[f64] {
        let n = self.points_per_patch() * 3;
        &self.targets[patch * n..(patch + 1) * n]
    }

    /// Flat `[c * (k + 1), 3]` target points of one frame.
    pub fn frame_targets(&self, frame: usize) -> &[f64] {
        let n = self.c * self.points_per_patch() * 3;
        &self.targets[frame * n..(frame + 1) * n]
    }
}

/// Builds patch tensors for one sequence; frames are processed in parallel
/// and the result does not depend on scheduling.
pub fn build_input(seq: &MeshSequence, opts: &InputOptions) -> Result<SequenceInput, InputError> {
    let seq = match opts.frames {
        Some(t) if t != seq.len() => seq.resample(t)?,
        _ => seq.clone(),
    };
    let patch_opts = PatchOptions {
        centers: opts.c,
        k: opts.k,
        include_center: opts.include_center,
    };
    let patches = seq
        .frames
        .par_iter()
        .enumerate()
        .map(|(f, frame)| {
            build_frame_patches_with(frame, f, patch_opts).map_err(|source| InputError::Geometry {
                id: seq.id.clone(),
                frame: f,
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let k = patches[0].geo[0].len();
    let mut input = SequenceInput {
        id: seq.id.clone(),
        label: seq.label,
        t: seq.len(),
        c: opts.c,
        k,
        centers: Vec::new(),
        geo_features: Vec::new(),
        geo_points: Vec::new(),
        euc_features: Vec::new(),
        euc_points: Vec::new(),
        targets: Vec::new(),
    };
    for (frame, ps) in seq.frames.iter().zip(&patches) {
        let geo_scale = mean_distance(&ps.geo);
        let euc_scale = mean_distance(&ps.euc);
        for ((&center, geo), euc) in ps.centers.iter().zip(&ps.geo).zip(&ps.euc) {
            let cp = frame.position(center);
            input.centers.extend_from_slice(&cp);
            input.targets.extend_from_slice(&cp);
            input.geo_features.extend(geo.features().into_iter().map(|v| v / geo_scale));
            input.euc_features.extend(euc.features().into_iter().map(|v| v / euc_scale));
            for &v in &geo.neighbor_indices {
                input.geo_points.extend_from_slice(&frame.position(v));
                input.targets.extend_from_slice(&frame.position(v));
            }
            for &v in &euc.neighbor_indices {
                input.euc_points.extend_from_slice(&frame.position(v));
            }
        }
    }
    Ok(input)
}

/// Mean neighbor distance over a frame's neighborhoods; 1 when degenerate.
fn mean_distance(hoods: &[Neighborhood]) -> f64 {
    let (sum, n) = hoods
        .iter()
        .flat_map(|h| &h.metric_distances)
        .fold((0.0, 0usize), |(s, n), &d| (s + d, n + 1));
    let mean = sum / n as f64;
    if mean.is_finite() && mean > 0.0 {
        mean
    } else {
        1.0
    }
}

/// Builds inputs for many sequences in parallel, preserving order.
pub fn build_inputs(seqs: &[MeshSequence], opts: &InputOptions) -> Result<Vec<SequenceInput>, InputError> {
    seqs.par_iter().map(|s| build_input(s, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_pose_sequence, pose_to_own_mesh, ActionClass};

    fn sample(t: usize) -> MeshSequence {
        let pose = generate_pose_sequence(ActionClass::Walk, t, 1).unwrap();
        pose_to_own_mesh(&pose, "walk").unwrap()
    }

    #[test]
    fn shapes_and_layout() {
        let opts = InputOptions {
            c: 8,
            k: 4,
            frames: Some(3),
            include_center: false,
        };
        let input = build_input(&sample(5), &opts).unwrap();
        assert_eq!((input.t, input.c, input.k), (3, 8, 4));
        assert_eq!(input.centers.len(), 24 * 3);
        assert_eq!(input.geo_features.len(), 24 * 4 * 4);
        assert_eq!(input.euc_features.len(), 24 * 4 * 3);
        assert_eq!(input.geo_points.len(), 24 * 4 * 3);
        assert_eq!(input.targets.len(), 24 * 5 * 3);
        assert_eq!(input.frame_of(17), 2);
        assert_eq!(&input.patch_targets(9)[..3], &input.center(9)[..]);
        assert_eq!(input.frame_targets(1).len(), 8 * 5 * 3);
        // displacement = (neighbor - center) / scale, one scale per frame
        let ratio = |p: usize, n: usize, a: usize| {
            let d = input.euc_points[(p * 4 + n) * 3 + a] - input.center(p)[a];
            d / input.euc_features[(p * 4 + n) * 3 + a]
        };
        let scale = ratio(2, 0, 0);
        assert!(scale > 0.0 && scale < 0.2, "{scale}");
        for p in 0..8 {
            for n in 0..4 {
                for a in 0..3 {
                    assert!((ratio(p, n, a) - scale).abs() <= 1e-12 * scale);
                }
            }
        }
        let dist: f64 = input.geo_features[..8 * 4 * 4].chunks(4).map(|r| r[3]).sum();
        assert!((dist / 32.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn parallel_batch_matches_serial() {
        let seqs = vec![sample(3), sample(4)];
        let opts = InputOptions {
            c: 4,
            k: 3,
            frames: None,
            include_center: true,
        };
        let batch = build_inputs(&seqs, &opts).unwrap();
        assert_eq!(batch[1], build_input(&seqs[1], &opts).unwrap());
        assert_eq!(batch[0].k, 3);
        assert!(batch[0].geo_features[..4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oversized_k_names_the_frame() {
        let opts = InputOptions {
            c: 2,
            k: 10_000,
            frames: None,
            include_center: false,
        };
        let err = build_input(&sample(2), &opts).unwrap_err().to_string();
        assert!(err.contains("frame 0"), "{err}");
    }
}
