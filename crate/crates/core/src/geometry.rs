//! Geodesic distances, k-nearest neighborhoods, farthest point sampling and
//! per-frame patch construction.
//!
//! Every ordering decision here (neighbor ranking, sampling ties) is keyed on
//! geometry first and vertex index last, so the output is unchanged, up to
//! index relabeling, when the vertices of a frame are permuted.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::mesh::{Adjacency, MeshFrame};

/// Edge weights are rounded up onto a fixed grid of 2^-40 m before summing, so
/// path lengths add exactly (associatively). This makes d(u, v) == d(v, u)
/// bit for bit and keeps every graph distance >= the straight-line distance.
pub const GEODESIC_TICKS_PER_METER: f64 = (1u64 << 40) as f64;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("vertex index {index} out of range for {count} vertices")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("k = {k} exceeds the {available} vertices reachable from center {center}")]
    TooFewNeighbors { k: usize, available: usize, center: usize },
    #[error("cannot sample {requested} centers from {available} vertices")]
    TooManyCenters { requested: usize, available: usize },
    #[error("{0} must be >= 1")]
    Zero(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Geodesic,
    Euclidean,
}

impl Metric {
    /// Width of the per-neighbor displacement feature: geodesic patches carry
    /// the scalar surface distance as a fourth channel.
    pub fn feature_width(self) -> usize {
        match self {
            Metric::Geodesic => 4,
            Metric::Euclidean => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Geodesic => "geodesic",
            Metric::Euclidean => "euclidean",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub center: usize,
    pub neighbor_indices: Vec<usize>,
    /// neighbor - center, meters
    pub displacements: Vec<[f64; 3]>,
    pub metric_distances: Vec<f64>,
    pub metric: Metric,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.neighbor_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbor_indices.is_empty()
    }

    /// Row-major `[k, feature_width]` displacement features.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.metric.feature_width());
        for (d, &dist) in self.displacements.iter().zip(&self.metric_distances) {
            out.extend_from_slice(d);
            if self.metric == Metric::Geodesic {
                out.push(dist);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub frame_index: usize,
    pub centers: Vec<usize>,
    pub geo: Vec<Neighborhood>,
    pub euc: Vec<Neighborhood>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn lex_cmp(a: &[f32; 3], b: &[f32; 3]) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

fn check_index(frame: &MeshFrame, v: usize) -> Result<(), GeometryError> {
    if v >= frame.vertex_count() {
        return Err(GeometryError::IndexOutOfRange {
            index: v,
            count: frame.vertex_count(),
        });
    }
    Ok(())
}

fn edge_ticks(frame: &MeshFrame, a: usize, b: usize) -> u64 {
    let len = norm(sub(frame.position(a), frame.position(b)));
    (len * GEODESIC_TICKS_PER_METER).ceil() as u64
}

/// Dijkstra over the edge graph in fixed-point ticks; `u64::MAX` = unreachable.
fn geodesic_ticks(frame: &MeshFrame, adj: &Adjacency, source: usize) -> Vec<u64> {
    let n = frame.vertex_count();
    let mut dist = vec![u64::MAX; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0;
    heap.push(Reverse((0u64, source)));
    while let Some(Reverse((d, u))) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        for &v in adj.neighbors(u) {
            let v = v as usize;
            let nd = d.saturating_add(edge_ticks(frame, u, v));
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Reverse((nd, v)));
            }
        }
    }
    dist
}

fn ticks_to_meters(t: u64) -> f64 {
    if t == u64::MAX {
        f64::INFINITY
    } else {
        t as f64 / GEODESIC_TICKS_PER_METER
    }
}

/// Shortest edge-path length from `source` to every vertex (infinite when unreachable).
pub fn geodesic_distances(frame: &MeshFrame, source: usize) -> Result<Vec<f64>, GeometryError> {
    check_index(frame, source)?;
    let adj = frame.adjacency();
    Ok(geodesic_ticks(frame, &adj, source)
        .into_iter()
        .map(ticks_to_meters)
        .collect())
}

/// The `k` nearest vertices to `center` under `metric`, excluding the center.
pub fn knn(
    frame: &MeshFrame,
    center: usize,
    k: usize,
    metric: Metric,
) -> Result<Neighborhood, GeometryError> {
    let adj = match metric {
        Metric::Geodesic => Some(frame.adjacency()),
        Metric::Euclidean => None,
    };
    knn_inner(frame, adj.as_ref(), center, k, metric, false)
}

fn knn_inner(
    frame: &MeshFrame,
    adj: Option<&Adjacency>,
    center: usize,
    k: usize,
    metric: Metric,
    include_center: bool,
) -> Result<Neighborhood, GeometryError> {
    check_index(frame, center)?;
    let n = frame.vertex_count();
    let pc = frame.position(center);
    let verts = frame.vertices();

    let mut candidates: Vec<(f64, usize)> = match metric {
        Metric::Geodesic => {
            let adj = adj.expect("geodesic knn needs adjacency");
            geodesic_ticks(frame, adj, center)
                .into_iter()
                .enumerate()
                .filter(|&(v, t)| t != u64::MAX && (include_center || v != center))
                .map(|(v, t)| (ticks_to_meters(t), v))
                .collect()
        }
        Metric::Euclidean => (0..n)
            .filter(|&v| include_center || v != center)
            .map(|v| (norm(sub(frame.position(v), pc)), v))
            .collect(),
    };
    if k > candidates.len() {
        return Err(GeometryError::TooFewNeighbors {
            k,
            available: candidates.len(),
            center,
        });
    }
    candidates.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| lex_cmp(&verts[a.1], &verts[b.1]))
            .then(a.1.cmp(&b.1))
    });
    candidates.truncate(k);

    let neighbor_indices: Vec<usize> = candidates.iter().map(|c| c.1).collect();
    let displacements = neighbor_indices
        .iter()
        .map(|&v| sub(frame.position(v), pc))
        .collect();
    Ok(Neighborhood {
        center,
        neighbor_indices,
        displacements,
        metric_distances: candidates.iter().map(|c| c.0).collect(),
        metric,
    })
}

/// Deterministic farthest point sampling: start from the lexicographically
/// smallest position, then repeatedly take the vertex farthest (euclidean)
/// from the chosen set.
pub fn farthest_point_sampling(frame: &MeshFrame, c: usize) -> Result<Vec<usize>, GeometryError> {
    let n = frame.vertex_count();
    if c > n {
        return Err(GeometryError::TooManyCenters {
            requested: c,
            available: n,
        });
    }
    if c == 0 {
        return Ok(Vec::new());
    }
    let verts = frame.vertices();
    let better = |a: usize, b: usize| lex_cmp(&verts[a], &verts[b]).then(a.cmp(&b)).is_lt();
    let mut first = 0;
    for v in 1..n {
        if better(v, first) {
            first = v;
        }
    }
    let mut chosen = vec![first];
    let mut taken = vec![false; n];
    taken[first] = true;
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut last = first;
    while chosen.len() < c {
        let pl = frame.position(last);
        let mut best: Option<usize> = None;
        for v in 0..n {
            let d = sub(frame.position(v), pl);
            let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            if d2 < min_d2[v] {
                min_d2[v] = d2;
            }
            if taken[v] {
                continue;
            }
            best = match best {
                None => Some(v),
                Some(b) => match min_d2[v].total_cmp(&min_d2[b]) {
                    Ordering::Greater => Some(v),
                    Ordering::Equal if better(v, b) => Some(v),
                    _ => Some(b),
                },
            };
        }
        let next = best.expect("c <= n leaves an untaken vertex");
        taken[next] = true;
        chosen.push(next);
        last = next;
    }
    Ok(chosen)
}

#[derive(Debug, Clone, Copy)]
pub struct PatchOptions {
    pub centers: usize,
    pub k: usize,
    /// Put the center itself (zero displacement) at the head of each neighborhood.
    pub include_center: bool,
}

/// FPS centers with both a geodesic and a euclidean neighborhood per center.
pub fn build_frame_patches(
    frame: &MeshFrame,
    frame_index: usize,
    c: usize,
    k: usize,
) -> Result<PatchSet, GeometryError> {
    build_frame_patches_with(
        frame,
        frame_index,
        PatchOptions {
            centers: c,
            k,
            include_center: false,
        },
    )
}

pub fn build_frame_patches_with(
    frame: &MeshFrame,
    frame_index: usize,
    opts: PatchOptions,
) -> Result<PatchSet, GeometryError> {
    if opts.centers == 0 {
        return Err(GeometryError::Zero("patch count"));
    }
    if opts.k == 0 {
        return Err(GeometryError::Zero("k"));
    }
    let centers = farthest_point_sampling(frame, opts.centers)?;
    let adj = frame.adjacency();
    let mut geo = Vec::with_capacity(centers.len());
    let mut euc = Vec::with_capacity(centers.len());
    for &ctr in &centers {
        geo.push(knn_inner(frame, Some(&adj), ctr, opts.k, Metric::Geodesic, opts.include_center)?);
        euc.push(knn_inner(frame, None, ctr, opts.k, Metric::Euclidean, opts.include_center)?);
    }
    Ok(PatchSet {
        frame_index,
        centers,
        geo,
        euc,
    })
}

/// Tab-separated debug table: `center  metric  neighbor  distance`.
pub fn dump_patches(patches: &PatchSet) -> String {
    let mut out = String::from("center\tmetric\tneighbor\tdistance\n");
    for nb in patches.geo.iter().chain(&patches.euc) {
        for (&v, &d) in nb.neighbor_indices.iter().zip(&nb.metric_distances) {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", nb.center, nb.metric.as_str(), v, d);
        }
    }
    out
}
