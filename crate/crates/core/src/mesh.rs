//! Mesh-sequence data model, validation and the MSEQ / manifest file formats.
//!
//! MSEQ layout (all little-endian):
//!
//! ```text
//! magic   "MSEQ"            4 bytes
//! version u16               currently 1
//! t       u32               frame count, >= 1
//! per frame:
//!   n     u32               vertex count, >= 1
//!   xyz   n * 3 * f32       vertex positions in meters
//!   e     u32               edge count
//!   pairs e * 2 * u32       undirected edges, stored once
//! ```
//!
//! Sequence ids are the file stem. Labels live in the manifest, a text file
//! with one `id,label,split` record per line (`label` empty when unlabeled).

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{FormatError, Reader, Writer};

pub const MSEQ_MAGIC: &[u8; 4] = b"MSEQ";
pub const MSEQ_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid mesh frame: {0:?}")]
    Invalid(Vec<Violation>),
    #[error("argument error: {0}")]
    Argument(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
}

/// One broken invariant of a [`MeshFrame`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoVertices,
    NonFiniteCoordinate { vertex: usize },
    IndexOutOfRange { edge: usize, index: u32, vertex_count: usize },
    SelfEdge { edge: usize, vertex: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoVertices => write!(f, "frame has no vertices"),
            Violation::NonFiniteCoordinate { vertex } => {
                write!(f, "non-finite coordinate at vertex {vertex}")
            }
            Violation::IndexOutOfRange {
                edge,
                index,
                vertex_count,
            } => write!(
                f,
                "index out of range: edge {edge} references {index} with {vertex_count} vertices"
            ),
            Violation::SelfEdge { edge, vertex } => {
                write!(f, "self-edge: edge {edge} joins vertex {vertex} to itself")
            }
        }
    }
}

/// Vertex positions plus an undirected edge set. Each edge is stored once and
/// queried in both directions, so the implied adjacency is symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshFrame {
    vertices: Vec<[f32; 3]>,
    edges: Vec<[u32; 2]>,
}

impl MeshFrame {
    pub fn new(vertices: Vec<[f32; 3]>, edges: Vec<[u32; 2]>) -> Result<Self, MeshError> {
        let frame = Self { vertices, edges };
        let violations = frame.validate();
        if violations.is_empty() {
            Ok(frame)
        } else {
            Err(MeshError::Invalid(violations))
        }
    }

    /// Builds a frame without checking invariants; pair with [`MeshFrame::validate`].
    pub fn new_unchecked(vertices: Vec<[f32; 3]>, edges: Vec<[u32; 2]>) -> Self {
        Self { vertices, edges }
    }

    pub fn vertices(&self) -> &[[f32; 3]] {
        &self.vertices
    }

    pub fn edges(&self) -> &[[u32; 2]] {
        &self.edges
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn position(&self, v: usize) -> [f64; 3] {
        let p = self.vertices[v];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    /// Every invariant violation; empty when the frame is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.vertices.len();
        if n == 0 {
            out.push(Violation::NoVertices);
        }
        for (i, p) in self.vertices.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                out.push(Violation::NonFiniteCoordinate { vertex: i });
            }
        }
        for (e, &[a, b]) in self.edges.iter().enumerate() {
            for idx in [a, b] {
                if idx as usize >= n {
                    out.push(Violation::IndexOutOfRange {
                        edge: e,
                        index: idx,
                        vertex_count: n,
                    });
                }
            }
            if a == b {
                out.push(Violation::SelfEdge { edge: e, vertex: a });
            }
        }
        out
    }

    /// Compressed symmetric adjacency.
    pub fn adjacency(&self) -> Adjacency {
        let n = self.vertices.len();
        let mut degree = vec![0usize; n + 1];
        for &[a, b] in &self.edges {
            degree[a as usize + 1] += 1;
            degree[b as usize + 1] += 1;
        }
        for i in 0..n {
            degree[i + 1] += degree[i];
        }
        let offsets = degree;
        let mut fill = offsets.clone();
        let mut neighbors = vec![0u32; offsets[n]];
        for &[a, b] in &self.edges {
            neighbors[fill[a as usize]] = b;
            fill[a as usize] += 1;
            neighbors[fill[b as usize]] = a;
            fill[b as usize] += 1;
        }
        Adjacency { offsets, neighbors }
    }

    /// True if (m, n) or (n, m) is an edge.
    pub fn has_edge(&self, m: u32, n: u32) -> bool {
        self.edges
            .iter()
            .any(|&[a, b]| (a == m && b == n) || (a == n && b == m))
    }
}

#[derive(Debug, Clone)]
pub struct Adjacency {
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
}

impl Adjacency {
    pub fn neighbors(&self, v: usize) -> &[u32] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }
}

/// Ordered frames of one motion, with optional action label.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshSequence {
    pub id: String,
    pub label: Option<usize>,
    pub frames: Vec<MeshFrame>,
}

impl MeshSequence {
    pub fn new(
        id: impl Into<String>,
        label: Option<usize>,
        frames: Vec<MeshFrame>,
    ) -> Result<Self, MeshError> {
        if frames.is_empty() {
            return Err(MeshError::Argument("sequence needs at least one frame".into()));
        }
        Ok(Self {
            id: id.into(),
            label,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Uniform temporal resampling to `t` frames (frame `i` takes source
    /// frame `floor(i * len / t)`); `t` larger than the source repeats frames.
    pub fn resample(&self, t: usize) -> Result<Self, MeshError> {
        if t == 0 {
            return Err(MeshError::Argument("resample target must be >= 1".into()));
        }
        let len = self.frames.len();
        let frames = (0..t).map(|i| self.frames[i * len / t].clone()).collect();
        Ok(Self {
            id: self.id.clone(),
            label: self.label,
            frames,
        })
    }
}

/// Reorders vertices so that old vertex `i` becomes vertex `perm[i]`; edges are
/// remapped accordingly.
pub fn scramble_vertices(frame: &MeshFrame, perm: &[usize]) -> Result<MeshFrame, MeshError> {
    let n = frame.vertex_count();
    if perm.len() != n {
        return Err(MeshError::Argument(format!(
            "permutation has length {}, frame has {n} vertices",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(MeshError::Argument(format!(
                "not a permutation of 0..{n}: entry {p}"
            )));
        }
        seen[p] = true;
    }
    let mut vertices = vec![[0f32; 3]; n];
    for (old, &new) in perm.iter().enumerate() {
        vertices[new] = frame.vertices[old];
    }
    let edges = frame
        .edges
        .iter()
        .map(|&[a, b]| [perm[a as usize] as u32, perm[b as usize] as u32])
        .collect();
    Ok(MeshFrame { vertices, edges })
}

pub fn encode_sequence(seq: &MeshSequence) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MSEQ_MAGIC);
    w.u16(MSEQ_VERSION);
    w.len_u32(seq.frames.len());
    for frame in &seq.frames {
        w.len_u32(frame.vertices.len());
        for p in &frame.vertices {
            for &c in p {
                w.f32(c);
            }
        }
        w.len_u32(frame.edges.len());
        for &[a, b] in &frame.edges {
            w.u32(a);
            w.u32(b);
        }
    }
    w.buf
}

/// Decodes an MSEQ payload. The result is unlabeled; `id` is supplied by the caller.
pub fn decode_sequence(bytes: &[u8], id: &str) -> Result<MeshSequence, MeshError> {
    let mut r = Reader::new(bytes);
    r.magic(MSEQ_MAGIC)?;
    let at = r.offset();
    let version = r.u16("version")?;
    if version != MSEQ_VERSION {
        return Err(FormatError {
            offset: at,
            message: format!("unsupported version {version}, expected {MSEQ_VERSION}"),
        }
        .into());
    }
    let at = r.offset();
    let t = r.count("frame count", 8)?;
    if t == 0 {
        return Err(FormatError {
            offset: at,
            message: "frame count must be >= 1".into(),
        }
        .into());
    }
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        let at = r.offset();
        let n = r.count("vertex count", 12)?;
        if n == 0 {
            return Err(FormatError {
                offset: at,
                message: "vertex count must be >= 1".into(),
            }
            .into());
        }
        let mut vertices = Vec::with_capacity(n);
        for _ in 0..n {
            vertices.push([r.f32("x")?, r.f32("y")?, r.f32("z")?]);
        }
        let e = r.count("edge count", 8)?;
        let mut edges = Vec::with_capacity(e);
        for _ in 0..e {
            edges.push([r.u32("edge")?, r.u32("edge")?]);
        }
        let frame = MeshFrame { vertices, edges };
        let violations = frame.validate();
        if !violations.is_empty() {
            return Err(r
                .error(format!("frame ending here is invalid: {}", violations[0]))
                .into());
        }
        frames.push(frame);
    }
    r.finish()?;
    Ok(MeshSequence {
        id: id.to_string(),
        label: None,
        frames,
    })
}

pub fn save_sequence(seq: &MeshSequence, path: &Path) -> Result<(), MeshError> {
    std::fs::write(path, encode_sequence(seq)).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads an MSEQ file; the id is the file stem and the label is left empty.
pub fn load_sequence(path: &Path) -> Result<MeshSequence, MeshError> {
    let bytes = std::fs::read(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_sequence(&bytes, &id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Val,
    Pretrain,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
            Split::Pretrain => "pretrain",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "val" => Ok(Split::Val),
            "pretrain" => Ok(Split::Pretrain),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub label: Option<usize>,
    pub split: Split,
}

pub fn format_manifest(records: &[ManifestRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let label = r.label.map(|l| l.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", r.id, label, r.split.as_str()));
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>, MeshError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| MeshError::Manifest {
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        if fields[0].is_empty() {
            return Err(err("empty id".into()));
        }
        let label = if fields[1].is_empty() {
            None
        } else {
            Some(
                fields[1]
                    .parse::<usize>()
                    .map_err(|e| err(format!("label {:?}: {e}", fields[1])))?,
            )
        };
        let split = fields[2].parse::<Split>().map_err(err)?;
        out.push(ManifestRecord {
            id: fields[0].to_string(),
            label,
            split,
        });
    }
    Ok(out)
}

/// Train / test / validation id lists.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub val: Vec<String>,
    pub ratios: [f64; 3],
}

impl DatasetSplit {
    /// Checks disjointness and that the union is exactly `all`.
    pub fn check(&self, all: &[String]) -> Result<(), MeshError> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.test).chain(&self.val) {
            if !seen.insert(id.as_str()) {
                return Err(MeshError::Argument(format!("id {id} appears in two splits")));
            }
        }
        let expected: HashSet<&str> = all.iter().map(String::as_str).collect();
        if seen != expected {
            return Err(MeshError::Argument("splits do not cover the dataset".into()));
        }
        Ok(())
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        if self.train.iter().any(|x| x == id) {
            Some(Split::Train)
        } else if self.test.iter().any(|x| x == id) {
            Some(Split::Test)
        } else if self.val.iter().any(|x| x == id) {
            Some(Split::Val)
        } else {
            None
        }
    }
}
