//! The mesh-sequence transformer: surface field convolution, intra-frame
//! offset-attention, inter-frame attention, a pooling classifier head, and a
//! coarse-to-fine point decoder.
//!
//! Forward functions live on [`Net`], a borrowed view of a config and a
//! parameter store, so gradient checks can rebuild the graph from a perturbed
//! store.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Objective, Tape, Tensor, TensorError, Var};
use crate::data::{InputOptions, SequenceInput};
use crate::params::ParamStore;
use crate::real::Real;
use crate::seed;

const NORM_EPS: f64 = 1e-5;
/// Refined points emitted per coarse point.
pub const REFINE_FACTOR: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input does not match the model: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which neighborhood branches feed the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Geodesic and euclidean patches.
    Both,
    /// Geodesic patches only.
    Intrinsic,
    /// Euclidean patches only.
    Extrinsic,
}

impl FeatureMode {
    pub fn geo(self) -> bool {
        matches!(self, FeatureMode::Both | FeatureMode::Intrinsic)
    }

    pub fn euc(self) -> bool {
        matches!(self, FeatureMode::Both | FeatureMode::Extrinsic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Bidirectional,
    /// A query sees keys from its own frame and earlier frames.
    Causal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Patches per frame.
    pub c: usize,
    /// Neighbors per patch.
    pub k: usize,
    pub d_g: usize,
    pub d_e: usize,
    /// Query/key width.
    pub d_a: usize,
    pub inter_layers: usize,
    pub num_classes: usize,
    pub mask_ratio: f64,
    pub future_fraction: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub kernel_hidden: usize,
    pub head_hidden: usize,
    pub decoder_hidden: usize,
    pub features: FeatureMode,
    /// Inter-frame mask used for classification.
    pub attention: AttentionMode,
    pub include_center: bool,
    /// Resample sequences to this many frames before patching.
    pub frames: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c: 32,
            k: 16,
            d_g: 32,
            d_e: 32,
            d_a: 32,
            inter_layers: 2,
            num_classes: 6,
            mask_ratio: 0.5,
            future_fraction: 0.5,
            lambda1: 1.0,
            lambda2: 1.0,
            seed: 0,
            kernel_hidden: 16,
            head_hidden: 64,
            decoder_hidden: 64,
            features: FeatureMode::Both,
            attention: AttentionMode::Bidirectional,
            include_center: false,
            frames: None,
        }
    }
}

impl ModelConfig {
    /// Encoder width: `d_g + d_e` for both branches.
    pub fn d(&self) -> usize {
        let mut d = 0;
        if self.features.geo() {
            d += self.d_g;
        }
        if self.features.euc() {
            d += self.d_e;
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("c", self.c),
            ("k", self.k),
            ("d_g", self.d_g),
            ("d_e", self.d_e),
            ("d_a", self.d_a),
            ("inter_layers", self.inter_layers),
            ("num_classes", self.num_classes),
            ("kernel_hidden", self.kernel_hidden),
            ("head_hidden", self.head_hidden),
            ("decoder_hidden", self.decoder_hidden),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.frames == Some(0) {
            return Err(ModelError::Config("frames must be >= 1".into()));
        }
        for (name, v) in [("mask_ratio", self.mask_ratio), ("future_fraction", self.future_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(ModelError::Config(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ModelError::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn input_options(&self) -> InputOptions {
        InputOptions {
            c: self.c,
            k: self.k,
            frames: self.frames,
            include_center: self.include_center,
        }
    }

    /// Points reconstructed per patch: the center plus its neighbors.
    pub fn patch_points(&self) -> usize {
        self.k + 1
    }

    /// Coarse points the decoder can emit; sized for a whole frame.
    pub fn coarse_capacity(&self) -> usize {
        (self.c * self.patch_points()).div_ceil(REFINE_FACTOR)
    }
}

/// Inter-frame visibility between tokens, given each token's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub mode: AttentionMode,
    pub frames: Vec<usize>,
}

impl AttentionMask {
    pub fn new(mode: AttentionMode, frames: Vec<usize>) -> Self {
        Self { mode, frames }
    }

    /// Causal mode hides keys from later frames. Keys in the query's own
    /// frame stay visible, so first-frame queries always have a key.
    pub fn hidden(&self, query: usize, key: usize) -> bool {
        self.mode == AttentionMode::Causal && self.frames[key] > self.frames[query]
    }

    /// Row-major `[n, n]` mask, `true` = hidden.
    pub fn dense(&self) -> Vec<bool> {
        let n = self.frames.len();
        (0..n * n).map(|i| self.hidden(i / n, i % n)).collect()
    }
}

/// Which branch a set of intra-frame parameters belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Geo,
    Euc,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Geo => "geo",
            Branch::Euc => "euc",
        }
    }

    fn in_width(self) -> usize {
        match self {
            Branch::Geo => 4,
            Branch::Euc => 3,
        }
    }

    fn width(self, cfg: &ModelConfig) -> usize {
        match self {
            Branch::Geo => cfg.d_g,
            Branch::Euc => cfg.d_e,
        }
    }
}

/// Parameters and their configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn uniform(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    use rand::Rng;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("sized")
}

impl Model {
    /// Seeded initialization. Weights are U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    /// biases start at zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let d = cfg.d();
        let mut p = ParamStore::new();
        for branch in [Branch::Geo, Branch::Euc] {
            let active = match branch {
                Branch::Geo => cfg.features.geo(),
                Branch::Euc => cfg.features.euc(),
            };
            if !active {
                continue;
            }
            let (b, w, fw) = (branch.name(), branch.width(cfg), branch.in_width());
            let rng = &mut seed::rng(cfg.seed, &[1, branch as u64]);
            p.add_weight(format!("sfc.{b}.kernel.w1"), fw, cfg.kernel_hidden, rng);
            p.add_bias(format!("sfc.{b}.kernel.b1"), cfg.kernel_hidden);
            p.add_weight(format!("sfc.{b}.kernel.w2"), cfg.kernel_hidden, w, rng);
            p.add_bias(format!("sfc.{b}.kernel.b2"), w);
            p.add_weight(format!("sfc.{b}.lift"), 3, w, rng);
            p.add_weight(format!("oa.{b}.wq"), w, cfg.d_a, rng);
            p.add_weight(format!("oa.{b}.wk"), w, cfg.d_a, rng);
            p.add_weight(format!("oa.{b}.wv"), w, w, rng);
            // no bias: the normalization that follows would cancel it
            p.add_weight(format!("oa.{b}.phi.w"), w, w, rng);
        }
        let rng = &mut seed::rng(cfg.seed, &[2]);
        p.add_weight("pos.w", 4, d, rng);
        p.add_bias("pos.b", d);
        for l in 0..cfg.inter_layers {
            p.add_weight(format!("inter.{l}.wq"), d, cfg.d_a, rng);
            p.add_weight(format!("inter.{l}.wk"), d, cfg.d_a, rng);
            p.add_weight(format!("inter.{l}.wv"), d, d, rng);
        }
        let rng = &mut seed::rng(cfg.seed, &[3]);
        p.add_weight("head.w1", 2 * d, cfg.head_hidden, rng);
        p.add_bias("head.b1", cfg.head_hidden);
        p.add_weight("head.w2", cfg.head_hidden, cfg.num_classes, rng);
        p.add_bias("head.b2", cfg.num_classes);
        let rng = &mut seed::rng(cfg.seed, &[4]);
        p.add("mask_token", uniform(rng, &[1, d], 1.0 / (d as f64).sqrt()));
        p.add_weight("query.wq", d, cfg.d_a, rng);
        p.add_weight("query.wk", d, cfg.d_a, rng);
        p.add_weight("query.wv", d, d, rng);
        let h = cfg.decoder_hidden;
        p.add_weight("decoder.coarse.w1", d, h, rng);
        p.add_bias("decoder.coarse.b1", h);
        p.add_weight("decoder.coarse.w2", h, 3 * cfg.coarse_capacity(), rng);
        p.add_bias("decoder.coarse.b2", 3 * cfg.coarse_capacity());
        p.add_weight("decoder.refine.w1", 3 + d, h, rng);
        p.add_bias("decoder.refine.b1", h);
        p.add_weight("decoder.refine.w2", h, 3 * REFINE_FACTOR, rng);
        p.add_bias("decoder.refine.b2", 3 * REFINE_FACTOR);
        Ok(Self { config, params: p })
    }

    pub fn net(&self) -> Net<'_> {
        Net {
            cfg: &self.config,
            params: &self.params,
        }
    }

    /// Parameters shared with fine-tuning; the decoder and mask queries are
    /// pretraining-only.
    pub fn is_encoder_param(name: &str) -> bool {
        ["sfc.", "oa.", "pos.", "inter."].iter().any(|p| name.starts_with(p))
    }

    pub fn logits(&self, input: &SequenceInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = self.net().logits(&mut tape, input)?;
        Ok(tape.value(v).data().to_vec())
    }
}

/// Borrowed config and parameters; builds graphs on a tape.
#[derive(Clone, Copy)]
pub struct Net<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamStore,
}

/// Encoder output for a subset of patches.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[tokens, d]`
    pub features: Var,
    /// Patch index of each token.
    pub patches: Vec<usize>,
    /// Inter-frame attention matrix of each layer.
    pub attention: Vec<Var>,
}

fn gather_blocks(src: &[f64], block: usize, keep: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(keep.len() * block);
    for &p in keep {
        out.extend_from_slice(&src[p * block..(p + 1) * block]);
    }
    out
}

/// Sizes of the runs of equal consecutive values.
fn run_lengths(frames: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        if i > 0 && frames[i - 1] == *f {
            *out.last_mut().expect("nonempty") += 1;
        } else {
            out.push(1);
        }
    }
    out
}

impl<'a> Net<'a> {
    pub fn param<T: Real>(&self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("model has no parameter {name}"));
        Ok(tape.param(self.params, id)?)
    }

    fn affine<T: Real>(&self, tape: &mut Tape<T>, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = self.param(tape, w)?;
        let b = self.param(tape, b)?;
        let xw = tape.matmul(x, w)?;
        Ok(tape.add_row(xw, b)?)
    }

    fn check_input(&self, input: &SequenceInput) -> Result<()> {
        if input.c != self.cfg.c || input.k != self.cfg.k {
            return Err(ModelError::Input(format!(
                "input has c = {}, k = {}; model expects c = {}, k = {}",
                input.c, input.k, self.cfg.c, self.cfg.k
            )));
        }
        Ok(())
    }

    /// Per-patch surface field convolution: a two-layer kernel on each
    /// neighbor's displacement feature, multiplied elementwise with a linear
    /// lift of the neighbor position, summed over the `k` neighbors.
    /// `features` is `[P * k, 4 or 3]`, `points` is `[P * k, 3]`.
    pub fn surface_field_conv<T: Real>(&self, tape: &mut Tape<T>, branch: Branch, features: Var, points: Var) -> Result<Var> {
        let b = branch.name();
        let h = self.affine(tape, features, &format!("sfc.{b}.kernel.w1"), &format!("sfc.{b}.kernel.b1"))?;
        let h = tape.relu(h)?;
        let kernel = self.affine(tape, h, &format!("sfc.{b}.kernel.w2"), &format!("sfc.{b}.kernel.b2"))?;
        let lift = self.param(tape, &format!("sfc.{b}.lift"))?;
        let f = tape.matmul(points, lift)?;
        let prod = tape.mul(kernel, f)?;
        Ok(tape.segment_sum(prod, self.cfg.k)?)
    }

    /// Single-head self-attention within each contiguous row group.
    pub fn intra_frame_attention<T: Real>(&self, tape: &mut Tape<T>, branch: Branch, x: Var, groups: &[usize]) -> Result<Var> {
        let b = branch.name();
        let wq = self.param(tape, &format!("oa.{b}.wq"))?;
        let wk = self.param(tape, &format!("oa.{b}.wk"))?;
        let wv = self.param(tape, &format!("oa.{b}.wv"))?;
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let scale = 1.0 / (self.cfg.d_a as f64).sqrt();
        let mut parts = Vec::with_capacity(groups.len());
        let mut start = 0;
        for &g in groups {
            let qs = tape.slice_rows(q, start, g)?;
            let ks = tape.slice_rows(k, start, g)?;
            let vs = tape.slice_rows(v, start, g)?;
            let s = tape.matmul_nt(qs, ks)?;
            let s = tape.scale(s, scale)?;
            let a = tape.masked_softmax(s, &vec![false; g * g])?;
            parts.push(tape.matmul(a, vs)?);
            start += g;
        }
        Ok(tape.concat_rows(&parts)?)
    }

    /// `phi(x - f_sa) + x` with `phi` = linear map, per-group feature
    /// normalization, ReLU. `phi(0) = 0` for any weights.
    pub fn offset_branch<T: Real>(&self, tape: &mut Tape<T>, branch: Branch, x: Var, f_sa: Var, groups: &[usize]) -> Result<Var> {
        let b = branch.name();
        let diff = tape.sub(x, f_sa)?;
        let w = self.param(tape, &format!("oa.{b}.phi.w"))?;
        let a = tape.matmul(diff, w)?;
        let n = tape.group_norm(a, groups, NORM_EPS)?;
        let r = tape.relu(n)?;
        Ok(tape.add(r, x)?)
    }

    pub fn offset_attention<T: Real>(&self, tape: &mut Tape<T>, branch: Branch, x: Var, groups: &[usize]) -> Result<Var> {
        let f_sa = self.intra_frame_attention(tape, branch, x, groups)?;
        self.offset_branch(tape, branch, x, f_sa, groups)
    }

    /// Intra-frame features `[keep.len(), d]` for the listed patches, which
    /// must be sorted; patches of one frame attend only to each other.
    pub fn intra_frame_encode<T: Real>(&self, tape: &mut Tape<T>, input: &SequenceInput, keep: &[usize]) -> Result<Var> {
        self.check_input(input)?;
        let k = input.k;
        let frames: Vec<usize> = keep.iter().map(|&p| input.frame_of(p)).collect();
        let groups = run_lengths(&frames);
        let mut outs = Vec::with_capacity(2);
        for branch in [Branch::Geo, Branch::Euc] {
            let (feats, pts) = match branch {
                Branch::Geo if self.cfg.features.geo() => (&input.geo_features, &input.geo_points),
                Branch::Euc if self.cfg.features.euc() => (&input.euc_features, &input.euc_points),
                _ => continue,
            };
            let fw = branch.in_width();
            let f = tape.constant(Tensor::matrix(keep.len() * k, fw, gather_blocks(feats, k * fw, keep))?)?;
            let p = tape.constant(Tensor::matrix(keep.len() * k, 3, gather_blocks(pts, k * 3, keep))?)?;
            let x = self.surface_field_conv(tape, branch, f, p)?;
            outs.push(self.offset_attention(tape, branch, x, &groups)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            Ok(tape.concat_cols(&outs)?)
        }
    }

    /// Additive projection of `[x, y, z, frame / t]` rows to width `d`.
    pub fn positional<T: Real>(&self, tape: &mut Tape<T>, rows: Vec<f64>) -> Result<Var> {
        let n = rows.len() / 4;
        let x = tape.constant(Tensor::matrix(n, 4, rows)?)?;
        self.affine(tape, x, "pos.w", "pos.b")
    }

    fn position_rows(input: &SequenceInput, patches: &[usize], hide_centers: bool) -> Vec<f64> {
        let mut rows = Vec::with_capacity(patches.len() * 4);
        for &p in patches {
            let c = if hide_centers { [0.0; 3] } else { input.center(p) };
            rows.extend_from_slice(&c);
            rows.push(input.frame_of(p) as f64 / input.t as f64);
        }
        rows
    }

    /// Stacked single-head attention with residual connections. Returns the
    /// output and each layer's attention matrix.
    pub fn inter_frame_attend<T: Real>(&self, tape: &mut Tape<T>, x: Var, mask: &AttentionMask) -> Result<(Var, Vec<Var>)> {
        let dense = mask.dense();
        let scale = 1.0 / (self.cfg.d_a as f64).sqrt();
        let mut x = x;
        let mut attention = Vec::with_capacity(self.cfg.inter_layers);
        for l in 0..self.cfg.inter_layers {
            let wq = self.param(tape, &format!("inter.{l}.wq"))?;
            let wk = self.param(tape, &format!("inter.{l}.wk"))?;
            let wv = self.param(tape, &format!("inter.{l}.wv"))?;
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            let s = tape.matmul_nt(q, k)?;
            let s = tape.scale(s, scale)?;
            let a = tape.masked_softmax(s, &dense)?;
            let f_sa = tape.matmul(a, v)?;
            x = tape.add(x, f_sa)?;
            attention.push(a);
        }
        Ok((x, attention))
    }

    /// Full encoder over the listed (sorted) patches.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, input: &SequenceInput, keep: &[usize], mode: AttentionMode) -> Result<Encoded> {
        if keep.is_empty() {
            return Err(ModelError::Input("no visible patches".into()));
        }
        let intra = self.intra_frame_encode(tape, input, keep)?;
        let pos = self.positional(tape, Self::position_rows(input, keep, false))?;
        let x = tape.add(intra, pos)?;
        let mask = AttentionMask::new(mode, keep.iter().map(|&p| input.frame_of(p)).collect());
        let (features, attention) = self.inter_frame_attend(tape, x, &mask)?;
        Ok(Encoded {
            features,
            patches: keep.to_vec(),
            attention,
        })
    }

    /// Max-pool and mean-pool over all rows, then a two-layer perceptron.
    pub fn classify<T: Real>(&self, tape: &mut Tape<T>, features: Var) -> Result<Var> {
        let mx = tape.max_rows(features)?;
        let mn = tape.mean_rows(features)?;
        let g = tape.concat_cols(&[mx, mn])?;
        let h = self.affine(tape, g, "head.w1", "head.b1")?;
        let h = tape.relu(h)?;
        self.affine(tape, h, "head.w2", "head.b2")
    }

    /// Classification logits `[1, num_classes]` using the configured mask.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, input: &SequenceInput) -> Result<Var> {
        let all: Vec<usize> = (0..input.patch_count()).collect();
        let enc = self.encode(tape, input, &all, self.cfg.attention)?;
        self.classify(tape, enc.features)
    }

    /// Mask queries for hidden patches: a learned token plus the positional
    /// projection, cross-attending to the encoder output.
    pub fn mask_queries<T: Real>(
        &self,
        tape: &mut Tape<T>,
        input: &SequenceInput,
        encoded: Var,
        patches: &[usize],
        hide_centers: bool,
    ) -> Result<Var> {
        let pos = self.positional(tape, Self::position_rows(input, patches, hide_centers))?;
        let token = self.param(tape, "mask_token")?;
        let mq = tape.add_row(pos, token)?;
        let wq = self.param(tape, "query.wq")?;
        let wk = self.param(tape, "query.wk")?;
        let wv = self.param(tape, "query.wv")?;
        let q = tape.matmul(mq, wq)?;
        let k = tape.matmul(encoded, wk)?;
        let v = tape.matmul(encoded, wv)?;
        let s = tape.matmul_nt(q, k)?;
        let s = tape.scale(s, 1.0 / (self.cfg.d_a as f64).sqrt())?;
        let rows = patches.len() * tape.shape(encoded)[0];
        let a = tape.masked_softmax(s, &vec![false; rows])?;
        let ctx = tape.matmul(a, v)?;
        Ok(tape.add(mq, ctx)?)
    }

    /// Decodes each row of `g` (`[Q, d]`) into `n` points: a coarse
    /// perceptron emits `ceil(n / 4)` points, and a shared perceptron on
    /// `[coarse point, g]` adds four offsets to each. Returns `[Q * n, 3]`.
    pub fn reconstruct_many<T: Real>(&self, tape: &mut Tape<T>, g: Var, n: usize) -> Result<Var> {
        let q = tape.shape(g)[0];
        let cap = self.cfg.coarse_capacity();
        let coarse_n = n.div_ceil(REFINE_FACTOR);
        if n == 0 || coarse_n > cap {
            return Err(ModelError::Input(format!(
                "decoder emits at most {} points, asked for {n}",
                cap * REFINE_FACTOR
            )));
        }
        let h = self.affine(tape, g, "decoder.coarse.w1", "decoder.coarse.b1")?;
        let h = tape.relu(h)?;
        let co = self.affine(tape, h, "decoder.coarse.w2", "decoder.coarse.b2")?;
        let co = tape.reshape(co, &[q * cap, 3])?;
        let idx: Vec<usize> = (0..q).flat_map(|r| (0..coarse_n).map(move |i| r * cap + i)).collect();
        let coarse = tape.gather_rows(co, &idx)?;
        let owner: Vec<usize> = (0..q).flat_map(|r| std::iter::repeat_n(r, coarse_n)).collect();
        let gx = tape.gather_rows(g, &owner)?;
        let rin = tape.concat_cols(&[coarse, gx])?;
        let rh = self.affine(tape, rin, "decoder.refine.w1", "decoder.refine.b1")?;
        let rh = tape.relu(rh)?;
        let off = self.affine(tape, rh, "decoder.refine.w2", "decoder.refine.b2")?;
        let off = tape.reshape(off, &[q * coarse_n * REFINE_FACTOR, 3])?;
        let rep: Vec<usize> = (0..q * coarse_n)
            .flat_map(|i| std::iter::repeat_n(i, REFINE_FACTOR))
            .collect();
        let base = tape.gather_rows(coarse, &rep)?;
        let pts = tape.add(base, off)?;
        let per = coarse_n * REFINE_FACTOR;
        let keep: Vec<usize> = (0..q).flat_map(|r| (0..n).map(move |j| r * per + j)).collect();
        Ok(tape.gather_rows(pts, &keep)?)
    }

    pub fn reconstruct<T: Real>(&self, tape: &mut Tape<T>, g: Var, n: usize) -> Result<Var> {
        self.reconstruct_many(tape, g, n)
    }
}

/// Cross-entropy of one labeled sequence, for gradient checks.
pub struct ClassificationObjective<'a> {
    pub config: &'a ModelConfig,
    pub input: &'a SequenceInput,
    pub label: usize,
}

impl Objective for ClassificationObjective<'_> {
    fn loss<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore) -> std::result::Result<Var, TensorError> {
        let net = Net {
            cfg: self.config,
            params: store,
        };
        let logits = net.logits(tape, self.input).map_err(|e| match e {
            ModelError::Tensor(t) => t,
            other => TensorError::Argument {
                op: "classification objective",
                detail: other.to_string(),
            },
        })?;
        tape.cross_entropy(logits, self.label)
    }
}

/// One entry of an attention matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionRow {
    pub query_frame: usize,
    pub query_patch: usize,
    pub key_frame: usize,
    pub key_patch: usize,
    pub weight: f64,
}

/// Final-layer inter-frame attention over all patches under `mode`.
/// Patch numbers are per-frame positions.
pub fn attention_rows(model: &Model, input: &SequenceInput, mode: AttentionMode) -> Result<Vec<AttentionRow>> {
    let mut tape = Tape::new();
    let all: Vec<usize> = (0..input.patch_count()).collect();
    let enc = model.net().encode(&mut tape, input, &all, mode)?;
    let a = tape.value(*enc.attention.last().expect("inter_layers >= 1"));
    let n = all.len();
    let mut rows = Vec::with_capacity(n * n);
    for q in 0..n {
        for k in 0..n {
            rows.push(AttentionRow {
                query_frame: q / input.c,
                query_patch: q % input.c,
                key_frame: k / input.c,
                key_patch: k % input.c,
                weight: a.data()[q * n + k],
            });
        }
    }
    Ok(rows)
}

/// Tab-separated attention table with a header row.
pub fn format_attention(rows: &[AttentionRow]) -> String {
    let mut out = String::from("query_frame\tquery_patch\tkey_frame\tkey_patch\tweight\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:e}",
            r.query_frame, r.query_patch, r.key_frame, r.key_patch, r.weight
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{check_param_gradients, gradient_check};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            c: 4,
            k: 4,
            d_g: 4,
            d_e: 4,
            d_a: 4,
            kernel_hidden: 4,
            head_hidden: 6,
            decoder_hidden: 6,
            num_classes: 3,
            ..Default::default()
        }
    }

    fn random_input(t: usize, c: usize, k: usize, seed: u64) -> SequenceInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let p = t * c;
        SequenceInput {
            id: "r".into(),
            label: Some(0),
            t,
            c,
            k,
            centers: v(p * 3),
            geo_features: v(p * k * 4),
            geo_points: v(p * k * 3),
            euc_features: v(p * k * 3),
            euc_points: v(p * k * 3),
            targets: v(p * (k + 1) * 3),
        }
    }

    fn matrix(tape: &mut Tape, rows: usize, cols: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        tape.constant(Tensor::matrix(rows, cols, data).unwrap()).unwrap()
    }

    fn zero_params(model: &mut Model, prefix: &str) {
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let p = model.params.get_mut(id);
            if p.name.starts_with(prefix) {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn set_param(model: &mut Model, name: &str, f: impl Fn(&mut [f64])) {
        let id = model.params.id(name).unwrap();
        f(model.params.get_mut(id).value.data_mut());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert_eq!(ModelConfig::default().d(), 64);
        let bad = ModelConfig { mask_ratio: 1.0, ..Default::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("mask_ratio"));
        let bad = ModelConfig { k: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let geo = ModelConfig { features: FeatureMode::Intrinsic, ..Default::default() };
        assert_eq!(geo.d(), 32);
        let m = Model::new(geo).unwrap();
        assert!(m.params.id("sfc.euc.lift").is_none());
    }

    #[test]
    fn sfc_zero_weights_give_zero() {
        let mut m = Model::new(tiny()).unwrap();
        zero_params(&mut m, "sfc.geo");
        let mut tape = Tape::new();
        let f = matrix(&mut tape, 8, 4, 1);
        let p = matrix(&mut tape, 8, 3, 2);
        let out = m.net().surface_field_conv(&mut tape, Branch::Geo, f, p).unwrap();
        assert_eq!(tape.shape(out), &[2, 4]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sfc_single_neighbor_is_kernel_times_lift() {
        let cfg = ModelConfig { k: 1, ..tiny() };
        let m = Model::new(cfg).unwrap();
        let net = m.net();
        let mut tape = Tape::new();
        let f = matrix(&mut tape, 1, 4, 3);
        let p = matrix(&mut tape, 1, 3, 4);
        let out = net.surface_field_conv(&mut tape, Branch::Geo, f, p).unwrap();
        let h = net.affine(&mut tape, f, "sfc.geo.kernel.w1", "sfc.geo.kernel.b1").unwrap();
        let h = tape.relu(h).unwrap();
        let kern = net.affine(&mut tape, h, "sfc.geo.kernel.w2", "sfc.geo.kernel.b2").unwrap();
        let lift = net.param(&mut tape, "sfc.geo.lift").unwrap();
        let fl = tape.matmul(p, lift).unwrap();
        let expect = tape.mul(kern, fl).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(expect).data());
    }

    #[test]
    fn sfc_ignores_neighbor_order() {
        let m = Model::new(ModelConfig { k: 6, ..tiny() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let feats: Vec<f64> = (0..12 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pts: Vec<f64> = (0..12 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |order: &[usize]| {
            let mut tape = Tape::new();
            let f = tape.constant(Tensor::matrix(12, 4, gather_blocks(&feats, 4, order)).unwrap()).unwrap();
            let p = tape.constant(Tensor::matrix(12, 3, gather_blocks(&pts, 3, order)).unwrap()).unwrap();
            let out = m.net().surface_field_conv(&mut tape, Branch::Geo, f, p).unwrap();
            tape.value(out).data().to_vec()
        };
        let base = run(&(0..12).collect::<Vec<_>>());
        for s in 0..10 {
            let mut order: Vec<usize> = (0..6).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
            let full: Vec<usize> = order.iter().copied().chain(order.iter().map(|i| i + 6)).collect();
            assert_eq!(run(&full), base);
        }
    }

    #[test]
    fn offset_attention_is_identity_when_offset_vanishes() {
        let m = Model::new(tiny()).unwrap();
        let mut tape = Tape::new();
        let x = matrix(&mut tape, 6, 4, 5);
        let out = m.net().offset_branch(&mut tape, Branch::Geo, x, x, &[3, 3]).unwrap();
        assert_eq!(tape.value(out), tape.value(x));

        let mut zeroed = m.clone();
        zero_params(&mut zeroed, "oa.geo.phi");
        let mut tape = Tape::new();
        let x = matrix(&mut tape, 6, 4, 6);
        let out = zeroed.net().offset_attention(&mut tape, Branch::Geo, x, &[2, 4]).unwrap();
        assert_eq!(tape.value(out), tape.value(x));
    }

    #[test]
    fn single_patch_attention_returns_its_value() {
        let m = Model::new(tiny()).unwrap();
        let net = m.net();
        let mut tape = Tape::new();
        let x = matrix(&mut tape, 1, 4, 7);
        let f_sa = net.intra_frame_attention(&mut tape, Branch::Geo, x, &[1]).unwrap();
        let wv = net.param(&mut tape, "oa.geo.wv").unwrap();
        let v = tape.matmul(x, wv).unwrap();
        assert_eq!(tape.value(f_sa), tape.value(v));
        let out = net.offset_attention(&mut tape, Branch::Geo, x, &[1]).unwrap();
        assert_eq!(tape.shape(out), &[1, 4]);
    }

    #[test]
    fn offset_attention_gradient() {
        let m = Model::new(tiny()).unwrap();
        let x0 = Tensor::matrix(6, 4, (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect()).unwrap();
        let err = gradient_check(
            |tape, x| {
                let y = m.net().offset_attention(tape, Branch::Geo, x, &[3, 3]).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                let w = tape.constant(Tensor::matrix(6, 4, (0..24).map(|i| (i as f64).sin()).collect()).unwrap())?;
                let r = tape.mul(y, w)?;
                tape.sum(r)
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn intra_frame_branches_are_independent() {
        let cfg = ModelConfig { c: 32, k: 4, d_g: 32, d_e: 32, ..Default::default() };
        let m = Model::new(cfg).unwrap();
        let input = random_input(1, 32, 4, 9);
        let keep: Vec<usize> = (0..32).collect();
        let run = |m: &Model| {
            let mut tape = Tape::new();
            let v = m.net().intra_frame_encode(&mut tape, &input, &keep).unwrap();
            tape.value(v).clone()
        };
        let base = run(&m);
        assert_eq!(base.shape(), &[32, 64]);
        let mut zeroed = m.clone();
        zero_params(&mut zeroed, "oa.euc");
        let probe = run(&zeroed);
        for r in 0..32 {
            assert_eq!(&base.row(r)[..32], &probe.row(r)[..32]);
        }
        assert_ne!(
            (0..32).map(|r| base.row(r)[32..].to_vec()).collect::<Vec<_>>(),
            (0..32).map(|r| probe.row(r)[32..].to_vec()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn tied_branches_on_identical_patches_agree() {
        let mut m = Model::new(tiny()).unwrap();
        let mut input = random_input(2, 4, 4, 10);
        // geodesic features = euclidean displacement plus a distance channel
        input.geo_points = input.euc_points.clone();
        input.geo_features = input
            .euc_features
            .chunks(3)
            .flat_map(|d| [d[0], d[1], d[2], 0.5])
            .collect();
        let names = ["kernel.b1", "kernel.w2", "kernel.b2", "lift", "wq", "wk", "wv", "phi.w"];
        for n in names {
            let src = m.params.get(m.params.id(&format!("sfc.euc.{n}")).or(m.params.id(&format!("oa.euc.{n}"))).unwrap()).value.clone();
            let dst = m.params.id(&format!("sfc.geo.{n}")).or(m.params.id(&format!("oa.geo.{n}"))).unwrap();
            m.params.get_mut(dst).value = src;
        }
        let euc_w1 = m.params.get(m.params.id("sfc.euc.kernel.w1").unwrap()).value.data().to_vec();
        set_param(&mut m, "sfc.geo.kernel.w1", |w| {
            w[..euc_w1.len()].copy_from_slice(&euc_w1);
            w[euc_w1.len()..].iter_mut().for_each(|v| *v = 0.0);
        });
        let mut tape = Tape::new();
        let out = m.net().intra_frame_encode(&mut tape, &input, &(0..8).collect::<Vec<_>>()).unwrap();
        let v = tape.value(out);
        for r in 0..8 {
            assert_eq!(&v.row(r)[..4], &v.row(r)[4..]);
        }
    }

    #[test]
    fn uniform_attention_on_identical_tokens() {
        let m = Model::new(ModelConfig { inter_layers: 1, ..tiny() }).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(6, 8, [0.3, -0.2, 0.1, 0.0, 0.5, 0.25, -0.4, 0.9].repeat(6)).unwrap()).unwrap();
        let mask = AttentionMask::new(AttentionMode::Bidirectional, vec![0, 0, 1, 1, 2, 2]);
        let (out, att) = m.net().inter_frame_attend(&mut tape, x, &mask).unwrap();
        for &w in tape.value(att[0]).data() {
            assert!((w - 1.0 / 6.0).abs() < 1e-15);
        }
        let wv = m.net().param(&mut tape, "inter.0.wv").unwrap();
        let v = tape.matmul(x, wv).unwrap();
        for r in 0..6 {
            for j in 0..8 {
                let expect = tape.value(x).row(r)[j] + tape.value(v).row(0)[j];
                assert!((tape.value(out).row(r)[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_mask_pattern() {
        let m = Model::new(tiny()).unwrap();
        let mut tape = Tape::new();
        let x = matrix(&mut tape, 6, 8, 11);
        let frames = vec![0, 0, 1, 1, 2, 2];
        let mask = AttentionMask::new(AttentionMode::Causal, frames.clone());
        let (_, att) = m.net().inter_frame_attend(&mut tape, x, &mask).unwrap();
        for a in att {
            let a = tape.value(a);
            for q in 0..6 {
                let row = a.row(q);
                let visible = (0..6).filter(|&k| frames[k] <= frames[q]).count();
                assert_eq!(row.iter().filter(|&&w| w > 0.0).count(), visible);
                for k in 0..6 {
                    if frames[k] > frames[q] {
                        assert_eq!(row[k].to_bits(), 0.0f64.to_bits());
                    }
                }
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            // a second-frame query sees the first frame and its own frame
            assert_eq!((0..6).filter(|&k| a.row(2)[k] > 0.0).count(), 4);
        }
    }

    #[test]
    fn head_pooling_invariances() {
        let m = Model::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows: Vec<Vec<f64>> = (0..10).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let run = |rows: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::matrix(rows.len(), 8, rows.concat()).unwrap()).unwrap();
            let l = m.net().classify(&mut tape, x).unwrap();
            tape.value(l).data().to_vec()
        };
        let base = run(&rows);
        assert_eq!(base.len(), 3);
        let mut perm = rows.clone();
        perm.reverse();
        perm.swap(0, 4);
        assert_eq!(run(&perm), base);
        let doubled: Vec<Vec<f64>> = rows.iter().chain(&rows).cloned().collect();
        for (a, b) in run(&doubled).iter().zip(&base) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn classifier_gradients_match() {
        let mut m = Model::new(tiny()).unwrap();
        let input = random_input(3, 4, 4, 13);
        let cfg = m.config.clone();
        let objective = ClassificationObjective {
            config: &cfg,
            input: &input,
            label: 1,
        };
        let checks = check_param_gradients(&mut m.params, 1e-6, &objective).unwrap();
        for c in checks {
            assert!(c.max_rel_err < 1e-5, "{}: {}", c.name, c.max_rel_err);
        }
    }

    #[test]
    fn decoder_contract() {
        let cfg = ModelConfig { c: 16, k: 15, ..tiny() };
        let m = Model::new(cfg).unwrap();
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::zeros(&[1, 8])).unwrap();
        let pts = m.net().reconstruct(&mut tape, g, 64).unwrap();
        assert_eq!(tape.shape(pts), &[64, 3]);
        assert!(tape.value(pts).data().iter().all(|&v| v == 0.0));
        let odd = m.net().reconstruct(&mut tape, g, 7).unwrap();
        assert_eq!(tape.shape(odd), &[7, 3]);
        assert!(m.net().reconstruct(&mut tape, g, 16 * 16 + 4).is_err());
    }

    #[test]
    fn decoder_chamfer_gradient() {
        let m = Model::new(ModelConfig { c: 4, k: 3, ..tiny() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let target: Vec<f64> = (0..16 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g0 = Tensor::matrix(1, 8, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let err = gradient_check(
            |tape, g| {
                let pts = m.net().reconstruct(tape, g, 16).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                let y = tape.constant(Tensor::matrix(16, 3, target.clone())?)?;
                tape.chamfer(pts, y)
            },
            &g0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn attention_dump_shape() {
        let m = Model::new(tiny()).unwrap();
        let input = random_input(3, 4, 4, 15);
        let rows = attention_rows(&m, &input, AttentionMode::Bidirectional).unwrap();
        assert_eq!(rows.len(), 144);
        let text = format_attention(&rows);
        assert_eq!(text.lines().count(), 145);
        for q in 0..12 {
            let s: f64 = rows[q * 12..(q + 1) * 12].iter().map(|r| r.weight).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let causal = attention_rows(&m, &input, AttentionMode::Causal).unwrap();
        assert!(causal.iter().filter(|r| r.key_frame > r.query_frame).all(|r| r.weight == 0.0));
    }
}
