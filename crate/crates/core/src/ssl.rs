//! Self-supervised pretraining: masked vertex modeling (MVM) over the patch
//! grid with bidirectional attention, and future frame prediction (FFP) of a
//! frame suffix with causal attention. Both share the encoder and decoder.

use rand::seq::{index, SliceRandom};
use thiserror::Error;

use crate::autograd::{Objective, Tape, Tensor, TensorError, Var};
use crate::data::SequenceInput;
use crate::model::{AttentionMode, Model, ModelConfig, ModelError, Net};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::real::Real;
use crate::seed;

#[derive(Debug, Error)]
pub enum SslError {
    #[error("mask: {0}")]
    Mask(String),
    #[error("pretraining corpus is empty")]
    EmptyCorpus,
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SslError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Mvm,
    Ffp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub mode: MaskMode,
    pub ratio: f64,
    pub future_fraction: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ratio", self.ratio), ("future_fraction", self.future_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(SslError::Mask(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        Ok(())
    }

    /// Patch mask for MVM (over `t * c` patches) or frame mask for FFP.
    pub fn sample(&self, t: usize, c: usize) -> Result<Vec<bool>> {
        self.validate()?;
        match self.mode {
            MaskMode::Mvm => sample_mvm_mask(t * c, self.ratio, self.seed),
            MaskMode::Ffp => sample_ffp_mask(t, self.future_fraction),
        }
    }
}

/// Masks exactly `round(r * p)` of `p` patches, drawn without replacement.
/// `true` = masked.
pub fn sample_mvm_mask(p: usize, r: f64, seed: u64) -> Result<Vec<bool>> {
    if p < 2 {
        return Err(SslError::Mask(format!("need at least 2 patches, got {p}")));
    }
    let n = (r * p as f64).round() as usize;
    if n == 0 || n >= p {
        return Err(SslError::Mask(format!(
            "ratio {r} masks {n} of {p} patches; need between 1 and {}",
            p - 1
        )));
    }
    let mut mask = vec![false; p];
    for i in index::sample(&mut seed::rng(seed, &[]), p, n) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Masks the last `ceil(f * t)` frames. `true` = masked.
pub fn sample_ffp_mask(t: usize, f: f64) -> Result<Vec<bool>> {
    if t < 2 {
        return Err(SslError::Mask(format!("need at least 2 frames, got {t}")));
    }
    // guard against f * t landing a hair above an integer
    let n = ((f * t as f64) - 1e-9).ceil().max(1.0) as usize;
    if n >= t {
        return Err(SslError::Mask(format!(
            "future fraction {f} masks all {t} frames; the visible prefix would be empty"
        )));
    }
    Ok((0..t).map(|i| i >= t - n).collect())
}

/// Symmetric unsquared chamfer distance between two nonempty point sets.
pub fn chamfer_distance(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(x.len(), 3, x.concat())?)?;
    let b = tape.constant(Tensor::matrix(y.len(), 3, y.concat())?)?;
    let d = tape.chamfer(a, b)?;
    Ok(tape.value(d).item())
}

/// Mean chamfer distance over regions: rows `[i * n, (i + 1) * n)` of
/// `pred` against the `i`-th target block.
pub fn region_chamfer<T: Real>(tape: &mut Tape<T>, pred: Var, targets: &[&[f64]], n: usize) -> Result<Var> {
    if targets.is_empty() {
        return Err(SslError::Mask("no regions to reconstruct".into()));
    }
    let mut terms = Vec::with_capacity(targets.len());
    for (i, t) in targets.iter().enumerate() {
        let p = tape.slice_rows(pred, i * n, n)?;
        let y = tape.constant(Tensor::matrix(t.len() / 3, 3, t.to_vec())?)?;
        let cd = tape.chamfer(p, y)?;
        terms.push(tape.reshape(cd, &[1, 1])?);
    }
    let all = tape.concat_rows(&terms)?;
    Ok(tape.mean(all)?)
}

/// MVM objective: encode the visible patches bidirectionally, decode every
/// masked patch's center and neighbors from its mask query as offsets from
/// the patch center.
pub fn mvm_loss<T: Real>(tape: &mut Tape<T>, net: Net<'_>, input: &SequenceInput, mask: &[bool]) -> Result<Var> {
    let keep: Vec<usize> = (0..mask.len()).filter(|&p| !mask[p]).collect();
    let hidden: Vec<usize> = (0..mask.len()).filter(|&p| mask[p]).collect();
    let enc = net.encode(tape, input, &keep, AttentionMode::Bidirectional)?;
    let queries = net.mask_queries(tape, input, enc.features, &hidden, false)?;
    let n = input.points_per_patch();
    let offsets = net.reconstruct_many(tape, queries, n)?;
    // each query already carries its center; the decoder only adds shape
    let anchors: Vec<f64> = hidden.iter().flat_map(|&p| (0..n).flat_map(move |_| input.center(p))).collect();
    let anchors = tape.constant(Tensor::matrix(hidden.len() * n, 3, anchors)?)?;
    let pred = tape.add(offsets, anchors)?;
    let targets: Vec<&[f64]> = hidden.iter().map(|&p| input.patch_targets(p)).collect();
    region_chamfer(tape, pred, &targets, n)
}

/// FFP objective: encode the visible frame prefix causally, decode each
/// masked frame's full patch point set from one query per frame. Masked
/// frames contribute only their frame index.
pub fn ffp_loss<T: Real>(tape: &mut Tape<T>, net: Net<'_>, input: &SequenceInput, frame_mask: &[bool]) -> Result<Var> {
    let c = input.c;
    let keep: Vec<usize> = (0..input.patch_count()).filter(|&p| !frame_mask[p / c]).collect();
    let future: Vec<usize> = (0..input.t).filter(|&f| frame_mask[f]).collect();
    let enc = net.encode(tape, input, &keep, AttentionMode::Causal)?;
    let probes: Vec<usize> = future.iter().map(|&f| f * c).collect();
    let queries = net.mask_queries(tape, input, enc.features, &probes, true)?;
    let n = c * input.points_per_patch();
    let pred = net.reconstruct_many(tape, queries, n)?;
    let targets: Vec<&[f64]> = future.iter().map(|&f| input.frame_targets(f)).collect();
    region_chamfer(tape, pred, &targets, n)
}

/// `lambda1 * mvm + lambda2 * ffp`; an absent term counts as zero.
pub fn pretrain_loss<T: Real>(tape: &mut Tape<T>, mvm: Option<Var>, ffp: Option<Var>, lambda1: f64, lambda2: f64) -> Result<Var> {
    let mut total = None;
    for (term, w) in [(mvm, lambda1), (ffp, lambda2)] {
        if let Some(v) = term {
            let s = tape.scale(v, w)?;
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.constant(Tensor::scalar(0.0))?),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PretrainBatchResult {
    pub loss_mvm: f64,
    pub loss_ffp: f64,
    pub loss_total: f64,
    pub masked_patches: usize,
    pub masked_frames: usize,
}

/// Both objectives on one sequence. A term whose weight is zero is skipped
/// and reported as 0.
pub fn sequence_objective<T: Real>(
    tape: &mut Tape<T>,
    net: Net<'_>,
    input: &SequenceInput,
    mvm_mask: &[bool],
    ffp_mask: &[bool],
) -> Result<(Var, PretrainBatchResult)> {
    let cfg = net.cfg;
    let mvm = if cfg.lambda1 > 0.0 {
        Some(mvm_loss(tape, net, input, mvm_mask)?)
    } else {
        None
    };
    let ffp = if cfg.lambda2 > 0.0 {
        Some(ffp_loss(tape, net, input, ffp_mask)?)
    } else {
        None
    };
    let total = pretrain_loss(tape, mvm, ffp, cfg.lambda1, cfg.lambda2)?;
    let value = |v: Option<Var>| v.map(|v| tape.value(v).item().to_f64()).unwrap_or(0.0);
    let result = PretrainBatchResult {
        loss_mvm: value(mvm),
        loss_ffp: value(ffp),
        loss_total: tape.value(total).item().to_f64(),
        masked_patches: if mvm.is_some() { mvm_mask.iter().filter(|&&m| m).count() } else { 0 },
        masked_frames: if ffp.is_some() { ffp_mask.iter().filter(|&&m| m).count() } else { 0 },
    };
    Ok((total, result))
}

/// The pretraining loss of one sequence under fixed masks, for gradient
/// checks.
pub struct PretrainObjective<'a> {
    pub config: &'a ModelConfig,
    pub input: &'a SequenceInput,
    pub mvm_mask: &'a [bool],
    pub ffp_mask: &'a [bool],
}

impl Objective for PretrainObjective<'_> {
    fn loss<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore) -> std::result::Result<Var, TensorError> {
        let net = Net {
            cfg: self.config,
            params: store,
        };
        match sequence_objective(tape, net, self.input, self.mvm_mask, self.ffp_mask) {
            Ok((loss, _)) => Ok(loss),
            Err(SslError::Tensor(e)) | Err(SslError::Model(ModelError::Tensor(e))) => Err(e),
            Err(other) => Err(TensorError::Argument {
                op: "pretrain objective",
                detail: other.to_string(),
            }),
        }
    }
}

/// Masks for sequence `index` in `epoch`, reproducible from the run seed.
pub fn masks_for(cfg_seed: u64, epoch: usize, index: usize, input: &SequenceInput, r: f64, f: f64) -> Result<(Vec<bool>, Vec<bool>)> {
    let s = seed::derive_seed(cfg_seed, &[epoch as u64, index as u64]);
    let mvm = MaskSpec {
        mode: MaskMode::Mvm,
        ratio: r,
        future_fraction: f,
        seed: s,
    };
    let ffp = MaskSpec { mode: MaskMode::Ffp, ..mvm };
    Ok((mvm.sample(input.t, input.c)?, ffp.sample(input.t, input.c)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// One optimizer step of the loss log; losses are batch means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub result: PretrainBatchResult,
}

pub fn format_loss_log(rows: &[LossRow]) -> String {
    let mut out = String::from("epoch,step,loss_mvm,loss_ffp,loss_total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:e},{:e},{:e}\n",
            r.epoch, r.step, r.result.loss_mvm, r.result.loss_ffp, r.result.loss_total
        ));
    }
    out
}

/// Mean `loss_total` per epoch, weighted by batch size.
pub fn epoch_means(rows: &[LossRow], batch_sizes: &[usize]) -> Vec<f64> {
    let epochs = rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    let mut sum = vec![0.0; epochs];
    let mut count = vec![0usize; epochs];
    for (r, &b) in rows.iter().zip(batch_sizes) {
        sum[r.epoch] += r.result.loss_total * b as f64;
        count[r.epoch] += b;
    }
    sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect()
}

/// Result of [`run_pretraining`].
#[derive(Debug, Clone)]
pub struct PretrainLog {
    pub rows: Vec<LossRow>,
    /// Sequences in each logged step.
    pub batch_sizes: Vec<usize>,
}

impl PretrainLog {
    pub fn epoch_means(&self) -> Vec<f64> {
        epoch_means(&self.rows, &self.batch_sizes)
    }
}

/// Adam over shuffled mini-batches; gradients are averaged over each batch.
/// `on_epoch` receives each epoch's mean total loss.
pub fn run_pretraining(
    model: &mut Model,
    corpus: &[SequenceInput],
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<PretrainLog> {
    if corpus.is_empty() {
        return Err(SslError::EmptyCorpus);
    }
    if cfg.batch_size == 0 {
        return Err(SslError::Config("batch_size must be >= 1".into()));
    }
    model.config.validate()?;
    let (r, f) = (model.config.mask_ratio, model.config.future_fraction);
    let mut opt = Adam::new(cfg.adam, &model.params);
    let mut log = PretrainLog {
        rows: Vec::new(),
        batch_sizes: Vec::new(),
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[0x5eed, epoch as u64]));
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.params.zero_grad();
            let mut acc = PretrainBatchResult::default();
            for &i in batch {
                let input = &corpus[i];
                let (mvm_mask, ffp_mask) = masks_for(cfg.seed, epoch, i, input, r, f)?;
                let mut tape = Tape::new();
                let (loss, res) = sequence_objective(&mut tape, model.net(), input, &mvm_mask, &ffp_mask)?;
                tape.backward_into(loss, &mut model.params)?;
                acc.loss_mvm += res.loss_mvm;
                acc.loss_ffp += res.loss_ffp;
                acc.loss_total += res.loss_total;
                acc.masked_patches += res.masked_patches;
                acc.masked_frames += res.masked_frames;
            }
            let b = batch.len() as f64;
            model.params.scale_grads(1.0 / b);
            opt.step(&mut model.params);
            epoch_sum += acc.loss_total;
            acc.loss_mvm /= b;
            acc.loss_ffp /= b;
            acc.loss_total /= b;
            log.rows.push(LossRow { epoch, step, result: acc });
            log.batch_sizes.push(batch.len());
            step += 1;
        }
        let mean = epoch_sum / corpus.len() as f64;
        log::debug!("pretrain epoch {epoch}: mean loss {mean:.6}");
        on_epoch(epoch, mean);
    }
    Ok(log)
}

/// Mean pretraining loss of a frozen model over `corpus`, each sequence
/// scored under `draws` fresh mask pairs. Mask streams are disjoint from the
/// ones `run_pretraining` uses with the same seed.
pub fn evaluate_pretraining(model: &Model, corpus: &[SequenceInput], seed: u64, draws: usize) -> Result<PretrainBatchResult> {
    if corpus.is_empty() {
        return Err(SslError::EmptyCorpus);
    }
    if draws == 0 {
        return Err(SslError::Config("draws must be >= 1".into()));
    }
    model.config.validate()?;
    let (r, f) = (model.config.mask_ratio, model.config.future_fraction);
    let eval_seed = seed::derive_seed(seed, &[0xe7a1]);
    let mut acc = PretrainBatchResult::default();
    for draw in 0..draws {
        for (i, input) in corpus.iter().enumerate() {
            let (mvm_mask, ffp_mask) = masks_for(eval_seed, draw, i, input, r, f)?;
            let mut tape = Tape::new();
            let (_, res) = sequence_objective(&mut tape, model.net(), input, &mvm_mask, &ffp_mask)?;
            acc.loss_mvm += res.loss_mvm;
            acc.loss_ffp += res.loss_ffp;
            acc.loss_total += res.loss_total;
            acc.masked_patches += res.masked_patches;
            acc.masked_frames += res.masked_frames;
        }
    }
    let n = (draws * corpus.len()) as f64;
    acc.loss_mvm /= n;
    acc.loss_ffp /= n;
    acc.loss_total /= n;
    Ok(acc)
}
