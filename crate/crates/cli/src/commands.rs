use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde_json::json;

use meshmotion::augment::{synthesize_corpus, PoseCorpus, PoseRecord, ShuffleOptions, PART_COUNT};
use meshmotion::data::{build_inputs, SequenceInput};
use meshmotion::datagen::{make_dataset, pose_to_own_mesh};
use meshmotion::mesh::{ManifestRecord, MeshSequence, Split};
use meshmotion::model::{attention_rows, format_attention, AttentionMode, Model};
use meshmotion::params::ParamStore;
use meshmotion::ssl::{evaluate_pretraining, format_loss_log, run_pretraining, PretrainConfig};
use meshmotion::train::{evaluate, finetune as run_finetune, load_pretrained_encoder, FinetuneConfig, Metrics};

use crate::config::RunConfig;
use crate::store::{self, DatasetDir};

pub const CHECKPOINT: &str = "checkpoint.mckp";

#[derive(Args)]
pub struct ShuffleArgs {
    /// Dataset directory holding the donor pose corpus.
    #[arg(long)]
    data: PathBuf,
    /// Manifest splits whose poses form the donor pool.
    #[arg(long, value_delimiter = ',', default_value = "train")]
    pool: Vec<Split>,
    /// Shuffles to draw; overrides augment.count.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
pub struct PretrainArgs {
    /// Dataset directories; train and pretrain records are used. Repeatable.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pretraining checkpoint whose encoder initializes the model.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args)]
pub struct AttentionArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sequence id from the manifest.
    #[arg(long)]
    id: String,
    /// Attention mask; defaults to model.attention.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<AttentionMode>,
}

fn parse_mode(s: &str) -> std::result::Result<AttentionMode, String> {
    match s {
        "bidirectional" => Ok(AttentionMode::Bidirectional),
        "causal" => Ok(AttentionMode::Causal),
        other => Err(format!("unknown attention mode {other:?}; expected bidirectional or causal")),
    }
}

fn begin(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    store::write(out.join(store::CONFIG_ECHO), cfg.to_toml())
}

fn inputs(cfg: &RunConfig, seqs: &[MeshSequence]) -> Result<Vec<SequenceInput>> {
    Ok(build_inputs(seqs, &cfg.model.input_options())?)
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    store::require_file(checkpoint, "--checkpoint")?;
    let mut model = Model::new(cfg.model.clone())?;
    let params = ParamStore::load(checkpoint)?;
    model
        .params
        .load_matching(&params, |_| true)
        .with_context(|| format!("checkpoint {} does not fit the configured model", checkpoint.display()))?;
    Ok(model)
}

fn write_metrics(out: &Path, sections: &[(&str, &Metrics)]) -> Result<()> {
    let mut text = String::new();
    let mut obj = serde_json::Map::new();
    for (name, m) in sections {
        for line in m.to_key_values().lines() {
            let _ = writeln!(text, "{name}.{line}");
        }
        obj.insert(name.to_string(), serde_json::to_value(m)?);
    }
    store::write(out.join("metrics.txt"), text)?;
    store::write(out.join("metrics.json"), serde_json::to_string_pretty(&obj)? + "\n")
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    begin(cfg, out)?;
    let ds = make_dataset(&cfg.dataset_spec()?)?;
    store::write_dataset(out, &ds.sequences, &ds.manifest)?;
    ds.poses.save(&out.join(store::POSES))?;
    println!(
        "wrote {} sequences to {} (train {}, test {}, val {})",
        ds.sequences.len(),
        out.display(),
        ds.split.train.len(),
        ds.split.test.len(),
        ds.split.val.len()
    );
    Ok(())
}

pub fn shuffle_augment(cfg: &RunConfig, out: &Path, args: &ShuffleArgs) -> Result<()> {
    let data = DatasetDir::open(&args.data)?;
    let poses = data.poses()?;
    let donors: Vec<&PoseRecord> = data
        .manifest
        .iter()
        .filter(|r| args.pool.contains(&r.split))
        .map(|r| {
            poses
                .records
                .iter()
                .find(|p| p.id == r.id)
                .with_context(|| format!("{} has no pose for {}", store::POSES, r.id))
        })
        .collect::<Result<_>>()?;
    if donors.len() < PART_COUNT {
        bail!("donor pool has {} sequences; joint shuffle needs at least {PART_COUNT}", donors.len());
    }
    let m = args.count.unwrap_or(cfg.augment.count);
    begin(cfg, out)?;
    let pool: Vec<_> = donors.iter().map(|r| r.pose.clone()).collect();
    let drawn = synthesize_corpus(&pool, m, &poses.partition, cfg.seed, ShuffleOptions::default())?;

    let mut records = Vec::with_capacity(m);
    let mut meshes = Vec::with_capacity(m);
    let mut provenance = String::from("id,part_0,part_1,part_2,part_3,part_4,shape\n");
    for (i, (pose, prov)) in drawn.into_iter().enumerate() {
        let id = format!("shuffle_{i:05}");
        meshes.push(pose_to_own_mesh(&pose, id.clone())?);
        let name = |k: usize| donors[k].id.as_str();
        let parts: Vec<&str> = prov.part_sources.iter().map(|&k| name(k)).collect();
        let _ = writeln!(provenance, "{id},{},{}", parts.join(","), name(prov.shape_source));
        records.push(PoseRecord {
            id,
            pose,
            provenance: Some(prov),
        });
    }
    let manifest: Vec<ManifestRecord> = records
        .iter()
        .map(|r| ManifestRecord {
            id: r.id.clone(),
            label: None,
            split: Split::Pretrain,
        })
        .collect();
    store::write_dataset(out, &meshes, &manifest)?;
    PoseCorpus {
        partition: poses.partition.clone(),
        records,
    }
    .save(&out.join(store::POSES))?;
    store::write(out.join("provenance.csv"), provenance)?;
    println!("wrote {m} shuffled sequences from {} donors to {}", donors.len(), out.display());
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, out: &Path, args: &PretrainArgs) -> Result<()> {
    let mut seqs = Vec::new();
    for dir in &args.data {
        seqs.extend(DatasetDir::open(dir)?.load(&[Split::Train, Split::Pretrain])?);
    }
    if seqs.is_empty() {
        bail!("no train or pretrain sequences in the given --data directories");
    }
    begin(cfg, out)?;
    let corpus = inputs(cfg, &seqs)?;
    let mut model = Model::new(cfg.model.clone())?;
    let pc = PretrainConfig {
        epochs: cfg.pretrain.epochs,
        batch_size: cfg.pretrain.batch_size,
        adam: cfg.pretrain.adam(),
        seed: cfg.seed,
    };
    let log = run_pretraining(&mut model, &corpus, &pc, |epoch, mean| {
        log::info!("pretrain epoch {}/{}: loss {mean:.6}", epoch + 1, pc.epochs);
    })?;
    model.params.save(&out.join(CHECKPOINT))?;
    store::write(out.join("loss_log.csv"), format_loss_log(&log.rows))?;

    let means = log.epoch_means();
    let frozen = evaluate_pretraining(&model, &corpus, cfg.seed, 1)?;
    let mut text = format!("sequences={}\nepochs={}\nsteps={}\n", corpus.len(), pc.epochs, log.rows.len());
    if let (Some(first), Some(last)) = (means.first(), means.last()) {
        let _ = write!(text, "first_epoch_loss={first}\nfinal_epoch_loss={last}\n");
    }
    let _ = write!(
        text,
        "eval_loss_mvm={}\neval_loss_ffp={}\neval_loss_total={}\n",
        frozen.loss_mvm, frozen.loss_ffp, frozen.loss_total
    );
    store::write(out.join("metrics.txt"), &text)?;
    let doc = json!({
        "sequences": corpus.len(),
        "epochs": pc.epochs,
        "steps": log.rows.len(),
        "epoch_loss": means,
        "eval": { "loss_mvm": frozen.loss_mvm, "loss_ffp": frozen.loss_ffp, "loss_total": frozen.loss_total },
    });
    store::write(out.join("metrics.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    print!("{text}");
    Ok(())
}

pub fn finetune(cfg: &RunConfig, out: &Path, args: &FinetuneArgs) -> Result<()> {
    let data = DatasetDir::open(&args.data)?;
    if let Some(init) = &args.init {
        store::require_file(init, "--init")?;
    }
    let train = inputs(cfg, &data.load(&[Split::Train])?)?;
    let val = inputs(cfg, &data.load(&[Split::Val])?)?;
    begin(cfg, out)?;
    let mut model = Model::new(cfg.model.clone())?;
    if let Some(init) = &args.init {
        let copied = load_pretrained_encoder(&mut model, &ParamStore::load(init)?)
            .with_context(|| format!("checkpoint {} does not fit the configured encoder", init.display()))?;
        log::info!("initialized {copied} encoder tensors from {}", init.display());
    }
    let fc = FinetuneConfig {
        epochs: cfg.finetune.epochs,
        batch_size: cfg.finetune.batch_size,
        adam: cfg.finetune.adam(),
        seed: cfg.seed,
        target_accuracy: cfg.finetune.target_accuracy,
    };
    let history = run_finetune(&mut model, &train, &fc, |s| {
        log::info!("finetune epoch {}/{}: loss {:.6} acc {:.3}", s.epoch + 1, fc.epochs, s.mean_loss, s.running_accuracy);
    })?;
    model.params.save(&out.join(CHECKPOINT))?;
    let mut csv = String::from("epoch,mean_loss,running_accuracy\n");
    for s in &history {
        let _ = writeln!(csv, "{},{:e},{}", s.epoch, s.mean_loss, s.running_accuracy);
    }
    store::write(out.join("history.csv"), csv)?;

    let train_metrics = evaluate(&model, &train)?;
    let val_metrics = if val.is_empty() { None } else { Some(evaluate(&model, &val)?) };
    let mut sections = vec![("train", &train_metrics)];
    if let Some(v) = &val_metrics {
        sections.push(("val", v));
    }
    write_metrics(out, &sections)?;
    for (name, m) in &sections {
        println!("{name}: top1 {:.4} top5 {:.4} over {}", m.top1, m.top5, m.count);
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, out: &Path, args: &EvalArgs) -> Result<()> {
    let data = DatasetDir::open(&args.data)?;
    let model = load_model(cfg, &args.checkpoint)?;
    let seqs = data.load(&[args.split])?;
    if seqs.is_empty() {
        bail!("split {} of {} is empty", args.split.as_str(), args.data.display());
    }
    begin(cfg, out)?;
    let metrics = evaluate(&model, &inputs(cfg, &seqs)?)?;
    write_metrics(out, &[(args.split.as_str(), &metrics)])?;
    println!(
        "{}: top1 {:.4} top5 {:.4} mean loss {:.6} over {}",
        args.split.as_str(),
        metrics.top1,
        metrics.top5,
        metrics.mean_loss,
        metrics.count
    );
    Ok(())
}

pub fn dump_attention(cfg: &RunConfig, out: &Path, args: &AttentionArgs) -> Result<()> {
    let data = DatasetDir::open(&args.data)?;
    let seq = data.load_id(&args.id)?;
    let model = load_model(cfg, &args.checkpoint)?;
    begin(cfg, out)?;
    let input = inputs(cfg, std::slice::from_ref(&seq))?.remove(0);
    let mode = args.mode.unwrap_or(cfg.model.attention);
    let rows = attention_rows(&model, &input, mode)?;
    let path = out.join("attention.tsv");
    store::write(&path, format_attention(&rows))?;
    println!("wrote {} attention weights for {} to {}", rows.len(), args.id, path.display());
    Ok(())
}
