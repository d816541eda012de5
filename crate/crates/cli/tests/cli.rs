use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "data.per_class=3",
    "--set", "data.t_min=4",
    "--set", "data.t_max=5",
    "--set", "model.c=4",
    "--set", "model.k=4",
    "--set", "model.frames=4",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshmotion"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY.iter().copied()).collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: PathBuf) -> Vec<u8> {
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn key_values(path: PathBuf) -> Vec<(String, f64)> {
    String::from_utf8(read(path))
        .unwrap()
        .lines()
        .map(|l| {
            let (k, v) = l.split_once('=').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect()
}

fn gen(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&with_tiny(&["gen-data", "--out", p(&data)]));
    data
}

#[test]
fn default_gen_data_has_sixty_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["gen-data", "--out", p(&out), "--set", "data.t_min=2", "--set", "data.t_max=3"]);
    let manifest = String::from_utf8(read(out.join("manifest.csv"))).unwrap();
    assert_eq!(manifest.lines().count(), 60);
    assert_eq!(std::fs::read_dir(out.join("sequences")).unwrap().count(), 60);
}

#[test]
fn gen_data_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&with_tiny(&["gen-data", "--seed", "7", "--out", p(&a)]));
    ok(&with_tiny(&["gen-data", "--seed", "7", "--out", p(&b)]));
    for f in ["manifest.csv", "poses.pose", "config.toml", "sequences/walk_002.mseq"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let c = dir.path().join("c");
    ok(&with_tiny(&["gen-data", "--seed", "8", "--out", p(&c)]));
    assert_ne!(read(a.join("poses.pose")), read(c.join("poses.pose")));
}

#[test]
fn invalid_ratios_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let err = fail(&["gen-data", "--out", p(&dir.path().join("x")), "--set", "data.ratios=[0.6, 0.3, 0.3]"]);
    assert!(err.contains("data.ratios"), "{err}");
}

#[test]
fn missing_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    let err = fail(&["gen-data", "--out", out, "--config", "/nonexistent/run.toml"]);
    assert!(err.contains("--config"), "{err}");
    let err = fail(&["finetune", "--out", out, "--data", "/nonexistent"]);
    assert!(err.contains("--data"), "{err}");
}

#[test]
fn shuffle_augment_writes_corpus_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let aug = dir.path().join("aug");
    ok(&with_tiny(&["shuffle-augment", "--data", p(&data), "--pool", "train,test,val", "--count", "25", "--out", p(&aug)]));
    assert_eq!(std::fs::read_dir(aug.join("sequences")).unwrap().count(), 25);
    let manifest = String::from_utf8(read(aug.join("manifest.csv"))).unwrap();
    assert!(manifest.lines().all(|l| l.ends_with(",,pretrain")));

    let donors = meshmotion::augment::PoseCorpus::load(&data.join("poses.pose")).unwrap();
    let corpus = meshmotion::augment::PoseCorpus::load(&aug.join("poses.pose")).unwrap();
    let provenance = String::from_utf8(read(aug.join("provenance.csv"))).unwrap();
    for (record, line) in corpus.records.iter().zip(provenance.lines().skip(1)) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0], record.id);
        // every joint of part q comes bit-for-bit from donor q, tiled in time
        for (q, donor_id) in fields[1..6].iter().enumerate() {
            let donor = &donors.records.iter().find(|d| d.id == *donor_id).unwrap().pose;
            let tiled = donor.tiled(record.pose.frames());
            for f in 0..record.pose.frames() {
                for &j in corpus.partition.part(q) {
                    let got = record.pose.joint(f, j);
                    let want = tiled[f * donor.joints() + j];
                    assert!(got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()));
                }
            }
        }
    }
}

#[test]
fn shuffle_needs_five_donors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--out", p(&data), "--set", "data.classes=[\"walk\"]", "--set", "data.per_class=4"]);
    let err = fail(&["shuffle-augment", "--data", p(&data), "--pool", "train,test,val", "--out", p(&dir.path().join("aug"))]);
    assert!(err.contains("at least 5"), "{err}");
}

#[test]
fn pipeline_runs_and_is_reproducible_from_its_echo() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let aug = dir.path().join("aug");
    ok(&with_tiny(&["shuffle-augment", "--data", p(&data), "--count", "10", "--out", p(&aug)]));

    let pre = dir.path().join("pre");
    ok(&with_tiny(&["pretrain", "--data", p(&data), "--data", p(&aug), "--epochs", "2", "--out", p(&pre)]));
    let log = String::from_utf8(read(pre.join("loss_log.csv"))).unwrap();
    assert!(log.starts_with("epoch,step,loss_mvm,loss_ffp,loss_total\n"));
    assert!(log.lines().count() > 2);
    let echo = String::from_utf8(read(pre.join("config.toml"))).unwrap();
    assert!(echo.contains("epochs = 2"), "{echo}");

    // the echoed config alone reproduces the checkpoint
    let again = dir.path().join("again");
    ok(&["pretrain", "--data", p(&data), "--data", p(&aug), "--config", p(&pre.join("config.toml")), "--out", p(&again)]);
    for f in ["checkpoint.mckp", "loss_log.csv", "metrics.txt", "metrics.json", "config.toml"] {
        assert_eq!(read(pre.join(f)), read(again.join(f)), "{f}");
    }

    let ft = dir.path().join("ft");
    ok(&with_tiny(&["finetune", "--data", p(&data), "--init", p(&pre.join("checkpoint.mckp")), "--epochs", "2", "--out", p(&ft)]));
    assert_eq!(String::from_utf8(read(ft.join("history.csv"))).unwrap().lines().count(), 3);

    let ev = dir.path().join("ev");
    ok(&with_tiny(&["eval", "--data", p(&data), "--checkpoint", p(&ft.join("checkpoint.mckp")), "--split", "test", "--out", p(&ev)]));
    let kv = key_values(ev.join("metrics.txt"));
    let get = |k: &str| kv.iter().find(|(n, _)| n == k).unwrap().1;
    assert!(get("test.top5") >= get("test.top1"));
    assert!(get("test.count") > 0.0);
    let json: serde_json::Value = serde_json::from_slice(&read(ev.join("metrics.json"))).unwrap();
    assert_eq!(json["test"]["top1"].as_f64().unwrap(), get("test.top1"));
}

#[test]
fn pretraining_checkpoint_must_match_the_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let pre = dir.path().join("pre");
    ok(&with_tiny(&["pretrain", "--data", p(&data), "--epochs", "1", "--out", p(&pre)]));
    let err = fail(&with_tiny(&[
        "finetune", "--data", p(&data), "--init", p(&pre.join("checkpoint.mckp")),
        "--set", "model.d_g=8", "--out", p(&dir.path().join("ft")),
    ]));
    assert!(err.contains("does not fit"), "{err}");
}

fn attention(dir: &Path, data: &Path, ckpt: &Path, mode: &str) -> Vec<[f64; 5]> {
    let out = dir.join(format!("att_{mode}"));
    ok(&with_tiny(&["dump-attention", "--data", p(data), "--checkpoint", p(ckpt), "--id", "jump_001", "--mode", mode, "--out", p(&out)]));
    let text = String::from_utf8(read(out.join("attention.tsv"))).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "query_frame\tquery_patch\tkey_frame\tkey_patch\tweight");
    lines
        .map(|l| {
            let v: Vec<f64> = l.split('\t').map(|x| x.parse().unwrap()).collect();
            [v[0], v[1], v[2], v[3], v[4]]
        })
        .collect()
}

#[test]
fn attention_dump_is_row_stochastic_and_respects_causality() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let ft = dir.path().join("ft");
    ok(&with_tiny(&["finetune", "--data", p(&data), "--epochs", "1", "--out", p(&ft)]));
    let ckpt = ft.join("checkpoint.mckp");
    let (t, c) = (4usize, 4usize);
    for mode in ["bidirectional", "causal"] {
        let rows = attention(dir.path(), &data, &ckpt, mode);
        assert_eq!(rows.len(), (t * c).pow(2));
        for q in rows.chunks(t * c) {
            let sum: f64 = q.iter().map(|r| r[4]).sum();
            assert!((sum - 1.0).abs() <= 1e-9, "{sum}");
            if mode == "causal" {
                assert!(q.iter().filter(|r| r[2] > r[0]).all(|r| r[4] == 0.0));
            }
        }
    }
    let err = fail(&with_tiny(&["dump-attention", "--data", p(&data), "--checkpoint", p(&ckpt), "--id", "nope", "--out", p(dir.path())]));
    assert!(err.contains("unknown sequence id"), "{err}");
}
