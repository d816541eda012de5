//! Dataset directories: `manifest.csv`, `sequences/<id>.mseq` and, when
//! poses are known, `poses.pose`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use meshmotion::augment::PoseCorpus;
use meshmotion::mesh::{format_manifest, load_sequence, parse_manifest, save_sequence, ManifestRecord, MeshSequence, Split};

pub const MANIFEST: &str = "manifest.csv";
pub const POSES: &str = "poses.pose";
pub const SEQUENCES: &str = "sequences";
pub const CONFIG_ECHO: &str = "config.toml";

pub fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        bail!("{what}: {} is not a directory", path.display());
    }
    Ok(())
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what}: {} does not exist", path.display());
    }
    Ok(())
}

pub fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out.join(SEQUENCES)).with_context(|| format!("creating {}", out.display()))
}

pub fn write(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Writes sequences and their manifest; records must name every sequence.
pub fn write_dataset(out: &Path, sequences: &[MeshSequence], manifest: &[ManifestRecord]) -> Result<()> {
    create_out(out)?;
    for seq in sequences {
        save_sequence(seq, &sequence_path(out, &seq.id))?;
    }
    write(out.join(MANIFEST), format_manifest(manifest))
}

pub fn sequence_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(SEQUENCES).join(format!("{id}.mseq"))
}

pub struct DatasetDir {
    pub root: PathBuf,
    pub manifest: Vec<ManifestRecord>,
}

impl DatasetDir {
    pub fn open(root: &Path) -> Result<Self> {
        require_dir(root, "--data")?;
        let path = root.join(MANIFEST);
        require_file(&path, "manifest")?;
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let manifest = parse_manifest(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn poses(&self) -> Result<PoseCorpus> {
        let path = self.root.join(POSES);
        require_file(&path, "pose corpus")?;
        Ok(PoseCorpus::load(&path)?)
    }

    /// Sequences whose split is in `splits`, in manifest order, labeled from
    /// the manifest.
    pub fn load(&self, splits: &[Split]) -> Result<Vec<MeshSequence>> {
        self.manifest
            .iter()
            .filter(|r| splits.contains(&r.split))
            .map(|r| self.load_record(r))
            .collect()
    }

    pub fn load_id(&self, id: &str) -> Result<MeshSequence> {
        let record = self
            .manifest
            .iter()
            .find(|r| r.id == id)
            .with_context(|| format!("unknown sequence id {id:?} in {}", self.root.display()))?;
        self.load_record(record)
    }

    fn load_record(&self, r: &ManifestRecord) -> Result<MeshSequence> {
        let path = sequence_path(&self.root, &r.id);
        let mut seq = load_sequence(&path).with_context(|| format!("loading {}", path.display()))?;
        seq.id = r.id.clone();
        seq.label = r.label;
        Ok(seq)
    }
}
