//! On-disk layout of a run directory and artifact round-tripping.
//!
//! Every pipeline stage leaves named files under the output directory, so
//! later stages (and reruns) can pick them up: the classifier checkpoint,
//! the white-box training pairs, the purifier pool, report fragments from
//! each subcommand, and the final CSV/SVG reports.

use crate::error::{CliError, Result};
use patchpure_core::purify::AdvPairs;
use patchpure_core::tensor::{load_named, save_named};
use patchpure_core::whitebox::WhiteBoxMethod;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDirs {
    root: PathBuf,
}

impl RunDirs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDirs { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ensure(&self) -> Result<()> {
        fs::create_dir_all(self.fragments())?;
        Ok(())
    }

    pub fn classifier(&self) -> PathBuf {
        self.root.join("classifier.pdt")
    }

    pub fn classifier_report(&self) -> PathBuf {
        self.root.join("classifier_report.json")
    }

    pub fn advdata_tensors(&self) -> PathBuf {
        self.root.join("advdata.pdt")
    }

    pub fn advdata_manifest(&self) -> PathBuf {
        self.root.join("advdata.json")
    }

    pub fn pool(&self) -> PathBuf {
        self.root.join("pool")
    }

    pub fn pool_report(&self) -> PathBuf {
        self.root.join("pool_report.json")
    }

    /// Untrained stand-in pool used only by the latency benchmark when the
    /// trained pool is smaller than the largest requested size.
    pub fn bench_pool(&self) -> PathBuf {
        self.root.join("bench_pool")
    }

    pub fn fragments(&self) -> PathBuf {
        self.root.join("fragments")
    }

    pub fn fragment(&self, name: &str) -> PathBuf {
        self.fragments().join(format!("{name}.json"))
    }

    pub fn robust_accuracy_csv(&self) -> PathBuf {
        self.root.join("robust_accuracy.csv")
    }

    pub fn convergence_csv(&self, defense_slug: &str) -> PathBuf {
        self.root.join(format!("convergence_{defense_slug}.csv"))
    }

    pub fn trace_csv(&self, attack: &str) -> PathBuf {
        self.root.join(format!("trace_{attack}.csv"))
    }

    pub fn latency_csv(&self) -> PathBuf {
        self.root.join("latency.csv")
    }

    pub fn theorem1_csv(&self) -> PathBuf {
        self.root.join("theorem1.csv")
    }

    pub fn theorem2_csv(&self) -> PathBuf {
        self.root.join("theorem2.csv")
    }

    pub fn convergence_svg(&self) -> PathBuf {
        self.root.join("convergence.svg")
    }

    pub fn latency_svg(&self) -> PathBuf {
        self.root.join("latency.svg")
    }

    pub fn run_meta(&self) -> PathBuf {
        self.root.join("run_meta.json")
    }

    /// The only file allowed to carry wall-clock timestamps.
    pub fn sidecar(&self) -> PathBuf {
        self.root.join("sidecar.json")
    }

    pub fn theory_notes(&self) -> PathBuf {
        self.root.join("theory_notes.txt")
    }
}

/// Errors out with a pointer at the subcommand that produces `path`.
pub fn require(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact(format!(
            "{} (run `patchpure {produced_by}` first)",
            path.display()
        )))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingArtifact(path.display().to_string())
        } else {
            CliError::Io(e)
        }
    })?;
    Ok(serde_json::from_str(&text)?)
}

// ----------------------------------------------------------------- advdata --

#[derive(Serialize, Deserialize)]
struct AdvManifest {
    n: usize,
    labels: Vec<usize>,
    methods: Vec<WhiteBoxMethod>,
}

/// Saves the clean/adversarial training pairs: tensors in the checkpoint
/// format, labels and method list in a JSON manifest next to it.
pub fn save_advdata(dirs: &RunDirs, pairs: &AdvPairs) -> Result<()> {
    let mut entries = Vec::new();
    for (i, t) in pairs.clean.iter().enumerate() {
        entries.push((format!("clean/{i:04}"), t.clone()));
    }
    for (method, advs) in &pairs.by_method {
        for (i, t) in advs.iter().enumerate() {
            entries.push((format!("{}/{i:04}", method.name()), t.clone()));
        }
    }
    save_named(&dirs.advdata_tensors(), &entries)?;
    write_json(
        &dirs.advdata_manifest(),
        &AdvManifest {
            n: pairs.clean.len(),
            labels: pairs.labels.clone(),
            methods: pairs.by_method.keys().copied().collect(),
        },
    )
}

pub fn load_advdata(dirs: &RunDirs) -> Result<AdvPairs> {
    require(&dirs.advdata_manifest(), "gen-advdata")?;
    require(&dirs.advdata_tensors(), "gen-advdata")?;
    let manifest: AdvManifest = read_json(&dirs.advdata_manifest())?;
    let entries = load_named(&dirs.advdata_tensors())?;
    let want = manifest.n * (1 + manifest.methods.len());
    if entries.len() != want || manifest.labels.len() != manifest.n {
        return Err(CliError::MissingArtifact(format!(
            "{} does not match its manifest",
            dirs.advdata_tensors().display()
        )));
    }
    let mut it = entries.into_iter();
    let mut take = |prefix: &str| -> Result<Vec<_>> {
        (0..manifest.n)
            .map(|i| {
                let (name, t) = it.next().expect("length checked above");
                if name != format!("{prefix}/{i:04}") {
                    return Err(CliError::MissingArtifact(format!(
                        "unexpected tensor {name:?} in {}",
                        dirs.advdata_tensors().display()
                    )));
                }
                Ok(t)
            })
            .collect()
    };
    let clean = take("clean")?;
    let mut by_method = BTreeMap::new();
    for method in &manifest.methods {
        by_method.insert(*method, take(method.name())?);
    }
    Ok(AdvPairs {
        clean,
        labels: manifest.labels,
        by_method,
    })
}

// -------------------------------------------------------------- checkpoints --

/// Content hash over the model checkpoints of a run: the classifier file and
/// every file in the pool directory, in sorted relative-path order. Missing
/// optional artifacts simply do not contribute.
pub fn checkpoint_hash(dirs: &RunDirs) -> Result<String> {
    let mut files = Vec::new();
    if dirs.classifier().exists() {
        files.push((PathBuf::from("classifier.pdt"), dirs.classifier()));
    }
    if dirs.pool().is_dir() {
        let mut pool_files: Vec<_> = fs::read_dir(dirs.pool())?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        pool_files.sort();
        for p in pool_files {
            let name = p.file_name().expect("read_dir yields named files");
            files.push((PathBuf::from("pool").join(name), p));
        }
    }
    let mut h = Sha256::new();
    for (rel, path) in files {
        let bytes = fs::read(&path)?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    Ok(s)
}
