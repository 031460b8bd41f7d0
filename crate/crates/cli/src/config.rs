//! The declarative experiment configuration: one TOML document that pins the
//! dataset, the models, the defenses, the attack grid, and every seed. The
//! canonical serialization is hashed so every report row can be traced back
//! to the exact configuration that produced it.

use crate::error::{CliError, Result};
use patchpure_core::attacks::AttackKind;
use patchpure_core::models::{Architecture, NormKind, TrainConfig};
use patchpure_core::purify::{
    EncoderFamily, PoolFactors, PurifyTrainConfig, TransformKind, DEFAULT_NOISE_SIGMA,
};
use patchpure_core::theory::{ConvergenceConfig, Theorem1Config, Theorem2Config};
use patchpure_core::whitebox::{WhiteBoxConfig, WhiteBoxMethod};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

/// Query budgets every attack runs at unless the config says otherwise.
pub const DEFAULT_BUDGETS: [usize; 2] = [200, 2500];

const CIFAR_LINF_RADIUS: f32 = 8.0 / 255.0;
const CIFAR_L2_RADIUS: f32 = 1.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stream in the run derives from it.
    pub seed: u64,
    /// Output directory for artifacts and reports.
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
    pub classifier: ClassifierConfig,
    pub advdata: AdvDataConfig,
    pub pool: PoolConfig,
    #[serde(rename = "defense")]
    pub defenses: Vec<DefenseConfig>,
    #[serde(rename = "attack")]
    pub attacks: Vec<AttackConfig>,
    pub theory: TheoryConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            out: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            eval: EvalConfig::default(),
            classifier: ClassifierConfig::default(),
            advdata: AdvDataConfig::default(),
            pool: PoolConfig::default(),
            defenses: vec![
                DefenseConfig::None,
                DefenseConfig::Deterministic { member: 0 },
                DefenseConfig::Patchwise {
                    pool_size: 0,
                    grid: [2, 2],
                },
                DefenseConfig::Ensemble { pool_size: 0 },
                DefenseConfig::GaussianNoise {
                    sigma: DEFAULT_NOISE_SIGMA,
                },
                DefenseConfig::Shrink { factor: 0.5 },
            ],
            attacks: vec![
                AttackConfig::new(AttackKind::Nes, NormKind::Linf, 0.15),
                AttackConfig::new(AttackKind::Simba, NormKind::L2, 2.0),
                AttackConfig::new(AttackKind::Square, NormKind::Linf, 0.15),
                AttackConfig::new(AttackKind::Boundary, NormKind::L2, 4.0),
                AttackConfig::new(AttackKind::Hsj, NormKind::L2, 4.0),
            ],
            theory: TheoryConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

// --------------------------------------------------------------- sections --

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    SyntheticTextures {
        n: usize,
        classes: usize,
        height: usize,
        width: usize,
    },
    Cifar10Binary {
        paths: Vec<PathBuf>,
        /// Total records to take; the last `eval.images` become the eval set.
        subset: usize,
        balanced: bool,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::SyntheticTextures {
            n: 32,
            classes: 2,
            height: 6,
            width: 6,
        }
    }
}

impl DatasetConfig {
    /// `[C, H, W]` of every image this source yields.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        match self {
            DatasetConfig::SyntheticTextures { height, width, .. } => (3, *height, *width),
            DatasetConfig::Cifar10Binary { .. } => (3, 32, 32),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DatasetConfig::SyntheticTextures { classes, .. } => *classes,
            DatasetConfig::Cifar10Binary { .. } => 10,
        }
    }

    pub fn is_cifar(&self) -> bool {
        matches!(self, DatasetConfig::Cifar10Binary { .. })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Images attacked per (defense, attack, budget) cell.
    pub images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { images: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub arch: String,
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub momentum: f32,
    pub holdout_frac: f32,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        ClassifierConfig {
            arch: "linear".into(),
            epochs: 12,
            lr: t.lr,
            batch: t.batch,
            momentum: t.momentum,
            holdout_frac: t.holdout_frac,
        }
    }
}

impl ClassifierConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch: self.batch,
            momentum: self.momentum,
            holdout_frac: self.holdout_frac,
        }
    }

    pub fn architecture(&self, input: (usize, usize, usize), classes: usize) -> Result<Architecture> {
        let arch = Architecture::from_name(&self.arch, input, classes)
            .map_err(|e| CliError::config(e.to_string()))?;
        arch.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvDataConfig {
    pub methods: Vec<WhiteBoxMethod>,
    pub epsilon: f32,
    pub step: f32,
    pub steps: usize,
}

impl Default for AdvDataConfig {
    fn default() -> Self {
        let w = WhiteBoxConfig::default();
        AdvDataConfig {
            methods: WhiteBoxMethod::ALL.to_vec(),
            epsilon: w.epsilon,
            step: w.step,
            steps: w.steps,
        }
    }
}

impl AdvDataConfig {
    pub fn whitebox_config(&self) -> WhiteBoxConfig {
        WhiteBoxConfig {
            epsilon: self.epsilon,
            step: self.step,
            steps: self.steps,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub families: Vec<EncoderFamily>,
    pub depths: Vec<usize>,
    pub epochs: usize,
    pub lambda: f32,
    pub lr: f32,
    pub batch: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        let t = PurifyTrainConfig::default();
        PoolConfig {
            families: vec![EncoderFamily::EdsrLite, EncoderFamily::RcanLite],
            depths: vec![32],
            epochs: t.epochs,
            lambda: t.lambda,
            lr: t.lr,
            batch: t.batch,
        }
    }
}

impl PoolConfig {
    /// Factor grid: the advdata methods crossed with families and depths.
    pub fn factors(&self, methods: &[WhiteBoxMethod]) -> PoolFactors {
        PoolFactors {
            attacks: methods.to_vec(),
            families: self.families.clone(),
            depths: self.depths.clone(),
        }
    }

    pub fn train_config(&self) -> PurifyTrainConfig {
        PurifyTrainConfig {
            lambda: self.lambda,
            epochs: self.epochs,
            lr: self.lr,
            batch: self.batch,
            ..PurifyTrainConfig::default()
        }
    }

    pub fn members(&self, methods: &[WhiteBoxMethod]) -> usize {
        methods.len() * self.families.len() * self.depths.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DefenseConfig {
    None,
    BitReduce {
        bits: u32,
    },
    MedianSmooth {
        k: usize,
    },
    GaussianNoise {
        sigma: f32,
    },
    Shrink {
        factor: f32,
    },
    /// One pool member run deterministically on the whole frame.
    Deterministic {
        #[serde(default)]
        member: usize,
    },
    /// Randomized patch-wise pool defense; `pool_size` 0 means the whole pool.
    Patchwise {
        #[serde(default)]
        pool_size: usize,
        #[serde(default = "default_grid")]
        grid: [usize; 2],
    },
    /// Whole-frame ensemble baseline; `pool_size` 0 means the whole pool.
    Ensemble {
        #[serde(default)]
        pool_size: usize,
    },
}

fn default_grid() -> [usize; 2] {
    [2, 2]
}

/// Compact float for slugs and file names: plain decimal, no exponent.
fn slug_float(v: f32) -> String {
    format!("{v}")
}

impl DefenseConfig {
    /// Stable identifier used in CSV rows and file names.
    pub fn slug(&self) -> String {
        match self {
            DefenseConfig::None => "none".into(),
            DefenseConfig::BitReduce { bits } => format!("bit-reduce-{bits}"),
            DefenseConfig::MedianSmooth { k } => format!("median-{k}"),
            DefenseConfig::GaussianNoise { sigma } => format!("noise-{}", slug_float(*sigma)),
            DefenseConfig::Shrink { factor } => format!("shrink-{}", slug_float(*factor)),
            DefenseConfig::Deterministic { member } => format!("det-p{member}"),
            DefenseConfig::Patchwise { pool_size, grid } => {
                let size = if *pool_size == 0 {
                    "full".into()
                } else {
                    format!("k{pool_size}")
                };
                format!("patchwise-{size}-g{}x{}", grid[0], grid[1])
            }
            DefenseConfig::Ensemble { pool_size } => {
                if *pool_size == 0 {
                    "ensemble-full".into()
                } else {
                    format!("ensemble-k{pool_size}")
                }
            }
        }
    }

    /// The fixed transform this entry stands for, if it is one.
    pub fn transform(&self) -> Option<TransformKind> {
        match *self {
            DefenseConfig::BitReduce { bits } => Some(TransformKind::BitReduce { bits }),
            DefenseConfig::MedianSmooth { k } => Some(TransformKind::MedianSmooth { k }),
            DefenseConfig::GaussianNoise { sigma } => {
                Some(TransformKind::GaussianNoise { sigma })
            }
            DefenseConfig::Shrink { factor } => Some(TransformKind::Shrink { factor }),
            _ => None,
        }
    }

    /// Whether this entry needs trained pool checkpoints.
    pub fn needs_pool(&self) -> bool {
        matches!(
            self,
            DefenseConfig::Deterministic { .. }
                | DefenseConfig::Patchwise { .. }
                | DefenseConfig::Ensemble { .. }
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub norm: NormKind,
    pub radius: f32,
    #[serde(default = "default_budgets")]
    pub budgets: Vec<usize>,
    /// NES queries per gradient estimate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// NES step size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f32>,
    /// NES smoothing radius.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f32>,
    /// SimBA coordinate step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f32>,
    /// Square initial coverage fraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_init: Option<f32>,
    /// HSJ queries per normal estimate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_est: Option<usize>,
}

fn default_budgets() -> Vec<usize> {
    DEFAULT_BUDGETS.to_vec()
}

impl AttackConfig {
    pub fn new(kind: AttackKind, norm: NormKind, radius: f32) -> Self {
        AttackConfig {
            kind,
            norm,
            radius,
            budgets: default_budgets(),
            samples: None,
            lr: None,
            mu: None,
            step: None,
            p_init: None,
            n_est: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub theorem1: Theorem1Config,
    pub theorem2: Theorem2Config,
    pub convergence: ConvergenceConfig,
    /// Pool prefix sizes for the slowdown curve.
    pub pool_sizes: Vec<usize>,
    /// Eval images used as slowdown and shrink problems.
    pub images: usize,
    /// l-inf radius of those problems.
    pub radius: f32,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            theorem1: Theorem1Config::default(),
            theorem2: Theorem2Config::default(),
            convergence: ConvergenceConfig::default(),
            pool_sizes: vec![1, 2, 4],
            images: 4,
            radius: 0.15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub grid: [usize; 2],
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: (1..=10).collect(),
            reps: 1000,
            warmup: 100,
            grid: [2, 2],
        }
    }
}

// ------------------------------------------------------------- validation --

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.validate_dataset()?;
        self.validate_models()?;
        self.validate_defenses()?;
        self.validate_attacks()?;
        self.validate_theory()?;
        self.validate_bench()?;
        Ok(())
    }

    fn validate_dataset(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::SyntheticTextures {
                n,
                classes,
                height,
                width,
            } => {
                if *n == 0 || *classes == 0 || *height == 0 || *width == 0 {
                    return Err(CliError::config("texture spec needs positive extents"));
                }
                if *classes > 10 {
                    return Err(CliError::config("at most 10 texture classes"));
                }
                if n % classes != 0 {
                    return Err(CliError::config(format!(
                        "{n} texture images cannot balance over {classes} classes"
                    )));
                }
                if self.eval.images % classes != 0 {
                    return Err(CliError::config(format!(
                        "{} eval images cannot balance over {classes} classes",
                        self.eval.images
                    )));
                }
            }
            DatasetConfig::Cifar10Binary { paths, subset, .. } => {
                if paths.is_empty() {
                    return Err(CliError::config("cifar10 needs at least one batch file"));
                }
                if *subset <= self.eval.images {
                    return Err(CliError::config(format!(
                        "cifar10 subset {subset} must exceed the {} eval images",
                        self.eval.images
                    )));
                }
            }
        }
        if self.eval.images == 0 {
            return Err(CliError::config("need at least one eval image"));
        }
        Ok(())
    }

    fn validate_models(&self) -> Result<()> {
        self.classifier
            .architecture(self.dataset.image_shape(), self.dataset.classes())?;
        if self.advdata.methods.is_empty() {
            return Err(CliError::config("advdata needs at least one method"));
        }
        if self.advdata.epsilon <= 0.0 || self.advdata.step <= 0.0 || self.advdata.steps == 0 {
            return Err(CliError::config("advdata needs positive epsilon, step, steps"));
        }
        if self.pool.families.is_empty() || self.pool.depths.is_empty() {
            return Err(CliError::config("pool needs families and depths"));
        }
        for &d in &self.pool.depths {
            if d != 32 && d != 64 {
                return Err(CliError::config(format!("pool depth must be 32 or 64, got {d}")));
            }
        }
        Ok(())
    }

    fn validate_defenses(&self) -> Result<()> {
        let (_, h, w) = self.dataset.image_shape();
        let mut slugs = Vec::new();
        let members = self.pool.members(&self.advdata.methods);
        for d in &self.defenses {
            let slug = d.slug();
            if slugs.contains(&slug) {
                return Err(CliError::config(format!("duplicate defense entry {slug:?}")));
            }
            slugs.push(slug);
            match d {
                DefenseConfig::BitReduce { bits } => {
                    if !(1..=8).contains(bits) {
                        return Err(CliError::config("bit depth must be in 1..=8"));
                    }
                }
                DefenseConfig::MedianSmooth { k } => {
                    if *k == 0 || k % 2 == 0 {
                        return Err(CliError::config("median kernel must be odd"));
                    }
                }
                DefenseConfig::GaussianNoise { sigma } => {
                    if !(*sigma >= 0.0) || !sigma.is_finite() {
                        return Err(CliError::config("noise sigma must be finite and >= 0"));
                    }
                }
                DefenseConfig::Shrink { factor } => {
                    if !(0.0..=1.0).contains(factor) {
                        return Err(CliError::config("shrink factor must be in [0,1]"));
                    }
                }
                DefenseConfig::Deterministic { member } => {
                    if *member >= members {
                        return Err(CliError::config(format!(
                            "deterministic member {member} out of range for a {members}-model pool"
                        )));
                    }
                }
                DefenseConfig::Patchwise { pool_size, grid } => {
                    if *pool_size > members {
                        return Err(CliError::config(format!(
                            "patchwise pool size {pool_size} exceeds the {members}-model pool"
                        )));
                    }
                    if grid[0] == 0 || grid[1] == 0 || grid[0] > h || grid[1] > w {
                        return Err(CliError::config(format!(
                            "{}x{} patch grid does not fit {h}x{w} images",
                            grid[0], grid[1]
                        )));
                    }
                }
                DefenseConfig::Ensemble { pool_size } => {
                    if *pool_size > members {
                        return Err(CliError::config(format!(
                            "ensemble pool size {pool_size} exceeds the {members}-model pool"
                        )));
                    }
                }
                DefenseConfig::None => {}
            }
        }
        Ok(())
    }

    fn validate_attacks(&self) -> Result<()> {
        for a in &self.attacks {
            if !(a.radius > 0.0) || !a.radius.is_finite() {
                return Err(CliError::config(format!(
                    "{} radius must be positive",
                    a.kind.name()
                )));
            }
            if a.budgets.is_empty() || a.budgets.iter().any(|&b| b == 0) {
                return Err(CliError::config(format!(
                    "{} budgets must be positive",
                    a.kind.name()
                )));
            }
            if a.kind == AttackKind::Simba && a.norm != NormKind::L2 {
                return Err(CliError::config("simba is an l2 attack"));
            }
            if let Some(s) = a.samples {
                if s == 0 || s % 2 != 0 {
                    return Err(CliError::config("nes samples must be positive and even"));
                }
            }
            if self.dataset.is_cifar() {
                let want = match a.norm {
                    NormKind::Linf => CIFAR_LINF_RADIUS,
                    NormKind::L2 => CIFAR_L2_RADIUS,
                };
                if (a.radius - want).abs() > 1e-6 {
                    return Err(CliError::config(format!(
                        "cifar10 {} radius must be {want} (got {})",
                        a.kind.name(),
                        a.radius
                    )));
                }
            }
        }
        Ok(())
    }

    fn validate_theory(&self) -> Result<()> {
        let members = self.pool.members(&self.advdata.methods);
        if self.theory.pool_sizes.is_empty() || self.theory.pool_sizes.iter().any(|&k| k == 0) {
            return Err(CliError::config("theory pool sizes must be positive"));
        }
        if let Some(&k) = self.theory.pool_sizes.iter().find(|&&k| k > members) {
            return Err(CliError::config(format!(
                "theory pool size {k} exceeds the {members}-model pool"
            )));
        }
        if self.theory.images == 0 || self.theory.images > self.eval.images {
            return Err(CliError::config(format!(
                "theory needs 1..={} eval images, got {}",
                self.eval.images, self.theory.images
            )));
        }
        if !(self.theory.radius > 0.0) {
            return Err(CliError::config("theory problem radius must be positive"));
        }
        Ok(())
    }

    fn validate_bench(&self) -> Result<()> {
        let b = &self.bench;
        if b.sizes.is_empty() || b.sizes.iter().any(|&k| k == 0) {
            return Err(CliError::config("bench sizes must be positive"));
        }
        if b.warmup >= b.reps {
            return Err(CliError::config(format!(
                "bench warmup {} must be below reps {}",
                b.warmup, b.reps
            )));
        }
        let (_, h, w) = self.dataset.image_shape();
        if b.grid[0] == 0 || b.grid[1] == 0 || b.grid[0] > h || b.grid[1] > w {
            return Err(CliError::config("bench grid does not fit the image"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- loading --

/// A validated configuration plus the hash of its canonical form.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub cfg: ExperimentConfig,
    pub hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

impl ExperimentConfig {
    /// Canonical TOML form; field order is fixed by the struct definitions.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::config(e.to_string()))
    }

    /// Hash of the canonical form, after any flag overrides. The output
    /// directory is blanked first: the hash names the experiment, so the
    /// same run landing in two directories stays traceable to one id.
    pub fn canonical_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out = PathBuf::new();
        Ok(sha256_hex(c.to_toml()?.as_bytes()))
    }
}

/// Parses and validates a config file, or falls back to the defaults.
/// The `seed` flag override applies before hashing, so the hash always
/// names the effective configuration; `out` only picks the directory.
pub fn load_config(
    path: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<LoadedConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                CliError::config(format!("cannot read {}: {e}", p.display()))
            })?;
            toml::from_str::<ExperimentConfig>(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out = o.to_path_buf();
    }
    cfg.validate()?;
    let hash = cfg.canonical_hash()?;
    Ok(LoadedConfig { cfg, hash })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.to_toml().unwrap(), text);
        assert_eq!(back.canonical_hash().unwrap(), cfg.canonical_hash().unwrap());
    }

    #[test]
    fn hash_tracks_effective_settings() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        b.seed = 8;
        assert_ne!(a.canonical_hash().unwrap(), b.canonical_hash().unwrap());
        let mut c = ExperimentConfig::default();
        c.out = PathBuf::from("elsewhere");
        assert_eq!(a.canonical_hash().unwrap(), c.canonical_hash().unwrap());
    }

    fn write_temp(name: &str, text: &str) -> PathBuf {
        let p = std::env::temp_dir().join(format!("patchpure-cfg-{}-{name}.toml", std::process::id()));
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn flag_overrides_apply_before_hashing() {
        let p = write_temp("override", "seed = 3\n");
        let a = load_config(Some(&p), Some(9), None).unwrap();
        fs::remove_file(&p).ok();
        assert_eq!(a.cfg.seed, 9);
        let mut want = ExperimentConfig::default();
        want.seed = 9;
        assert_eq!(a.hash, want.canonical_hash().unwrap());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let p = write_temp("unknown", "seed = 3\nturbo = true\n");
        let err = load_config(Some(&p), None, None).unwrap_err();
        fs::remove_file(&p).ok();
        assert!(matches!(err, CliError::Config(_)), "got {err:?}");
    }

    #[test]
    fn partial_files_fill_from_defaults() {
        let p = write_temp(
            "partial",
            "[dataset]\nkind = \"synthetic-textures\"\nn = 16\nclasses = 2\nheight = 6\nwidth = 6\n",
        );
        let got = load_config(Some(&p), None, None).unwrap();
        fs::remove_file(&p).ok();
        assert_eq!(got.cfg.seed, ExperimentConfig::default().seed);
        assert_eq!(got.cfg.attacks.len(), 5);
        assert!(matches!(
            got.cfg.dataset,
            DatasetConfig::SyntheticTextures { n: 16, .. }
        ));
    }

    #[test]
    fn budgets_default_to_the_table_pair() {
        let cfg = ExperimentConfig::default();
        for a in &cfg.attacks {
            assert_eq!(a.budgets, vec![200, 2500]);
        }
    }

    #[test]
    fn zero_budget_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.attacks[0].budgets = vec![0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cifar_radii_must_follow_the_conventions() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset = DatasetConfig::Cifar10Binary {
            paths: vec![PathBuf::from("batch.bin")],
            subset: 40,
            balanced: false,
        };
        assert!(cfg.validate().is_err(), "0.15 is not a cifar l-inf radius");
        for a in &mut cfg.attacks {
            a.radius = match a.norm {
                NormKind::Linf => 8.0 / 255.0,
                NormKind::L2 => 1.0,
            };
        }
        cfg.validate().unwrap();
    }

    #[test]
    fn duplicate_defense_slugs_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.defenses.push(DefenseConfig::None);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn defense_slugs_are_filesystem_safe() {
        for d in ExperimentConfig::default().defenses {
            let slug = d.slug();
            assert!(
                slug.chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '.' || c == 'x'),
                "slug {slug:?} has odd characters"
            );
        }
    }

    #[test]
    fn simba_rejects_linf() {
        let mut cfg = ExperimentConfig::default();
        cfg.attacks[1].norm = NormKind::Linf;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn oversized_patchwise_pool_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.defenses.push(DefenseConfig::Patchwise {
            pool_size: 99,
            grid: [2, 2],
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn theory_sizes_must_fit_the_pool() {
        let mut cfg = ExperimentConfig::default();
        cfg.theory.pool_sizes = vec![1, 2, 99];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bench_warmup_must_leave_samples() {
        let mut cfg = ExperimentConfig::default();
        cfg.bench.reps = 50;
        cfg.bench.warmup = 50;
        assert!(cfg.validate().is_err());
    }
}
