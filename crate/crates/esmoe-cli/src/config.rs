//! Configuration file format, flag overrides, and run-directory naming.
//!
//! Settings resolve in three layers: built-in defaults, then the optional
//! TOML file given by `--config`, then command-line flags. Every file key
//! has a flag of the same name; a flag always wins over the file. Unknown
//! keys in the file are rejected with the key name and location.
//!
//! The file mirrors the training, block, dataset, and benchmark
//! configuration structs:
//!
//! ```toml
//! seed = 1
//!
//! [model]
//! experts = 4
//! top_k = 2
//! kernels = [3, 5, 7, 9]
//! c_in = 3               # defaults to dataset.channels when omitted
//! c_out = 16
//! reduction_ratio = 8
//! renorm_epsilon = 1e-9
//! rms_norm = false
//!
//! [train]
//! epochs = 30
//! batch_size = 32
//! base_lr = 0.03
//! momentum = 0.9
//! lb_weight = 1.5
//! n_train = 1024
//! n_val = 128
//!
//! [dataset]
//! classes = 4
//! channels = 3
//! height = 32
//! width = 32
//! radii = [1.0, 2.0, 3.0, 5.0]
//! noise_sigma = 0.05
//! blobs_per_image = 3
//!
//! [bench]
//! height = 64
//! width = 64
//! repetitions = 50
//! warmup = 5
//! ```
//!
//! Artifacts land under `<out-dir>/<config-hash>-seed<seed>/`, where the
//! hash covers every effective setting except the seed, so a seed sweep of
//! one configuration groups its runs under a shared prefix and distinct
//! configurations never collide.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use esmoe_core::{EsMoeConfig, TrainConfig};

use crate::error::{Error, Result};

/// Benchmark settings carried alongside the training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub height: usize,
    pub width: usize,
    pub repetitions: usize,
    pub warmup: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings { height: 64, width: 64, repetitions: 50, warmup: 5 }
    }
}

/// Fully resolved configuration: defaults, then file, then flags.
#[derive(Debug, Clone)]
pub struct Effective {
    pub train: TrainConfig,
    pub bench: BenchSettings,
}

// ---------------------------------------------------------------------------
// TOML file layer. Every field is optional; unknown keys are errors.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    seed: Option<u64>,
    model: ModelSection,
    train: TrainSection,
    dataset: DatasetSection,
    bench: BenchSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSection {
    experts: Option<usize>,
    top_k: Option<usize>,
    kernels: Option<Vec<usize>>,
    c_in: Option<usize>,
    c_out: Option<usize>,
    reduction_ratio: Option<usize>,
    renorm_epsilon: Option<f64>,
    rms_norm: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    base_lr: Option<f64>,
    momentum: Option<f64>,
    lb_weight: Option<f64>,
    n_train: Option<usize>,
    n_val: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DatasetSection {
    classes: Option<usize>,
    channels: Option<usize>,
    height: Option<usize>,
    width: Option<usize>,
    radii: Option<Vec<f64>>,
    noise_sigma: Option<f64>,
    blobs_per_image: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct BenchSection {
    height: Option<usize>,
    width: Option<usize>,
    repetitions: Option<usize>,
    warmup: Option<usize>,
}

// ---------------------------------------------------------------------------
// Flag layer, flattened into every subcommand.
// ---------------------------------------------------------------------------

/// Flags overriding any configuration key. Absent flags leave the file or
/// default value in place.
#[derive(Debug, Clone, Args)]
pub struct Overrides {
    /// TOML configuration file; flags override its values.
    #[arg(long, value_name = "PATH", global = false)]
    pub config: Option<PathBuf>,

    /// Root directory for run artifacts.
    #[arg(long, value_name = "DIR", default_value = "runs")]
    pub out_dir: PathBuf,

    /// RNG seed for data, initialization, and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Number of experts in the bank.
    #[arg(long)]
    pub experts: Option<usize>,

    /// Experts evaluated per sample.
    #[arg(long = "k", visible_alias = "top-k", value_name = "K")]
    pub top_k: Option<usize>,

    /// Depthwise kernel sizes, comma separated, one per expert (all odd).
    #[arg(long, value_delimiter = ',', value_name = "K1,K2,...")]
    pub kernels: Option<Vec<usize>>,

    /// Block input channels; defaults to the dataset channel count.
    #[arg(long, value_name = "C")]
    pub c_in: Option<usize>,

    /// Expert output channels.
    #[arg(long, value_name = "C")]
    pub c_out: Option<usize>,

    /// Channel reduction ratio of the gate's hidden layer.
    #[arg(long, value_name = "R")]
    pub reduction_ratio: Option<usize>,

    /// Guard added to retained probability mass before renormalizing.
    #[arg(long, value_name = "EPS")]
    pub renorm_epsilon: Option<f64>,

    /// Apply RMS normalization to the aggregated block output.
    #[arg(long, value_name = "BOOL")]
    pub rms_norm: Option<bool>,

    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Samples per optimization step.
    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Peak learning rate of the cosine schedule.
    #[arg(long)]
    pub base_lr: Option<f64>,

    /// SGD momentum coefficient.
    #[arg(long)]
    pub momentum: Option<f64>,

    /// Weight on the load-balancing loss.
    #[arg(long)]
    pub lb_weight: Option<f64>,

    /// Training-set size.
    #[arg(long)]
    pub n_train: Option<usize>,

    /// Held-out validation-set size.
    #[arg(long)]
    pub n_val: Option<usize>,

    /// Number of scale classes in the synthetic dataset.
    #[arg(long)]
    pub classes: Option<usize>,

    /// Image channels in the synthetic dataset.
    #[arg(long)]
    pub channels: Option<usize>,

    /// Synthetic image height.
    #[arg(long)]
    pub height: Option<usize>,

    /// Synthetic image width.
    #[arg(long)]
    pub width: Option<usize>,

    /// Blob radius per class, comma separated (pixels).
    #[arg(long, value_delimiter = ',', value_name = "R1,R2,...")]
    pub radii: Option<Vec<f64>>,

    /// Standard deviation of additive pixel noise.
    #[arg(long)]
    pub noise_sigma: Option<f64>,

    /// Blobs placed per image.
    #[arg(long)]
    pub blobs_per_image: Option<usize>,

    /// Benchmark input height.
    #[arg(long)]
    pub bench_height: Option<usize>,

    /// Benchmark input width.
    #[arg(long)]
    pub bench_width: Option<usize>,

    /// Benchmark timed repetitions (at least 30).
    #[arg(long)]
    pub repetitions: Option<usize>,

    /// Benchmark warmup repetitions before timing (at least 5).
    #[arg(long)]
    pub warmup: Option<usize>,
}

// ---------------------------------------------------------------------------
// Resolution.
// ---------------------------------------------------------------------------

fn parse_file(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    // toml's errors carry line/column context and name unknown keys.
    toml::from_str(&text)
        .map_err(|e| Error::Config(format!("in {}:\n{e}", path.display())))
}

macro_rules! layer {
    ($target:expr, $($source:expr => $field:expr),+ $(,)?) => {
        $(if let Some(v) = $source { $field = v; })+
        let _ = &$target;
    };
}

impl Overrides {
    /// Resolve defaults, the optional file, and the flags into one
    /// validated configuration. The training configuration is validated as
    /// a whole, including block/dataset agreement.
    pub fn resolve(&self) -> Result<Effective> {
        self.resolve_inner(true)
    }

    /// Like [`Overrides::resolve`], but validates only the block and
    /// benchmark settings: the benchmark never touches the dataset, so its
    /// input channels may differ from the dataset's.
    pub fn resolve_bench(&self) -> Result<Effective> {
        self.resolve_inner(false)
    }

    fn resolve_inner(&self, with_dataset: bool) -> Result<Effective> {
        let file = match &self.config {
            Some(path) => parse_file(path)?,
            None => FileConfig::default(),
        };

        let mut train = TrainConfig::default();
        let mut bench = BenchSettings::default();

        // File layer.
        layer!(train,
            file.seed => train.seed,
            file.train.epochs => train.epochs,
            file.train.batch_size => train.batch_size,
            file.train.base_lr => train.base_lr,
            file.train.momentum => train.momentum,
            file.train.lb_weight => train.lb_weight,
            file.train.n_train => train.n_train,
            file.train.n_val => train.n_val,
            file.dataset.classes => train.dataset.classes,
            file.dataset.channels => train.dataset.channels,
            file.dataset.height => train.dataset.height,
            file.dataset.width => train.dataset.width,
            file.dataset.radii.clone() => train.dataset.radii,
            file.dataset.noise_sigma => train.dataset.noise_sigma,
            file.dataset.blobs_per_image => train.dataset.blobs_per_image,
            file.model.experts => train.block.experts,
            file.model.top_k => train.block.top_k,
            file.model.c_out => train.block.c_out,
            file.model.reduction_ratio => train.block.reduction_ratio,
            file.model.renorm_epsilon => train.block.renorm_epsilon,
            file.model.rms_norm => train.block.rms_norm,
            file.bench.height => bench.height,
            file.bench.width => bench.width,
            file.bench.repetitions => bench.repetitions,
            file.bench.warmup => bench.warmup,
        );

        // Flag layer.
        layer!(train,
            self.seed => train.seed,
            self.epochs => train.epochs,
            self.batch_size => train.batch_size,
            self.base_lr => train.base_lr,
            self.momentum => train.momentum,
            self.lb_weight => train.lb_weight,
            self.n_train => train.n_train,
            self.n_val => train.n_val,
            self.classes => train.dataset.classes,
            self.channels => train.dataset.channels,
            self.height => train.dataset.height,
            self.width => train.dataset.width,
            self.radii.clone() => train.dataset.radii,
            self.noise_sigma => train.dataset.noise_sigma,
            self.blobs_per_image => train.dataset.blobs_per_image,
            self.experts => train.block.experts,
            self.top_k => train.block.top_k,
            self.c_out => train.block.c_out,
            self.reduction_ratio => train.block.reduction_ratio,
            self.renorm_epsilon => train.block.renorm_epsilon,
            self.rms_norm => train.block.rms_norm,
            self.bench_height => bench.height,
            self.bench_width => bench.width,
            self.repetitions => bench.repetitions,
            self.warmup => bench.warmup,
        );

        // Kernels follow the expert count unless pinned explicitly.
        train.block.kernels = match self.kernels.clone().or(file.model.kernels.clone()) {
            Some(k) => k,
            None => EsMoeConfig::default_kernels(train.block.experts),
        };

        // The block consumes dataset images unless c_in is pinned
        // explicitly (the benchmark commonly pins a wider input).
        train.block.c_in = match self.c_in.or(file.model.c_in) {
            Some(c) => c,
            None => train.dataset.channels,
        };

        if with_dataset {
            train.validate().map_err(|e| Error::Config(e.to_string()))?;
        } else {
            train.block.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if bench.repetitions < 30 {
            return Err(Error::Config(format!(
                "bench repetitions {} must be at least 30",
                bench.repetitions
            )));
        }
        if bench.warmup < 5 {
            return Err(Error::Config(format!(
                "bench warmup {} must be at least 5",
                bench.warmup
            )));
        }
        Ok(Effective { train, bench })
    }
}

impl Effective {
    /// Canonical one-line rendering of every setting except the seed.
    /// Floats use shortest round-trip formatting, so equal configurations
    /// render identically.
    pub fn canonical_string(&self) -> String {
        let t = &self.train;
        let b = &t.block;
        let d = &t.dataset;
        format!(
            "experts={};top_k={};kernels={:?};c_in={};c_out={};reduction_ratio={};\
             renorm_epsilon={:?};rms_norm={};epochs={};batch_size={};base_lr={:?};\
             momentum={:?};lb_weight={:?};n_train={};n_val={};classes={};channels={};\
             height={};width={};radii={:?};noise_sigma={:?};blobs_per_image={};\
             bench_height={};bench_width={};repetitions={};warmup={}",
            b.experts,
            b.top_k,
            b.kernels,
            b.c_in,
            b.c_out,
            b.reduction_ratio,
            b.renorm_epsilon,
            b.rms_norm,
            t.epochs,
            t.batch_size,
            t.base_lr,
            t.momentum,
            t.lb_weight,
            t.n_train,
            t.n_val,
            d.classes,
            d.channels,
            d.height,
            d.width,
            d.radii,
            d.noise_sigma,
            d.blobs_per_image,
            self.bench.height,
            self.bench.width,
            self.bench.repetitions,
            self.bench.warmup,
        )
    }

    /// Stable 64-bit FNV-1a hash of the canonical configuration string.
    pub fn config_hash(&self) -> u64 {
        fnv1a64(self.canonical_string().as_bytes())
    }

    /// `<out_dir>/<hash>-seed<seed>`, created if missing.
    pub fn run_dir(&self, out_dir: &Path) -> Result<PathBuf> {
        let dir = out_dir.join(format!("{:016x}-seed{}", self.config_hash(), self.train.seed));
        std::fs::create_dir_all(&dir)
            .map_err(|e| Error::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[derive(Parser)]
    struct Harness {
        #[command(flatten)]
        ov: Overrides,
    }

    fn parse(args: &[&str]) -> Overrides {
        Harness::parse_from(std::iter::once(&"harness").chain(args)).ov
    }

    #[test]
    fn defaults_resolve_to_the_training_defaults() {
        let eff = parse(&[]).resolve().unwrap();
        assert_eq!(eff.train, TrainConfig::default());
        assert_eq!(eff.bench, BenchSettings::default());
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(
            &path,
            "seed = 7\n[train]\nepochs = 3\nbase_lr = 0.5\n[model]\nexperts = 2\n",
        )
        .unwrap();
        let ov = parse(&["--config", path.to_str().unwrap(), "--epochs", "9"]);
        let eff = ov.resolve().unwrap();
        assert_eq!(eff.train.seed, 7); // file over default
        assert_eq!(eff.train.epochs, 9); // flag over file
        assert_eq!(eff.train.base_lr, 0.5); // file over default
        assert_eq!(eff.train.block.experts, 2);
        // kernels follow the overridden expert count
        assert_eq!(eff.train.block.kernels, vec![3, 5]);
        // untouched keys keep their defaults
        assert_eq!(eff.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_key_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[model]\nbogus_key = 3\n").unwrap();
        let err = parse(&["--config", path.to_str().unwrap()]).resolve().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus_key"), "message should name the key: {msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn malformed_toml_reports_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[train]\nepochs = = 3\n").unwrap();
        let err = parse(&["--config", path.to_str().unwrap()]).resolve().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "message should locate the error: {msg}");
    }

    #[test]
    fn c_in_follows_dataset_channels_unless_pinned() {
        let eff = parse(&["--channels", "5"]).resolve().unwrap();
        assert_eq!(eff.train.block.c_in, 5);
        // A pinned c_in must agree with the dataset for dataset-backed
        // commands...
        let err = parse(&["--channels", "5", "--c-in", "2"]).resolve().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        // ...while the benchmark resolves the block alone, so a wide input
        // away from the dataset's channel count is fine there.
        let eff = parse(&["--c-in", "32", "--c-out", "32"]).resolve_bench().unwrap();
        assert_eq!(eff.train.block.c_in, 32);
    }

    #[test]
    fn invalid_values_exit_with_the_config_code() {
        let err = parse(&["--k", "9"]).resolve().unwrap_err(); // K > E
        assert_eq!(err.exit_code(), 2);
        let err = parse(&["--repetitions", "10"]).resolve().unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn config_hash_ignores_the_seed_and_nothing_else() {
        let base = parse(&[]).resolve().unwrap();
        let seeded = parse(&["--seed", "9"]).resolve().unwrap();
        assert_eq!(base.config_hash(), seeded.config_hash());
        let changed = parse(&["--lb-weight", "0.25"]).resolve().unwrap();
        assert_ne!(base.config_hash(), changed.config_hash());
    }

    #[test]
    fn fnv_matches_the_reference_vectors() {
        // Standard FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn run_dir_name_contains_hash_and_seed() {
        let dir = tempfile::tempdir().unwrap();
        let eff = parse(&["--seed", "42"]).resolve().unwrap();
        let run = eff.run_dir(dir.path()).unwrap();
        let name = run.file_name().unwrap().to_str().unwrap();
        assert!(name.ends_with("-seed42"));
        assert_eq!(name.len(), 16 + "-seed42".len());
        assert!(run.is_dir());
    }
}
