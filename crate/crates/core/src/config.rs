//! Flat `key = value` configuration text, with command-line style overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{BiasSpec, SplitConfig};
use crate::error::{Error, Result};
use crate::masking::{MaskingConfig, ThresholdPolicy};
use crate::nn::{ConvBlock, HeadPool, Hyperparams, NetworkSpec};
use crate::trainer::IterativeConfig;

/// Ordered key/value pairs. Keys are `[a-z0-9_.-]+`; values are raw text.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || matches!(b, b'_' | b'-' | b'.'))
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses one `key = value` per line. Blank lines and lines starting with
    /// `#` are skipped. Every malformed line is reported in a single error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = KvConfig::new();
        let mut problems = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                problems.push(format!("line {}: expected `key = value`", no + 1));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if !valid_key(k) {
                problems.push(format!("line {}: invalid key `{k}`", no + 1));
            } else if cfg.entries.insert(k.to_string(), v.to_string()).is_some() {
                problems.push(format!("line {}: duplicate key `{k}`", no + 1));
            }
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !valid_key(key) {
            return Err(Error::Config(format!("invalid key `{key}`")));
        }
        self.entries.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Applies `--key value` pairs (dashes inside the key map to underscores).
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        let mut it = args.iter().map(AsRef::as_ref);
        while let Some(flag) = it.next() {
            let Some(key) = flag.strip_prefix("--") else {
                return Err(Error::Config(format!("expected `--key`, got `{flag}`")));
            };
            let Some(value) = it.next() else {
                return Err(Error::Config(format!("`{flag}` is missing its value")));
            };
            self.set(&key.replace('-', "_"), value)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in other.iter() {
            self.entries.insert(k.to_string(), v.to_string());
        }
    }
}

impl fmt::Display for KvConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Typed reads that collect failures instead of stopping at the first one.
pub struct Reader<'a> {
    cfg: &'a KvConfig,
    used: Vec<&'a str>,
    problems: Vec<String>,
}

impl<'a> Reader<'a> {
    pub fn new(cfg: &'a KvConfig) -> Self {
        Reader {
            cfg,
            used: Vec::new(),
            problems: Vec::new(),
        }
    }

    fn raw(&mut self, key: &'a str) -> Option<&'a str> {
        self.used.push(key);
        self.cfg.get(key)
    }

    /// Value for `key` parsed as `T`, or `default` when absent.
    pub fn get<T>(&mut self, key: &'a str, default: T) -> T
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => default,
            Some(v) => v.parse().unwrap_or_else(|e| {
                self.problems.push(format!("{key}: cannot parse `{v}` ({e})"));
                default
            }),
        }
    }

    /// `none`, an empty value or absence all give `None`.
    pub fn optional<T>(&mut self, key: &'a str, default: Option<T>) -> Option<T>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => default,
            Some("" | "none") => None,
            Some(v) => match v.parse() {
                Ok(x) => Some(x),
                Err(e) => {
                    self.problems.push(format!("{key}: cannot parse `{v}` ({e})"));
                    default
                }
            },
        }
    }

    /// Comma-separated list.
    pub fn list<T>(&mut self, key: &'a str, default: Vec<T>) -> Vec<T>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        let Some(v) = self.raw(key) else {
            return default;
        };
        let mut out = Vec::new();
        for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.parse() {
                Ok(x) => out.push(x),
                Err(e) => {
                    self.problems.push(format!("{key}: cannot parse `{part}` ({e})"));
                    return default;
                }
            }
        }
        out
    }

    pub fn problem(&mut self, msg: impl Into<String>) {
        self.problems.push(msg.into());
    }

    /// Fails with every parse problem and every unrecognized key.
    pub fn finish(mut self) -> Result<()> {
        for k in self.cfg.keys() {
            if !self.used.contains(&k) {
                self.problems.push(format!("unknown key `{k}`"));
            }
        }
        if self.problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(self.problems.join("; ")))
        }
    }
}

/// Training pool size used by the desk-scale profile.
pub const DESK_POOL: usize = 10_000;

/// Threshold used by the desk-scale profile. The short schedule leaves
/// flatter maps, so one standard deviation covers the shortcut better.
pub const DESK_POLICY: ThresholdPolicy = ThresholdPolicy::MeanPlusKSigma(1);

/// Every knob a run can set. Built from a [`KvConfig`]; [`RunConfig::to_kv`]
/// writes all values back so a manifest replays exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub desk_scale: bool,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub hyper: Hyperparams,
    pub widths: Vec<usize>,
    /// Conv blocks followed by a 2×2 max-pool.
    pub pool_after: Vec<usize>,
    pub head: HeadPool,
    pub split: SplitConfig,
    /// 1 (blue, top left) or 2 (plus red, bottom right).
    pub patches: usize,
    pub patch_size: usize,
    pub p_class0: f64,
    pub p_class1: f64,
    pub masking: MaskingConfig,
    pub iterations: usize,
    pub accumulative: bool,
    pub stop_floor: f64,
    pub finetune_lr: Option<f64>,
    pub coverage: Vec<f64>,
    pub trials: usize,
    pub n: usize,
    pub d: usize,
    pub tol: f64,
    pub delta: f64,
}

fn head_name(h: HeadPool) -> &'static str {
    match h {
        HeadPool::GlobalAverage => "gap",
        HeadPool::Flatten => "flatten",
    }
}

struct HeadArg(HeadPool);

impl FromStr for HeadArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gap" => Ok(HeadArg(HeadPool::GlobalAverage)),
            "flatten" => Ok(HeadArg(HeadPool::Flatten)),
            _ => Err("expected gap or flatten".into()),
        }
    }
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: fmt::Display>(x: &Option<T>) -> String {
    x.as_ref().map_or_else(|| "none".to_string(), ToString::to_string)
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_kv(&KvConfig::new()).expect("defaults are valid")
    }
}

impl RunConfig {
    pub fn from_kv(cfg: &KvConfig) -> Result<Self> {
        let mut r = Reader::new(cfg);
        let seed = r.get("seed", 0u64);
        let desk_scale = r.get("desk_scale", false);
        let base = if desk_scale { Hyperparams::desk_scale() } else { Hyperparams::default() };
        let hyper = Hyperparams {
            learning_rate: r.get("learning_rate", base.learning_rate),
            momentum: r.get("momentum", base.momentum),
            weight_decay: r.get("weight_decay", base.weight_decay),
            batch_size: r.get("batch_size", base.batch_size),
            epochs: r.get("epochs", base.epochs),
            lr_decay_factor: r.get("lr_decay_factor", base.lr_decay_factor),
            lr_decay_every: r.get("lr_decay_every", base.lr_decay_every),
            seed,
        };
        let arch = NetworkSpec::mnist_default([3, 28, 28], 2);
        let default_widths: Vec<usize> = arch.conv_blocks.iter().map(|b| b.out_channels).collect();
        let default_pools: Vec<usize> = arch
            .conv_blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.maxpool2)
            .map(|(i, _)| i)
            .collect();
        let widths = r.list("widths", default_widths);
        let pool_after = r.list("pool_after", default_pools);
        let head = r.get("head", HeadArg(arch.head_pool)).0;
        let defaults = SplitConfig::default();
        let split = SplitConfig {
            val_fraction: r.get("val_fraction", defaults.val_fraction),
            pool_limit: r.optional("pool_limit", desk_scale.then_some(DESK_POOL)),
            test_limit: r.optional("test_limit", None),
            seed,
        };
        let patch = BiasSpec::blue_top_left(seed);
        let mdef = MaskingConfig::default();
        let masking = MaskingConfig {
            policy: r.get("policy", if desk_scale { DESK_POLICY } else { mdef.policy }),
            method: r.get("cam", mdef.method),
            grid: r.get("mask_grid", mdef.grid),
            batch_size: r.get("mask_batch", mdef.batch_size),
        };
        let idef = IterativeConfig::default();
        let run = RunConfig {
            seed,
            desk_scale,
            data_dir: r.get("data_dir", PathBuf::from("data/mnist")),
            out_dir: r.get("out_dir", PathBuf::from("runs")),
            hyper,
            widths,
            pool_after,
            head,
            split,
            patches: r.get("patches", 1),
            patch_size: r.get("patch_size", patch.patch_size),
            p_class0: r.get("p_class0", patch.p_class0),
            p_class1: r.get("p_class1", patch.p_class1),
            masking,
            iterations: r.get("iterations", idef.iterations),
            accumulative: r.get("accumulative", idef.accumulative),
            stop_floor: r.get("stop_floor", idef.stop_floor),
            finetune_lr: r.optional("finetune_lr", None),
            coverage: r.list("coverage", vec![1.0, 0.95, 0.9]),
            trials: r.get("trials", 100),
            n: r.get("n", 20),
            d: r.get("d", 50),
            tol: r.get("tol", 1e-8),
            delta: r.get("delta", 1.0),
        };
        for v in run.violations() {
            r.problem(v);
        }
        r.finish()?;
        Ok(run)
    }

    fn violations(&self) -> Vec<String> {
        let mut v = self.hyper.violations();
        if self.widths.is_empty() || self.widths.contains(&0) {
            v.push("widths must list positive channel counts".into());
        }
        if let Some(&p) = self.pool_after.iter().find(|&&p| p >= self.widths.len()) {
            v.push(format!("pool_after names block {p} of {}", self.widths.len()));
        }
        if !(0.0..1.0).contains(&self.split.val_fraction) {
            v.push(format!("val_fraction must be in [0, 1), got {}", self.split.val_fraction));
        }
        if !matches!(self.patches, 1 | 2) {
            v.push(format!("patches must be 1 or 2, got {}", self.patches));
        }
        for (k, p) in [("p_class0", self.p_class0), ("p_class1", self.p_class1)] {
            if !(0.0..=1.0).contains(&p) {
                v.push(format!("{k} must be in [0, 1], got {p}"));
            }
        }
        if self.patch_size == 0 {
            v.push("patch_size must be positive".into());
        }
        if self.masking.batch_size == 0 {
            v.push("mask_batch must be positive".into());
        }
        if self.iterations == 0 {
            v.push("iterations must be positive".into());
        }
        if let Some(lr) = self.finetune_lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                v.push(format!("finetune_lr must be nonnegative, got {lr}"));
            }
        }
        if let Some(c) = self.coverage.iter().find(|&&c| !(c > 0.0 && c <= 1.0)) {
            v.push(format!("coverage targets must be in (0, 1], got {c}"));
        }
        if self.n == 0 || self.n >= self.d {
            v.push(format!("need 0 < n < d, got n={} d={}", self.n, self.d));
        }
        if !(self.tol > 0.0) {
            v.push(format!("tol must be positive, got {}", self.tol));
        }
        v
    }

    /// Every setting, explicit, in a form [`RunConfig::from_kv`] reads back identically.
    pub fn to_kv(&self) -> KvConfig {
        let h = &self.hyper;
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("desk_scale", self.desk_scale.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("learning_rate", h.learning_rate.to_string()),
            ("momentum", h.momentum.to_string()),
            ("weight_decay", h.weight_decay.to_string()),
            ("batch_size", h.batch_size.to_string()),
            ("epochs", h.epochs.to_string()),
            ("lr_decay_factor", h.lr_decay_factor.to_string()),
            ("lr_decay_every", h.lr_decay_every.to_string()),
            ("widths", join(&self.widths)),
            ("pool_after", join(&self.pool_after)),
            ("head", head_name(self.head).to_string()),
            ("val_fraction", self.split.val_fraction.to_string()),
            ("pool_limit", opt(&self.split.pool_limit)),
            ("test_limit", opt(&self.split.test_limit)),
            ("patches", self.patches.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("p_class0", self.p_class0.to_string()),
            ("p_class1", self.p_class1.to_string()),
            ("policy", self.masking.policy.to_string()),
            ("cam", self.masking.method.to_string()),
            ("mask_grid", self.masking.grid.to_string()),
            ("mask_batch", self.masking.batch_size.to_string()),
            ("iterations", self.iterations.to_string()),
            ("accumulative", self.accumulative.to_string()),
            ("stop_floor", self.stop_floor.to_string()),
            ("finetune_lr", opt(&self.finetune_lr)),
            ("coverage", join(&self.coverage)),
            ("trials", self.trials.to_string()),
            ("n", self.n.to_string()),
            ("d", self.d.to_string()),
            ("tol", self.tol.to_string()),
            ("delta", self.delta.to_string()),
        ];
        let mut kv = KvConfig::new();
        for (k, v) in pairs {
            kv.set(k, v).expect("static keys are valid");
        }
        kv
    }

    pub fn network(&self, input: [usize; 3], num_classes: usize) -> Result<NetworkSpec> {
        let spec = NetworkSpec {
            input,
            conv_blocks: self
                .widths
                .iter()
                .enumerate()
                .map(|(i, &w)| ConvBlock::same3x3(w, self.pool_after.contains(&i)))
                .collect(),
            head_pool: self.head,
            num_classes,
            cam_layer: self.widths.len().saturating_sub(1),
        };
        spec.block_shapes()?;
        Ok(spec)
    }

    pub fn biases(&self) -> Vec<BiasSpec> {
        let adjust = |b: BiasSpec| BiasSpec {
            patch_size: self.patch_size,
            p_class0: self.p_class0,
            p_class1: self.p_class1,
            ..b
        };
        let mut v = vec![adjust(BiasSpec::blue_top_left(self.seed))];
        if self.patches == 2 {
            v.push(adjust(BiasSpec::red_bottom_right(self.seed)));
        }
        v
    }

    pub fn iterative(&self) -> IterativeConfig {
        IterativeConfig {
            iterations: self.iterations,
            accumulative: self.accumulative,
            masking: self.masking,
            stop_floor: self.stop_floor,
            lr_override: self.finetune_lr,
        }
    }
}
