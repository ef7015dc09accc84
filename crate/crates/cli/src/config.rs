//! Plain `key = value` configuration with `[section]` headers.
//!
//! Keys are addressed by their dotted path (`sampling.steps`). Inside a
//! section the prefix is implied, so `[sampling]` followed by `steps = 8` and
//! a top-level `sampling.steps = 8` mean the same thing. `#` starts a comment.
//! Unknown keys are rejected; a repeated key keeps its last value and emits a
//! warning.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use vsf_core::flow::{ModelConfig, TrainConfig};
use vsf_core::guidance::{GuidanceSpec, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset_size: usize,
    pub dataset_seed: u64,
    pub sample_steps: usize,
    pub sample_seed: u64,
    /// Seed set for suite scoring and sweeps.
    pub seeds: Vec<u64>,
    pub vsf: GuidanceSpec,
    pub nasa: GuidanceSpec,
    pub nag: GuidanceSpec,
    pub cfg: GuidanceSpec,
    pub wef: GuidanceSpec,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            dataset_size: 9000,
            dataset_seed: 0,
            sample_steps: 8,
            sample_seed: 0,
            seeds: (0..20).collect(),
            vsf: GuidanceSpec::new(Variant::Vsf),
            nasa: GuidanceSpec::new(Variant::Nasa),
            nag: GuidanceSpec::new(Variant::Nag),
            cfg: GuidanceSpec::new(Variant::Cfg),
            wef: GuidanceSpec::new(Variant::Wef),
            checkpoint: PathBuf::from("model.vsft"),
            out: PathBuf::from("runs"),
        }
    }
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "model.layers",
    "model.heads",
    "model.dim",
    "model.patch",
    "model.mlp_ratio",
    "model.time_features",
    "train.steps",
    "train.lr",
    "train.batch",
    "train.seed",
    "train.warmup",
    "train.prompt_drop",
    "train.grad_clip",
    "train.dataset_size",
    "train.dataset_seed",
    "sampling.steps",
    "sampling.seed",
    "sampling.seeds",
    "guidance.vsf.alpha",
    "guidance.vsf.beta",
    "guidance.nasa.alpha",
    "guidance.nag.phi",
    "guidance.nag.tau",
    "guidance.nag.blend",
    "guidance.cfg.lambda",
    "guidance.wef.alpha",
    "paths.checkpoint",
    "paths.out",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow!("{key}: cannot parse '{v}'"))
}

/// `a..b` (half open) or a comma list.
pub fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = if let Some((a, b)) = v.split_once("..") {
        let a: u64 = num("seeds", a.trim())?;
        let b: u64 = num("seeds", b.trim())?;
        (a..b).collect()
    } else {
        v.split(',').map(|s| num("seeds", s.trim())).collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        bail!("seed set '{v}' is empty");
    }
    Ok(seeds)
}

fn format_seeds(seeds: &[u64]) -> String {
    let contiguous = seeds.windows(2).all(|w| w[1] == w[0] + 1);
    if contiguous && seeds.len() > 1 {
        format!("{}..{}", seeds[0], seeds[seeds.len() - 1] + 1)
    } else {
        seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    }
}

impl Config {
    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "model.layers" => self.model.layers = num(key, v)?,
            "model.heads" => self.model.heads = num(key, v)?,
            "model.dim" => self.model.dim = num(key, v)?,
            "model.patch" => self.model.patch = num(key, v)?,
            "model.mlp_ratio" => self.model.mlp_ratio = num(key, v)?,
            "model.time_features" => self.model.time_features = num(key, v)?,
            "train.steps" => self.train.steps = num(key, v)?,
            "train.lr" => self.train.lr = num(key, v)?,
            "train.batch" => self.train.batch = num(key, v)?,
            "train.seed" => self.train.seed = num(key, v)?,
            "train.warmup" => self.train.warmup = num(key, v)?,
            "train.prompt_drop" => self.train.prompt_drop = num(key, v)?,
            "train.grad_clip" => self.train.grad_clip = num(key, v)?,
            "train.dataset_size" => self.dataset_size = num(key, v)?,
            "train.dataset_seed" => self.dataset_seed = num(key, v)?,
            "sampling.steps" => self.sample_steps = num(key, v)?,
            "sampling.seed" => self.sample_seed = num(key, v)?,
            "sampling.seeds" => self.seeds = parse_seeds(v)?,
            "guidance.vsf.alpha" => self.vsf.alpha = num(key, v)?,
            "guidance.vsf.beta" => self.vsf.beta = num(key, v)?,
            "guidance.nasa.alpha" => self.nasa.alpha = num(key, v)?,
            "guidance.nag.phi" => self.nag.phi = num(key, v)?,
            "guidance.nag.tau" => self.nag.tau = num(key, v)?,
            "guidance.nag.blend" => self.nag.blend = num(key, v)?,
            "guidance.cfg.lambda" => self.cfg.lambda = num(key, v)?,
            "guidance.wef.alpha" => self.wef.alpha = num(key, v)?,
            "paths.checkpoint" => self.checkpoint = PathBuf::from(v),
            "paths.out" => self.out = PathBuf::from(v),
            _ => bail!("unknown config key '{key}'"),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "model.layers" => self.model.layers.to_string(),
            "model.heads" => self.model.heads.to_string(),
            "model.dim" => self.model.dim.to_string(),
            "model.patch" => self.model.patch.to_string(),
            "model.mlp_ratio" => self.model.mlp_ratio.to_string(),
            "model.time_features" => self.model.time_features.to_string(),
            "train.steps" => self.train.steps.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.batch" => self.train.batch.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.warmup" => self.train.warmup.to_string(),
            "train.prompt_drop" => self.train.prompt_drop.to_string(),
            "train.grad_clip" => self.train.grad_clip.to_string(),
            "train.dataset_size" => self.dataset_size.to_string(),
            "train.dataset_seed" => self.dataset_seed.to_string(),
            "sampling.steps" => self.sample_steps.to_string(),
            "sampling.seed" => self.sample_seed.to_string(),
            "sampling.seeds" => format_seeds(&self.seeds),
            "guidance.vsf.alpha" => self.vsf.alpha.to_string(),
            "guidance.vsf.beta" => self.vsf.beta.to_string(),
            "guidance.nasa.alpha" => self.nasa.alpha.to_string(),
            "guidance.nag.phi" => self.nag.phi.to_string(),
            "guidance.nag.tau" => self.nag.tau.to_string(),
            "guidance.nag.blend" => self.nag.blend.to_string(),
            "guidance.cfg.lambda" => self.cfg.lambda.to_string(),
            "guidance.wef.alpha" => self.wef.alpha.to_string(),
            "paths.checkpoint" => self.checkpoint.display().to_string(),
            "paths.out" => self.out.display().to_string(),
            _ => unreachable!("KEYS lists only known keys"),
        }
    }

    /// Canonical rendering: every key, one per line, in [`KEYS`] order.
    /// Parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    /// Default guidance settings for `variant`.
    pub fn guidance(&self, variant: Variant) -> GuidanceSpec {
        match variant {
            Variant::None => GuidanceSpec::none(),
            Variant::Vsf => self.vsf,
            Variant::Nasa => self.nasa,
            Variant::Nag => self.nag,
            Variant::Cfg => self.cfg,
            Variant::Wef => self.wef,
        }
    }

    /// Parses config text. Returns the config and any warnings.
    pub fn parse(text: &str) -> Result<(Self, Vec<String>)> {
        let mut cfg = Config::default();
        let mut warnings = Vec::new();
        let mut seen: Vec<(String, usize)> = Vec::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|s| !s.is_empty() && !s.contains(char::is_whitespace))
                    .ok_or_else(|| anyhow!("line {n}: malformed section header '{line}'"))?;
                section = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {n}: expected 'key = value', got '{line}'"))?;
            let k = k.trim();
            if k.is_empty() || k.contains(char::is_whitespace) {
                bail!("line {n}: malformed key '{k}'");
            }
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            cfg.set(&key, v.trim()).with_context(|| format!("line {n}"))?;
            if let Some((_, first)) = seen.iter().find(|(s, _)| *s == key) {
                warnings.push(format!("line {n}: '{key}' repeats line {first}; the last value wins"));
            } else {
                seen.push((key, n));
            }
        }
        Ok((cfg, warnings))
    }

    /// Reads a config file; no path means all defaults.
    pub fn load(path: Option<&Path>) -> Result<(Self, Vec<String>)> {
        match path {
            None => Ok((Config::default(), Vec::new())),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in config {}", p.display()))
            }
        }
    }
}
