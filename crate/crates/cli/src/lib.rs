//! `vsflab`: train the toy flow model, sample with negative-prompt guidance,
//! sweep guidance settings and inspect the results.
//!
//! Every command writes under `--out/<run-id>/`, where the run id is a hash of
//! the effective configuration, the command and its seed.

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use sha2::{Digest, Sha256};
use vsf_core::eval::{self, PromptPair, Sampler, SweepResult, YKey};
use vsf_core::flow::{checkpoint, make_dataset, train, Prompt, RunRecord, ToyModel};
use vsf_core::guidance::{GuidanceSpec, Variant};

pub use config::Config;

#[derive(Parser, Debug)]
#[command(name = "vsflab", version, about = "Negative-prompt guidance experiments on a toy flow model")]
pub struct Cli {
    /// Configuration file (key = value lines with [section] headers)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root; each run writes into a subdirectory named by its run id
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Worker threads for sampling fan-out (0 = one per core)
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the toy model; writes model.vsft and loss.csv
    Train(TrainArgs),
    /// Generate one image; writes image.ppm, record.csv and record.json
    Sample(SampleArgs),
    /// Score a hyperparameter sweep on the standard suite; writes sweep.csv
    Sweep(SweepArgs),
    /// Extract critical points from a sweep CSV; writes frontier.csv
    Frontier(FrontierArgs),
    /// Export per-step attention maps of a VSF run record
    Attnmap(AttnmapArgs),
    /// Print the closed-form attention cost of a variant against no guidance
    Cost(CostArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of generated training images
    #[arg(long, default_value_t = 9000)]
    pub dataset_size: usize,
}

#[derive(Args, Debug)]
pub struct GuidanceArgs {
    /// Negative scale for vsf, nasa and wef [default: vsf 1, nasa 0.5, wef 1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// VSF logit penalty on image-to-negative attention [default: 0]
    #[arg(long)]
    pub beta: Option<f64>,
    /// NAG extrapolation scale [default: 11]
    #[arg(long)]
    pub phi: Option<f64>,
    /// NAG norm cap [default: 5]
    #[arg(long)]
    pub tau: Option<f64>,
    /// NAG blend weight [default: 0.5]
    #[arg(long)]
    pub blend: Option<f64>,
    /// CFG scale [default: 2.8]
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// none, cfg, nasa, nag, vsf or wef
    #[arg(long, default_value = "vsf")]
    pub variant: Variant,
    /// Positive prompt
    #[arg(long)]
    pub pos: String,
    /// Negative prompt; an empty string leaves no negative tokens, so vsf
    /// reduces to no guidance
    #[arg(long)]
    pub neg: Option<String>,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    /// Euler steps
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint to sample from
    #[arg(long, default_value = "model.vsft")]
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// none, cfg, nasa, nag, vsf or wef
    #[arg(long)]
    pub variant: Variant,
    /// Number of hyperparameter settings
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Seed for random hyperparameter draws (nasa always uses a grid)
    #[arg(long, default_value_t = 0)]
    pub sweep_seed: u64,
    /// Image seeds per prompt, as a..b or a comma list
    #[arg(long, default_value = "0..20")]
    pub seeds: String,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, default_value = "model.vsft")]
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct FrontierArgs {
    /// Sweep CSV to read
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Score traded against the negative score: pos or quality
    #[arg(long, default_value = "pos")]
    pub y: YKey,
}

#[derive(Args, Debug)]
pub struct AttnmapArgs {
    /// record.json written by `sample`
    #[arg(long)]
    pub record: PathBuf,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    /// none, cfg, nasa, nag, vsf or wef
    #[arg(long)]
    pub variant: Variant,
    /// Image tokens
    #[arg(long)]
    pub ni: u64,
    /// Positive prompt tokens
    #[arg(long)]
    pub np: u64,
    /// Negative prompt tokens
    #[arg(long)]
    pub nn: u64,
    #[arg(long, default_value_t = 32)]
    pub dim: u64,
    #[arg(long, default_value_t = 2)]
    pub heads: u64,
    #[arg(long, default_value_t = 4)]
    pub layers: u64,
}

/// Bad flag combination; reported with exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn from_cli(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// First 16 hex digits of SHA-256 over the canonical config (minus the
/// `paths` section), the command description and the seed.
pub fn run_id(cfg: &Config, command: &str, seed: u64) -> String {
    let mut h = Sha256::new();
    for line in cfg.to_text().lines().filter(|l| !l.starts_with("paths.")) {
        h.update(line.as_bytes());
        h.update(b"\n");
    }
    h.update(command.as_bytes());
    h.update(seed.to_le_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn run_dir(cfg: &Config, command: &str, seed: u64) -> Result<(String, PathBuf)> {
    let id = run_id(cfg, command, seed);
    let dir = cfg.out.join(&id);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok((id, dir))
}

/// Loads a checkpoint and returns it with a digest of its bytes, so run ids
/// change when the weights do.
fn load_model(path: &Path) -> Result<(ToyModel, String)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let model = checkpoint::from_bytes(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let digest: String = Sha256::digest(&bytes).iter().take(8).map(|b| format!("{b:02x}")).collect();
    Ok((model, digest))
}

const RECORD_HEADER: &str =
    "run_id,variant,alpha,beta,phi,tau,blend,lambda,pos,neg,seed,steps,model_forwards,attention_calls,positive,negative,quality\n";

/// One-row CSV summary of a run.
pub fn record_csv(r: &RunRecord) -> String {
    let s = r.spec;
    let (p, n, q) = r
        .scores
        .map(|x| (format!("{:.6}", x.positive), format!("{:.6}", x.negative), format!("{:.6}", x.quality)))
        .unwrap_or_default();
    format!(
        "{RECORD_HEADER}{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{},{p},{n},{q}\n",
        r.run_id,
        s.variant,
        s.alpha,
        s.beta,
        s.phi,
        s.tau,
        s.blend,
        s.lambda,
        r.pos,
        r.neg.as_deref().unwrap_or(""),
        r.seed,
        r.steps,
        r.model_forwards,
        r.attention_calls,
    )
}

fn cmd_train(cfg: &mut Config, a: &TrainArgs, m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    if from_cli(m, "steps") {
        cfg.train.steps = a.steps;
    }
    if from_cli(m, "lr") {
        cfg.train.lr = a.lr;
    }
    if from_cli(m, "batch") {
        cfg.train.batch = a.batch;
    }
    if from_cli(m, "seed") {
        cfg.train.seed = a.seed;
    }
    if from_cli(m, "dataset_size") {
        cfg.dataset_size = a.dataset_size;
    }
    let (_, dir) = run_dir(cfg, "train", cfg.train.seed)?;
    let data = make_dataset(cfg.dataset_size, cfg.dataset_seed);
    let mut model = ToyModel::init(cfg.model, cfg.train.seed)?;
    let report = train(&mut model, &data, &cfg.train)?;
    let ckpt = dir.join("model.vsft");
    checkpoint::save(&model, &ckpt)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.6}\n"));
    }
    std::fs::write(dir.join("loss.csv"), csv)?;
    let n = report.losses.len();
    if n > 0 {
        let w = n.min(100);
        writeln!(
            out,
            "loss first-{w} mean {:.4}, last-{w} mean {:.4}",
            report.mean_window(0..w),
            report.mean_window(n - w..n)
        )?;
    }
    writeln!(out, "{}", ckpt.display())?;
    Ok(())
}

fn guidance_spec(cfg: &Config, variant: Variant, g: &GuidanceArgs) -> GuidanceSpec {
    let mut spec = cfg.guidance(variant);
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut spec.alpha, g.alpha);
    set(&mut spec.beta, g.beta);
    set(&mut spec.phi, g.phi);
    set(&mut spec.tau, g.tau);
    set(&mut spec.blend, g.blend);
    set(&mut spec.lambda, g.lambda);
    spec
}

fn cmd_sample(cfg: &mut Config, a: &SampleArgs, m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    if from_cli(m, "steps") {
        cfg.sample_steps = a.steps;
    }
    if from_cli(m, "seed") {
        cfg.sample_seed = a.seed;
    }
    if from_cli(m, "checkpoint") {
        cfg.checkpoint = a.checkpoint.clone();
    }
    let spec = guidance_spec(cfg, a.variant, &a.guidance);
    if a.variant.needs_negative() && a.neg.is_none() {
        return Err(usage(format!("--neg is required for --variant {}", a.variant)));
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let pos = Prompt::parse(&a.pos).map_err(|e| usage(e.to_string()))?;
    let neg = match &a.neg {
        Some(t) => Some(Prompt::parse(t).map_err(|e| usage(e.to_string()))?),
        None => None,
    };
    let neg = if a.variant.needs_negative() { neg } else { None };
    let (model, weights) = load_model(&cfg.checkpoint)?;
    let desc = format!(
        "sample {weights} {spec:?} {pos} | {}",
        neg.as_ref().map(|n| n.to_string()).unwrap_or_default()
    );
    let (id, dir) = run_dir(cfg, &desc, cfg.sample_seed)?;
    let mut record = eval::score_run(&model, &pos, neg.as_ref(), &spec, cfg.sample_steps, cfg.sample_seed)?;
    record.run_id = id;
    std::fs::write(dir.join("image.ppm"), record.image.to_ppm())?;
    std::fs::write(dir.join("record.csv"), record_csv(&record))?;
    std::fs::write(dir.join("record.json"), serde_json::to_string(&record)?)?;
    writeln!(out, "{}", dir.display())?;
    Ok(())
}

fn cmd_sweep(cfg: &mut Config, a: &SweepArgs, m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    if from_cli(m, "steps") {
        cfg.sample_steps = a.steps;
    }
    if from_cli(m, "seeds") {
        cfg.seeds = config::parse_seeds(&a.seeds).map_err(|e| usage(e.to_string()))?;
    }
    if from_cli(m, "checkpoint") {
        cfg.checkpoint = a.checkpoint.clone();
    }
    if a.runs == 0 {
        return Err(usage("--runs must be at least 1"));
    }
    let (model, weights) = load_model(&cfg.checkpoint)?;
    let (_, dir) = run_dir(cfg, &format!("sweep {weights} {} {}", a.variant, a.runs), a.sweep_seed)?;
    let suite: Vec<PromptPair> = eval::standard_suite();
    let res = eval::sweep(
        &model,
        &suite,
        a.variant,
        Sampler::Random { seed: a.sweep_seed },
        a.runs,
        &cfg.seeds,
        cfg.sample_steps,
    )?;
    let path = dir.join("sweep.csv");
    std::fs::write(&path, res.to_csv()?)?;
    writeln!(out, "{}", path.display())?;
    Ok(())
}

fn cmd_frontier(cfg: &Config, a: &FrontierArgs, out: &mut dyn Write) -> Result<()> {
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let rows = SweepResult::from_csv(&text)?.rows;
    if rows.is_empty() {
        return Err(anyhow!("{} holds no sweep rows", a.input.display()));
    }
    let frontier = SweepResult {
        rows: eval::pareto_frontier(&rows, a.y),
    };
    let (_, dir) = run_dir(cfg, &format!("frontier {:?} {text}", a.y), 0)?;
    let path = dir.join("frontier.csv");
    let csv = frontier.to_csv()?;
    std::fs::write(&path, &csv)?;
    write!(out, "{csv}")?;
    writeln!(out, "{}", path.display())?;
    Ok(())
}

fn cmd_attnmap(cfg: &Config, a: &AttnmapArgs, out: &mut dyn Write) -> Result<()> {
    let text = std::fs::read_to_string(&a.record).with_context(|| format!("reading {}", a.record.display()))?;
    let record: RunRecord = serde_json::from_str(&text).context("parsing run record")?;
    let (_, dir) = run_dir(cfg, &format!("attnmap {}", record.run_id), record.seed)?;
    let paths = eval::dump_attn_maps(&record, &dir.join("attn"))?;
    writeln!(out, "wrote {} files to {}", paths.len(), dir.join("attn").display())?;
    Ok(())
}

fn cmd_cost(cfg: &Config, a: &CostArgs, m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let dim = if from_cli(m, "dim") { a.dim } else { cfg.model.dim as u64 };
    let heads = if from_cli(m, "heads") { a.heads } else { cfg.model.heads as u64 };
    let layers = if from_cli(m, "layers") { a.layers } else { cfg.model.layers as u64 };
    let base = eval::attn_cost(Variant::None, a.ni, a.np, a.nn, dim, heads, layers);
    let cost = eval::attn_cost(a.variant, a.ni, a.np, a.nn, dim, heads, layers);
    let ratio = if base.macs == 0 { f64::NAN } else { cost.macs as f64 / base.macs as f64 };
    writeln!(out, "{:<8} {:>16} {:>10} {:>8}", "variant", "attn_macs", "forwards", "ratio")?;
    writeln!(out, "{:<8} {:>16} {:>10} {:>8.4}", "none", base.macs, base.forwards_per_step, 1.0)?;
    writeln!(out, "{:<8} {:>16} {:>10} {:>8.4}", a.variant.name(), cost.macs, cost.forwards_per_step, ratio)?;
    Ok(())
}

fn dispatch(argv: Vec<OsString>, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let matches = Cli::command().try_get_matches_from(argv)?;
    let cli = Cli::from_arg_matches(&matches)?;
    let (mut cfg, warnings) = Config::load(cli.config.as_deref())?;
    for w in warnings {
        writeln!(err, "warning: {w}")?;
    }
    if from_cli(&matches, "out") {
        cfg.out = cli.out.clone();
    }
    if cli.jobs > 0 {
        // a pool already built by an earlier call in this process is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global();
    }
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    match &cli.command {
        Command::Train(a) => cmd_train(&mut cfg, a, sub, out),
        Command::Sample(a) => cmd_sample(&mut cfg, a, sub, out),
        Command::Sweep(a) => cmd_sweep(&mut cfg, a, sub, out),
        Command::Frontier(a) => cmd_frontier(&cfg, a, out),
        Command::Attnmap(a) => cmd_attnmap(&cfg, a, out),
        Command::Cost(a) => cmd_cost(&cfg, a, sub, out),
    }
}

/// Runs one invocation and returns the process exit status: 0 on success,
/// 2 for usage errors, 1 for anything else.
pub fn run_command<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    match dispatch(argv, out, err) {
        Ok(()) => 0,
        Err(e) => {
            if let Some(c) = e.downcast_ref::<clap::Error>() {
                let code = c.exit_code();
                let text = c.render().to_string();
                if code == 0 {
                    let _ = write!(out, "{text}");
                } else {
                    let _ = write!(err, "{text}");
                }
                return code;
            }
            let _ = writeln!(err, "error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}
