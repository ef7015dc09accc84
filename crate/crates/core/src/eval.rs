//! Scoring, sweeps, trade-off frontiers, attention cost and attention-map
//! export for the toy testbed.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::data::{oracle_classify, Color, Prompt, Shape, ToyImage};
use crate::flow::model::ToyModel;
use crate::flow::sample::{euler_sample, RunRecord, Scores};
use crate::guidance::{GuidanceSpec, Variant};
use crate::tensor::{Matrix, Rng};

/// Binary positive/negative scores plus template quality for one image.
///
/// Positive is 1 when the oracle sees the positive prompt's shape (any shape
/// counts when the prompt names none). Negative is 1 when every attribute the
/// negative prompt names is absent.
pub fn score_image(image: &ToyImage, pos: &Prompt, neg: Option<&Prompt>) -> Scores {
    let c = oracle_classify(image);
    let positive = match pos.shape() {
        Some(s) => c.shape == Some(s),
        None => c.shape.is_some(),
    };
    let negative = match neg {
        None => true,
        Some(n) => {
            let color_absent = n.color().map_or(true, |col| !c.has_color(col));
            let shape_absent = n.shape().map_or(true, |s| c.shape != Some(s));
            color_absent && shape_absent
        }
    };
    Scores {
        positive: positive as u8 as f64,
        negative: negative as u8 as f64,
        quality: c.quality,
    }
}

/// Samples one image and attaches its scores.
pub fn score_run(
    model: &ToyModel,
    pos: &Prompt,
    neg: Option<&Prompt>,
    spec: &GuidanceSpec,
    steps: usize,
    seed: u64,
) -> Result<RunRecord> {
    let mut record = euler_sample(model, pos, neg, spec, steps, seed)?;
    record.scores = Some(score_image(&record.image, pos, neg));
    Ok(record)
}

/// A positive prompt and the negative prompt paired with it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptPair {
    pub pos: Prompt,
    pub neg: Prompt,
}

impl PromptPair {
    pub fn parse(pos: &str, neg: &str) -> Result<Self> {
        Ok(Self {
            pos: Prompt::parse(pos)?,
            neg: Prompt::parse(neg)?,
        })
    }
}

/// Every shape asked for "of any color", each paired with every colour as
/// the negative: the colour co-occurs with the shape in the training data.
pub fn standard_suite() -> Vec<PromptPair> {
    let mut out = Vec::new();
    for s in Shape::ALL {
        for c in Color::ALL {
            out.push(PromptPair::parse(&format!("a {} of any color", s.word()), c.word()).expect("vocabulary words"));
        }
    }
    out
}

/// Mean scores over every (prompt, seed) combination. Runs fan out across
/// threads; the sum is taken in input order.
pub fn score_suite(
    model: &ToyModel,
    prompts: &[PromptPair],
    spec: &GuidanceSpec,
    seeds: &[u64],
    steps: usize,
) -> Result<Scores> {
    if prompts.is_empty() || seeds.is_empty() {
        return Err(Error::Contract("score_suite needs at least one prompt and one seed".into()));
    }
    let jobs: Vec<(&PromptPair, u64)> = prompts
        .iter()
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let scores: Vec<Result<Scores>> = jobs
        .par_iter()
        .map(|(p, seed)| {
            let neg = (!p.neg.is_empty()).then_some(&p.neg);
            let spec = if neg.is_none() && spec.variant.needs_negative() {
                GuidanceSpec::none()
            } else {
                *spec
            };
            let r = score_run(model, &p.pos, neg, &spec, steps, *seed)?;
            Ok(r.scores.expect("score_run attaches scores"))
        })
        .collect();
    let mut sum = Scores {
        positive: 0.0,
        negative: 0.0,
        quality: 0.0,
    };
    for s in scores {
        let s = s?;
        sum.positive += s.positive;
        sum.negative += s.negative;
        sum.quality += s.quality;
    }
    let n = jobs.len() as f64;
    Ok(Scores {
        positive: sum.positive / n,
        negative: sum.negative / n,
        quality: sum.quality / n,
    })
}

/// How sweep hyperparameters are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    /// Uniform draws over each variant's declared range.
    Random { seed: u64 },
    /// Evenly spaced points; only NASA has a one-dimensional grid.
    Grid,
}

pub const VSF_ALPHA: (f64, f64) = (0.0, 4.0);
pub const VSF_BETA: (f64, f64) = (0.0, 2.0);
pub const NAG_PHI: (f64, f64) = (0.0, 16.0);
pub const NAG_TAU: (f64, f64) = (1.0, 10.0);
pub const NAG_BLEND: (f64, f64) = (0.0, 1.0);
pub const NASA_ALPHA: (f64, f64) = (0.0, 1.0);
pub const CFG_LAMBDA: (f64, f64) = (1.0, 5.0);
pub const WEF_ALPHA: (f64, f64) = (0.0, 4.0);

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// The hyperparameter settings a sweep visits. NASA always uses the grid.
pub fn sweep_specs(variant: Variant, sampler: Sampler, n_runs: usize) -> Result<Vec<GuidanceSpec>> {
    if n_runs == 0 {
        return Err(Error::Contract("a sweep needs at least one run".into()));
    }
    let seed = match (variant, sampler) {
        (Variant::Nasa, _) => {
            return Ok(grid(NASA_ALPHA.0, NASA_ALPHA.1, n_runs)
                .into_iter()
                .map(GuidanceSpec::nasa)
                .collect())
        }
        (Variant::None, _) => return Ok(vec![GuidanceSpec::none(); n_runs]),
        (_, Sampler::Random { seed }) => seed,
        (v, Sampler::Grid) => {
            return Err(Error::Contract(format!("no grid is defined for {v}; use a random sweep")));
        }
    };
    let mut rng = Rng::derive(seed, 0x5EE9);
    let mut draw = |(lo, hi): (f64, f64)| rng.uniform_range(lo, hi);
    Ok((0..n_runs)
        .map(|_| match variant {
            Variant::Vsf => {
                let a = draw(VSF_ALPHA);
                GuidanceSpec::vsf(a, draw(VSF_BETA))
            }
            Variant::Nag => {
                let phi = draw(NAG_PHI);
                let tau = draw(NAG_TAU);
                GuidanceSpec::nag(phi, tau, draw(NAG_BLEND))
            }
            Variant::Cfg => GuidanceSpec::cfg(draw(CFG_LAMBDA)),
            Variant::Wef => GuidanceSpec::wef(draw(WEF_ALPHA)),
            Variant::Nasa | Variant::None => unreachable!("handled above"),
        })
        .collect())
}

/// One sweep configuration with its suite-mean scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub spec: GuidanceSpec,
    pub pos: f64,
    pub neg: f64,
    pub quality: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    variant: String,
    alpha: String,
    beta: String,
    phi: String,
    tau: String,
    blend: String,
    lambda: String,
    pos: String,
    neg: String,
    quality: String,
}

fn fixed(v: f64) -> String {
    format!("{v:.6}")
}

fn parse_field(name: &str, s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("column {name}: '{s}' is not a number")))
}

impl SweepResult {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            let s = r.spec;
            w.serialize(CsvRow {
                variant: s.variant.name().to_string(),
                alpha: fixed(s.alpha),
                beta: fixed(s.beta),
                phi: fixed(s.phi),
                tau: fixed(s.tau),
                blend: fixed(s.blend),
                lambda: fixed(s.lambda),
                pos: fixed(r.pos),
                neg: fixed(r.neg),
                quality: fixed(r.quality),
            })
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        if self.rows.is_empty() {
            w.write_record(["variant", "alpha", "beta", "phi", "tau", "blend", "lambda", "pos", "neg", "quality"])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rd.deserialize::<CsvRow>() {
            let r = rec.map_err(|e| Error::Format(e.to_string()))?;
            let spec = GuidanceSpec {
                variant: r.variant.parse()?,
                alpha: parse_field("alpha", &r.alpha)?,
                beta: parse_field("beta", &r.beta)?,
                phi: parse_field("phi", &r.phi)?,
                tau: parse_field("tau", &r.tau)?,
                blend: parse_field("blend", &r.blend)?,
                lambda: parse_field("lambda", &r.lambda)?,
            };
            rows.push(SweepRow {
                spec,
                pos: parse_field("pos", &r.pos)?,
                neg: parse_field("neg", &r.neg)?,
                quality: parse_field("quality", &r.quality)?,
            });
        }
        Ok(Self { rows })
    }
}

/// Scores every setting from [`sweep_specs`] on the same prompts and seeds.
pub fn sweep(
    model: &ToyModel,
    prompts: &[PromptPair],
    variant: Variant,
    sampler: Sampler,
    n_runs: usize,
    seeds: &[u64],
    steps: usize,
) -> Result<SweepResult> {
    let rows = sweep_specs(variant, sampler, n_runs)?
        .into_iter()
        .map(|spec| {
            let s = score_suite(model, prompts, &spec, seeds, steps)?;
            Ok(SweepRow {
                spec,
                pos: s.positive,
                neg: s.negative,
                quality: s.quality,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { rows })
}

/// Which score a frontier trades against the negative score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum YKey {
    Positive,
    Quality,
}

impl YKey {
    pub fn of(self, row: &SweepRow) -> f64 {
        match self {
            YKey::Positive => row.pos,
            YKey::Quality => row.quality,
        }
    }
}

impl std::str::FromStr for YKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pos" | "positive" => Ok(YKey::Positive),
            "quality" => Ok(YKey::Quality),
            _ => Err(Error::Contract(format!("unknown frontier axis '{s}'; use positive or quality"))),
        }
    }
}

/// Critical points: walking rows from highest negative score down (ties by
/// higher `y` first), keep each row whose `y` beats every row before it.
pub fn pareto_frontier(rows: &[SweepRow], y: YKey) -> Vec<SweepRow> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| b.neg.total_cmp(&a.neg).then(y.of(b).total_cmp(&y.of(a))));
    let mut best = f64::NEG_INFINITY;
    let mut out = Vec::new();
    for r in sorted {
        if y.of(&r) > best {
            best = y.of(&r);
            out.push(r);
        }
    }
    out
}

/// Closed-form attention work for one denoising step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnCost {
    /// Multiply-accumulates in `QKᵀ` and `AV`, summed over layers and passes.
    pub macs: u64,
    pub forwards_per_step: u64,
}

fn attn_macs(n_q: u64, n_k: u64, d_model: u64) -> u64 {
    2 * n_q * n_k * d_model
}

/// Attention cost per step. Head count does not change the MAC total, since
/// heads split `d_model` between them.
pub fn attn_cost(variant: Variant, n_i: u64, n_p: u64, n_n: u64, d_model: u64, _heads: u64, layers: u64) -> AttnCost {
    let base = n_i + n_p;
    let per_layer = match variant {
        Variant::None => attn_macs(base, base, d_model),
        Variant::Cfg => 2 * attn_macs(base, base, d_model),
        Variant::Vsf => attn_macs(base + n_n, base + 2 * n_n, d_model),
        Variant::Nasa | Variant::Nag => attn_macs(base, base, d_model) + attn_macs(n_i + n_n, n_i + n_n, d_model),
        Variant::Wef => attn_macs(base + n_n, base + n_n, d_model),
    };
    AttnCost {
        macs: per_layer * layers,
        forwards_per_step: if variant == Variant::Cfg { 2 } else { 1 },
    }
}

/// Greyscale P5 image of `map`, min-max stretched; a constant map is mid-grey.
pub fn map_to_pgm(map: &Matrix) -> Vec<u8> {
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", map.cols(), map.rows()).into_bytes();
    for &v in map.data() {
        let g = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        out.push((g * 255.0).round() as u8);
    }
    out
}

/// Writes `attn_s{step}_l{layer}.pgm` per step and layer plus `attn_maps.csv`
/// holding the raw values. Returns the paths written.
pub fn dump_attn_maps(record: &RunRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    if record.spec.variant != Variant::Vsf {
        return Err(Error::Contract(format!(
            "attention maps exist only for vsf runs, got {}",
            record.spec.variant
        )));
    }
    if record.neg_attn.is_empty() {
        return Err(Error::Contract("run has no negative tokens, so no attention maps".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    let mut csv = String::from("step,layer,row,col,value\n");
    for (s, layers) in record.neg_attn.iter().enumerate() {
        for (l, map) in layers.iter().enumerate() {
            let path = dir.join(format!("attn_s{s:02}_l{l}.pgm"));
            std::fs::write(&path, map_to_pgm(map))?;
            paths.push(path);
            for r in 0..map.rows() {
                for c in 0..map.cols() {
                    csv.push_str(&format!("{s},{l},{r},{c},{}\n", map.get(r, c)));
                }
            }
        }
    }
    let path = dir.join("attn_maps.csv");
    std::fs::File::create(&path)?.write_all(csv.as_bytes())?;
    paths.push(path);
    Ok(paths)
}
