//! Few-step Euler sampler with pluggable negative-prompt guidance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::data::{Prompt, ToyImage, PIXELS};
use crate::flow::model::{patchify, unpatchify, ToyModel};
use crate::guidance::{cfg_combine, GuidanceSpec, Variant};
use crate::mmdit::{BlockMode, Probe};
use crate::tensor::{Matrix, Rng};

pub const DEFAULT_STEPS: usize = 8;
pub const MAX_STEPS: usize = 64;

/// Oracle scores for one run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub positive: f64,
    pub negative: f64,
    pub quality: f64,
}

/// Everything one sampling run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub spec: GuidanceSpec,
    pub pos: String,
    pub neg: Option<String>,
    pub seed: u64,
    pub steps: usize,
    pub image: ToyImage,
    /// `[step][layer]` image→negative logit maps; VSF runs only.
    pub neg_attn: Vec<Vec<Matrix>>,
    pub model_forwards: usize,
    pub attention_calls: usize,
    pub scores: Option<Scores>,
}

impl RunRecord {
    pub fn forwards_per_step(&self) -> f64 {
        self.model_forwards as f64 / self.steps as f64
    }
}

/// Velocity under `spec` at one state. Counts model forwards and attention
/// computations into `counters`.
fn guided_velocity(
    model: &ToyModel,
    x: &Matrix,
    t: f64,
    pos: &Prompt,
    neg: Option<&Prompt>,
    spec: &GuidanceSpec,
    probe: &mut Probe,
    forwards: &mut usize,
) -> Result<Matrix> {
    let need_neg = || neg.ok_or(Error::MissingNegative { variant: spec.variant.name() });
    *forwards += 1;
    match spec.variant {
        Variant::None => model.velocity_plain(x, t, pos, probe),
        Variant::Cfg => {
            let neg = need_neg()?;
            let u_pos = model.velocity_plain(x, t, pos, probe)?;
            *forwards += 1;
            let u_neg = model.velocity_plain(x, t, neg, probe)?;
            cfg_combine(&u_neg, &u_pos, spec.lambda)
        }
        Variant::Vsf => {
            let negative = model.embed_negative(need_neg()?)?;
            model.velocity(
                x,
                t,
                &model.embed_prompt(pos),
                &negative,
                BlockMode::Joint { alpha: spec.alpha, beta: spec.beta },
                probe,
            )
        }
        Variant::Nasa | Variant::Nag => {
            let negative = model.embed_prompt(need_neg()?);
            let mode = if spec.variant == Variant::Nasa {
                BlockMode::Nasa { alpha: spec.alpha }
            } else {
                BlockMode::Nag { phi: spec.phi, tau: spec.tau, blend: spec.blend }
            };
            model.velocity(x, t, &model.embed_prompt(pos), &negative, mode, probe)
        }
        Variant::Wef => model.velocity_wef(x, t, pos, need_neg()?, spec.alpha, probe),
    }
}

/// Integrates the guided velocity field from pure noise at `t = 1` down to
/// `t = 0` on a uniform grid of `steps` Euler steps.
pub fn euler_sample(
    model: &ToyModel,
    pos: &Prompt,
    neg: Option<&Prompt>,
    spec: &GuidanceSpec,
    steps: usize,
    seed: u64,
) -> Result<RunRecord> {
    spec.validate()?;
    if !(1..=MAX_STEPS).contains(&steps) {
        return Err(Error::Contract(format!("step count must lie in 1..={MAX_STEPS}, got {steps}")));
    }
    if spec.variant.needs_negative() && neg.is_none() {
        return Err(Error::MissingNegative { variant: spec.variant.name() });
    }
    let patch = model.config.patch;
    let mut rng = Rng::derive(seed, 0x5A3F);
    let noise: Vec<f64> = (0..PIXELS).map(|_| rng.normal()).collect();
    let mut x = patchify(&noise, patch);
    let dt = 1.0 / steps as f64;
    let mut probe = Probe {
        capture_neg_attn: spec.variant == Variant::Vsf,
        ..Probe::default()
    };
    let mut forwards = 0;
    let mut neg_attn = Vec::new();
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let u = guided_velocity(model, &x, t, pos, neg, spec, &mut probe, &mut forwards)?;
        x.add_scaled(&u, -dt)?;
        if probe.capture_neg_attn {
            neg_attn.push(std::mem::take(&mut probe.neg_attn));
        }
    }
    let image = ToyImage::from_pixels(unpatchify(&x, patch))?.clamped();
    Ok(RunRecord {
        run_id: format!("{}-s{seed}", spec.variant),
        spec: *spec,
        pos: pos.to_string(),
        neg: neg.map(|n| n.to_string()),
        seed,
        steps,
        image,
        neg_attn: if neg_attn.iter().all(|s| s.is_empty()) { Vec::new() } else { neg_attn },
        model_forwards: forwards,
        attention_calls: probe.attention_calls,
        scores: None,
    })
}
