//! Guidance combinators over single-head attention inputs and outputs.
//!
//! Everything here is a pure function on already-projected matrices. The
//! multi-head, multi-stream plumbing lives in [`crate::mmdit`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{row_softmax, softmax_rows, Mask, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    None,
    Cfg,
    Nasa,
    Nag,
    Vsf,
    Wef,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::None,
        Variant::Cfg,
        Variant::Nasa,
        Variant::Nag,
        Variant::Vsf,
        Variant::Wef,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Cfg => "cfg",
            Variant::Nasa => "nasa",
            Variant::Nag => "nag",
            Variant::Vsf => "vsf",
            Variant::Wef => "wef",
        }
    }

    pub fn needs_negative(self) -> bool {
        self != Variant::None
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Contract(format!("unknown guidance variant '{s}'")))
    }
}

/// Variant selector plus every guidance scalar. Fields that the active
/// variant does not read are carried along untouched.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub variant: Variant,
    /// Negative value scale for VSF, NASA and WEF.
    pub alpha: f64,
    /// Logit penalty on image-to-flipped-negative attention (VSF).
    pub beta: f64,
    /// NAG extrapolation scale.
    pub phi: f64,
    /// NAG norm cap relative to the positive branch.
    pub tau: f64,
    /// NAG blend weight towards the capped extrapolation.
    pub blend: f64,
    /// CFG guidance scale.
    pub lambda: f64,
}

impl GuidanceSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            alpha: match variant {
                Variant::Nasa => 0.5,
                _ => 1.0,
            },
            beta: 0.0,
            phi: 11.0,
            tau: 5.0,
            blend: 0.5,
            lambda: 2.8,
        }
    }

    pub fn none() -> Self {
        Self::new(Variant::None)
    }

    pub fn vsf(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            ..Self::new(Variant::Vsf)
        }
    }

    pub fn nasa(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::new(Variant::Nasa)
        }
    }

    pub fn nag(phi: f64, tau: f64, blend: f64) -> Self {
        Self {
            phi,
            tau,
            blend,
            ..Self::new(Variant::Nag)
        }
    }

    pub fn cfg(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::new(Variant::Cfg)
        }
    }

    pub fn wef(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::new(Variant::Wef)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("phi", self.phi),
            ("tau", self.tau),
            ("blend", self.blend),
            ("lambda", self.lambda),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::Contract(format!("guidance {name} must be finite, got {v}")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("phi", self.phi)] {
            if v < 0.0 {
                return Err(Error::Contract(format!("guidance {name} must be >= 0, got {v}")));
            }
        }
        if self.tau < 1.0 {
            return Err(Error::Contract(format!("guidance tau must be >= 1, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::Contract(format!(
                "guidance blend must lie in [0, 1], got {}",
                self.blend
            )));
        }
        Ok(())
    }
}

/// Allow-mask plus additive logit bias over (query, key) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnPlan {
    pub allow: Mask,
    pub bias: Matrix,
}

impl AttnPlan {
    pub fn full(n_q: usize, n_k: usize) -> Self {
        Self {
            allow: Mask::filled(n_q, n_k, true),
            bias: Matrix::zeros(n_q, n_k),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.allow.shape()
    }
}

/// Queries plus separate positive and negative key/value blocks for one head.
#[derive(Clone, Debug)]
pub struct AttnInputs {
    pub q: Matrix,
    pub k_pos: Matrix,
    pub v_pos: Matrix,
    pub k_neg: Matrix,
    pub v_neg: Matrix,
}

impl AttnInputs {
    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }

    pub fn n_pos(&self) -> usize {
        self.k_pos.rows()
    }

    pub fn n_neg(&self) -> usize {
        self.k_neg.rows()
    }

    fn check(&self) -> Result<()> {
        let d = self.head_dim();
        for (m, name) in [
            (&self.k_pos, "k_pos"),
            (&self.v_pos, "v_pos"),
            (&self.k_neg, "k_neg"),
            (&self.v_neg, "v_neg"),
        ] {
            if m.cols() != d {
                return Err(Error::Contract(format!(
                    "{name} width {} differs from head dim {d}",
                    m.cols()
                )));
            }
        }
        if self.k_pos.rows() != self.v_pos.rows() {
            return Err(Error::shape("attn_inputs", self.k_pos.shape(), self.v_pos.shape()));
        }
        if self.k_neg.rows() != self.v_neg.rows() {
            return Err(Error::shape("attn_inputs", self.k_neg.shape(), self.v_neg.shape()));
        }
        Ok(())
    }
}

/// Softmax weights `σ(q kᵀ / √d)` under an optional plan.
pub fn attention_weights(q: &Matrix, k: &Matrix, plan: Option<&AttnPlan>) -> Result<Matrix> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let logits = q.matmul_t(k)?.scale(scale);
    match plan {
        Some(plan) => {
            if plan.shape() != logits.shape() {
                return Err(Error::shape("attention plan", logits.shape(), plan.shape()));
            }
            row_softmax(&logits, &plan.allow, &plan.bias)
        }
        None => Ok(softmax_rows(&logits)),
    }
}

/// Scaled dot-product attention.
pub fn sdpa(q: &Matrix, k: &Matrix, v: &Matrix, plan: Option<&AttnPlan>) -> Result<Matrix> {
    if k.rows() != v.rows() {
        return Err(Error::shape("sdpa", k.shape(), v.shape()));
    }
    attention_weights(q, k, plan)?.matmul(v)
}

/// Cross-attention with value sign flip: negative keys join the softmax
/// unchanged while negative values enter as `-alpha * v_neg`.
pub fn vsf_cross_attention(inputs: &AttnInputs, alpha: f64) -> Result<Matrix> {
    vsf_cross_attention_planned(inputs, alpha, None)
}

/// [`vsf_cross_attention`] with an explicit plan over the `n_pos + n_neg`
/// key columns (mask and/or bias).
pub fn vsf_cross_attention_planned(
    inputs: &AttnInputs,
    alpha: f64,
    plan: Option<&AttnPlan>,
) -> Result<Matrix> {
    inputs.check()?;
    if inputs.n_neg() == 0 {
        return Err(Error::Contract(
            "vsf_cross_attention needs at least one negative token; use sdpa without one".into(),
        ));
    }
    let keys = inputs.k_pos.concat_rows(&inputs.k_neg)?;
    let values = inputs.v_pos.concat_rows(&inputs.v_neg.scale(-alpha))?;
    sdpa(&inputs.q, &keys, &values, plan)
}

/// `Z⁺ − α Z⁻`.
pub fn nasa_combine(z_pos: &Matrix, z_neg: &Matrix, alpha: f64) -> Result<Matrix> {
    z_pos.zip_with(z_neg, "nasa_combine", |p, n| p - alpha * n)
}

/// Row norm used by the NAG cap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RowNorm {
    #[default]
    L2,
    L1,
    Max,
}

impl RowNorm {
    fn of(self, row: &[f64]) -> f64 {
        match self {
            RowNorm::L2 => row.iter().map(|v| v * v).sum::<f64>().sqrt(),
            RowNorm::L1 => row.iter().map(|v| v.abs()).sum(),
            RowNorm::Max => row.iter().map(|v| v.abs()).fold(0.0, f64::max),
        }
    }
}

/// NAG: extrapolate, cap each row's norm at `tau` times the positive row's,
/// then blend back towards `Z⁺`.
pub fn nag_combine(z_pos: &Matrix, z_neg: &Matrix, phi: f64, tau: f64, blend: f64) -> Result<Matrix> {
    nag_combine_with_norm(z_pos, z_neg, phi, tau, blend, RowNorm::L2)
}

pub fn nag_combine_with_norm(
    z_pos: &Matrix,
    z_neg: &Matrix,
    phi: f64,
    tau: f64,
    blend: f64,
    norm: RowNorm,
) -> Result<Matrix> {
    if tau < 1.0 {
        return Err(Error::Contract(format!("nag tau must be >= 1, got {tau}")));
    }
    if !(0.0..=1.0).contains(&blend) {
        return Err(Error::Contract(format!("nag blend must lie in [0, 1], got {blend}")));
    }
    let mut capped = z_pos.zip_with(z_neg, "nag_combine", |p, n| p + phi * (p - n))?;
    for r in 0..capped.rows() {
        let pos_norm = norm.of(z_pos.row(r));
        let ext_norm = norm.of(capped.row(r));
        // A zero positive row leaves the extrapolation as-is.
        if pos_norm > 0.0 && ext_norm > tau * pos_norm {
            let s = tau * pos_norm / ext_norm;
            capped.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
    }
    capped.zip_with(z_pos, "nag_combine", |c, p| blend * c + (1.0 - blend) * p)
}

/// CFG velocity combination `u⁻ + λ (u⁺ − u⁻)`, evaluated as
/// `λ u⁺ + (1 − λ) u⁻` so that `λ = 1` and `λ = 0` reproduce an input exactly.
pub fn cfg_combine(u_neg: &Matrix, u_pos: &Matrix, lambda: f64) -> Result<Matrix> {
    u_pos.zip_with(u_neg, "cfg_combine", |p, n| lambda * p + (1.0 - lambda) * n)
}

/// Whole-embedding flip: positive rows followed by the negative rows scaled
/// by `-alpha`. Negative padding rows are kept.
pub fn wef_transform(pos_embed: &Matrix, neg_embed: &Matrix, alpha: f64) -> Result<Matrix> {
    if pos_embed.cols() != neg_embed.cols() {
        return Err(Error::shape("wef_transform", pos_embed.shape(), neg_embed.shape()));
    }
    pos_embed.concat_rows(&neg_embed.scale(-alpha))
}
