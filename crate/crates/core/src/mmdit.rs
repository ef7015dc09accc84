//! MMDiT-style joint-sequence block with value sign flip.
//!
//! A block sees the joint sequence `[I, P, N⁰, N¹]`: image tokens, positive
//! prompt tokens, and two copies of the negative prompt. Only the value rows of
//! `N¹` are scaled by `-alpha`; `N¹` never issues queries, so the block emits
//! rows for `I`, `P` and `N⁰` only and the next block duplicates `N⁰` afresh.
//!
//! Mask table (rows are queries, columns keys):
//!
//! | query \ key | I | P | N⁰ | N¹       |
//! |-------------|---|---|----|----------|
//! | I           | ✓ | ✓ |    | ✓ (−β)   |
//! | P           | ✓ | ✓ |    |          |
//! | N⁰          | ✓ |   | ✓  |          |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{attention_weights, nag_combine, nasa_combine, AttnPlan};
use crate::tensor::{Mask, Matrix, Rng};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Img,
    Pos,
    Neg0,
    Neg1,
}

/// Block sizes of a joint sequence, in order `IMG, POS, NEG0, NEG1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub img: usize,
    pub pos: usize,
    pub neg0: usize,
    pub neg1: usize,
}

impl Counts {
    pub fn new(img: usize, pos: usize, neg0: usize, neg1: usize) -> Self {
        Self { img, pos, neg0, neg1 }
    }

    pub fn total(&self) -> usize {
        self.img + self.pos + self.neg0 + self.neg1
    }

    /// Rows that issue queries: everything except `NEG1`.
    pub fn queries(&self) -> usize {
        self.img + self.pos + self.neg0
    }

    pub fn segment_of(&self, index: usize) -> Segment {
        if index < self.img {
            Segment::Img
        } else if index < self.img + self.pos {
            Segment::Pos
        } else if index < self.queries() {
            Segment::Neg0
        } else {
            Segment::Neg1
        }
    }

    fn check(&self) -> Result<()> {
        if self.neg1 != 0 && self.neg1 != self.neg0 {
            return Err(Error::Contract(format!(
                "NEG1 block must be empty or mirror NEG0 ({} vs {})",
                self.neg1, self.neg0
            )));
        }
        Ok(())
    }
}

/// Token embeddings tagged by contiguous segment blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq {
    tokens: Matrix,
    counts: Counts,
}

impl TokenSeq {
    pub fn new(tokens: Matrix, counts: Counts) -> Result<Self> {
        counts.check()?;
        if tokens.rows() != counts.total() {
            return Err(Error::Contract(format!(
                "token matrix has {} rows but segment counts add up to {}",
                tokens.rows(),
                counts.total()
            )));
        }
        Ok(Self { tokens, counts })
    }

    /// `[I, P, N⁰]` from separate blocks.
    pub fn from_parts(img: &Matrix, pos: &Matrix, neg: &Matrix) -> Result<Self> {
        let tokens = img.concat_rows(pos)?.concat_rows(neg)?;
        Self::new(tokens, Counts::new(img.rows(), pos.rows(), neg.rows(), 0))
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn counts(&self) -> Counts {
        self.counts
    }

    pub fn into_tokens(self) -> Matrix {
        self.tokens
    }

    pub fn segments(&self) -> Vec<Segment> {
        (0..self.counts.total()).map(|i| self.counts.segment_of(i)).collect()
    }

    pub fn img(&self) -> Matrix {
        self.tokens.slice_rows(0..self.counts.img)
    }

    pub fn text(&self) -> Matrix {
        self.tokens.slice_rows(self.counts.img..self.counts.total())
    }

    pub fn neg0(&self) -> Matrix {
        let start = self.counts.img + self.counts.pos;
        self.tokens.slice_rows(start..start + self.counts.neg0)
    }

    pub fn neg1(&self) -> Matrix {
        self.tokens.slice_rows(self.counts.queries()..self.counts.total())
    }

    /// Drops the `NEG1` block, if any.
    pub fn without_neg1(&self) -> TokenSeq {
        let c = self.counts;
        TokenSeq {
            tokens: self.tokens.slice_rows(0..c.queries()),
            counts: Counts { neg1: 0, ..c },
        }
    }
}

/// Keeps the rows of a negative-prompt fragment whose `pad_mask` entry is
/// false. Positive prompts keep their padding and never pass through here.
pub fn strip_padding(neg_tokens: &Matrix, pad_mask: &[bool]) -> Result<Matrix> {
    if pad_mask.len() != neg_tokens.rows() {
        return Err(Error::Contract(format!(
            "pad mask length {} differs from fragment length {}",
            pad_mask.len(),
            neg_tokens.rows()
        )));
    }
    let mut data = Vec::new();
    let mut kept = 0;
    for (r, &pad) in pad_mask.iter().enumerate() {
        if !pad {
            data.extend_from_slice(neg_tokens.row(r));
            kept += 1;
        }
    }
    Matrix::new(kept, neg_tokens.cols(), data)
}

/// Appends `NEG1` as a bitwise copy of `NEG0`.
pub fn duplicate_negative(seq: &TokenSeq) -> Result<TokenSeq> {
    let c = seq.counts;
    if c.neg1 != 0 {
        return Err(Error::Contract("sequence already carries a NEG1 block".into()));
    }
    if c.neg0 == 0 {
        return Ok(seq.clone());
    }
    let tokens = seq.tokens.concat_rows(&seq.neg0())?;
    TokenSeq::new(tokens, Counts { neg1: c.neg0, ..c })
}

/// Allow-mask and bias for the joint sequence (see the module table).
pub fn build_plan(counts: Counts, beta: f64) -> Result<AttnPlan> {
    counts.check()?;
    let n_q = counts.queries();
    let n_k = counts.total();
    let mut allow = Mask::filled(n_q, n_k, false);
    let mut bias = Matrix::zeros(n_q, n_k);
    for q in 0..n_q {
        let qs = counts.segment_of(q);
        for k in 0..n_k {
            let ks = counts.segment_of(k);
            let ok = matches!(
                (qs, ks),
                (Segment::Img, Segment::Img | Segment::Pos | Segment::Neg1)
                    | (Segment::Pos, Segment::Img | Segment::Pos)
                    | (Segment::Neg0, Segment::Img | Segment::Neg0)
            );
            allow.set(q, k, ok);
            if qs == Segment::Img && ks == Segment::Neg1 {
                bias.set(q, k, -beta);
            }
        }
    }
    Ok(AttnPlan { allow, bias })
}

/// Parameters of one stream (image or text) inside a block.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamParams {
    pub ln1_g: Matrix,
    pub ln1_b: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub ln2_g: Matrix,
    pub ln2_b: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl StreamParams {
    pub fn init(dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let s_in = 1.0 / (dim as f64).sqrt();
        let s_hidden = 1.0 / (hidden as f64).sqrt();
        Self {
            ln1_g: Matrix::filled(1, dim, 1.0),
            ln1_b: Matrix::zeros(1, dim),
            wq: Matrix::random_normal(dim, dim, s_in, rng),
            wk: Matrix::random_normal(dim, dim, s_in, rng),
            wv: Matrix::random_normal(dim, dim, s_in, rng),
            wo: Matrix::random_normal(dim, dim, 0.5 * s_in, rng),
            bo: Matrix::zeros(1, dim),
            ln2_g: Matrix::filled(1, dim, 1.0),
            ln2_b: Matrix::zeros(1, dim),
            w1: Matrix::random_normal(dim, hidden, s_in, rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::random_normal(hidden, dim, 0.5 * s_hidden, rng),
            b2: Matrix::zeros(1, dim),
        }
    }

    /// Every tensor with a stable name suffix, in serialization order.
    pub fn tensors(&self) -> [(&'static str, &Matrix); 13] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 13] {
        [
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    fn mlp_residual(&self, x: &mut Matrix) -> Result<()> {
        let h = layer_norm(x, &self.ln2_g, &self.ln2_b);
        let mut a = h.matmul(&self.w1)?;
        a.add_row_broadcast(&self.b1)?;
        let a = a.map(gelu);
        let mut out = a.matmul(&self.w2)?;
        out.add_row_broadcast(&self.b2)?;
        x.add_scaled(&out, 1.0)
    }
}

/// One MMDiT block: separate image and text streams sharing joint attention.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub heads: usize,
    pub img: StreamParams,
    pub txt: StreamParams,
}

impl BlockParams {
    pub fn init(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Contract(format!(
                "model dim {dim} is not divisible by head count {heads}"
            )));
        }
        Ok(Self {
            heads,
            img: StreamParams::init(dim, dim * mlp_ratio, rng),
            txt: StreamParams::init(dim, dim * mlp_ratio, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.img.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }
}

pub fn layer_norm(x: &Matrix, g: &Matrix, b: &Matrix) -> Matrix {
    let n = x.cols() as f64;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[c] - mean) * inv * g.get(0, c) + b.get(0, c);
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Per-stream projection of selected rows: image rows use the image stream,
/// everything after `n_img` uses the text stream.
fn project_rows(h: &Matrix, n_img: usize, w_img: &Matrix, w_txt: &Matrix) -> Result<Matrix> {
    let img = h.slice_rows(0..n_img.min(h.rows())).matmul(w_img)?;
    if h.rows() <= n_img {
        return Ok(img);
    }
    let txt = h.slice_rows(n_img..h.rows()).matmul(w_txt)?;
    img.concat_rows(&txt)
}

fn pre_norm(seq_tokens: &Matrix, n_img: usize, params: &BlockParams) -> Matrix {
    let img = layer_norm(
        &seq_tokens.slice_rows(0..n_img),
        &params.img.ln1_g,
        &params.img.ln1_b,
    );
    let txt = layer_norm(
        &seq_tokens.slice_rows(n_img..seq_tokens.rows()),
        &params.txt.ln1_g,
        &params.txt.ln1_b,
    );
    img.concat_rows(&txt).expect("same width")
}

/// Multi-head attention on projected q/k/v; heads are contiguous column groups.
fn multi_head(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, plan: Option<&AttnPlan>) -> Result<Matrix> {
    let d = q.cols() / heads;
    let mut out = Matrix::zeros(q.rows(), q.cols());
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        let w = attention_weights(&q.slice_cols(cols.clone()), &k.slice_cols(cols.clone()), plan)?;
        out.set_cols(h * d, &w.matmul(&v.slice_cols(cols))?);
    }
    Ok(out)
}

fn output_projection(z: &Matrix, n_img: usize, params: &BlockParams) -> Result<Matrix> {
    let mut img = z.slice_rows(0..n_img).matmul(&params.img.wo)?;
    img.add_row_broadcast(&params.img.bo)?;
    if z.rows() == n_img {
        return Ok(img);
    }
    let mut txt = z.slice_rows(n_img..z.rows()).matmul(&params.txt.wo)?;
    txt.add_row_broadcast(&params.txt.bo)?;
    img.concat_rows(&txt)
}

/// Joint multi-head attention over `[I, P, N⁰, N¹]` with `N¹` values scaled
/// by `-alpha` after projection. Returns the projected attention outputs for
/// the `I, P, N⁰` rows (no residual).
pub fn joint_attention(seq: &TokenSeq, params: &BlockParams, alpha: f64, plan: &AttnPlan) -> Result<TokenSeq> {
    let c = seq.counts;
    if plan.shape() != (c.queries(), c.total()) {
        return Err(Error::Contract(format!(
            "attention plan {:?} does not match segment counts {:?}",
            plan.shape(),
            c
        )));
    }
    let z = joint_heads(seq, params, alpha, Some(plan))?;
    let out = output_projection(&z, c.img, params)?;
    TokenSeq::new(out, Counts { neg1: 0, ..c })
}

/// Pre-projection head outputs of the joint attention.
fn joint_heads(seq: &TokenSeq, params: &BlockParams, alpha: f64, plan: Option<&AttnPlan>) -> Result<Matrix> {
    let c = seq.counts;
    let h = pre_norm(&seq.tokens, c.img, params);
    let q = project_rows(&h.slice_rows(0..c.queries()), c.img, &params.img.wq, &params.txt.wq)?;
    let k = project_rows(&h, c.img, &params.img.wk, &params.txt.wk)?;
    let mut v = project_rows(&h, c.img, &params.img.wv, &params.txt.wv)?;
    for r in c.queries()..c.total() {
        v.row_mut(r).iter_mut().for_each(|x| *x *= -alpha);
    }
    multi_head(&q, &k, &v, params.heads, plan)
}

/// How a block combines the negative prompt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlockMode {
    /// Single joint attention; with a non-empty `NEG0` block this is value
    /// sign flip with duplication, masking and bias.
    Joint { alpha: f64, beta: f64 },
    /// Two attention computations (`[I, P]` and `[I, N]`) whose image-row head
    /// outputs are merged by NASA.
    Nasa { alpha: f64 },
    /// As [`BlockMode::Nasa`] but merged by NAG.
    Nag { phi: f64, tau: f64, blend: f64 },
}

/// Side-channel counters and captures filled in while running blocks.
#[derive(Clone, Debug, Default)]
pub struct Probe {
    pub attention_calls: usize,
    pub capture_neg_attn: bool,
    /// One per-image-token map per block, in block order.
    pub neg_attn: Vec<Matrix>,
}

/// Full block forward under `mode`. The input must not carry `NEG1`; the
/// output never does.
pub fn block_forward_mode(seq: &TokenSeq, params: &BlockParams, mode: BlockMode, probe: &mut Probe) -> Result<TokenSeq> {
    let c = seq.counts;
    if c.neg1 != 0 {
        return Err(Error::Contract("block input must not carry a NEG1 block".into()));
    }
    let attn = match mode {
        BlockMode::Joint { alpha, beta } => {
            let dup = duplicate_negative(seq)?;
            if probe.capture_neg_attn && c.neg0 > 0 {
                probe.neg_attn.push(extract_neg_attn(&dup, params)?);
            }
            let plan = build_plan(dup.counts, beta)?;
            probe.attention_calls += 1;
            joint_attention(&dup, params, alpha, &plan)?.into_tokens()
        }
        BlockMode::Nasa { .. } | BlockMode::Nag { .. } => {
            if c.neg0 == 0 {
                return Err(Error::Contract("split-attention guidance needs negative tokens".into()));
            }
            probe.attention_calls += 2;
            split_attention(seq, params, mode)?
        }
    };
    let mut tokens = seq.tokens.add(&attn)?;
    let mut img = tokens.slice_rows(0..c.img);
    params.img.mlp_residual(&mut img)?;
    tokens.set_rows(0, &img);
    if c.total() > c.img {
        let mut txt = tokens.slice_rows(c.img..c.total());
        params.txt.mlp_residual(&mut txt)?;
        tokens.set_rows(c.img, &txt);
    }
    TokenSeq::new(tokens, c)
}

/// Value-sign-flip block: duplicate → plan → joint attention → residual →
/// per-stream MLP. Returns `[I, P, N⁰]`.
pub fn block_forward(seq: &TokenSeq, params: &BlockParams, alpha: f64, beta: f64) -> Result<TokenSeq> {
    block_forward_mode(seq, params, BlockMode::Joint { alpha, beta }, &mut Probe::default())
}

fn split_attention(seq: &TokenSeq, params: &BlockParams, mode: BlockMode) -> Result<Matrix> {
    let c = seq.counts;
    let img = seq.img();
    let pos_tokens = seq.tokens.slice_rows(c.img..c.img + c.pos);
    let pos_seq = TokenSeq::from_parts(&img, &pos_tokens, &Matrix::zeros(0, img.cols()))?;
    let neg_seq = TokenSeq::from_parts(&img, &seq.neg0(), &Matrix::zeros(0, img.cols()))?;
    let z_pos = joint_heads(&pos_seq, params, 0.0, None)?;
    let z_neg = joint_heads(&neg_seq, params, 0.0, None)?;

    let d = params.head_dim();
    let mut z_img = Matrix::zeros(c.img, params.dim());
    for h in 0..params.heads {
        let cols = h * d..(h + 1) * d;
        let zp = z_pos.slice_rows(0..c.img).slice_cols(cols.clone());
        let zn = z_neg.slice_rows(0..c.img).slice_cols(cols);
        let merged = match mode {
            BlockMode::Nasa { alpha } => nasa_combine(&zp, &zn, alpha)?,
            BlockMode::Nag { phi, tau, blend } => nag_combine(&zp, &zn, phi, tau, blend)?,
            BlockMode::Joint { .. } => unreachable!("joint mode handled by caller"),
        };
        z_img.set_cols(h * d, &merged);
    }
    let z = z_img
        .concat_rows(&z_pos.slice_rows(c.img..c.img + c.pos))?
        .concat_rows(&z_neg.slice_rows(c.img..c.img + c.neg0))?;
    output_projection(&z, c.img, params)
}

/// Raw image→`N¹` logits `q·k/√d` (no bias), averaged over heads and `N¹`
/// tokens: one value per image token, laid out on the image-token grid.
pub fn extract_neg_attn(seq: &TokenSeq, params: &BlockParams) -> Result<Matrix> {
    let c = seq.counts;
    if c.neg1 == 0 {
        return Err(Error::Contract("no negative prompt tokens to extract attention for".into()));
    }
    let h_img = layer_norm(&seq.img(), &params.img.ln1_g, &params.img.ln1_b);
    let h_neg = layer_norm(&seq.neg1(), &params.txt.ln1_g, &params.txt.ln1_b);
    let q = h_img.matmul(&params.img.wq)?;
    let k = h_neg.matmul(&params.txt.wk)?;
    let d = params.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut values = vec![0.0; c.img];
    for h in 0..params.heads {
        let cols = h * d..(h + 1) * d;
        let logits = q.slice_cols(cols.clone()).matmul_t(&k.slice_cols(cols))?;
        for (i, v) in values.iter_mut().enumerate() {
            *v += logits.row(i).iter().sum::<f64>() * scale;
        }
    }
    let norm = (params.heads * c.neg1) as f64;
    values.iter_mut().for_each(|v| *v /= norm);
    let side = (c.img as f64).sqrt().round() as usize;
    if side * side == c.img {
        Matrix::new(side, side, values)
    } else {
        Matrix::new(1, c.img, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_seq(rng: &mut Rng, counts: Counts, dim: usize) -> TokenSeq {
        TokenSeq::new(Matrix::random_normal(counts.total(), dim, 1.0, rng), counts).unwrap()
    }

    fn random_block(rng: &mut Rng, dim: usize, heads: usize) -> BlockParams {
        let mut p = BlockParams::init(dim, heads, 2, rng).unwrap();
        // non-trivial norms and biases
        for s in [&mut p.img, &mut p.txt] {
            s.ln1_g = Matrix::random_uniform(1, dim, 0.5, 1.5, rng);
            s.ln1_b = Matrix::random_normal(1, dim, 0.1, rng);
            s.bo = Matrix::random_normal(1, dim, 0.1, rng);
        }
        p
    }

    #[test]
    fn strip_padding_examples() {
        let m = Matrix::from_rows(&[[1.0], [2.0], [0.0], [0.0]]);
        let out = strip_padding(&m, &[false, false, true, true]).unwrap();
        assert_eq!(out, Matrix::from_rows(&[[1.0], [2.0]]));
        assert_eq!(strip_padding(&m, &[false; 4]).unwrap(), m);
        assert_eq!(strip_padding(&m, &[true; 4]).unwrap().rows(), 0);
        assert!(strip_padding(&m, &[true; 3]).is_err());
    }

    #[test]
    fn duplication() {
        let mut rng = Rng::new(1);
        let seq = random_seq(&mut rng, Counts::new(3, 2, 2, 0), 4);
        let dup = duplicate_negative(&seq).unwrap();
        assert_eq!(dup.counts(), Counts::new(3, 2, 2, 2));
        assert_eq!(dup.tokens().rows(), 9);
        assert_eq!(dup.neg1(), dup.neg0());
        assert_eq!(dup.without_neg1(), seq);
        assert!(duplicate_negative(&dup).is_err());

        let plain = random_seq(&mut rng, Counts::new(3, 2, 0, 0), 4);
        assert_eq!(duplicate_negative(&plain).unwrap(), plain);
    }

    #[test]
    fn plan_example() {
        let plan = build_plan(Counts::new(4, 3, 2, 2), 0.5).unwrap();
        assert_eq!(plan.shape(), (9, 11));
        let row5: Vec<usize> = (0..11).filter(|&c| plan.allow.get(5, c)).collect();
        assert_eq!(row5, (0..7).collect::<Vec<_>>());
        for q in 0..9 {
            for k in 0..11 {
                let in_block = q < 4 && k >= 9;
                assert_eq!(plan.bias.get(q, k), if in_block { -0.5 } else { 0.0 });
            }
        }
        let plain = build_plan(Counts::new(4, 3, 0, 0), 0.5).unwrap();
        assert_eq!(plain.allow, Mask::filled(7, 7, true));
        assert_eq!(plain.bias, Matrix::zeros(7, 7));
        assert!(build_plan(Counts::new(1, 1, 2, 1), 0.0).is_err());
    }

    #[test]
    fn joint_attention_matches_loop_oracle() {
        let mut rng = Rng::new(2);
        let dim = 3;
        let counts = Counts::new(2, 2, 1, 1);
        let params = random_block(&mut rng, dim, 1);
        let base = random_seq(&mut rng, Counts::new(2, 2, 1, 0), dim);
        let seq = duplicate_negative(&base).unwrap();
        assert_eq!(seq.counts(), counts);
        let (alpha, beta) = (1.3, 0.7);
        let plan = build_plan(counts, beta).unwrap();
        let got = joint_attention(&seq, &params, alpha, &plan).unwrap();

        // scalar loop oracle
        let ln = |x: &[f64], s: &StreamParams| -> Vec<f64> {
            let n = x.len() as f64;
            let m = x.iter().sum::<f64>() / n;
            let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
            (0..x.len())
                .map(|c| (x[c] - m) / (v + LN_EPS).sqrt() * s.ln1_g.get(0, c) + s.ln1_b.get(0, c))
                .collect()
        };
        let proj = |x: &[f64], w: &Matrix| -> Vec<f64> {
            (0..w.cols()).map(|j| (0..x.len()).map(|i| x[i] * w.get(i, j)).sum()).collect()
        };
        let stream = |i: usize| if i < 2 { &params.img } else { &params.txt };
        let n = counts.total();
        let mut q = vec![];
        let mut k = vec![];
        let mut v = vec![];
        for i in 0..n {
            let h = ln(seq.tokens().row(i), stream(i));
            q.push(proj(&h, &stream(i).wq));
            k.push(proj(&h, &stream(i).wk));
            let mut vi = proj(&h, &stream(i).wv);
            if i == n - 1 {
                vi.iter_mut().for_each(|x| *x *= -alpha);
            }
            v.push(vi);
        }
        for i in 0..counts.queries() {
            let mut logits = vec![f64::NEG_INFINITY; n];
            for j in 0..n {
                if plan.allow.get(i, j) {
                    let l: f64 = (0..dim).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dim as f64).sqrt();
                    logits[j] = l + plan.bias.get(i, j);
                }
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| if l.is_finite() { (l - m).exp() } else { 0.0 }).collect();
            let z: f64 = e.iter().sum();
            let o: Vec<f64> = (0..dim).map(|c| (0..n).map(|j| e[j] / z * v[j][c]).sum()).collect();
            let s = stream(i);
            for c in 0..dim {
                let want = (0..dim).map(|r| o[r] * s.wo.get(r, c)).sum::<f64>() + s.bo.get(0, c);
                assert!((got.tokens().get(i, c) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn block_output_never_contains_neg1() {
        let mut rng = Rng::new(3);
        let params = random_block(&mut rng, 8, 2);
        for (i, p, n) in [(4, 3, 2), (4, 3, 0), (1, 0, 3)] {
            let seq = random_seq(&mut rng, Counts::new(i, p, n, 0), 8);
            let out = block_forward(&seq, &params, 1.0, 0.5).unwrap();
            assert_eq!(out.counts(), Counts::new(i, p, n, 0));
            assert!(out.tokens().is_finite());
        }
        let seq = duplicate_negative(&random_seq(&mut rng, Counts::new(2, 2, 2, 0), 8)).unwrap();
        assert!(block_forward(&seq, &params, 1.0, 0.0).is_err());
    }

    #[test]
    fn stacked_blocks_without_negative_ignore_guidance_scalars() {
        let mut rng = Rng::new(4);
        let b1 = random_block(&mut rng, 8, 2);
        let b2 = random_block(&mut rng, 8, 2);
        let seq = random_seq(&mut rng, Counts::new(4, 3, 0, 0), 8);
        let a = block_forward(&block_forward(&seq, &b1, 3.0, 2.0).unwrap(), &b2, 3.0, 2.0).unwrap();
        let b = block_forward(&block_forward(&seq, &b1, 0.0, 0.0).unwrap(), &b2, 0.0, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn neg0_rows_ignore_positive_tokens() {
        let mut rng = Rng::new(5);
        let params = random_block(&mut rng, 8, 2);
        let seq = random_seq(&mut rng, Counts::new(3, 2, 2, 0), 8);
        let out = block_forward(&seq, &params, 1.0, 0.3).unwrap();
        let mut tokens = seq.tokens().clone();
        for r in 3..5 {
            tokens.row_mut(r).iter_mut().for_each(|v| *v += 5.0);
        }
        let perturbed = block_forward(&TokenSeq::new(tokens, seq.counts()).unwrap(), &params, 1.0, 0.3).unwrap();
        assert_eq!(out.neg0(), perturbed.neg0());
    }

    #[test]
    fn split_modes_count_two_attention_calls() {
        let mut rng = Rng::new(6);
        let params = random_block(&mut rng, 8, 2);
        let seq = random_seq(&mut rng, Counts::new(3, 2, 2, 0), 8);
        let mut probe = Probe::default();
        block_forward_mode(&seq, &params, BlockMode::Nasa { alpha: 0.5 }, &mut probe).unwrap();
        assert_eq!(probe.attention_calls, 2);
        block_forward_mode(&seq, &params, BlockMode::Joint { alpha: 1.0, beta: 0.0 }, &mut probe).unwrap();
        assert_eq!(probe.attention_calls, 3);
    }

    #[test]
    fn nasa_zero_alpha_image_rows_match_positive_only_block() {
        let mut rng = Rng::new(7);
        let params = random_block(&mut rng, 8, 2);
        let seq = random_seq(&mut rng, Counts::new(3, 2, 2, 0), 8);
        let nasa = block_forward_mode(&seq, &params, BlockMode::Nasa { alpha: 0.0 }, &mut Probe::default()).unwrap();
        let pos_only = TokenSeq::new(seq.tokens().slice_rows(0..5), Counts::new(3, 2, 0, 0)).unwrap();
        let plain = block_forward(&pos_only, &params, 0.0, 0.0).unwrap();
        assert!(nasa.tokens().slice_rows(0..5).max_abs_diff(plain.tokens()) < 1e-12);
    }

    #[test]
    fn extract_neg_attn_properties() {
        let mut rng = Rng::new(8);
        let params = random_block(&mut rng, 4, 2);
        let mut tokens = Matrix::random_normal(4 + 2 + 2, 4, 1.0, &mut rng);
        for r in 1..4 {
            let first = tokens.row(0).to_vec();
            tokens.row_mut(r).copy_from_slice(&first);
        }
        let seq = duplicate_negative(&TokenSeq::new(tokens, Counts::new(4, 2, 2, 0)).unwrap()).unwrap();
        let map = extract_neg_attn(&seq, &params).unwrap();
        assert_eq!(map.shape(), (2, 2));
        assert!(map.data().iter().all(|v| (v - map.get(0, 0)).abs() < 1e-14));

        let plain = TokenSeq::new(Matrix::zeros(3, 4), Counts::new(3, 0, 0, 0)).unwrap();
        assert!(extract_neg_attn(&plain, &params).is_err());
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
