//! The desk-scale MMDiT velocity network.
//!
//! Image latents are raw pixels cut into square patches; each patch becomes an
//! image token. Prompt words become text tokens through an embedding table.
//! The timestep enters through a small MLP on sinusoidal features whose output
//! is added to every image token. After the last block the image tokens are
//! normalized and projected back to patch pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::data::{Prompt, CHANNELS, IMAGE_SIDE, PIXELS, VOCAB_SIZE};
use crate::guidance::wef_transform;
use crate::mmdit::{block_forward_mode, layer_norm, strip_padding, BlockMode, BlockParams, Probe, TokenSeq};
use crate::tensor::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    pub time_features: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 2,
            dim: 32,
            patch: 4,
            mlp_ratio: 4,
            time_features: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Contract("model needs at least one layer".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Contract(format!(
                "model dim {} is not divisible by head count {}",
                self.dim, self.heads
            )));
        }
        if self.patch == 0 || IMAGE_SIDE % self.patch != 0 {
            return Err(Error::Contract(format!(
                "patch size {} does not tile a {IMAGE_SIDE}px image",
                self.patch
            )));
        }
        if self.mlp_ratio == 0 || self.time_features == 0 || self.time_features % 2 != 0 {
            return Err(Error::Contract("mlp ratio and (even) time feature count must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        IMAGE_SIDE / self.patch
    }

    pub fn image_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub tok_emb: Matrix,
    pub patch_w: Matrix,
    pub patch_b: Matrix,
    pub pos_emb: Matrix,
    pub time_w1: Matrix,
    pub time_b1: Matrix,
    pub time_w2: Matrix,
    pub time_b2: Matrix,
    pub blocks: Vec<BlockParams>,
    pub out_ln_g: Matrix,
    pub out_ln_b: Matrix,
    pub out_w: Matrix,
    pub out_b: Matrix,
    /// Linear map from input patches straight to the velocity head.
    pub skip_w: Matrix,
}

impl ToyModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, 0x1_0DE1);
        let d = config.dim;
        let pd = config.patch_dim();
        let blocks = (0..config.layers)
            .map(|_| BlockParams::init(d, config.heads, config.mlp_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            tok_emb: Matrix::random_normal(VOCAB_SIZE, d, 1.0, &mut rng),
            patch_w: Matrix::random_normal(pd, d, 1.0 / (pd as f64).sqrt(), &mut rng),
            patch_b: Matrix::zeros(1, d),
            pos_emb: Matrix::random_normal(config.image_tokens(), d, 0.5, &mut rng),
            time_w1: Matrix::random_normal(config.time_features, d, 1.0 / (config.time_features as f64).sqrt(), &mut rng),
            time_b1: Matrix::zeros(1, d),
            time_w2: Matrix::random_normal(d, d, 1.0 / (d as f64).sqrt(), &mut rng),
            time_b2: Matrix::zeros(1, d),
            blocks,
            out_ln_g: Matrix::filled(1, d, 1.0),
            out_ln_b: Matrix::zeros(1, d),
            out_w: Matrix::random_normal(d, pd, 0.1 / (d as f64).sqrt(), &mut rng),
            out_b: Matrix::zeros(1, pd),
            skip_w: Matrix::zeros(pd, pd),
        })
    }

    /// Same architecture, every tensor zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Every parameter tensor with a stable dotted name.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("patch_w".into(), &self.patch_w),
            ("patch_b".into(), &self.patch_b),
            ("pos_emb".into(), &self.pos_emb),
            ("time_w1".into(), &self.time_w1),
            ("time_b1".into(), &self.time_b1),
            ("time_w2".into(), &self.time_w2),
            ("time_b2".into(), &self.time_b2),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (stream, p) in [("img", &b.img), ("txt", &b.txt)] {
                for (name, t) in p.tensors() {
                    out.push((format!("blocks.{l}.{stream}.{name}"), t));
                }
            }
        }
        out.extend([
            ("out_ln_g".to_string(), &self.out_ln_g),
            ("out_ln_b".to_string(), &self.out_ln_b),
            ("out_w".to_string(), &self.out_w),
            ("out_b".to_string(), &self.out_b),
            ("skip_w".to_string(), &self.skip_w),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("patch_w".into(), &mut self.patch_w),
            ("patch_b".into(), &mut self.patch_b),
            ("pos_emb".into(), &mut self.pos_emb),
            ("time_w1".into(), &mut self.time_w1),
            ("time_b1".into(), &mut self.time_b1),
            ("time_w2".into(), &mut self.time_w2),
            ("time_b2".into(), &mut self.time_b2),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for (stream, p) in [("img", &mut b.img), ("txt", &mut b.txt)] {
                for (name, t) in p.tensors_mut() {
                    out.push((format!("blocks.{l}.{stream}.{name}"), t));
                }
            }
        }
        out.extend([
            ("out_ln_g".to_string(), &mut self.out_ln_g),
            ("out_ln_b".to_string(), &mut self.out_ln_b),
            ("out_w".to_string(), &mut self.out_w),
            ("out_b".to_string(), &mut self.out_b),
            ("skip_w".to_string(), &mut self.skip_w),
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data().len()).sum()
    }

    /// Text tokens for a prompt (padding included).
    pub fn embed_prompt(&self, prompt: &Prompt) -> Matrix {
        let d = self.config.dim;
        let mut out = Matrix::zeros(prompt.ids().len(), d);
        for (r, &id) in prompt.ids().iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.tok_emb.row(id as usize));
        }
        out
    }

    /// Non-padding text tokens of a negative prompt.
    pub fn embed_negative(&self, prompt: &Prompt) -> Result<Matrix> {
        strip_padding(&self.embed_prompt(prompt), &prompt.pad_mask())
    }

    pub fn time_embedding(&self, t: f64) -> Result<Matrix> {
        let feats = time_features(t, self.config.time_features);
        let mut h = feats.matmul(&self.time_w1)?;
        h.add_row_broadcast(&self.time_b1)?;
        let h = h.map(crate::mmdit::gelu);
        let mut out = h.matmul(&self.time_w2)?;
        out.add_row_broadcast(&self.time_b2)?;
        Ok(out)
    }

    pub fn embed_image(&self, patches: &Matrix, t: f64) -> Result<Matrix> {
        let mut x = patches.matmul(&self.patch_w)?;
        x.add_row_broadcast(&self.patch_b)?;
        x.add_scaled(&self.pos_emb, 1.0)?;
        x.add_row_broadcast(&self.time_embedding(t)?)?;
        Ok(x)
    }

    /// Velocity prediction (patch layout) for a joint sequence built from the
    /// given text and negative tokens, every block running under `mode`.
    pub fn velocity(
        &self,
        patches: &Matrix,
        t: f64,
        text: &Matrix,
        negative: &Matrix,
        mode: BlockMode,
        probe: &mut Probe,
    ) -> Result<Matrix> {
        let img = self.embed_image(patches, t)?;
        let mut seq = TokenSeq::from_parts(&img, text, negative)?;
        for block in &self.blocks {
            seq = block_forward_mode(&seq, block, mode, probe)?;
        }
        let h = layer_norm(&seq.img(), &self.out_ln_g, &self.out_ln_b);
        let mut out = h.matmul(&self.out_w)?;
        out.add_row_broadcast(&self.out_b)?;
        out.add_scaled(&patches.matmul(&self.skip_w)?, 1.0)?;
        Ok(out)
    }

    /// Plain conditional velocity: `[I, P]` with no negative tokens.
    pub fn velocity_plain(&self, patches: &Matrix, t: f64, prompt: &Prompt, probe: &mut Probe) -> Result<Matrix> {
        let empty = Matrix::zeros(0, self.config.dim);
        self.velocity(
            patches,
            t,
            &self.embed_prompt(prompt),
            &empty,
            BlockMode::Joint { alpha: 0.0, beta: 0.0 },
            probe,
        )
    }

    /// Velocity with the negative embedding flipped before the network.
    pub fn velocity_wef(&self, patches: &Matrix, t: f64, pos: &Prompt, neg: &Prompt, alpha: f64, probe: &mut Probe) -> Result<Matrix> {
        let text = wef_transform(&self.embed_prompt(pos), &self.embed_prompt(neg), alpha)?;
        let empty = Matrix::zeros(0, self.config.dim);
        self.velocity(patches, t, &text, &empty, BlockMode::Joint { alpha: 0.0, beta: 0.0 }, probe)
    }
}

/// `[sin(ω_k t), cos(ω_k t)]` for geometrically spaced `ω_k`.
pub fn time_features(t: f64, n: usize) -> Matrix {
    let half = n / 2;
    let mut out = Matrix::zeros(1, n);
    for k in 0..half {
        let w = std::f64::consts::PI * 1.6f64.powi(k as i32);
        out.set(0, 2 * k, (w * t).sin());
        out.set(0, 2 * k + 1, (w * t).cos());
    }
    out
}

/// Pixel vector (`[y][x][c]`) to patch tokens (`grid² × patch²·3`).
pub fn patchify(pixels: &[f64], patch: usize) -> Matrix {
    assert_eq!(pixels.len(), PIXELS);
    let grid = IMAGE_SIDE / patch;
    let pd = patch * patch * CHANNELS;
    let mut out = Matrix::zeros(grid * grid, pd);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = out.row_mut(gy * grid + gx);
            for dy in 0..patch {
                for dx in 0..patch {
                    let src = ((gy * patch + dy) * IMAGE_SIDE + gx * patch + dx) * CHANNELS;
                    let dst = (dy * patch + dx) * CHANNELS;
                    row[dst..dst + CHANNELS].copy_from_slice(&pixels[src..src + CHANNELS]);
                }
            }
        }
    }
    out
}

pub fn unpatchify(tokens: &Matrix, patch: usize) -> Vec<f64> {
    let grid = IMAGE_SIDE / patch;
    let mut pixels = vec![0.0; PIXELS];
    for gy in 0..grid {
        for gx in 0..grid {
            let row = tokens.row(gy * grid + gx);
            for dy in 0..patch {
                for dx in 0..patch {
                    let dst = ((gy * patch + dy) * IMAGE_SIDE + gx * patch + dx) * CHANNELS;
                    let src = (dy * patch + dx) * CHANNELS;
                    pixels[dst..dst + CHANNELS].copy_from_slice(&row[src..src + CHANNELS]);
                }
            }
        }
    }
    pixels
}
