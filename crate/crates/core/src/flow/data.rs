//! Synthetic coloured-shape images, a 16-word prompt vocabulary, and the
//! deterministic attribute oracle used for scoring.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const IMAGE_SIDE: usize = 16;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE * CHANNELS;
pub const MAX_PROMPT_LEN: usize = 8;

pub const VOCAB: [&str; 16] = [
    "<pad>", "a", "square", "circle", "cross", "red", "green", "blue", "shape", "of", "any", "color",
    "the", "image", "with", "and",
];
pub const VOCAB_SIZE: usize = VOCAB.len();
pub const PAD: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Cross];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Cross => "cross",
        }
    }

    /// Whether pixel offset `(dx, dy)` from the centre is covered at half-extent `r`.
    pub fn covers(self, dx: i32, dy: i32, r: i32) -> bool {
        match self {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Circle => {
                let rr = r as f64 + 0.5;
                ((dx * dx + dy * dy) as f64) <= rr * rr
            }
            Shape::Cross => {
                (dx.abs() <= r && dy.abs() <= CROSS_HALF_WIDTH)
                    || (dx.abs() <= CROSS_HALF_WIDTH && dy.abs() <= r)
            }
        }
    }
}

const CROSS_HALF_WIDTH: i32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    pub fn channel(self) -> usize {
        self as usize
    }
}

/// Half-extents a shape may be rendered at.
pub const SIZES: [i32; 2] = [3, 4];
/// Allowed centre coordinates (both axes).
pub const CENTERS: std::ops::RangeInclusive<i32> = 5..=10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: Shape,
    pub color: Color,
    pub cx: i32,
    pub cy: i32,
    pub size: i32,
}

impl Attributes {
    /// 2×2 grid cell of the centre: `0` top-left … `3` bottom-right.
    pub fn cell(&self) -> usize {
        usize::from(self.cx >= 8) + 2 * usize::from(self.cy >= 8)
    }
}

/// A 16×16 RGB image, pixels stored row-major as `[y][x][channel]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyImage {
    pub pixels: Vec<f64>,
    pub attributes: Option<Attributes>,
}

impl ToyImage {
    pub fn black() -> Self {
        Self {
            pixels: vec![0.0; PIXELS],
            attributes: None,
        }
    }

    pub fn from_pixels(pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(Error::Contract(format!(
                "image needs {PIXELS} values, got {}",
                pixels.len()
            )));
        }
        Ok(Self {
            pixels,
            attributes: None,
        })
    }

    pub fn render(attrs: Attributes) -> Self {
        let mut img = Self::black();
        let ch = attrs.color.channel();
        for y in 0..IMAGE_SIDE as i32 {
            for x in 0..IMAGE_SIDE as i32 {
                if attrs.shape.covers(x - attrs.cx, y - attrs.cy, attrs.size) {
                    img.pixels[index(x as usize, y as usize, ch)] = 1.0;
                }
            }
        }
        img.attributes = Some(attrs);
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[index(x, y, c)]
    }

    pub fn clamped(&self) -> ToyImage {
        ToyImage {
            pixels: self.pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            attributes: self.attributes,
        }
    }

    /// Binary PPM (P6), 8 bits per channel.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{IMAGE_SIDE} {IMAGE_SIDE}\n255\n").into_bytes();
        out.extend(self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }
}

#[inline]
fn index(x: usize, y: usize, c: usize) -> usize {
    (y * IMAGE_SIDE + x) * CHANNELS + c
}

/// Token ids over [`VOCAB`], padded with [`PAD`] to [`MAX_PROMPT_LEN`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    ids: Vec<u8>,
}

impl Prompt {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ids = Vec::with_capacity(MAX_PROMPT_LEN);
        for word in text.split_whitespace() {
            let w = word.to_ascii_lowercase();
            let id = VOCAB[1..]
                .iter()
                .position(|v| *v == w)
                .ok_or_else(|| Error::Contract(format!("word '{word}' is not in the vocabulary")))?;
            ids.push(id as u8 + 1);
        }
        if ids.len() > MAX_PROMPT_LEN {
            return Err(Error::Contract(format!(
                "prompt has {} words; at most {MAX_PROMPT_LEN} fit",
                ids.len()
            )));
        }
        ids.resize(MAX_PROMPT_LEN, PAD);
        Ok(Self { ids })
    }

    pub fn empty() -> Self {
        Self {
            ids: vec![PAD; MAX_PROMPT_LEN],
        }
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn pad_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i == PAD).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.iter().all(|&i| i == PAD)
    }

    pub fn mentions(&self, word: &str) -> bool {
        self.ids.iter().any(|&i| i != PAD && VOCAB[i as usize] == word)
    }

    pub fn shape(&self) -> Option<Shape> {
        Shape::ALL.into_iter().find(|s| self.mentions(s.word()))
    }

    pub fn color(&self) -> Option<Color> {
        Color::ALL.into_iter().find(|c| self.mentions(c.word()))
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<&str> = self
            .ids
            .iter()
            .filter(|&&i| i != PAD)
            .map(|&i| VOCAB[i as usize])
            .collect();
        f.write_str(&words.join(" "))
    }
}

/// One of a handful of phrasings for an attribute pair. Some phrasings omit
/// the colour or the shape so the model learns single-attribute prompts.
fn describe(attrs: &Attributes, rng: &mut Rng) -> Prompt {
    let s = attrs.shape.word();
    let c = attrs.color.word();
    let u = rng.uniform();
    let text = if u < 0.45 {
        format!("a {c} {s}")
    } else if u < 0.65 {
        format!("a {s}")
    } else if u < 0.75 {
        format!("a {s} of any color")
    } else if u < 0.90 {
        format!("a {c} shape")
    } else {
        format!("the image with a {c} {s}")
    };
    Prompt::parse(&text).expect("generated prompts use the vocabulary")
}

/// `n` (image, prompt) pairs; item `i` lands in shape×colour cell `i mod 9`,
/// so every cell gets `n / 9` items (±1).
pub fn make_dataset(n: usize, seed: u64) -> Vec<(ToyImage, Prompt)> {
    let mut rng = Rng::derive(seed, 0xDA7A);
    let centers: Vec<i32> = CENTERS.collect();
    (0..n)
        .map(|i| {
            let cell = i % 9;
            let attrs = Attributes {
                shape: Shape::ALL[cell / 3],
                color: Color::ALL[cell % 3],
                cx: centers[rng.below(centers.len())],
                cy: centers[rng.below(centers.len())],
                size: SIZES[rng.below(SIZES.len())],
            };
            let prompt = describe(&attrs, &mut rng);
            (ToyImage::render(attrs), prompt)
        })
        .collect()
}

/// Oracle verdict for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub shape: Option<Shape>,
    pub colors: Vec<Color>,
    /// Best template correlation, clipped to `[0, 1]`.
    pub quality: f64,
}

impl Classification {
    pub fn has_color(&self, c: Color) -> bool {
        self.colors.contains(&c)
    }
}

/// Pixel intensity above which a pixel counts as foreground.
pub const FOREGROUND: f64 = 0.35;
/// A foreground pixel has colour `c` when channel `c` beats both others by this margin.
pub const DOMINANCE: f64 = 0.2;
/// Pixels of one colour needed before the colour counts as present.
pub const MIN_COLOR_PIXELS: usize = 4;
/// Template correlation below which no shape is reported.
pub const SHAPE_FLOOR: f64 = 0.5;

struct Template {
    shape: Shape,
    /// Covered pixel indices (y * 16 + x).
    on: Vec<usize>,
    mean: f64,
    std: f64,
}

fn templates() -> &'static [Template] {
    static TEMPLATES: OnceLock<Vec<Template>> = OnceLock::new();
    TEMPLATES.get_or_init(|| {
        let n = (IMAGE_SIDE * IMAGE_SIDE) as f64;
        let mut out = Vec::new();
        for shape in Shape::ALL {
            for size in SIZES {
                for cy in CENTERS.start() - 1..=CENTERS.end() + 1 {
                    for cx in CENTERS.start() - 1..=CENTERS.end() + 1 {
                        let mut on = Vec::new();
                        for y in 0..IMAGE_SIDE as i32 {
                            for x in 0..IMAGE_SIDE as i32 {
                                if shape.covers(x - cx, y - cy, size) {
                                    on.push(y as usize * IMAGE_SIDE + x as usize);
                                }
                            }
                        }
                        let mean = on.len() as f64 / n;
                        let std = (mean * (1.0 - mean)).sqrt();
                        out.push(Template { shape, on, mean, std });
                    }
                }
            }
        }
        out
    })
}

/// Deterministic attribute oracle: colours by per-pixel channel dominance,
/// shape by the best Pearson correlation between the intensity map and a bank
/// of binary templates over sizes and positions.
pub fn oracle_classify(img: &ToyImage) -> Classification {
    let img = img.clamped();
    let n = IMAGE_SIDE * IMAGE_SIDE;
    let mut intensity = vec![0.0; n];
    let mut color_counts = [0usize; 3];
    for p in 0..n {
        let px = &img.pixels[p * CHANNELS..(p + 1) * CHANNELS];
        let max = px.iter().copied().fold(0.0, f64::max);
        intensity[p] = max;
        if max < FOREGROUND {
            continue;
        }
        for c in 0..CHANNELS {
            let others = (0..CHANNELS).filter(|&o| o != c).map(|o| px[o]).fold(0.0, f64::max);
            if px[c] - others >= DOMINANCE {
                color_counts[c] += 1;
            }
        }
    }
    let colors = Color::ALL
        .into_iter()
        .filter(|c| color_counts[c.channel()] >= MIN_COLOR_PIXELS)
        .collect();

    let nf = n as f64;
    let mean = intensity.iter().sum::<f64>() / nf;
    let var = intensity.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
    let mut best = (0.0f64, None);
    if var > 1e-12 {
        let std = var.sqrt();
        for t in templates() {
            let cross: f64 = t.on.iter().map(|&p| intensity[p]).sum::<f64>() / nf;
            let corr = (cross - mean * t.mean) / (std * t.std);
            if corr > best.0 {
                best = (corr, Some(t.shape));
            }
        }
    }
    let quality = best.0.clamp(0.0, 1.0);
    Classification {
        shape: if best.0 >= SHAPE_FLOOR { best.1 } else { None },
        colors,
        quality,
    }
}
