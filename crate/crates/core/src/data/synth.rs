//! Procedurally rendered glyph images.
//!
//! Each class is a 5×5 bitmap glyph with no rotational symmetry, and no
//! glyph equals a quarter-turn of another glyph in the same set. That makes
//! both the class label and the applied rotation recoverable from pixels.
//! Per-sample nuisance: position, foreground/background colour and pixel
//! noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{tag, SplitMix64};
use crate::tensor::Tensor;

pub const GLYPH_SIZE: usize = 5;

type Bitmap = [&'static str; GLYPH_SIZE];

const PRIMARY: [Bitmap; 10] = [
    ["#####", "#....", "####.", "#....", "#...."], // F
    ["#....", "#....", "#....", "#....", "#####"], // L
    ["####.", "#...#", "####.", "#....", "#...."], // P
    ["..###", "...#.", "...#.", "#..#.", ".##.."], // J
    ["####.", "#...#", "####.", "#..#.", "#...#"], // R
    [".####", "#....", "#.###", "#...#", ".###."], // G
    ["#####", "....#", "...#.", "..#..", ".#..."], // 7
    ["#..#.", "#..#.", "#####", "...#.", "...#."], // 4
    ["#####", "#....", "####.", "#....", "#####"], // E
    ["#...#", "#..#.", "###..", "#..#.", "#...#"], // K
];

const TRANSFER: [Bitmap; 10] = [
    [".###.", "#...#", "..##.", ".#...", "#####"], // 2
    ["####.", "....#", ".###.", "....#", "####."], // 3
    ["#####", "#....", "####.", "....#", "####."], // 5
    [".###.", "#....", "####.", "#...#", ".###."], // 6
    [".###.", "#...#", "#####", "#...#", "#...#"], // A
    [".####", "#....", "#....", "#....", ".####"], // C
    ["#####", "..#..", "..#..", "..#..", "..#.."], // T
    ["#...#", ".#.#.", "..#..", "..#..", "..#.."], // Y
    ["#....", "#....", "####.", "#...#", "#...#"], // h
    ["#...#", "##..#", "#.#.#", "#..##", "#...."], // skewed N
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GlyphSet {
    #[default]
    Primary,
    /// Disjoint glyphs with the same rendering statistics, used as a
    /// transfer target.
    Transfer,
}

impl GlyphSet {
    pub fn glyphs(self) -> Vec<[[bool; GLYPH_SIZE]; GLYPH_SIZE]> {
        let table: &[Bitmap] = match self {
            GlyphSet::Primary => &PRIMARY,
            GlyphSet::Transfer => &TRANSFER,
        };
        table
            .iter()
            .map(|rows| {
                let mut g = [[false; GLYPH_SIZE]; GLYPH_SIZE];
                for (r, line) in rows.iter().enumerate() {
                    for (c, ch) in line.bytes().enumerate() {
                        g[r][c] = ch == b'#';
                    }
                }
                g
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub class_count: usize,
    pub size: usize,
    #[serde(default)]
    pub glyphs: GlyphSet,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.05
}

impl SynthSpec {
    pub fn new(n: usize, class_count: usize, size: usize) -> Self {
        SynthSpec {
            n,
            class_count,
            size,
            glyphs: GlyphSet::Primary,
            noise: default_noise(),
        }
    }
}

/// Renders `spec.n` RGB images; labels are assigned round-robin.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64, split: Split) -> Result<Dataset> {
    let glyphs = spec.glyphs.glyphs();
    if spec.size < 8 {
        return Err(Error::InvalidArgument(format!("synthetic images need size >= 8, got {}", spec.size)));
    }
    if spec.class_count == 0 || spec.class_count > glyphs.len() {
        return Err(Error::InvalidArgument(format!(
            "class_count must be in 1..={}, got {}",
            glyphs.len(),
            spec.class_count
        )));
    }
    if spec.n == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs n >= 1".into()));
    }
    let s = spec.size;
    let scale = (s * 5 / 8 / GLYPH_SIZE).max(1);
    let extent = GLYPH_SIZE * scale;
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let plane = s * s;
    let mut data = vec![0f32; spec.n * 3 * plane];
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let label = i % spec.class_count;
        labels.push(label);
        let mut rng = SplitMix64::derive(seed, &[tag::DATA, i as u64]);
        let glyph = &glyphs[label];
        let oy = rng.random_range(0..=s - extent);
        let ox = rng.random_range(0..=s - extent);
        let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.4));
        let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
        let img = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
        for y in 0..s {
            for x in 0..s {
                let on = y >= oy
                    && y < oy + extent
                    && x >= ox
                    && x < ox + extent
                    && glyph[(y - oy) / scale][(x - ox) / scale];
                for ch in 0..3 {
                    let base = if on { fg[ch] } else { bg[ch] };
                    let v = base + noise.sample(&mut rng);
                    img[ch * plane + y * s + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    let images = Tensor::new(vec![spec.n, 3, s, s], data)?;
    Dataset::new(images, labels, spec.class_count, split)
}
