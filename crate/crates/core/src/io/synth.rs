//! Quadrant-texture benchmark: four grayscale texture classes, each drawn in
//! its own image quadrant on a noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::harness::{Dataset, Item};
use crate::text::{BankClass, PromptBank};
use crate::vision::ImageTensor;

/// Class names in label order; class `c` lives in quadrant `c`
/// (upper left, upper right, lower left, lower right).
pub const SYNTH_CLASSES: [&str; 4] = ["checker", "dots", "ring", "stripe"];

const QUADRANT_WORDS: [&str; 4] = ["upper left", "upper right", "lower left", "lower right"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Square image side; must be even.
    pub size: usize,
    /// Std of the additive pixel noise.
    pub noise: f64,
    /// Texture contrast is drawn uniformly from `[min_contrast, max_contrast]`.
    pub min_contrast: f64,
    pub max_contrast: f64,
    /// Chance, per remaining quadrant, of a distractor texture. A distractor
    /// in quadrant `q` never uses class `q`'s texture, so only the class
    /// texture in its own quadrant identifies the label.
    pub distractor_prob: f64,
    /// Distractor contrast relative to the class texture.
    pub distractor_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            train_per_class: 50,
            test_per_class: 50,
            size: 32,
            noise: 0.12,
            min_contrast: 0.4,
            max_contrast: 0.8,
            distractor_prob: 0.5,
            distractor_scale: 0.6,
        }
    }
}

impl SynthConfig {
    /// Backbone pretraining corpus: a separate draw with more items, less
    /// noise and fewer distractors than the benchmark.
    pub fn pretraining() -> Self {
        Self {
            seed: 1000,
            train_per_class: 200,
            test_per_class: 50,
            noise: 0.06,
            distractor_prob: 0.2,
            ..Self::default()
        }
    }
}

pub fn caption(class_name: &str) -> String {
    format!("a photo of a {class_name} pattern")
}

/// Texture intensity in `[0, 1]` at local quadrant coordinates.
fn texture(class: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut t = vec![0.0; side * side];
    let s = side as f64;
    match class {
        0 => {
            let cell = rng.random_range(3..=4);
            let (ox, oy) = (rng.random_range(0..cell), rng.random_range(0..cell));
            for y in 0..side {
                for x in 0..side {
                    t[y * side + x] = (((x + ox) / cell + (y + oy) / cell) % 2) as f64;
                }
            }
        }
        1 => {
            let count = rng.random_range(8..=12);
            for _ in 0..count {
                let (cx, cy) = (rng.random_range(1..side - 3), rng.random_range(1..side - 3));
                for dy in 0..3 {
                    for dx in 0..3 {
                        t[(cy + dy) * side + cx + dx] = 1.0;
                    }
                }
            }
        }
        2 => {
            let r = rng.random_range(0.25 * s..0.4 * s);
            let cx = s / 2.0 + rng.random_range(-0.1 * s..0.1 * s);
            let cy = s / 2.0 + rng.random_range(-0.1 * s..0.1 * s);
            for y in 0..side {
                for x in 0..side {
                    let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                    t[y * side + x] = (1.0 - (d - r).abs() / 1.2).clamp(0.0, 1.0);
                }
            }
        }
        _ => {
            let period = rng.random_range(3..=4);
            let phase = rng.random_range(0..period);
            let vertical = rng.random_bool(0.5);
            for y in 0..side {
                for x in 0..side {
                    let u = if vertical { x } else { y };
                    t[y * side + x] = if (u + phase) % period == 0 { 1.0 } else { 0.0 };
                }
            }
        }
    }
    t
}

fn paint(canvas: &mut [f64], size: usize, quadrant: usize, tex: &[f64], contrast: f64) {
    let half = size / 2;
    let (qy, qx) = ((quadrant / 2) * half, (quadrant % 2) * half);
    for y in 0..half {
        for x in 0..half {
            canvas[(qy + y) * size + qx + x] += contrast * tex[y * half + x];
        }
    }
}

/// One grayscale image of `class`.
pub fn render(class: usize, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let size = config.size;
    let half = size / 2;
    let base = rng.random_range(0.15..0.3);
    let mut canvas = vec![base; size * size];
    let contrast = rng.random_range(config.min_contrast..=config.max_contrast);
    let tex = texture(class, half, rng);
    paint(&mut canvas, size, class, &tex, contrast);
    for q in (0..SYNTH_CLASSES.len()).filter(|&q| q != class) {
        if rng.random_bool(config.distractor_prob) {
            let kind = (q + rng.random_range(1..SYNTH_CLASSES.len())) % SYNTH_CLASSES.len();
            let tex = texture(kind, half, rng);
            paint(&mut canvas, size, q, &tex, contrast * config.distractor_scale);
        }
    }
    let noise = Normal::new(0.0, config.noise).expect("noise std is finite");
    for v in &mut canvas {
        *v += noise.sample(rng);
    }
    ImageTensor::new(1, size, size, canvas)
}

/// Builds the benchmark in memory. Items are ordered class by class.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut split = |name: &str, per_class: usize| -> Result<Vec<Item>> {
        let mut items = Vec::with_capacity(per_class * SYNTH_CLASSES.len());
        for (c, class) in SYNTH_CLASSES.iter().enumerate() {
            for i in 0..per_class {
                items.push(Item {
                    path: format!("{class}/{name}_{i:04}.pgm"),
                    label: c,
                    caption: caption(class),
                    image: render(c, config, &mut rng)?,
                });
            }
        }
        Ok(items)
    };
    let train = split("train", config.train_per_class)?;
    let test = split("test", config.test_per_class)?;
    Ok(Dataset {
        name: "synthetic".into(),
        class_names: SYNTH_CLASSES.iter().map(|s| s.to_string()).collect(),
        train,
        test,
    })
}

const DESCRIPTORS: [[&str; 4]; 4] = [
    [
        "alternating squares",
        "checkered tiles",
        "a grid of dark and bright cells",
        "square blocks like a board",
    ],
    [
        "scattered small spots",
        "tiny bright points",
        "dotted speckles",
        "a few clustered spots",
    ],
    [
        "a round outline",
        "a hollow circle",
        "a circular loop",
        "a thin closed curve",
    ],
    [
        "parallel lines",
        "thin straight bands",
        "repeating bars",
        "regular narrow stripes",
    ],
];

const FRAMES: [&str; 6] = [
    "a {c} pattern of {d} in the {q} corner",
    "the image shows a {c} pattern near the {q} region",
    "a grayscale image with {d} like a {c} pattern",
    "{d} that form a {c} pattern on a noisy background",
    "a {c} pattern with {d}",
    "faint {d} seen in the {q} area",
];

/// Share of bank sentences describing the neighbouring class.
pub const BANK_CONFUSION: f64 = 0.45;
pub const BANK_SEED: u64 = 7;

/// The bank used for the synthetic benchmark.
pub fn default_bank(n: usize) -> PromptBank {
    synthetic_bank(n, BANK_CONFUSION, BANK_SEED)
}

/// Stand-in for language-model descriptions: `n` sentences per class built
/// from texture and location phrases. A share of each class's sentences
/// describes a neighbouring class instead, the way generated descriptions
/// mix up look-alike findings.
pub fn synthetic_bank(n: usize, confusion: f64, seed: u64) -> PromptBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = SYNTH_CLASSES
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let prompts = (0..n)
                .map(|_| {
                    let described = if rng.random_bool(confusion) {
                        c ^ 1
                    } else {
                        c
                    };
                    let d = DESCRIPTORS[described][rng.random_range(0..4)];
                    let q = QUADRANT_WORDS[described];
                    FRAMES[rng.random_range(0..FRAMES.len())]
                        .replace("{d}", d)
                        .replace("{q}", q)
                        .replace("{c}", SYNTH_CLASSES[described])
                })
                .collect();
            BankClass {
                name: name.to_string(),
                prompts,
            }
        })
        .collect();
    PromptBank { classes }
}
