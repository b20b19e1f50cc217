//! Procedural stand-in for a face-expression dataset: seven classes of
//! geometric patterns drawn at 224x224 with random colors, geometry and
//! noise. Every pattern is recognizable after cropping, flipping and
//! downscaling to 32x32, so it exercises the whole pipeline at desk scale.

use std::fs;
use std::io;
use std::path::Path;

use crate::rng::Rng;
use crate::trainer::TrainConfig;
use crate::vision::{
    augment_split, split_dataset, write_ppm, DatasetSplit, Image, LabeledExample, VisionError,
    INPUT_SIDE,
};
use crate::EMOTIONS;

/// Pattern drawn for each class, in label order.
pub const PATTERNS: [&str; 7] = [
    "horizontal stripes",
    "vertical stripes",
    "disc",
    "ring",
    "checkerboard",
    "plus sign",
    "vertical gradient",
];

/// Directory name of class `label`; the numeric prefix keeps lexicographic
/// order equal to label order.
pub fn class_dir(label: usize) -> String {
    format!("{label}-{}", EMOTIONS[label])
}

struct Style {
    fg: [f64; 3],
    bg: [f64; 3],
    period: f64,
    phase: f64,
    cx: f64,
    cy: f64,
    radius: f64,
    width: f64,
}

fn color(rng: &mut Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)]
}

fn draw(label: usize, rng: &mut Rng) -> Image {
    let (fg, bg) = if rng.next_f64() < 0.5 {
        (color(rng, 170.0, 255.0), color(rng, 0.0, 85.0))
    } else {
        (color(rng, 0.0, 85.0), color(rng, 170.0, 255.0))
    };
    let half = INPUT_SIDE as f64 / 2.0;
    let s = Style {
        fg,
        bg,
        period: rng.uniform(44.0, 64.0),
        phase: rng.uniform(0.0, 64.0),
        cx: half + rng.uniform(-16.0, 16.0),
        cy: half + rng.uniform(-16.0, 16.0),
        radius: rng.uniform(55.0, 80.0),
        width: rng.uniform(26.0, 36.0),
    };
    let noise = rng.uniform(8.0, 24.0);
    let mut px_rng = rng.fork(label as u64);
    let stripe = |v: f64| ((v + s.phase) / s.period).rem_euclid(1.0) < 0.5;
    Image::from_fn(INPUT_SIDE, INPUT_SIDE, |x, y| {
        let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
        let (dx, dy) = (xf - s.cx, yf - s.cy);
        let r = (dx * dx + dy * dy).sqrt();
        let t = match label {
            0 => stripe(yf) as u8 as f64,
            1 => stripe(xf) as u8 as f64,
            2 => (r < s.radius) as u8 as f64,
            3 => ((r - s.radius).abs() < s.width / 2.0) as u8 as f64,
            4 => (stripe(xf) ^ stripe(yf)) as u8 as f64,
            5 => (dx.abs() < s.width / 2.0 || dy.abs() < s.width / 2.0) as u8 as f64,
            _ => yf / INPUT_SIDE as f64,
        };
        let mut out = [0u8; 3];
        for c in 0..3 {
            let v = s.bg[c] + (s.fg[c] - s.bg[c]) * t + px_rng.uniform(-noise, noise);
            out[c] = v.round().clamp(0.0, 255.0) as u8;
        }
        out
    })
}

/// `per_class` examples of each of the seven classes, interleaved by class.
/// Source ids are `<class dir>/<index>`.
pub fn generate(per_class: usize, seed: u64) -> Vec<LabeledExample> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(per_class * PATTERNS.len());
    for i in 0..per_class {
        for label in 0..PATTERNS.len() {
            out.push(LabeledExample {
                image: draw(label, &mut rng),
                label,
                source: format!("{}/{i:04}", class_dir(label)),
            });
        }
    }
    out
}

/// Writes a generated dataset in the class-per-directory layout read by
/// [`load_dataset`](crate::vision::load_dataset).
pub fn write_dataset(dir: &Path, per_class: usize, seed: u64) -> Result<usize, VisionError> {
    let examples = generate(per_class, seed);
    for label in 0..PATTERNS.len() {
        fs::create_dir_all(dir.join(class_dir(label)))?;
    }
    for ex in &examples {
        let path = dir.join(format!("{}.ppm", ex.source));
        write_ppm(&ex.image, &path)?;
    }
    Ok(examples.len())
}

/// Input side of the desk-scale profile.
pub const DESK_SIDE: usize = 32;
/// Originals generated per class for the desk experiment.
pub const DESK_PER_CLASS: usize = 20;

/// Generated examples split 80/20 by source, training side augmented.
pub fn desk_split(per_class: usize, seed: u64) -> Result<DatasetSplit, VisionError> {
    augment_split(split_dataset(generate(per_class, seed), seed, 0.8)?)
}

/// Training settings of the desk experiment: 50 epochs of batch 32.
pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 50,
        batch_size: 32,
        learning_rate: 0.01,
        momentum: 0.9,
        seed,
        dropout_rate: None,
    }
}

/// Fails when `dir` exists and already has entries.
pub fn ensure_empty(dir: &Path) -> io::Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(io::Error::new(
            io::ErrorKind::AlreadyExists,
            format!("{} is not empty", dir.display()),
        ));
    }
    Ok(())
}
