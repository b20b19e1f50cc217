//! Labeled datasets: loading from a class-per-directory layout, face
//! detection hooks, seeded splitting and train-side augmentation.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::{augment, crop_face, read_ppm, resize_bilinear, FaceBox, Image, VisionError, INPUT_SIDE};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub image: Image,
    pub label: usize,
    /// Identifies the original photograph; augmented copies share it.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub seed: u64,
}

/// Locates the face in an image.
pub trait FaceDetector {
    fn detect(&self, source: &str, img: &Image) -> Result<FaceBox, VisionError>;
}

/// Treats the whole frame as the face.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullFrame;

impl FaceDetector for FullFrame {
    fn detect(&self, _source: &str, img: &Image) -> Result<FaceBox, VisionError> {
        Ok(FaceBox::full(img))
    }
}

/// Boxes supplied by an external detector, one `source_id x y w h` line per
/// image. Images without an entry fall back to the full frame.
#[derive(Debug, Clone, Default)]
pub struct BoxesFile {
    boxes: HashMap<String, FaceBox>,
}

impl BoxesFile {
    pub fn parse(text: &str) -> Result<Self, VisionError> {
        let mut boxes = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || VisionError::Format(format!("boxes file line {}: expected `id x y w h`", i + 1));
            if parts.len() != 5 {
                return Err(bad());
            }
            let n: Vec<usize> = parts[1..]
                .iter()
                .map(|p| p.parse().map_err(|_| bad()))
                .collect::<Result<_, _>>()?;
            boxes.insert(parts[0].to_string(), FaceBox { x: n[0], y: n[1], w: n[2], h: n[3] });
        }
        Ok(BoxesFile { boxes })
    }

    pub fn load(path: &Path) -> Result<Self, VisionError> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

impl FaceDetector for BoxesFile {
    fn detect(&self, source: &str, img: &Image) -> Result<FaceBox, VisionError> {
        Ok(self.boxes.get(source).copied().unwrap_or_else(|| FaceBox::full(img)))
    }
}

/// Loads `dir/<class>/<image>.ppm`. Labels follow the sorted class
/// directory names; each image is face-cropped with `detector` and resized
/// to 224x224. Returns the class names and the examples, whose source ids
/// are `<class>/<file stem>`. Unsupported or unreadable files are skipped
/// with a warning.
pub fn load_dataset(
    dir: &Path,
    detector: &dyn FaceDetector,
) -> Result<(Vec<String>, Vec<LabeledExample>), VisionError> {
    let mut classes: Vec<(String, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| Some((e.file_name().into_string().ok()?, e.path())))
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(VisionError::Argument(format!(
            "{} contains no class directories",
            dir.display()
        )));
    }
    let mut examples = Vec::new();
    for (label, (class, path)) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let before = examples.len();
        for file in files {
            if file.extension().and_then(|e| e.to_str()) != Some("ppm") {
                warn!("skipping unsupported file {}", file.display());
                continue;
            }
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let source = format!("{class}/{stem}");
            let loaded = read_ppm(&file).and_then(|img| {
                let b = detector.detect(&source, &img)?;
                Ok(resize_bilinear(&crop_face(&img, b)?, INPUT_SIDE))
            });
            match loaded {
                Ok(image) => examples.push(LabeledExample { image, label, source }),
                Err(e) => warn!("skipping {}: {e}", file.display()),
            }
        }
        if examples.len() == before {
            warn!("class `{class}` has no usable images");
        }
    }
    Ok((classes.into_iter().map(|(c, _)| c).collect(), examples))
}

/// Seeded split by source id: the distinct ids (in first-seen order) are
/// shuffled with [`Rng`] and the first `floor(fraction * ids)` go to
/// training. Examples sharing a source id always land on the same side.
pub fn split_dataset(
    examples: Vec<LabeledExample>,
    seed: u64,
    train_fraction: f64,
) -> Result<DatasetSplit, VisionError> {
    if examples.len() < 2 {
        return Err(VisionError::Argument("splitting needs at least 2 examples".into()));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(VisionError::Argument(format!(
            "train fraction must lie in [0, 1], got {train_fraction}"
        )));
    }
    let mut seen = HashSet::new();
    let mut ids: Vec<&str> = examples
        .iter()
        .map(|ex| ex.source.as_str())
        .filter(|s| seen.insert(*s))
        .collect();
    Rng::new(seed).shuffle(&mut ids);
    let cut = (train_fraction * ids.len() as f64).floor() as usize;
    let rank: HashMap<String, usize> = ids.iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect();
    let (mut train, mut test): (Vec<_>, Vec<_>) =
        examples.into_iter().partition(|ex| rank[&ex.source] < cut);
    train.sort_by_key(|ex| rank[&ex.source]);
    test.sort_by_key(|ex| rank[&ex.source]);
    Ok(DatasetSplit { train, test, seed })
}

/// Replaces every training example by its twelve augmented variants; the
/// test side is left as is.
pub fn augment_split(split: DatasetSplit) -> Result<DatasetSplit, VisionError> {
    let mut train = Vec::with_capacity(split.train.len() * super::AUGMENT_COUNT);
    for ex in split.train {
        for image in augment(&ex.image)? {
            train.push(LabeledExample {
                image,
                label: ex.label,
                source: ex.source.clone(),
            });
        }
    }
    Ok(DatasetSplit { train, ..split })
}
