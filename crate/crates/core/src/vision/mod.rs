//! Image handling: the PPM codec, face cropping, resizing, the 12-way
//! augmentation and dataset loading/splitting.

mod dataset;
mod ppm;
mod transform;

pub use dataset::{
    augment_split, load_dataset, split_dataset, BoxesFile, DatasetSplit, FaceDetector, FullFrame,
    LabeledExample,
};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use transform::{
    augment, crop, crop_face, flip_horizontal, resize_bilinear, AUGMENT_COUNT, CENTER_CROP,
    CORNER_CROP, INPUT_SIDE,
};

use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("image i/o: {0}")]
    Io(#[from] io::Error),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<VisionError>,
    },
    #[error("invalid PPM: {0}")]
    Format(String),
    #[error("box {x},{y} {w}x{h} is outside the {width}x{height} image")]
    Range {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },
    #[error("expected a {expected}x{expected}x3 image, got {width}x{height}x3")]
    Dimension {
        expected: usize,
        width: usize,
        height: usize,
    },
    #[error("{0}")]
    Argument(String),
}

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}x{})", self.width, self.height)
    }
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, VisionError> {
        if width == 0 || height == 0 {
            return Err(VisionError::Argument("image dimensions must be positive".into()));
        }
        if data.len() != width * height * 3 {
            return Err(VisionError::Argument(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Image::new(width.max(1), height.max(1), data).expect("sized")
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Image::new(width, height, data).expect("sized")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `H x W x 3` tensor with values scaled into `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f32 / 255.0).collect();
        Tensor::new(&[self.height, self.width, 3], data).expect("sized")
    }
}

/// Face bounding box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaceBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl FaceBox {
    pub fn full(img: &Image) -> Self {
        FaceBox {
            x: 0,
            y: 0,
            w: img.width(),
            h: img.height(),
        }
    }

    pub fn check(&self, img: &Image) -> Result<(), VisionError> {
        let fits = self.w > 0
            && self.h > 0
            && self.x.checked_add(self.w).is_some_and(|r| r <= img.width())
            && self.y.checked_add(self.h).is_some_and(|b| b <= img.height());
        if fits {
            Ok(())
        } else {
            Err(VisionError::Range {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                width: img.width(),
                height: img.height(),
            })
        }
    }
}
