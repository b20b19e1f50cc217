//! Geometric transforms and the 12-way training augmentation.

use super::{FaceBox, Image, VisionError};

pub const INPUT_SIDE: usize = 224;
pub const CORNER_CROP: usize = 186;
pub const CENTER_CROP: usize = 148;
pub const AUGMENT_COUNT: usize = 12;

/// Copies the `w x h` region at `(x, y)`.
pub fn crop(img: &Image, b: FaceBox) -> Result<Image, VisionError> {
    b.check(img)?;
    let mut data = Vec::with_capacity(b.w * b.h * 3);
    for y in b.y..b.y + b.h {
        let row = (y * img.width() + b.x) * 3;
        data.extend_from_slice(&img.data()[row..row + b.w * 3]);
    }
    Image::new(b.w, b.h, data)
}

/// Square region of side `max(w, h)` centered on the box, shifted to stay
/// inside the image. When the image is too narrow for the square in one
/// direction, the side is limited to the image's smaller extent.
pub fn crop_face(img: &Image, b: FaceBox) -> Result<Image, VisionError> {
    b.check(img)?;
    let side = b.w.max(b.h).min(img.width()).min(img.height());
    let place = |start: usize, len: usize, limit: usize| {
        // Center of the box, in doubled coordinates to stay integral.
        let center2 = 2 * start + len;
        let origin = center2.saturating_sub(side) / 2;
        origin.min(limit - side)
    };
    let x = place(b.x, b.w, img.width());
    let y = place(b.y, b.h, img.height());
    crop(img, FaceBox { x, y, w: side, h: side })
}

/// Bilinear resize of a square (or any) image to `side x side`, with half
/// pixel centers (`src = (dst + 0.5) * scale - 0.5`) and edge clamping.
pub fn resize_bilinear(img: &Image, side: usize) -> Image {
    resize_to(img, side, side)
}

fn resize_to(img: &Image, out_w: usize, out_h: usize) -> Image {
    if (out_w, out_h) == (img.width(), img.height()) {
        return img.clone();
    }
    let taps = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / out as f64;
        (0..out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = taps(out_w, img.width());
    let ys = taps(out_h, img.height());
    let src = img.data();
    let at = |x: usize, y: usize, c: usize| src[(y * img.width() + x) * 3 + c] as f64;
    let mut data = Vec::with_capacity(out_w * out_h * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = at(x0, y0, c) * (1.0 - fx) + at(x1, y0, c) * fx;
                let bottom = at(x0, y1, c) * (1.0 - fx) + at(x1, y1, c) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::new(out_w, out_h, data).expect("sized")
}

/// Mirror around the vertical axis.
pub fn flip_horizontal(img: &Image) -> Image {
    let w = img.width();
    let mut data = Vec::with_capacity(img.data().len());
    for row in img.data().chunks_exact(w * 3) {
        for px in row.chunks_exact(3).rev() {
            data.extend_from_slice(px);
        }
    }
    Image::new(w, img.height(), data).expect("sized")
}

/// The twelve training variants of a 224x224 image, in this order:
///
/// 0. the original;
/// 1. to 4. the 186x186 crops at offsets (0,0), (38,0), (0,38), (38,38),
///    resized back to 224;
/// 5. the 148x148 center crop at (38,38), resized to 224;
/// 6. the horizontal flip of the original;
/// 7. to 11. the horizontal flips of variants 1 to 5.
pub fn augment(img: &Image) -> Result<Vec<Image>, VisionError> {
    if img.width() != INPUT_SIDE || img.height() != INPUT_SIDE {
        return Err(VisionError::Dimension {
            expected: INPUT_SIDE,
            width: img.width(),
            height: img.height(),
        });
    }
    let off = INPUT_SIDE - CORNER_CROP;
    let mut base = vec![img.clone()];
    for (x, y) in [(0, 0), (off, 0), (0, off), (off, off)] {
        let c = crop(img, FaceBox { x, y, w: CORNER_CROP, h: CORNER_CROP })?;
        base.push(resize_bilinear(&c, INPUT_SIDE));
    }
    let m = (INPUT_SIDE - CENTER_CROP) / 2;
    let c = crop(img, FaceBox { x: m, y: m, w: CENTER_CROP, h: CENTER_CROP })?;
    base.push(resize_bilinear(&c, INPUT_SIDE));
    let flips: Vec<Image> = base.iter().map(flip_horizontal).collect();
    base.extend(flips);
    Ok(base)
}
