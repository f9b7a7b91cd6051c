use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::annotation::Mask;
use crate::error::{Error, Result};
use crate::pair_codec::SketchMap;

pub const CANVAS: usize = 512;

/// Placement of a `width x height` image on a square canvas: the longest
/// side fills the canvas and the content is centered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Letterbox {
    pub canvas: usize,
    pub src_width: usize,
    pub src_height: usize,
    pub width: usize,
    pub height: usize,
    pub offset_x: usize,
    pub offset_y: usize,
}

impl Letterbox {
    pub fn new(src_width: usize, src_height: usize, canvas: usize) -> Result<Self> {
        if src_width == 0 || src_height == 0 || canvas == 0 {
            return Err(Error::Empty(format!("image of size {src_width}x{src_height}")));
        }
        let longest = src_width.max(src_height);
        let fit = |s: usize| ((s * canvas) as f64 / longest as f64).round().max(1.0) as usize;
        let (width, height) = (fit(src_width), fit(src_height));
        Ok(Self {
            canvas,
            src_width,
            src_height,
            width,
            height,
            offset_x: (canvas - width) / 2,
            offset_y: (canvas - height) / 2,
        })
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        (self.offset_y..self.offset_y + self.height).contains(&y) && (self.offset_x..self.offset_x + self.width).contains(&x)
    }

    /// Source rectangle `[y0, y1) x [x0, x1)` covered by a canvas pixel.
    fn footprint(&self, y: usize, x: usize) -> (usize, usize, usize, usize) {
        let (ty, tx) = (y - self.offset_y, x - self.offset_x);
        let span = |t: usize, dst: usize, src: usize| {
            let a = t * src / dst;
            let b = ((t + 1) * src).div_ceil(dst).max(a + 1).min(src);
            (a, b)
        };
        let (y0, y1) = span(ty, self.height, self.src_height);
        let (x0, x1) = span(tx, self.width, self.src_width);
        (y0, y1, x0, x1)
    }

    pub fn apply_rgb(&self, img: &RgbImage) -> Result<RgbImage> {
        self.check(img.height() as usize, img.width() as usize)?;
        let scaled = if (self.width, self.height) == (self.src_width, self.src_height) {
            img.clone()
        } else {
            imageops::resize(img, self.width as u32, self.height as u32, FilterType::Triangle)
        };
        let mut canvas = RgbImage::from_pixel(self.canvas as u32, self.canvas as u32, Rgb([255, 255, 255]));
        imageops::replace(&mut canvas, &scaled, self.offset_x as i64, self.offset_y as i64);
        Ok(canvas)
    }

    /// Any stroke in a pixel's source footprint survives the resampling.
    pub fn apply_sketch(&self, s: &SketchMap) -> Result<SketchMap> {
        self.check(s.height(), s.width())?;
        SketchMap::from_fn(self.canvas, self.canvas, |y, x| self.any_in(y, x, |sy, sx| s.get(sy, sx)))
    }

    pub fn apply_mask(&self, m: &Mask) -> Result<Mask> {
        self.check(m.height(), m.width())?;
        Ok(Mask::from_fn(self.canvas, self.canvas, |y, x| self.any_in(y, x, |sy, sx| m.get(sy, sx))))
    }

    fn any_in(&self, y: usize, x: usize, f: impl Fn(usize, usize) -> bool) -> bool {
        if !self.contains(y, x) {
            return false;
        }
        let (y0, y1, x0, x1) = self.footprint(y, x);
        (y0..y1).any(|sy| (x0..x1).any(|sx| f(sy, sx)))
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if (h, w) != (self.src_height, self.src_width) {
            return Err(Error::shape(
                "letterbox source",
                format!("{}x{}", self.src_height, self.src_width),
                format!("{h}x{w}"),
            ));
        }
        Ok(())
    }
}

/// Scales the longest side to 512 and centers the result on white.
pub fn preprocess_image(img: &RgbImage) -> Result<RgbImage> {
    Letterbox::new(img.width() as usize, img.height() as usize, CANVAS)?.apply_rgb(img)
}
