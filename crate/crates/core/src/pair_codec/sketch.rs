use std::path::Path;

use image::{GrayImage, Luma};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Binary `H x W` stroke map. `1` marks a stroke pixel.
///
/// On disk a sketch is an 8-bit grayscale PNG with `0 -> 0` and `1 -> 255`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SketchMap {
    height: usize,
    width: usize,
    grid: Vec<u8>,
}

impl SketchMap {
    pub fn new(height: usize, width: usize, grid: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Empty(format!("sketch of size {height}x{width}")));
        }
        if grid.len() != height * width {
            return Err(Error::shape("sketch grid", height * width, grid.len()));
        }
        if let Some(v) = grid.iter().find(|&&v| v > 1) {
            return Err(Error::invalid("sketch", format!("non-binary value {v}")));
        }
        Ok(Self {
            height,
            width,
            grid,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut grid = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                grid.push(u8::from(f(y, x)));
            }
        }
        Self::new(height, width, grid)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.grid[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.grid[y * self.width + x] = u8::from(on);
    }

    pub fn popcount(&self) -> usize {
        self.grid.iter().map(|&v| v as usize).sum()
    }

    /// Pixelwise logical OR.
    pub fn union(&self, other: &SketchMap) -> Result<SketchMap> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(
                "sketch union",
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        let grid = self.grid.iter().zip(&other.grid).map(|(a, b)| a | b).collect();
        Ok(SketchMap {
            height: self.height,
            width: self.width,
            grid,
        })
    }

    /// Resamples to `height x width`. Integer downscales take the block
    /// maximum so thin strokes survive; everything else uses nearest neighbour.
    pub fn resize(&self, height: usize, width: usize) -> Result<SketchMap> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        if height == 0 || width == 0 {
            return Err(Error::Empty("resize target".into()));
        }
        if self.height % height == 0 && self.width % width == 0 {
            let (by, bx) = (self.height / height, self.width / width);
            return SketchMap::from_fn(height, width, |y, x| {
                (0..by).any(|dy| (0..bx).any(|dx| self.get(y * by + dy, x * bx + dx)))
            });
        }
        SketchMap::from_fn(height, width, |y, x| {
            let sy = (y * self.height) / height;
            let sx = (x * self.width) / width;
            self.get(sy, sx)
        })
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Pixels `>= 128` become strokes.
    pub fn from_gray_image(img: &GrayImage) -> Result<SketchMap> {
        let (w, h) = img.dimensions();
        SketchMap::from_fn(h as usize, w as usize, |y, x| {
            img.get_pixel(x as u32, y as u32).0[0] >= 128
        })
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_gray_image()
            .write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<SketchMap> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        SketchMap::from_gray_image(&img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray_image().save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<SketchMap> {
        let img = image::open(path)?.to_luma8();
        SketchMap::from_gray_image(&img)
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        h.update(&self.grid);
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_non_binary_and_empty() {
        assert!(SketchMap::new(2, 2, vec![0, 1, 2, 0]).is_err());
        assert!(SketchMap::new(0, 2, vec![]).is_err());
        assert!(SketchMap::new(2, 2, vec![0, 1, 1]).is_err());
    }

    #[test]
    fn block_max_downscale_keeps_thin_strokes() {
        let s = SketchMap::from_fn(8, 8, |y, x| y == 3 && x == 5).unwrap();
        let r = s.resize(4, 4).unwrap();
        assert_eq!(r.popcount(), 1);
        assert!(r.get(1, 2));
    }

    proptest! {
        #[test]
        fn png_round_trip_is_lossless(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let s = SketchMap::from_fn(h, w, |y, x| {
                (seed.rotate_left((y * w + x) as u32 % 64) & 1) == 1
            }).unwrap();
            let bytes = s.to_png_bytes().unwrap();
            let back = SketchMap::from_png_bytes(&bytes).unwrap();
            prop_assert_eq!(&s, &back);
            let img = s.to_gray_image();
            prop_assert!(img.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
        }
    }
}
