use std::path::PathBuf;
use std::process::Command;

use image::imageops::{self, FilterType};
use image::RgbImage;
use imageproc::contrast::otsu_level;
use imageproc::gradients::sobel_gradients;

use super::annotation::Mask;
use crate::error::{Error, Result};
use crate::pair_codec::SketchMap;

/// Turns an image into a stroke map of the same size.
pub trait SketchBackend: Send + Sync {
    /// Longest side the backend expects its input at.
    fn input_size(&self) -> usize;
    fn sketch(&self, image: &RgbImage) -> Result<SketchMap>;
}

/// Sobel magnitude binarized at the Otsu level (strictly above is a stroke).
#[derive(Debug, Clone, Copy)]
pub struct EdgeSketcher {
    pub input_size: usize,
}

impl Default for EdgeSketcher {
    fn default() -> Self {
        Self { input_size: 256 }
    }
}

impl SketchBackend for EdgeSketcher {
    fn input_size(&self) -> usize {
        self.input_size
    }

    fn sketch(&self, image: &RgbImage) -> Result<SketchMap> {
        let (w, h) = image.dimensions();
        let gray = imageops::grayscale(image);
        let grad = sobel_gradients(&gray);
        let max = grad.pixels().map(|p| p.0[0]).max().unwrap_or(0);
        if max == 0 {
            return SketchMap::zeros(h as usize, w as usize);
        }
        let scaled = image::GrayImage::from_fn(w, h, |x, y| {
            let v = grad.get_pixel(x, y).0[0] as u32 * 255 / max as u32;
            image::Luma([v as u8])
        });
        let level = otsu_level(&scaled);
        SketchMap::from_fn(h as usize, w as usize, |y, x| scaled.get_pixel(x as u32, y as u32).0[0] > level)
    }
}

/// Runs an external program. `{input}` and `{output}` in the arguments are
/// replaced by PNG paths; dark output pixels are strokes unless `invert` is off.
#[derive(Debug, Clone)]
pub struct ExternalSketcher {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub input_size: usize,
    pub invert: bool,
}

impl SketchBackend for ExternalSketcher {
    fn input_size(&self) -> usize {
        self.input_size
    }

    fn sketch(&self, image: &RgbImage) -> Result<SketchMap> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let input = dir.path().join("input.png");
        let output = dir.path().join("output.png");
        image.save(&input)?;
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| {
                a.replace("{input}", &input.to_string_lossy())
                    .replace("{output}", &output.to_string_lossy())
            })
            .collect();
        let status = Command::new(&self.program)
            .args(&args)
            .status()
            .map_err(|e| Error::BackendUnavailable(format!("{}: {e}", self.program.display())))?;
        if !status.success() {
            return Err(Error::BackendUnavailable(format!(
                "{} exited with {status}",
                self.program.display()
            )));
        }
        let out = image::open(&output)?.to_luma8();
        let (w, h) = out.dimensions();
        if (w, h) != image.dimensions() {
            let out = imageops::resize(&out, image.width(), image.height(), FilterType::Nearest);
            return self.binarize(&out);
        }
        self.binarize(&out)
    }
}

impl ExternalSketcher {
    fn binarize(&self, img: &image::GrayImage) -> Result<SketchMap> {
        let (w, h) = img.dimensions();
        SketchMap::from_fn(h as usize, w as usize, |y, x| {
            let v = img.get_pixel(x as u32, y as u32).0[0];
            if self.invert {
                v < 128
            } else {
                v >= 128
            }
        })
    }
}

/// Crops around the mask (plus `margin`), sketches the enlarged crop, maps
/// the strokes back to image coordinates and keeps only those inside the mask.
pub fn generate_local_sketch(
    image: &RgbImage,
    mask: &Mask,
    backend: &dyn SketchBackend,
    margin: usize,
) -> Result<SketchMap> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::shape("mask size", format!("{h}x{w}"), format!("{}x{}", mask.height(), mask.width())));
    }
    let bbox = mask
        .bbox()
        .ok_or_else(|| Error::Empty("mask has no pixels".into()))?
        .expand(margin, w, h);
    let (cw, ch) = (bbox.width(), bbox.height());
    let crop = imageops::crop_imm(image, bbox.x0 as u32, bbox.y0 as u32, cw as u32, ch as u32).to_image();

    let target = backend.input_size().max(1) as f64;
    let scale = target / cw.max(ch) as f64;
    let sw = ((cw as f64 * scale).round() as u32).max(1);
    let sh = ((ch as f64 * scale).round() as u32).max(1);
    let zoomed = if (sw as usize, sh as usize) == (cw, ch) {
        crop
    } else {
        imageops::resize(&crop, sw, sh, FilterType::Triangle)
    };
    let strokes = backend.sketch(&zoomed)?;
    if (strokes.height(), strokes.width()) != (sh as usize, sw as usize) {
        return Err(Error::shape(
            "sketcher output",
            format!("{sh}x{sw}"),
            format!("{}x{}", strokes.height(), strokes.width()),
        ));
    }
    let (sh, sw) = (sh as usize, sw as usize);
    SketchMap::from_fn(h, w, |y, x| {
        if !mask.get(y, x) || y < bbox.y0 || y > bbox.y1 || x < bbox.x0 || x > bbox.x1 {
            return false;
        }
        let sy = ((2 * (y - bbox.y0) + 1) * sh) / (2 * ch);
        let sx = ((2 * (x - bbox.x0) + 1) * sw) / (2 * cw);
        strokes.get(sy.min(sh - 1), sx.min(sw - 1))
    })
}

/// Pixelwise union of equally sized sketches.
pub fn compose_global_sketch(sketches: &[SketchMap]) -> Result<SketchMap> {
    let (first, rest) = sketches
        .split_first()
        .ok_or_else(|| Error::Empty("no sketches to compose".into()))?;
    rest.iter().try_fold(first.clone(), |acc, s| acc.union(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn scene(w: u32, h: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
                Rgb([200, 30, 30])
            } else {
                Rgb([20, 20, 240])
            }
        })
    }

    fn near(s: &SketchMap, y: usize, x: usize) -> bool {
        (y.saturating_sub(1)..=(y + 1).min(s.height() - 1))
            .any(|yy| (x.saturating_sub(1)..=(x + 1).min(s.width() - 1)).any(|xx| s.get(yy, xx)))
    }

    #[test]
    fn rectangle_sketch_is_its_boundary() {
        let (x0, y0, x1, y1) = (20usize, 15usize, 60usize, 45usize);
        let img = scene(96, 64, x0 as u32, y0 as u32, x1 as u32, y1 as u32);
        let mask = Mask::from_fn(64, 96, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x));
        let s = generate_local_sketch(&img, &mask, &EdgeSketcher::default(), 8).unwrap();
        let on_boundary = |y: usize, x: usize| {
            mask.get(y, x) && (y == y0 || y == y1 - 1 || x == x0 || x == x1 - 1)
        };
        let boundary = SketchMap::from_fn(64, 96, on_boundary).unwrap();
        assert!(s.popcount() > 0);
        for y in 0..64 {
            for x in 0..96 {
                if s.get(y, x) {
                    assert!(near(&boundary, y, x), "stray stroke at ({y}, {x})");
                }
                if boundary.get(y, x) {
                    assert!(near(&s, y, x), "boundary gap at ({y}, {x})");
                }
            }
        }
    }

    #[test]
    fn full_mask_equals_backend_output() {
        let img = scene(256, 128, 30, 20, 100, 90);
        let mask = Mask::from_fn(128, 256, |_, _| true);
        let backend = EdgeSketcher::default();
        let s = generate_local_sketch(&img, &mask, &backend, 8).unwrap();
        assert_eq!(s, backend.sketch(&img).unwrap());
    }

    #[test]
    fn empty_mask_and_size_mismatch_rejected() {
        let img = scene(32, 32, 4, 4, 20, 20);
        assert!(generate_local_sketch(&img, &Mask::empty(32, 32), &EdgeSketcher::default(), 8).is_err());
        assert!(generate_local_sketch(&img, &Mask::empty(16, 32), &EdgeSketcher::default(), 8).is_err());
    }

    #[test]
    fn flat_image_has_no_strokes() {
        let img = RgbImage::from_pixel(20, 20, Rgb([9, 9, 9]));
        assert_eq!(EdgeSketcher::default().sketch(&img).unwrap().popcount(), 0);
    }

    #[cfg(unix)]
    #[test]
    fn external_backend_runs_a_command() {
        let s = ExternalSketcher {
            program: "cp".into(),
            args: vec!["{input}".into(), "{output}".into()],
            input_size: 64,
            invert: true,
        };
        let img = RgbImage::from_fn(8, 4, |x, _| if x < 4 { Rgb([0, 0, 0]) } else { Rgb([255, 255, 255]) });
        let out = s.sketch(&img).unwrap();
        assert!(out.get(0, 0) && !out.get(0, 7));
        let missing = ExternalSketcher {
            program: "/nonexistent/sketcher".into(),
            ..s
        };
        assert!(matches!(missing.sketch(&img), Err(Error::BackendUnavailable(_))));
    }

    fn arb_sketch() -> impl Strategy<Value = SketchMap> {
        proptest::collection::vec(0u8..2, 48).prop_map(|g| SketchMap::new(6, 8, g).unwrap())
    }

    proptest! {
        #[test]
        fn local_sketch_stays_inside_mask(bits in proptest::collection::vec(any::<bool>(), 24 * 24)) {
            let mask = Mask::new(24, 24, bits).unwrap();
            prop_assume!(!mask.is_empty());
            let img = RgbImage::from_fn(24, 24, |x, y| Rgb([(x * 10) as u8, (y * 10) as u8, ((x ^ y) * 7) as u8]));
            let s = generate_local_sketch(&img, &mask, &EdgeSketcher { input_size: 40 }, 3).unwrap();
            for y in 0..24 {
                for x in 0..24 {
                    prop_assert!(!s.get(y, x) || mask.get(y, x));
                }
            }
        }

        #[test]
        fn union_algebra(a in arb_sketch(), b in arb_sketch(), c in arb_sketch()) {
            let ab = compose_global_sketch(&[a.clone(), b.clone()]).unwrap();
            prop_assert_eq!(&ab, &compose_global_sketch(&[b.clone(), a.clone()]).unwrap());
            prop_assert_eq!(compose_global_sketch(&[a.clone(), a.clone()]).unwrap(), a.clone());
            prop_assert_eq!(compose_global_sketch(&[a.clone()]).unwrap(), a.clone());
            let left = compose_global_sketch(&[ab.clone(), c.clone()]).unwrap();
            let bc = compose_global_sketch(&[b.clone(), c.clone()]).unwrap();
            prop_assert_eq!(&left, &compose_global_sketch(&[a.clone(), bc]).unwrap());
            prop_assert!(ab.popcount() >= a.popcount().max(b.popcount()));
            prop_assert!(ab.popcount() <= a.popcount() + b.popcount());
        }
    }

    #[test]
    fn compose_edge_cases() {
        assert!(compose_global_sketch(&[]).is_err());
        let a = SketchMap::zeros(4, 4).unwrap();
        let b = SketchMap::zeros(4, 5).unwrap();
        assert!(compose_global_sketch(&[a, b]).is_err());
        let l = SketchMap::from_fn(4, 4, |_, x| x < 2).unwrap();
        let r = SketchMap::from_fn(4, 4, |_, x| x >= 2).unwrap();
        assert_eq!(compose_global_sketch(&[l.clone(), r.clone()]).unwrap().popcount(), l.popcount() + r.popcount());
    }
}
