//! Synthetic annotated scenes: flat-colored garments drawn as polygons, with
//! known categories, attributes and overlapping parts.

use std::path::Path;

use image::{Rgb, RgbImage};
use imageproc::drawing::draw_polygon_mut;
use imageproc::point::Point;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::annotation::{
    rle_to_string, Annotation, CocoAnnotation, CocoAttribute, CocoCategory, CocoFile, CocoImage, ImageAnnotations,
    Mask, RleCounts, Segmentation,
};
use super::taxonomy::{Level, Taxonomy};
use crate::error::{Error, Result};

const ATTRIBUTES: &[&str] = &[
    "red", "blue", "green", "black", "long", "short", "striped", "wool", "cotton", "slim-fit", "oversized", "denim",
];
const FIXTURE_WHOLE: &[&str] = &["shirt, blouse", "pants", "skirt", "coat", "dress", "jacket", "shoe"];
const FIXTURE_PARTS: &[&str] = &["sleeve", "pocket", "collar", "zipper", "bag, wallet"];
const COLORS: &[[u8; 3]] = &[
    [200, 40, 40],
    [40, 60, 200],
    [40, 160, 60],
    [30, 30, 30],
    [220, 180, 40],
    [150, 60, 160],
    [60, 170, 170],
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureSpec {
    /// Whole-body items per image; the list length is the image count.
    pub garment_counts: Vec<usize>,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
}

impl FixtureSpec {
    pub fn new(garment_counts: Vec<usize>, seed: u64) -> Self {
        Self {
            garment_counts,
            width: 96,
            height: 128,
            seed,
        }
    }
}

fn rect_poly(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<f64> {
    vec![x0, y0, x1, y0, x1, y1, x0, y1]
}

fn random_poly(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Vec<f64> {
    let x0 = rng.random_range(0..w - 2) as f64;
    let y0 = rng.random_range(0..h - 2) as f64;
    let x1 = rng.random_range(x0 as u32 + 1..w) as f64;
    let y1 = rng.random_range(y0 as u32 + 1..h) as f64;
    if rng.random_bool(0.3) {
        vec![x0, y1, (x0 + x1) / 2.0, y0, x1, y1]
    } else {
        rect_poly(x0, y0, x1, y1)
    }
}

/// A random in-memory scene with `1..=max_whole` whole-body items and a few
/// parts, for exercising part assignment.
pub fn synthetic_scene(seed: u64, width: usize, height: usize, max_whole: usize) -> Result<ImageAnnotations> {
    if width < 3 || height < 3 || max_whole == 0 {
        return Err(Error::invalid("scene", "needs at least 3x3 pixels and one item"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let taxonomy = Taxonomy::default();
    let n_whole = rng.random_range(1..=max_whole);
    let n_parts = rng.random_range(0..=6);
    let mut items = Vec::new();
    for i in 0..n_whole + n_parts {
        let (cat, level) = if i < n_whole {
            (taxonomy.whole_body.choose(&mut rng).expect("non-empty"), Level::WholeBody)
        } else {
            (taxonomy.parts.choose(&mut rng).expect("non-empty"), Level::GarmentPart)
        };
        let poly = random_poly(&mut rng, width as u32, height as u32);
        items.push(Annotation {
            id: i as u64 + 1,
            category: cat.clone(),
            level,
            attributes: vec![ATTRIBUTES.choose(&mut rng).expect("non-empty").to_string()],
            mask: Mask::from_polygons(height, width, &[poly])?,
        });
    }
    Ok(ImageAnnotations {
        image_id: seed,
        file_name: format!("{seed}.png"),
        width,
        height,
        items,
    })
}

/// Renders the scenes of `layout` into `dir/images` and writes
/// `dir/annotations.json`. Returns the annotation file contents.
pub fn write_fixture(dir: &Path, layout: &FixtureSpec) -> Result<CocoFile> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let coco = fixture_annotations(layout);
    for img in &coco.images {
        let rendered = render(&coco, img.id, layout.width, layout.height)?;
        rendered.save(images_dir.join(&img.file_name))?;
    }
    let path = dir.join("annotations.json");
    std::fs::write(&path, serde_json::to_string_pretty(&coco)?).map_err(|e| Error::io(&path, e))?;
    Ok(coco)
}

/// The annotation file for `layout` without touching the filesystem.
pub fn fixture_annotations(layout: &FixtureSpec) -> CocoFile {
    let mut rng = ChaCha8Rng::seed_from_u64(layout.seed);
    let (w, h) = (layout.width as f64, layout.height as f64);
    let names: Vec<&str> = FIXTURE_WHOLE.iter().chain(FIXTURE_PARTS).copied().collect();
    let categories = names
        .iter()
        .enumerate()
        .map(|(i, n)| CocoCategory {
            id: i as u64 + 1,
            name: n.to_string(),
        })
        .collect();
    let attributes = ATTRIBUTES
        .iter()
        .enumerate()
        .map(|(i, n)| CocoAttribute {
            id: i as u64 + 1,
            name: n.to_string(),
        })
        .collect();
    let cat_id = |name: &str| names.iter().position(|n| *n == name).expect("fixture category") as u64 + 1;

    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut next_id = 1u64;
    for (i, &n) in layout.garment_counts.iter().enumerate() {
        let image_id = i as u64 + 1;
        images.push(CocoImage {
            id: image_id,
            file_name: format!("{image_id:04}.png"),
            width: layout.width as usize,
            height: layout.height as usize,
        });
        let band = h / n.max(1) as f64;
        for g in 0..n {
            let y0 = g as f64 * band + 2.0;
            let y1 = ((g + 1) as f64 * band - 3.0).max(y0 + 2.0);
            let x0 = rng.random_range(2.0..w * 0.3);
            let x1 = rng.random_range(w * 0.6..w - 3.0);
            let whole = *FIXTURE_WHOLE.choose(&mut rng).expect("non-empty");
            let mut attrs: Vec<u64> = (0..rng.random_range(0..=2))
                .map(|_| rng.random_range(1..=ATTRIBUTES.len() as u64))
                .collect();
            attrs.sort_unstable();
            attrs.dedup();
            annotations.push(CocoAnnotation {
                id: next_id,
                image_id,
                category_id: cat_id(whole),
                segmentation: Segmentation::Polygons(vec![rect_poly(x0, y0, x1, y1)]),
                attribute_ids: attrs,
            });
            next_id += 1;
            for _ in 0..rng.random_range(0..=2) {
                let part = *FIXTURE_PARTS.choose(&mut rng).expect("non-empty");
                let px0 = rng.random_range(x0..(x0 + x1) / 2.0);
                let py0 = rng.random_range(y0..(y0 + y1) / 2.0);
                let px1 = (px0 + rng.random_range(3.0..12.0)).min(w - 1.0);
                let py1 = (py0 + rng.random_range(3.0..12.0)).min(h - 1.0);
                let mask = Mask::from_polygons(layout.height as usize, layout.width as usize, &[rect_poly(px0, py0, px1, py1)])
                    .expect("rectangle polygon");
                let segmentation = if next_id % 2 == 0 {
                    Segmentation::Rle {
                        counts: RleCounts::Compact(rle_to_string(&mask.to_rle_counts())),
                        size: [layout.height as usize, layout.width as usize],
                    }
                } else {
                    Segmentation::Polygons(vec![rect_poly(px0, py0, px1, py1)])
                };
                annotations.push(CocoAnnotation {
                    id: next_id,
                    image_id,
                    category_id: cat_id(part),
                    segmentation,
                    attribute_ids: vec![rng.random_range(1..=ATTRIBUTES.len() as u64)],
                });
                next_id += 1;
            }
        }
    }
    CocoFile {
        images,
        categories,
        annotations,
        attributes,
    }
}

fn render(coco: &CocoFile, image_id: u64, w: u32, h: u32) -> Result<RgbImage> {
    let mut img = RgbImage::from_pixel(w, h, Rgb([245, 245, 240]));
    for (k, a) in coco.annotations.iter().filter(|a| a.image_id == image_id).enumerate() {
        let color = Rgb(COLORS[(a.category_id as usize + k) % COLORS.len()]);
        match &a.segmentation {
            Segmentation::Polygons(polys) => {
                for p in polys {
                    let pts: Vec<Point<i32>> = p
                        .chunks_exact(2)
                        .map(|xy| Point::new(xy[0].round() as i32, xy[1].round() as i32))
                        .collect();
                    draw_polygon_mut(&mut img, &pts, color);
                }
            }
            seg @ Segmentation::Rle { .. } => {
                let m = seg.decode(h as usize, w as usize)?;
                for y in 0..h as usize {
                    for x in 0..w as usize {
                        if m.get(y, x) {
                            img.put_pixel(x as u32, y as u32, color);
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}
