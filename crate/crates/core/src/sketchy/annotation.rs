use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use image::{GrayImage, Luma};
use imageproc::drawing::draw_polygon_mut;
use imageproc::point::Point;
use serde::{Deserialize, Serialize};

use super::taxonomy::{Level, Taxonomy};
use crate::error::{Error, Result};
use crate::pair_codec::SketchMap;

/// Binary segmentation mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    /// Grows the box by `margin` on every side, clipped to `width x height`.
    pub fn expand(&self, margin: usize, width: usize, height: usize) -> BBox {
        BBox {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: (self.x1 + margin).min(width - 1),
            y1: (self.y1 + margin).min(height - 1),
        }
    }
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("mask bits", height * width, bits.len()));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = on;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn intersection_area(&self, other: &Mask) -> Result<usize> {
        self.check_same(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count())
    }

    fn check_same(&self, other: &Mask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(
                "mask size",
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }

    pub fn bbox(&self) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    b = Some(match b {
                        None => BBox { x0: x, y0: y, x1: x, y1: y },
                        Some(b) => BBox {
                            x0: b.x0.min(x),
                            y0: b.y0.min(y),
                            x1: b.x1.max(x),
                            y1: b.y1.max(y),
                        },
                    });
                }
            }
        }
        b
    }

    pub fn to_sketch(&self) -> Result<SketchMap> {
        SketchMap::from_fn(self.height, self.width, |y, x| self.get(y, x))
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Fills polygons given as flat `[x0, y0, x1, y1, ...]` pixel coordinates.
    pub fn from_polygons(height: usize, width: usize, polygons: &[Vec<f64>]) -> Result<Self> {
        let mut img = GrayImage::new(width as u32, height as u32);
        for poly in polygons {
            if poly.len() % 2 != 0 {
                return Err(Error::invalid("segmentation", "polygon with odd coordinate count"));
            }
            let mut pts: Vec<Point<i32>> = Vec::new();
            for xy in poly.chunks_exact(2) {
                let p = Point::new(xy[0].round() as i32, xy[1].round() as i32);
                if pts.last() != Some(&p) {
                    pts.push(p);
                }
            }
            while pts.len() > 1 && pts.first() == pts.last() {
                pts.pop();
            }
            match pts.len() {
                0 => {}
                1 | 2 => {
                    for p in &pts {
                        if p.x >= 0 && p.y >= 0 && (p.x as usize) < width && (p.y as usize) < height {
                            img.put_pixel(p.x as u32, p.y as u32, Luma([255]));
                        }
                    }
                }
                _ => draw_polygon_mut(&mut img, &pts, Luma([255])),
            }
        }
        Ok(Self::from_fn(height, width, |y, x| img.get_pixel(x as u32, y as u32).0[0] > 0))
    }

    /// Decodes run lengths in column-major order, starting with a zero run.
    pub fn from_rle_counts(height: usize, width: usize, counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total != (height * width) as u64 {
            return Err(Error::invalid(
                "segmentation.counts",
                format!("runs cover {total} pixels, mask has {}", height * width),
            ));
        }
        let mut m = Self::empty(height, width);
        let mut idx = 0usize;
        for (i, &run) in counts.iter().enumerate() {
            if i % 2 == 1 {
                for j in idx..idx + run as usize {
                    let (x, y) = (j / height, j % height);
                    m.set(y, x, true);
                }
            }
            idx += run as usize;
        }
        Ok(m)
    }

    /// Column-major run lengths, starting with a zero run.
    pub fn to_rle_counts(&self) -> Vec<u64> {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for x in 0..self.width {
            for y in 0..self.height {
                let v = self.get(y, x);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        counts
    }
}

/// Decodes the compact string form of run-length counts.
pub fn rle_from_string(s: &str) -> Result<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            if p >= bytes.len() {
                return Err(Error::invalid("segmentation.counts", "truncated run-length string"));
            }
            let c = bytes[p] as i64 - 48;
            if !(0..64).contains(&c) || k > 12 {
                return Err(Error::invalid("segmentation.counts", "invalid run-length string"));
            }
            x |= (c & 0x1f) << (5 * k);
            let more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        let m = counts.len();
        if m > 2 {
            x += counts[m - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u64::try_from(c).map_err(|_| Error::invalid("segmentation.counts", "negative run")))
        .collect()
}

/// Encodes run-length counts into the compact string form.
pub fn rle_to_string(counts: &[u64]) -> String {
    let mut out = String::new();
    for (i, &c) in counts.iter().enumerate() {
        let mut x = c as i64;
        if i > 2 {
            x -= counts[i - 2] as i64;
        }
        loop {
            let mut ch = x & 0x1f;
            x >>= 5;
            let more = if ch & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                ch |= 0x20;
            }
            out.push((ch as u8 + 48) as char);
            if !more {
                break;
            }
        }
    }
    out
}

/// One labeled region of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub category: String,
    pub level: Level,
    pub attributes: Vec<String>,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageAnnotations {
    pub image_id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub items: Vec<Annotation>,
}

/// Annotations skipped while loading, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedAnnotation {
    pub annotation_id: u64,
    pub image_id: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    /// Sorted by image id.
    pub images: Vec<ImageAnnotations>,
    pub skipped: Vec<SkippedAnnotation>,
}

// ---- COCO-style JSON ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub categories: Vec<CocoCategory>,
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub attributes: Vec<CocoAttribute>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAttribute {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Segmentation,
    #[serde(default)]
    pub attribute_ids: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { counts: RleCounts, size: [usize; 2] },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Runs(Vec<u64>),
    Compact(String),
}

impl Segmentation {
    pub fn decode(&self, height: usize, width: usize) -> Result<Mask> {
        match self {
            Segmentation::Polygons(p) => Mask::from_polygons(height, width, p),
            Segmentation::Rle { counts, size } => {
                if size[0] != height || size[1] != width {
                    return Err(Error::shape(
                        "segmentation size",
                        format!("{height}x{width}"),
                        format!("{}x{}", size[0], size[1]),
                    ));
                }
                let runs = match counts {
                    RleCounts::Runs(r) => r.clone(),
                    RleCounts::Compact(s) => rle_from_string(s)?,
                };
                Mask::from_rle_counts(height, width, &runs)
            }
        }
    }
}

impl AnnotationSet {
    /// Resolves categories against the taxonomy and decodes every mask.
    /// Unknown categories and undecodable masks are skipped and recorded.
    pub fn from_coco(coco: &CocoFile, taxonomy: &Taxonomy) -> Result<Self> {
        let cats: HashMap<u64, &str> = coco.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
        let attrs: HashMap<u64, &str> = coco.attributes.iter().map(|a| (a.id, a.name.as_str())).collect();
        let mut images: BTreeMap<u64, ImageAnnotations> = BTreeMap::new();
        for img in &coco.images {
            if img.width == 0 || img.height == 0 {
                return Err(Error::invalid("images", format!("image {} has zero size", img.id)));
            }
            images.insert(
                img.id,
                ImageAnnotations {
                    image_id: img.id,
                    file_name: img.file_name.clone(),
                    width: img.width,
                    height: img.height,
                    items: Vec::new(),
                },
            );
        }
        let mut skipped = Vec::new();
        let mut anns: Vec<&CocoAnnotation> = coco.annotations.iter().collect();
        anns.sort_by_key(|a| (a.image_id, a.id));
        for a in anns {
            let skip = |reason: String| SkippedAnnotation {
                annotation_id: a.id,
                image_id: a.image_id,
                reason,
            };
            let Some(img) = images.get_mut(&a.image_id) else {
                skipped.push(skip("unknown image".into()));
                continue;
            };
            let Some(&name) = cats.get(&a.category_id) else {
                skipped.push(skip(format!("unknown category id {}", a.category_id)));
                continue;
            };
            let Some(level) = taxonomy.level_of(name) else {
                skipped.push(skip(format!("category `{name}` not in taxonomy")));
                continue;
            };
            let mask = match a.segmentation.decode(img.height, img.width) {
                Ok(m) => m,
                Err(e) => {
                    skipped.push(skip(format!("bad segmentation: {e}")));
                    continue;
                }
            };
            let attributes = a
                .attribute_ids
                .iter()
                .filter_map(|id| attrs.get(id).map(|s| s.to_string()))
                .collect();
            img.items.push(Annotation {
                id: a.id,
                category: name.to_string(),
                level,
                attributes,
                mask,
            });
        }
        for s in &skipped {
            log::warn!("skipping annotation {} of image {}: {}", s.annotation_id, s.image_id, s.reason);
        }
        Ok(Self {
            images: images.into_values().collect(),
            skipped,
        })
    }

    pub fn load(path: &Path, taxonomy: &Taxonomy) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let coco: CocoFile = serde_json::from_str(&text)?;
        Self::from_coco(&coco, taxonomy)
    }
}
