use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::annotation::{Annotation, AnnotationSet, ImageAnnotations};
use super::taxonomy::{Level, Taxonomy};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GarmentPart {
    pub name: String,
    pub attributes: Vec<String>,
    pub annotation_id: u64,
}

/// A whole-body item and the parts attached to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GarmentHierarchy {
    pub annotation_id: u64,
    /// Index into the image's annotation list.
    pub item_index: usize,
    pub category: String,
    pub top_level: Vec<String>,
    pub sub_level: Vec<GarmentPart>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignedBy {
    Overlap,
    Cooccurrence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnassignedPart {
    pub image_id: u64,
    pub annotation_id: u64,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageHierarchy {
    pub image_id: u64,
    pub garments: Vec<GarmentHierarchy>,
    /// `(part annotation id, garment position in `garments`, how)`.
    pub assignments: Vec<(u64, usize, AssignedBy)>,
    pub unassigned: Vec<UnassignedPart>,
    pub dropped: usize,
}

/// Dataset-wide counts of parts attached to whole-body categories by overlap.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooccurrenceTable {
    counts: BTreeMap<String, BTreeMap<String, u64>>,
}

impl CooccurrenceTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, part: &str, whole: &str, n: u64) {
        *self
            .counts
            .entry(part.to_string())
            .or_default()
            .entry(whole.to_string())
            .or_default() += n;
    }

    pub fn count(&self, part: &str, whole: &str) -> u64 {
        self.counts.get(part).and_then(|m| m.get(whole)).copied().unwrap_or(0)
    }

    /// Counts every overlap-based attachment in the set.
    pub fn from_annotations(set: &AnnotationSet, taxonomy: &Taxonomy) -> Result<Self> {
        let mut t = Self::new();
        for img in &set.images {
            let wholes: Vec<(usize, &Annotation)> = whole_items(img);
            for part in retained_parts(img, taxonomy) {
                if let Some(w) = overlap_winner(part, &wholes)? {
                    t.add(&part.category, &img.items[w].category, 1);
                }
            }
        }
        Ok(t)
    }

    /// The candidate with the highest positive count; ties go to the
    /// lexicographically smaller category.
    pub fn most_frequent<'a>(&self, part: &str, candidates: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
        let mut best: Option<(&str, u64)> = None;
        for c in candidates {
            let n = self.count(part, c);
            if n == 0 {
                continue;
            }
            best = match best {
                Some((b, bn)) if bn > n || (bn == n && b <= c) => Some((b, bn)),
                _ => Some((c, n)),
            };
        }
        best.map(|(c, _)| c)
    }
}

fn whole_items(img: &ImageAnnotations) -> Vec<(usize, &Annotation)> {
    img.items
        .iter()
        .enumerate()
        .filter(|(_, a)| a.level == Level::WholeBody)
        .collect()
}

fn retained_parts<'a>(img: &'a ImageAnnotations, taxonomy: &'a Taxonomy) -> impl Iterator<Item = &'a Annotation> {
    img.items
        .iter()
        .filter(move |a| a.level == Level::GarmentPart && !taxonomy.is_dropped(&a.category))
}

/// Item index of the whole-body item with the largest positive intersection.
/// Ties: larger item area, then smaller category name, then lower index.
pub fn overlap_winner(part: &Annotation, wholes: &[(usize, &Annotation)]) -> Result<Option<usize>> {
    let mut best: Option<(usize, usize, usize, &str)> = None;
    for &(idx, w) in wholes {
        let inter = part.mask.intersection_area(&w.mask)?;
        if inter == 0 {
            continue;
        }
        let area = w.mask.area();
        let better = match best {
            None => true,
            Some((bi, bint, barea, bcat)) => {
                (inter, area).cmp(&(bint, barea)).then_with(|| bcat.cmp(&w.category)).then_with(|| bi.cmp(&idx))
                    == std::cmp::Ordering::Greater
            }
        };
        if better {
            best = Some((idx, inter, area, &w.category));
        }
    }
    Ok(best.map(|b| b.0))
}

/// Attaches every retained part of one image to a whole-body item.
pub fn assign_parts(img: &ImageAnnotations, taxonomy: &Taxonomy, cooc: &CooccurrenceTable) -> Result<ImageHierarchy> {
    let wholes = whole_items(img);
    let mut garments: Vec<GarmentHierarchy> = wholes
        .iter()
        .map(|&(idx, a)| GarmentHierarchy {
            annotation_id: a.id,
            item_index: idx,
            category: a.category.clone(),
            top_level: a.attributes.clone(),
            sub_level: Vec::new(),
        })
        .collect();
    let position = |item_index: usize| wholes.iter().position(|&(i, _)| i == item_index).expect("whole item");

    let dropped = img
        .items
        .iter()
        .filter(|a| a.level == Level::GarmentPart && taxonomy.is_dropped(&a.category))
        .count();
    let mut assignments = Vec::new();
    let mut unassigned = Vec::new();
    for part in retained_parts(img, taxonomy) {
        let target = match overlap_winner(part, &wholes)? {
            Some(idx) => Some((idx, AssignedBy::Overlap)),
            None => cooc
                .most_frequent(&part.category, wholes.iter().map(|(_, w)| w.category.as_str()))
                .map(|cat| {
                    let (idx, _) = wholes
                        .iter()
                        .filter(|(_, w)| w.category == cat)
                        .max_by(|(ia, a), (ib, b)| a.mask.area().cmp(&b.mask.area()).then_with(|| ib.cmp(ia)))
                        .expect("category present");
                    (*idx, AssignedBy::Cooccurrence)
                }),
        };
        match target {
            Some((idx, how)) => {
                let pos = position(idx);
                garments[pos].sub_level.push(GarmentPart {
                    name: part.category.clone(),
                    attributes: part.attributes.clone(),
                    annotation_id: part.id,
                });
                assignments.push((part.id, pos, how));
            }
            None => unassigned.push(UnassignedPart {
                image_id: img.image_id,
                annotation_id: part.id,
                category: part.category.clone(),
            }),
        }
    }
    Ok(ImageHierarchy {
        image_id: img.image_id,
        garments,
        assignments,
        unassigned,
        dropped,
    })
}
