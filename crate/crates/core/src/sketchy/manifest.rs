use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::annotation::BBox;
use super::describe::DescriptionSource;
use super::hierarchy::GarmentPart;
use crate::diffusion::TrainingSample;
use crate::error::{Error, Result};
use crate::pair_codec::{ConditionPair, SketchMap, TextPrompt};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MAX_GARMENTS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GarmentRecord {
    pub annotation_id: u64,
    pub category: String,
    pub attributes: Vec<String>,
    pub parts: Vec<GarmentPart>,
    pub description: String,
    pub description_source: DescriptionSource,
    /// Paths are relative to the manifest directory.
    pub sketch: String,
    pub mask: String,
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: u64,
    pub source_file: String,
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub garments: Vec<GarmentRecord>,
    pub global_sketch: String,
    pub unassigned_parts: usize,
    pub dropped_parts: usize,
}

impl DatasetRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.garments.len();
        if n == 0 {
            return Err("no garments".into());
        }
        if n > MAX_GARMENTS {
            return Err(format!("{n} garments (max {MAX_GARMENTS})"));
        }
        if let Some(g) = self.garments.iter().find(|g| g.description.trim().is_empty()) {
            return Err(format!("garment {} has an empty description", g.annotation_id));
        }
        Ok(())
    }

    /// Reads the image and garment sketches back as a training example.
    pub fn training_sample(&self, root: &Path, global_text: &str, size: usize) -> Result<TrainingSample> {
        let img = image::open(root.join(&self.image))?.to_rgb8();
        let pairs = self
            .garments
            .iter()
            .map(|g| {
                let sketch = SketchMap::load_png(&root.join(&g.sketch))?;
                ConditionPair::new(sketch, TextPrompt::local(g.description.clone())?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingSample::from_rgb(&img, pairs, TextPrompt::global(global_text), size))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub image_id: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub records: Vec<DatasetRecord>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Unsupported(format!("manifest schema version {}", m.schema_version)));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: usize,
    pub garments: usize,
    pub mean_garments_per_image: f64,
    pub min_garments: usize,
    pub max_garments: usize,
    pub garment_histogram: BTreeMap<usize, usize>,
    pub mean_description_words: f64,
    pub fallback_descriptions: usize,
    pub unassigned_parts: usize,
    pub dropped_parts: usize,
    pub rejected: Vec<Rejection>,
}

/// Validates records, orders them by image id and summarizes the corpus.
pub fn build_manifest(records: Vec<DatasetRecord>, mut rejected: Vec<Rejection>) -> (Manifest, DatasetStats) {
    let mut kept = Vec::new();
    for r in records {
        match r.validate() {
            Ok(()) => kept.push(r),
            Err(reason) => {
                log::warn!("rejecting image {}: {reason}", r.image_id);
                rejected.push(Rejection {
                    image_id: r.image_id,
                    reason,
                });
            }
        }
    }
    kept.sort_by_key(|r| r.image_id);
    rejected.sort_by_key(|r| r.image_id);

    let counts: Vec<usize> = kept.iter().map(|r| r.garments.len()).collect();
    let garments: usize = counts.iter().sum();
    let mut garment_histogram = BTreeMap::new();
    for &c in &counts {
        *garment_histogram.entry(c).or_insert(0) += 1;
    }
    let words: usize = kept
        .iter()
        .flat_map(|r| &r.garments)
        .map(|g| g.description.split_whitespace().count())
        .sum();
    let mean = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let stats = DatasetStats {
        images: kept.len(),
        garments,
        mean_garments_per_image: mean(garments, kept.len()),
        min_garments: counts.iter().copied().min().unwrap_or(0),
        max_garments: counts.iter().copied().max().unwrap_or(0),
        garment_histogram,
        mean_description_words: mean(words, garments),
        fallback_descriptions: kept
            .iter()
            .flat_map(|r| &r.garments)
            .filter(|g| g.description_source == DescriptionSource::TemplateFallback)
            .count(),
        unassigned_parts: kept.iter().map(|r| r.unassigned_parts).sum(),
        dropped_parts: kept.iter().map(|r| r.dropped_parts).sum(),
        rejected,
    };
    (
        Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            records: kept,
        },
        stats,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn garment(id: u64, desc: &str) -> GarmentRecord {
        GarmentRecord {
            annotation_id: id,
            category: "coat".into(),
            attributes: vec!["long".into()],
            parts: vec![],
            description: desc.into(),
            description_source: DescriptionSource::Template,
            sketch: format!("sketches/{id}.png"),
            mask: format!("masks/{id}.png"),
            bbox: Some(BBox { x0: 1, y0: 2, x1: 3, y1: 4 }),
        }
    }

    fn record(id: u64, n: usize) -> DatasetRecord {
        DatasetRecord {
            image_id: id,
            source_file: format!("{id}.jpg"),
            image: format!("images/{id}.png"),
            width: 512,
            height: 512,
            garments: (0..n as u64).map(|g| garment(id * 10 + g, "A long coat")).collect(),
            global_sketch: format!("global/{id}.png"),
            unassigned_parts: 0,
            dropped_parts: 0,
        }
    }

    #[test]
    fn ten_images_seventeen_garments() {
        let counts = [1, 2, 2, 1, 3, 1, 2, 2, 2, 1];
        assert_eq!(counts.iter().sum::<usize>(), 17);
        let recs = counts.iter().enumerate().map(|(i, &n)| record(i as u64, n)).collect();
        let (m, s) = build_manifest(recs, vec![]);
        assert_eq!(m.records.len(), 10);
        assert_eq!(s.garments, 17);
        assert!((s.mean_garments_per_image - 1.7).abs() < 1e-12);
        assert_eq!((s.min_garments, s.max_garments), (1, 3));
        assert!((s.mean_description_words - 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_corpus() {
        let (m, s) = build_manifest(vec![], vec![]);
        assert!(m.records.is_empty());
        assert_eq!((s.images, s.garments, s.mean_garments_per_image), (0, 0, 0.0));
        assert_eq!(s.mean_description_words, 0.0);
    }

    #[test]
    fn seven_garments_rejected() {
        let (m, s) = build_manifest(vec![record(1, 7), record(2, 6), record(3, 0)], vec![]);
        assert_eq!(m.records.len(), 1);
        assert_eq!(s.rejected.len(), 2);
        assert_eq!(s.rejected[0].image_id, 1);
        let mut bad = record(4, 1);
        bad.garments[0].description = " ".into();
        assert_eq!(build_manifest(vec![bad], vec![]).1.rejected.len(), 1);
    }

    proptest! {
        #[test]
        fn write_read_round_trip(counts in proptest::collection::vec(1usize..=6, 0..8)) {
            let recs = counts.iter().enumerate().map(|(i, &n)| record(i as u64, n)).collect();
            let (m, _) = build_manifest(recs, vec![]);
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("manifest.json");
            m.write(&p).unwrap();
            prop_assert_eq!(Manifest::read(&p).unwrap(), m);
        }
    }
}
