use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::annotation::{AnnotationSet, ImageAnnotations, SkippedAnnotation};
use super::describe::DescriptionBackend;
use super::hierarchy::{assign_parts, CooccurrenceTable};
use super::manifest::{build_manifest, DatasetRecord, DatasetStats, GarmentRecord, Manifest, Rejection, MAX_GARMENTS};
use super::preprocess::{Letterbox, CANVAS};
use super::sketch_gen::{compose_global_sketch, generate_local_sketch, SketchBackend};
use super::taxonomy::Taxonomy;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Context kept around each garment before sketching, in source pixels.
    pub margin: usize,
    pub canvas: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            margin: 8,
            canvas: CANVAS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuildReport {
    pub manifest: Manifest,
    pub stats: DatasetStats,
    pub skipped_annotations: Vec<SkippedAnnotation>,
    pub cooccurrence: CooccurrenceTable,
}

pub struct DatasetBuilder<'a> {
    pub taxonomy: &'a Taxonomy,
    pub describer: &'a dyn DescriptionBackend,
    pub sketcher: &'a dyn SketchBackend,
    pub options: BuildOptions,
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

impl DatasetBuilder<'_> {
    /// Processes every image (in parallel), writes PNGs under `out`, and
    /// writes `manifest.json`, `stats.json` and `cooccurrence.json`.
    pub fn build(&self, annotations: &AnnotationSet, images_dir: &Path, out: &Path) -> Result<BuildReport> {
        for sub in ["images", "sketches", "masks", "global"] {
            ensure_dir(&out.join(sub))?;
        }
        let cooc = CooccurrenceTable::from_annotations(annotations, self.taxonomy)?;
        let results: Vec<Result<std::result::Result<DatasetRecord, Rejection>>> = annotations
            .images
            .par_iter()
            .map(|img| self.process(img, images_dir, out, &cooc))
            .collect();
        let mut records = Vec::new();
        let mut rejected = Vec::new();
        for r in results {
            match r? {
                Ok(rec) => records.push(rec),
                Err(rej) => {
                    log::warn!("rejecting image {}: {}", rej.image_id, rej.reason);
                    rejected.push(rej);
                }
            }
        }
        let (manifest, stats) = build_manifest(records, rejected);
        manifest.write(&out.join("manifest.json"))?;
        let stats_path = out.join("stats.json");
        std::fs::write(&stats_path, serde_json::to_string_pretty(&stats)?).map_err(|e| Error::io(&stats_path, e))?;
        let cooc_path = out.join("cooccurrence.json");
        std::fs::write(&cooc_path, serde_json::to_string_pretty(&cooc)?).map_err(|e| Error::io(&cooc_path, e))?;
        Ok(BuildReport {
            manifest,
            stats,
            skipped_annotations: annotations.skipped.clone(),
            cooccurrence: cooc,
        })
    }

    /// `Ok(Err(_))` is a per-image rejection; `Err(_)` aborts the build.
    fn process(
        &self,
        ann: &ImageAnnotations,
        images_dir: &Path,
        out: &Path,
        cooc: &CooccurrenceTable,
    ) -> Result<std::result::Result<DatasetRecord, Rejection>> {
        let reject = |reason: String| {
            Ok(Err(Rejection {
                image_id: ann.image_id,
                reason,
            }))
        };
        let hierarchy = assign_parts(ann, self.taxonomy, cooc)?;
        let garments: Vec<_> = hierarchy
            .garments
            .iter()
            .filter(|g| {
                let empty = ann.items[g.item_index].mask.is_empty();
                if empty {
                    log::warn!("image {}: garment {} has an empty mask", ann.image_id, g.annotation_id);
                }
                !empty
            })
            .collect();
        if garments.is_empty() {
            return reject("no garments".into());
        }
        if garments.len() > MAX_GARMENTS {
            return reject(format!("{} garments (max {MAX_GARMENTS})", garments.len()));
        }
        let src: PathBuf = images_dir.join(&ann.file_name);
        let image = match image::open(&src) {
            Ok(i) => i.to_rgb8(),
            Err(e) => return reject(format!("cannot read {}: {e}", src.display())),
        };
        if (image.width() as usize, image.height() as usize) != (ann.width, ann.height) {
            return reject(format!(
                "image is {}x{}, annotations say {}x{}",
                image.width(),
                image.height(),
                ann.width,
                ann.height
            ));
        }
        let lb = Letterbox::new(ann.width, ann.height, self.options.canvas)?;
        let id = ann.image_id;
        let mut records = Vec::new();
        let mut sketches = Vec::new();
        for (k, g) in garments.iter().enumerate() {
            let mask = &ann.items[g.item_index].mask;
            let local = generate_local_sketch(&image, mask, self.sketcher, self.options.margin)?;
            let sketch = lb.apply_sketch(&local)?;
            let canvas_mask = lb.apply_mask(mask)?;
            let desc = self.describer.describe(g)?;
            let sketch_rel = format!("sketches/{id}_{k}.png");
            let mask_rel = format!("masks/{id}_{k}.png");
            sketch.save_png(&out.join(&sketch_rel))?;
            canvas_mask.to_gray_image().save(out.join(&mask_rel))?;
            records.push(GarmentRecord {
                annotation_id: g.annotation_id,
                category: g.category.clone(),
                attributes: g.top_level.clone(),
                parts: g.sub_level.clone(),
                description: desc.text,
                description_source: desc.source,
                sketch: sketch_rel,
                mask: mask_rel,
                bbox: canvas_mask.bbox(),
            });
            sketches.push(sketch);
        }
        let global = compose_global_sketch(&sketches)?;
        let global_rel = format!("global/{id}.png");
        global.save_png(&out.join(&global_rel))?;
        let image_rel = format!("images/{id}.png");
        lb.apply_rgb(&image)?.save(out.join(&image_rel))?;
        Ok(Ok(DatasetRecord {
            image_id: id,
            source_file: ann.file_name.clone(),
            image: image_rel,
            width: self.options.canvas,
            height: self.options.canvas,
            garments: records,
            global_sketch: global_rel,
            unassigned_parts: hierarchy.unassigned.len(),
            dropped_parts: hierarchy.dropped,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pair_codec::SketchMap;
    use crate::sketchy::describe::TemplateBackend;
    use crate::sketchy::fixture::{write_fixture, FixtureSpec};
    use crate::sketchy::sketch_gen::EdgeSketcher;

    #[test]
    fn fixture_builds_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        let out = dir.path().join("out");
        let counts = vec![1, 2, 2, 1, 3, 1, 2, 2, 2, 1, 7];
        write_fixture(&src, &FixtureSpec::new(counts, 11)).unwrap();
        let taxonomy = Taxonomy::default();
        let ann = AnnotationSet::load(&src.join("annotations.json"), &taxonomy).unwrap();
        let b = DatasetBuilder {
            taxonomy: &taxonomy,
            describer: &TemplateBackend,
            sketcher: &EdgeSketcher { input_size: 64 },
            options: BuildOptions {
                margin: 8,
                canvas: 128,
            },
        };
        let report = b.build(&ann, &src.join("images"), &out).unwrap();
        assert_eq!(report.stats.images, 10);
        assert_eq!(report.stats.garments, 17);
        assert!((report.stats.mean_garments_per_image - 1.7).abs() < 1e-12);
        assert_eq!(report.stats.rejected.len(), 1);
        assert_eq!(report.stats.rejected[0].image_id, 11);

        let m = Manifest::read(&out.join("manifest.json")).unwrap();
        assert_eq!(m, report.manifest);
        let ids: Vec<u64> = m.records.iter().map(|r| r.image_id).collect();
        assert_eq!(ids, (1..=10).collect::<Vec<_>>());
        for r in &m.records {
            let img = image::open(out.join(&r.image)).unwrap();
            assert_eq!((img.width(), img.height()), (128, 128));
            let sketches: Vec<SketchMap> = r
                .garments
                .iter()
                .map(|g| SketchMap::load_png(&out.join(&g.sketch)).unwrap())
                .collect();
            let global = SketchMap::load_png(&out.join(&r.global_sketch)).unwrap();
            assert_eq!(global, compose_global_sketch(&sketches).unwrap());
            assert!(r.garments.iter().all(|g| !g.description.is_empty()));
        }
    }

    #[test]
    fn missing_image_is_rejected_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        write_fixture(&src, &FixtureSpec::new(vec![1, 1], 2)).unwrap();
        std::fs::remove_file(src.join("images/0002.png")).unwrap();
        let taxonomy = Taxonomy::default();
        let ann = AnnotationSet::load(&src.join("annotations.json"), &taxonomy).unwrap();
        let b = DatasetBuilder {
            taxonomy: &taxonomy,
            describer: &TemplateBackend,
            sketcher: &EdgeSketcher { input_size: 32 },
            options: BuildOptions::default(),
        };
        let report = b.build(&ann, &src.join("images"), &dir.path().join("out")).unwrap();
        assert_eq!(report.manifest.records.len(), 1);
        assert_eq!(report.stats.rejected[0].image_id, 2);
    }
}
