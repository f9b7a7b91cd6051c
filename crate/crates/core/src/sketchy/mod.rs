//! Dataset builder: garment hierarchies from segmentation overlap, localized
//! sketches, garment descriptions and square-canvas preprocessing.

pub mod annotation;
pub mod builder;
pub mod describe;
pub mod fixture;
pub mod hierarchy;
pub mod manifest;
pub mod preprocess;
pub mod sketch_gen;
pub mod taxonomy;

pub use annotation::{AnnotationSet, BBox, ImageAnnotations, Mask};
pub use builder::{BuildOptions, BuildReport, DatasetBuilder};
pub use describe::{
    Description, DescriptionBackend, DescriptionSource, HttpChatTransport, LlmBackend, TemplateBackend,
};
pub use hierarchy::{assign_parts, CooccurrenceTable, GarmentHierarchy, GarmentPart, ImageHierarchy};
pub use manifest::{build_manifest, DatasetRecord, DatasetStats, GarmentRecord, Manifest};
pub use preprocess::{preprocess_image, Letterbox, CANVAS};
pub use sketch_gen::{compose_global_sketch, generate_local_sketch, EdgeSketcher, ExternalSketcher, SketchBackend};
pub use taxonomy::{Level, Taxonomy};
