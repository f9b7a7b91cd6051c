//! Image metrics (embedding similarity, SSIM, FID, VQA) and human-study scoring.

pub mod embed;
pub mod fid;
pub mod human;
pub mod report;
pub mod ssim;
pub mod vqa;

pub use embed::{cosine, global_clip, local_clip, ImageEmbedder, LocalClip, ToyEmbedder};
pub use fid::{fid, FidResult};
pub use human::{
    attribute_scores, f1_score, krippendorff_alpha, read_responses, Answer, AttributeScores, EvalResponse, Role,
};
pub use report::{evaluate, human_report, EvalSample, HumanReport, MetricReport, SampleMetrics};
pub use ssim::{ssim, ssim_rgb, Planes};
pub use vqa::{vqa_score, StubVqa, VqaBackend};
