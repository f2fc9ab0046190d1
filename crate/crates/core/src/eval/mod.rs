//! Detection, scoring and resource accounting.

mod accounting;
mod cfar;
mod score;

pub use accounting::{
    memory_report, ops_report, BitAssignment, LayerMemory, MemoryReport, OpsReport, KIB,
};
pub use cfar::{
    calibrate_scale, cacfar, closed_form_scale, exceedance_rate, CfarConfig, Detection, DEFAULT_PFA,
};
pub use score::{evaluate_maps, f1_score, match_and_score, match_peaks, F1Report, Score, SeedSummary};
