//! The batched inference pipeline: planning, incremental merging of
//! downsampled passes, staged rotation keys and end-to-end execution.

pub mod accumulate;
pub mod exec;
pub mod plan;
pub mod report;

pub use accumulate::{accumulate, accumulator_offsets, block_mask, MemoryBound};
pub use exec::{infer, stage_keys, InferOutput};
pub use plan::{plan, BatchConfig, HeadPlan, Plan, StagePlan, MAX_MERGE};
pub use report::{Amortized, CostReport, StageCost};
