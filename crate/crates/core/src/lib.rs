//! Bucket-based updatable learned index.
//!
//! Keys live in hint-addressed, unsorted D-Buckets; D-Buckets are routed to
//! by Segments, each a linear model over a sorted run of unsorted S-Buckets.
//! One writer and any number of lock-free readers may share an [`Index`].

pub mod bulkload;
pub mod epoch;
pub mod error;
pub mod hints;
pub mod index;
pub mod metrics;
pub mod model;
pub mod node;
pub mod oracle;
pub mod read;
pub mod segmentation;
pub mod stress;
pub mod write;

pub use bulkload::{bulk_load, BulkLoadStats};
pub use error::{Error, Result};
pub use hints::{HintFn, HintKind};
pub use index::{Index, Reader, SmoStats, Upsert};
pub use metrics::{Breakdown, MetricsReport, OpTimer};
pub use model::{range_of, Entry, IndexConfig, Key, KeyRange, LinearModel, Value};
pub use node::{DBucket, InsertOutcome, NodeHandle, NodeKind, SBucket, Segment};
pub use oracle::{differential_check, gen_synthetic, gen_workload, load_keyset, save_keyset, Distribution, Op, Workload};
pub use read::{LookupTrace, RangeStats, Route};
pub use segmentation::{avg_group_error, error_curve, fit_segment_model, greedy_corridor, model_predict_bucket, Corridor, Cut};
