//! Conflict statistics, masking detection, memory modelling and significance
//! testing.

pub mod log;
pub mod masking;
pub mod memory;
pub mod permutation;
pub mod stats;

pub use log::{read_event_log, read_masking_log, report_from_rows, stats_from_rows, EventLogWriter, EventRow, MaskingLogWriter};
pub use masking::{detect_masking, MaskingRecord};
pub use memory::{estimate_extra_memory, MemoryEstimate, MemoryModel};
pub use permutation::paired_permutation_test;
pub use stats::{conflict_probability_report, ConflictReport, ConflictStats, GroupKey, ReportRow};
