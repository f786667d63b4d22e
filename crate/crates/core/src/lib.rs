//! Adaptive indexing for an in-memory column store, with the latching needed
//! to let concurrent read-only queries refine shared indexes.
//!
//! * [`CrackerIndex`] and [`cracking`]: database cracking on an aligned
//!   values/row-id array pair with an ordered table of contents.
//! * [`MergeIndex`]: adaptive merging and the hybrid crack-sort variant.
//! * [`LatchTable`]: column, piece, partition and registry latches with
//!   bound-sorted writer queues.
//! * [`engine`]: query operators (scan, full sort, crack, merge) and
//!   per-client sessions that record wait and refinement time.
//! * [`workload`]: deterministic data and query generation, multi-client
//!   experiments and oracle verification.

pub mod column;
pub mod cracking;
pub mod engine;
pub mod error;
pub mod index;
pub mod latch;
pub mod merging;
pub mod query;
pub mod toc;
pub mod workload;

pub type Key = i64;
pub type RowId = u32;
pub type Offset = usize;

pub use column::{Column, ColumnId};
pub use cracking::{BoundSide, CrackBound};
pub use engine::{
    build_sorted_index, run_client, scan_query, sorted_query, Engine, ExecOptions, Latching, Method,
    Policy, QueryMetrics, Session, SortedIndex,
};
pub use error::{Error, Result};
pub use index::{CrackerIndex, PieceWalk};
pub use latch::{
    acquire_range_shared, redetermine, Acquired, Grant, GrantSet, LatchMode, LatchStatsSnapshot,
    LatchTable, LatchTarget, Redetermined,
};
pub use merging::{CoveredSet, FinalPartition, MergeIndex, MergeMode, PartitionId, Refinement};
pub use query::{Aggregate, Query};
pub use toc::{Boundary, Inclusivity, Location, Piece, PositionRange, TableOfContents};
pub use workload::{
    generate_column, generate_queries, run_experiment, verify, Experiment, ExperimentConfig,
    ExperimentResult, VerifyReport,
};
