//! Corpus-level characterization of detected barriers.

mod align;
mod stats;
mod summary;

pub use align::{
    check_alignments, format_pharaoh, ibm1_em, parse_pharaoh, read_alignments, viterbi_align,
    write_alignments, AlignmentSet, Ibm1, LexTable, Link,
};
pub use stats::{
    exception_rate, inverse_frequency, translation_entropy, GlobalWordStat, StatKind,
    DEFAULT_P0,
};
pub use summary::{
    barrier_rate, cross_run_overlap, dep_recall, overlap_vs_global, pos_distribution,
    random_overlap_baseline, BarrierLabel, BarrierRate, CategoryRow, DepRecall, GlobalOverlap,
    AGNOSTIC_THRESHOLD, DEFAULT_MIN_CONTEXTS, SENSITIVE_THRESHOLD,
};
