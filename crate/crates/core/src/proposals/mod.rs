//! Selective search: hierarchical grouping of superpixels into object proposals.

pub mod cache;
mod grouping;
mod region;

pub use crate::data::BoundingBox;
pub use grouping::{
    filter_and_dedup, hierarchical_group, hierarchical_group_traced, selective_search, GroupingTrace,
    ProposalSet,
};
pub use region::{
    color_bins, init_regions, merge, similarity, texture_bins, Region, COLOR_HIST_LEN, TEXTURE_HIST_LEN,
};

/// Default minimum box side for 96x96 inputs.
pub const DEFAULT_MIN_BOX_SIDE: usize = 16;
