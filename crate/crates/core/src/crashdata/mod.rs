//! Synthetic desk-scale crash-analog data: ground-truth simulator, DoE
//! sweep, dataset container, splits, and normalization.

pub mod dataset;
pub mod sim;

pub use dataset::{
    assign_splits, bc_vector, config_hash, doe_configs, generate_doe, generate_sample,
    global_vector, normalize_trajectory, read_dataset, split_counts, write_dataset, Dataset,
    NormStats, Sample, Split, DEFAULT_FRAMES, DEFAULT_FRAME_DT, DEFAULT_SUBSTEPS, OFFSET_LEVELS,
    THICKNESS_LEVELS, VELOCITY_LEVELS,
};
pub use sim::{
    build_lattice, element_count_formula, probe_points, simulate, BeamLattice, DesignConfig,
    Element, EnergyBreakdown, Resolution, SimResult, Wall,
};
