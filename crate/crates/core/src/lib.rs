//! Learning object shape hierarchies from occupancy-grid maps of a changing
//! environment.
//!
//! Maps recorded at different times are differenced to extract snapshots of
//! movable objects. A two-level model (class templates, physical objects) is
//! then fit with Generalized EM, and the number of objects and templates is
//! chosen by a penalized likelihood search.

pub mod commands;
pub mod config;
pub mod em;
pub mod error;
pub mod grid;
pub mod io;
pub mod model;
pub mod segmentation;
pub mod selection;
pub mod synth;

pub use em::{anneal, init_random, run_em, run_em_flat, run_em_from, EMConfig, EMTrace, EmRun, PoseGrid};
pub use error::{Error, Result};
pub use grid::{grid_sse, transform_grid, Dims, OccupancyGrid, Pose};
pub use model::{expected_complete_loglik, penalized_objective, Expectations, HierModel};
pub use segmentation::{extract_snapshots, Dataset, SegmentationParams, Snapshot};
pub use selection::{candidate_bounds, flat_baseline, holdout_loglik, select_model, SelectionConfig, SelectionResult};
pub use synth::{gen_scenario, ground_truth_score, render_maps, GeneratorSpec, Scenario};

/// The guide's chapters, compiled so their snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/grids.md")]
    struct Grids;
    #[doc = include_str!("../../../book/src/segmentation.md")]
    struct Segmentation;
    #[doc = include_str!("../../../book/src/hierarchy.md")]
    struct Hierarchy;
    #[doc = include_str!("../../../book/src/fitting.md")]
    struct Fitting;
    #[doc = include_str!("../../../book/src/selection.md")]
    struct Selection;
    #[doc = include_str!("../../../book/src/synthetic.md")]
    struct Synthetic;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
