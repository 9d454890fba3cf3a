//! Illusion analysis: templates, target sweeps with percentile ranks, NLL
//! heatmaps, min-max patch rankings and Hermann grids.

pub mod heatmap;
pub mod hermann;
pub mod minmax;
pub mod score;
pub mod sweep;
pub mod templates;

pub use heatmap::{nll_heatmap, NllHeatmap, Normalization};
pub use hermann::{intersection_centers, intersection_patches, render_hermann_grid};
pub use minmax::{mean_patch_std, minmax_patches, MinMax, ScoredPatch};
pub use score::{score_patches, window_starts};
pub use sweep::{compare_contexts, percentile_rank, sweep_target, ContextComparison, Direction, TemplateSweep, LEVELS};
pub use templates::{
    make_contrast_template, make_hermann_cross_template, make_whites_template, BarPolarity, ChannelMode, Template,
    TemplateKind, TEMPLATE_SIZE,
};
