//! Experiment orchestration: configuration, seeded runs, persistence,
//! evaluation across randomization tiers, latent export, plots and
//! comparison grids.

mod compare;
mod config;
mod eval;
mod latents;
mod plot;
mod run;

pub use compare::{compare, discover_runs, Cell, Grid, COLUMN_ORDER};
pub use config::{Budget, EnvConfig, ExperimentConfig, HighDimConfig};
pub use eval::{eval_episode, eval_stream, evaluate, mean_std, EvalReport, TierStats};
pub use latents::{canonical_correlations, collect_latents, export_latents, fit_linear, pca_2d, pearson, probe, r_squared, LatentTable, ProbeReport};
pub use plot::{bands, bar_svg, curve_svg, emit_plot, read_eval_series, series_label, Band, EvalSeries, PlotKind};
pub use run::{build_learner, build_student, load_teacher, make_env, run_experiment, RunDir, RunOptions, RunOutcome, CKPT_EXT};
