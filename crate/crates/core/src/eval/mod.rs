//! Evaluation lab: linear probes on frozen features, noise-injection sweeps,
//! latent traversals, style swaps and report files.

pub mod noise;
pub mod probe;
pub mod report;
pub mod traverse;

pub use noise::{noise_sweep, perturb, NoiseCell, NoiseEvalConfig, NoiseTable};
pub use probe::{fit_probe, LinearProbe, ProbeConfig};
pub use report::{emit_report, save_grid_png, write_noise_csv, EvalReport};
pub use traverse::{
    reconstruct_one, reencode, style_swap_figure, swap_outcomes, swap_recovery, traversal_class_change, traversal_grid,
    LatentStats, SwapFigure, SwapOutcome, TraversalConfig, TraversalGrid,
};
