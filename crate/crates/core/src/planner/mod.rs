//! Reference generation, obstacle sensing, regeneration and the closed loop.

pub mod reference;
pub mod regenerate;
pub mod run;
pub mod world;

pub use reference::{generate_reference, CubicBSpline, ReferenceSample, ReferenceTrajectory};
pub use regenerate::{detour_reference, maybe_regenerate, DetourParams, RegenOutcome, RegenerationConfig, Regenerator};
pub use run::{closed_loop_run, closed_loop_run_with_diagnostics, RunConfig, RunLog, RunSummary, StepRecord, Termination};
pub use world::{random_forest, visible_obstacles, wall_world, Bounds, ForestSpec, WallSpec, WorldModel};
