//! Config files, pipeline commands and sweeps.

mod commands;
mod config;
mod sweep;

pub use commands::{
    cmd_attack, cmd_eval, cmd_report, cmd_synth, cmd_train, load_dataset, write_resolved_config, TrainArtifacts,
    Workspace,
};
pub use config::{
    parse_config, parse_config_verbose, Arch, AttackSection, DatasetSection, ExperimentConfig, ModelSection,
    Overrides, Parsed,
};
pub use sweep::{
    cmd_sweep, ensure_checkpoint, ensure_dataset, Axis, Cell, CellDelta, CellResult, SweepOutcome, SweepPlan,
};
