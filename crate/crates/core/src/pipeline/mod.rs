//! End-to-end orchestration: phantom corpus, diffusion training, pair
//! simulation, corrector training, evaluation and reporting.

mod artifacts;
mod config;
mod phantom;
mod report;
mod stages;

pub use artifacts::{sha256_file, verify_stage, FileHash, RunManifest, StageWriter, RUN_MANIFEST};
pub use config::{
    parse_override, ModelSection, RegistrationConfig, ReportConfig, RunConfig, SimulationConfig,
    SplitConfig, ValidationMode,
};
pub use phantom::{
    apply_ghosting, gaussian_blur, generate_phantom, ghost_offsets, PhantomScan, PhantomSpec,
};
pub use report::{emit_report, report_tables, Grouping};
pub use stages::{
    run, Command, CHECKPOINT_FILE, PAIRS_FILE, STAGE_CORRECTOR, STAGE_DDPM, STAGE_EVALUATE,
    STAGE_REPORT, STAGE_SIMULATE,
};
