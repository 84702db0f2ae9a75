//! Yes/no probing and caption scoring on the planted world, plus ablations,
//! sweeps and the report formats the CLI writes.

mod config;
mod eval;
mod metrics;
mod probes;

pub use config::{HarnessConfig, SweepGrid, DEFAULT_CAPTION_THRESHOLD, DEFAULT_TOP_K};
pub use eval::{
    ablation_configs, derive_seed, grid_configs, run_ablation, run_eval, run_sweep, sensitivity_asymmetry,
    summary_rows, unix_now, write_csv, AblationRow, AblationTable, Benchmark, EvalReport, ProbeOutcome,
    SensitivityReport, StrategyResult, SummaryRow,
};
pub use metrics::{chair_metrics, f1_score, score_binary, BinaryMetrics, ChairMetrics};
pub use probes::{gen_probes, negative_candidates, object_frequency, Probe, ProbeSet, Strategy};

/// Version stamped on every JSON document the harness writes.
pub const SCHEMA_VERSION: u32 = 1;
