//! Layer-by-layer conversion of a trained attention encoder into LPA layers:
//! a per-layer difficulty sweep, selective initialization from attention
//! weights, and progressive replacement with a temperature curriculum.

mod init;
mod progressive;
mod schedule;
mod sweep;
mod teacher;
mod train;

pub use init::selective_init;
pub use progressive::{
    alignment_phase, progressive_replace, write_trace_csv, AlignmentOutcome, ConversionConfig,
    ConversionResult, LrRatios, Phase, TraceRow, TRACE_HEADER,
};
pub use schedule::{taus_for, temperature_at, CurriculumSchedule, TauScope};
pub use sweep::{
    count_surviving, elastic_net, eval_elastic_net, mse_sweep, LayerSweep, SweepHyperparams,
    SweepReport, SWEEP_HEADER,
};
pub use teacher::{local_averaging_attention, sharp_attention, toy_teacher, TeacherSpec};
pub use train::{fit_lpa_to_pairs, FitOptions, TapPair};
