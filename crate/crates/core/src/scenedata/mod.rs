//! Track ingestion, synthetic roundabout traffic and scene windowing.

mod synth;
mod tracks;
mod window;

pub use synth::{
    load_labels, random_specs, simulate, simulate_forked, synth_roundabout, write_labels, AgentSpec,
    InteractionIndex, InteractionLabel, StartPhase, SynthConfig, SynthOutput,
};
pub use tracks::{
    derive_heading_speed, load_tracks, read_tracks, resample, write_tracks, AgentClass, Track, TrackPoint,
};
pub use window::{window_scenes, SceneSample, AGENT_FEATURES, MAX_AGENTS};

pub const FRAME_RATE_HZ: f64 = 5.0;
/// Seconds per frame.
pub const DT: f64 = 1.0 / FRAME_RATE_HZ;
pub const HISTORY_STEPS: usize = 5;

/// Future steps for a horizon in seconds (3 s → 15, 5 s → 25).
pub fn horizon_steps(horizon_s: f64) -> usize {
    (horizon_s * FRAME_RATE_HZ).round() as usize
}
