pub mod analysis;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod par;
pub mod phases;
pub mod power;
pub mod sampler;
pub mod sync;
pub mod synth;
pub mod trace;
pub mod warning;
