//! Multi-process deployment: one node per modality map, a coordinator that
//! drives them over a framed TCP protocol, and step timing.

mod client;
pub mod coordinator;
pub mod node;
pub mod timing;
pub mod wire;

pub use client::NodeClient;
pub use coordinator::{Coordinator, FanOut, HebbRun, NodeInfo};
pub use node::{serve_node, NodeConfig, NodeServer, PACKET_BYTES_ENV};
pub use timing::{timing_report, StepStats, TimingReport, TimingSamples};
pub use wire::{InitMode, Message};
