//! Multi-gateway, multi-antenna LoRa receiver simulation with joint
//! multi-user detection and power control.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod css_phy;
pub mod detector;
pub mod error;
pub mod harness;
pub mod power_control;
pub mod rng;
pub mod stats;

pub use channel::{ChannelRealization, NetworkTopology, TopologyParams};
pub use css_phy::{BinPowerTensor, ChirpFrame, Demodulator, ReceivedFrames, SpreadingConfig};
pub use error::{Error, Result};
