//! Channel simulation and channel-statistics toolkit for rain sensing with
//! OFDM channel state information.

pub mod config;
pub mod csi;
pub mod dataio;
pub mod dataset;
pub mod error;
pub mod mpc;
pub mod sim;

pub use config::{ChannelConfig, Condition, RainLabel, RainScenario, SimulationPlan};
pub use csi::{ComplexGrid, CsiSnapshot, PdpFrame, ReceivedGrid, RssSeries};
pub use dataset::{LabeledDataset, PdpMatrix, Record, Split};
pub use error::{Error, Result};
pub use mpc::{MpcSet, PowerLawFit};
pub use sim::{Path, PathKind, PathSet};
