//! Deterministic slot-level simulator for distributed TDMA link scheduling
//! in multi-transmit-receive (MTR) wireless mesh networks, with reference
//! schedulers and an exact small-instance oracle for comparison.

pub mod baselines;
pub mod protocol;
pub mod schedule;
pub mod simengine;
pub mod topology;

pub use protocol::{DuplicatePropMode, Message, MessageKind, Payload};
pub use schedule::{Registry, ScheduleError, SlotIndex, Superframe};
pub use simengine::{Engine, InitialPeriodPolicy, Metrics, SimConfig, SimError, SimTrace};
pub use topology::{Link, MeshNode, NodeId, Topology, TopologyError};
