//! Over-the-air federated learning in massive MIMO: channel and aggregation
//! simulation, estimation bounds, and a federated training engine.

pub mod bounds;
pub mod channel;
pub mod data;
pub mod fl;
pub mod harness;
pub mod numerics;
pub mod phy;
