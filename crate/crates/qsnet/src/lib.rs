//! Multi-domain quantum-safe key distribution, runnable on one machine.
//!
//! The crate wires together emulated QKD links, per-node key-management
//! stores with 004/014-style delivery interfaces, hop-by-hop key relay
//! through trusted nodes, four border-node interconnection methods, and
//! a security-level algebra — all driven by a deterministic virtual-time
//! network simulator so whole deployments replay bit-identically from a
//! seed.

pub mod border;
pub mod config;
pub mod core;
pub mod crypto;
pub mod forwarding;
pub mod kms;
pub mod netsim;
pub mod node;
pub mod qkd_emu;
pub mod report;
pub mod scenario;
pub mod seclevel;
#[doc(hidden)]
pub mod testutil;
