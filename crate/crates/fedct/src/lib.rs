//! Desk-scale simulator and library for federated low-dose CT reconstruction.
//!
//! The pipeline: fan-beam CT physics produce per-client low-dose/reference
//! image pairs under heterogeneous scanning protocols; a shared encoder with
//! protocol- and anatomy-conditioned hypernetwork modulation and per-client
//! decoders is trained federatedly; a protocol codebook routes unseen
//! scanners to the nearest trained client by code similarity.

pub mod autodiff;
pub mod codebook;
pub mod ctphys;
pub mod objective;
pub mod federation;
pub mod gradcheck;
pub mod model;
pub mod phantom;
pub mod report;
pub mod protocol;

pub use protocol::{
    builtin_known_protocols, builtin_unseen_protocols, normalize_protocol, protocol_stats,
    MinMaxStats, NormalizedProtocol, Protocol,
};
