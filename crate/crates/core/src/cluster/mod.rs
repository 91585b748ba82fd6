//! Sharing one token set between several proxy instances.

pub mod lease;
pub mod node;
pub mod wire;

pub use lease::{bounded_assignment, fingerprint, rendezvous_owner, LeaseTable, Ownership, SharedBudget};
pub use node::{ClusterNode, ClusterSettings};
pub use wire::{Message, WireBudget};
