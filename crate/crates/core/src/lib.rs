//! Hierarchical key management for trusted-relay QKD networks.
//!
//! The model has four kinds of entity. Each QKD link has two local KMSs,
//! one per endpoint, holding synchronized key pools. Each node has one
//! virtual KMS (vKMS) that fronts its applications. A single controller
//! (QuSeC) computes relay paths and installs relay rules. Applications
//! consume the keys.
//!
//! [`harness`] drives scenarios through [`network::Network`] and checks the
//! resulting message traces.

pub mod actor;
pub mod harness;
pub mod ids;
pub mod kms;
pub mod linksim;
pub mod network;
pub mod octets;
pub mod protocol;
pub mod qusec;
pub mod topology;
pub mod vkms;

pub use ids::{AppId, AssociationId, EntityName, KeyId, KmsId, LinkId, NodeId};
pub use network::{Network, NetworkConfig, Outcome};
pub use octets::Octets;
pub use protocol::{Envelope, Message, Status};
pub use topology::{load_topology, Topology, TopologyError, WeightPolicy};
