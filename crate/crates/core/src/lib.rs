//! Treedoc is a replicated ordered sequence whose concurrent inserts and
//! deletes commute. Atoms are named by paths in a binary tree ([`Tid`]s);
//! the infix order of the tree is the document order.
//!
//! On top of the data type this crate provides:
//! - [`flatten`]: rebuilding a tree as a balanced, tombstone-free tree;
//! - [`protocol`]: sites, causal-readiness delivery, the update-wins
//!   two-phase commit for flattening, epochs and nebula catch-up;
//! - [`sim`]: a deterministic discrete-event simulator of many sites;
//! - [`trace`]: revision-history replay and size/latency metrics;
//! - [`bench`]: a synthetic throughput workload.

pub mod bench;
pub mod doc;
pub mod fixtures;
pub mod flatten;
pub mod protocol;
pub mod sim;
pub mod tid;
pub mod trace;

pub use doc::{Atom, Color, DeleteEffect, InsertEffect, NodeRef, NodeSnapshot, Stats, TreeError, Treedoc};
pub use flatten::{build_balanced, flatten_local, FlattenResult};
pub use tid::{compare_tid, PathElement, Side, SiteId, Tid};
