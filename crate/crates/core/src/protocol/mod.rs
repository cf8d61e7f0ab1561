//! Replication protocol: operation envelopes, sites, causal-readiness
//! delivery with duplicate tolerance, the update-wins two-phase commit that
//! guards flattening, and nebula catch-up across epochs.
//!
//! Sites never share state. Everything here is driven by explicit calls
//! ([`Site::submit_local`], [`Site::deliver`], ...) so any transport, real or
//! simulated, can sit on top.

mod catchup;
mod commit;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::doc::{Atom, DeleteEffect, InsertEffect, TreeError, Treedoc};
use crate::flatten::flatten_local;
use crate::tid::{SiteId, Tid};

pub use catchup::{CatchUpReport, ListEntry};
pub use commit::{
    initiate_flatten, AbortReason, CoreEndpoint, Decision, FlattenOutcome, Offline, PrepareMessage, PrepareReply,
    Silent, Vote, VoteDecision,
};

/// Identity of an operation: its origin site and that site's sequence number.
/// Survives TID translation during catch-up.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OpId {
    pub origin: SiteId,
    pub seq: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Insert,
    Delete,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operation {
    pub epoch: u64,
    pub kind: OpKind,
    pub tid: Tid,
    /// Present iff `kind` is `Insert`.
    pub atom: Option<Atom>,
    pub origin: SiteId,
    pub origin_seq: u64,
}

impl Operation {
    pub fn insert(epoch: u64, tid: Tid, atom: Atom, origin: SiteId, origin_seq: u64) -> Self {
        Operation { epoch, kind: OpKind::Insert, tid, atom: Some(atom), origin, origin_seq }
    }

    pub fn delete(epoch: u64, tid: Tid, origin: SiteId, origin_seq: u64) -> Self {
        Operation { epoch, kind: OpKind::Delete, tid, atom: None, origin, origin_seq }
    }

    pub fn id(&self) -> OpId {
        OpId { origin: self.origin.clone(), seq: self.origin_seq }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Core,
    Nebula,
}

/// A local edit request, addressed either by live position or by TID.
#[derive(Clone, Debug)]
pub enum LocalEdit {
    InsertAt { index: usize, atom: Atom },
    InsertTid { tid: Tid, atom: Atom },
    DeleteAt { index: usize },
    DeleteTid { tid: Tid },
}

/// Outcome of delivering a remote operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Delivery {
    Applied,
    /// Not yet causally ready, or held while a flatten is being decided.
    Buffered,
    Duplicate,
    WrongEpoch,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("TID {0} is already allocated")]
    TidInUse(Tid),
    #[error("site is prepared for a flatten and cannot initiate updates")]
    Blocked,
    #[error("operation requires a {expected:?} site")]
    WrongRole { expected: Role },
    #[error("epoch mismatch: expected {expected}, found {found}")]
    EpochMismatch { expected: u64, found: u64 },
    #[error("catch-up invariant violated: {0}")]
    InvariantViolation(String),
    #[error("{0} old-epoch operations are still not causally ready")]
    UnreadyOps(usize),
}

/// Insert is ready once every proper ancestor of its TID exists; delete once
/// its target exists. Operations from another epoch are never ready.
pub fn causal_ready(replica: &Treedoc, op: &Operation) -> bool {
    if op.epoch != replica.epoch() {
        return false;
    }
    match op.kind {
        OpKind::Insert => replica.has_ancestors(&op.tid),
        OpKind::Delete => replica.contains(&op.tid),
    }
}

/// Order-insensitive digest over a set of operation identities.
pub fn op_set_digest<'a>(ids: impl IntoIterator<Item = &'a OpId>) -> String {
    let mut sorted: Vec<&OpId> = ids.into_iter().collect();
    sorted.sort();
    sorted.dedup();
    let mut h = Sha256::new();
    for id in sorted {
        h.update((id.origin.len() as u64).to_le_bytes());
        h.update(id.origin.as_bytes());
        h.update(id.seq.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Per-origin contiguous prefix of seen sequence numbers, plus the stragglers
/// beyond it. A cheap duplicate filter; exactness is not required because
/// every operation is idempotent anyway.
#[derive(Clone, Debug, Default)]
pub struct DeliveredSummary {
    origins: BTreeMap<SiteId, OriginProgress>,
}

#[derive(Clone, Debug, Default)]
struct OriginProgress {
    prefix: u64,
    beyond: BTreeSet<u64>,
}

impl DeliveredSummary {
    pub fn contains(&self, id: &OpId) -> bool {
        self.origins.get(&id.origin).is_some_and(|p| id.seq <= p.prefix || p.beyond.contains(&id.seq))
    }

    pub fn record(&mut self, id: &OpId) {
        let p = self.origins.entry(id.origin.clone()).or_default();
        if id.seq <= p.prefix {
            return;
        }
        p.beyond.insert(id.seq);
        while p.beyond.remove(&(p.prefix + 1)) {
            p.prefix += 1;
        }
    }

    /// Highest contiguous sequence number seen from `origin`.
    pub fn prefix(&self, origin: &SiteId) -> u64 {
        self.origins.get(origin).map_or(0, |p| p.prefix)
    }
}

/// Operations delivered in one epoch.
#[derive(Clone, Debug, Default)]
pub struct EpochLog {
    ops: Vec<Operation>,
    ids: HashSet<OpId>,
}

impl EpochLog {
    fn record(&mut self, op: &Operation) -> bool {
        if self.ids.insert(op.id()) {
            self.ops.push(op.clone());
            true
        } else {
            false
        }
    }

    pub fn contains(&self, id: &OpId) -> bool {
        self.ids.contains(id)
    }

    pub fn ops(&self) -> &[Operation] {
        &self.ops
    }

    pub fn ids(&self) -> &HashSet<OpId> {
        &self.ids
    }

    pub fn digest(&self) -> String {
        op_set_digest(&self.ids)
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

/// One replica plus everything a site needs to replicate it.
#[derive(Clone, Debug)]
pub struct Site {
    id: SiteId,
    role: Role,
    replica: Treedoc,
    next_seq: u64,
    pending: Vec<Operation>,
    outbox: Vec<Operation>,
    summary: DeliveredSummary,
    log: EpochLog,
    /// Logs of closed epochs, kept so core sites can serve catch-up.
    archive: BTreeMap<u64, EpochLog>,
    /// Operations from epochs this site has already left.
    stale: Vec<Operation>,
    /// Operations from epochs this site has not reached yet.
    future: BTreeMap<u64, Vec<Operation>>,
    prepared: Option<u64>,
    /// Same-epoch operations that arrived while prepared.
    held: Vec<Operation>,
    /// Operations recorded since the last [`Site::take_recorded`].
    recorded: Vec<Operation>,
}

impl Site {
    pub fn new(id: SiteId, role: Role) -> Self {
        Site {
            id,
            role,
            replica: Treedoc::new(),
            next_seq: 0,
            pending: Vec::new(),
            outbox: Vec::new(),
            summary: DeliveredSummary::default(),
            log: EpochLog::default(),
            archive: BTreeMap::new(),
            stale: Vec::new(),
            future: BTreeMap::new(),
            prepared: None,
            held: Vec::new(),
            recorded: Vec::new(),
        }
    }

    pub fn id(&self) -> &SiteId {
        &self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn replica(&self) -> &Treedoc {
        &self.replica
    }

    pub fn epoch(&self) -> u64 {
        self.replica.epoch()
    }

    pub fn pending(&self) -> &[Operation] {
        &self.pending
    }

    pub fn outbox(&self) -> &[Operation] {
        &self.outbox
    }

    /// Removes and returns everything waiting for dispatch.
    pub fn take_outbox(&mut self) -> Vec<Operation> {
        std::mem::take(&mut self.outbox)
    }

    pub fn summary(&self) -> &DeliveredSummary {
        &self.summary
    }

    pub fn log(&self) -> &EpochLog {
        &self.log
    }

    pub fn archived_log(&self, epoch: u64) -> Option<&EpochLog> {
        self.archive.get(&epoch)
    }

    pub fn stale(&self) -> &[Operation] {
        &self.stale
    }

    pub fn future_len(&self) -> usize {
        self.future.values().map(Vec::len).sum()
    }

    pub fn held(&self) -> &[Operation] {
        &self.held
    }

    pub fn is_prepared(&self) -> bool {
        self.prepared.is_some()
    }

    /// Remote operations newly recorded in the current epoch since the last
    /// call, including ones released from the pending buffer.
    pub fn take_recorded(&mut self) -> Vec<Operation> {
        std::mem::take(&mut self.recorded)
    }

    /// Executes a local edit, stamps it and queues it for dispatch.
    pub fn submit_local(&mut self, edit: LocalEdit) -> Result<Operation, ProtocolError> {
        if self.prepared.is_some() {
            return Err(ProtocolError::Blocked);
        }
        let epoch = self.epoch();
        let seq = self.next_seq + 1;
        let op = match edit {
            LocalEdit::InsertAt { index, atom } => {
                let tid = self.replica.alloc_tid_at_position(index, &self.id)?;
                Operation::insert(epoch, tid, atom, self.id.clone(), seq)
            }
            LocalEdit::InsertTid { tid, atom } => {
                if self.replica.contains(&tid) {
                    return Err(ProtocolError::TidInUse(tid));
                }
                Operation::insert(epoch, tid, atom, self.id.clone(), seq)
            }
            LocalEdit::DeleteAt { index } => {
                let tid = self
                    .replica
                    .tid_at(index)
                    .ok_or(TreeError::IndexOutOfRange { index, len: self.replica.len() })?;
                Operation::delete(epoch, tid, self.id.clone(), seq)
            }
            LocalEdit::DeleteTid { tid } => Operation::delete(epoch, tid, self.id.clone(), seq),
        };
        self.apply(&op)?;
        self.next_seq = seq;
        self.log.record(&op);
        self.summary.record(&op.id());
        self.outbox.push(op.clone());
        Ok(op)
    }

    pub fn insert_at(&mut self, index: usize, atom: impl Into<Atom>) -> Result<Operation, ProtocolError> {
        self.submit_local(LocalEdit::InsertAt { index, atom: atom.into() })
    }

    pub fn delete_at(&mut self, index: usize) -> Result<Operation, ProtocolError> {
        self.submit_local(LocalEdit::DeleteAt { index })
    }

    /// Delivers a remote operation.
    pub fn deliver(&mut self, op: Operation) -> Delivery {
        let epoch = self.epoch();
        if op.epoch < epoch {
            self.stale.push(op);
            return Delivery::WrongEpoch;
        }
        if op.epoch > epoch {
            self.future.entry(op.epoch).or_default().push(op);
            return Delivery::WrongEpoch;
        }
        let id = op.id();
        if self.log.contains(&id) || self.summary.contains(&id) {
            return Delivery::Duplicate;
        }
        if self.prepared.is_some() {
            if self.held.iter().any(|h| h.id() == id) {
                return Delivery::Duplicate;
            }
            self.held.push(op);
            return Delivery::Buffered;
        }
        if self.pending.iter().any(|p| p.id() == id) {
            return Delivery::Duplicate;
        }
        if !causal_ready(&self.replica, &op) {
            self.pending.push(op);
            return Delivery::Buffered;
        }
        let changed = self.apply_remote(op);
        self.drain_pending();
        if changed {
            Delivery::Applied
        } else {
            Delivery::Duplicate
        }
    }

    fn apply(&mut self, op: &Operation) -> Result<bool, ProtocolError> {
        Ok(match op.kind {
            OpKind::Insert => {
                let atom = op.atom.clone().unwrap_or_default();
                self.replica.insert(&op.tid, atom)? == InsertEffect::Applied
            }
            OpKind::Delete => self.replica.delete(&op.tid)? == DeleteEffect::Applied,
        })
    }

    /// Applies a causally ready remote operation and records its identity.
    /// Returns whether the replica changed.
    fn apply_remote(&mut self, op: Operation) -> bool {
        let changed = self.apply(&op).expect("operation was checked to be causally ready");
        self.summary.record(&op.id());
        if self.log.record(&op) {
            self.recorded.push(op);
        }
        changed
    }

    fn drain_pending(&mut self) {
        loop {
            let Some(pos) = self.pending.iter().position(|op| causal_ready(&self.replica, op)) else {
                return;
            };
            let op = self.pending.swap_remove(pos);
            self.apply_remote(op);
        }
    }

    /// Moves to `new_epoch` with `replica`, archiving the closed epoch's log,
    /// and replays whatever was already received for the new epoch.
    fn enter_epoch(&mut self, replica: Treedoc, log: EpochLog) {
        let old_epoch = self.epoch();
        let old_log = std::mem::replace(&mut self.log, log);
        self.archive.insert(old_epoch, old_log);
        self.replica = replica;
        self.prepared = None;
        let new_epoch = self.epoch();
        self.stale.append(&mut self.held);
        let early = self.future.remove(&new_epoch).unwrap_or_default();
        self.future.retain(|&e, _| e > new_epoch);
        for op in early {
            self.deliver(op);
        }
    }

    /// Runs a committed flatten locally.
    pub fn commit_flatten(&mut self, new_epoch: u64) -> Result<(), ProtocolError> {
        if new_epoch != self.epoch() + 1 {
            return Err(ProtocolError::EpochMismatch { expected: self.epoch() + 1, found: new_epoch });
        }
        let flattened = flatten_local(&self.replica).new_doc;
        self.enter_epoch(flattened, EpochLog::default());
        Ok(())
    }

    /// Leaves the prepared state after an aborted flatten and delivers what
    /// was held meanwhile.
    pub fn abort_flatten(&mut self) {
        self.prepared = None;
        for op in std::mem::take(&mut self.held) {
            self.deliver(op);
        }
    }
}
