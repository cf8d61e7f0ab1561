//! Nebula catch-up: bringing a site that missed a flatten into the new epoch
//! and translating its own old-epoch updates into new-epoch operations.
//!
//! Nodes are coloured cyan when the core knew them at the flatten and black
//! otherwise. The cyan nodes that are live for the core are exactly the
//! atoms of the core's flattened tree, so the nebula rebuilds that tree
//! bit-for-bit and then grafts every black subtree back in place:
//!
//! 1. An infix walk over cyan nodes and tombstones builds a list headed by a
//!    sentinel. A cyan node opens a new entry; each black subtree met on the
//!    way is attached to the most recent entry (or to the sentinel).
//! 2. The entries are rebuilt as a balanced tree. Each entry's black
//!    subtrees are grafted, intact and in order, at the free slot right
//!    after the entry, each one after the end of the previous.
//! 3. A pre-order walk of the new tree emits an insert for every black node
//!    and a delete for every black tombstone, carrying the original
//!    operation identities.

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use super::{EpochLog, OpId, OpKind, Operation, ProtocolError, Role, Site};
use crate::doc::{Atom, Color, MiniId, Treedoc};
use crate::flatten::build_into;
use crate::tid::{Side, Tid};

/// One entry of the catch-up list.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ListEntry {
    /// Old TID of the cyan node, `None` for the sentinel.
    pub anchor: Option<Tid>,
    pub atom: Option<Atom>,
    /// Old TIDs of the black subtrees re-attached after this entry.
    pub black_subtrees: Vec<Tid>,
}

#[derive(Clone, Debug)]
pub struct CatchUpReport {
    pub list: Vec<ListEntry>,
    /// Digest of the rebuilt cyan tree before grafting; equals the core's
    /// post-flatten digest.
    pub skeleton_digest: String,
    /// New-epoch operations for the core, parents before children.
    pub emitted: Vec<Operation>,
}

impl Site {
    /// Colours every node: cyan if inserted by an operation in `core_ops` or
    /// present since the start of the epoch, black otherwise; a tombstone is
    /// cyan if any deleting operation is in `core_ops`.
    pub fn mark_colors(&mut self, core_ops: &HashSet<OpId>) -> Result<(), ProtocolError> {
        if self.role != Role::Nebula {
            return Err(ProtocolError::WrongRole { expected: Role::Nebula });
        }
        let ids: Vec<MiniId> = self.replica.nodes().map(|n| n.id()).collect();
        for &id in &ids {
            self.replica.set_colors(id, Color::Cyan, Color::Black);
        }
        let mut node_color = HashMap::new();
        let mut tomb_color = HashMap::new();
        for op in self.log.ops() {
            let Ok(id) = self.replica.resolve(&op.tid) else { continue };
            let core = core_ops.contains(&op.id());
            match op.kind {
                OpKind::Insert if !core => {
                    node_color.insert(id, Color::Black);
                }
                OpKind::Delete if core => {
                    tomb_color.insert(id, Color::Cyan);
                }
                _ => {}
            }
        }
        for id in ids {
            let node = node_color.get(&id).copied().unwrap_or(Color::Cyan);
            let tomb = tomb_color.get(&id).copied().unwrap_or(Color::Black);
            let tombstoned = self.replica.node_ref(id).is_tombstone();
            if node == Color::Black && tombstoned && tomb == Color::Cyan {
                return Err(ProtocolError::InvariantViolation(format!(
                    "black node {} carries a cyan tombstone",
                    self.replica.node_ref(id).tid()
                )));
            }
            self.replica.set_colors(id, node, tomb);
        }
        Ok(())
    }

    /// Catch-up for a nebula site one epoch behind. `core_log` is the core's
    /// complete operation log for the old epoch; its identities are the cyan
    /// set. Returns the operations to send to the core.
    pub fn catch_up(&mut self, core_log: &[Operation], new_epoch: u64) -> Result<Vec<Operation>, ProtocolError> {
        self.catch_up_with_report(core_log, new_epoch).map(|r| r.emitted)
    }

    pub fn catch_up_with_report(
        &mut self,
        core_log: &[Operation],
        new_epoch: u64,
    ) -> Result<CatchUpReport, ProtocolError> {
        if self.role != Role::Nebula {
            return Err(ProtocolError::WrongRole { expected: Role::Nebula });
        }
        let old_epoch = self.epoch();
        if new_epoch != old_epoch + 1 {
            return Err(ProtocolError::EpochMismatch { expected: old_epoch + 1, found: new_epoch });
        }
        if let Some(op) = core_log.iter().find(|op| op.epoch != old_epoch) {
            return Err(ProtocolError::EpochMismatch { expected: old_epoch, found: op.epoch });
        }
        for op in core_log {
            self.deliver(op.clone());
        }
        if !self.pending.is_empty() {
            return Err(ProtocolError::UnreadyOps(self.pending.len()));
        }
        let core_ids: HashSet<OpId> = core_log.iter().map(Operation::id).collect();
        self.mark_colors(&core_ids)?;

        let old = &self.replica;
        let list = build_list(old);
        let (mut new_doc, placed, skeleton_digest) = rebuild(old, &list, new_epoch);
        let emitted = emit(old, &mut new_doc, &placed, self.log.ops(), &core_ids, new_epoch);

        let report = CatchUpReport {
            list: list
                .iter()
                .map(|e| ListEntry {
                    anchor: e.anchor.map(|id| old.tid_of(id)),
                    atom: e.anchor.map(|id| old.node_ref(id).atom().clone()),
                    black_subtrees: e.black.iter().map(|&id| old.tid_of(id)).collect(),
                })
                .collect(),
            skeleton_digest,
            emitted,
        };

        let mut log = EpochLog::default();
        for op in &report.emitted {
            log.record(op);
            self.summary.record(&op.id());
        }
        // untranslated old-epoch operations are superseded by the emission
        self.outbox.retain(|op| op.epoch > old_epoch);
        self.outbox.extend(report.emitted.iter().cloned());
        self.enter_epoch(new_doc, log);
        Ok(report)
    }
}

struct Entry {
    anchor: Option<MiniId>,
    black: Vec<MiniId>,
}

fn is_black(doc: &Treedoc, id: MiniId) -> bool {
    doc.node_ref(id).color() == Color::Black
}

/// Live in the core's view: a cyan node without a cyan tombstone.
fn is_cyan_live(doc: &Treedoc, id: MiniId) -> bool {
    let n = doc.node_ref(id);
    n.color() == Color::Cyan && n.tombstone_color() != Some(Color::Cyan)
}

enum Visit {
    Minis(Vec<MiniId>),
    Cyan(MiniId),
}

/// Step one: infix walk that descends through cyan nodes only and treats
/// every black node it meets as the root of a black subtree.
fn build_list(doc: &Treedoc) -> Vec<Entry> {
    let mut list = vec![Entry { anchor: None, black: Vec::new() }];
    let mut stack = vec![Visit::Minis(doc.root_minis().to_vec())];
    while let Some(visit) = stack.pop() {
        match visit {
            Visit::Minis(minis) => {
                for &m in minis.iter().rev() {
                    if is_black(doc, m) {
                        stack.push(Visit::Cyan(m));
                        continue;
                    }
                    stack.push(Visit::Minis(doc.child_minis(m, Side::Right).to_vec()));
                    stack.push(Visit::Cyan(m));
                    stack.push(Visit::Minis(doc.child_minis(m, Side::Left).to_vec()));
                }
            }
            Visit::Cyan(m) if is_black(doc, m) => {
                list.last_mut().expect("sentinel is always present").black.push(m);
            }
            Visit::Cyan(m) => {
                if is_cyan_live(doc, m) {
                    list.push(Entry { anchor: Some(m), black: Vec::new() });
                }
            }
        }
    }
    list
}

/// Step two: balanced tree over the cyan entries, then each entry's black
/// subtrees grafted after it. Returns the new tree, old-to-new node ids and
/// the digest of the tree before grafting.
fn rebuild(old: &Treedoc, list: &[Entry], new_epoch: u64) -> (Treedoc, HashMap<MiniId, MiniId>, String) {
    let mut doc = Treedoc::with_epoch(new_epoch);
    let anchors: Vec<MiniId> = list.iter().filter_map(|e| e.anchor).collect();
    let items = anchors.iter().map(|&id| (old.node_ref(id).atom().clone(), old.node_ref(id).site().clone())).collect();
    let ids = build_into(&mut doc, items);
    let mut placed: HashMap<MiniId, MiniId> = anchors.into_iter().zip(ids).collect();
    let skeleton = doc.digest();

    for entry in list {
        let mut after = entry.anchor.map(|a| placed[&a]);
        for &black_root in &entry.black {
            let site = old.node_ref(black_root).site().clone();
            let slot = match after {
                None => doc.alloc_first(&site),
                Some(prev) => doc.alloc_after_mini(prev, &site),
            };
            let (parent, side) = match slot.parent() {
                None => (None, Side::Left),
                Some(p) => (Some(doc.resolve(&p).expect("slot parent exists")), slot.path().last().unwrap().side),
            };
            graft(old, &mut doc, black_root, parent, side, &mut placed);
            after = Some(placed[&old.rightmost_in_subtree(black_root)]);
        }
    }
    (doc, placed, skeleton)
}

fn graft(
    old: &Treedoc,
    doc: &mut Treedoc,
    root: MiniId,
    parent: Option<MiniId>,
    side: Side,
    placed: &mut HashMap<MiniId, MiniId>,
) {
    let mut stack = vec![(root, parent, side)];
    while let Some((m, parent, side)) = stack.pop() {
        let n = old.node_ref(m);
        let new_id = doc.attach(parent, side, n.site().clone(), n.atom().clone(), n.is_tombstone());
        doc.set_colors(new_id, Color::Black, Color::Black);
        placed.insert(m, new_id);
        for side in [Side::Left, Side::Right] {
            for &child in old.child_minis(m, side) {
                stack.push((child, Some(new_id), side));
            }
        }
    }
}

/// Step three: apply black deletes to the new tree and emit the operations.
fn emit(
    old: &Treedoc,
    doc: &mut Treedoc,
    placed: &HashMap<MiniId, MiniId>,
    log: &[Operation],
    core_ids: &HashSet<OpId>,
    new_epoch: u64,
) -> Vec<Operation> {
    let mut inserted_by: HashMap<MiniId, OpId> = HashMap::new();
    let mut deleted_by: HashMap<MiniId, Vec<OpId>> = HashMap::new();
    for op in log {
        let id = op.id();
        if core_ids.contains(&id) {
            continue;
        }
        let Ok(old_id) = old.resolve(&op.tid) else { continue };
        let Some(&new_id) = placed.get(&old_id) else { continue };
        match op.kind {
            OpKind::Insert => {
                inserted_by.insert(new_id, id);
            }
            OpKind::Delete => deleted_by.entry(new_id).or_default().push(id),
        }
    }
    // black tombstones on cyan nodes
    for (&old_id, &new_id) in placed {
        let n = old.node_ref(old_id);
        if n.color() == Color::Cyan && n.tombstone_color() == Some(Color::Black) {
            doc.tombstone(new_id);
            doc.set_colors(new_id, Color::Cyan, Color::Black);
        }
    }

    let mut out = Vec::new();
    let mut stack: Vec<MiniId> = doc.root_minis().iter().rev().copied().collect();
    while let Some(id) = stack.pop() {
        let n = doc.node_ref(id);
        let tid = n.tid();
        if n.color() == Color::Black {
            let origin = inserted_by.get(&id).cloned().unwrap_or_else(|| OpId { origin: n.site().clone(), seq: 0 });
            out.push(Operation::insert(new_epoch, tid.clone(), n.atom().clone(), origin.origin, origin.seq));
        }
        if n.is_tombstone() {
            let mut dels = deleted_by.get(&id).cloned().unwrap_or_default();
            dels.sort();
            for d in dels {
                out.push(Operation::delete(new_epoch, tid.clone(), d.origin, d.seq));
            }
        }
        let kids: Vec<MiniId> = doc.children(id).collect();
        stack.extend(kids.into_iter().rev());
    }
    out
}
