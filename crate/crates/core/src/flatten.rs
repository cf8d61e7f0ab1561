//! Local restructuring: tree to flat sequence of live atoms to a canonical
//! balanced tree, plus the old-TID to new-TID renaming.

use std::collections::BTreeMap;

use crate::doc::{Atom, MiniId, Treedoc};
use crate::tid::{Side, SiteId, Tid};

#[derive(Clone, Debug)]
pub struct FlattenResult {
    /// Balanced, tombstone-free tree one epoch ahead of the input.
    pub new_doc: Treedoc,
    /// Old TID to new TID for every live atom.
    pub mapping: BTreeMap<Tid, Tid>,
}

/// Builds the balanced tree whose infix order is `atoms`. The element at
/// index `n / 2` becomes the root and both halves recurse; every node is the
/// only mini-node of its major node and keeps the given disambiguator.
pub fn build_balanced(atoms: Vec<(Atom, SiteId)>) -> Treedoc {
    let mut doc = Treedoc::new();
    build_into(&mut doc, atoms);
    doc
}

/// Like [`build_balanced`] but into an existing empty tree. Returns the new
/// mini-nodes in input order.
pub(crate) fn build_into(doc: &mut Treedoc, atoms: Vec<(Atom, SiteId)>) -> Vec<MiniId> {
    debug_assert_eq!(doc.node_count(), 0);
    let mut slots: Vec<Option<(Atom, SiteId)>> = atoms.into_iter().map(Some).collect();
    let mut ids = vec![0; slots.len()];
    // (parent, side, lo, hi): place slots[lo..hi] under parent.
    let mut work = vec![(None, Side::Left, 0, slots.len())];
    while let Some((parent, side, lo, hi)) = work.pop() {
        if lo >= hi {
            continue;
        }
        let mid = lo + (hi - lo) / 2;
        let (atom, site) = slots[mid].take().expect("each slot is placed once");
        let id = doc.attach(parent, side, site, atom, false);
        ids[mid] = id;
        work.push((Some(id), Side::Right, mid + 1, hi));
        work.push((Some(id), Side::Left, lo, mid));
    }
    ids
}

/// Flattens one replica. Deterministic: structurally equal inputs give
/// structurally equal outputs.
pub fn flatten_local(doc: &Treedoc) -> FlattenResult {
    let live: Vec<_> = doc.live_nodes().map(|n| (n.tid(), n.atom().clone(), n.site().clone())).collect();
    let mut new_doc = Treedoc::with_epoch(doc.epoch() + 1);
    let (old_tids, items): (Vec<Tid>, Vec<(Atom, SiteId)>) =
        live.into_iter().map(|(tid, atom, site)| (tid, (atom, site))).unzip();
    let ids = build_into(&mut new_doc, items);
    let mapping = old_tids.into_iter().zip(ids.into_iter().map(|id| new_doc.node_ref(id).tid())).collect();
    FlattenResult { new_doc, mapping }
}
