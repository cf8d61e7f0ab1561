//! Small hand-built documents shared by tests, demos and the bindings.

use crate::doc::Treedoc;
use crate::tid::Tid;

/// TIDs of the six atoms of the example tree holding "abcdef": "c" at the
/// root, "b" at 0, "a" at 00, "e" at 1, "d" at 10 and "f" at 11, all
/// allocated by site `A`.
pub fn sample_tids() -> [(char, Tid); 6] {
    [
        ('c', Tid::from_steps("A", [])),
        ('b', Tid::from_steps("A", [(0, "A")])),
        ('a', Tid::from_steps("A", [(0, "A"), (0, "A")])),
        ('e', Tid::from_steps("A", [(1, "A")])),
        ('d', Tid::from_steps("A", [(1, "A"), (0, "A")])),
        ('f', Tid::from_steps("A", [(1, "A"), (1, "A")])),
    ]
}

/// Replays the six inserts that build the example tree.
pub fn sample_tree() -> Treedoc {
    let mut doc = Treedoc::new();
    for (ch, tid) in sample_tids() {
        doc.insert(&tid, ch.to_string().into()).expect("parents are inserted first");
    }
    doc
}

/// TID of one atom of the example tree.
pub fn sample_tid(ch: char) -> Tid {
    sample_tids().into_iter().find(|(c, _)| *c == ch).map(|(_, t)| t).expect("atom of the example tree")
}
