//! The Treedoc replica: a binary tree of major nodes, each holding one or more
//! mini-nodes sorted by disambiguator. Every mini-node owns its own left and
//! right child major nodes.
//!
//! Nodes live in an arena and are never removed within an epoch (deletes
//! leave tombstones), so all walks are iterative and deep trees are safe.

use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tid::{encoded_len_parts, varint_len, PathElement, Side, SiteId, Tid};

/// Opaque unit of content.
#[derive(Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Atom(pub Vec<u8>);

impl Atom {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl From<&str> for Atom {
    fn from(s: &str) -> Self {
        Atom(s.as_bytes().to_vec())
    }
}

impl From<String> for Atom {
    fn from(s: String) -> Self {
        Atom(s.into_bytes())
    }
}

impl From<Vec<u8>> for Atom {
    fn from(v: Vec<u8>) -> Self {
        Atom(v)
    }
}

impl fmt::Debug for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", String::from_utf8_lossy(&self.0))
    }
}

/// Catch-up colouring: nodes known to the core before a flatten are cyan,
/// nodes produced in the nebula are black.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Color {
    #[default]
    Cyan,
    Black,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertEffect {
    Applied,
    AlreadyPresent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeleteEffect {
    Applied,
    AlreadyTombstone,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    /// An interior element of the TID names no existing mini-node. The
    /// operation arrived before one it causally depends on.
    #[error("missing ancestor for {0}")]
    MissingAncestor(Tid),
    #[error("no node at {0}")]
    MissingTarget(Tid),
    #[error("unknown TID {0}")]
    UnknownTid(Tid),
    #[error("index {index} out of range for document of {len} atoms")]
    IndexOutOfRange { index: usize, len: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize)]
pub struct Stats {
    pub live_count: usize,
    pub tombstone_count: usize,
    /// Longest TID path, in edges below the root major node.
    pub max_depth: usize,
    pub mean_tid_encoded_bytes: f64,
}

impl Stats {
    pub fn total_nodes(&self) -> usize {
        self.live_count + self.tombstone_count
    }

    pub fn tombstone_fraction(&self) -> f64 {
        match self.total_nodes() {
            0 => 0.0,
            n => self.tombstone_count as f64 / n as f64,
        }
    }
}

pub(crate) type MiniId = usize;
type MajorId = usize;

const ROOT: MajorId = 0;

#[derive(Clone, Debug)]
pub(crate) struct Mini {
    site: SiteId,
    atom: Atom,
    tombstone: bool,
    color: Color,
    tombstone_color: Color,
    parent: Option<(MiniId, Side)>,
    left: Option<MajorId>,
    right: Option<MajorId>,
    /// Live atoms in the subtree rooted here, this node included.
    live: usize,
    depth: usize,
    /// Disambiguator bytes plus their length prefixes along the TID.
    site_bytes: usize,
}

#[derive(Clone, Debug, Default)]
struct Major {
    minis: Vec<MiniId>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Counters {
    live: usize,
    tombstones: usize,
    tid_bytes: usize,
    max_depth: usize,
}

#[derive(Clone)]
pub struct Treedoc {
    minis: Vec<Mini>,
    majors: Vec<Major>,
    epoch: u64,
    counters: Counters,
}

impl Default for Treedoc {
    fn default() -> Self {
        Self::new()
    }
}

/// Borrowed view of one mini-node.
#[derive(Clone, Copy)]
pub struct NodeRef<'a> {
    doc: &'a Treedoc,
    id: MiniId,
}

impl<'a> NodeRef<'a> {
    pub fn tid(&self) -> Tid {
        self.doc.tid_of(self.id)
    }

    pub fn site(&self) -> &'a SiteId {
        &self.doc.minis[self.id].site
    }

    pub fn atom(&self) -> &'a Atom {
        &self.doc.minis[self.id].atom
    }

    pub fn is_tombstone(&self) -> bool {
        self.doc.minis[self.id].tombstone
    }

    pub fn color(&self) -> Color {
        self.doc.minis[self.id].color
    }

    pub fn tombstone_color(&self) -> Option<Color> {
        let m = &self.doc.minis[self.id];
        m.tombstone.then_some(m.tombstone_color)
    }

    pub fn depth(&self) -> usize {
        self.doc.minis[self.id].depth
    }

    pub(crate) fn id(&self) -> MiniId {
        self.id
    }
}

impl fmt::Debug for NodeRef<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:?}{}", self.tid(), self.atom(), if self.is_tombstone() { " (tombstone)" } else { "" })
    }
}

/// Owned snapshot of one node, used to compare replicas.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeSnapshot {
    pub tid: Tid,
    pub atom: Atom,
    pub tombstone: bool,
}

impl Treedoc {
    pub fn new() -> Self {
        Treedoc { minis: Vec::new(), majors: vec![Major::default()], epoch: 0, counters: Counters::default() }
    }

    pub fn with_epoch(epoch: u64) -> Self {
        Treedoc { epoch, ..Self::new() }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Number of live atoms.
    pub fn len(&self) -> usize {
        self.counters.live
    }

    pub fn is_empty(&self) -> bool {
        self.counters.live == 0
    }

    /// Number of mini-nodes, tombstones included.
    pub fn node_count(&self) -> usize {
        self.minis.len()
    }

    pub fn contains(&self, tid: &Tid) -> bool {
        self.resolve(tid).is_ok()
    }

    pub fn node(&self, tid: &Tid) -> Option<NodeRef<'_>> {
        self.resolve(tid).ok().map(|id| NodeRef { doc: self, id })
    }

    /// True if every proper ancestor of `tid` exists.
    pub fn has_ancestors(&self, tid: &Tid) -> bool {
        match tid.parent() {
            None => true,
            Some(parent) => self.contains(&parent),
        }
    }

    pub fn insert(&mut self, tid: &Tid, atom: Atom) -> Result<InsertEffect, TreeError> {
        let (parent, side) = match tid.path().split_last() {
            None => (None, Side::Left),
            Some((last, _)) => {
                let parent_tid = tid.parent().expect("non-empty path has a parent");
                let parent = self.resolve(&parent_tid).map_err(|_| TreeError::MissingAncestor(tid.clone()))?;
                (Some(parent), last.side)
            }
        };
        let major = match parent {
            None => Some(ROOT),
            Some(p) => self.child_major(p, side),
        };
        if let Some(major) = major {
            if self.find_in_major(major, tid.site()).is_ok() {
                return Ok(InsertEffect::AlreadyPresent);
            }
        }
        self.attach(parent, side, tid.site().clone(), atom, false);
        Ok(InsertEffect::Applied)
    }

    pub fn delete(&mut self, tid: &Tid) -> Result<DeleteEffect, TreeError> {
        let id = self.resolve(tid).map_err(|_| TreeError::MissingTarget(tid.clone()))?;
        Ok(self.tombstone(id))
    }

    /// Fresh TID immediately to the right of `left`: `left·1` when `left`
    /// has no right child, otherwise the leftmost free slot of the right
    /// child's subtree.
    pub fn alloc_tid_after(&self, left: &Tid, site: &SiteId) -> Result<Tid, TreeError> {
        let id = self.resolve(left).map_err(|_| TreeError::UnknownTid(left.clone()))?;
        Ok(self.alloc_after_mini(id, site))
    }

    /// Fresh TID that sorts after the `index - 1`-th live atom and before the
    /// `index`-th.
    pub fn alloc_tid_at_position(&self, index: usize, site: &SiteId) -> Result<Tid, TreeError> {
        if index > self.len() {
            return Err(TreeError::IndexOutOfRange { index, len: self.len() });
        }
        if index == 0 {
            return Ok(self.alloc_first(site));
        }
        let left = self.live_mini_at(index - 1).expect("index checked against live count");
        Ok(self.alloc_after_mini(left, site))
    }

    /// Fresh TID before every node of the tree, tombstones included.
    pub fn alloc_first(&self, site: &SiteId) -> Tid {
        if self.majors[ROOT].minis.is_empty() {
            return Tid::root(site.clone());
        }
        self.leftmost_free(ROOT, site)
    }

    /// TID of the `index`-th live atom.
    pub fn tid_at(&self, index: usize) -> Option<Tid> {
        self.live_mini_at(index).map(|id| self.tid_of(id))
    }

    /// Live atoms in infix order.
    pub fn text(&self) -> Vec<Atom> {
        self.live_nodes().map(|n| n.atom().clone()).collect()
    }

    /// Live atoms concatenated and decoded as UTF-8 (lossily).
    pub fn text_string(&self) -> String {
        String::from_utf8_lossy(&self.text_bytes()).into_owned()
    }

    pub fn text_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for n in self.live_nodes() {
            out.extend_from_slice(n.atom().as_bytes());
        }
        out
    }

    /// Every mini-node, tombstones included, in infix order.
    pub fn nodes(&self) -> impl Iterator<Item = NodeRef<'_>> + '_ {
        let mut stack = Vec::new();
        self.push_major(&mut stack, ROOT);
        InfixIter { doc: self, stack }
    }

    pub fn live_nodes(&self) -> impl Iterator<Item = NodeRef<'_>> + '_ {
        self.nodes().filter(|n| !n.is_tombstone())
    }

    pub fn live_tids(&self) -> Vec<Tid> {
        self.live_nodes().map(|n| n.tid()).collect()
    }

    pub fn snapshot(&self) -> Vec<NodeSnapshot> {
        self.nodes()
            .map(|n| NodeSnapshot { tid: n.tid(), atom: n.atom().clone(), tombstone: n.is_tombstone() })
            .collect()
    }

    /// Statistics recomputed by a full traversal.
    pub fn stats(&self) -> Stats {
        let mut c = Counters::default();
        // (major, depth, disambiguator bytes along the path to the major's minis)
        let mut stack = vec![(ROOT, 0usize, 0usize)];
        while let Some((major, depth, prefix)) = stack.pop() {
            for &m in &self.majors[major].minis {
                let mini = &self.minis[m];
                let site_bytes = prefix + varint_len(mini.site.len() as u64) + mini.site.len();
                if mini.tombstone {
                    c.tombstones += 1;
                } else {
                    c.live += 1;
                }
                c.tid_bytes += encoded_len_parts(depth, site_bytes, 0);
                c.max_depth = c.max_depth.max(depth);
                for child in [mini.left, mini.right].into_iter().flatten() {
                    stack.push((child, depth + 1, site_bytes));
                }
            }
        }
        Self::stats_from(c)
    }

    /// Statistics from the incrementally maintained counters. Always equal to
    /// [`stats`](Self::stats).
    pub fn cached_stats(&self) -> Stats {
        Self::stats_from(self.counters)
    }

    fn stats_from(c: Counters) -> Stats {
        let nodes = c.live + c.tombstones;
        Stats {
            live_count: c.live,
            tombstone_count: c.tombstones,
            max_depth: c.max_depth,
            mean_tid_encoded_bytes: if nodes == 0 { 0.0 } else { c.tid_bytes as f64 / nodes as f64 },
        }
    }

    /// Number of levels of major nodes (0 for an empty tree).
    pub fn height(&self) -> usize {
        if self.minis.is_empty() {
            0
        } else {
            self.stats().max_depth + 1
        }
    }

    /// SHA-256 over the epoch and every node (TID, atom, tombstone flag) in
    /// infix order. Equal digests mean structurally equal replicas.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.epoch.to_le_bytes());
        for n in self.nodes() {
            let tid = n.tid().encode();
            h.update((tid.len() as u64).to_le_bytes());
            h.update(&tid);
            h.update([n.is_tombstone() as u8]);
            h.update((n.atom().0.len() as u64).to_le_bytes());
            h.update(&n.atom().0);
        }
        hex::encode(h.finalize())
    }

    /// Checks the cached counters and subtree counts against a recount.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.stats() != self.cached_stats() {
            return Err(format!("cached stats {:?} != recount {:?}", self.cached_stats(), self.stats()));
        }
        for (id, mini) in self.minis.iter().enumerate() {
            let expect = usize::from(!mini.tombstone) + self.major_live(mini.left) + self.major_live(mini.right);
            if mini.live != expect {
                return Err(format!("subtree count of {} is {}, expected {}", self.tid_of(id), mini.live, expect));
            }
        }
        for major in &self.majors {
            if major.minis.windows(2).any(|w| self.minis[w[0]].site >= self.minis[w[1]].site) {
                return Err("major node minis not strictly sorted".into());
            }
        }
        Ok(())
    }

    /// Indented rendering of the tree for demos and debugging.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        if self.minis.is_empty() {
            out.push_str("(empty)\n");
            return out;
        }
        let mut stack: Vec<(MiniId, &str)> = self.majors[ROOT].minis.iter().rev().map(|&m| (m, "root")).collect();
        while let Some((m, label)) = stack.pop() {
            let mini = &self.minis[m];
            let tomb = match (mini.tombstone, mini.tombstone_color) {
                (false, _) => String::new(),
                (true, c) => format!(" tombstone({c:?})"),
            };
            let _ = writeln!(
                out,
                "{}{label} {:?} {:?} {:?}{tomb}",
                "  ".repeat(mini.depth),
                mini.site,
                mini.atom,
                mini.color
            );
            for (side, label) in [(mini.right, "R"), (mini.left, "L")] {
                if let Some(major) = side {
                    stack.extend(self.majors[major].minis.iter().rev().map(|&c| (c, label)));
                }
            }
        }
        out
    }

    // ---- crate-internal structure access -------------------------------

    pub(crate) fn resolve(&self, tid: &Tid) -> Result<MiniId, usize> {
        let mut mini = self.find_in_major(ROOT, tid.root_site()).map_err(|_| 0usize)?;
        for (level, PathElement { side, site }) in tid.path().iter().enumerate() {
            let major = self.child_major(mini, *side).ok_or(level + 1)?;
            mini = self.find_in_major(major, site).map_err(|_| level + 1)?;
        }
        Ok(mini)
    }

    pub(crate) fn node_ref(&self, id: MiniId) -> NodeRef<'_> {
        NodeRef { doc: self, id }
    }

    pub(crate) fn tid_of(&self, mut id: MiniId) -> Tid {
        let mut path = Vec::with_capacity(self.minis[id].depth);
        while let Some((parent, side)) = self.minis[id].parent {
            path.push(PathElement::new(side, self.minis[id].site.clone()));
            id = parent;
        }
        path.reverse();
        Tid::from_parts(self.minis[id].site.clone(), path)
    }

    pub(crate) fn children(&self, id: MiniId) -> impl Iterator<Item = MiniId> + '_ {
        let m = &self.minis[id];
        [m.left, m.right].into_iter().flatten().flat_map(move |major| self.majors[major].minis.iter().copied())
    }

    /// Minis of the child major node on `side`, in disambiguator order.
    pub(crate) fn child_minis(&self, id: MiniId, side: Side) -> &[MiniId] {
        match self.child_major(id, side) {
            Some(major) => &self.majors[major].minis,
            None => &[],
        }
    }

    pub(crate) fn root_minis(&self) -> &[MiniId] {
        &self.majors[ROOT].minis
    }

    /// The last node, in infix order, of the subtree rooted at `id`.
    pub(crate) fn rightmost_in_subtree(&self, mut id: MiniId) -> MiniId {
        while let Some(major) = self.minis[id].right {
            id = *self.majors[major].minis.last().expect("major nodes are never empty");
        }
        id
    }

    /// Adds a mini-node under `parent` (or in the root major node) without
    /// any freshness check. Callers guarantee the slot is free.
    pub(crate) fn attach(
        &mut self,
        parent: Option<MiniId>,
        side: Side,
        site: SiteId,
        atom: Atom,
        tombstone: bool,
    ) -> MiniId {
        let major = match parent {
            None => ROOT,
            Some(p) => match self.child_major(p, side) {
                Some(m) => m,
                None => {
                    self.majors.push(Major::default());
                    let m = self.majors.len() - 1;
                    match side {
                        Side::Left => self.minis[p].left = Some(m),
                        Side::Right => self.minis[p].right = Some(m),
                    }
                    m
                }
            },
        };
        let (depth, prefix) = match parent {
            None => (0, 0),
            Some(p) => (self.minis[p].depth + 1, self.minis[p].site_bytes),
        };
        let site_bytes = prefix + varint_len(site.len() as u64) + site.len();
        let id = self.minis.len();
        let pos = self.find_in_major(major, &site).expect_err("attach into an occupied slot");
        self.minis.push(Mini {
            site,
            atom,
            tombstone,
            color: Color::default(),
            tombstone_color: Color::default(),
            parent: parent.map(|p| (p, side)),
            left: None,
            right: None,
            live: 0,
            depth,
            site_bytes,
        });
        self.majors[major].minis.insert(pos, id);

        self.counters.tid_bytes += encoded_len_parts(depth, site_bytes, 0);
        self.counters.max_depth = self.counters.max_depth.max(depth);
        if tombstone {
            self.counters.tombstones += 1;
        } else {
            self.counters.live += 1;
            self.adjust_live(id, 1);
        }
        id
    }

    pub(crate) fn tombstone(&mut self, id: MiniId) -> DeleteEffect {
        if self.minis[id].tombstone {
            return DeleteEffect::AlreadyTombstone;
        }
        self.minis[id].tombstone = true;
        self.counters.live -= 1;
        self.counters.tombstones += 1;
        self.adjust_live(id, -1);
        DeleteEffect::Applied
    }

    pub(crate) fn set_colors(&mut self, id: MiniId, color: Color, tombstone_color: Color) {
        self.minis[id].color = color;
        self.minis[id].tombstone_color = tombstone_color;
    }

    pub(crate) fn alloc_after_mini(&self, id: MiniId, site: &SiteId) -> Tid {
        match self.minis[id].right {
            None => self.tid_of(id).child(Side::Right, site.clone()),
            Some(major) => self.leftmost_free(major, site),
        }
    }

    fn leftmost_free(&self, major: MajorId, site: &SiteId) -> Tid {
        let mut m = self.majors[major].minis[0];
        while let Some(left) = self.minis[m].left {
            m = self.majors[left].minis[0];
        }
        self.tid_of(m).child(Side::Left, site.clone())
    }

    fn live_mini_at(&self, mut index: usize) -> Option<MiniId> {
        if index >= self.len() {
            return None;
        }
        let mut major = ROOT;
        'descend: loop {
            for &m in &self.majors[major].minis {
                let mini = &self.minis[m];
                if index >= mini.live {
                    index -= mini.live;
                    continue;
                }
                let left = self.major_live(mini.left);
                if index < left {
                    major = mini.left.expect("non-zero count implies a child");
                    continue 'descend;
                }
                index -= left;
                if !mini.tombstone {
                    if index == 0 {
                        return Some(m);
                    }
                    index -= 1;
                }
                major = mini.right.expect("remaining count lies in the right subtree");
                continue 'descend;
            }
            unreachable!("subtree counts are inconsistent");
        }
    }

    fn major_live(&self, major: Option<MajorId>) -> usize {
        major.map_or(0, |m| self.majors[m].minis.iter().map(|&c| self.minis[c].live).sum())
    }

    fn adjust_live(&mut self, mut id: MiniId, delta: isize) {
        loop {
            let mini = &mut self.minis[id];
            mini.live = mini.live.checked_add_signed(delta).expect("subtree count underflow");
            match mini.parent {
                Some((p, _)) => id = p,
                None => break,
            }
        }
    }

    fn child_major(&self, id: MiniId, side: Side) -> Option<MajorId> {
        match side {
            Side::Left => self.minis[id].left,
            Side::Right => self.minis[id].right,
        }
    }

    fn find_in_major(&self, major: MajorId, site: &SiteId) -> Result<usize, usize> {
        self.majors[major].minis.binary_search_by(|&m| self.minis[m].site.cmp(site)).map(|pos| self.majors[major].minis[pos])
    }

    fn push_major(&self, stack: &mut Vec<Step>, major: MajorId) {
        for &m in self.majors[major].minis.iter().rev() {
            if let Some(r) = self.minis[m].right {
                stack.push(Step::Major(r));
            }
            stack.push(Step::Emit(m));
            if let Some(l) = self.minis[m].left {
                stack.push(Step::Major(l));
            }
        }
    }
}

enum Step {
    Major(MajorId),
    Emit(MiniId),
}

struct InfixIter<'a> {
    doc: &'a Treedoc,
    stack: Vec<Step>,
}

impl<'a> Iterator for InfixIter<'a> {
    type Item = NodeRef<'a>;

    fn next(&mut self) -> Option<NodeRef<'a>> {
        loop {
            match self.stack.pop()? {
                Step::Major(major) => self.doc.push_major(&mut self.stack, major),
                Step::Emit(id) => return Some(NodeRef { doc: self.doc, id }),
            }
        }
    }
}

/// Structural equality: same epoch, same nodes at the same TIDs with the same
/// atoms and tombstone flags. Colours are scratch state and ignored.
impl PartialEq for Treedoc {
    fn eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.minis.len() == other.minis.len()
            && self.nodes().zip(other.nodes()).all(|(a, b)| {
                a.site() == b.site() && a.is_tombstone() == b.is_tombstone() && a.atom() == b.atom() && a.tid() == b.tid()
            })
    }
}

impl Eq for Treedoc {}

impl fmt::Debug for Treedoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Treedoc")
            .field("epoch", &self.epoch)
            .field("nodes", &self.nodes().collect::<Vec<_>>())
            .finish()
    }
}
