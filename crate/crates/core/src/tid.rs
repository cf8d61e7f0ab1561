//! Tree identifiers.
//!
//! A [`Tid`] names one mini-node of the tree: the disambiguator of a mini-node
//! in the root major node, followed by one [`PathElement`] per level below it.
//! Each element picks the left or right child major node of the current
//! mini-node and then the mini-node inside it by disambiguator.
//!
//! The total order on TIDs is the infix order of the nodes they name, and it
//! can be computed from the TIDs alone, without the tree.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Unique, totally ordered identifier of a site. Used as the disambiguator of
/// every mini-node that site allocates.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteId(Arc<[u8]>);

impl SiteId {
    pub fn new(bytes: impl AsRef<[u8]>) -> Self {
        SiteId(Arc::from(bytes.as_ref()))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<&str> for SiteId {
    fn from(s: &str) -> Self {
        SiteId::new(s.as_bytes())
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match std::str::from_utf8(&self.0) {
            Ok(s) if !s.is_empty() && s.chars().all(|c| c.is_ascii_graphic()) => f.write_str(s),
            _ => write!(f, "0x{}", hex::encode(&self.0)),
        }
    }
}

impl fmt::Debug for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{self}")
    }
}

impl Serialize for SiteId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for SiteId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map(SiteId::new).map_err(serde::de::Error::custom)
    }
}

/// Which child of a mini-node a path step descends into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side {
    Left = 0,
    Right = 1,
}

impl Side {
    pub fn bit(self) -> u8 {
        self as u8
    }

    pub fn from_bit(bit: u8) -> Side {
        if bit & 1 == 0 {
            Side::Left
        } else {
            Side::Right
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathElement {
    pub side: Side,
    pub site: SiteId,
}

impl PathElement {
    pub fn new(side: Side, site: SiteId) -> Self {
        PathElement { side, site }
    }
}

/// Identifier of one atom: a path in the tree.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tid {
    root: SiteId,
    path: Vec<PathElement>,
}

impl Tid {
    /// TID of a mini-node of the root major node.
    pub fn root(site: SiteId) -> Self {
        Tid { root: site, path: Vec::new() }
    }

    pub fn from_parts(root: SiteId, path: Vec<PathElement>) -> Self {
        Tid { root, path }
    }

    /// Shorthand used by tests and demos: a root disambiguator plus a list of
    /// `(direction, site)` steps.
    pub fn from_steps<'a>(root: &str, steps: impl IntoIterator<Item = (u8, &'a str)>) -> Self {
        Tid {
            root: SiteId::from(root),
            path: steps
                .into_iter()
                .map(|(bit, site)| PathElement::new(Side::from_bit(bit), SiteId::from(site)))
                .collect(),
        }
    }

    pub fn root_site(&self) -> &SiteId {
        &self.root
    }

    pub fn path(&self) -> &[PathElement] {
        &self.path
    }

    /// Number of edges between the root major node and this mini-node.
    pub fn depth(&self) -> usize {
        self.path.len()
    }

    /// The site that allocated this TID.
    pub fn site(&self) -> &SiteId {
        self.path.last().map_or(&self.root, |e| &e.site)
    }

    pub fn child(&self, side: Side, site: SiteId) -> Tid {
        let mut path = Vec::with_capacity(self.path.len() + 1);
        path.extend_from_slice(&self.path);
        path.push(PathElement::new(side, site));
        Tid { root: self.root.clone(), path }
    }

    pub fn parent(&self) -> Option<Tid> {
        if self.path.is_empty() {
            return None;
        }
        Some(Tid { root: self.root.clone(), path: self.path[..self.path.len() - 1].to_vec() })
    }

    /// True if `self` names a proper ancestor of `other`.
    pub fn is_ancestor_of(&self, other: &Tid) -> bool {
        self.root == other.root
            && self.path.len() < other.path.len()
            && other.path[..self.path.len()] == self.path[..]
    }

    /// Re-roots the part of `self` below `old_base` onto `new_base`.
    /// Returns `None` if `old_base` is neither `self` nor one of its ancestors.
    pub fn rebase(&self, old_base: &Tid, new_base: &Tid) -> Option<Tid> {
        if self != old_base && !old_base.is_ancestor_of(self) {
            return None;
        }
        let mut path = new_base.path.clone();
        path.extend_from_slice(&self.path[old_base.path.len()..]);
        Some(Tid { root: new_base.root.clone(), path })
    }

    /// Wire encoding: a varint element count `n`, then `ceil(n/8)` bytes of
    /// direction bits (LSB first), then the `n + 1` disambiguators, each as a
    /// varint length followed by its bytes, root first.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        write_varint(&mut out, self.path.len() as u64);
        let mut bits = vec![0u8; self.path.len().div_ceil(8)];
        for (i, e) in self.path.iter().enumerate() {
            bits[i / 8] |= e.side.bit() << (i % 8);
        }
        out.extend_from_slice(&bits);
        for site in std::iter::once(&self.root).chain(self.path.iter().map(|e| &e.site)) {
            write_varint(&mut out, site.len() as u64);
            out.extend_from_slice(site.as_bytes());
        }
        out
    }

    pub fn encoded_len(&self) -> usize {
        let sites: usize = std::iter::once(&self.root)
            .chain(self.path.iter().map(|e| &e.site))
            .map(|s| varint_len(s.len() as u64) + s.len())
            .sum();
        varint_len(self.path.len() as u64) + self.path.len().div_ceil(8) + sites
    }

    pub fn decode(bytes: &[u8]) -> Result<Tid, DecodeError> {
        let mut cursor = bytes;
        let n = read_varint(&mut cursor)? as usize;
        let nbits = n.div_ceil(8);
        if cursor.len() < nbits {
            return Err(DecodeError::Truncated);
        }
        let (bits, mut rest) = cursor.split_at(nbits);
        let read_site = |rest: &mut &[u8]| -> Result<SiteId, DecodeError> {
            let len = read_varint(rest)? as usize;
            if rest.len() < len {
                return Err(DecodeError::Truncated);
            }
            let (site, tail) = rest.split_at(len);
            *rest = tail;
            Ok(SiteId::new(site))
        };
        let root = read_site(&mut rest)?;
        let mut path = Vec::with_capacity(n);
        for i in 0..n {
            let side = Side::from_bit(bits[i / 8] >> (i % 8));
            path.push(PathElement::new(side, read_site(&mut rest)?));
        }
        if !rest.is_empty() {
            return Err(DecodeError::TrailingBytes(rest.len()));
        }
        Ok(Tid { root, path })
    }
}

/// Size of the wire encoding of a TID of `depth` elements whose
/// disambiguators total `site_bytes` bytes and need `length_prefix_bytes`
/// bytes of length prefixes.
pub(crate) fn encoded_len_parts(depth: usize, site_bytes: usize, length_prefix_bytes: usize) -> usize {
    varint_len(depth as u64) + depth.div_ceil(8) + site_bytes + length_prefix_bytes
}

pub(crate) fn varint_len(mut v: u64) -> usize {
    let mut n = 1;
    while v >= 0x80 {
        v >>= 7;
        n += 1;
    }
    n
}

fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

fn read_varint(cursor: &mut &[u8]) -> Result<u64, DecodeError> {
    let mut value = 0u64;
    for shift in (0..64).step_by(7) {
        let (&byte, rest) = cursor.split_first().ok_or(DecodeError::Truncated)?;
        *cursor = rest;
        value |= u64::from(byte & 0x7f) << shift;
        if byte & 0x80 == 0 {
            return Ok(value);
        }
    }
    Err(DecodeError::VarintOverflow)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("TID encoding is truncated")]
    Truncated,
    #[error("varint does not fit in 64 bits")]
    VarintOverflow,
    #[error("{0} trailing bytes after TID")]
    TrailingBytes(usize),
}

/// Infix order of the nodes named by two TIDs.
///
/// Walks both TIDs in lockstep. Different disambiguators at the same position
/// order by disambiguator; different directions put left before right; when
/// one TID is a prefix of the other, the longer one sorts before the prefix
/// if it continues left and after it if it continues right.
pub fn compare_tid(a: &Tid, b: &Tid) -> Ordering {
    match a.root.cmp(&b.root) {
        Ordering::Equal => {}
        other => return other,
    }
    let mut i = 0;
    loop {
        match (a.path.get(i), b.path.get(i)) {
            (None, None) => return Ordering::Equal,
            (Some(x), None) => {
                return match x.side {
                    Side::Left => Ordering::Less,
                    Side::Right => Ordering::Greater,
                }
            }
            (None, Some(y)) => {
                return match y.side {
                    Side::Left => Ordering::Greater,
                    Side::Right => Ordering::Less,
                }
            }
            (Some(x), Some(y)) => {
                if x.side != y.side {
                    return x.side.cmp(&y.side);
                }
                match x.site.cmp(&y.site) {
                    Ordering::Equal => i += 1,
                    other => return other,
                }
            }
        }
    }
}

impl Ord for Tid {
    fn cmp(&self, other: &Self) -> Ordering {
        compare_tid(self, other)
    }
}

impl PartialOrd for Tid {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for Tid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}", self.root)?;
        for e in &self.path {
            write!(f, " {}{}", e.side.bit(), e.site)?;
        }
        f.write_str("]")
    }
}

impl fmt::Display for Tid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(bits: &[u8]) -> Tid {
        Tid::from_steps("a", bits.iter().map(|&b| (b, "a")))
    }

    #[test]
    fn sample_tree_orders() {
        // "b" is 0, "c" is the empty path, "d" is 10.
        assert_eq!(compare_tid(&t(&[0]), &t(&[])), Ordering::Less);
        assert_eq!(compare_tid(&t(&[]), &t(&[1, 0])), Ordering::Less);
        assert_eq!(compare_tid(&t(&[0, 0]), &t(&[0])), Ordering::Less);
        assert_eq!(compare_tid(&t(&[1, 0]), &t(&[1])), Ordering::Less);
        assert_eq!(compare_tid(&t(&[1]), &t(&[1, 1])), Ordering::Less);
    }

    #[test]
    fn disambiguator_breaks_ties_between_subtrees() {
        let a = Tid::from_steps("c", [(1, "A"), (1, "A")]);
        let b = Tid::from_steps("c", [(1, "B"), (0, "A")]);
        assert_eq!(compare_tid(&a, &b), Ordering::Less);
        assert_eq!(compare_tid(&Tid::from_steps("A", []), &Tid::from_steps("B", [(0, "A")])), Ordering::Less);
    }

    #[test]
    fn encoding_layout() {
        let tid = Tid::from_steps("ab", [(1, "c"), (0, "d"), (1, "e")]);
        let bytes = tid.encode();
        assert_eq!(bytes[0], 3);
        assert_eq!(bytes[1], 0b101);
        assert_eq!(&bytes[2..5], &[2, b'a', b'b']);
        assert_eq!(bytes.len(), tid.encoded_len());
        assert_eq!(Tid::decode(&bytes).unwrap(), tid);
    }

    #[test]
    fn decode_rejects_garbage() {
        assert_eq!(Tid::decode(&[]), Err(DecodeError::Truncated));
        assert_eq!(Tid::decode(&[1]), Err(DecodeError::Truncated));
        assert_eq!(Tid::decode(&[0, 1, b'x', 9]), Err(DecodeError::TrailingBytes(1)));
    }

    fn arb_site() -> impl Strategy<Value = SiteId> {
        prop::sample::select(vec!["A", "B", "C"]).prop_map(SiteId::from)
    }

    fn arb_tid() -> impl Strategy<Value = Tid> {
        (arb_site(), prop::collection::vec((any::<bool>(), arb_site()), 0..6)).prop_map(|(root, steps)| {
            Tid::from_parts(
                root,
                steps
                    .into_iter()
                    .map(|(r, s)| PathElement::new(if r { Side::Right } else { Side::Left }, s))
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn order_is_total_and_antisymmetric(a in arb_tid(), b in arb_tid()) {
            let ab = compare_tid(&a, &b);
            prop_assert_eq!(ab, compare_tid(&b, &a).reverse());
            prop_assert_eq!(ab == Ordering::Equal, a == b);
        }

        #[test]
        fn order_is_transitive(a in arb_tid(), b in arb_tid(), c in arb_tid()) {
            let v = [a, b, c];
            for x in &v {
                for y in &v {
                    for z in &v {
                        if compare_tid(x, y).is_le() && compare_tid(y, z).is_le() {
                            prop_assert!(compare_tid(x, z).is_le());
                        }
                    }
                }
            }
        }

        #[test]
        fn encoding_round_trips(a in arb_tid()) {
            let bytes = a.encode();
            prop_assert_eq!(bytes.len(), a.encoded_len());
            prop_assert_eq!(Tid::decode(&bytes).unwrap(), a);
        }
    }
}
