//! Revision histories as edit traces, and replaying them with size and
//! latency metrics.
//!
//! A revision is split into atoms (paragraphs or words). Each atom keeps the
//! whitespace that follows it, so concatenating the atoms gives back the
//! revision byte for byte. Successive revisions are diffed into inserts and
//! deletes addressed by live position.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use similar::{capture_diff_slices, Algorithm, DiffTag};
use thiserror::Error;

use crate::doc::Atom;
use crate::protocol::{initiate_flatten, FlattenOutcome, LocalEdit, ProtocolError, Role, Site};
use crate::sim::Cluster;
use crate::tid::SiteId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    /// Text up to and including a whitespace run with two or more newlines.
    Paragraph,
    /// A non-whitespace run and the whitespace after it.
    Word,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceKind {
    Insert,
    Delete,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub revision: u64,
    pub kind: TraceKind,
    /// Live index at the moment the event is applied.
    pub position: usize,
    /// Present iff `kind` is `Insert`.
    pub atom: Option<Vec<u8>>,
}

impl TraceEvent {
    pub fn insert(revision: u64, position: usize, atom: impl Into<Vec<u8>>) -> Self {
        TraceEvent { revision, kind: TraceKind::Insert, position, atom: Some(atom.into()) }
    }

    pub fn delete(revision: u64, position: usize) -> Self {
        TraceEvent { revision, kind: TraceKind::Delete, position, atom: None }
    }
}

/// One row per replayed operation, plus one after every committed flatten.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub op_index: usize,
    pub tree_size_nodes: usize,
    pub tombstone_fraction: f64,
    pub mean_tid_encoded_bytes: f64,
    /// Nanoseconds spent in the operation (or the flatten).
    pub op_duration: u64,
    pub epoch: u64,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("revision {revision}: position {position} out of range for length {len}")]
    PositionOutOfRange { revision: u64, position: usize, len: usize },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Splits `text` into atoms that concatenate back to `text`. Leading
/// whitespace, if any, is an atom of its own.
pub fn tokenize(text: &str, granularity: Granularity) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    let mut content_seen = false;
    while let Some((i, c)) = chars.next() {
        if !c.is_whitespace() {
            content_seen = true;
            continue;
        }
        let mut end = i + c.len_utf8();
        let mut newlines = usize::from(c == '\n');
        while let Some(&(j, d)) = chars.peek() {
            if !d.is_whitespace() {
                break;
            }
            newlines += usize::from(d == '\n');
            end = j + d.len_utf8();
            chars.next();
        }
        let boundary = match granularity {
            Granularity::Word => true,
            Granularity::Paragraph => newlines >= 2 || !content_seen,
        };
        if boundary {
            out.push(&text[start..end]);
            start = end;
            content_seen = false;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Edits turning `old_rev` into `new_rev`, from a longest-common-subsequence
/// alignment of their atoms. Positions are cursor positions: applying the
/// events in order to `old_rev` yields `new_rev`.
pub fn diff_to_ops(old_rev: &str, new_rev: &str, granularity: Granularity) -> Vec<TraceEvent> {
    diff_revision(0, old_rev, new_rev, granularity)
}

/// Like [`diff_to_ops`], tagging the events with `revision`.
pub fn diff_revision(revision: u64, old_rev: &str, new_rev: &str, granularity: Granularity) -> Vec<TraceEvent> {
    let old = tokenize(old_rev, granularity);
    let new = tokenize(new_rev, granularity);
    let mut out = Vec::new();
    let mut cursor = 0;
    for op in capture_diff_slices(Algorithm::Lcs, &old, &new) {
        let (tag, old_range, new_range) = op.as_tag_tuple();
        match tag {
            DiffTag::Equal => cursor += old_range.len(),
            DiffTag::Delete | DiffTag::Insert | DiffTag::Replace => {
                for _ in old_range {
                    out.push(TraceEvent::delete(revision, cursor));
                }
                for k in new_range {
                    out.push(TraceEvent::insert(revision, cursor, new[k].as_bytes()));
                    cursor += 1;
                }
            }
        }
    }
    out
}

/// Trace of a revision chain. Revision `k` holds the edits from revision
/// `k - 1` (or the empty text, for `k = 0`) to revision `k`.
pub fn revisions_to_trace<S: AsRef<str>>(revisions: &[S], granularity: Granularity) -> Vec<TraceEvent> {
    let mut out = Vec::new();
    let mut prev = "";
    for (k, rev) in revisions.iter().enumerate() {
        out.extend(diff_revision(k as u64, prev, rev.as_ref(), granularity));
        prev = rev.as_ref();
    }
    out
}

/// Reads every file of `dir`, in lexicographic order of file name.
pub fn read_revisions_dir(dir: &Path) -> io::Result<Vec<String>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.iter().map(fs::read_to_string).collect()
}

/// One line per event: `revision<TAB>insert|delete<TAB>position<TAB>base64 atom`.
pub fn write_trace(events: &[TraceEvent], mut w: impl Write) -> io::Result<()> {
    for e in events {
        let (kind, atom) = match e.kind {
            TraceKind::Insert => ("insert", B64.encode(e.atom.as_deref().unwrap_or_default())),
            TraceKind::Delete => ("delete", String::new()),
        };
        writeln!(w, "{}\t{}\t{}\t{}", e.revision, kind, e.position, atom)?;
    }
    Ok(())
}

pub fn read_trace(r: impl BufRead) -> Result<Vec<TraceEvent>, TraceError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: &str| TraceError::Parse { line: n + 1, reason: reason.to_string() };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err("expected four tab-separated fields"));
        }
        let revision = fields[0].parse().map_err(|_| err("bad revision"))?;
        let position = fields[2].parse().map_err(|_| err("bad position"))?;
        let event = match fields[1] {
            "insert" => TraceEvent::insert(revision, position, B64.decode(fields[3]).map_err(|_| err("bad base64"))?),
            "delete" => TraceEvent::delete(revision, position),
            _ => return Err(err("kind must be insert or delete")),
        };
        out.push(event);
    }
    Ok(out)
}

pub fn write_metrics_csv(rows: &[MetricsRow], w: impl Write) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record([
            "op_index",
            "tree_size_nodes",
            "tombstone_fraction",
            "mean_tid_encoded_bytes",
            "op_duration",
            "epoch",
        ])?;
    }
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

enum Target {
    Single(Box<Site>),
    Cluster(Cluster),
}

/// Incremental replay: feed events one at a time, inspect the document
/// between revisions.
pub struct Replayer {
    target: Target,
    flatten_interval: u64,
    ops: usize,
    last_revision: Option<u64>,
    rows: Vec<MetricsRow>,
}

impl Replayer {
    /// `flatten_interval` is in revisions, 0 for never. `site_count` 1
    /// replays at a single core site; more replays round-robin over a
    /// synchronous cluster.
    pub fn new(flatten_interval: u64, site_count: usize) -> Self {
        let target = if site_count <= 1 {
            Target::Single(Box::new(Site::new(SiteId::from("s0"), Role::Core)))
        } else {
            Target::Cluster(Cluster::new(site_count))
        };
        Replayer { target, flatten_interval, ops: 0, last_revision: None, rows: Vec::new() }
    }

    pub fn site(&self) -> &Site {
        match &self.target {
            Target::Single(s) => s,
            Target::Cluster(c) => c.site(0),
        }
    }

    pub fn text(&self) -> Vec<u8> {
        self.site().replica().text_bytes()
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn apply(&mut self, event: &TraceEvent) -> Result<(), TraceError> {
        if let Some(last) = self.last_revision {
            let k = self.flatten_interval;
            if k > 0 && event.revision / k > last / k {
                self.flatten()?;
            }
        }
        self.last_revision = Some(event.revision);

        let len = self.site().replica().len();
        let in_range = match event.kind {
            TraceKind::Insert => event.position <= len,
            TraceKind::Delete => event.position < len,
        };
        if !in_range {
            return Err(TraceError::PositionOutOfRange { revision: event.revision, position: event.position, len });
        }
        let edit = match event.kind {
            TraceKind::Insert => LocalEdit::InsertAt {
                index: event.position,
                atom: Atom(event.atom.clone().unwrap_or_default()),
            },
            TraceKind::Delete => LocalEdit::DeleteAt { index: event.position },
        };
        let start = Instant::now();
        match &mut self.target {
            Target::Single(s) => {
                s.submit_local(edit)?;
                s.take_outbox();
            }
            Target::Cluster(c) => {
                let i = self.ops % c.len();
                c.submit(i, edit)?;
            }
        }
        let elapsed = start.elapsed().as_nanos() as u64;
        self.push_row(self.ops, elapsed);
        self.ops += 1;
        Ok(())
    }

    /// Attempts a flatten; returns whether it committed.
    pub fn flatten(&mut self) -> Result<bool, TraceError> {
        let start = Instant::now();
        let outcome = match &mut self.target {
            Target::Single(s) => initiate_flatten(s, &mut [], 0)?,
            Target::Cluster(c) => c.flatten()?,
        };
        let elapsed = start.elapsed().as_nanos() as u64;
        let committed = matches!(outcome, FlattenOutcome::Committed(_));
        if committed {
            self.push_row(self.ops.saturating_sub(1), elapsed);
        }
        Ok(committed)
    }

    fn push_row(&mut self, op_index: usize, op_duration: u64) {
        let doc = self.site().replica();
        let st = doc.cached_stats();
        self.rows.push(MetricsRow {
            op_index,
            tree_size_nodes: st.total_nodes(),
            tombstone_fraction: st.tombstone_fraction(),
            mean_tid_encoded_bytes: st.mean_tid_encoded_bytes,
            op_duration,
            epoch: doc.epoch(),
        });
    }

    pub fn into_rows(self) -> Vec<MetricsRow> {
        self.rows
    }
}

/// Replays `events` (sorted by revision) and returns the metrics.
pub fn replay(events: &[TraceEvent], flatten_interval: u64, site_count: usize) -> Result<Vec<MetricsRow>, TraceError> {
    let mut r = Replayer::new(flatten_interval, site_count);
    for e in events {
        r.apply(e)?;
    }
    Ok(r.into_rows())
}

/// Knobs for [`synthetic_trace`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub ops: usize,
    pub ops_per_revision: usize,
    pub delete_ratio: f64,
    /// Probability that an edit lands next to the previous one rather than
    /// at a uniformly random position.
    pub locality: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { seed: 0, ops: 10_000, ops_per_revision: 10, delete_ratio: 0.3, locality: 0.8 }
    }
}

/// A random editing session: bursts of nearby edits with occasional jumps.
pub fn synthetic_trace(cfg: &SyntheticConfig) -> Vec<TraceEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_rev = cfg.ops_per_revision.max(1);
    let mut len = 0usize;
    let mut cursor = 0usize;
    let mut out = Vec::with_capacity(cfg.ops);
    for i in 0..cfg.ops {
        let revision = (i / per_rev) as u64;
        if !rng.gen_bool(cfg.locality) {
            cursor = rng.gen_range(0..=len);
        }
        if len > 0 && rng.gen_bool(cfg.delete_ratio) {
            let pos = cursor.min(len - 1);
            out.push(TraceEvent::delete(revision, pos));
            len -= 1;
            cursor = pos;
        } else {
            let pos = cursor.min(len);
            out.push(TraceEvent::insert(revision, pos, format!("p{i}\n\n")));
            len += 1;
            cursor = pos + 1;
        }
    }
    out
}

/// `inserts` appends followed by `deletes` deletions at random live
/// positions, `ops_per_revision` events per revision.
pub fn insert_then_delete_trace(inserts: usize, deletes: usize, ops_per_revision: usize, seed: u64) -> Vec<TraceEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_rev = ops_per_revision.max(1);
    let mut out = Vec::with_capacity(inserts + deletes);
    for i in 0..inserts {
        out.push(TraceEvent::insert((i / per_rev) as u64, i, format!("p{i}\n\n")));
    }
    let deletes = deletes.min(inserts);
    for d in 0..deletes {
        let i = inserts + d;
        out.push(TraceEvent::delete((i / per_rev) as u64, rng.gen_range(0..inserts - d)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn apply_to_atoms(base: &str, events: &[TraceEvent], g: Granularity) -> String {
        let mut atoms: Vec<Vec<u8>> = tokenize(base, g).into_iter().map(|s| s.as_bytes().to_vec()).collect();
        for e in events {
            match e.kind {
                TraceKind::Insert => atoms.insert(e.position, e.atom.clone().unwrap()),
                TraceKind::Delete => {
                    atoms.remove(e.position);
                }
            }
        }
        String::from_utf8(atoms.concat()).unwrap()
    }

    #[test]
    fn tokens_concatenate_back() {
        let text = "\n\nfirst para\nstill first\n\n\nsecond  \n \n third";
        let paras = tokenize(text, Granularity::Paragraph);
        assert_eq!(paras, vec!["\n\n", "first para\nstill first\n\n\n", "second  \n \n ", "third"]);
        assert_eq!(paras.concat(), text);
        let words = tokenize("  a bb\tc ", Granularity::Word);
        assert_eq!(words, vec!["  ", "a ", "bb\t", "c "]);
    }

    #[test]
    fn identical_revisions_have_no_events() {
        assert!(diff_to_ops("a\n\nb", "a\n\nb", Granularity::Paragraph).is_empty());
    }

    #[test]
    fn single_paragraph_insert() {
        let ev = diff_to_ops("a\n\nc", "a\n\nb\n\nc", Granularity::Paragraph);
        assert_eq!(ev, vec![TraceEvent::insert(0, 1, "b\n\n")]);
    }

    #[test]
    fn replace_is_delete_then_insert() {
        let ev = diff_to_ops("x y z", "x q z", Granularity::Word);
        assert_eq!(ev, vec![TraceEvent::delete(0, 1), TraceEvent::insert(0, 1, "q ")]);
    }

    #[test]
    fn trace_file_round_trip() {
        let events = vec![TraceEvent::insert(0, 0, "héllo\n\n"), TraceEvent::delete(3, 0), TraceEvent::insert(3, 0, "")];
        let mut buf = Vec::new();
        write_trace(&events, &mut buf).unwrap();
        assert_eq!(read_trace(&buf[..]).unwrap(), events);
        assert!(matches!(read_trace(&b"1\tmove\t0\t\n"[..]), Err(TraceError::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_trace_gives_no_rows() {
        assert!(replay(&[], 10, 1).unwrap().is_empty());
        let mut buf = Vec::new();
        write_metrics_csv(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "op_index,tree_size_nodes,tombstone_fraction,mean_tid_encoded_bytes,op_duration,epoch\n"
        );
    }

    #[test]
    fn out_of_range_reports_revision() {
        let events = vec![TraceEvent::insert(0, 0, "a"), TraceEvent::delete(4, 1)];
        assert!(matches!(replay(&events, 0, 1), Err(TraceError::PositionOutOfRange { revision: 4, position: 1, len: 1 })));
    }

    #[test]
    fn tombstones_accumulate_without_flatten() {
        let events = insert_then_delete_trace(5000, 4500, 10, 1);
        let rows = replay(&events, 0, 1).unwrap();
        let last = rows.last().unwrap();
        assert_eq!(rows.len(), 9500);
        // deletes turn live nodes into tombstones: 5000 nodes, 4500 of them dead
        assert_eq!(last.tree_size_nodes, 5000);
        assert!((last.tombstone_fraction - 0.9).abs() < 1e-12);
    }

    #[test]
    fn flatten_resets_tombstones() {
        let events = insert_then_delete_trace(5000, 4500, 10, 1);
        let rows = replay(&events, 100, 1).unwrap();
        let mut flattens = 0;
        for w in rows.windows(2) {
            if w[1].epoch > w[0].epoch {
                flattens += 1;
                assert_eq!(w[1].tombstone_fraction, 0.0);
                assert!(w[1].mean_tid_encoded_bytes <= w[0].mean_tid_encoded_bytes);
            }
        }
        assert_eq!(flattens, 9);
    }

    #[test]
    fn multi_site_replay_matches_single_site_text() {
        let events = synthetic_trace(&SyntheticConfig { ops: 600, ..SyntheticConfig::default() });
        let mut one = Replayer::new(7, 1);
        let mut three = Replayer::new(7, 3);
        for e in &events {
            one.apply(e).unwrap();
            three.apply(e).unwrap();
        }
        assert_eq!(one.text(), three.text());
        assert!(three.site().epoch() > 0);
    }

    fn paragraphs() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "dd", "e e"]), 0..12)
            .prop_map(|ps| ps.into_iter().map(|p| format!("{p}\n\n")).collect())
    }

    proptest! {
        #[test]
        fn diff_round_trip(old in paragraphs(), new in paragraphs()) {
            let (old, new) = (old.concat(), new.concat());
            let ev = diff_to_ops(&old, &new, Granularity::Paragraph);
            prop_assert_eq!(apply_to_atoms(&old, &ev, Granularity::Paragraph), new.clone());
            let ev = diff_to_ops(&old, &new, Granularity::Word);
            prop_assert_eq!(apply_to_atoms(&old, &ev, Granularity::Word), new);
        }

        #[test]
        fn tokenize_concat(s in "[ab \n\t]{0,40}") {
            prop_assert_eq!(tokenize(&s, Granularity::Paragraph).concat(), s.clone());
            prop_assert_eq!(tokenize(&s, Granularity::Word).concat(), s);
        }
    }
}
