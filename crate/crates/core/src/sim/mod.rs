//! Deterministic discrete-event simulator.
//!
//! A run drives `core_count` core sites and `nebula_count` nebula sites
//! through random edits while an adversarial network delays, reorders,
//! duplicates and (temporarily) drops messages, sites crash and recover, and
//! partitions come and go. Everything is driven by one seeded RNG and one
//! event queue ordered by `(tick, sequence)`, so a configuration always
//! produces the same event log.
//!
//! Topology: core sites talk to everyone; nebula sites only talk to the core.
//! Core site 0 coordinates flattens and relays nebula operations it has
//! recorded to the other nebula sites. After a committed flatten it sends
//! every nebula site a [`CatchUpBatch`] with the closed epoch's log.

mod cluster;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::doc::Atom;
use crate::protocol::{
    AbortReason, Decision, FlattenOutcome, LocalEdit, Operation, PrepareMessage, ProtocolError, Role, Site, Vote,
    VoteDecision,
};
use crate::tid::SiteId;

pub use cluster::Cluster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrashWindow {
    /// Index into the site list: cores first, then nebulas.
    pub site: usize,
    pub down: u64,
    pub up: u64,
}

/// Messages between `group` and the other sites sent in `[start, end)` are
/// held until the partition heals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub start: u64,
    pub end: u64,
    pub group: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub core_count: usize,
    pub nebula_count: usize,
    pub op_count: usize,
    pub delete_ratio: f64,
    /// Upper bound of the per-attempt message delay, in ticks.
    pub max_delay: u64,
    pub duplicate_prob: f64,
    /// Probability that a send attempt is lost and retried later.
    pub drop_prob: f64,
    /// Generated operations between flatten attempts; 0 disables flattening.
    pub flatten_interval: usize,
    /// Probability that the edit generator goes idle for a while after an edit.
    pub pause_prob: f64,
    pub crashes: Vec<CrashWindow>,
    pub partitions: Vec<Partition>,
    /// Ticks between metrics samples.
    pub metrics_every: u64,
    /// Test hook: silently lose one operation message, forcing divergence.
    pub inject_skip_delivery: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            core_count: 3,
            nebula_count: 0,
            op_count: 100,
            delete_ratio: 0.3,
            max_delay: 8,
            duplicate_prob: 0.05,
            drop_prob: 0.05,
            flatten_interval: 500,
            pause_prob: 0.02,
            crashes: Vec::new(),
            partitions: Vec::new(),
            metrics_every: 10,
            inject_skip_delivery: false,
        }
    }
}

impl SimConfig {
    pub fn site_count(&self) -> usize {
        self.core_count + self.nebula_count
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidConfig(msg));
        if self.core_count == 0 {
            return bad("at least one core site is required".into());
        }
        for (name, p) in [
            ("delete_ratio", self.delete_ratio),
            ("duplicate_prob", self.duplicate_prob),
            ("drop_prob", self.drop_prob),
            ("pause_prob", self.pause_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if self.drop_prob >= 1.0 {
            return bad("drop_prob must be below 1".into());
        }
        if self.max_delay == 0 {
            return bad("max_delay must be at least 1".into());
        }
        if self.metrics_every == 0 {
            return bad("metrics_every must be at least 1".into());
        }
        let n = self.site_count();
        for c in &self.crashes {
            if c.site >= n || c.down >= c.up {
                return bad(format!("invalid crash window {c:?}"));
            }
        }
        for p in &self.partitions {
            if p.start >= p.end || p.group.iter().any(|&s| s >= n) {
                return bad(format!("invalid partition {p:?}"));
            }
        }
        Ok(())
    }
}

/// Closes an epoch for a nebula site: the new epoch and the coordinator's
/// replica digest right after flattening.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSeal {
    pub new_epoch: u64,
    pub doc_digest: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatchUpBatch {
    /// The closed epoch.
    pub epoch: u64,
    /// The core's complete log for that epoch.
    pub ops: Vec<Operation>,
    pub seal: EpochSeal,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Message {
    Op(Operation),
    Prepare(PrepareMessage),
    Vote(Vote),
    Decision(Decision),
    CatchUpBatch(CatchUpBatch),
}

impl Message {
    fn kind(&self) -> &'static str {
        match self {
            Message::Op(_) => "op",
            Message::Prepare(_) => "prepare",
            Message::Vote(_) => "vote",
            Message::Decision(_) => "decision",
            Message::CatchUpBatch(_) => "catch-up",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub tick: u64,
    pub site: String,
    pub kind: String,
    /// Truncated SHA-256 of the event payload's JSON form.
    pub payload_digest: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLog {
    pub records: Vec<EventRecord>,
}

impl EventLog {
    fn push(&mut self, tick: u64, site: &SiteId, kind: &str, payload: &impl Serialize) {
        let json = serde_json::to_vec(payload).expect("payloads serialize");
        let digest = hex::encode(&Sha256::digest(&json)[..8]);
        self.records.push(EventRecord { tick, site: site.to_string(), kind: kind.to_string(), payload_digest: digest });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One tab-separated line per record: tick, site, kind, digest.
    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        for r in &self.records {
            writeln!(w, "{}\t{}\t{}\t{}", r.tick, r.site, r.kind, r.payload_digest)?;
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        hex::encode(Sha256::digest(&buf))
    }
}

/// Size of the coordinator's replica at one point in time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSample {
    pub tick: u64,
    pub total_nodes: usize,
    pub tombstones: usize,
    pub mean_tid_bytes: f64,
    pub epoch: u64,
}

pub fn write_metrics_csv(rows: &[MetricsSample], w: impl Write) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(["tick", "total_nodes", "tombstones", "mean_tid_bytes", "epoch"])?;
    }
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub ops_generated: usize,
    pub messages_sent: usize,
    pub flattens_committed: usize,
    pub flattens_aborted: usize,
    pub catch_ups: usize,
    pub final_tick: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiffField {
    Epoch,
    Text,
    LiveTids,
    /// Operations still pending, held or waiting for a later epoch.
    Buffered,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteDiff {
    pub site: SiteId,
    pub reference: SiteId,
    pub field: DiffField,
    pub detail: String,
}

impl fmt::Display for SiteDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} vs {}: {:?} ({})", self.site, self.reference, self.field, self.detail)
    }
}

/// Compares every site against the first one.
pub fn check_convergence(sites: &[Site]) -> (bool, Vec<SiteDiff>) {
    let mut diffs = Vec::new();
    let Some(reference) = sites.first() else { return (true, diffs) };
    let ref_text = reference.replica().text_bytes();
    let ref_tids = reference.replica().live_tids();
    for s in sites {
        let diff = |field, detail: String| SiteDiff {
            site: s.id().clone(),
            reference: reference.id().clone(),
            field,
            detail,
        };
        let buffered = s.pending().len() + s.held().len() + s.future_len();
        if buffered > 0 {
            diffs.push(diff(DiffField::Buffered, format!("{buffered} operations not applied")));
        }
        if s.id() == reference.id() {
            continue;
        }
        if s.epoch() != reference.epoch() {
            diffs.push(diff(DiffField::Epoch, format!("{} vs {}", s.epoch(), reference.epoch())));
            continue;
        }
        let text = s.replica().text_bytes();
        if text != ref_text {
            let at = text.iter().zip(&ref_text).take_while(|(a, b)| a == b).count();
            diffs.push(diff(
                DiffField::Text,
                format!("lengths {} vs {}, first difference at byte {at}", text.len(), ref_text.len()),
            ));
        }
        let tids = s.replica().live_tids();
        if tids != ref_tids {
            let missing = ref_tids.iter().filter(|t| tids.binary_search(t).is_err()).count();
            let extra = tids.iter().filter(|t| ref_tids.binary_search(t).is_err()).count();
            diffs.push(diff(DiffField::LiveTids, format!("{missing} missing, {extra} extra")));
        }
    }
    (diffs.is_empty(), diffs)
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("site {site}: rebuilt epoch {epoch} tree does not match the coordinator's")]
    SealMismatch { site: SiteId, epoch: u64 },
    #[error("sites did not converge: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    NonConvergence(Vec<SiteDiff>),
}

#[derive(Clone, Debug)]
pub struct SimReport {
    pub converged: bool,
    /// Digest over every site's replica digest, in site order.
    pub final_digest: String,
    pub metrics: Vec<MetricsSample>,
    pub event_log: EventLog,
    pub stats: SimStats,
    pub divergence: Vec<SiteDiff>,
    pub sites: Vec<Site>,
}

impl SimReport {
    pub fn into_result(self) -> Result<SimReport, SimError> {
        if self.converged {
            Ok(self)
        } else {
            Err(SimError::NonConvergence(self.divergence))
        }
    }
}

#[derive(Debug)]
enum Event {
    Deliver { to: usize, msg: Message },
    Generate,
    FlattenAttempt,
    Timeout { round: u64 },
    Crash(usize),
    Recover(usize),
}

impl Event {
    /// Site that must be up to handle the event.
    fn target(&self) -> Option<usize> {
        match self {
            Event::Deliver { to, .. } => Some(*to),
            Event::FlattenAttempt | Event::Timeout { .. } => Some(COORDINATOR),
            Event::Generate | Event::Crash(_) | Event::Recover(_) => None,
        }
    }
}

const COORDINATOR: usize = 0;
const MAX_FLATTEN_RETRIES: u32 = 50;
const MAX_SEND_ATTEMPTS: u32 = 16;

struct OpenRound {
    id: u64,
    votes: BTreeMap<usize, VoteDecision>,
}

#[derive(Default)]
struct FlattenState {
    wanted: bool,
    retries: u32,
    last_round: u64,
    open: Option<OpenRound>,
}

struct Sim<'c> {
    cfg: &'c SimConfig,
    rng: ChaCha8Rng,
    now: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Event>,
    sites: Vec<Site>,
    index: BTreeMap<SiteId, usize>,
    down: Vec<bool>,
    parked: Vec<Vec<Event>>,
    last_decided: Vec<u64>,
    batches: Vec<BTreeMap<u64, CatchUpBatch>>,
    flatten: FlattenState,
    since_flatten: usize,
    skipped: bool,
    log: EventLog,
    stats: SimStats,
    metrics: Vec<MetricsSample>,
    next_sample: u64,
}

/// Runs one simulation to quiescence.
pub fn run(config: &SimConfig) -> Result<SimReport, SimError> {
    config.validate()?;
    let mut sim = Sim::new(config);
    sim.run()?;
    Ok(sim.finish())
}

fn site_name(cfg: &SimConfig, i: usize) -> SiteId {
    if i < cfg.core_count {
        SiteId::from(format!("c{i}").as_str())
    } else {
        SiteId::from(format!("n{}", i - cfg.core_count).as_str())
    }
}

impl<'c> Sim<'c> {
    fn new(cfg: &'c SimConfig) -> Self {
        let n = cfg.site_count();
        let sites: Vec<Site> = (0..n)
            .map(|i| Site::new(site_name(cfg, i), if i < cfg.core_count { Role::Core } else { Role::Nebula }))
            .collect();
        let index = sites.iter().enumerate().map(|(i, s)| (s.id().clone(), i)).collect();
        let mut sim = Sim {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            sites,
            index,
            down: vec![false; n],
            parked: (0..n).map(|_| Vec::new()).collect(),
            last_decided: vec![0; n],
            batches: (0..n).map(|_| BTreeMap::new()).collect(),
            flatten: FlattenState::default(),
            since_flatten: 0,
            skipped: false,
            log: EventLog::default(),
            stats: SimStats::default(),
            metrics: Vec::new(),
            next_sample: 0,
        };
        for c in &cfg.crashes {
            sim.schedule(c.down, Event::Crash(c.site));
            sim.schedule(c.up, Event::Recover(c.site));
        }
        if cfg.op_count > 0 {
            sim.schedule(1, Event::Generate);
        }
        sim
    }

    fn schedule(&mut self, tick: u64, event: Event) {
        self.seq += 1;
        self.queue.insert((tick, self.seq), event);
    }

    fn is_core(&self, i: usize) -> bool {
        i < self.cfg.core_count
    }

    fn run(&mut self) -> Result<(), SimError> {
        while let Some(((tick, _), event)) = self.queue.pop_first() {
            self.now = tick;
            while self.next_sample <= tick {
                self.sample(self.next_sample);
                self.next_sample += self.cfg.metrics_every;
            }
            match event.target() {
                Some(t) if self.down[t] => self.parked[t].push(event),
                _ => self.handle(event)?,
            }
        }
        self.stats.final_tick = self.now;
        self.sample(self.now);
        Ok(())
    }

    fn sample(&mut self, tick: u64) {
        let doc = self.sites[COORDINATOR].replica();
        let st = doc.cached_stats();
        let row = MetricsSample {
            tick,
            total_nodes: st.total_nodes(),
            tombstones: st.tombstone_count,
            mean_tid_bytes: st.mean_tid_encoded_bytes,
            epoch: doc.epoch(),
        };
        if self.metrics.last().is_none_or(|r| r.tick != tick) {
            self.metrics.push(row);
        }
    }

    fn handle(&mut self, event: Event) -> Result<(), SimError> {
        match event {
            Event::Deliver { to, msg } => self.on_message(to, msg),
            Event::Generate => {
                self.generate();
                Ok(())
            }
            Event::FlattenAttempt => self.try_flatten(),
            Event::Timeout { round } => self.on_timeout(round),
            Event::Crash(i) => {
                self.down[i] = true;
                self.log.push(self.now, self.sites[i].id(), "crash", &());
                Ok(())
            }
            Event::Recover(i) => {
                self.down[i] = false;
                self.log.push(self.now, self.sites[i].id(), "recover", &());
                for e in std::mem::take(&mut self.parked[i]) {
                    self.handle(e)?;
                }
                Ok(())
            }
        }
    }

    fn generate(&mut self) {
        let n = self.sites.len();
        let i = self.rng.gen_range(0..n);
        if self.down[i] || self.sites[i].is_prepared() {
            self.schedule(self.now + 1, Event::Generate);
            return;
        }
        let site = &mut self.sites[i];
        let len = site.replica().len();
        let edit = if len > 0 && self.rng.gen_bool(self.cfg.delete_ratio) {
            LocalEdit::DeleteAt { index: self.rng.gen_range(0..len) }
        } else {
            let atom = Atom::from(format!("{}:{} ", site.id(), self.stats.ops_generated));
            LocalEdit::InsertAt { index: self.rng.gen_range(0..=len), atom }
        };
        let op = site.submit_local(edit).expect("generated edits are valid");
        self.log.push(self.now, self.sites[i].id(), "edit", &op);
        self.stats.ops_generated += 1;
        self.dispatch(i);

        self.since_flatten += 1;
        if self.cfg.flatten_interval > 0 && self.since_flatten >= self.cfg.flatten_interval {
            self.since_flatten = 0;
            self.flatten.retries = 0;
            if !self.flatten.wanted {
                self.flatten.wanted = true;
                self.schedule(self.now, Event::FlattenAttempt);
            }
        }
        if self.stats.ops_generated < self.cfg.op_count {
            let mut gap = self.rng.gen_range(1..=2);
            if self.rng.gen_bool(self.cfg.pause_prob) {
                gap += self.rng.gen_range(2 * self.cfg.max_delay..=6 * self.cfg.max_delay);
            }
            self.schedule(self.now + gap, Event::Generate);
        }
    }

    /// Sends what site `i` has produced: its outbox, and for the coordinator
    /// the nebula operations it recorded.
    fn dispatch(&mut self, i: usize) {
        let out = self.sites[i].take_outbox();
        let recorded = self.sites[i].take_recorded();
        let n = self.sites.len();
        for op in out {
            for j in 0..n {
                if j != i && (self.is_core(i) || self.is_core(j)) {
                    self.send(i, j, Message::Op(op.clone()));
                }
            }
        }
        if i != COORDINATOR {
            return;
        }
        for op in recorded {
            let origin = self.index[&op.origin];
            if self.is_core(origin) {
                continue;
            }
            for j in self.cfg.core_count..n {
                if j != origin {
                    self.send(i, j, Message::Op(op.clone()));
                }
            }
        }
    }

    fn send(&mut self, from: usize, to: usize, msg: Message) {
        if self.cfg.inject_skip_delivery
            && !self.skipped
            && matches!(msg, Message::Op(_))
            && (self.is_core(to) || self.cfg.core_count == 1)
        {
            self.skipped = true;
            self.log.push(self.now, self.sites[to].id(), "skip", &msg);
            return;
        }
        self.stats.messages_sent += 1;
        let copies = if self.rng.gen_bool(self.cfg.duplicate_prob) { 2 } else { 1 };
        for _ in 0..copies {
            let at = self.arrival(from, to);
            self.schedule(at, Event::Deliver { to, msg: msg.clone() });
        }
    }

    fn arrival(&mut self, from: usize, to: usize) -> u64 {
        let d = self.cfg.max_delay;
        let mut at = self.now + self.rng.gen_range(1..=d);
        let mut attempts = 1;
        while attempts < MAX_SEND_ATTEMPTS && self.rng.gen_bool(self.cfg.drop_prob) {
            at += d + self.rng.gen_range(1..=d);
            attempts += 1;
        }
        for p in &self.cfg.partitions {
            let crosses = p.group.contains(&from) != p.group.contains(&to);
            if crosses && (p.start..p.end).contains(&self.now) {
                at = at.max(p.end + self.rng.gen_range(1..=d));
            }
        }
        at
    }

    fn on_message(&mut self, to: usize, msg: Message) -> Result<(), SimError> {
        self.log.push(self.now, self.sites[to].id(), msg.kind(), &msg);
        match msg {
            Message::Op(op) => {
                self.sites[to].deliver(op);
            }
            Message::Prepare(p) => {
                if self.last_decided[to] < p.round {
                    let vote = self.sites[to].prepare(&p);
                    self.send(to, COORDINATOR, Message::Vote(vote));
                }
            }
            Message::Vote(v) => self.on_vote(v)?,
            Message::Decision(d) => {
                self.last_decided[to] = self.last_decided[to].max(d.round);
                self.sites[to].apply_decision(&d)?;
            }
            Message::CatchUpBatch(b) => self.on_batch(to, b)?,
        }
        self.dispatch(to);
        Ok(())
    }

    fn try_flatten(&mut self) -> Result<(), SimError> {
        if !self.flatten.wanted || self.flatten.open.is_some() {
            return Ok(());
        }
        self.flatten.last_round += 1;
        let round = self.flatten.last_round;
        let coordinator = self.sites[COORDINATOR].id().clone();
        if let Some(i) = (1..self.cfg.core_count).find(|&i| self.down[i]) {
            let reason = AbortReason::CrashedMember(self.sites[i].id().clone());
            self.log.push(self.now, &coordinator, "flatten-abort", &(round, &reason));
            self.stats.flattens_aborted += 1;
            self.last_decided[COORDINATOR] = round;
            self.retry_flatten();
            return Ok(());
        }
        let msg = self.sites[COORDINATOR].prepare_message(round);
        self.log.push(self.now, &coordinator, "flatten-start", &msg);
        let own = self.sites[COORDINATOR].prepare(&msg);
        self.flatten.open = Some(OpenRound { id: round, votes: BTreeMap::new() });
        if own.decision == VoteDecision::No {
            return self.decide(FlattenOutcome::Aborted(AbortReason::NoVote(coordinator)));
        }
        if self.cfg.core_count == 1 {
            return self.decide(FlattenOutcome::Committed(msg.old_epoch + 1));
        }
        for j in 1..self.cfg.core_count {
            self.send(COORDINATOR, j, Message::Prepare(msg.clone()));
        }
        let timeout = self.now + 6 * self.cfg.max_delay + 10;
        self.schedule(timeout, Event::Timeout { round });
        Ok(())
    }

    fn retry_flatten(&mut self) {
        if self.flatten.retries >= MAX_FLATTEN_RETRIES {
            self.flatten.wanted = false;
            return;
        }
        self.flatten.retries += 1;
        let d = self.cfg.max_delay;
        let at = self.now + 3 * d + self.rng.gen_range(0..=d);
        self.schedule(at, Event::FlattenAttempt);
    }

    fn on_vote(&mut self, vote: Vote) -> Result<(), SimError> {
        let Some(open) = self.flatten.open.as_mut() else { return Ok(()) };
        if open.id != vote.round {
            return Ok(());
        }
        let voter = self.index[&vote.voter];
        open.votes.insert(voter, vote.decision);
        if vote.decision == VoteDecision::No {
            return self.decide(FlattenOutcome::Aborted(AbortReason::NoVote(vote.voter)));
        }
        if open.votes.len() + 1 == self.cfg.core_count {
            let new_epoch = self.sites[COORDINATOR].epoch() + 1;
            return self.decide(FlattenOutcome::Committed(new_epoch));
        }
        Ok(())
    }

    fn on_timeout(&mut self, round: u64) -> Result<(), SimError> {
        let Some(open) = self.flatten.open.as_ref() else { return Ok(()) };
        if open.id != round {
            return Ok(());
        }
        let silent: Vec<usize> = (1..self.cfg.core_count).filter(|i| !open.votes.contains_key(i)).collect();
        let reason = match silent.iter().find(|&&i| self.down[i]) {
            Some(&i) => AbortReason::CrashedMember(self.sites[i].id().clone()),
            None => AbortReason::Timeout(self.sites[silent[0]].id().clone()),
        };
        self.decide(FlattenOutcome::Aborted(reason))
    }

    fn decide(&mut self, outcome: FlattenOutcome) -> Result<(), SimError> {
        let open = self.flatten.open.take().expect("a round is open");
        let old_epoch = self.sites[COORDINATOR].epoch();
        let mut decision = Decision { round: open.id, outcome: outcome.clone(), new_epoch: old_epoch + 1, doc_digest: None };
        self.sites[COORDINATOR].apply_decision(&decision)?;
        self.last_decided[COORDINATOR] = open.id;
        let committed = matches!(outcome, FlattenOutcome::Committed(_));
        if committed {
            decision.doc_digest = Some(self.sites[COORDINATOR].replica().digest());
        }
        let coordinator = self.sites[COORDINATOR].id().clone();
        self.log.push(self.now, &coordinator, "flatten-decision", &decision);
        for j in 1..self.cfg.core_count {
            self.send(COORDINATOR, j, Message::Decision(decision.clone()));
        }
        if committed {
            self.stats.flattens_committed += 1;
            self.flatten.wanted = false;
            self.flatten.retries = 0;
            let ops = self.sites[COORDINATOR].archived_log(old_epoch).map(|l| l.ops().to_vec()).unwrap_or_default();
            let seal = EpochSeal { new_epoch: old_epoch + 1, doc_digest: decision.doc_digest.clone().unwrap() };
            let batch = CatchUpBatch { epoch: old_epoch, ops, seal };
            for j in self.cfg.core_count..self.sites.len() {
                self.send(COORDINATOR, j, Message::CatchUpBatch(batch.clone()));
            }
        } else {
            self.stats.flattens_aborted += 1;
            self.retry_flatten();
        }
        self.dispatch(COORDINATOR);
        Ok(())
    }

    /// Catches nebula site `i` up through every consecutive epoch it has a
    /// batch for.
    fn on_batch(&mut self, i: usize, batch: CatchUpBatch) -> Result<(), SimError> {
        if batch.epoch >= self.sites[i].epoch() {
            self.batches[i].insert(batch.epoch, batch);
        }
        while let Some(b) = self.batches[i].remove(&self.sites[i].epoch()) {
            let report = self.sites[i].catch_up_with_report(&b.ops, b.seal.new_epoch)?;
            if report.skeleton_digest != b.seal.doc_digest {
                return Err(SimError::SealMismatch { site: self.sites[i].id().clone(), epoch: b.seal.new_epoch });
            }
            self.stats.catch_ups += 1;
            self.log.push(self.now, self.sites[i].id(), "caught-up", &report.emitted);
        }
        Ok(())
    }

    fn finish(self) -> SimReport {
        let (converged, divergence) = check_convergence(&self.sites);
        let mut h = Sha256::new();
        for s in &self.sites {
            h.update(s.replica().digest());
        }
        SimReport {
            converged,
            final_digest: hex::encode(h.finalize()),
            metrics: self.metrics,
            event_log: self.log,
            stats: self.stats,
            divergence,
            sites: self.sites,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(core: usize, nebula: usize, ops: usize) -> SimConfig {
        SimConfig { core_count: core, nebula_count: nebula, op_count: ops, ..SimConfig::default() }
    }

    #[test]
    fn single_site_converges() {
        let report = run(&cfg(1, 0, 100)).unwrap();
        assert!(report.converged);
        assert_eq!(report.stats.ops_generated, 100);
    }

    #[test]
    fn mixed_run_converges() {
        let config = SimConfig {
            seed: 42,
            delete_ratio: 0.4,
            flatten_interval: 500,
            ..cfg(3, 2, 2000)
        };
        let report = run(&config).unwrap();
        assert!(report.converged, "{:?}", report.divergence);
        assert!(report.stats.flattens_committed > 0);
        assert!(report.stats.catch_ups > 0);
    }

    #[test]
    fn deterministic() {
        let config = SimConfig { seed: 7, flatten_interval: 60, ..cfg(3, 2, 300) };
        let a = run(&config).unwrap();
        let b = run(&config).unwrap();
        assert_eq!(a.event_log, b.event_log);
        assert_eq!(a.final_digest, b.final_digest);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn skipped_delivery_diverges() {
        let config = SimConfig { inject_skip_delivery: true, duplicate_prob: 0.0, ..cfg(2, 0, 50) };
        let report = run(&config).unwrap();
        assert!(!report.converged);
        assert!(matches!(report.into_result(), Err(SimError::NonConvergence(_))));
    }

    #[test]
    fn crashes_and_partitions() {
        let config = SimConfig {
            seed: 3,
            flatten_interval: 100,
            crashes: vec![CrashWindow { site: 1, down: 50, up: 400 }, CrashWindow { site: 3, down: 10, up: 900 }],
            partitions: vec![Partition { start: 200, end: 600, group: vec![0, 2] }],
            ..cfg(3, 2, 800)
        };
        let report = run(&config).unwrap();
        assert!(report.converged, "{:?}", report.divergence);
        assert!(report.stats.flattens_committed > 0);
    }

    #[test]
    fn invalid_configs() {
        assert!(run(&cfg(0, 1, 10)).is_err());
        assert!(run(&SimConfig { delete_ratio: 1.5, ..SimConfig::default() }).is_err());
        assert!(run(&SimConfig { max_delay: 0, ..SimConfig::default() }).is_err());
        let crash = CrashWindow { site: 9, down: 1, up: 2 };
        assert!(run(&SimConfig { crashes: vec![crash], ..SimConfig::default() }).is_err());
    }

    #[test]
    fn metrics_csv_header() {
        let mut buf = Vec::new();
        write_metrics_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "tick,total_nodes,tombstones,mean_tid_bytes,epoch\n");
        let report = run(&cfg(2, 1, 50)).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&report.metrics, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("tick,total_nodes,tombstones,mean_tid_bytes,epoch\n"));
        assert_eq!(text.lines().count(), report.metrics.len() + 1);
    }
}
