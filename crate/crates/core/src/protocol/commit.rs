//! Update-wins two-phase commit for flattening.
//!
//! The coordinator asks every core member to vote on its delivered operation
//! set for the current epoch. A member votes no if its own set differs or it
//! still has local or buffered updates in flight; a yes vote blocks the
//! member's updates until the decision arrives. Any no vote, crashed member
//! or missing reply aborts the flatten with no effect on any replica.

use serde::{Deserialize, Serialize};

use super::{ProtocolError, Role, Site};
use crate::tid::SiteId;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareMessage {
    pub round: u64,
    pub coordinator: SiteId,
    pub old_epoch: u64,
    pub op_set_digest: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VoteDecision {
    Yes,
    No,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub round: u64,
    pub voter: SiteId,
    pub decision: VoteDecision,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AbortReason {
    NoVote(SiteId),
    CrashedMember(SiteId),
    Timeout(SiteId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlattenOutcome {
    Committed(u64),
    Aborted(AbortReason),
}

/// Commit or abort, sent by the coordinator to every core member.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub round: u64,
    pub outcome: FlattenOutcome,
    pub new_epoch: u64,
    /// Digest of the coordinator's replica after flattening, on commit.
    pub doc_digest: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PrepareReply {
    Vote(Vote),
    Crashed,
    NoResponse,
}

/// A core member as seen by a coordinator.
pub trait CoreEndpoint {
    fn site_id(&self) -> SiteId;
    fn on_prepare(&mut self, msg: &PrepareMessage) -> PrepareReply;
    fn on_decision(&mut self, decision: &Decision) -> Result<(), ProtocolError>;
}

impl Site {
    pub fn prepare_message(&self, round: u64) -> PrepareMessage {
        PrepareMessage {
            round,
            coordinator: self.id.clone(),
            old_epoch: self.epoch(),
            op_set_digest: self.log.digest(),
        }
    }

    /// Yes iff this is an idle core site in the same epoch whose delivered
    /// set matches the coordinator's.
    pub fn vote_on_prepare(&self, msg: &PrepareMessage) -> Vote {
        let yes = self.role == Role::Core
            && self.prepared.is_none()
            && msg.old_epoch == self.epoch()
            && msg.op_set_digest == self.log.digest()
            && self.outbox.is_empty()
            && self.pending.is_empty();
        Vote {
            round: msg.round,
            voter: self.id.clone(),
            decision: if yes { VoteDecision::Yes } else { VoteDecision::No },
        }
    }

    /// Votes and, on yes, blocks updates until the decision.
    pub fn prepare(&mut self, msg: &PrepareMessage) -> Vote {
        let vote = self.vote_on_prepare(msg);
        if vote.decision == VoteDecision::Yes {
            self.prepared = Some(msg.round);
        }
        vote
    }

    pub fn prepared_round(&self) -> Option<u64> {
        self.prepared
    }

    /// Applies a decision for the round this site is prepared for. Decisions
    /// for other rounds only matter to a site that voted yes, so they are
    /// ignored.
    pub fn apply_decision(&mut self, decision: &Decision) -> Result<(), ProtocolError> {
        if self.prepared != Some(decision.round) {
            return Ok(());
        }
        match decision.outcome {
            FlattenOutcome::Committed(new_epoch) => self.commit_flatten(new_epoch),
            FlattenOutcome::Aborted(_) => {
                self.abort_flatten();
                Ok(())
            }
        }
    }
}

impl CoreEndpoint for Site {
    fn site_id(&self) -> SiteId {
        self.id.clone()
    }

    fn on_prepare(&mut self, msg: &PrepareMessage) -> PrepareReply {
        PrepareReply::Vote(self.prepare(msg))
    }

    fn on_decision(&mut self, decision: &Decision) -> Result<(), ProtocolError> {
        self.apply_decision(decision)
    }
}

/// A crashed member: the coordinator's failure detector reports it down.
pub struct Offline<'a>(pub &'a mut Site);

impl CoreEndpoint for Offline<'_> {
    fn site_id(&self) -> SiteId {
        self.0.id.clone()
    }

    fn on_prepare(&mut self, _: &PrepareMessage) -> PrepareReply {
        PrepareReply::Crashed
    }

    fn on_decision(&mut self, _: &Decision) -> Result<(), ProtocolError> {
        Ok(())
    }
}

/// A member whose vote never arrives.
pub struct Silent<'a>(pub &'a mut Site);

impl CoreEndpoint for Silent<'_> {
    fn site_id(&self) -> SiteId {
        self.0.id.clone()
    }

    fn on_prepare(&mut self, _: &PrepareMessage) -> PrepareReply {
        PrepareReply::NoResponse
    }

    fn on_decision(&mut self, _: &Decision) -> Result<(), ProtocolError> {
        Ok(())
    }
}

/// Runs one flatten round synchronously with `coordinator` and the other
/// core `members`.
pub fn initiate_flatten(
    coordinator: &mut Site,
    members: &mut [&mut dyn CoreEndpoint],
    round: u64,
) -> Result<FlattenOutcome, ProtocolError> {
    if coordinator.role != Role::Core {
        return Err(ProtocolError::WrongRole { expected: Role::Core });
    }
    let msg = coordinator.prepare_message(round);
    let own = coordinator.prepare(&msg);
    let mut outcome = None;
    if own.decision == VoteDecision::No {
        outcome = Some(FlattenOutcome::Aborted(AbortReason::NoVote(own.voter)));
    }

    let replies: Vec<(SiteId, PrepareReply)> = if outcome.is_none() {
        members.iter_mut().map(|m| (m.site_id(), m.on_prepare(&msg))).collect()
    } else {
        Vec::new()
    };
    let reason = replies
        .iter()
        .find(|(_, r)| *r == PrepareReply::Crashed)
        .map(|(id, _)| AbortReason::CrashedMember(id.clone()))
        .or_else(|| {
            replies.iter().find_map(|(id, r)| match r {
                PrepareReply::Vote(v) if v.decision == VoteDecision::No => Some(AbortReason::NoVote(id.clone())),
                _ => None,
            })
        })
        .or_else(|| {
            replies.iter().find(|(_, r)| *r == PrepareReply::NoResponse).map(|(id, _)| AbortReason::Timeout(id.clone()))
        });
    let outcome = outcome.unwrap_or_else(|| match reason {
        Some(reason) => FlattenOutcome::Aborted(reason),
        None => FlattenOutcome::Committed(msg.old_epoch + 1),
    });

    let mut decision = Decision { round, outcome: outcome.clone(), new_epoch: msg.old_epoch + 1, doc_digest: None };
    coordinator.apply_decision(&decision)?;
    if matches!(outcome, FlattenOutcome::Committed(_)) {
        decision.doc_digest = Some(coordinator.replica().digest());
    }
    for m in members.iter_mut() {
        m.on_decision(&decision)?;
    }
    Ok(outcome)
}
