//! Dispute protocol between a referee and training endpoints.
//!
//! The referee holds the program but never retrains it. When endpoint
//! commitments disagree, it first bisects over checkpoint commitments to
//! find the single diverging transition, then walks that transition's trace
//! to the first diverging node and decides the dispute from openings:
//! structural mismatches and fabricated input digests are settled by pure
//! hash checks, init-node outputs by membership proofs against the agreed
//! prior checkpoint (or the referee's own initial state and batch tensors),
//! and only a genuine output disagreement makes the referee recompute, and
//! then exactly one operator.
//!
//! Every query and response crosses an [`Exchange`], which both runs the
//! conversation live (logging a transcript) and replays a recorded
//! transcript while checking that the referee would have asked the same
//! questions. A transcript therefore doubles as checkable evidence.

mod referee;
mod wire;

pub use referee::{
    verify_evidence, ConvictionReason, DecisionCase, DuelRecord, Outcome, Referee, Verdict,
};
pub use wire::{
    decode_message, decode_query, encode_divergence, encode_message, encode_query, parse_transcript,
    read_header, Exchange, ExchangeStats, Frame, LiveExchange, ProtocolError, ReplayExchange,
    TranscriptHeader, FRAME_DIVERGENCE, FRAME_HEADER, FRAME_QUERY, FRAME_VERDICT, PARTY_REFEREE,
};

use crate::commit::{CheckpointCommitment, Digest, MerkleProof};
use crate::detops::Tensor;
use crate::graph::AugmentedCGNode;
use crate::trainer::TrainStats;

/// Referee-to-trainer requests. `step` always names a transition index: the
/// transition from checkpoint `step` to `step + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Query {
    /// The commitment to the final checkpoint.
    OutputCommit,
    /// Commitments at the bisection positions of `[lo, hi]` for this level.
    HashList { level: u32, lo: u64, hi: u64 },
    /// All node hashes of the trace of transition `step`, in node order.
    NodeHashSeq { step: u64 },
    /// Full opening of node `index` in the trace of transition `step`.
    NodeOpening { step: u64, index: u64 },
    /// The tensor at output `slot` of node `node` during transition `step`.
    TensorPayload { step: u64, node: String, slot: u32 },
    /// Proof that state tensor `name` at checkpoint `step` is the one
    /// committed under C_step (step >= 1).
    MembershipProof { step: u64, name: String },
}

impl Query {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Query::OutputCommit => "output_commit",
            Query::HashList { .. } => "hash_list",
            Query::NodeHashSeq { .. } => "node_hash_seq",
            Query::NodeOpening { .. } => "node_opening",
            Query::TensorPayload { .. } => "tensor_payload",
            Query::MembershipProof { .. } => "membership_proof",
        }
    }
}

/// Proof that a state tensor at checkpoint `step` has a given digest: an
/// opening of the node that produced it in the trace committed by C_step,
/// plus the Merkle path placing that node's hash under the root.
#[derive(Debug, Clone, PartialEq)]
pub struct StateProof {
    pub node: AugmentedCGNode,
    pub slot: u32,
    pub path: MerkleProof,
}

/// Trainer responses. Refusal is always available and always loses.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    OutputCommit(CheckpointCommitment),
    HashList(Vec<CheckpointCommitment>),
    NodeHashSeq(Vec<Digest>),
    NodeOpening(AugmentedCGNode),
    MembershipProof(StateProof),
    TensorPayload(Tensor),
    Refusal { reason: String },
}

impl Message {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Message::OutputCommit(_) => "output_commit",
            Message::HashList(_) => "hash_list",
            Message::NodeHashSeq(_) => "node_hash_seq",
            Message::NodeOpening(_) => "node_opening",
            Message::MembershipProof(_) => "membership_proof",
            Message::TensorPayload(_) => "tensor_payload",
            Message::Refusal { .. } => "refusal",
        }
    }
}

/// One party in a dispute, as the referee sees it.
pub trait TrainerEndpoint {
    fn name(&self) -> &str;
    fn answer(&mut self, q: &Query) -> Message;
    fn stats(&self) -> TrainStats;
}

/// The checkpoint positions a level inspects inside `[lo, hi]`: endpoints
/// plus up to `k - 1` interior points at ceil-spaced offsets, deduplicated.
/// Both sides of the protocol compute this independently.
pub fn bisection_positions(lo: u64, hi: u64, k: u64) -> Vec<u64> {
    assert!(lo < hi && k >= 1);
    let len = hi - lo;
    let mut out = Vec::with_capacity((k + 1).min(len + 1) as usize);
    for j in 0..=k {
        let p = lo + (j * len).div_ceil(k);
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    out
}

/// Segment count for a bisection level; the last schedule entry repeats for
/// all deeper levels.
pub fn schedule_k(schedule: &[u64], level: u32) -> u64 {
    let i = (level as usize).min(schedule.len().saturating_sub(1));
    schedule.get(i).copied().unwrap_or(2).max(2)
}

/// Expected fraction of training a single honest trainer re-executes to
/// answer one full dispute, for a uniform per-level segment count of `n`
/// (level sizes shrink geometrically by `1/(n-1)` as intervals of length L
/// re-execute L steps and then recurse into L/n).
pub fn estimate_reexecution_fraction(n: u64) -> f64 {
    assert!(n >= 2, "bisection needs at least two segments per level");
    1.0 / (n as f64 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_cover_endpoints_without_duplicates() {
        for (lo, hi, k) in [(0u64, 8000, 20), (0, 7, 20), (5, 6, 4), (13, 413, 20), (0, 1, 2)] {
            let p = bisection_positions(lo, hi, k);
            assert_eq!(*p.first().unwrap(), lo);
            assert_eq!(*p.last().unwrap(), hi);
            assert!(p.windows(2).all(|w| w[0] < w[1]), "{p:?}");
            assert!(p.len() as u64 <= k + 1);
        }
    }

    #[test]
    fn positions_every_step_when_k_exceeds_length() {
        let p = bisection_positions(10, 14, 20);
        assert_eq!(p, vec![10, 11, 12, 13, 14]);
    }

    #[test]
    fn positions_match_ceiling_spacing() {
        let p = bisection_positions(0, 8000, 20);
        assert_eq!(p.len(), 21);
        assert_eq!(p[1], 400);
        assert_eq!(p[19], 7600);
        let q = bisection_positions(0, 410, 20);
        assert_eq!(q[1], 21); // ceil(410/20)
    }

    #[test]
    fn schedule_repeats_last_entry() {
        assert_eq!(schedule_k(&[20, 10], 0), 20);
        assert_eq!(schedule_k(&[20, 10], 1), 10);
        assert_eq!(schedule_k(&[20, 10], 7), 10);
        assert_eq!(schedule_k(&[20], 3), 20);
    }

    #[test]
    fn reexecution_fraction_matches_schedule() {
        assert!((estimate_reexecution_fraction(20) - 1.0 / 19.0).abs() < 1e-12);
        assert!((estimate_reexecution_fraction(2) - 1.0).abs() < 1e-12);
    }
}
