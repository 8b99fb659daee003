//! The referee: resolves commitment disputes without retraining.
//!
//! Given parties that each claim a final checkpoint commitment, the referee
//! groups identical claims, then repeatedly duels the lowest-indexed pair of
//! surviving parties whose claims differ. Every duel convicts at least one
//! party, and a party that answers honestly from a faithful run is never
//! convicted, so with at least one honest party the surviving claim is the
//! honest one.
//!
//! A duel has two phases. Bisection narrows the disagreement to a single
//! transition d where the parties agree on checkpoint d but not d + 1.
//! Trace comparison then walks the committed node hashes of transition d to
//! the first diverging node and decides from its openings, in order: a spec
//! that differs from the canonical graph loses outright; a fabricated input
//! digest is exposed by opening the already-agreed source node; a diverging
//! init-node output is checked against the referee's own initial state or
//! batch (step 0) or a membership proof under the agreed prior checkpoint;
//! only a genuine output disagreement on agreed inputs makes the referee
//! recompute, and then exactly one operator.

use crate::commit::{hash_node, hash_tensor, merkle_root, merkle_verify, CheckpointCommitment, Digest};
use crate::detops::{OpCtx, Tensor};
use crate::graph::{compute_node, AugmentedCGNode, OpKind};
use crate::protocol::wire::{
    encode_divergence, read_header, Exchange, ProtocolError, ReplayExchange, TranscriptHeader,
    FRAME_DIVERGENCE, FRAME_HEADER, FRAME_VERDICT,
};
use crate::protocol::{bisection_positions, schedule_k, Message, Query};
use crate::trainer::{PreparedProgram, ProgramError, TrainingProgram};
use std::fmt;

/// Why a party was convicted. Reasons either point at provable
/// inconsistencies in the party's own claims or at a failure to answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConvictionReason {
    /// Refused a query it was obligated to answer.
    Refused { query: String },
    /// Answered with something structurally unusable.
    MalformedAnswer { detail: String },
    /// A hash list contradicted the party's own earlier claims at an
    /// interval endpoint.
    BoundaryContradiction { level: u32, position: u64 },
    /// Claimed or sent a trace whose length differs from the graph.
    TraceLengthMismatch { step: u64 },
    /// Sent node hashes that do not merkleize to the committed root.
    TraceRootMismatch { step: u64 },
    /// Sent a node opening that does not hash to the committed entry.
    OpeningMismatch { step: u64, index: u64 },
    /// Committed a node whose spec differs from the canonical graph.
    SpecMismatch { step: u64, node: String },
    /// Committed an input digest that differs from the agreed source output.
    InputDigestMismatch { step: u64, node: String, slot: u32 },
    /// Committed an init-node output that differs from the referee's own
    /// initial state tensor.
    InitStateMismatch { step: u64, node: String },
    /// Committed a data-node output that differs from the referee's batch.
    BatchMismatch { step: u64, node: String },
    /// Failed to prove a claimed state value against the agreed checkpoint.
    StateProofInvalid { step: u64, node: String },
    /// Failed to substantiate an agreed digest with a matching payload.
    BadPayload { step: u64, node: String, slot: u32 },
    /// Committed an output that differs from the referee's recomputation.
    OutputMismatch { step: u64, node: String },
}

impl fmt::Display for ConvictionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ConvictionReason::*;
        match self {
            Refused { query } => write!(f, "refused query={query}"),
            MalformedAnswer { detail } => write!(f, "malformed_answer {detail}"),
            BoundaryContradiction { level, position } => {
                write!(f, "boundary_contradiction level={level} position={position}")
            }
            TraceLengthMismatch { step } => write!(f, "trace_length_mismatch step={step}"),
            TraceRootMismatch { step } => write!(f, "trace_root_mismatch step={step}"),
            OpeningMismatch { step, index } => write!(f, "opening_mismatch step={step} index={index}"),
            SpecMismatch { step, node } => write!(f, "spec_mismatch step={step} node={node}"),
            InputDigestMismatch { step, node, slot } => {
                write!(f, "input_digest_mismatch step={step} node={node} slot={slot}")
            }
            InitStateMismatch { step, node } => write!(f, "init_state_mismatch step={step} node={node}"),
            BatchMismatch { step, node } => write!(f, "batch_mismatch step={step} node={node}"),
            StateProofInvalid { step, node } => write!(f, "state_proof_invalid step={step} node={node}"),
            BadPayload { step, node, slot } => {
                write!(f, "bad_payload step={step} node={node} slot={slot}")
            }
            OutputMismatch { step, node } => write!(f, "output_mismatch step={step} node={node}"),
        }
    }
}

/// How the deciding duel classified the first diverging node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionCase {
    /// The opened spec differed from the canonical graph.
    SpecMismatch,
    /// The parties committed different input digests.
    InputDigest,
    /// An init node's output was settled without recomputation.
    InitState,
    /// The referee recomputed one operator on agreed inputs.
    Recompute,
}

impl DecisionCase {
    pub fn name(&self) -> &'static str {
        match self {
            DecisionCase::SpecMismatch => "spec_mismatch",
            DecisionCase::InputDigest => "input_digest",
            DecisionCase::InitState => "init_state",
            DecisionCase::Recompute => "recompute",
        }
    }
}

/// One duel between two parties with differing claims.
#[derive(Debug, Clone, PartialEq)]
pub struct DuelRecord {
    pub left: String,
    pub right: String,
    /// Diverging transition index, once bisection finished.
    pub step: Option<u64>,
    /// First diverging node, once trace comparison reached it.
    pub node: Option<String>,
    pub case: Option<DecisionCase>,
    pub convicted: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// Every party claimed the same commitment.
    NoDispute,
    /// At least one party was convicted; survivors share one claim.
    FraudProven,
    /// No party survived.
    AllConvicted,
}

impl Outcome {
    pub fn name(&self) -> &'static str {
        match self {
            Outcome::NoDispute => "no_dispute",
            Outcome::FraudProven => "fraud_proven",
            Outcome::AllConvicted => "all_convicted",
        }
    }
}

/// The referee's decision, pure function of the program and the recorded
/// answers. Its canonical text is the final transcript frame, so replaying
/// a transcript re-derives and re-checks it.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub outcome: Outcome,
    pub accepted: Option<CheckpointCommitment>,
    pub accepted_parties: Vec<String>,
    pub convictions: Vec<(String, ConvictionReason)>,
    pub duels: Vec<DuelRecord>,
    /// Graph operators the referee actually recomputed.
    pub ops_executed: u64,
}

impl Verdict {
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("outcome = {}\n", self.outcome.name()));
        match &self.accepted {
            Some(c) => out.push_str(&format!("accepted = {}\n", hex::encode(c.to_bytes()))),
            None => out.push_str("accepted = none\n"),
        }
        let parties =
            if self.accepted_parties.is_empty() { "-".into() } else { self.accepted_parties.join(",") };
        out.push_str(&format!("accepted_parties = {parties}\n"));
        out.push_str(&format!("ops_executed = {}\n", self.ops_executed));
        out.push_str(&format!("convictions = {}\n", self.convictions.len()));
        for (i, (party, reason)) in self.convictions.iter().enumerate() {
            out.push_str(&format!("conviction.{i} = {party}: {reason}\n"));
        }
        out.push_str(&format!("duels = {}\n", self.duels.len()));
        for (i, d) in self.duels.iter().enumerate() {
            let convicted = if d.convicted.is_empty() { "-".into() } else { d.convicted.join(",") };
            let case = d.case.map_or("-", |c| c.name());
            let step = d.step.map_or("-".into(), |s| s.to_string());
            let node = d.node.clone().unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "duel.{i} = {} vs {}: convicted={convicted} case={case} step={step} node={node}\n",
                d.left, d.right
            ));
        }
        out
    }
}

fn convict(fault: &mut [Option<ConvictionReason>; 2], s: usize, reason: ConvictionReason) {
    if fault[s].is_none() {
        fault[s] = Some(reason);
    }
}

fn wrong_kind(query: &Query, got: &Message) -> ConvictionReason {
    ConvictionReason::MalformedAnswer {
        detail: format!("answered {} with {}", query.kind_name(), got.kind_name()),
    }
}

fn refused(query: &Query) -> ConvictionReason {
    ConvictionReason::Refused { query: query.kind_name().into() }
}

pub struct Referee {
    prep: PreparedProgram,
    ctx: OpCtx,
    ops_executed: u64,
}

impl Referee {
    pub fn new(program: &TrainingProgram) -> Result<Referee, ProgramError> {
        Ok(Referee { prep: program.prepare()?, ctx: OpCtx::serial(), ops_executed: 0 })
    }

    pub fn prepared(&self) -> &PreparedProgram {
        &self.prep
    }

    pub fn ops_executed(&self) -> u64 {
        self.ops_executed
    }

    /// Runs the full dispute over an exchange. Live, this interrogates real
    /// endpoints and records a transcript; in replay, it re-asks the same
    /// questions against the recorded answers.
    pub fn resolve(&mut self, ex: &mut dyn Exchange, roster: &[String]) -> Result<Verdict, ProtocolError> {
        if roster.len() < 2 {
            return Err(ProtocolError::Internal("need at least two parties".into()));
        }
        if roster.len() > 200 {
            return Err(ProtocolError::Internal("too many parties".into()));
        }
        self.ops_executed = 0;

        let header =
            TranscriptHeader { program_toml: self.prep.program.to_toml(), roster: roster.to_vec() };
        ex.note(FRAME_HEADER, &header.encode())?;

        let n = self.prep.program.steps;
        let g = self.prep.graph.len() as u64;
        let mut claims: Vec<Option<CheckpointCommitment>> = vec![None; roster.len()];
        let mut convicted: Vec<bool> = vec![false; roster.len()];
        let mut convictions: Vec<(String, ConvictionReason)> = Vec::new();

        let q = Query::OutputCommit;
        for i in 0..roster.len() {
            let bad = match ex.round_trip(i as u8, &q)? {
                Message::OutputCommit(c) if c.step == n && c.leaf_count == g => {
                    claims[i] = Some(c);
                    None
                }
                Message::OutputCommit(c) => Some(ConvictionReason::MalformedAnswer {
                    detail: format!(
                        "final commitment claims step {} with {} leaves, expected {n} with {g}",
                        c.step, c.leaf_count
                    ),
                }),
                Message::Refusal { .. } => Some(refused(&q)),
                other => Some(wrong_kind(&q, &other)),
            };
            if let Some(reason) = bad {
                convicted[i] = true;
                convictions.push((roster[i].clone(), reason));
            }
        }

        let mut duels: Vec<DuelRecord> = Vec::new();
        let (accepted, accepted_parties) = loop {
            let alive: Vec<usize> = (0..roster.len()).filter(|&i| !convicted[i]).collect();
            let Some(&champ) = alive.first() else { break (None, Vec::new()) };
            let champ_claim = claims[champ].expect("surviving parties have claims");
            let challenger =
                alive[1..].iter().copied().find(|&i| claims[i] != Some(champ_claim));
            let Some(chal) = challenger else {
                break (Some(champ_claim), alive.iter().map(|&i| roster[i].clone()).collect());
            };
            let chal_claim = claims[chal].expect("surviving parties have claims");
            let (record, faults) =
                self.duel(ex, [champ, chal], [champ_claim, chal_claim], roster)?;
            if faults.is_empty() {
                return Err(ProtocolError::Internal("duel convicted nobody".into()));
            }
            for (i, reason) in faults {
                convicted[i] = true;
                convictions.push((roster[i].clone(), reason));
            }
            duels.push(record);
        };

        let outcome = if convictions.is_empty() {
            Outcome::NoDispute
        } else if accepted.is_some() {
            Outcome::FraudProven
        } else {
            Outcome::AllConvicted
        };
        let verdict = Verdict {
            outcome,
            accepted,
            accepted_parties,
            convictions,
            duels,
            ops_executed: self.ops_executed,
        };
        ex.note(FRAME_VERDICT, verdict.canonical_text().as_bytes())?;
        Ok(verdict)
    }

    /// One duel. Returns the record plus (party index, reason) convictions;
    /// every path convicts at least one of the two.
    // `for s in 0..2` loops index several side-parallel pairs at once and
    // feed `s` to convict(); iterator forms read worse here
    #[allow(clippy::needless_range_loop)]
    fn duel(
        &mut self,
        ex: &mut dyn Exchange,
        parties: [usize; 2],
        claims: [CheckpointCommitment; 2],
        roster: &[String],
    ) -> Result<(DuelRecord, Vec<(usize, ConvictionReason)>), ProtocolError> {
        let mut record = DuelRecord {
            left: roster[parties[0]].clone(),
            right: roster[parties[1]].clone(),
            step: None,
            node: None,
            case: None,
            convicted: Vec::new(),
        };
        let mut fault: [Option<ConvictionReason>; 2] = [None, None];
        let seal = |mut record: DuelRecord, fault: [Option<ConvictionReason>; 2]| {
            let mut out = Vec::new();
            for (s, f) in fault.into_iter().enumerate() {
                if let Some(reason) = f {
                    record.convicted.push(roster[parties[s]].clone());
                    out.push((parties[s], reason));
                }
            }
            debug_assert!(!out.is_empty(), "a duel must convict someone");
            (record, out)
        };

        let n = self.prep.program.steps;
        let g = self.prep.graph.len();

        // Phase 1: bisect to the diverging transition. Invariant: both
        // parties' claims agree at lo and differ at hi.
        let mut lo = 0u64;
        let mut hi = n;
        let mut agreed_lo = self.prep.c0;
        let mut claim_hi = claims;
        let mut level: u32 = 0;
        while hi - lo > 1 {
            let k = schedule_k(&self.prep.program.schedule, level);
            let positions = bisection_positions(lo, hi, k);
            let q = Query::HashList { level, lo, hi };
            let mut lists: [Vec<CheckpointCommitment>; 2] = [Vec::new(), Vec::new()];
            for s in 0..2 {
                match ex.round_trip(parties[s] as u8, &q)? {
                    Message::HashList(list) => {
                        if list.len() != positions.len() {
                            convict(
                                &mut fault,
                                s,
                                ConvictionReason::MalformedAnswer {
                                    detail: format!(
                                        "hash list for [{lo}, {hi}] has {} entries, expected {}",
                                        list.len(),
                                        positions.len()
                                    ),
                                },
                            );
                        } else if let Some((e, &p)) =
                            list.iter().zip(&positions).find(|(e, &p)| e.step != p)
                        {
                            convict(
                                &mut fault,
                                s,
                                ConvictionReason::MalformedAnswer {
                                    detail: format!(
                                        "hash list entry for position {p} claims step {}",
                                        e.step
                                    ),
                                },
                            );
                        } else if list[0] != agreed_lo {
                            convict(
                                &mut fault,
                                s,
                                ConvictionReason::BoundaryContradiction { level, position: lo },
                            );
                        } else if *list.last().unwrap() != claim_hi[s] {
                            convict(
                                &mut fault,
                                s,
                                ConvictionReason::BoundaryContradiction { level, position: hi },
                            );
                        } else {
                            lists[s] = list;
                        }
                    }
                    Message::Refusal { .. } => convict(&mut fault, s, refused(&q)),
                    other => convict(&mut fault, s, wrong_kind(&q, &other)),
                }
            }
            if fault.iter().any(Option::is_some) {
                return Ok(seal(record, fault));
            }
            let j = (0..positions.len())
                .find(|&j| lists[0][j] != lists[1][j])
                .expect("lists are pinned to differing claims at hi");
            ex.note(FRAME_DIVERGENCE, &encode_divergence(level, j as u64, positions[j - 1], positions[j]))?;
            agreed_lo = lists[0][j - 1];
            claim_hi = [lists[0][j], lists[1][j]];
            lo = positions[j - 1];
            hi = positions[j];
            level += 1;
        }
        let d = lo;
        record.step = Some(d);
        let h_start = agreed_lo;

        // Phase 2: find the first diverging node of transition d.
        for s in 0..2 {
            if claim_hi[s].leaf_count != g as u64 {
                convict(&mut fault, s, ConvictionReason::TraceLengthMismatch { step: d });
            }
        }
        if fault.iter().any(Option::is_some) {
            return Ok(seal(record, fault));
        }

        let q = Query::NodeHashSeq { step: d };
        let mut seqs: [Vec<Digest>; 2] = [Vec::new(), Vec::new()];
        for s in 0..2 {
            match ex.round_trip(parties[s] as u8, &q)? {
                Message::NodeHashSeq(seq) => {
                    if seq.len() != g {
                        convict(&mut fault, s, ConvictionReason::TraceLengthMismatch { step: d });
                    } else if merkle_root(&seq).expect("graph is non-empty") != claim_hi[s].root {
                        convict(&mut fault, s, ConvictionReason::TraceRootMismatch { step: d });
                    } else {
                        seqs[s] = seq;
                    }
                }
                Message::Refusal { .. } => convict(&mut fault, s, refused(&q)),
                other => convict(&mut fault, s, wrong_kind(&q, &other)),
            }
        }
        if fault.iter().any(Option::is_some) {
            return Ok(seal(record, fault));
        }
        let j2 = (0..g)
            .find(|&j| seqs[0][j] != seqs[1][j])
            .expect("verified sequences under differing roots must differ");
        let canon = &self.prep.graph.nodes[j2];
        record.node = Some(canon.id.clone());

        let q = Query::NodeOpening { step: d, index: j2 as u64 };
        let mut openings: [Option<AugmentedCGNode>; 2] = [None, None];
        for s in 0..2 {
            match ex.round_trip(parties[s] as u8, &q)? {
                Message::NodeOpening(node) => {
                    if hash_node(&node) != seqs[s][j2] {
                        convict(
                            &mut fault,
                            s,
                            ConvictionReason::OpeningMismatch { step: d, index: j2 as u64 },
                        );
                    } else {
                        openings[s] = Some(node);
                    }
                }
                Message::Refusal { .. } => convict(&mut fault, s, refused(&q)),
                other => convict(&mut fault, s, wrong_kind(&q, &other)),
            }
        }
        if fault.iter().any(Option::is_some) {
            return Ok(seal(record, fault));
        }
        let nodes = [openings[0].take().unwrap(), openings[1].take().unwrap()];

        // The committed spec must be the canonical one.
        for s in 0..2 {
            if nodes[s].spec != *canon {
                convict(&mut fault, s, ConvictionReason::SpecMismatch { step: d, node: canon.id.clone() });
            }
        }
        if fault.iter().any(Option::is_some) {
            record.case = Some(DecisionCase::SpecMismatch);
            return Ok(seal(record, fault));
        }

        // With canonical specs, a committed node must carry the canonical
        // digest arities; anything else is co-signed garbage.
        let want_inputs = self.prep.graph.resolved_inputs(j2).len();
        for s in 0..2 {
            if nodes[s].input_hashes.len() != want_inputs
                || nodes[s].output_hashes.len() != canon.out_arity()
            {
                convict(
                    &mut fault,
                    s,
                    ConvictionReason::MalformedAnswer {
                        detail: format!("committed node {} has non-canonical digest arity", canon.id),
                    },
                );
            }
        }
        if fault.iter().any(Option::is_some) {
            return Ok(seal(record, fault));
        }

        if nodes[0].input_hashes != nodes[1].input_hashes {
            // The parties disagree on an input. Its source node is before
            // j2, hence agreed; either party's opening of it settles the
            // true digest.
            record.case = Some(DecisionCase::InputDigest);
            let p = (0..want_inputs)
                .find(|&p| nodes[0].input_hashes[p] != nodes[1].input_hashes[p])
                .unwrap();
            let (src, src_slot) = self.prep.graph.resolved_inputs(j2)[p];
            debug_assert!(src < j2, "inputs precede their consumers");
            let src_id = self.prep.graph.nodes[src].id.clone();
            let agreed = seqs[0][src];
            let q = Query::NodeOpening { step: d, index: src as u64 };
            let mut truth: Option<Digest> = None;
            for s in 0..2 {
                if truth.is_some() {
                    break;
                }
                match ex.round_trip(parties[s] as u8, &q)? {
                    Message::NodeOpening(node) if hash_node(&node) == agreed => {
                        match node.output_hashes.get(src_slot as usize) {
                            Some(digest) => truth = Some(*digest),
                            None => {
                                // both committed to this malformed source node
                                for t in 0..2 {
                                    convict(
                                        &mut fault,
                                        t,
                                        ConvictionReason::MalformedAnswer {
                                            detail: format!(
                                                "agreed node {src_id} lacks output slot {src_slot}"
                                            ),
                                        },
                                    );
                                }
                                return Ok(seal(record, fault));
                            }
                        }
                    }
                    Message::Refusal { .. } => convict(&mut fault, s, refused(&q)),
                    _ => convict(
                        &mut fault,
                        s,
                        ConvictionReason::BadPayload { step: d, node: src_id.clone(), slot: src_slot },
                    ),
                }
            }
            if let Some(truth) = truth {
                for s in 0..2 {
                    if nodes[s].input_hashes[p] != truth {
                        convict(
                            &mut fault,
                            s,
                            ConvictionReason::InputDigestMismatch {
                                step: d,
                                node: canon.id.clone(),
                                slot: p as u32,
                            },
                        );
                    }
                }
            }
            return Ok(seal(record, fault));
        }

        // Inputs agree, so the outputs must differ. Init nodes are settled
        // without recomputation; everything else gets recomputed once.
        match canon.kind {
            OpKind::ParamInit => {
                record.case = Some(DecisionCase::InitState);
                if d == 0 {
                    let truth = hash_tensor(&self.prep.init.tensors[&canon.id]);
                    for s in 0..2 {
                        if nodes[s].output_hashes[0] != truth {
                            convict(
                                &mut fault,
                                s,
                                ConvictionReason::InitStateMismatch { step: d, node: canon.id.clone() },
                            );
                        }
                    }
                } else {
                    let (want_idx, want_slot) = self.prep.graph.state_sources[&canon.id];
                    let src_spec = &self.prep.graph.nodes[want_idx];
                    let q = Query::MembershipProof { step: d, name: canon.id.clone() };
                    for s in 0..2 {
                        match ex.round_trip(parties[s] as u8, &q)? {
                            Message::MembershipProof(proof) => {
                                let ok = proof.slot == want_slot
                                    && proof.path.leaf_index == want_idx as u64
                                    && proof.path.leaf_count == g as u64
                                    && proof.node.spec == *src_spec
                                    && proof.node.output_hashes.len() > want_slot as usize
                                    && merkle_verify(&h_start.root, &hash_node(&proof.node), &proof.path)
                                    && proof.node.output_hashes[want_slot as usize]
                                        == nodes[s].output_hashes[0];
                                if !ok {
                                    convict(
                                        &mut fault,
                                        s,
                                        ConvictionReason::StateProofInvalid {
                                            step: d,
                                            node: canon.id.clone(),
                                        },
                                    );
                                }
                            }
                            Message::Refusal { .. } => convict(&mut fault, s, refused(&q)),
                            other => convict(&mut fault, s, wrong_kind(&q, &other)),
                        }
                    }
                }
            }
            OpKind::DataInit => {
                record.case = Some(DecisionCase::InitState);
                let batch = self.prep.batch(d);
                let truth = hash_tensor(&batch.tensors[&canon.id]);
                for s in 0..2 {
                    if nodes[s].output_hashes[0] != truth {
                        convict(
                            &mut fault,
                            s,
                            ConvictionReason::BatchMismatch { step: d, node: canon.id.clone() },
                        );
                    }
                }
            }
            _ => {
                record.case = Some(DecisionCase::Recompute);
                let inputs = self.prep.graph.resolved_inputs(j2);
                let agreed_inputs = &nodes[0].input_hashes;
                let mut tensors: Vec<Tensor> = Vec::with_capacity(inputs.len());
                for (p, &(src, src_slot)) in inputs.iter().enumerate() {
                    let src_id = self.prep.graph.nodes[src].id.clone();
                    let q = Query::TensorPayload { step: d, node: src_id.clone(), slot: src_slot };
                    let mut got: Option<Tensor> = None;
                    for s in 0..2 {
                        if got.is_some() || fault[s].is_some() {
                            continue;
                        }
                        match ex.round_trip(parties[s] as u8, &q)? {
                            Message::TensorPayload(t) if hash_tensor(&t) == agreed_inputs[p] => {
                                got = Some(t)
                            }
                            Message::Refusal { .. } => convict(&mut fault, s, refused(&q)),
                            _ => convict(
                                &mut fault,
                                s,
                                ConvictionReason::BadPayload {
                                    step: d,
                                    node: src_id.clone(),
                                    slot: src_slot,
                                },
                            ),
                        }
                    }
                    match got {
                        Some(t) => tensors.push(t),
                        // neither party substantiated the digest both signed
                        None => return Ok(seal(record, fault)),
                    }
                }
                let refs: Vec<&Tensor> = tensors.iter().collect();
                match compute_node(self.ctx, canon, &refs, d + 1) {
                    Ok(outs) => {
                        self.ops_executed += 1;
                        let truth: Vec<Digest> = outs.iter().map(hash_tensor).collect();
                        for s in 0..2 {
                            if nodes[s].output_hashes != truth {
                                convict(
                                    &mut fault,
                                    s,
                                    ConvictionReason::OutputMismatch { step: d, node: canon.id.clone() },
                                );
                            }
                        }
                        if fault.iter().all(Option::is_none) {
                            return Err(ProtocolError::Internal(
                                "diverging openings both match recomputation".into(),
                            ));
                        }
                    }
                    Err(e) => {
                        // agreed inputs the canonical operator rejects were
                        // co-signed by both parties
                        for s in 0..2 {
                            convict(
                                &mut fault,
                                s,
                                ConvictionReason::MalformedAnswer {
                                    detail: format!("agreed inputs rejected at {}: {e}", canon.id),
                                },
                            );
                        }
                    }
                }
            }
        }
        Ok(seal(record, fault))
    }
}

/// Re-derives the verdict from a recorded transcript, checking along the way
/// that the referee would ask exactly the recorded queries and write exactly
/// the recorded notes, and that no frame is left over.
pub fn verify_evidence(bytes: &[u8]) -> Result<Verdict, ProtocolError> {
    let header = read_header(bytes)?;
    let program = TrainingProgram::from_toml(&header.program_toml)
        .map_err(|e| ProtocolError::Header(format!("program: {e}")))?;
    let mut referee =
        Referee::new(&program).map_err(|e| ProtocolError::Header(format!("program: {e}")))?;
    let mut ex = ReplayExchange::new(bytes)?;
    let verdict = referee.resolve(&mut ex, &header.roster)?;
    ex.finish()?;
    Ok(verdict)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{execute_step_hooked, Batch, ExecError, ExtendedGraph, NodeSpec, OptimizerCfg, StepOutcome, TrainingState};
    use crate::protocol::{LiveExchange, TrainerEndpoint};
    use crate::trainer::{DatasetCfg, StepRunner, TrainStats, Trainer};

    const MODEL: &str = "\
param w1 6x10 seed=3
param b1 10 seed=4
param w2 10x4 seed=5
data x 4x6
data y 4
node h matmul inputs=x,w1
node hb add inputs=h,b1
node a relu inputs=hb
node out matmul inputs=a,w2
node l cross_entropy inputs=out,y
loss l
";

    fn program(steps: u64, schedule: Vec<u64>) -> TrainingProgram {
        TrainingProgram {
            model_text: MODEL.into(),
            steps,
            batch_size: 4,
            schedule,
            seed: 21,
            optimizer: OptimizerCfg::adam(0.01),
            dataset: DatasetCfg { rows: 24, features: 6, classes: 4 },
        }
    }

    /// Corrupts one output value of `node` during transition `step`, the
    /// same way on every (re-)execution.
    struct FlipRunner {
        step: u64,
        node: String,
        delta: f32,
    }

    impl StepRunner for FlipRunner {
        fn run(
            &mut self,
            ctx: crate::detops::OpCtx,
            graph: &ExtendedGraph,
            state: &TrainingState,
            batch: &Batch,
            observe: &mut dyn FnMut(usize, &NodeSpec, &[crate::detops::Tensor]),
        ) -> Result<StepOutcome, ExecError> {
            let here = state.step == self.step;
            execute_step_hooked(ctx, graph, state, batch, &mut |i, spec, outs| {
                if here && spec.id == self.node {
                    outs[0].values_mut()[0] += self.delta;
                }
                observe(i, spec, outs);
            })
        }
    }

    fn honest(name: &str, p: &TrainingProgram) -> Trainer {
        let mut t = Trainer::new(name, p.clone(), crate::detops::OpCtx::serial()).unwrap();
        t.train().unwrap();
        t
    }

    fn flipper(name: &str, p: &TrainingProgram, step: u64, node: &str, delta: f32) -> Trainer {
        let runner = FlipRunner { step, node: node.into(), delta };
        let mut t =
            Trainer::with_runner(name, p.clone(), crate::detops::OpCtx::serial(), Box::new(runner))
                .unwrap();
        t.train().unwrap();
        t
    }

    fn run_dispute(
        p: &TrainingProgram,
        endpoints: Vec<&mut dyn TrainerEndpoint>,
    ) -> (Verdict, Vec<u8>, u64) {
        let mut ex = LiveExchange::new(endpoints);
        let roster = ex.roster();
        let mut referee = Referee::new(p).unwrap();
        let verdict = referee.resolve(&mut ex, &roster).unwrap();
        let ops = referee.ops_executed();
        let (transcript, _) = ex.into_transcript();
        (verdict, transcript, ops)
    }

    #[test]
    fn no_dispute_when_all_agree() {
        let p = program(6, vec![3]);
        let mut a = honest("a", &p);
        let mut b = honest("b", &p);
        let want = a.output_commitment().unwrap();
        let (v, _, ops) = run_dispute(&p, vec![&mut a as &mut dyn TrainerEndpoint, &mut b]);
        assert_eq!(v.outcome, Outcome::NoDispute);
        assert_eq!(v.accepted, Some(want));
        assert_eq!(v.accepted_parties, vec!["a", "b"]);
        assert!(v.duels.is_empty() && v.convictions.is_empty());
        assert_eq!(ops, 0);
    }

    #[test]
    fn output_fault_is_recomputed_and_convicted() {
        let p = program(6, vec![3]);
        let mut a = honest("a", &p);
        let mut b = flipper("b", &p, 4, "out", 1.0);
        let want = a.output_commitment().unwrap();
        let (v, _, ops) = run_dispute(&p, vec![&mut a as &mut dyn TrainerEndpoint, &mut b]);
        assert_eq!(v.outcome, Outcome::FraudProven);
        assert_eq!(v.accepted, Some(want));
        assert_eq!(v.accepted_parties, vec!["a"]);
        assert_eq!(
            v.convictions,
            vec![("b".into(), ConvictionReason::OutputMismatch { step: 4, node: "out".into() })]
        );
        let duel = &v.duels[0];
        assert_eq!((duel.step, duel.case), (Some(4), Some(DecisionCase::Recompute)));
        assert_eq!(duel.node.as_deref(), Some("out"));
        assert_eq!(ops, 1);
    }

    #[test]
    fn init_fault_at_step_zero_checked_against_referee_state() {
        let p = program(6, vec![3]);
        let mut a = honest("a", &p);
        let mut b = flipper("b", &p, 0, "w1", 1.0);
        let (v, _, ops) = run_dispute(&p, vec![&mut a as &mut dyn TrainerEndpoint, &mut b]);
        assert_eq!(v.outcome, Outcome::FraudProven);
        assert_eq!(
            v.convictions,
            vec![("b".into(), ConvictionReason::InitStateMismatch { step: 0, node: "w1".into() })]
        );
        assert_eq!(v.duels[0].case, Some(DecisionCase::InitState));
        assert_eq!(ops, 0);
    }

    #[test]
    fn init_fault_later_settled_by_membership_proof() {
        let p = program(6, vec![3]);
        let mut a = honest("a", &p);
        let mut b = flipper("b", &p, 3, "w1", 1.0);
        let (v, _, ops) = run_dispute(&p, vec![&mut a as &mut dyn TrainerEndpoint, &mut b]);
        assert_eq!(v.outcome, Outcome::FraudProven);
        assert_eq!(
            v.convictions,
            vec![("b".into(), ConvictionReason::StateProofInvalid { step: 3, node: "w1".into() })]
        );
        assert_eq!(v.duels[0].case, Some(DecisionCase::InitState));
        assert_eq!(ops, 0);
    }

    /// Refuses one query kind, otherwise behaves as the wrapped trainer.
    struct Refuser<'a> {
        inner: &'a mut Trainer,
        kind: &'static str,
    }

    impl TrainerEndpoint for Refuser<'_> {
        fn name(&self) -> &str {
            self.inner.name()
        }
        fn answer(&mut self, q: &Query) -> Message {
            if q.kind_name() == self.kind {
                Message::Refusal { reason: "unavailable".into() }
            } else {
                self.inner.answer(q)
            }
        }
        fn stats(&self) -> TrainStats {
            self.inner.stats()
        }
    }

    #[test]
    fn refusal_convicts_the_refuser() {
        let p = program(6, vec![3]);
        let mut a = honest("a", &p);
        let mut b_inner = flipper("b", &p, 4, "out", 1.0);
        let mut b = Refuser { inner: &mut b_inner, kind: "node_hash_seq" };
        let (v, _, _) = run_dispute(&p, vec![&mut a as &mut dyn TrainerEndpoint, &mut b]);
        assert_eq!(v.outcome, Outcome::FraudProven);
        assert_eq!(
            v.convictions,
            vec![("b".into(), ConvictionReason::Refused { query: "node_hash_seq".into() })]
        );
        let duel = &v.duels[0];
        assert_eq!((duel.step, duel.case), (Some(4), None));
    }

    /// Lies in its final commitment but answers everything else honestly,
    /// so its own first hash list contradicts the lie.
    struct LiedCommit<'a> {
        inner: &'a mut Trainer,
    }

    impl TrainerEndpoint for LiedCommit<'_> {
        fn name(&self) -> &str {
            self.inner.name()
        }
        fn answer(&mut self, q: &Query) -> Message {
            match self.inner.answer(q) {
                Message::OutputCommit(mut c) if matches!(q, Query::OutputCommit) => {
                    c.root.0[0] ^= 1;
                    Message::OutputCommit(c)
                }
                m => m,
            }
        }
        fn stats(&self) -> TrainStats {
            self.inner.stats()
        }
    }

    #[test]
    fn self_contradicting_claims_are_convicted() {
        let p = program(6, vec![3]);
        let mut a = honest("a", &p);
        // b trained honestly but claims a doctored final commitment
        let mut b_inner = honest("b", &p);
        let mut b = LiedCommit { inner: &mut b_inner };
        let (v, _, _) = run_dispute(&p, vec![&mut a as &mut dyn TrainerEndpoint, &mut b]);
        assert_eq!(v.outcome, Outcome::FraudProven);
        assert_eq!(v.accepted_parties, vec!["a"]);
        assert_eq!(
            v.convictions,
            vec![("b".into(), ConvictionReason::BoundaryContradiction { level: 0, position: 6 })]
        );
    }

    #[test]
    fn both_dishonest_at_same_node_both_convicted() {
        let p = program(6, vec![3]);
        let mut a = flipper("a", &p, 4, "out", 1.0);
        let mut b = flipper("b", &p, 4, "out", 2.0);
        let (v, _, ops) = run_dispute(&p, vec![&mut a as &mut dyn TrainerEndpoint, &mut b]);
        assert_eq!(v.outcome, Outcome::AllConvicted);
        assert_eq!(v.accepted, None);
        assert_eq!(v.convictions.len(), 2);
        for (_, reason) in &v.convictions {
            assert_eq!(reason, &ConvictionReason::OutputMismatch { step: 4, node: "out".into() });
        }
        assert_eq!(ops, 1);
    }

    #[test]
    fn three_parties_one_honest_survives() {
        let p = program(6, vec![3]);
        let mut a = honest("a", &p);
        let mut b = flipper("b", &p, 2, "out", 1.0);
        let mut c = flipper("c", &p, 4, "h", 1.0);
        let want = a.output_commitment().unwrap();
        let (v, _, _) =
            run_dispute(&p, vec![&mut a as &mut dyn TrainerEndpoint, &mut b, &mut c]);
        assert_eq!(v.outcome, Outcome::FraudProven);
        assert_eq!(v.accepted, Some(want));
        assert_eq!(v.accepted_parties, vec!["a"]);
        assert_eq!(v.duels.len(), 2);
        let guilty: Vec<&str> = v.convictions.iter().map(|(p, _)| p.as_str()).collect();
        assert_eq!(guilty, vec!["b", "c"]);
    }

    #[test]
    fn evidence_replays_to_same_verdict() {
        let p = program(6, vec![3]);
        let mut a = honest("a", &p);
        let mut b = flipper("b", &p, 4, "out", 1.0);
        let (v, transcript, _) = run_dispute(&p, vec![&mut a as &mut dyn TrainerEndpoint, &mut b]);
        let replayed = verify_evidence(&transcript).unwrap();
        assert_eq!(replayed, v);

        let mut bad = transcript.clone();
        let last = bad.len() - 1;
        bad[last] ^= 1; // inside the verdict frame
        assert!(verify_evidence(&bad).is_err());
    }

    #[test]
    fn verdict_text_is_line_oriented() {
        let p = program(6, vec![3]);
        let mut a = honest("a", &p);
        let mut b = flipper("b", &p, 4, "out", 1.0);
        let (v, _, _) = run_dispute(&p, vec![&mut a as &mut dyn TrainerEndpoint, &mut b]);
        let text = v.canonical_text();
        assert!(text.contains("outcome = fraud_proven"));
        assert!(text.contains("conviction.0 = b: output_mismatch step=4 node=out"));
        assert!(text.contains("case=recompute step=4 node=out"));
    }
}
