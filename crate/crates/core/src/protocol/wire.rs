//! Binary framing for queries, responses, and transcripts.
//!
//! A transcript is `RDTS`, a version word, then frames. Each frame is
//! `kind u8, party u8, payload len u64 LE, payload`. For query frames the
//! party byte names the recipient, for response frames the responder;
//! referee-originated frames (header, divergence notes, verdict) use 0xFF.
//! Payloads reuse the canonical tensor and node encodings, so a transcript
//! commits to exactly the bytes that were hashed during the dispute.

use super::{Message, Query, StateProof, TrainerEndpoint};
use crate::commit::{CheckpointCommitment, Digest, MerkleProof, Side};
use crate::detops::Tensor;
use crate::graph::AugmentedCGNode;
use std::collections::BTreeMap;

pub const TRANSCRIPT_MAGIC: &[u8; 4] = b"RDTS";
pub const TRANSCRIPT_VERSION: u32 = 1;

pub const FRAME_QUERY: u8 = 0;
pub const FRAME_OUTPUT_COMMIT: u8 = 1;
pub const FRAME_HASH_LIST: u8 = 2;
pub const FRAME_DIVERGENCE: u8 = 3;
pub const FRAME_NODE_HASH_SEQ: u8 = 4;
pub const FRAME_NODE_OPENING: u8 = 5;
pub const FRAME_MEMBERSHIP_PROOF: u8 = 6;
pub const FRAME_TENSOR_PAYLOAD: u8 = 7;
pub const FRAME_REFUSAL: u8 = 8;
pub const FRAME_VERDICT: u8 = 9;
pub const FRAME_HEADER: u8 = 10;

/// Party byte for frames the referee originates.
pub const PARTY_REFEREE: u8 = 0xFF;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("decode: {0}")]
    Decode(String),
    #[error("transcript does not match recomputation: {0}")]
    Replay(String),
    #[error("transcript header: {0}")]
    Header(String),
    #[error("internal: {0}")]
    Internal(String),
}

fn derr(msg: impl Into<String>) -> ProtocolError {
    ProtocolError::Decode(msg.into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, off: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        let end = self.off.checked_add(n).ok_or_else(|| derr("length overflow"))?;
        let s = self.bytes.get(self.off..end).ok_or_else(|| derr("truncated"))?;
        self.off = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String, ProtocolError> {
        let n = self.u64()? as usize;
        if n > 1 << 20 {
            return Err(derr("string too long"));
        }
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| derr("bad utf8"))
    }

    fn digest(&mut self) -> Result<Digest, ProtocolError> {
        Ok(Digest(self.take(32)?.try_into().unwrap()))
    }

    fn commitment(&mut self) -> Result<CheckpointCommitment, ProtocolError> {
        Ok(CheckpointCommitment { step: self.u64()?, root: self.digest()?, leaf_count: self.u64()? })
    }

    fn tensor(&mut self) -> Result<Tensor, ProtocolError> {
        let (t, used) = Tensor::from_canonical_bytes(&self.bytes[self.off..])
            .map_err(|e| derr(format!("tensor: {e}")))?;
        self.off += used;
        Ok(t)
    }

    fn node(&mut self) -> Result<AugmentedCGNode, ProtocolError> {
        let (n, used) = AugmentedCGNode::from_canonical_bytes(&self.bytes[self.off..])
            .map_err(|e| derr(format!("node: {e}")))?;
        self.off += used;
        Ok(n)
    }

    fn merkle_proof(&mut self) -> Result<MerkleProof, ProtocolError> {
        let leaf_index = self.u64()?;
        let leaf_count = self.u64()?;
        let n = self.u64()? as usize;
        if n > 64 {
            return Err(derr("proof path too long"));
        }
        let mut path = Vec::with_capacity(n);
        for _ in 0..n {
            let side = match self.u8()? {
                0 => Side::Left,
                1 => Side::Right,
                _ => return Err(derr("bad side byte")),
            };
            path.push((side, self.digest()?));
        }
        Ok(MerkleProof { leaf_index, leaf_count, path })
    }

    fn finish(&self) -> Result<(), ProtocolError> {
        if self.off != self.bytes.len() {
            return Err(derr("trailing bytes"));
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_commitment(out: &mut Vec<u8>, c: &CheckpointCommitment) {
    out.extend_from_slice(&c.step.to_le_bytes());
    out.extend_from_slice(&c.root.0);
    out.extend_from_slice(&c.leaf_count.to_le_bytes());
}

fn put_merkle_proof(out: &mut Vec<u8>, p: &MerkleProof) {
    out.extend_from_slice(&p.leaf_index.to_le_bytes());
    out.extend_from_slice(&p.leaf_count.to_le_bytes());
    out.extend_from_slice(&(p.path.len() as u64).to_le_bytes());
    for (side, d) in &p.path {
        out.push(match side {
            Side::Left => 0,
            Side::Right => 1,
        });
        out.extend_from_slice(&d.0);
    }
}

const QUERY_OUTPUT_COMMIT: u8 = 0;
const QUERY_HASH_LIST: u8 = 1;
const QUERY_NODE_HASH_SEQ: u8 = 2;
const QUERY_NODE_OPENING: u8 = 3;
const QUERY_TENSOR_PAYLOAD: u8 = 4;
const QUERY_MEMBERSHIP_PROOF: u8 = 5;

pub fn encode_query(q: &Query) -> Vec<u8> {
    let mut out = Vec::new();
    match q {
        Query::OutputCommit => out.push(QUERY_OUTPUT_COMMIT),
        Query::HashList { level, lo, hi } => {
            out.push(QUERY_HASH_LIST);
            out.extend_from_slice(&level.to_le_bytes());
            out.extend_from_slice(&lo.to_le_bytes());
            out.extend_from_slice(&hi.to_le_bytes());
        }
        Query::NodeHashSeq { step } => {
            out.push(QUERY_NODE_HASH_SEQ);
            out.extend_from_slice(&step.to_le_bytes());
        }
        Query::NodeOpening { step, index } => {
            out.push(QUERY_NODE_OPENING);
            out.extend_from_slice(&step.to_le_bytes());
            out.extend_from_slice(&index.to_le_bytes());
        }
        Query::TensorPayload { step, node, slot } => {
            out.push(QUERY_TENSOR_PAYLOAD);
            out.extend_from_slice(&step.to_le_bytes());
            put_str(&mut out, node);
            out.extend_from_slice(&slot.to_le_bytes());
        }
        Query::MembershipProof { step, name } => {
            out.push(QUERY_MEMBERSHIP_PROOF);
            out.extend_from_slice(&step.to_le_bytes());
            put_str(&mut out, name);
        }
    }
    out
}

pub fn decode_query(payload: &[u8]) -> Result<Query, ProtocolError> {
    let mut c = Cursor::new(payload);
    let q = match c.u8()? {
        QUERY_OUTPUT_COMMIT => Query::OutputCommit,
        QUERY_HASH_LIST => Query::HashList { level: c.u32()?, lo: c.u64()?, hi: c.u64()? },
        QUERY_NODE_HASH_SEQ => Query::NodeHashSeq { step: c.u64()? },
        QUERY_NODE_OPENING => Query::NodeOpening { step: c.u64()?, index: c.u64()? },
        QUERY_TENSOR_PAYLOAD => {
            Query::TensorPayload { step: c.u64()?, node: c.str()?, slot: c.u32()? }
        }
        QUERY_MEMBERSHIP_PROOF => Query::MembershipProof { step: c.u64()?, name: c.str()? },
        other => return Err(derr(format!("unknown query tag {other}"))),
    };
    c.finish()?;
    Ok(q)
}

/// Returns the frame kind byte and the payload for a response.
pub fn encode_message(m: &Message) -> (u8, Vec<u8>) {
    let mut out = Vec::new();
    let kind = match m {
        Message::OutputCommit(c) => {
            put_commitment(&mut out, c);
            FRAME_OUTPUT_COMMIT
        }
        Message::HashList(list) => {
            out.extend_from_slice(&(list.len() as u64).to_le_bytes());
            for c in list {
                put_commitment(&mut out, c);
            }
            FRAME_HASH_LIST
        }
        Message::NodeHashSeq(seq) => {
            out.extend_from_slice(&(seq.len() as u64).to_le_bytes());
            for d in seq {
                out.extend_from_slice(&d.0);
            }
            FRAME_NODE_HASH_SEQ
        }
        Message::NodeOpening(node) => {
            out.extend_from_slice(&node.canonical_bytes());
            FRAME_NODE_OPENING
        }
        Message::MembershipProof(p) => {
            out.extend_from_slice(&p.node.canonical_bytes());
            out.extend_from_slice(&p.slot.to_le_bytes());
            put_merkle_proof(&mut out, &p.path);
            FRAME_MEMBERSHIP_PROOF
        }
        Message::TensorPayload(t) => {
            out.extend_from_slice(&t.canonical_bytes());
            FRAME_TENSOR_PAYLOAD
        }
        Message::Refusal { reason } => {
            put_str(&mut out, reason);
            FRAME_REFUSAL
        }
    };
    (kind, out)
}

pub fn decode_message(kind: u8, payload: &[u8]) -> Result<Message, ProtocolError> {
    let mut c = Cursor::new(payload);
    let m = match kind {
        FRAME_OUTPUT_COMMIT => Message::OutputCommit(c.commitment()?),
        FRAME_HASH_LIST => {
            let n = c.u64()? as usize;
            if n > 1 << 20 {
                return Err(derr("hash list too long"));
            }
            let mut list = Vec::with_capacity(n);
            for _ in 0..n {
                list.push(c.commitment()?);
            }
            Message::HashList(list)
        }
        FRAME_NODE_HASH_SEQ => {
            let n = c.u64()? as usize;
            if n > 1 << 24 {
                return Err(derr("hash sequence too long"));
            }
            let mut seq = Vec::with_capacity(n);
            for _ in 0..n {
                seq.push(c.digest()?);
            }
            Message::NodeHashSeq(seq)
        }
        FRAME_NODE_OPENING => Message::NodeOpening(c.node()?),
        FRAME_MEMBERSHIP_PROOF => Message::MembershipProof(StateProof {
            node: c.node()?,
            slot: c.u32()?,
            path: c.merkle_proof()?,
        }),
        FRAME_TENSOR_PAYLOAD => Message::TensorPayload(c.tensor()?),
        FRAME_REFUSAL => Message::Refusal { reason: c.str()? },
        other => return Err(derr(format!("unknown message frame kind {other}"))),
    };
    c.finish()?;
    Ok(m)
}

/// Payload of a divergence note the referee writes after each bisection
/// round: which list index first differed and the interval it narrows to.
pub fn encode_divergence(level: u32, index: u64, lo: u64, hi: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(28);
    out.extend_from_slice(&level.to_le_bytes());
    out.extend_from_slice(&index.to_le_bytes());
    out.extend_from_slice(&lo.to_le_bytes());
    out.extend_from_slice(&hi.to_le_bytes());
    out
}

/// First frame of every transcript: the full program and the party roster,
/// everything a verifier needs to rebuild the referee.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptHeader {
    pub program_toml: String,
    pub roster: Vec<String>,
}

impl TranscriptHeader {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_str(&mut out, &self.program_toml);
        out.extend_from_slice(&(self.roster.len() as u64).to_le_bytes());
        for name in &self.roster {
            put_str(&mut out, name);
        }
        out
    }

    pub fn decode(payload: &[u8]) -> Result<TranscriptHeader, ProtocolError> {
        let mut c = Cursor::new(payload);
        let program_toml = c.str()?;
        let n = c.u64()? as usize;
        if n > 256 {
            return Err(derr("roster too large"));
        }
        let mut roster = Vec::with_capacity(n);
        for _ in 0..n {
            roster.push(c.str()?);
        }
        c.finish()?;
        Ok(TranscriptHeader { program_toml, roster })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: u8,
    pub party: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn wire_len(&self) -> u64 {
        10 + self.payload.len() as u64
    }
}

fn append_frame(out: &mut Vec<u8>, kind: u8, party: u8, payload: &[u8]) {
    out.push(kind);
    out.push(party);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

/// Splits a transcript into frames, checking magic and version.
pub fn parse_transcript(bytes: &[u8]) -> Result<Vec<Frame>, ProtocolError> {
    if bytes.len() < 8 || &bytes[..4] != TRANSCRIPT_MAGIC {
        return Err(ProtocolError::Header("not a transcript (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TRANSCRIPT_VERSION {
        return Err(ProtocolError::Header(format!("unsupported version {version}")));
    }
    let mut frames = Vec::new();
    let mut off = 8;
    while off < bytes.len() {
        if off + 10 > bytes.len() {
            return Err(derr("truncated frame header"));
        }
        let kind = bytes[off];
        let party = bytes[off + 1];
        let len = u64::from_le_bytes(bytes[off + 2..off + 10].try_into().unwrap()) as usize;
        off += 10;
        let end = off.checked_add(len).ok_or_else(|| derr("frame length overflow"))?;
        if end > bytes.len() {
            return Err(derr("truncated frame payload"));
        }
        frames.push(Frame { kind, party, payload: bytes[off..end].to_vec() });
        off = end;
    }
    Ok(frames)
}

/// Parses the leading header frame of a transcript.
pub fn read_header(bytes: &[u8]) -> Result<TranscriptHeader, ProtocolError> {
    let frames = parse_transcript(bytes)?;
    let first = frames.first().ok_or_else(|| ProtocolError::Header("empty transcript".into()))?;
    if first.kind != FRAME_HEADER {
        return Err(ProtocolError::Header("first frame is not a header".into()));
    }
    TranscriptHeader::decode(&first.payload)
}

/// Byte and query counters, derived purely from frames so a replay produces
/// the same numbers as the live run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExchangeStats {
    pub queries: u64,
    pub sent_to: BTreeMap<u8, u64>,
    pub received_from: BTreeMap<u8, u64>,
    pub tensor_payload_bytes: u64,
    pub max_frame_bytes: u64,
    pub note_bytes: u64,
}

impl ExchangeStats {
    fn record_query(&mut self, to: u8, frame_bytes: u64) {
        self.queries += 1;
        *self.sent_to.entry(to).or_insert(0) += frame_bytes;
        self.max_frame_bytes = self.max_frame_bytes.max(frame_bytes);
    }

    fn record_response(&mut self, from: u8, kind: u8, payload_len: u64, frame_bytes: u64) {
        *self.received_from.entry(from).or_insert(0) += frame_bytes;
        if kind == FRAME_TENSOR_PAYLOAD {
            self.tensor_payload_bytes += payload_len;
        }
        self.max_frame_bytes = self.max_frame_bytes.max(frame_bytes);
    }

    fn record_note(&mut self, frame_bytes: u64) {
        self.note_bytes += frame_bytes;
        self.max_frame_bytes = self.max_frame_bytes.max(frame_bytes);
    }
}

/// How the referee talks to the parties: live against endpoints while
/// recording, or replaying a recorded transcript while checking it.
pub trait Exchange {
    fn round_trip(&mut self, to: u8, q: &Query) -> Result<Message, ProtocolError>;
    /// Referee-originated frame (header, divergence note, verdict).
    fn note(&mut self, kind: u8, payload: &[u8]) -> Result<(), ProtocolError>;
    fn stats(&self) -> &ExchangeStats;
}

/// Runs queries against in-process endpoints and records every frame.
pub struct LiveExchange<'a> {
    endpoints: Vec<&'a mut dyn TrainerEndpoint>,
    transcript: Vec<u8>,
    stats: ExchangeStats,
}

impl<'a> LiveExchange<'a> {
    pub fn new(endpoints: Vec<&'a mut dyn TrainerEndpoint>) -> Self {
        let mut transcript = Vec::new();
        transcript.extend_from_slice(TRANSCRIPT_MAGIC);
        transcript.extend_from_slice(&TRANSCRIPT_VERSION.to_le_bytes());
        LiveExchange { endpoints, transcript, stats: ExchangeStats::default() }
    }

    pub fn roster(&self) -> Vec<String> {
        self.endpoints.iter().map(|e| e.name().to_string()).collect()
    }

    pub fn party_count(&self) -> u8 {
        self.endpoints.len() as u8
    }

    pub fn endpoint_stats(&self) -> Vec<crate::trainer::TrainStats> {
        self.endpoints.iter().map(|e| e.stats()).collect()
    }

    pub fn into_transcript(self) -> (Vec<u8>, ExchangeStats) {
        (self.transcript, self.stats)
    }
}

impl Exchange for LiveExchange<'_> {
    fn round_trip(&mut self, to: u8, q: &Query) -> Result<Message, ProtocolError> {
        let qp = encode_query(q);
        append_frame(&mut self.transcript, FRAME_QUERY, to, &qp);
        self.stats.record_query(to, 10 + qp.len() as u64);

        let ep = self
            .endpoints
            .get_mut(to as usize)
            .ok_or_else(|| ProtocolError::Internal(format!("no endpoint {to}")))?;
        let msg = ep.answer(q);
        let (kind, payload) = encode_message(&msg);
        append_frame(&mut self.transcript, kind, to, &payload);
        self.stats.record_response(to, kind, payload.len() as u64, 10 + payload.len() as u64);
        Ok(msg)
    }

    fn note(&mut self, kind: u8, payload: &[u8]) -> Result<(), ProtocolError> {
        append_frame(&mut self.transcript, kind, PARTY_REFEREE, payload);
        self.stats.record_note(10 + payload.len() as u64);
        Ok(())
    }

    fn stats(&self) -> &ExchangeStats {
        &self.stats
    }
}

/// Feeds recorded responses back to the referee, verifying that the replayed
/// referee asks exactly the recorded queries and emits the recorded notes.
pub struct ReplayExchange {
    frames: Vec<Frame>,
    cursor: usize,
    stats: ExchangeStats,
}

impl ReplayExchange {
    pub fn new(bytes: &[u8]) -> Result<Self, ProtocolError> {
        Ok(ReplayExchange { frames: parse_transcript(bytes)?, cursor: 0, stats: ExchangeStats::default() })
    }

    fn next(&mut self, what: &str) -> Result<&Frame, ProtocolError> {
        let f = self
            .frames
            .get(self.cursor)
            .ok_or_else(|| ProtocolError::Replay(format!("transcript ended, expected {what}")))?;
        self.cursor += 1;
        Ok(f)
    }

    /// All frames must have been consumed; extra frames mean the recorded
    /// run claimed work the recomputation never asked for.
    pub fn finish(self) -> Result<ExchangeStats, ProtocolError> {
        if self.cursor != self.frames.len() {
            return Err(ProtocolError::Replay(format!(
                "{} unconsumed trailing frames",
                self.frames.len() - self.cursor
            )));
        }
        Ok(self.stats)
    }
}

impl Exchange for ReplayExchange {
    fn round_trip(&mut self, to: u8, q: &Query) -> Result<Message, ProtocolError> {
        let qp = encode_query(q);
        let cursor = self.cursor;
        let f = self.next("query frame")?;
        if f.kind != FRAME_QUERY || f.party != to || f.payload != qp {
            return Err(ProtocolError::Replay(format!(
                "frame {cursor}: expected query {} to party {to}",
                q.kind_name()
            )));
        }
        let wire = f.wire_len();
        self.stats.record_query(to, wire);

        let cursor = self.cursor;
        let f = self.next("response frame")?;
        if f.party != to {
            return Err(ProtocolError::Replay(format!(
                "frame {cursor}: response from party {} while querying {to}",
                f.party
            )));
        }
        let (kind, len, wire) = (f.kind, f.payload.len() as u64, f.wire_len());
        let msg = decode_message(kind, &f.payload)?;
        self.stats.record_response(to, kind, len, wire);
        Ok(msg)
    }

    fn note(&mut self, kind: u8, payload: &[u8]) -> Result<(), ProtocolError> {
        let cursor = self.cursor;
        let f = self.next("referee note")?;
        if f.kind != kind || f.party != PARTY_REFEREE || f.payload != payload {
            return Err(ProtocolError::Replay(format!(
                "frame {cursor}: recorded referee note (kind {}) differs from recomputed (kind {kind})",
                f.kind
            )));
        }
        let wire = f.wire_len();
        self.stats.record_note(wire);
        Ok(())
    }

    fn stats(&self) -> &ExchangeStats {
        &self.stats
    }
}
