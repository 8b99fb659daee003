//! Canonical hashing and Merkle commitments.
//!
//! Checkpoints are committed as Merkle roots over per-node hashes of a
//! step's trace (or, for the initial state, over tensor hashes in name
//! order), so a single root later supports cheap membership proofs for any
//! node or tensor. All byte encodings feeding SHA-256 are the canonical
//! serializations: tensors start with tag 0x54, graph nodes with 0x4E, and
//! Merkle leaf/internal nodes are domain-separated with 0x00/0x01 so a leaf
//! can never be confused with an interior combination.

use crate::detops::Tensor;
use crate::graph::{AugmentedCGNode, TrainingState};
use sha2::{Digest as _, Sha256};
use std::fmt;

/// 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Digest> {
        let bytes = hex::decode(s.trim()).ok()?;
        let arr: [u8; 32] = bytes.try_into().ok()?;
        Some(Digest(arr))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

pub fn hash_bytes(bytes: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update(bytes);
    Digest(h.finalize().into())
}

/// Hash of a tensor's canonical byte encoding.
pub fn hash_tensor(t: &Tensor) -> Digest {
    hash_bytes(&t.canonical_bytes())
}

/// Hash of a trace node's canonical byte encoding (structure plus the
/// input/output tensor digests).
pub fn hash_node(n: &AugmentedCGNode) -> Digest {
    hash_bytes(&n.canonical_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CommitError {
    #[error("merkle tree needs at least one leaf")]
    EmptyLeaves,
    #[error("leaf index {index} out of range for {count} leaves")]
    LeafOutOfRange { index: usize, count: usize },
}

const LEAF_TAG: u8 = 0x00;
const INTERNAL_TAG: u8 = 0x01;

fn hash_leaf(leaf: &Digest) -> Digest {
    let mut buf = [0u8; 33];
    buf[0] = LEAF_TAG;
    buf[1..].copy_from_slice(&leaf.0);
    hash_bytes(&buf)
}

fn hash_internal(l: &Digest, r: &Digest) -> Digest {
    let mut buf = [0u8; 65];
    buf[0] = INTERNAL_TAG;
    buf[1..33].copy_from_slice(&l.0);
    buf[33..].copy_from_slice(&r.0);
    hash_bytes(&buf)
}

/// Which side a proof sibling sits on, relative to the running hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Membership proof for one leaf. `leaf_count` fixes the tree geometry (an
/// odd tail node is promoted unchanged), so verification can derive the
/// expected side pattern for `leaf_index` and reject proofs replayed at a
/// different index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleProof {
    pub leaf_index: u64,
    pub leaf_count: u64,
    pub path: Vec<(Side, Digest)>,
}

fn level_up(level: &[Digest]) -> Vec<Digest> {
    let mut next = Vec::with_capacity(level.len().div_ceil(2));
    let mut i = 0;
    while i + 1 < level.len() {
        next.push(hash_internal(&level[i], &level[i + 1]));
        i += 2;
    }
    if i < level.len() {
        next.push(level[i]); // odd tail promoted unchanged
    }
    next
}

/// Root over leaf digests: leaves are rehashed with the leaf tag, pairs
/// combine left-to-right per level, a lone tail is promoted.
pub fn merkle_root(leaves: &[Digest]) -> Result<Digest, CommitError> {
    if leaves.is_empty() {
        return Err(CommitError::EmptyLeaves);
    }
    let mut level: Vec<Digest> = leaves.iter().map(hash_leaf).collect();
    while level.len() > 1 {
        level = level_up(&level);
    }
    Ok(level[0])
}

/// Proof that `leaves[index]` is under the root of `leaves`.
pub fn merkle_prove(leaves: &[Digest], index: usize) -> Result<MerkleProof, CommitError> {
    if leaves.is_empty() {
        return Err(CommitError::EmptyLeaves);
    }
    if index >= leaves.len() {
        return Err(CommitError::LeafOutOfRange { index, count: leaves.len() });
    }
    let mut path = Vec::new();
    let mut level: Vec<Digest> = leaves.iter().map(hash_leaf).collect();
    let mut idx = index;
    while level.len() > 1 {
        let sib = idx ^ 1;
        if sib < level.len() {
            let side = if sib < idx { Side::Left } else { Side::Right };
            path.push((side, level[sib]));
        }
        // else: promoted tail, no sibling at this level
        idx /= 2;
        level = level_up(&level);
    }
    Ok(MerkleProof {
        leaf_index: index as u64,
        leaf_count: leaves.len() as u64,
        path,
    })
}

/// Checks a proof against a root. The side pattern and path length are
/// recomputed from `(leaf_index, leaf_count)`, so flipped side flags,
/// truncated paths, or an index swap all fail.
pub fn merkle_verify(root: &Digest, leaf: &Digest, proof: &MerkleProof) -> bool {
    let count = proof.leaf_count as usize;
    let index = proof.leaf_index as usize;
    if count == 0 || index >= count {
        return false;
    }
    let mut acc = hash_leaf(leaf);
    let mut width = count;
    let mut idx = index;
    let mut steps = proof.path.iter();
    while width > 1 {
        let sib = idx ^ 1;
        if sib < width {
            let expect = if sib < idx { Side::Left } else { Side::Right };
            match steps.next() {
                Some((side, digest)) if *side == expect => {
                    acc = match side {
                        Side::Left => hash_internal(digest, &acc),
                        Side::Right => hash_internal(&acc, digest),
                    };
                }
                _ => return false,
            }
        }
        idx /= 2;
        width = width.div_ceil(2);
    }
    steps.next().is_none() && acc == *root
}

/// A committed checkpoint: the Merkle root plus its geometry. `step` is the
/// number of completed training steps (kept alongside the root, not hashed
/// into it; protocol queries carry explicit step indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointCommitment {
    pub step: u64,
    pub root: Digest,
    pub leaf_count: u64,
}

impl CheckpointCommitment {
    pub fn to_bytes(&self) -> [u8; 48] {
        let mut out = [0u8; 48];
        out[..8].copy_from_slice(&self.step.to_le_bytes());
        out[8..40].copy_from_slice(&self.root.0);
        out[40..].copy_from_slice(&self.leaf_count.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<CheckpointCommitment> {
        if bytes.len() != 48 {
            return None;
        }
        Some(CheckpointCommitment {
            step: u64::from_le_bytes(bytes[..8].try_into().unwrap()),
            root: Digest(bytes[8..40].try_into().unwrap()),
            leaf_count: u64::from_le_bytes(bytes[40..].try_into().unwrap()),
        })
    }
}

/// Commits checkpoint C_t for t >= 1: leaves are the node hashes of the
/// trace of the transition that produced it, in canonical node order.
pub fn commit_step_trace(step: u64, node_hashes: &[Digest]) -> Result<CheckpointCommitment, CommitError> {
    Ok(CheckpointCommitment {
        step,
        root: merkle_root(node_hashes)?,
        leaf_count: node_hashes.len() as u64,
    })
}

/// Commits the initial checkpoint C_0: leaves are tensor hashes in
/// lexicographic state-name order (params plus any optimizer moments).
pub fn commit_initial_state(state: &TrainingState) -> Result<CheckpointCommitment, CommitError> {
    let leaves: Vec<Digest> = state.tensors.values().map(hash_tensor).collect();
    Ok(CheckpointCommitment {
        step: 0,
        root: merkle_root(&leaves)?,
        leaf_count: leaves.len() as u64,
    })
}
