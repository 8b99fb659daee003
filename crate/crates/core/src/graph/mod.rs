//! Computational graphs for one training step.
//!
//! A model is written as a small text file declaring parameters, data
//! inputs, and forward nodes ending in a cross-entropy loss. From that, an
//! extended graph is derived mechanically: init nodes that load state and
//! batch tensors, the forward nodes, backward nodes (reverse-mode, with
//! explicit gradient-accumulation adds on fan-out), and one update node per
//! parameter. The extended graph is a pure function of (model, optimizer):
//! node ids follow fixed conventions and execution order is a deterministic
//! topological sort, so two independent builders agree on every node index.
//!
//! Generated id conventions: `<fwd>.bwd` for backward nodes, `<param>.upd`
//! for updates, `<tensor>.acc<i>` for gradient accumulation, `<param>.m` /
//! `<param>.v` for Adam moment init nodes. User ids may not contain `.`,
//! which keeps the generated namespace collision-free.

mod exec;
mod extend;
mod optim;
mod parse;
mod topo;

pub use exec::{
    compute_node, execute_step, execute_step_hooked, initial_state, Batch, StepOutcome,
    TrainingState,
};
pub use extend::build_extended_graph;
pub use optim::{adam_update, sgd_update, OptimizerCfg};
pub use parse::parse_model;
pub use topo::topo_sort;

use crate::commit::Digest;
use crate::detops::Shape;
use std::collections::BTreeMap;
use std::fmt;

/// Operator kinds of the extended graph. The `code()` byte is part of the
/// canonical node serialization and must never be renumbered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    ReLU,
    Softmax,
    CrossEntropy,
    ParamInit,
    DataInit,
    MatMulBwd,
    AddBwd,
    ReLUBwd,
    SoftmaxBwd,
    CrossEntropyBwd,
    SgdUpdate,
    AdamUpdate,
}

impl OpKind {
    pub fn code(self) -> u8 {
        match self {
            OpKind::MatMul => 0,
            OpKind::Add => 1,
            OpKind::ReLU => 2,
            OpKind::Softmax => 3,
            OpKind::CrossEntropy => 4,
            OpKind::ParamInit => 5,
            OpKind::DataInit => 6,
            OpKind::MatMulBwd => 7,
            OpKind::AddBwd => 8,
            OpKind::ReLUBwd => 9,
            OpKind::SoftmaxBwd => 10,
            OpKind::CrossEntropyBwd => 11,
            OpKind::SgdUpdate => 12,
            OpKind::AdamUpdate => 13,
        }
    }

    pub fn from_code(code: u8) -> Option<OpKind> {
        use OpKind::*;
        Some(match code {
            0 => MatMul,
            1 => Add,
            2 => ReLU,
            3 => Softmax,
            4 => CrossEntropy,
            5 => ParamInit,
            6 => DataInit,
            7 => MatMulBwd,
            8 => AddBwd,
            9 => ReLUBwd,
            10 => SoftmaxBwd,
            11 => CrossEntropyBwd,
            12 => SgdUpdate,
            13 => AdamUpdate,
            _ => return None,
        })
    }

    /// Name accepted in model text. Only forward kinds are writable; init,
    /// backward, and update nodes are always derived.
    pub fn from_text_name(name: &str) -> Option<OpKind> {
        Some(match name {
            "matmul" => OpKind::MatMul,
            "add" => OpKind::Add,
            "relu" => OpKind::ReLU,
            "softmax" => OpKind::Softmax,
            "cross_entropy" => OpKind::CrossEntropy,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::ReLU => "relu",
            OpKind::Softmax => "softmax",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::ParamInit => "param_init",
            OpKind::DataInit => "data_init",
            OpKind::MatMulBwd => "matmul_bwd",
            OpKind::AddBwd => "add_bwd",
            OpKind::ReLUBwd => "relu_bwd",
            OpKind::SoftmaxBwd => "softmax_bwd",
            OpKind::CrossEntropyBwd => "cross_entropy_bwd",
            OpKind::SgdUpdate => "sgd_update",
            OpKind::AdamUpdate => "adam_update",
        }
    }
}

/// Attribute value: 64-bit int or binary32 float. Serialization is
/// tag-discriminated, so Int(1) and Float(1.0) never collide; canonical
/// text always prints floats with a `.` or exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Float(f32),
}

impl AttrValue {
    pub fn canonical_text(&self) -> String {
        match self {
            AttrValue::Int(v) => v.to_string(),
            AttrValue::Float(v) => {
                let s = format!("{v}");
                if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
                    s
                } else {
                    format!("{s}.0")
                }
            }
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            AttrValue::Int(v) => {
                out.push(0);
                out.extend_from_slice(&v.to_le_bytes());
            }
            AttrValue::Float(v) => {
                out.push(1);
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_text())
    }
}

/// Sorted attribute map; BTreeMap ordering doubles as the canonical
/// serialization order.
pub type Attrs = BTreeMap<String, AttrValue>;

/// Reference to output slot `slot` of node `node`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SlotRef {
    pub node: String,
    pub slot: u32,
}

impl SlotRef {
    pub fn new(node: impl Into<String>, slot: u32) -> Self {
        SlotRef { node: node.into(), slot }
    }
}

/// A consumer edge: input position `pos` of node `node` reads this slot.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Consumer {
    pub node: String,
    pub pos: u32,
}

/// Parameter declaration: shape plus the seed its initial value is drawn
/// from (rank >= 2 tensors get scaled-uniform init, rank 1 starts at zero).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Shape,
    pub seed: u64,
}

/// Data input declaration; shape includes the batch dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataDecl {
    pub name: String,
    pub shape: Shape,
}

/// A forward node as written in model text.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: String,
    pub kind: OpKind,
    pub inputs: Vec<SlotRef>,
    pub attrs: Attrs,
}

/// Parsed forward model: declarations, nodes, and the loss id.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub params: Vec<ParamDecl>,
    pub data: Vec<DataDecl>,
    pub nodes: Vec<GraphNode>,
    pub loss: String,
}

impl ModelGraph {
    pub fn parse(text: &str) -> Result<ModelGraph, ParseError> {
        parse_model(text)
    }

    pub fn param(&self, name: &str) -> Option<&ParamDecl> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn data_decl(&self, name: &str) -> Option<&DataDecl> {
        self.data.iter().find(|d| d.name == name)
    }
}

/// Structural description of one extended-graph node: everything except
/// tensor digests. Two honest builders produce identical NodeSpecs at every
/// index.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: String,
    pub kind: OpKind,
    pub attrs: Attrs,
    pub inputs: Vec<SlotRef>,
    /// Per output slot, the consumer edges sorted by (node, pos).
    pub consumers: Vec<Vec<Consumer>>,
}

pub(crate) const NODE_TAG: u8 = 0x4e;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl NodeSpec {
    pub fn out_arity(&self) -> usize {
        self.consumers.len()
    }

    /// Canonical structural encoding: tag 0x4E, id, kind code, sorted
    /// attributes, input pointers, consumer pointers. Length-prefixed
    /// throughout, so it is self-delimiting and injective.
    pub fn structural_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        out.push(NODE_TAG);
        put_str(&mut out, &self.id);
        out.push(self.kind.code());
        out.extend_from_slice(&(self.attrs.len() as u64).to_le_bytes());
        for (k, v) in &self.attrs {
            put_str(&mut out, k);
            v.encode(&mut out);
        }
        out.extend_from_slice(&(self.inputs.len() as u64).to_le_bytes());
        for r in &self.inputs {
            put_str(&mut out, &r.node);
            out.extend_from_slice(&r.slot.to_le_bytes());
        }
        out.extend_from_slice(&(self.consumers.len() as u64).to_le_bytes());
        for slot in &self.consumers {
            out.extend_from_slice(&(slot.len() as u64).to_le_bytes());
            for c in slot {
                put_str(&mut out, &c.node);
                out.extend_from_slice(&c.pos.to_le_bytes());
            }
        }
        out
    }
}

/// A trace node: structure plus the digests of the tensors that actually
/// flowed through it. This is what gets hashed into checkpoint roots and
/// opened during disputes.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedCGNode {
    pub spec: NodeSpec,
    pub input_hashes: Vec<Digest>,
    pub output_hashes: Vec<Digest>,
}

impl AugmentedCGNode {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = self.spec.structural_bytes();
        out.extend_from_slice(&(self.input_hashes.len() as u64).to_le_bytes());
        for d in &self.input_hashes {
            out.extend_from_slice(&d.0);
        }
        out.extend_from_slice(&(self.output_hashes.len() as u64).to_le_bytes());
        for d in &self.output_hashes {
            out.extend_from_slice(&d.0);
        }
        out
    }

    /// Decodes one node from the front of `bytes`; returns bytes consumed.
    pub fn from_canonical_bytes(bytes: &[u8]) -> Result<(AugmentedCGNode, usize), DecodeError> {
        let mut r = Reader { bytes, off: 0 };
        if r.u8()? != NODE_TAG {
            return Err(DecodeError("node tag missing".into()));
        }
        let id = r.str()?;
        let kind = OpKind::from_code(r.u8()?).ok_or_else(|| DecodeError("bad op code".into()))?;
        let nattrs = r.u64()? as usize;
        let mut attrs = Attrs::new();
        for _ in 0..nattrs.min(1 << 16) {
            let k = r.str()?;
            let v = match r.u8()? {
                0 => AttrValue::Int(i64::from_le_bytes(r.take(8)?.try_into().unwrap())),
                1 => AttrValue::Float(f32::from_bits(u32::from_le_bytes(r.take(4)?.try_into().unwrap()))),
                _ => return Err(DecodeError("bad attr tag".into())),
            };
            attrs.insert(k, v);
        }
        let nin = r.u64()? as usize;
        let mut inputs = Vec::new();
        for _ in 0..nin.min(1 << 16) {
            let node = r.str()?;
            let slot = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
            inputs.push(SlotRef { node, slot });
        }
        let nslots = r.u64()? as usize;
        let mut consumers = Vec::new();
        for _ in 0..nslots.min(1 << 16) {
            let ncons = r.u64()? as usize;
            let mut slot = Vec::new();
            for _ in 0..ncons.min(1 << 16) {
                let node = r.str()?;
                let pos = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
                slot.push(Consumer { node, pos });
            }
            consumers.push(slot);
        }
        let nih = r.u64()? as usize;
        let mut input_hashes = Vec::new();
        for _ in 0..nih.min(1 << 16) {
            input_hashes.push(Digest(r.take(32)?.try_into().unwrap()));
        }
        let noh = r.u64()? as usize;
        let mut output_hashes = Vec::new();
        for _ in 0..noh.min(1 << 16) {
            output_hashes.push(Digest(r.take(32)?.try_into().unwrap()));
        }
        Ok((
            AugmentedCGNode {
                spec: NodeSpec { id, kind, attrs, inputs, consumers },
                input_hashes,
                output_hashes,
            },
            r.off,
        ))
    }
}

/// Full trace of one step transition. `step` is the index of the checkpoint
/// this transition produced (executing step t-1 -> t stores step = t).
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: u64,
    pub nodes: Vec<AugmentedCGNode>,
}

impl StepTrace {
    pub fn node_hashes(&self) -> Vec<Digest> {
        self.nodes.iter().map(crate::commit::hash_node).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.nodes.len() as u64).to_le_bytes());
        for n in &self.nodes {
            out.extend_from_slice(&n.canonical_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<StepTrace, DecodeError> {
        if bytes.len() < 16 {
            return Err(DecodeError("trace too short".into()));
        }
        let step = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if count > 1 << 24 {
            return Err(DecodeError("too many trace nodes".into()));
        }
        let mut off = 16;
        let mut nodes = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, used) = AugmentedCGNode::from_canonical_bytes(&bytes[off..])?;
            off += used;
            nodes.push(n);
        }
        if off != bytes.len() {
            return Err(DecodeError("trailing bytes after trace".into()));
        }
        Ok(StepTrace { step, nodes })
    }
}

/// The derived per-step graph in canonical execution order.
#[derive(Debug, Clone)]
pub struct ExtendedGraph {
    pub nodes: Vec<NodeSpec>,
    /// id -> index in `nodes`.
    index: BTreeMap<String, usize>,
    /// Inputs resolved to (node index, slot), parallel to `nodes`.
    resolved_inputs: Vec<Vec<(usize, u32)>>,
    /// Inferred output shapes, parallel to `nodes`.
    pub out_shapes: Vec<Vec<Shape>>,
    /// State tensor name -> (node index, slot) producing its next value.
    pub state_sources: BTreeMap<String, (usize, u32)>,
    pub loss_index: usize,
    structure_digest: Digest,
}

impl ExtendedGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn resolved_inputs(&self, idx: usize) -> &[(usize, u32)] {
        &self.resolved_inputs[idx]
    }

    /// Digest over all structural bytes in order: identical builds agree.
    pub fn structure_digest(&self) -> Digest {
        self.structure_digest
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("decode: {0}")]
pub struct DecodeError(pub String);

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.off.checked_add(n).ok_or_else(|| DecodeError("overflow".into()))?;
        let s = self.bytes.get(self.off..end).ok_or_else(|| DecodeError("truncated".into()))?;
        self.off = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String, DecodeError> {
        let n = self.u64()? as usize;
        if n > 1 << 16 {
            return Err(DecodeError("string too long".into()));
        }
        let s = self.take(n)?;
        String::from_utf8(s.to_vec()).map_err(|_| DecodeError("bad utf8".into()))
    }
}

/// Model text syntax errors, with 1-based line numbers.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

/// Semantic errors in a model or during extended-graph construction.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("node `{node}`: unknown input `{input}`")]
    UnknownInput { node: String, input: String },
    #[error("node `{node}`: input slot {slot} out of range")]
    BadSlot { node: String, slot: u32 },
    #[error("node `{node}`: {kind} takes {want} inputs, got {got}")]
    BadArity { node: String, kind: &'static str, want: usize, got: usize },
    #[error("cycle through `{0}`")]
    Cycle(String),
    #[error("node `{node}`: {detail}")]
    Shape { node: String, detail: String },
    #[error("node `{node}`: missing or invalid attr `{attr}`")]
    BadAttr { node: String, attr: &'static str },
    #[error("loss: {0}")]
    BadLoss(String),
    #[error("node `{0}` does not reach the loss")]
    DeadNode(String),
    #[error("declaration `{0}` is never consumed")]
    UnusedDecl(String),
    #[error("parameter `{0}` has no gradient path")]
    MissingGrad(String),
    #[error("invalid identifier `{0}` (allowed: [A-Za-z0-9_-], `.` is reserved)")]
    BadId(String),
}

/// Errors attributable to a node while executing one step. These also cover
/// evaluation of node specs received over the wire, which may be malformed,
/// so every case is an error rather than a panic.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExecError {
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("node `{node}`: {source}")]
    Op {
        node: String,
        #[source]
        source: crate::detops::OpError,
    },
    #[error("node `{node}`: produced shape {got}, expected {want}")]
    OutputShape { node: String, got: String, want: String },
    #[error("node `{node}`: missing or invalid attr `{attr}`")]
    Attr { node: String, attr: &'static str },
    #[error("node `{node}`: wants {want} inputs, got {got}")]
    Arity { node: String, want: usize, got: usize },
    #[error("node `{node}`: {kind} is not recomputable from payloads")]
    NotRecomputable { node: String, kind: &'static str },
}
