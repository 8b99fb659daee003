use super::{
    AttrValue, AugmentedCGNode, DecodeError, ExecError, ExtendedGraph, ModelGraph, NodeSpec,
    OpKind, OptimizerCfg, StepTrace,
};
use crate::commit::hash_tensor;
use crate::detops::{self, det_rand, DetRngKey, Dist, OpCtx, Tensor};
use crate::graph::optim::{adam_update, sgd_update};
use std::collections::BTreeMap;

/// All state tensors at one checkpoint. `step` counts completed transitions,
/// so step 0 is the freshly initialized state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub step: u64,
    pub tensors: BTreeMap<String, Tensor>,
}

impl TrainingState {
    /// Canonical serialization: step, tensor count, then (name, tensor)
    /// pairs in name order. Doubles as the on-disk checkpoint format and as
    /// the size baseline when reporting dispute bandwidth.
    pub fn snapshot_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&t.canonical_bytes());
        }
        out
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<TrainingState, DecodeError> {
        let take = |off: &mut usize, n: usize| -> Result<&[u8], DecodeError> {
            let end = off.checked_add(n).ok_or_else(|| DecodeError("overflow".into()))?;
            let s = bytes.get(*off..end).ok_or_else(|| DecodeError("truncated".into()))?;
            *off = end;
            Ok(s)
        };
        let mut off = 0;
        let step = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let count = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        if count > 1 << 20 {
            return Err(DecodeError("too many tensors".into()));
        }
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let n = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
            if n > 1 << 16 {
                return Err(DecodeError("name too long".into()));
            }
            let name = String::from_utf8(take(&mut off, n)?.to_vec())
                .map_err(|_| DecodeError("bad utf8".into()))?;
            let (t, used) = Tensor::from_canonical_bytes(&bytes[off..])
                .map_err(|e| DecodeError(format!("tensor `{name}`: {e}")))?;
            off += used;
            tensors.insert(name, t);
        }
        if off != bytes.len() {
            return Err(DecodeError("trailing bytes".into()));
        }
        Ok(TrainingState { step, tensors })
    }
}

/// Batch tensors for one step, keyed by data declaration name.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tensors: BTreeMap<String, Tensor>,
}

impl Batch {
    pub fn new() -> Self {
        Batch { tensors: BTreeMap::new() }
    }

    pub fn insert(mut self, name: impl Into<String>, t: Tensor) -> Self {
        self.tensors.insert(name.into(), t);
        self
    }
}

impl Default for Batch {
    fn default() -> Self {
        Batch::new()
    }
}

/// Result of one step: the next state, the full trace of the transition,
/// and the scalar loss value.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: TrainingState,
    pub trace: StepTrace,
    pub loss: f32,
}

/// Builds checkpoint 0. Rank >= 2 parameters get uniform values in
/// (-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = first extent, drawn from
/// a stream derived from (declared seed, parameter name); rank <= 1
/// parameters and optimizer moments start at zero.
pub fn initial_state(model: &ModelGraph, opt: &OptimizerCfg) -> TrainingState {
    let mut tensors = BTreeMap::new();
    for p in &model.params {
        let t = if p.shape.rank() >= 2 {
            let key = DetRngKey::for_purpose(p.seed, &p.name);
            let mut u = det_rand(key, &p.shape, Dist::Uniform);
            let scale = 1.0 / (p.shape.dims()[0] as f32).sqrt();
            for v in u.values_mut() {
                *v = (*v * 2.0 - 1.0) * scale;
            }
            u
        } else {
            Tensor::zeros(p.shape.clone())
        };
        tensors.insert(p.name.clone(), t);
        if opt.moment_count() == 2 {
            tensors.insert(format!("{}.m", p.name), Tensor::zeros(p.shape.clone()));
            tensors.insert(format!("{}.v", p.name), Tensor::zeros(p.shape.clone()));
        }
    }
    TrainingState { step: 0, tensors }
}

fn attr_f32(spec: &NodeSpec, name: &'static str) -> Result<f32, ExecError> {
    match spec.attrs.get(name) {
        Some(AttrValue::Float(v)) => Ok(*v),
        _ => Err(ExecError::Attr { node: spec.id.clone(), attr: name }),
    }
}

fn attr_axis(spec: &NodeSpec) -> Result<usize, ExecError> {
    match spec.attrs.get("axis") {
        Some(AttrValue::Int(v)) if *v >= 0 => Ok(*v as usize),
        _ => Err(ExecError::Attr { node: spec.id.clone(), attr: "axis" }),
    }
}

/// Evaluates one non-init node from its input tensors. `t` is the 1-based
/// optimizer time of the transition (transition index + 1); only Adam reads
/// it. The spec may come from an untrusted trace, so arity and attributes
/// are fully checked here.
pub fn compute_node(
    ctx: OpCtx,
    spec: &NodeSpec,
    inputs: &[&Tensor],
    t: u64,
) -> Result<Vec<Tensor>, ExecError> {
    let want = |n: usize| -> Result<(), ExecError> {
        if inputs.len() != n {
            return Err(ExecError::Arity { node: spec.id.clone(), want: n, got: inputs.len() });
        }
        Ok(())
    };
    let op_err = |source: detops::OpError| ExecError::Op { node: spec.id.clone(), source };

    let out = match spec.kind {
        OpKind::ParamInit | OpKind::DataInit => {
            return Err(ExecError::NotRecomputable { node: spec.id.clone(), kind: spec.kind.name() })
        }
        OpKind::MatMul => {
            want(2)?;
            vec![detops::matmul(ctx, inputs[0], inputs[1]).map_err(op_err)?]
        }
        OpKind::Add => {
            want(2)?;
            vec![detops::add(ctx, inputs[0], inputs[1]).map_err(op_err)?]
        }
        OpKind::ReLU => {
            want(1)?;
            vec![detops::relu(ctx, inputs[0]).map_err(op_err)?]
        }
        OpKind::Softmax => {
            want(1)?;
            vec![detops::softmax(ctx, inputs[0], attr_axis(spec)?).map_err(op_err)?]
        }
        OpKind::CrossEntropy => {
            want(2)?;
            vec![detops::cross_entropy(ctx, inputs[0], inputs[1]).map_err(op_err)?]
        }
        OpKind::MatMulBwd => {
            want(3)?;
            let (ga, gb) =
                detops::matmul_backward(ctx, inputs[0], inputs[1], inputs[2]).map_err(op_err)?;
            vec![ga, gb]
        }
        OpKind::AddBwd => {
            want(3)?;
            let (a, b, g) = (inputs[0], inputs[1], inputs[2]);
            if g.shape() != a.shape() {
                return Err(op_err(detops::OpError::ShapeMismatch {
                    op: "add_bwd",
                    detail: format!("grad {} vs {}", g.shape(), a.shape()),
                }));
            }
            let gb = if b.shape() == a.shape() {
                g.clone()
            } else {
                // bias broadcast: fold the gradient down to rank 1
                let mut folded = g.clone();
                while folded.shape().rank() > 1 {
                    folded = detops::reduce_sum(ctx, &folded, 0).map_err(op_err)?;
                }
                if folded.shape() != b.shape() {
                    return Err(op_err(detops::OpError::ShapeMismatch {
                        op: "add_bwd",
                        detail: format!("bias {} vs folded grad {}", b.shape(), folded.shape()),
                    }));
                }
                folded
            };
            vec![g.clone(), gb]
        }
        OpKind::ReLUBwd => {
            want(2)?;
            vec![detops::relu_backward(ctx, inputs[0], inputs[1]).map_err(op_err)?]
        }
        OpKind::SoftmaxBwd => {
            want(2)?;
            vec![detops::softmax_backward(ctx, inputs[0], inputs[1], attr_axis(spec)?)
                .map_err(op_err)?]
        }
        OpKind::CrossEntropyBwd => {
            want(2)?;
            vec![detops::cross_entropy_backward(ctx, inputs[0], inputs[1]).map_err(op_err)?]
        }
        OpKind::SgdUpdate => {
            want(2)?;
            vec![sgd_update(ctx, inputs[0], inputs[1], attr_f32(spec, "lr")?).map_err(op_err)?]
        }
        OpKind::AdamUpdate => {
            want(4)?;
            let (p, m, v) = adam_update(
                ctx,
                inputs[0],
                inputs[1],
                inputs[2],
                inputs[3],
                t,
                attr_f32(spec, "lr")?,
                attr_f32(spec, "beta1")?,
                attr_f32(spec, "beta2")?,
                attr_f32(spec, "eps")?,
            )
            .map_err(op_err)?;
            vec![p, m, v]
        }
    };
    Ok(out)
}

/// Runs one transition from `state` with `batch`, calling `hook` on every
/// node after its outputs are computed and before they are hashed. The hook
/// is how test harnesses inject faults; honest execution passes a no-op.
pub fn execute_step_hooked(
    ctx: OpCtx,
    graph: &ExtendedGraph,
    state: &TrainingState,
    batch: &Batch,
    hook: &mut dyn FnMut(usize, &NodeSpec, &mut Vec<Tensor>),
) -> Result<StepOutcome, ExecError> {
    let t = state.step + 1;
    let mut outputs: Vec<Vec<Tensor>> = Vec::with_capacity(graph.len());
    let mut nodes: Vec<AugmentedCGNode> = Vec::with_capacity(graph.len());

    for (i, spec) in graph.nodes.iter().enumerate() {
        let mut outs = match spec.kind {
            OpKind::ParamInit => {
                let v = state
                    .tensors
                    .get(&spec.id)
                    .ok_or_else(|| ExecError::MissingTensor(spec.id.clone()))?;
                vec![v.clone()]
            }
            OpKind::DataInit => {
                let v = batch
                    .tensors
                    .get(&spec.id)
                    .ok_or_else(|| ExecError::MissingTensor(spec.id.clone()))?;
                vec![v.clone()]
            }
            _ => {
                let ins: Vec<&Tensor> = graph
                    .resolved_inputs(i)
                    .iter()
                    .map(|&(src, slot)| &outputs[src][slot as usize])
                    .collect();
                compute_node(ctx, spec, &ins, t)?
            }
        };
        hook(i, spec, &mut outs);

        let want = &graph.out_shapes[i];
        if outs.len() != want.len() {
            return Err(ExecError::OutputShape {
                node: spec.id.clone(),
                got: format!("{} outputs", outs.len()),
                want: format!("{} outputs", want.len()),
            });
        }
        for (slot, out) in outs.iter().enumerate() {
            if out.shape() != &want[slot] {
                return Err(ExecError::OutputShape {
                    node: spec.id.clone(),
                    got: out.shape().to_string(),
                    want: want[slot].to_string(),
                });
            }
        }

        let input_hashes = graph
            .resolved_inputs(i)
            .iter()
            .map(|&(src, slot)| nodes[src].output_hashes[slot as usize])
            .collect();
        let output_hashes = outs.iter().map(hash_tensor).collect();
        nodes.push(AugmentedCGNode { spec: spec.clone(), input_hashes, output_hashes });
        outputs.push(outs);
    }

    let loss = outputs[graph.loss_index][0].values()[0];
    let mut tensors = BTreeMap::new();
    for (name, &(idx, slot)) in &graph.state_sources {
        tensors.insert(name.clone(), outputs[idx][slot as usize].clone());
    }
    Ok(StepOutcome {
        state: TrainingState { step: t, tensors },
        trace: StepTrace { step: t, nodes },
        loss,
    })
}

/// Honest single-step execution.
pub fn execute_step(
    ctx: OpCtx,
    graph: &ExtendedGraph,
    state: &TrainingState,
    batch: &Batch,
) -> Result<StepOutcome, ExecError> {
    execute_step_hooked(ctx, graph, state, batch, &mut |_, _, _| {})
}
