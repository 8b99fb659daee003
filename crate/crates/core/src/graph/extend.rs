use super::topo::order_by_deps;
use super::{
    AttrValue, Attrs, Consumer, ExtendedGraph, GraphError, ModelGraph, NodeSpec, OpKind,
    OptimizerCfg, SlotRef,
};
use crate::detops::Shape;
use std::collections::{BTreeMap, BTreeSet};

fn forward_arity(kind: OpKind) -> usize {
    match kind {
        OpKind::MatMul | OpKind::Add | OpKind::CrossEntropy => 2,
        OpKind::ReLU | OpKind::Softmax => 1,
        _ => unreachable!("not a forward kind"),
    }
}

fn out_arity(kind: OpKind) -> usize {
    match kind {
        OpKind::MatMulBwd | OpKind::AddBwd => 2,
        OpKind::AdamUpdate => 3,
        _ => 1,
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn validate_model(model: &ModelGraph) -> Result<Vec<usize>, GraphError> {
    let mut ids = BTreeSet::new();
    for name in model
        .params
        .iter()
        .map(|p| p.name.as_str())
        .chain(model.data.iter().map(|d| d.name.as_str()))
        .chain(model.nodes.iter().map(|n| n.id.as_str()))
    {
        if !valid_id(name) {
            return Err(GraphError::BadId(name.to_string()));
        }
        if !ids.insert(name) {
            return Err(GraphError::DuplicateId(name.to_string()));
        }
    }

    let node_index: BTreeMap<&str, usize> =
        model.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let decls: BTreeSet<&str> = model
        .params
        .iter()
        .map(|p| p.name.as_str())
        .chain(model.data.iter().map(|d| d.name.as_str()))
        .collect();

    let mut deps = vec![Vec::new(); model.nodes.len()];
    for (i, n) in model.nodes.iter().enumerate() {
        let want = forward_arity(n.kind);
        if n.inputs.len() != want {
            return Err(GraphError::BadArity {
                node: n.id.clone(),
                kind: n.kind.name(),
                want,
                got: n.inputs.len(),
            });
        }
        for r in &n.inputs {
            if let Some(&d) = node_index.get(r.node.as_str()) {
                deps[i].push(d);
            } else if !decls.contains(r.node.as_str()) {
                return Err(GraphError::UnknownInput { node: n.id.clone(), input: r.node.clone() });
            }
            if r.slot != 0 {
                // declarations and forward nodes all have one output
                return Err(GraphError::BadSlot { node: n.id.clone(), slot: r.slot });
            }
        }
        if n.kind == OpKind::CrossEntropy && n.id != model.loss {
            return Err(GraphError::BadLoss(format!(
                "cross_entropy node `{}` must be the loss",
                n.id
            )));
        }
    }

    let loss_pos = *node_index
        .get(model.loss.as_str())
        .ok_or_else(|| GraphError::BadLoss(format!("unknown loss id `{}`", model.loss)))?;
    if model.nodes[loss_pos].kind != OpKind::CrossEntropy {
        return Err(GraphError::BadLoss("loss node must be cross_entropy".into()));
    }

    let ids_vec: Vec<String> = model.nodes.iter().map(|n| n.id.clone()).collect();
    let order = order_by_deps(&ids_vec, &deps)?;

    // every node must be an ancestor of the loss; every declaration must
    // feed a reachable node
    let mut live = vec![false; model.nodes.len()];
    let mut used_decls: BTreeSet<&str> = BTreeSet::new();
    let mut stack = vec![loss_pos];
    while let Some(i) = stack.pop() {
        if live[i] {
            continue;
        }
        live[i] = true;
        for r in &model.nodes[i].inputs {
            if let Some(&d) = node_index.get(r.node.as_str()) {
                stack.push(d);
            } else {
                used_decls.insert(r.node.as_str());
            }
        }
    }
    if let Some(dead) = (0..model.nodes.len()).find(|&i| !live[i]) {
        return Err(GraphError::DeadNode(model.nodes[dead].id.clone()));
    }
    if let Some(unused) = decls.iter().find(|d| !used_decls.contains(*d)) {
        return Err(GraphError::UnusedDecl(unused.to_string()));
    }
    Ok(order)
}

// Work-in-progress node: a NodeSpec before consumers are known.
struct Proto {
    id: String,
    kind: OpKind,
    attrs: Attrs,
    inputs: Vec<SlotRef>,
}

// Collects gradient contributions per forward tensor (producer id, slot)
// and folds them with an explicit Add chain when a combined value is
// needed. Partials are sorted by contributing node id, so the accumulation
// order is canonical regardless of traversal order.
struct GradBook {
    partials: BTreeMap<(String, u32), Vec<SlotRef>>,
}

impl GradBook {
    fn add(&mut self, tensor: (&str, u32), partial: SlotRef) {
        self.partials
            .entry((tensor.0.to_string(), tensor.1))
            .or_default()
            .push(partial);
    }

    fn combined(&mut self, tensor: (&str, u32), protos: &mut Vec<Proto>) -> Option<SlotRef> {
        let mut parts = self.partials.get(&(tensor.0.to_string(), tensor.1))?.clone();
        parts.sort();
        let mut acc = parts[0].clone();
        for (i, next) in parts.iter().enumerate().skip(1) {
            let id = format!("{}.acc{}", tensor.0, i);
            protos.push(Proto {
                id: id.clone(),
                kind: OpKind::Add,
                attrs: Attrs::new(),
                inputs: vec![acc, next.clone()],
            });
            acc = SlotRef::new(id, 0);
        }
        Some(acc)
    }
}

fn float_attrs(pairs: &[(&str, f32)]) -> Attrs {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), AttrValue::Float(*v)))
        .collect()
}

/// Derives the full per-step graph: init nodes, forward nodes, reverse-mode
/// backward nodes with canonical gradient accumulation, and one update node
/// per parameter. The output is in canonical execution order and identical
/// across builds.
pub fn build_extended_graph(
    model: &ModelGraph,
    opt: &OptimizerCfg,
) -> Result<ExtendedGraph, GraphError> {
    let fwd_order = validate_model(model)?;

    let mut protos: Vec<Proto> = Vec::new();
    for p in &model.params {
        protos.push(Proto { id: p.name.clone(), kind: OpKind::ParamInit, attrs: Attrs::new(), inputs: vec![] });
        if let OptimizerCfg::Adam { .. } = opt {
            for suffix in ["m", "v"] {
                protos.push(Proto {
                    id: format!("{}.{suffix}", p.name),
                    kind: OpKind::ParamInit,
                    attrs: Attrs::new(),
                    inputs: vec![],
                });
            }
        }
    }
    for d in &model.data {
        protos.push(Proto { id: d.name.clone(), kind: OpKind::DataInit, attrs: Attrs::new(), inputs: vec![] });
    }
    for n in &model.nodes {
        protos.push(Proto { id: n.id.clone(), kind: n.kind, attrs: n.attrs.clone(), inputs: n.inputs.clone() });
    }

    // backward pass over forward nodes in reverse canonical order
    let mut grads = GradBook { partials: BTreeMap::new() };
    for &i in fwd_order.iter().rev() {
        let n = &model.nodes[i];
        let bwd_id = format!("{}.bwd", n.id);
        match n.kind {
            OpKind::CrossEntropy => {
                // the loss: gradient seed is the implicit 1.0
                protos.push(Proto {
                    id: bwd_id.clone(),
                    kind: OpKind::CrossEntropyBwd,
                    attrs: Attrs::new(),
                    inputs: vec![n.inputs[0].clone(), n.inputs[1].clone()],
                });
                grads.add((&n.inputs[0].node, n.inputs[0].slot), SlotRef::new(bwd_id, 0));
            }
            OpKind::MatMul | OpKind::Add => {
                let g = grads
                    .combined((&n.id, 0), &mut protos)
                    .expect("reachable forward node has a gradient");
                let kind = if n.kind == OpKind::MatMul { OpKind::MatMulBwd } else { OpKind::AddBwd };
                protos.push(Proto {
                    id: bwd_id.clone(),
                    kind,
                    attrs: Attrs::new(),
                    inputs: vec![n.inputs[0].clone(), n.inputs[1].clone(), g],
                });
                grads.add((&n.inputs[0].node, n.inputs[0].slot), SlotRef::new(bwd_id.clone(), 0));
                grads.add((&n.inputs[1].node, n.inputs[1].slot), SlotRef::new(bwd_id, 1));
            }
            OpKind::ReLU => {
                let g = grads.combined((&n.id, 0), &mut protos).expect("reachable");
                protos.push(Proto {
                    id: bwd_id.clone(),
                    kind: OpKind::ReLUBwd,
                    attrs: Attrs::new(),
                    inputs: vec![n.inputs[0].clone(), g],
                });
                grads.add((&n.inputs[0].node, n.inputs[0].slot), SlotRef::new(bwd_id, 0));
            }
            OpKind::Softmax => {
                let g = grads.combined((&n.id, 0), &mut protos).expect("reachable");
                protos.push(Proto {
                    id: bwd_id.clone(),
                    kind: OpKind::SoftmaxBwd,
                    attrs: n.attrs.clone(),
                    inputs: vec![SlotRef::new(n.id.clone(), 0), g],
                });
                grads.add((&n.inputs[0].node, n.inputs[0].slot), SlotRef::new(bwd_id, 0));
            }
            _ => unreachable!("validated forward kinds only"),
        }
    }

    // one update node per parameter
    for p in &model.params {
        let g = grads
            .combined((&p.name, 0), &mut protos)
            .ok_or_else(|| GraphError::MissingGrad(p.name.clone()))?;
        let upd_id = format!("{}.upd", p.name);
        match *opt {
            OptimizerCfg::Sgd { lr } => protos.push(Proto {
                id: upd_id,
                kind: OpKind::SgdUpdate,
                attrs: float_attrs(&[("lr", lr)]),
                inputs: vec![SlotRef::new(p.name.clone(), 0), g],
            }),
            OptimizerCfg::Adam { lr, beta1, beta2, eps } => protos.push(Proto {
                id: upd_id,
                kind: OpKind::AdamUpdate,
                attrs: float_attrs(&[("lr", lr), ("beta1", beta1), ("beta2", beta2), ("eps", eps)]),
                inputs: vec![
                    SlotRef::new(p.name.clone(), 0),
                    g,
                    SlotRef::new(format!("{}.m", p.name), 0),
                    SlotRef::new(format!("{}.v", p.name), 0),
                ],
            }),
        }
    }

    // canonical order over the full set
    let ids: Vec<String> = protos.iter().map(|p| p.id.clone()).collect();
    let by_id: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut deps = vec![Vec::new(); protos.len()];
    for (i, p) in protos.iter().enumerate() {
        for r in &p.inputs {
            let d = *by_id
                .get(r.node.as_str())
                .unwrap_or_else(|| panic!("generated input `{}` must exist", r.node));
            deps[i].push(d);
        }
    }
    let order = order_by_deps(&ids, &deps)?;

    let mut nodes: Vec<NodeSpec> = order
        .iter()
        .map(|&i| NodeSpec {
            id: protos[i].id.clone(),
            kind: protos[i].kind,
            attrs: protos[i].attrs.clone(),
            inputs: protos[i].inputs.clone(),
            consumers: vec![Vec::new(); out_arity(protos[i].kind)],
        })
        .collect();

    let index: BTreeMap<String, usize> =
        nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();

    // consumer edges, sorted per slot
    let edges: Vec<(usize, u32, Consumer)> = nodes
        .iter()
        .flat_map(|n| {
            n.inputs.iter().enumerate().map(|(pos, r)| {
                (index[&r.node], r.slot, Consumer { node: n.id.clone(), pos: pos as u32 })
            })
        })
        .collect();
    for (src, slot, c) in edges {
        let slots = &mut nodes[src].consumers;
        if (slot as usize) < slots.len() {
            slots[slot as usize].push(c);
        } else {
            return Err(GraphError::BadSlot { node: nodes[src].id.clone(), slot });
        }
    }
    for n in &mut nodes {
        for slot in &mut n.consumers {
            slot.sort();
        }
    }

    let resolved_inputs: Vec<Vec<(usize, u32)>> = nodes
        .iter()
        .map(|n| n.inputs.iter().map(|r| (index[&r.node], r.slot)).collect())
        .collect();

    let out_shapes = infer_shapes(model, &nodes, &resolved_inputs)?;

    let loss_index = index[&model.loss];
    let mut state_sources = BTreeMap::new();
    for p in &model.params {
        let upd = index[&format!("{}.upd", p.name)];
        state_sources.insert(p.name.clone(), (upd, 0u32));
        if let OptimizerCfg::Adam { .. } = opt {
            state_sources.insert(format!("{}.m", p.name), (upd, 1u32));
            state_sources.insert(format!("{}.v", p.name), (upd, 2u32));
        }
    }

    let mut hasher_input = Vec::new();
    for n in &nodes {
        hasher_input.extend_from_slice(&n.structural_bytes());
    }
    let structure_digest = crate::commit::hash_bytes(&hasher_input);

    Ok(ExtendedGraph {
        nodes,
        index,
        resolved_inputs,
        out_shapes,
        state_sources,
        loss_index,
        structure_digest,
    })
}

fn infer_shapes(
    model: &ModelGraph,
    nodes: &[NodeSpec],
    resolved: &[Vec<(usize, u32)>],
) -> Result<Vec<Vec<Shape>>, GraphError> {
    let mut shapes: Vec<Vec<Shape>> = Vec::with_capacity(nodes.len());
    let err = |node: &NodeSpec, detail: String| GraphError::Shape { node: node.id.clone(), detail };

    for (i, n) in nodes.iter().enumerate() {
        let input = |pos: usize| -> &Shape {
            let (src, slot) = resolved[i][pos];
            &shapes[src][slot as usize]
        };
        let same = |a: &Shape, b: &Shape, what: &str| -> Result<(), GraphError> {
            if a != b {
                return Err(err(n, format!("{what}: {a} vs {b}")));
            }
            Ok(())
        };
        let bias_ok = |a: &Shape, b: &Shape| -> Result<(), GraphError> {
            if a == b {
                return Ok(());
            }
            if b.rank() == 1 && a.rank() >= 1 && b.dims()[0] == *a.dims().last().unwrap() {
                return Ok(());
            }
            Err(err(n, format!("operands {a} vs {b}")))
        };
        let axis_attr = || -> Result<usize, GraphError> {
            match n.attrs.get("axis") {
                Some(AttrValue::Int(v)) if *v >= 0 => Ok(*v as usize),
                _ => Err(GraphError::BadAttr { node: n.id.clone(), attr: "axis" }),
            }
        };

        let out: Vec<Shape> = match n.kind {
            OpKind::ParamInit => {
                let base = n.id.strip_suffix(".m").or_else(|| n.id.strip_suffix(".v")).unwrap_or(&n.id);
                let p = model
                    .param(base)
                    .ok_or_else(|| err(n, format!("no declaration for `{base}`")))?;
                vec![p.shape.clone()]
            }
            OpKind::DataInit => {
                let d = model
                    .data_decl(&n.id)
                    .ok_or_else(|| err(n, format!("no declaration for `{}`", n.id)))?;
                vec![d.shape.clone()]
            }
            OpKind::MatMul => {
                let (a, b) = (input(0), input(1));
                if a.rank() != 2 || b.rank() != 2 || a.dims()[1] != b.dims()[0] {
                    return Err(err(n, format!("matmul {a} x {b}")));
                }
                vec![Shape::new(vec![a.dims()[0], b.dims()[1]]).unwrap()]
            }
            OpKind::Add => {
                let (a, b) = (input(0), input(1));
                bias_ok(a, b)?;
                vec![a.clone()]
            }
            OpKind::ReLU => vec![input(0).clone()],
            OpKind::Softmax => {
                let a = input(0);
                let axis = axis_attr()?;
                if axis >= a.rank() {
                    return Err(GraphError::BadAttr { node: n.id.clone(), attr: "axis" });
                }
                vec![a.clone()]
            }
            OpKind::CrossEntropy => {
                let (l, y) = (input(0), input(1));
                if l.rank() != 2 || y.rank() != 1 || l.dims()[0] != y.dims()[0] {
                    return Err(err(n, format!("logits {l} labels {y}")));
                }
                vec![Shape::scalar()]
            }
            OpKind::MatMulBwd => {
                let (a, b, g) = (input(0), input(1), input(2));
                if a.rank() != 2 || b.rank() != 2 || a.dims()[1] != b.dims()[0] {
                    return Err(err(n, format!("matmul_bwd {a} x {b}")));
                }
                same(g, &Shape::new(vec![a.dims()[0], b.dims()[1]]).unwrap(), "grad")?;
                vec![a.clone(), b.clone()]
            }
            OpKind::AddBwd => {
                let (a, b, g) = (input(0), input(1), input(2));
                bias_ok(a, b)?;
                same(g, a, "grad")?;
                vec![a.clone(), b.clone()]
            }
            OpKind::ReLUBwd => {
                same(input(0), input(1), "grad")?;
                vec![input(0).clone()]
            }
            OpKind::SoftmaxBwd => {
                same(input(0), input(1), "grad")?;
                let axis = axis_attr()?;
                if axis >= input(0).rank() {
                    return Err(GraphError::BadAttr { node: n.id.clone(), attr: "axis" });
                }
                vec![input(0).clone()]
            }
            OpKind::CrossEntropyBwd => {
                let (l, y) = (input(0), input(1));
                if l.rank() != 2 || y.rank() != 1 || l.dims()[0] != y.dims()[0] {
                    return Err(err(n, format!("logits {l} labels {y}")));
                }
                vec![l.clone()]
            }
            OpKind::SgdUpdate => {
                same(input(0), input(1), "param/grad")?;
                vec![input(0).clone()]
            }
            OpKind::AdamUpdate => {
                for pos in 1..4 {
                    same(input(0), input(pos), "param/grad/moments")?;
                }
                vec![input(0).clone(); 3]
            }
        };
        shapes.push(out);
    }
    Ok(shapes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_model;

    const ONE_MATMUL: &str = "\
param w 4x3 seed=1
data x 2x4
data y 2
node out matmul inputs=x,w
node l cross_entropy inputs=out,y
loss l
";

    fn kinds(eg: &ExtendedGraph) -> BTreeMap<OpKind, usize> {
        let mut m = BTreeMap::new();
        for n in &eg.nodes {
            *m.entry(n.kind).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn one_matmul_sgd_node_multiset() {
        let g = parse_model(ONE_MATMUL).unwrap();
        let eg = build_extended_graph(&g, &OptimizerCfg::Sgd { lr: 0.1 }).unwrap();
        let k = kinds(&eg);
        assert_eq!(eg.len(), 8);
        assert_eq!(k[&OpKind::DataInit], 2);
        assert_eq!(k[&OpKind::ParamInit], 1);
        assert_eq!(k[&OpKind::MatMul], 1);
        assert_eq!(k[&OpKind::CrossEntropy], 1);
        assert_eq!(k[&OpKind::CrossEntropyBwd], 1);
        assert_eq!(k[&OpKind::MatMulBwd], 1);
        assert_eq!(k[&OpKind::SgdUpdate], 1);
    }

    #[test]
    fn adam_adds_moment_inits_and_triple_output() {
        let g = parse_model(ONE_MATMUL).unwrap();
        let eg = build_extended_graph(&g, &OptimizerCfg::adam(0.001)).unwrap();
        let k = kinds(&eg);
        assert_eq!(k[&OpKind::ParamInit], 3); // w, w.m, w.v
        assert_eq!(k[&OpKind::AdamUpdate], 1);
        assert_eq!(eg.state_sources.len(), 3);
        let upd = eg.node_index("w.upd").unwrap();
        assert_eq!(eg.state_sources["w"], (upd, 0));
        assert_eq!(eg.state_sources["w.m"], (upd, 1));
        assert_eq!(eg.state_sources["w.v"], (upd, 2));
        assert_eq!(eg.out_shapes[upd].len(), 3);
    }

    #[test]
    fn repeated_builds_agree_exactly() {
        let g = parse_model(ONE_MATMUL).unwrap();
        let a = build_extended_graph(&g, &OptimizerCfg::adam(0.001)).unwrap();
        let b = build_extended_graph(&g, &OptimizerCfg::adam(0.001)).unwrap();
        assert_eq!(a.structure_digest(), b.structure_digest());
        assert_eq!(a.nodes, b.nodes);
    }

    #[test]
    fn fan_out_gets_one_accumulation_add() {
        // w feeds two matmuls whose outputs add together
        let text = "\
param w 3x3 seed=1
data x 2x3
data y 2
node h1 matmul inputs=x,w
node h2 matmul inputs=h1,w
node l cross_entropy inputs=h2,y
loss l
";
        let g = parse_model(text).unwrap();
        let eg = build_extended_graph(&g, &OptimizerCfg::Sgd { lr: 0.1 }).unwrap();
        let accs: Vec<&NodeSpec> = eg.nodes.iter().filter(|n| n.id.contains(".acc")).collect();
        assert_eq!(accs.len(), 1, "two consumers of w, one accumulation add");
        assert_eq!(accs[0].id, "w.acc1");
        assert_eq!(accs[0].kind, OpKind::Add);
        // the update consumes the accumulated gradient
        let upd = &eg.nodes[eg.node_index("w.upd").unwrap()];
        assert_eq!(upd.inputs[1], SlotRef::new("w.acc1", 0));
    }

    #[test]
    fn consumer_lists_are_sorted_and_complete() {
        let g = parse_model(ONE_MATMUL).unwrap();
        let eg = build_extended_graph(&g, &OptimizerCfg::Sgd { lr: 0.1 }).unwrap();
        let w = &eg.nodes[eg.node_index("w").unwrap()];
        // w is read by the forward matmul, the backward matmul, and the update
        let readers: Vec<&str> = w.consumers[0].iter().map(|c| c.node.as_str()).collect();
        assert_eq!(readers, vec!["out", "out.bwd", "w.upd"]);
        for n in &eg.nodes {
            for slot in &n.consumers {
                let mut sorted = slot.clone();
                sorted.sort();
                assert_eq!(&sorted, slot);
            }
        }
    }

    #[test]
    fn unused_declaration_rejected() {
        let text = "param w 4x3 seed=1\nparam dead 2 seed=9\ndata x 2x4\ndata y 2\nnode out matmul inputs=x,w\nnode l cross_entropy inputs=out,y\nloss l\n";
        let g = parse_model(text).unwrap();
        assert!(matches!(
            build_extended_graph(&g, &OptimizerCfg::Sgd { lr: 0.1 }),
            Err(GraphError::UnusedDecl(_))
        ));
    }

    #[test]
    fn dead_node_rejected() {
        let text = "param w 4x3 seed=1\ndata x 2x4\ndata y 2\nnode out matmul inputs=x,w\nnode stray relu inputs=out\nnode l cross_entropy inputs=out,y\nloss l\n";
        let g = parse_model(text).unwrap();
        assert!(matches!(
            build_extended_graph(&g, &OptimizerCfg::Sgd { lr: 0.1 }),
            Err(GraphError::DeadNode(_))
        ));
    }

    #[test]
    fn shape_mismatch_attributed_to_node() {
        let text = "param w 5x3 seed=1\ndata x 2x4\ndata y 2\nnode out matmul inputs=x,w\nnode l cross_entropy inputs=out,y\nloss l\n";
        let g = parse_model(text).unwrap();
        match build_extended_graph(&g, &OptimizerCfg::Sgd { lr: 0.1 }) {
            Err(GraphError::Shape { node, .. }) => assert_eq!(node, "out"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_must_be_loss() {
        let text = "param w 4x3 seed=1\ndata x 2x4\ndata y 2\nnode out matmul inputs=x,w\nnode l cross_entropy inputs=out,y\nnode l2 relu inputs=l\nloss l2\n";
        let g = parse_model(text).unwrap();
        assert!(build_extended_graph(&g, &OptimizerCfg::Sgd { lr: 0.1 }).is_err());
    }
}
