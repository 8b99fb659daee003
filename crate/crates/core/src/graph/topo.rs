use super::{GraphError, ModelGraph};
use std::collections::{BTreeMap, BTreeSet};

// Kahn's algorithm with a deterministic tie-break: among ready nodes, the
// lexicographically smallest id runs first. The resulting order is a pure
// function of the edge set, never of insertion order or hashing.
pub(crate) fn order_by_deps(
    ids: &[String],
    deps: &[Vec<usize>],
) -> Result<Vec<usize>, GraphError> {
    let n = ids.len();
    let mut indegree = vec![0usize; n];
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, ds) in deps.iter().enumerate() {
        let uniq: BTreeSet<usize> = ds.iter().copied().collect();
        indegree[i] = uniq.len();
        for d in uniq {
            consumers[d].push(i);
        }
    }
    let mut ready: BTreeSet<(&str, usize)> = (0..n)
        .filter(|&i| indegree[i] == 0)
        .map(|i| (ids[i].as_str(), i))
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(&(_, i)) = ready.iter().next() {
        ready.remove(&(ids[i].as_str(), i));
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert((ids[c].as_str(), c));
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n)
            .find(|&i| indegree[i] > 0)
            .map(|i| ids[i].clone())
            .unwrap_or_default();
        return Err(GraphError::Cycle(stuck));
    }
    Ok(order)
}

/// Orders the forward nodes of a model; declaration inputs count as already
/// satisfied. Errors on cycles or references to ids that exist neither as
/// declarations nor nodes.
pub fn topo_sort(g: &ModelGraph) -> Result<Vec<String>, GraphError> {
    let node_index: BTreeMap<&str, usize> =
        g.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let decls: BTreeSet<&str> = g
        .params
        .iter()
        .map(|p| p.name.as_str())
        .chain(g.data.iter().map(|d| d.name.as_str()))
        .collect();
    let ids: Vec<String> = g.nodes.iter().map(|n| n.id.clone()).collect();
    let mut deps = vec![Vec::new(); g.nodes.len()];
    for (i, n) in g.nodes.iter().enumerate() {
        for r in &n.inputs {
            if let Some(&d) = node_index.get(r.node.as_str()) {
                deps[i].push(d);
            } else if !decls.contains(r.node.as_str()) {
                return Err(GraphError::UnknownInput { node: n.id.clone(), input: r.node.clone() });
            }
        }
    }
    let order = order_by_deps(&ids, &deps)?;
    Ok(order.into_iter().map(|i| ids[i].clone()).collect())
}
