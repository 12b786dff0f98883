use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::app::{Application, CallContext, ExecFailure, ExecInput, ExecMeter, ExecOutput, PostInput, ReplayHazard};
use crate::wire::Request;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WatchdogFailure {
    /// Rejected by pre-replay analysis; the application never ran.
    #[error("{0}")]
    Hazard(ReplayHazard),
    /// Execution crashed or overran its budget; state was restored.
    #[error("{0}")]
    Exec(ExecFailure),
}

/// A cycle in a wait-for graph, rotated to start at its smallest node.
pub fn find_cycle(graph: &BTreeMap<u32, Vec<u32>>) -> Option<Vec<u32>> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut color: BTreeMap<u32, u8> = BTreeMap::new();
    let mut stack: Vec<u32> = Vec::new();
    fn dfs(v: u32, g: &BTreeMap<u32, Vec<u32>>, color: &mut BTreeMap<u32, u8>, stack: &mut Vec<u32>) -> Option<Vec<u32>> {
        color.insert(v, 1);
        stack.push(v);
        for &w in g.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
            match color.get(&w).copied().unwrap_or(0) {
                1 => {
                    let start = stack.iter().position(|&x| x == w).unwrap();
                    return Some(stack[start..].to_vec());
                }
                0 => {
                    if let Some(c) = dfs(w, g, color, stack) {
                        return Some(c);
                    }
                }
                _ => {}
            }
        }
        stack.pop();
        color.insert(v, 2);
        None
    }
    let nodes: BTreeSet<u32> = graph.iter().flat_map(|(k, vs)| std::iter::once(*k).chain(vs.iter().copied())).collect();
    for v in nodes {
        if color.get(&v).copied().unwrap_or(0) == 0 {
            if let Some(mut c) = dfs(v, graph, &mut color, &mut stack) {
                let min = c.iter().enumerate().min_by_key(|(_, x)| **x).map(|(i, _)| i).unwrap();
                c.rotate_left(min);
                return Some(c);
            }
        }
    }
    None
}

/// Runs `execute` under a simulated-time budget. Replayed post-determined
/// values are analysed first; a failed execution restores the snapshot
/// taken just before it. Returns the output and the budget consumed.
pub fn guarded_execute(
    app: &mut dyn Application,
    ctx: &CallContext,
    request: &Request,
    input: ExecInput<'_>,
    budget_us: u64,
) -> Result<(ExecOutput, u64), (WatchdogFailure, u64)> {
    if let PostInput::Replay(values) = &input.post {
        if !values.is_empty() {
            app.analyze_replay(request, values).map_err(|h| (WatchdogFailure::Hazard(h), 0))?;
        }
    }
    let snapshot = app.snapshot();
    let mut meter = ExecMeter::new(budget_us);
    match app.execute(ctx, request, input, &mut meter) {
        Ok(out) => Ok((out, meter.used_us())),
        Err(e) => {
            app.restore(&snapshot).expect("restoring an own snapshot");
            Err((WatchdogFailure::Exec(e), meter.used_us()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(edges: &[(u32, u32)]) -> BTreeMap<u32, Vec<u32>> {
        let mut g: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for &(a, b) in edges {
            g.entry(a).or_default().push(b);
        }
        g
    }

    /// Oracle: a directed graph has a cycle iff repeatedly deleting nodes
    /// without outgoing edges leaves something behind.
    fn has_cycle_by_peeling(g: &BTreeMap<u32, Vec<u32>>) -> bool {
        let mut nodes: BTreeSet<u32> = g.iter().flat_map(|(k, v)| std::iter::once(*k).chain(v.iter().copied())).collect();
        loop {
            let sink = nodes.iter().copied().find(|n| g.get(n).is_none_or(|vs| vs.iter().all(|w| !nodes.contains(w))));
            match sink {
                Some(s) => {
                    nodes.remove(&s);
                }
                None => return !nodes.is_empty(),
            }
        }
    }

    #[test]
    fn finds_simple_cycles() {
        assert_eq!(find_cycle(&graph(&[(0, 1), (1, 0)])), Some(vec![0, 1]));
        assert_eq!(find_cycle(&graph(&[(2, 3), (3, 1), (1, 2), (0, 1)])), Some(vec![1, 2, 3]));
        assert_eq!(find_cycle(&graph(&[(0, 1), (1, 2), (0, 2)])), None);
        assert_eq!(find_cycle(&graph(&[(4, 4)])), Some(vec![4]));
    }

    #[test]
    fn agrees_with_peeling_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(17);
        for _ in 0..500 {
            let n = rng.gen_range(1..7u32);
            let edges: Vec<(u32, u32)> = (0..rng.gen_range(0..10)).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
            let g = graph(&edges);
            let found = find_cycle(&g);
            assert_eq!(found.is_some(), has_cycle_by_peeling(&g), "{edges:?}");
            if let Some(c) = found {
                for i in 0..c.len() {
                    let (a, b) = (c[i], c[(i + 1) % c.len()]);
                    assert!(g[&a].contains(&b));
                }
            }
        }
    }
}
