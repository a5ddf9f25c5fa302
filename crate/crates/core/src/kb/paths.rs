use std::collections::{BTreeSet, VecDeque};

use super::{EntityIx, KnowledgeBase, RelationIx};
use crate::error::{Error, Result};

/// Undirected hop distances from `source`, `usize::MAX` when unreachable or
/// beyond `limit`.
pub(crate) fn distances(kb: &KnowledgeBase, source: EntityIx, limit: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; kb.num_entities()];
    dist[source] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        if dist[u] == limit {
            continue;
        }
        for e in kb.edges(u) {
            if dist[e.neighbor] == usize::MAX {
                dist[e.neighbor] = dist[u] + 1;
                queue.push_back(e.neighbor);
            }
        }
    }
    dist
}

/// Entities at undirected distance 1..=h from `topic`, ordered by distance
/// then index.
pub fn khop_candidates(kb: &KnowledgeBase, topic: EntityIx, h: usize) -> Result<Vec<EntityIx>> {
    if topic >= kb.num_entities() {
        return Err(Error::Kb(format!("unknown topic entity index {topic}")));
    }
    if h == 0 {
        return Err(Error::Invalid("hop count must be at least 1".into()));
    }
    let dist = distances(kb, topic, h);
    let mut out: Vec<(usize, EntityIx)> = dist
        .iter()
        .enumerate()
        .filter(|&(_, &d)| d >= 1 && d <= h)
        .map(|(e, &d)| (d, e))
        .collect();
    out.sort_unstable();
    Ok(out.into_iter().map(|(_, e)| e).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerPath {
    /// Relations from candidate to topic.
    pub relations: Vec<RelationIx>,
    /// Visited entities, candidate first and topic last.
    pub nodes: Vec<EntityIx>,
    /// Concatenated lowest-level relation words.
    pub tokens: Vec<String>,
}

/// Shortest candidate-to-topic relation path, ignoring edge direction.
/// Among shortest paths the lexicographically smallest relation sequence
/// wins; nodes along it are the smallest indices realizing that sequence.
pub fn extract_answer_path(
    kb: &KnowledgeBase,
    candidate: EntityIx,
    topic: EntityIx,
    h: usize,
) -> Result<AnswerPath> {
    let n = kb.num_entities();
    if candidate >= n || topic >= n {
        return Err(Error::Kb("unknown entity index".into()));
    }
    let dist = distances(kb, topic, h);
    let len = dist[candidate];
    if len == usize::MAX || len == 0 {
        return Err(Error::Kb(format!(
            "`{}` is not within {h} hops of `{}`",
            kb.entity(candidate).id,
            kb.entity(topic).id
        )));
    }
    let mut frontiers = vec![BTreeSet::from([candidate])];
    let mut relations = Vec::with_capacity(len);
    for step in 0..len {
        let want = len - step - 1;
        let frontier = &frontiers[step];
        let best = frontier
            .iter()
            .flat_map(|&u| kb.edges(u).iter())
            .filter(|e| dist[e.neighbor] == want)
            .map(|e| e.relation)
            .min()
            .expect("a node at distance k has a neighbor at k-1");
        let next: BTreeSet<EntityIx> = frontier
            .iter()
            .flat_map(|&u| kb.edges(u).iter())
            .filter(|e| dist[e.neighbor] == want && e.relation == best)
            .map(|e| e.neighbor)
            .collect();
        relations.push(best);
        frontiers.push(next);
    }
    let mut nodes = vec![topic; len + 1];
    for step in (0..len).rev() {
        let after = nodes[step + 1];
        nodes[step] = *frontiers[step]
            .iter()
            .find(|&&u| kb.connected_by(u, relations[step], after))
            .expect("frontier node realizes the chosen relation");
    }
    let tokens = relations
        .iter()
        .flat_map(|&r| kb.relation(r).words.iter().cloned())
        .collect();
    Ok(AnswerPath {
        relations,
        nodes,
        tokens,
    })
}
