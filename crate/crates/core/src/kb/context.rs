use super::{AnswerPath, EntityIx, KnowledgeBase};
use crate::text::{ConstraintKind, Stopwords};

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// One longest common subsequence as matched index pairs `(i, j)`,
/// increasing in both coordinates. Backtracking prefers the latest match.
pub fn lcs_alignment<T: PartialEq>(a: &[T], b: &[T]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    let mut t = vec![0usize; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..n {
        for j in 0..m {
            t[at(i + 1, j + 1)] = if a[i] == b[j] {
                t[at(i, j)] + 1
            } else {
                t[at(i, j + 1)].max(t[at(i + 1, j)])
            };
        }
    }
    let (mut i, mut j) = (n, m);
    let mut out = Vec::with_capacity(t[at(n, m)]);
    while i > 0 && j > 0 {
        if a[i - 1] == b[j - 1] {
            out.push((i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if t[at(i - 1, j)] >= t[at(i, j - 1)] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out.reverse();
    out
}

/// Question view used for context filtering: the question tokens with the
/// topic mention removed, and the constraint kind covering each of them.
#[derive(Clone, Copy, Debug)]
pub struct ContextQuery<'a> {
    pub tokens: &'a [String],
    pub kinds: &'a [Option<ConstraintKind>],
    pub stopwords: &'a Stopwords,
    /// Replace nodes matched inside a constraint span by the kind token.
    pub delex_constraints: bool,
}

/// Entities around `path`'s candidate: its other neighbors, plus the
/// siblings reached through the first path node when that node is not the
/// topic itself.
pub(crate) fn context_entities(kb: &KnowledgeBase, path: &AnswerPath) -> Vec<EntityIx> {
    let cand = path.nodes[0];
    let via = path.nodes[1];
    let mut out: Vec<EntityIx> = kb
        .neighbors(cand)
        .into_iter()
        .filter(|&e| e != via)
        .collect();
    if path.nodes.len() > 2 {
        let next = path.nodes[2];
        out.extend(
            kb.neighbors(via)
                .into_iter()
                .filter(|&e| e != cand && e != next),
        );
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Context node token sequences that share a non-stopword subsequence with
/// the question, in entity index order.
pub fn extract_context(
    kb: &KnowledgeBase,
    path: &AnswerPath,
    query: &ContextQuery<'_>,
) -> Vec<Vec<String>> {
    let content = |toks: &[String]| -> Vec<usize> {
        (0..toks.len())
            .filter(|&i| !query.stopwords.contains(&toks[i]))
            .collect()
    };
    let q_pos = content(query.tokens);
    let q_content: Vec<&String> = q_pos.iter().map(|&i| &query.tokens[i]).collect();
    let mut out = Vec::new();
    for e in context_entities(kb, path) {
        let name = &kb.entity(e).name_tokens;
        let n_content: Vec<&String> = content(name).into_iter().map(|i| &name[i]).collect();
        let matched = lcs_alignment(&q_content, &n_content);
        if matched.is_empty() {
            continue;
        }
        let kind = if query.delex_constraints {
            matched
                .iter()
                .find_map(|&(qi, _)| query.kinds.get(q_pos[qi]).copied().flatten())
        } else {
            None
        };
        match kind {
            Some(k) => out.push(vec![k.token().to_string()]),
            None => out.push(name.clone()),
        }
    }
    out
}
