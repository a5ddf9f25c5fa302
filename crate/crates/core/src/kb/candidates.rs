use super::{
    extract_answer_path, extract_context, khop_candidates, ContextQuery, EntityIx, KnowledgeBase,
    RelationIx,
};
use crate::error::Result;

/// One candidate answer with its three aspects in token form.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateAnswer {
    pub entity: EntityIx,
    pub type_tokens: Vec<String>,
    /// Candidate-to-topic order.
    pub path_relations: Vec<RelationIx>,
    pub path_tokens: Vec<String>,
    pub context_nodes: Vec<Vec<String>>,
}

/// Every entity within `h` hops of `topic`, with aspects extracted against
/// `query`.
pub fn build_candidates(
    kb: &KnowledgeBase,
    topic: EntityIx,
    h: usize,
    query: &ContextQuery<'_>,
) -> Result<Vec<CandidateAnswer>> {
    khop_candidates(kb, topic, h)?
        .into_iter()
        .map(|entity| {
            let path = extract_answer_path(kb, entity, topic, h)?;
            Ok(CandidateAnswer {
                entity,
                type_tokens: kb.entity(entity).type_tokens.clone(),
                context_nodes: extract_context(kb, &path, query),
                path_relations: path.relations,
                path_tokens: path.tokens,
            })
        })
        .collect()
}
