//! Training cases paired with the BM25 index built over their facts.

use std::collections::HashMap;

use crate::bm25::{Bm25Index, Bm25Params, RankedHit};
use crate::corpus::{Case, Scheme};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Retrieval corpus: every index document is a labeled case.
#[derive(Debug, Clone)]
pub struct CaseBase<S> {
    index: Bm25Index<S>,
    cases: Vec<Case>,
}

impl<S: Scalar> CaseBase<S> {
    pub fn build(cases: Vec<Case>, params: Bm25Params<S>, scheme: Scheme) -> Result<Self> {
        let index = Bm25Index::from_cases(&cases, params, scheme)?;
        Ok(CaseBase { index, cases })
    }

    /// Pairs an existing index with its cases; ids must line up.
    pub fn from_parts(index: Bm25Index<S>, cases: Vec<Case>) -> Result<Self> {
        if index.len() != cases.len()
            || index
                .doc_ids()
                .iter()
                .zip(&cases)
                .any(|(id, c)| *id != c.id)
        {
            return Err(Error::InvalidParameter(
                "index documents do not match the supplied cases".into(),
            ));
        }
        Ok(CaseBase { index, cases })
    }

    pub fn index(&self) -> &Bm25Index<S> {
        &self.index
    }

    pub fn cases(&self) -> &[Case] {
        &self.cases
    }

    pub fn case(&self, doc: usize) -> &Case {
        &self.cases[doc]
    }

    pub fn case_by_id(&self, id: &str) -> Option<&Case> {
        self.index.doc_position(id).map(|d| &self.cases[d])
    }

    pub fn label(&self, hit: &RankedHit<S>) -> &str {
        &self.cases[hit.doc].charge
    }

    pub fn labels_map(&self) -> HashMap<String, String> {
        self.cases
            .iter()
            .map(|c| (c.id.clone(), c.charge.clone()))
            .collect()
    }

    pub fn retrieve(&self, query_text: &str, k: usize) -> Vec<RankedHit<S>> {
        self.index.retrieve(query_text, k)
    }

    /// Every training case ranked against `query_text`.
    pub fn rank_all(&self, query_text: &str) -> Vec<RankedHit<S>> {
        self.index.retrieve(query_text, self.index.len())
    }
}
