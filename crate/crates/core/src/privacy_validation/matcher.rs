//! Same-identity decisions, matcher accuracy and the privacy-preservation ratio.

use std::collections::{BTreeMap, HashMap};

use ppfer_nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::cases::ValidationCase;
use crate::data_model::EmbeddingVector;
use crate::error::{PpError, Result};
use crate::models::IdentityEmbedder;

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;

/// 1 iff the cosine similarity reaches `threshold`.
pub fn match_embeddings<T: Scalar>(a: &EmbeddingVector<T>, b: &EmbeddingVector<T>, threshold: f64) -> u8 {
    u8::from(a.cosine(b).as_f64() >= threshold)
}

/// Embeds two `[1, 3, res, res]` crops and compares them.
pub fn match_crops<T: Scalar, E: IdentityEmbedder<T> + ?Sized>(
    left: &Tensor<T>,
    right: &Tensor<T>,
    embedder: &E,
    threshold: f64,
) -> Result<u8> {
    let z = embedder.embed(&Tensor::concat0(&[left.clone(), right.clone()])?)?;
    Ok(match_embeddings(&z[0], &z[1], threshold))
}

/// Predictions for every case, looking embeddings up by crop reference.
pub fn predict_cases<T: Scalar>(
    cases: &[ValidationCase],
    embeddings: &HashMap<String, EmbeddingVector<T>>,
    threshold: f64,
) -> Result<Vec<u8>> {
    let get = |r: &str| {
        embeddings
            .get(r)
            .ok_or_else(|| PpError::Validation(format!("no embedding for crop {r}")))
    };
    cases
        .iter()
        .map(|c| Ok(match_embeddings(get(&c.left.crop_ref)?, get(&c.right.crop_ref)?, threshold)))
        .collect()
}

/// Fraction of cases whose prediction equals the ground truth.
pub fn matcher_accuracy(cases: &[ValidationCase], predictions: &[u8]) -> Result<f64> {
    if cases.len() != predictions.len() {
        return Err(PpError::Domain(format!(
            "{} cases but {} predictions",
            cases.len(),
            predictions.len()
        )));
    }
    if cases.is_empty() {
        return Err(PpError::Domain("no cases to score".into()));
    }
    let correct = cases.iter().zip(predictions).filter(|(c, &p)| c.ground_truth == p).count();
    Ok(correct as f64 / cases.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleStats {
    pub cases: u64,
    pub correct: u64,
}

impl RuleStats {
    pub fn ratio(&self) -> Option<f64> {
        (self.cases > 0).then(|| self.correct as f64 / self.cases as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpreSummary {
    pub per_rule: BTreeMap<u8, RuleStats>,
    pub p_pre: f64,
}

/// Pooled ratio of correct to total cases.
pub fn p_pre_from_counts(per_rule: &[RuleStats]) -> Result<f64> {
    let (c, n) = per_rule
        .iter()
        .fold((0u64, 0u64), |(c, n), r| (c + r.correct, n + r.cases));
    if per_rule.iter().any(|r| r.correct > r.cases) {
        return Err(PpError::Domain("correct count exceeds case count".into()));
    }
    if n == 0 {
        return Err(PpError::Domain("no cases".into()));
    }
    Ok(c as f64 / n as f64)
}

/// Privacy-preservation ratio over rule 4 to 7 cases: a case is correct when
/// the matcher says "different identity".
pub fn p_pre(cases: &[ValidationCase], predictions: &[u8]) -> Result<PpreSummary> {
    if cases.len() != predictions.len() {
        return Err(PpError::Domain(format!(
            "{} cases but {} predictions",
            cases.len(),
            predictions.len()
        )));
    }
    let mut per_rule: BTreeMap<u8, RuleStats> = BTreeMap::new();
    for (c, &p) in cases.iter().zip(predictions) {
        if !(4..=7).contains(&c.rule_id) {
            return Err(PpError::Domain(format!("rule {} case in a privacy ratio", c.rule_id)));
        }
        let s = per_rule.entry(c.rule_id).or_default();
        s.cases += 1;
        s.correct += u64::from(p == 0);
    }
    let stats: Vec<RuleStats> = per_rule.values().copied().collect();
    Ok(PpreSummary {
        p_pre: p_pre_from_counts(&stats)?,
        per_rule,
    })
}
