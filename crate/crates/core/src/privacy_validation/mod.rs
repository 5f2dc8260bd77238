//! Falsification-based privacy validation.

pub mod cases;
pub mod matcher;
pub mod metrics;
pub mod recovery;

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use cases::{generate_cases, load_cases, save_cases, CaseOptions, FaceRef, ValidationCase};
pub use matcher::{
    match_crops, match_embeddings, matcher_accuracy, p_pre, p_pre_from_counts, predict_cases, PpreSummary, RuleStats,
    DEFAULT_MATCH_THRESHOLD,
};
pub use metrics::{gaussian_blur, gaussian_kernel, ied, psnr, ssim};
pub use recovery::{recover, train_recovery, RecoveryModel, RecoveryPair};

use crate::error::{PpError, Result};

/// Serializes non-finite PSNR values as `"inf"`.
pub mod psnr_value {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid PSNR value {t:?}"))),
        }
    }
}

/// Mean image similarity between originals and one derived variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityEntry {
    pub pair: String,
    pub count: usize,
    pub ssim: f64,
    #[serde(with = "psnr_value")]
    pub psnr: f64,
}

/// Distribution of embedding displacement between two stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IedSummary {
    pub pair: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl IedSummary {
    pub fn from_values(pair: impl Into<String>, values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(PpError::Domain("no displacement values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            pair: pair.into(),
            count: values.len(),
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    /// Case and correct counts keyed by rule number.
    pub rules: BTreeMap<u8, RuleStats>,
    pub matcher_accuracy_r13: f64,
    pub p_pre: f64,
    /// Mean SSIM between originals and their anonymized crops.
    pub mean_ssim: f64,
    #[serde(with = "psnr_value")]
    pub mean_psnr: f64,
    pub quality: Vec<QualityEntry>,
    pub ied: Vec<IedSummary>,
}

impl PrivacyReport {
    pub fn validate(&self) -> Result<()> {
        let ratios = [self.matcher_accuracy_r13, self.p_pre];
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(PpError::Validation("privacy ratios must lie in [0, 1]".into()));
        }
        let derived: Vec<RuleStats> = (4..=7).filter_map(|r| self.rules.get(&r).copied()).collect();
        if !derived.is_empty() {
            let expect = p_pre_from_counts(&derived)?;
            if (expect - self.p_pre).abs() > 1e-12 {
                return Err(PpError::Validation(format!(
                    "p_pre {} disagrees with rule counts ({expect})",
                    self.p_pre
                )));
            }
        }
        Ok(())
    }

    /// Rows shaped like a per-rule statistics table: rule, cases, correct, ratio.
    pub fn rule_table(&self) -> String {
        let mut out = String::from("rule,cases,correct,ratio\n");
        for (rule, s) in &self.rules {
            let ratio = s.ratio().map_or("N/A".to_string(), |r| format!("{r:.4}"));
            out.push_str(&format!("{rule},{},{},{ratio}\n", s.cases, s.correct));
        }
        out
    }
}
