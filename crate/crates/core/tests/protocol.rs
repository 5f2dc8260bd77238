mod common;

use std::collections::BTreeMap;

use ppfer_core::batch_builder::{bce_labels, triplet_views, valid_batch_shape};
use ppfer_core::data_model::Variant;
use ppfer_core::privacy_validation::cases::{count_by_rule, rule_ground_truth};
use ppfer_core::privacy_validation::{generate_cases, load_cases, p_pre, p_pre_from_counts, save_cases, CaseOptions, RuleStats};
use ppfer_core::PpError;
use proptest::prelude::*;

#[test]
fn batch_shapes_match_the_published_table() {
    let sizes = [4, 16, 64, 256, 1024];
    let ns = [1, 5, 21, 85, 341];
    for k in 1..=5u32 {
        let s = valid_batch_shape(k).unwrap();
        assert_eq!(s.size, sizes[k as usize - 1]);
        assert_eq!(s.n, ns[k as usize - 1]);
        assert_eq!(s.m, 2 * k);
    }
    for k in 1..=10u32 {
        let s = valid_batch_shape(k).unwrap();
        assert_eq!(3 * s.n + 1, 4usize.pow(k));
        assert_eq!(s.size, 1usize << s.m);
    }
    assert!(valid_batch_shape(0).is_err());
}

#[test]
fn bce_zeros_sit_at_anchor_and_negative_of_first_triplet() {
    for n in [1, 5, 21, 85, 341] {
        let labels = bce_labels(n).unwrap();
        assert_eq!(labels.len(), 3 * n);
        for (i, &b) in labels.bits().iter().enumerate() {
            assert_eq!(b, u8::from(i != 0 && i != 2), "n={n} i={i}");
        }
        let v = triplet_views(3 * n + 1).unwrap();
        let mut all: Vec<usize> = v.anchors.iter().chain(&v.positives).chain(&v.negatives).copied().collect();
        all.push(0);
        all.sort_unstable();
        assert_eq!(all, (0..3 * n + 1).collect::<Vec<_>>());
        assert_eq!((v.anchors.len(), v.positives.len(), v.negatives.len()), (n, n, n));
    }
    assert!(bce_labels(0).is_err());
}

fn counts(correct: [u64; 4], cases: u64) -> Vec<RuleStats> {
    correct.iter().map(|&c| RuleStats { cases, correct: c }).collect()
}

#[test]
fn pooled_ratio_reproduces_published_statistics() {
    let rows = [
        ([24897, 25297, 24681, 25052], 25969, 0.9620),
        ([4108, 4127, 3952, 4010], 4464, 0.9071),
        ([2201, 2299, 2101, 2174], 2343, 0.9363),
        // blur baselines
        ([15842, 16049, 5291, 5411], 25969, 0.4100),
        ([1681, 1706, 436, 116], 4464, 0.2206),
        ([789, 698, 159, 265], 2343, 0.2039),
    ];
    for (correct, cases, want) in rows {
        let got = p_pre_from_counts(&counts(correct, cases)).unwrap();
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    }
}

#[test]
fn pooled_ratio_rejects_impossible_counts() {
    assert!(p_pre_from_counts(&counts([4408, 4494, 3910, 3987], 4464)).is_err());
    assert!(p_pre_from_counts(&[]).is_err());
}

#[test]
fn ground_truth_table() {
    let want = [(1, 0), (2, 0), (3, 1), (4, 0), (5, 0), (6, 0), (7, 0)];
    for (rule, gt) in want {
        assert_eq!(rule_ground_truth(rule).unwrap(), gt);
    }
    assert!(rule_ground_truth(0).is_err());
    assert!(rule_ground_truth(8).is_err());
}

#[test]
fn p_pre_counts_matcher_saying_different() {
    let ms = common::manifests_from_layout(&[vec![3, 2], vec![4]]);
    let refs: Vec<_> = ms.iter().collect();
    let cases = generate_cases(&refs, CaseOptions { quota: None, seed: 1 }).unwrap();
    let derived: Vec<_> = cases.into_iter().filter(|c| c.rule_id >= 4).collect();
    assert_eq!(derived.len(), 12);
    // Matcher says "same" on every rule 6 case and "different" elsewhere.
    let preds: Vec<u8> = derived.iter().map(|c| u8::from(c.rule_id == 6)).collect();
    let s = p_pre(&derived, &preds).unwrap();
    assert!((s.p_pre - 9.0 / 12.0).abs() < 1e-12);
    assert_eq!(s.per_rule[&6], RuleStats { cases: 3, correct: 0 });
    assert_eq!(s.per_rule[&4], RuleStats { cases: 3, correct: 3 });
}

#[test]
fn p_pre_rejects_calibration_rules() {
    let ms = common::manifests_from_layout(&[vec![3, 2]]);
    let refs: Vec<_> = ms.iter().collect();
    let cases = generate_cases(&refs, CaseOptions { quota: None, seed: 1 }).unwrap();
    let preds = vec![0; cases.len()];
    assert!(matches!(p_pre(&cases, &preds), Err(PpError::Domain(_))));
}

#[test]
fn missing_variant_is_a_capacity_error() {
    let ms = common::manifests_from_layout(&[vec![2]]);
    let refs: Vec<_> = ms.iter().filter(|m| m.variant != Variant::Dpp).collect();
    assert!(matches!(
        generate_cases(&refs, CaseOptions { quota: None, seed: 0 }),
        Err(PpError::Capacity(_))
    ));
}

#[test]
fn cases_round_trip_through_jsonl() {
    let ms = common::manifests_from_layout(&[vec![3, 2], vec![4], vec![1, 1, 2]]);
    let refs: Vec<_> = ms.iter().collect();
    let cases = generate_cases(&refs, CaseOptions { quota: Some(5), seed: 9 }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cases.jsonl");
    save_cases(&cases, &path).unwrap();
    assert_eq!(load_cases(&path).unwrap(), cases);
}

#[test]
fn case_generation_is_seeded() {
    let ms = common::manifests_from_layout(&[vec![3, 2], vec![4, 3], vec![2]]);
    let refs: Vec<_> = ms.iter().collect();
    let a = generate_cases(&refs, CaseOptions { quota: None, seed: 5 }).unwrap();
    let b = generate_cases(&refs, CaseOptions { quota: None, seed: 5 }).unwrap();
    assert_eq!(a, b);
}

fn layout() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn generated_cases_obey_the_rule_table(layout in layout(), seed in any::<u64>(), quota in prop::option::of(1usize..8)) {
        let ms = common::manifests_from_layout(&layout);
        let refs: Vec<_> = ms.iter().collect();
        let cases = generate_cases(&refs, CaseOptions { quota, seed }).unwrap();
        let tracks: usize = layout.iter().map(Vec::len).sum();
        let multi_crop: usize = layout.iter().flatten().filter(|&&c| c >= 2).count();

        let by_rule: BTreeMap<u8, usize> = count_by_rule(&cases);
        for rule in 4..=7u8 {
            prop_assert_eq!(by_rule.get(&rule).copied().unwrap_or(0), tracks);
        }
        prop_assert_eq!(by_rule.get(&3).copied().unwrap_or(0), multi_crop);
        let limit = quota.unwrap_or(tracks);
        prop_assert!(by_rule.get(&1).copied().unwrap_or(0) <= limit);
        prop_assert!(by_rule.get(&2).copied().unwrap_or(0) <= limit);
        if layout.len() < 2 {
            prop_assert!(!by_rule.contains_key(&2));
        }
        for c in &cases {
            c.validate().unwrap();
            prop_assert_eq!(c.ground_truth, rule_ground_truth(c.rule_id).unwrap());
            if c.rule_id >= 4 {
                prop_assert_eq!(c.left.track_id, c.right.track_id);
                prop_assert_eq!(&c.left.video_id, &c.right.video_id);
                prop_assert_eq!(c.left.variant, Variant::Original);
            }
        }
        let mut order: Vec<u8> = cases.iter().map(|c| c.rule_id).collect();
        let sorted = { let mut s = order.clone(); s.sort_unstable(); s };
        prop_assert_eq!(std::mem::take(&mut order), sorted);
    }
}
