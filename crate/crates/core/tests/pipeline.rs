use std::collections::BTreeMap;
use std::path::Path;

use ppfer_core::pipeline::{emit_report, load_report, parse_stages, Provenance};
use ppfer_core::privacy_validation::{PrivacyReport, RuleStats};
use ppfer_core::{run_pipeline, Pipeline, PipelineConfig, PpError, STAGES};

fn small_config(dir: &Path) -> PipelineConfig {
    let text = format!(
        "output_dir = {}\nidentities = 12\nvideos = 12\nframes_per_video = 4\nstills_per_class = 6\n\
         epochs = 2\nbatches_per_epoch = 2\npretrain_epochs = 1\nfexp_epochs = 3\ndenoise_epochs = 2\n\
         fer_epochs = 2\nrecovery_epochs = 1\nunet_base = 4\n",
        dir.display()
    );
    PipelineConfig::parse(&text).unwrap()
}

fn all() -> Vec<String> {
    STAGES.iter().map(|s| s.to_string()).collect()
}

#[test]
fn stage_without_inputs_names_its_producer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    run_pipeline(cfg.clone(), &parse_stages("synth,track,priors,train-pp").unwrap()).unwrap();
    match run_pipeline(cfg, &["validate".to_string()]) {
        Err(PpError::Dependency { stage, producer, missing }) => {
            assert_eq!(stage, "validate");
            assert_eq!(producer, "anonymize");
            assert!(missing.ends_with("anonymize/pp.jsonl"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn unknown_stage_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        run_pipeline(small_config(dir.path()), &["anonymise".to_string()]),
        Err(PpError::Usage(_))
    ));
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn full_run_is_reproducible_and_audited() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (c1, c2) = (small_config(d1.path()), small_config(d2.path()));
    run_pipeline(c1.clone(), &all()).unwrap();
    run_pipeline(c2, &all()).unwrap();

    let p = Pipeline::new(c1.clone()).unwrap();
    let report = load_report(p.report_path()).unwrap();
    report.privacy.validate().unwrap();
    let fer = report.fer.as_ref().unwrap();
    assert!(fer.with_denoise.is_some() && fer.without_denoise.is_some());
    assert!(report.blur_baseline.is_some());
    for rule in 1..=7u8 {
        assert!(report.privacy.rules[&rule].cases > 0, "rule {rule}");
    }

    // The output directory is part of the config, so compare everything else.
    let strip = |b: Vec<u8>| String::from_utf8(b).unwrap().replace(&d2.path().display().to_string(), "OUT").replace(&d1.path().display().to_string(), "OUT");
    for file in ["report/report.json", "validate/cases.jsonl", "train-pp/f_pp.json", "denoise/dpp.jsonl", "train-fer/fer_dpp.json"] {
        assert_eq!(read(d1.path().join(file)), read(d2.path().join(file)), "{file}");
    }
    for stage in STAGES {
        let prov = |d: &Path| strip(read(d.join("provenance").join(format!("{stage}.json"))));
        let a: Provenance = serde_json::from_str(&prov(d1.path())).unwrap();
        let b: Provenance = serde_json::from_str(&prov(d2.path())).unwrap();
        assert_eq!(a.outputs, b.outputs, "{stage}");
        assert_eq!(a.stage, stage);
        assert_eq!(a.seed, 42);
        // The logged config parses back to the effective config.
        assert_eq!(PipelineConfig::parse(&read_string(d1.path(), stage)).unwrap(), c1);
        assert!(!a.outputs.is_empty());
    }

    // Freeze audits written by the training stages.
    let audit: serde_json::Value = serde_json::from_slice(&read(d1.path().join("train-pp/audit.json"))).unwrap();
    assert_eq!(audit["f_e_checksum_before"], audit["f_e_checksum_after"]);
    let summary: serde_json::Value = serde_json::from_slice(&read(d1.path().join("train-denoise/summary.json"))).unwrap();
    assert_eq!(summary["f_exp_checksum_before"], summary["f_exp_checksum_after"]);

    // Rerunning a stage leaves its outputs and its upstream inputs untouched.
    let before = read(d1.path().join("validate/privacy.json"));
    let upstream = read(d1.path().join("anonymize/pp.jsonl"));
    p.run_stage("validate").unwrap();
    assert_eq!(read(d1.path().join("validate/privacy.json")), before);
    assert_eq!(read(d1.path().join("anonymize/pp.jsonl")), upstream);
}

fn read_string(dir: &Path, stage: &str) -> String {
    let v: serde_json::Value = serde_json::from_slice(&read(dir.join("provenance").join(format!("{stage}.json")))).unwrap();
    v["config"].as_str().unwrap().to_string()
}

#[test]
fn disabling_the_denoiser_reports_a_single_fer_mode() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.denoise_enabled = false;
    cfg.blur_baseline = false;
    run_pipeline(cfg.clone(), &all()).unwrap();
    let report = load_report(Pipeline::new(cfg).unwrap().report_path()).unwrap();
    let fer = report.fer.unwrap();
    assert!(fer.with_denoise.is_none() && fer.without_denoise.is_some());
    assert!(report.blur_baseline.is_none());
    // Without a denoiser the dpp crops equal the pp crops.
    let q: BTreeMap<_, _> = report.privacy.quality.iter().map(|q| (q.pair.as_str(), q.ssim)).collect();
    assert_eq!(q["original_vs_pp"], q["original_vs_dpp"]);
}

fn privacy() -> PrivacyReport {
    let rules = (1..=7u8).map(|r| (r, RuleStats { cases: 4, correct: 3 })).collect();
    PrivacyReport {
        rules,
        matcher_accuracy_r13: 0.75,
        p_pre: 0.75,
        mean_ssim: 0.5,
        mean_psnr: f64::INFINITY,
        quality: Vec::new(),
        ied: Vec::new(),
    }
}

#[test]
fn report_without_fer_has_an_explicit_null_section() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let report = ppfer_core::PipelineReport {
        seed: 1,
        config_hash: "abc".into(),
        privacy: privacy(),
        blur_baseline: None,
        fer: None,
    };
    emit_report(&report, &path).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&read(&path)).unwrap();
    assert!(v["fer"].is_null());
    assert_eq!(v["privacy"]["mean_psnr"], "inf");
    assert_eq!(load_report(&path).unwrap(), report);
}

#[test]
fn inconsistent_privacy_report_is_not_emitted() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = privacy();
    p.p_pre = 0.9;
    let report = ppfer_core::PipelineReport {
        seed: 1,
        config_hash: "abc".into(),
        privacy: p,
        blur_baseline: None,
        fer: None,
    };
    assert!(emit_report(&report, dir.path().join("r.json")).is_err());
}
