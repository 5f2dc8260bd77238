//! Stage-by-stage driver. Every stage reads upstream artifacts under the
//! output directory, writes its own subdirectory and a provenance record.
//!
//! Stage graph (producer -> consumer):
//!
//! ```text
//! synth -> track -> priors -> train-pp -> anonymize -> train-denoise -> denoise
//! anonymize, denoise -> train-fer
//! anonymize, denoise -> train-recovery -> validate -> report
//! train-fer -> report (optional)
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use image::RgbImage;
use ppfer_nn::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anonymizer_training::{pretrain_reconstruction, save_loss_log, train_fpp};
use crate::batch_builder::{load_batch_manifest, sample_batches, save_batch_manifest};
use crate::config::PipelineConfig;
use crate::data_model::{
    load_detections, load_manifest, save_detections, save_manifest, write_atomic, DatasetManifest, DetectionsFile,
    FaceRecord, Variant,
};
use crate::denoise_and_fer::{
    build_clips, classifier_accuracy, evaluate_fer, split_by_video, train_denoiser, train_fer, train_frame_classifier,
    FerReport,
};
use crate::error::{io_err, PpError, Result};
use crate::image_io::{image_to_tensor, tensor_to_image, CropStore};
use crate::knowledge_priors::{track_detections, TrackIndex};
use crate::models::{
    Checkpoint, EmbedderSpec, EncoderDecoder, ExpressionClassifier, FrameClassifier, IdentityEmbedder, PooledEmbedder,
    UNetSpec, VideoClassifier,
};
use crate::privacy_validation::recovery::AlignKey;
use crate::privacy_validation::{
    gaussian_blur, generate_cases, ied, matcher_accuracy, p_pre, predict_cases, psnr, recover, save_cases, ssim,
    train_recovery, CaseOptions, IedSummary, PrivacyReport, QualityEntry, RecoveryModel, RecoveryPair, RuleStats,
};
use crate::synth::{generate, write_dataset, SynthConfig};

pub const STAGES: [&str; 11] = [
    "synth",
    "track",
    "priors",
    "train-pp",
    "anonymize",
    "train-denoise",
    "denoise",
    "train-fer",
    "train-recovery",
    "validate",
    "report",
];

/// Parses a comma-separated stage list; `all` expands to every stage.
pub fn parse_stages(list: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for s in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if s == "all" {
            out.extend(STAGES.iter().map(|s| s.to_string()));
        } else if STAGES.contains(&s) {
            out.push(s.to_string());
        } else {
            return Err(PpError::Usage(format!("unknown stage {s:?}; expected one of {}", STAGES.join(", "))));
        }
    }
    if out.is_empty() {
        return Err(PpError::Usage("no stages given".into()));
    }
    Ok(out)
}

/// FER results with and without the denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FerSection {
    pub with_denoise: Option<FerReport>,
    pub without_denoise: Option<FerReport>,
}

/// Combined privacy and utility results of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub config_hash: String,
    pub privacy: PrivacyReport,
    pub blur_baseline: Option<PrivacyReport>,
    pub fer: Option<FerSection>,
}

pub fn emit_report(report: &PipelineReport, path: impl AsRef<Path>) -> Result<()> {
    report.privacy.validate()?;
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    write_atomic(path.as_ref(), text.as_bytes())
}

pub fn load_report(path: impl AsRef<Path>) -> Result<PipelineReport> {
    let path = path.as_ref();
    Ok(serde_json::from_str(&std::fs::read_to_string(path).map_err(io_err(path))?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

fn sha_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path).map_err(io_err(path))?)))
}

/// Hash of a file, or of a directory's sorted relative paths and file hashes.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_file() {
        return sha_file(path);
    }
    let mut files = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
            let p = entry.map_err(io_err(&dir))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(path).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        h.update(rel.as_bytes());
        h.update(sha_file(&f)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn derive_ref(crop_ref: &str, prefix: &str) -> String {
    let rest = crop_ref.split_once('/').map_or(crop_ref, |(_, r)| r);
    format!("{prefix}/{rest}")
}

fn align_key(r: &FaceRecord) -> AlignKey {
    (r.video_id.clone(), r.frame_index, r.track_id)
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_add(k.wrapping_mul(1_000_003))
}

/// Files and directories touched by one stage, relative to the output root.
#[derive(Default)]
struct StageIo {
    inputs: Vec<String>,
    outputs: Vec<String>,
}

/// The set of variant manifests evaluated together.
struct VariantFiles {
    label: &'static str,
    pp: &'static str,
    dpp: &'static str,
    pp_recovered: &'static str,
    dpp_recovered: &'static str,
}

const OURS: VariantFiles = VariantFiles {
    label: "",
    pp: "pp",
    dpp: "dpp",
    pp_recovered: "pp_recovered",
    dpp_recovered: "dpp_recovered",
};

const BLUR: VariantFiles = VariantFiles {
    label: "_blur",
    pp: "blur_pp",
    dpp: "blur_dpp",
    pp_recovered: "blur_pp_recovered",
    dpp_recovered: "blur_dpp_recovered",
};

pub struct Pipeline {
    cfg: PipelineConfig,
    root: PathBuf,
    store: CropStore,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let root = PathBuf::from(&cfg.output_dir);
        let store = CropStore::new(root.join("crops"));
        Ok(Self { cfg, root, store })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, stage: &str, file: &str) -> PathBuf {
        self.root.join(stage).join(file)
    }

    pub fn report_path(&self) -> PathBuf {
        self.path("report", "report.json")
    }

    fn require(&self, stage: &str, producer: &str, file: &str, io: &mut StageIo) -> Result<PathBuf> {
        let p = self.path(producer, file);
        if !p.exists() {
            return Err(PpError::Dependency {
                stage: stage.into(),
                producer: producer.into(),
                missing: p,
            });
        }
        io.inputs.push(format!("{producer}/{file}"));
        Ok(p)
    }

    fn output(&self, stage: &str, file: &str, io: &mut StageIo) -> PathBuf {
        io.outputs.push(format!("{stage}/{file}"));
        self.path(stage, file)
    }

    fn embedder(&self, seed: u64) -> Result<PooledEmbedder<f32>> {
        PooledEmbedder::new(
            EmbedderSpec {
                resolution: self.cfg.resolution,
                grid: self.cfg.embed_grid,
                dim: self.cfg.embed_dim,
            },
            seed,
        )
    }

    fn unet(&self, seed: u64) -> Result<EncoderDecoder<f32>> {
        EncoderDecoder::new(self.unet_spec(), seed)
    }

    fn unet_spec(&self) -> UNetSpec {
        UNetSpec {
            resolution: self.cfg.resolution,
            base: self.cfg.unet_base,
            identity_init: true,
        }
    }

    fn seed(&self, k: u64) -> u64 {
        sub_seed(self.cfg.seed, k)
    }

    fn load_images(&self, m: &DatasetManifest) -> Result<Vec<RgbImage>> {
        m.records.iter().map(|r| self.store.read(&r.crop_ref)).collect()
    }

    fn load_tensors(&self, m: &DatasetManifest) -> Result<Vec<Tensor<f32>>> {
        m.records.iter().map(|r| self.store.read_tensor(&r.crop_ref)).collect()
    }

    fn labels(&self, m: &DatasetManifest) -> Result<Vec<usize>> {
        m.records
            .iter()
            .map(|r| {
                let e = r.expression.as_deref().unwrap_or_default();
                self.cfg
                    .expressions
                    .iter()
                    .position(|c| c == e)
                    .ok_or_else(|| PpError::Domain(format!("crop {} has unknown expression {e:?}", r.crop_ref)))
            })
            .collect()
    }

    /// Writes transformed crops under `prefix/` and returns their manifest.
    fn map_crops(
        &self,
        m: &DatasetManifest,
        variant: Variant,
        prefix: &str,
        f: impl Fn(&[RgbImage]) -> Result<Vec<RgbImage>>,
    ) -> Result<DatasetManifest> {
        let out = f(&self.load_images(m)?)?;
        let mut records = Vec::with_capacity(m.records.len());
        for (r, img) in m.records.iter().zip(&out) {
            let crop_ref = derive_ref(&r.crop_ref, prefix);
            self.store.write(&crop_ref, img)?;
            records.push(FaceRecord {
                crop_ref,
                variant,
                ..r.clone()
            });
        }
        DatasetManifest::new(variant, records)
    }

    fn net_fn<'a>(&self, apply: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>> + 'a) -> impl Fn(&[RgbImage]) -> Result<Vec<RgbImage>> + 'a {
        move |imgs: &[RgbImage]| {
            if imgs.is_empty() {
                return Ok(Vec::new());
            }
            let x = Tensor::concat0(&imgs.iter().map(image_to_tensor::<f32>).collect::<Vec<_>>())?;
            let y = apply(&x)?;
            Ok((0..y.batch()).map(|i| tensor_to_image(&y.item(i))).collect())
        }
    }

    pub fn run_stage(&self, stage: &str) -> Result<()> {
        let mut io = StageIo::default();
        match stage {
            "synth" => self.synth(&mut io)?,
            "track" => self.track(&mut io)?,
            "priors" => self.priors(&mut io)?,
            "train-pp" => self.train_pp(&mut io)?,
            "anonymize" => self.anonymize(&mut io)?,
            "train-denoise" => self.train_denoise(&mut io)?,
            "denoise" => self.denoise(&mut io)?,
            "train-fer" => self.train_fer(&mut io)?,
            "train-recovery" => self.train_recovery(&mut io)?,
            "validate" => self.validate(&mut io)?,
            "report" => self.report(&mut io)?,
            other => return Err(PpError::Usage(format!("unknown stage {other:?}"))),
        }
        self.write_provenance(stage, &io)
    }

    fn write_provenance(&self, stage: &str, io: &StageIo) -> Result<()> {
        let hash_all = |paths: &[String]| -> Result<BTreeMap<String, String>> {
            paths.iter().map(|p| Ok((p.clone(), hash_path(&self.root.join(p))?))).collect()
        };
        let record = Provenance {
            stage: stage.into(),
            seed: self.cfg.seed,
            config_hash: self.cfg.hash(),
            config: self.cfg.to_text(),
            inputs: hash_all(&io.inputs)?,
            outputs: hash_all(&io.outputs)?,
        };
        let text = serde_json::to_string_pretty(&record)?;
        write_atomic(&self.path("provenance", &format!("{stage}.json")), text.as_bytes())
    }

    fn synth(&self, io: &mut StageIo) -> Result<()> {
        let c = &self.cfg;
        let mut data = generate(&SynthConfig {
            resolution: c.resolution,
            identities: c.identities,
            expressions: c.expressions.clone(),
            videos: c.videos,
            frames_per_video: c.frames_per_video,
            max_faces_per_video: c.max_faces_per_video,
            expression_images_per_class: c.stills_per_class,
            noise: c.noise,
            seed: c.seed,
        })?;
        for f in &mut data.faces {
            f.detection.crop_ref = format!("original/{}", f.detection.crop_ref);
        }
        for (_, r) in &mut data.expression_set {
            r.crop_ref = format!("original/{}", r.crop_ref);
        }
        write_dataset(&data, &self.store, &self.root.join("synth"))?;
        io.outputs.extend(["synth".to_string(), "crops/original".to_string()]);
        Ok(())
    }

    fn track(&self, io: &mut StageIo) -> Result<()> {
        let det_path = self.require("track", "synth", crate::synth::DETECTIONS_FILE, io)?;
        let mut file = load_detections(&det_path)?;
        let matcher = self.embedder(self.cfg.matcher_seed)?;
        let crops = file
            .detections
            .iter()
            .map(|d| self.store.read_tensor::<f32>(&d.crop_ref))
            .collect::<Result<Vec<_>>>()?;
        if !crops.is_empty() {
            let z = matcher.embed(&Tensor::concat0(&crops)?)?;
            for (d, e) in file.detections.iter_mut().zip(&z) {
                d.embedding = e.values().iter().map(|&v| f64::from(v)).collect();
            }
        }
        let (manifest, index) = track_detections(&file.detections, self.cfg.sim_threshold)?;
        save_manifest(&manifest, self.output("track", "original.jsonl", io))?;
        let embedded = DetectionsFile {
            header: file.header.clone(),
            detections: file.detections,
        };
        save_detections(&embedded, self.output("track", "embedded.jsonl", io))?;

        // Track purity against the generator's identities, when available.
        let truth_path = self.path("synth", crate::synth::TRUTH_FILE);
        let purity = if truth_path.exists() {
            let truth: BTreeMap<String, usize> =
                serde_json::from_str(&std::fs::read_to_string(&truth_path).map_err(io_err(&truth_path))?)?;
            let pure = index
                .tracks
                .values()
                .filter(|t| {
                    let ids: std::collections::BTreeSet<_> =
                        t.records.iter().map(|&i| truth.get(&manifest.records[i].crop_ref)).collect();
                    ids.len() == 1
                })
                .count();
            Some(pure as f64 / index.len().max(1) as f64)
        } else {
            None
        };
        let summary = serde_json::json!({
            "faces": manifest.len(),
            "tracks": index.len(),
            "pure_track_fraction": purity,
        });
        write_atomic(
            &self.output("track", "summary.json", io),
            serde_json::to_string_pretty(&summary)?.as_bytes(),
        )
    }

    fn priors(&self, io: &mut StageIo) -> Result<()> {
        let manifest = load_manifest(self.require("priors", "track", "original.jsonl", io)?)?;
        let index = TrackIndex::from_manifest(&manifest);
        let batches = sample_batches(
            &manifest,
            &index,
            self.cfg.batch_k,
            self.cfg.expression_mode,
            self.cfg.batches_per_epoch,
            self.seed(1),
        )?;
        save_batch_manifest(&batches, &manifest, self.output("priors", "batches.jsonl", io))
    }

    fn train_pp(&self, io: &mut StageIo) -> Result<()> {
        let manifest = load_manifest(self.require("train-pp", "track", "original.jsonl", io)?)?;
        let batches = load_batch_manifest(self.require("train-pp", "priors", "batches.jsonl", io)?, &manifest)?;
        let crops = self.load_tensors(&manifest)?;
        let f_e = self.embedder(self.cfg.embedder_seed)?;
        let before = f_e.checksum();

        let pre_cfg = self.cfg.stage_config(self.cfg.pretrain_epochs, self.cfg.pretrain_learning_rate, self.seed(3));
        let (model, curve) = pretrain_reconstruction(self.unet(self.seed(2))?, &crops, &pre_cfg)?;
        let batch_tensors = batches
            .iter()
            .map(|b| Ok(Tensor::concat0(&b.face_refs.iter().map(|&i| crops[i].clone()).collect::<Vec<_>>())?))
            .collect::<Result<Vec<_>>>()?;
        let cfg = self.cfg.train_config();
        let (model, log) = train_fpp(&batch_tensors, model, &f_e, &cfg)?;

        let curve_rows: Vec<_> = curve
            .iter()
            .enumerate()
            .map(|(epoch, l1)| serde_json::json!({"epoch": epoch, "l1": l1}))
            .collect();
        save_loss_log(&curve_rows, self.output("train-pp", "pretrain_curve.jsonl", io))?;
        save_loss_log(&log, self.output("train-pp", "loss.jsonl", io))?;
        model
            .to_checkpoint(serde_json::to_value(&cfg)?)
            .save(self.output("train-pp", "f_pp.json", io))?;
        f_e.to_checkpoint().save(self.output("train-pp", "f_e.json", io))?;
        let audit = serde_json::json!({
            "f_e_checksum_before": before,
            "f_e_checksum_after": f_e.checksum(),
            "f_pp_checksum": model.checksum(),
            "steps": log.len(),
        });
        write_atomic(
            &self.output("train-pp", "audit.json", io),
            serde_json::to_string_pretty(&audit)?.as_bytes(),
        )
    }

    fn anonymize(&self, io: &mut StageIo) -> Result<()> {
        let original = load_manifest(self.require("anonymize", "track", "original.jsonl", io)?)?;
        let stills = load_manifest(self.require("anonymize", "synth", crate::synth::STILLS_FILE, io)?)?;
        let f_pp = EncoderDecoder::<f32>::from_checkpoint(&Checkpoint::load(
            self.require("anonymize", "train-pp", "f_pp.json", io)?,
        )?)?;
        let apply = self.net_fn(|x| crate::anonymizer_training::anonymize(&f_pp, x));
        let pp = self.map_crops(&original, Variant::Pp, "pp", &apply)?;
        save_manifest(&pp, self.output("anonymize", "pp.jsonl", io))?;
        let stills_pp = self.map_crops(&stills, Variant::Pp, "pp", &apply)?;
        save_manifest(&stills_pp, self.output("anonymize", "stills_pp.jsonl", io))?;
        io.outputs.push("crops/pp".into());
        if self.cfg.blur_baseline {
            let sigma = self.cfg.blur_sigma;
            let blur = self.map_crops(&original, Variant::Pp, "blur_pp", |imgs| {
                imgs.iter().map(|i| gaussian_blur(i, sigma)).collect()
            })?;
            save_manifest(&blur, self.output("anonymize", "blur_pp.jsonl", io))?;
            io.outputs.push("crops/blur_pp".into());
        }
        Ok(())
    }

    fn train_denoise(&self, io: &mut StageIo) -> Result<()> {
        let stills = load_manifest(self.require("train-denoise", "synth", crate::synth::STILLS_FILE, io)?)?;
        let stills_pp = load_manifest(self.require("train-denoise", "anonymize", "stills_pp.jsonl", io)?)?;
        let labels = self.labels(&stills)?;
        let pp_labels = self.labels(&stills_pp)?;
        let c = &self.cfg;

        let f_exp = FrameClassifier::new(c.expressions.clone(), c.resolution, c.classifier_width, self.seed(4))?;
        let exp_cfg = c.stage_config(c.fexp_epochs, c.fexp_learning_rate, self.seed(5));
        let originals = self.load_tensors(&stills)?;
        let (mut f_exp, exp_log) = train_frame_classifier(&originals, &labels, f_exp, &exp_cfg)?;
        f_exp.freeze();
        let exp_sum = f_exp.checksum();

        let pp_imgs = self.load_tensors(&stills_pp)?;
        let den_cfg = c.stage_config(c.denoise_epochs, c.denoise_learning_rate, self.seed(7));
        let (f_den, den_log) = train_denoiser(&pp_imgs, &pp_labels, self.unet(self.seed(6))?, &f_exp, &den_cfg)?;

        let denoised: Vec<Tensor<f32>> = pp_imgs
            .iter()
            .map(|x| f_den.apply(x))
            .collect::<Result<_>>()?;
        let summary = serde_json::json!({
            "f_exp_accuracy_original": classifier_accuracy(&f_exp, &originals, &labels)?,
            "f_exp_accuracy_pp": classifier_accuracy(&f_exp, &pp_imgs, &pp_labels)?,
            "f_exp_accuracy_denoised": classifier_accuracy(&f_exp, &denoised, &pp_labels)?,
            "f_exp_checksum_before": exp_sum,
            "f_exp_checksum_after": f_exp.checksum(),
            "f_denoise_checksum": f_den.checksum(),
        });
        save_loss_log(&exp_log, self.output("train-denoise", "f_exp_curve.jsonl", io))?;
        save_loss_log(&den_log, self.output("train-denoise", "denoise_curve.jsonl", io))?;
        f_exp
            .to_checkpoint(serde_json::to_value(&exp_cfg)?)
            .save(self.output("train-denoise", "f_exp.json", io))?;
        f_den
            .to_checkpoint(serde_json::to_value(&den_cfg)?)
            .save(self.output("train-denoise", "f_denoise.json", io))?;
        write_atomic(
            &self.output("train-denoise", "summary.json", io),
            serde_json::to_string_pretty(&summary)?.as_bytes(),
        )
    }

    fn denoise(&self, io: &mut StageIo) -> Result<()> {
        let pp = load_manifest(self.require("denoise", "anonymize", "pp.jsonl", io)?)?;
        let f_den = if self.cfg.denoise_enabled {
            Some(EncoderDecoder::<f32>::from_checkpoint(&Checkpoint::load(
                self.require("denoise", "train-denoise", "f_denoise.json", io)?,
            )?)?)
        } else {
            None
        };
        let apply = self.net_fn(|x| match &f_den {
            Some(m) => crate::denoise_and_fer::denoise(m, x),
            None => Ok(x.clone()),
        });
        let dpp = self.map_crops(&pp, Variant::Dpp, "dpp", &apply)?;
        save_manifest(&dpp, self.output("denoise", "dpp.jsonl", io))?;
        io.outputs.push("crops/dpp".into());
        if self.cfg.blur_baseline {
            let blur = load_manifest(self.require("denoise", "anonymize", "blur_pp.jsonl", io)?)?;
            let dpp = self.map_crops(&blur, Variant::Dpp, "blur_dpp", &apply)?;
            save_manifest(&dpp, self.output("denoise", "blur_dpp.jsonl", io))?;
            io.outputs.push("crops/blur_dpp".into());
        }
        Ok(())
    }

    fn fer_mode(&self, manifest: &DatasetManifest, tag: &str, io: &mut StageIo) -> Result<FerReport> {
        let c = &self.cfg;
        let clips = build_clips(manifest, &c.expressions, c.clip_len, |r| self.store.read_tensor::<f32>(r))?;
        let (train, test) = split_by_video(&clips, c.fer_train_fraction, self.seed(8));
        if test.is_empty() {
            return Err(PpError::Capacity("FER split left no test clips".into()));
        }
        let init = VideoClassifier::new(c.expressions.clone(), c.resolution, c.clip_len, c.classifier_width, self.seed(9))?;
        let cfg = c.stage_config(c.fer_epochs, c.fer_learning_rate, self.seed(10));
        let (model, log) = train_fer(&train, init, &cfg)?;
        let report = evaluate_fer(&model, &test)?;
        save_loss_log(&log, self.output("train-fer", &format!("curve_{tag}.jsonl"), io))?;
        model
            .to_checkpoint(serde_json::to_value(&cfg)?)
            .save(self.output("train-fer", &format!("f_fer_{tag}.json"), io))?;
        write_atomic(
            &self.output("train-fer", &format!("fer_{tag}.json"), io),
            serde_json::to_string_pretty(&report)?.as_bytes(),
        )?;
        write_atomic(
            &self.output("train-fer", &format!("confusion_{tag}.csv"), io),
            report.confusion_csv().as_bytes(),
        )?;
        Ok(report)
    }

    fn train_fer(&self, io: &mut StageIo) -> Result<()> {
        let pp = load_manifest(self.require("train-fer", "anonymize", "pp.jsonl", io)?)?;
        self.fer_mode(&pp, "pp", io)?;
        if self.cfg.denoise_enabled {
            let dpp = load_manifest(self.require("train-fer", "denoise", "dpp.jsonl", io)?)?;
            self.fer_mode(&dpp, "dpp", io)?;
        }
        Ok(())
    }

    fn attack(
        &self,
        original: &DatasetManifest,
        anonymized: &DatasetManifest,
        source: Variant,
        prefix: &str,
        k: u64,
        io: &mut StageIo,
    ) -> Result<DatasetManifest> {
        let targets: HashMap<AlignKey, usize> =
            original.records.iter().enumerate().map(|(i, r)| (align_key(r), i)).collect();
        let mut pairs = Vec::with_capacity(anonymized.len());
        for r in &anonymized.records {
            let key = align_key(r);
            let &t = targets.get(&key).ok_or_else(|| {
                PpError::Domain(format!("anonymized crop {} has no original counterpart", r.crop_ref))
            })?;
            pairs.push(RecoveryPair {
                target_key: align_key(&original.records[t]),
                source_key: key,
                target: self.store.read_tensor(&original.records[t].crop_ref)?,
                source: self.store.read_tensor(&r.crop_ref)?,
            });
        }
        let c = &self.cfg;
        let model = RecoveryModel::new(source, self.unet_spec(), self.seed(11 + k))?;
        let cfg = c.stage_config(c.recovery_epochs, c.recovery_learning_rate, self.seed(21 + k));
        let (model, log) = train_recovery(&pairs, model, &cfg)?;
        save_loss_log(&log, self.output("train-recovery", &format!("{prefix}_curve.jsonl"), io))?;
        model
            .to_checkpoint(serde_json::to_value(&cfg)?)
            .save(self.output("train-recovery", &format!("{prefix}_model.json"), io))?;
        let out = model.output_variant();
        let recovered = self.map_crops(anonymized, out, prefix, self.net_fn(|x| Ok(recover(&model, x, source)?.0)))?;
        save_manifest(&recovered, self.output("train-recovery", &format!("{prefix}.jsonl"), io))?;
        io.outputs.push(format!("crops/{prefix}"));
        Ok(recovered)
    }

    fn train_recovery(&self, io: &mut StageIo) -> Result<()> {
        let original = load_manifest(self.require("train-recovery", "track", "original.jsonl", io)?)?;
        let mut sets = vec![&OURS];
        if self.cfg.blur_baseline {
            sets.push(&BLUR);
        }
        for (i, set) in sets.into_iter().enumerate() {
            let pp = load_manifest(self.require("train-recovery", "anonymize", &format!("{}.jsonl", set.pp), io)?)?;
            let dpp = load_manifest(self.require("train-recovery", "denoise", &format!("{}.jsonl", set.dpp), io)?)?;
            let k = 2 * i as u64;
            self.attack(&original, &pp, Variant::Pp, set.pp_recovered, k, io)?;
            self.attack(&original, &dpp, Variant::Dpp, set.dpp_recovered, k + 1, io)?;
        }
        Ok(())
    }

    fn privacy_for(&self, set: &VariantFiles, io: &mut StageIo) -> Result<PrivacyReport> {
        let original = load_manifest(self.require("validate", "track", "original.jsonl", io)?)?;
        let pp = load_manifest(self.require("validate", "anonymize", &format!("{}.jsonl", set.pp), io)?)?;
        let dpp = load_manifest(self.require("validate", "denoise", &format!("{}.jsonl", set.dpp), io)?)?;
        let ppr = load_manifest(self.require("validate", "train-recovery", &format!("{}.jsonl", set.pp_recovered), io)?)?;
        let dppr = load_manifest(self.require("validate", "train-recovery", &format!("{}.jsonl", set.dpp_recovered), io)?)?;
        let derived = [("pp", &pp), ("dpp", &dpp), ("pp_recovered", &ppr), ("dpp_recovered", &dppr)];

        let cases = generate_cases(
            &[&original, &pp, &dpp, &ppr, &dppr],
            CaseOptions {
                quota: None,
                seed: self.seed(30),
            },
        )?;
        save_cases(&cases, self.output("validate", &format!("cases{}.jsonl", set.label), io))?;

        let matcher = self.embedder(self.cfg.matcher_seed)?;
        let mut embeddings = HashMap::new();
        for m in [&original, &pp, &dpp, &ppr, &dppr] {
            let x = self.load_tensors(m)?;
            if x.is_empty() {
                continue;
            }
            let z = matcher.embed(&Tensor::concat0(&x)?)?;
            for (r, e) in m.records.iter().zip(z) {
                embeddings.insert(r.crop_ref.clone(), e);
            }
        }
        let preds = predict_cases(&cases, &embeddings, self.cfg.matcher_threshold)?;
        let mut rules: BTreeMap<u8, RuleStats> = BTreeMap::new();
        for (c, &p) in cases.iter().zip(&preds) {
            let s = rules.entry(c.rule_id).or_default();
            s.cases += 1;
            s.correct += u64::from(c.ground_truth == p);
        }
        let (calib, calib_pred): (Vec<_>, Vec<_>) = cases.iter().zip(&preds).filter(|(c, _)| c.rule_id <= 3).unzip();
        let calib: Vec<_> = calib.into_iter().cloned().collect();
        let calib_pred: Vec<u8> = calib_pred.into_iter().copied().collect();
        let (priv_cases, priv_pred): (Vec<_>, Vec<_>) = cases.iter().zip(&preds).filter(|(c, _)| c.rule_id >= 4).unzip();
        let priv_cases: Vec<_> = priv_cases.into_iter().cloned().collect();
        let priv_pred: Vec<u8> = priv_pred.into_iter().copied().collect();
        let summary = p_pre(&priv_cases, &priv_pred)?;

        let originals: HashMap<AlignKey, &FaceRecord> = original.records.iter().map(|r| (align_key(r), r)).collect();
        let mut quality = Vec::new();
        let mut displacement = Vec::new();
        for (name, m) in derived {
            let (mut s_sum, mut p_sum, mut dists) = (0.0, 0.0, Vec::new());
            for r in &m.records {
                let o = originals.get(&align_key(r)).ok_or_else(|| {
                    PpError::Domain(format!("{} has no original counterpart", r.crop_ref))
                })?;
                let (a, b) = (self.store.read(&o.crop_ref)?, self.store.read(&r.crop_ref)?);
                s_sum += ssim(&a, &b)?;
                p_sum += psnr(&a, &b)?;
                dists.push(ied(&embeddings[&o.crop_ref], &embeddings[&r.crop_ref])?);
            }
            let n = m.len().max(1) as f64;
            quality.push(QualityEntry {
                pair: format!("original_vs_{name}"),
                count: m.len(),
                ssim: s_sum / n,
                psnr: p_sum / n,
            });
            displacement.push(IedSummary::from_values(format!("original_to_{name}"), &dists)?);
        }
        let report = PrivacyReport {
            rules,
            matcher_accuracy_r13: matcher_accuracy(&calib, &calib_pred)?,
            p_pre: summary.p_pre,
            mean_ssim: quality[0].ssim,
            mean_psnr: quality[0].psnr,
            quality,
            ied: displacement,
        };
        report.validate()?;
        write_atomic(
            &self.output("validate", &format!("privacy{}.json", set.label), io),
            serde_json::to_string_pretty(&report)?.as_bytes(),
        )?;
        Ok(report)
    }

    fn validate(&self, io: &mut StageIo) -> Result<()> {
        self.privacy_for(&OURS, io)?;
        if self.cfg.blur_baseline {
            self.privacy_for(&BLUR, io)?;
        }
        Ok(())
    }

    fn report(&self, io: &mut StageIo) -> Result<()> {
        let read = |p: PathBuf| -> Result<String> { std::fs::read_to_string(&p).map_err(io_err(&p)) };
        let privacy: PrivacyReport = serde_json::from_str(&read(self.require("report", "validate", "privacy.json", io)?)?)?;
        let optional = |stage: &str, file: &str, io: &mut StageIo| -> Result<Option<String>> {
            let p = self.path(stage, file);
            if p.exists() {
                io.inputs.push(format!("{stage}/{file}"));
                Ok(Some(read(p)?))
            } else {
                Ok(None)
            }
        };
        let blur_baseline = match optional("validate", "privacy_blur.json", io)? {
            Some(t) => Some(serde_json::from_str(&t)?),
            None => None,
        };
        let without = optional("train-fer", "fer_pp.json", io)?;
        let with = optional("train-fer", "fer_dpp.json", io)?;
        let fer = if without.is_none() && with.is_none() {
            None
        } else {
            Some(FerSection {
                with_denoise: with.map(|t| serde_json::from_str(&t)).transpose()?,
                without_denoise: without.map(|t| serde_json::from_str(&t)).transpose()?,
            })
        };
        let report = PipelineReport {
            seed: self.cfg.seed,
            config_hash: self.cfg.hash(),
            privacy,
            blur_baseline,
            fer,
        };
        emit_report(&report, self.output("report", "report.json", io))
    }
}

/// Runs `stages` in the given order.
pub fn run_pipeline(cfg: PipelineConfig, stages: &[String]) -> Result<()> {
    for s in stages {
        if !STAGES.contains(&s.as_str()) {
            return Err(PpError::Usage(format!("unknown stage {s:?}")));
        }
    }
    let p = Pipeline::new(cfg)?;
    for s in stages {
        p.run_stage(s)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_lists_parse() {
        assert_eq!(parse_stages("synth, track").unwrap(), vec!["synth", "track"]);
        assert_eq!(parse_stages("all").unwrap().len(), STAGES.len());
        assert!(matches!(parse_stages("synth,bogus"), Err(PpError::Usage(_))));
    }

    #[test]
    fn derived_refs_swap_the_variant_directory() {
        assert_eq!(derive_ref("original/v001/f000_0.png", "pp"), "pp/v001/f000_0.png");
    }
}
