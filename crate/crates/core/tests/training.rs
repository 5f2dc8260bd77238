use ppfer_core::anonymizer_training::{anonymize, pretrain_reconstruction, train_fpp, TrainConfig};
use ppfer_core::denoise_and_fer::{
    build_clips, classifier_accuracy, evaluate_fer, split_by_video, train_denoiser, train_fer, train_frame_classifier, Clip,
    FerReport,
};
use ppfer_core::models::{
    EmbedderSpec, EncoderDecoder, ExpressionClassifier, FrameClassifier, IdentityEmbedder, PooledEmbedder, UNetSpec,
    VideoClassifier,
};
use ppfer_core::PpError;
use ppfer_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RES: usize = 8;

fn classes() -> Vec<String> {
    ["happy", "sad", "surprise"].iter().map(|s| s.to_string()).collect()
}

fn cfg(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: lr,
        minibatch: 4,
        ..TrainConfig::default()
    }
}

fn random_images(n: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::from_vec(&[1, 3, RES, RES], (0..3 * RES * RES).map(|_| rng.gen::<f32>()).collect()).unwrap())
        .collect()
}

/// Images whose class is the brightest third of the picture.
fn banded_images(n: usize, seed: u64) -> (Vec<Tensor<f32>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let label = i % 3;
        let mut data = vec![0.0f32; 3 * RES * RES];
        for c in 0..3 {
            for y in 0..RES {
                for x in 0..RES {
                    let band = (y * 3 / RES == label) as u8 as f32;
                    data[(c * RES + y) * RES + x] = 0.2 + 0.6 * band + rng.gen_range(-0.1..0.1);
                }
            }
        }
        images.push(Tensor::from_vec(&[1, 3, RES, RES], data).unwrap());
        labels.push(label);
    }
    (images, labels)
}

fn unet(seed: u64) -> EncoderDecoder<f32> {
    EncoderDecoder::new(
        UNetSpec {
            resolution: RES,
            base: 4,
            identity_init: true,
        },
        seed,
    )
    .unwrap()
}

fn embedder() -> PooledEmbedder<f32> {
    PooledEmbedder::new(
        EmbedderSpec {
            resolution: RES,
            grid: 2,
            dim: 8,
        },
        5,
    )
    .unwrap()
}

fn triplet_batches(count: usize) -> Vec<Tensor<f32>> {
    (0..count)
        .map(|i| Tensor::concat0(&random_images(16, 100 + i as u64)).unwrap())
        .collect()
}

#[test]
fn embedder_stays_frozen_while_training_the_anonymizer() {
    let f_e = embedder();
    let before = f_e.checksum();
    let (model, log) = train_fpp(&triplet_batches(2), unet(1), &f_e, &cfg(3, 1e-3)).unwrap();
    assert_eq!(f_e.checksum(), before);
    assert_eq!(log.len(), 6);
    assert_ne!(model.checksum(), unet(1).checksum());
    for r in &log {
        assert!((r.total - cfg(1, 0.0).alpha * r.l_tri - (1.0 - cfg(1, 0.0).alpha) * r.l_bce).abs() < 1e-5);
    }
}

#[test]
fn unfrozen_embedder_is_a_contract_violation() {
    let mut f_e = embedder();
    f_e.set_frozen(false);
    assert!(matches!(
        train_fpp(&triplet_batches(1), unet(1), &f_e, &cfg(1, 1e-3)),
        Err(PpError::Contract(_))
    ));
}

#[test]
fn malformed_batches_are_rejected() {
    let bad = vec![Tensor::concat0(&random_images(5, 1)).unwrap()];
    assert!(matches!(train_fpp(&bad, unet(1), &embedder(), &cfg(1, 1e-3)), Err(PpError::Domain(_))));
}

#[test]
fn zero_learning_rate_leaves_the_anonymizer_unchanged() {
    let (model, _) = train_fpp(&triplet_batches(1), unet(2), &embedder(), &cfg(2, 0.0)).unwrap();
    assert_eq!(model.checksum(), unet(2).checksum());
}

#[test]
fn anonymizer_training_is_deterministic() {
    let run = || train_fpp(&triplet_batches(2), unet(3), &embedder(), &cfg(2, 1e-3)).unwrap();
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(la, lb);
}

#[test]
fn reconstruction_pretraining_reduces_l1() {
    let crops = random_images(12, 4);
    let mut m = unet(4);
    let spec = UNetSpec {
        identity_init: false,
        ..m.spec().clone()
    };
    m = EncoderDecoder::new(spec, 4).unwrap();
    let (m, curve) = pretrain_reconstruction(m, &crops, &cfg(15, 3e-3)).unwrap();
    assert!(curve.last().unwrap() < &curve[0], "{curve:?}");
    let out = anonymize(&m, &Tensor::concat0(&crops).unwrap()).unwrap();
    assert_eq!(out.shape(), &[12, 3, RES, RES]);
}

#[test]
fn identity_initialized_model_reproduces_its_input() {
    let x = Tensor::concat0(&random_images(3, 9)).unwrap();
    let y = anonymize(&unet(1), &x).unwrap();
    for (a, b) in x.data().iter().zip(y.data()) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!(anonymize(&unet(1), &Tensor::<f32>::zeros(&[1, 3, RES + 4, RES + 4])).is_err());
}

fn trained_classifier() -> (FrameClassifier<f32>, Vec<Tensor<f32>>, Vec<usize>) {
    let (images, labels) = banded_images(30, 1);
    let init = FrameClassifier::new(classes(), RES, 4, 2).unwrap();
    let (model, log) = train_frame_classifier(&images, &labels, init, &cfg(30, 1e-2)).unwrap();
    assert!(log.last().unwrap().loss < log[0].loss);
    (model, images, labels)
}

#[test]
fn classifier_stays_frozen_while_training_the_denoiser() {
    let (mut f_exp, images, labels) = trained_classifier();
    f_exp.freeze();
    let before = f_exp.checksum();
    let (den, log) = train_denoiser(&images, &labels, unet(5), &f_exp, &cfg(3, 1e-3)).unwrap();
    assert_eq!(f_exp.checksum(), before);
    assert_eq!(log.len(), 3);
    assert_ne!(den.checksum(), unet(5).checksum());
}

#[test]
fn denoiser_checks_its_preconditions() {
    let (mut f_exp, images, labels) = trained_classifier();
    assert!(matches!(
        train_denoiser(&images, &labels, unet(5), &f_exp, &cfg(1, 1e-3)),
        Err(PpError::Contract(_))
    ));
    f_exp.freeze();
    let mut bad = labels.clone();
    bad[0] = 3;
    assert!(matches!(
        train_denoiser(&images, &bad, unet(5), &f_exp, &cfg(1, 1e-3)),
        Err(PpError::Domain(_))
    ));
    let (den, _) = train_denoiser(&images, &labels, unet(5), &f_exp, &cfg(2, 0.0)).unwrap();
    assert_eq!(den.checksum(), unet(5).checksum());
}

#[test]
fn denoiser_restores_recognizability_of_degraded_images() {
    let (mut f_exp, images, labels) = trained_classifier();
    f_exp.freeze();
    // Degrade: compress contrast towards grey.
    let degraded: Vec<_> = images.iter().map(|t| t.map(|v| 0.5 + 0.15 * (v - 0.5))).collect();
    let raw = classifier_accuracy(&f_exp, &degraded, &labels).unwrap();
    let (den, _) = train_denoiser(&degraded, &labels, unet(6), &f_exp, &cfg(40, 3e-3)).unwrap();
    let restored: Vec<_> = degraded.iter().map(|x| den.apply(x).unwrap()).collect();
    let after = classifier_accuracy(&f_exp, &restored, &labels).unwrap();
    assert!(after >= raw, "{after} < {raw}");
}

#[test]
fn fer_report_matches_hand_counts() {
    let truth = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2];
    let pred = [0, 0, 1, 0, 1, 1, 2, 2, 0, 2];
    let r = FerReport::from_predictions(&classes(), &truth, &pred).unwrap();
    assert!((r.overall - 0.7).abs() < 1e-12);
    assert_eq!(r.per_class["happy"], Some(0.75));
    assert_eq!(r.per_class["sad"], Some(2.0 / 3.0));
    assert_eq!(r.per_class["surprise"], Some(2.0 / 3.0));
    assert_eq!(r.confusion, vec![vec![3, 1, 0], vec![0, 2, 1], vec![1, 0, 2]]);
    for (i, c) in classes().iter().enumerate() {
        assert_eq!(r.confusion[i].iter().sum::<u64>(), r.support[c]);
    }
    let weighted: f64 = classes()
        .iter()
        .map(|c| r.per_class[c].unwrap() * r.support[c] as f64)
        .sum::<f64>()
        / 10.0;
    assert!((weighted - r.overall).abs() < 1e-12);
    assert_eq!(r.confusion_csv().lines().count(), 4);
}

#[test]
fn empty_class_is_not_applicable() {
    let r = FerReport::from_predictions(&classes(), &[0, 0, 2], &[0, 1, 2]).unwrap();
    assert_eq!(r.per_class["sad"], None);
    assert_eq!(r.table_row(), "50.00 | N/A | 100.00");
    let all = FerReport::from_predictions(&classes(), &[0, 1, 2], &[0, 1, 2]).unwrap();
    assert_eq!(all.overall, 1.0);
    assert_eq!(all.confusion, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
    assert!(FerReport::from_predictions(&classes(), &[0, 3], &[0, 1]).is_err());
}

fn banded_clips(n: usize, frames: usize, seed: u64) -> Vec<Clip<f32>> {
    // Image j has label j % 3.
    let (images, _) = banded_images(3 * n * frames, seed);
    (0..n)
        .map(|i| {
            let fs: Vec<_> = (0..frames).map(|t| images[3 * (i * frames + t) + i % 3].clone()).collect();
            Clip {
                video_id: format!("v{i}"),
                track_id: 0,
                label: i % 3,
                frames: ppfer_core::denoise_and_fer::stack_frames(&fs).unwrap(),
            }
        })
        .collect()
}

#[test]
fn video_classifier_learns_separable_clips() {
    let clips = banded_clips(60, 2, 3);
    let init = VideoClassifier::new(classes(), RES, 2, 4, 1).unwrap();
    let (model, log) = train_fer(&clips, init, &cfg(20, 1e-2)).unwrap();
    assert!(log.last().unwrap().loss < log[0].loss);
    let report = evaluate_fer(&model, &clips).unwrap();
    assert!(report.overall > 1.0 / 3.0 + 0.2, "{}", report.overall);
}

#[test]
fn fer_edge_cases() {
    let init = VideoClassifier::new(classes(), RES, 2, 4, 1).unwrap();
    assert!(matches!(train_fer(&[], init.clone(), &cfg(1, 1e-2)), Err(PpError::Domain(_))));
    assert!(matches!(evaluate_fer(&init, &[]), Err(PpError::Domain(_))));
    let clips = banded_clips(6, 2, 4);
    let (same, _) = train_fer(&clips, init.clone(), &cfg(0, 1e-2)).unwrap();
    assert_eq!(same.checksum(), init.checksum());
}

#[test]
fn video_split_keeps_videos_whole() {
    let clips = banded_clips(20, 2, 5);
    let (train, test) = split_by_video(&clips, 0.7, 1);
    assert_eq!(train.len() + test.len(), 20);
    assert_eq!(train.len(), 14);
    for c in &test {
        assert!(train.iter().all(|t| t.video_id != c.video_id));
    }
}

#[test]
fn clips_follow_track_frame_order() {
    use ppfer_core::data_model::{DatasetManifest, FaceRecord, Variant};
    let rec = |f: u64, t: u64, e: &str| FaceRecord {
        video_id: "v".into(),
        frame_index: f,
        track_id: t,
        bbox: [0.0, 0.0, 1.0, 1.0],
        expression: Some(e.into()),
        crop_ref: format!("{f}_{t}"),
        variant: Variant::Original,
    };
    let m = DatasetManifest::new(
        Variant::Original,
        vec![rec(2, 0, "sad"), rec(0, 0, "sad"), rec(1, 0, "sad"), rec(0, 1, "happy")],
    )
    .unwrap();
    let mut loaded = Vec::new();
    let clips = build_clips(&m, &classes(), 3, |r| {
        loaded.push(r.to_string());
        Ok(Tensor::<f32>::zeros(&[1, 3, 2, 2]))
    })
    .unwrap();
    assert_eq!(clips.len(), 2);
    assert_eq!(clips[0].label, 1);
    assert_eq!(clips[0].frames.shape(), &[1, 3, 3, 2, 2]);
    assert_eq!(&loaded[..3], ["0_0", "1_0", "2_0"]);
    assert!(build_clips(&m, &classes()[..1], 3, |_| Ok(Tensor::<f32>::zeros(&[1, 3, 2, 2]))).is_err());
}
