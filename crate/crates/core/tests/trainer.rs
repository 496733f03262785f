use frm_core::datagen::{render_scene, SceneSpec, SegBatch};
use frm_core::metrics::ConfusionMatrix;
use frm_core::trainer::{flip_horizontal, Augment, TrainConfig, Trainer};
use frm_core::{ModelConfig, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scenes(spec: &SceneSpec, count: u64) -> SegBatch {
    let (mut data, mut labels) = (Vec::new(), Vec::new());
    for i in 0..count {
        let s = render_scene(spec, i);
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.labels);
    }
    let images = Tensor::new([count as usize, 3, spec.height, spec.width], data).unwrap();
    SegBatch { images, labels }
}

fn small_config(iters: usize) -> TrainConfig {
    TrainConfig {
        iters,
        batch: 4,
        crop: 32,
        log_every: 5,
        model: ModelConfig { num_classes: 3, ..Default::default() },
        ..Default::default()
    }
}

fn small_spec() -> SceneSpec {
    SceneSpec { height: 32, width: 32, num_classes: 3, seed: 2, ..Default::default() }
}

#[test]
fn flip_is_an_involution() {
    let original: Vec<u32> = (0..24).collect();
    let mut v = original.clone();
    flip_horizontal(&mut v, 4);
    assert_eq!(&v[..4], &[3, 2, 1, 0]);
    flip_horizontal(&mut v, 4);
    assert_eq!(v, original);
}

#[test]
fn unit_scale_full_crop_is_identity() {
    let s = render_scene(&small_spec(), 0);
    let aug = Augment { flip_prob: 0.0, scale_min: 1.0, scale_max: 1.0, crop: (32, 32), ignore_index: 255 };
    let (img, lab) = aug.apply(&s.image, &s.labels, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(img.data(), s.image.data());
    assert_eq!(lab, s.labels);
}

#[test]
fn rescaled_labels_stay_in_the_label_set() {
    let s = render_scene(&small_spec(), 1);
    for (scale, crop) in [(2.0, 32), (0.5, 32)] {
        let aug = Augment { flip_prob: 0.5, scale_min: scale, scale_max: scale, crop: (crop, crop), ignore_index: 255 };
        let (img, lab) = aug.apply(&s.image, &s.labels, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(img.shape(), [1, 3, crop, crop]);
        assert!(lab.iter().all(|&y| y < 3 || y == 255));
        // a half-size image leaves padding: ignored labels, zero pixels
        let padded = lab.iter().filter(|&&y| y == 255).count();
        assert_eq!(padded > 0, scale < 1.0);
    }
}

#[test]
fn loss_decreases_on_a_fixed_set() {
    let train = scenes(&small_spec(), 16);
    let mut t = Trainer::new(small_config(60)).unwrap();
    let summary = t.run(&train, &train.select(&[]), None, |_| {}).unwrap();
    let first = summary.records.first().unwrap().loss;
    let last = summary.records.last().unwrap().loss;
    assert!(last < 0.8 * first, "{first} -> {last}");
    assert_eq!(summary.records.len(), 12);
    assert_eq!(summary.curve.len(), 5);
}

#[test]
fn resume_replays_an_uninterrupted_run() {
    let train = scenes(&small_spec(), 12);
    let none = train.select(&[]);
    let mut straight = Trainer::new(small_config(8)).unwrap();
    straight.run(&train, &none, None, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(small_config(8)).unwrap();
    for _ in 0..5 {
        first.step(&train).unwrap();
    }
    first.save(dir.path()).unwrap();
    let mut resumed = Trainer::resume(dir.path(), None).unwrap();
    assert_eq!(resumed.iteration, 5);
    resumed.run(&train, &none, Some(dir.path()), |_| {}).unwrap();

    for (a, b) in straight.model.store.entries().iter().zip(resumed.model.store.entries()) {
        assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
    }
}

/// IoU from per-class pixel sets, without a confusion matrix.
fn brute_miou(pred: &[u8], truth: &[u8], k: u8) -> Option<f64> {
    let kept: Vec<(u8, u8)> = pred.iter().zip(truth).filter(|(_, &t)| t != 255).map(|(&p, &t)| (p, t)).collect();
    if kept.is_empty() {
        return None;
    }
    let ious: Vec<f64> = (0..k)
        .filter_map(|c| {
            let inter = kept.iter().filter(|&&(p, t)| p == c && t == c).count();
            let union = kept.iter().filter(|&&(p, t)| p == c || t == c).count();
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    Some(ious.iter().sum::<f64>() / ious.len() as f64)
}

proptest! {
    #[test]
    fn miou_matches_brute_force(pairs in prop::collection::vec((0u8..4, prop_oneof![0u8..4, Just(255u8)]), 1..200)) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&pred, &truth, 255).unwrap();
        match brute_miou(&pred, &truth, 4) {
            Some(m) => prop_assert!((cm.iou().unwrap().miou - m).abs() < 1e-12),
            None => prop_assert!(cm.iou().is_err()),
        }
    }
}
