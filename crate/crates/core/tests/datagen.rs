use std::fs;
use std::path::Path;

use frm_core::datagen::{generate, read_pgm, render_scene, write_pgm, Dataset, SceneSpec, ShapeKind};
use frm_core::metrics::ConfusionMatrix;
use frm_core::Error;

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "labels"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
    out.push(("manifest".into(), fs::read(dir.join("manifest.txt")).unwrap()));
    out
}

#[test]
fn regeneration_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = SceneSpec { seed: 42, ..Default::default() };
    generate(&spec, 10, a.path()).unwrap();
    generate(&spec, 10, b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn single_rectangle_area_matches_label_count() {
    let spec = SceneSpec {
        num_classes: 2,
        shapes_min: 1,
        shapes_max: 1,
        ..Default::default()
    };
    for i in 0..25 {
        let s = render_scene(&spec, i);
        assert_eq!(s.shapes.len(), 1);
        let r = &s.shapes[0];
        assert_eq!(r.kind, ShapeKind::Rectangle);
        let [y0, x0, y1, x1] = r.extent;
        let area = (y1 - y0) * (x1 - x0);
        assert_eq!(s.labels.iter().filter(|&&y| y == 1).count(), area);
    }
}

#[test]
fn manifest_histogram_matches_recount() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { num_classes: 8, seed: 5, ..Default::default() };
    let m = generate(&spec, 12, dir.path()).unwrap();
    let mut recount = vec![0u64; 8];
    for i in 0..12 {
        let (labels, _, _) = read_pgm(&dir.path().join(format!("labels/{i:04}.pgm"))).unwrap();
        for y in labels {
            recount[y as usize] += 1;
        }
    }
    assert_eq!(m.histogram, recount);
    let reopened = Dataset::open(dir.path()).unwrap();
    assert_eq!(reopened.manifest, m);
}

#[test]
fn load_round_trips_generated_scenes_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { seed: 3, ..Default::default() };
    generate(&spec, 8, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let order = [6usize, 1, 3, 1];
    let batch = ds.load(&order).unwrap();
    assert_eq!(batch.images.shape(), [4, 3, 64, 64]);
    assert_eq!(batch.labels.len(), 4 * 64 * 64);
    for (slot, &i) in order.iter().enumerate() {
        let s = render_scene(&spec, i as u64);
        let n = 3 * 64 * 64;
        assert_eq!(&batch.images.data()[slot * n..(slot + 1) * n], s.image.data());
        assert_eq!(&batch.labels[slot * 4096..(slot + 1) * 4096], &s.labels[..]);
    }
    assert!(matches!(ds.load(&[8]), Err(Error::Contract(_))));
}

#[test]
fn pgm_validation_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.pgm");
    write_pgm(&p, &[0, 1, 2, 3, 4, 5], 2, 3).unwrap();
    assert_eq!(read_pgm(&p).unwrap(), (vec![0, 1, 2, 3, 4, 5], 2, 3));

    fs::write(&p, b"P5\n3 2\n65535\n\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
    match read_pgm(&p) {
        Err(Error::Format { path, msg }) => {
            assert_eq!(path, p);
            assert!(msg.contains("maxval"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
    fs::write(&p, b"P2\n3 2\n255\n0 1 2 3 4 5").unwrap();
    assert!(matches!(read_pgm(&p), Err(Error::Format { .. })));
    fs::write(&p, b"P5\n3 2\n255\n\0\0").unwrap();
    assert!(matches!(read_pgm(&p), Err(Error::Format { .. })));
}

#[test]
fn corrupt_image_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    generate(&SceneSpec::default(), 2, dir.path()).unwrap();
    let img = dir.path().join("images/0001.frmt");
    fs::write(&img, b"garbage").unwrap();
    match Dataset::open(dir.path()).unwrap().load(&[0, 1]) {
        Err(Error::Format { path, .. }) => assert_eq!(path, img),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unwritable_destination_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"").unwrap();
    assert!(matches!(
        generate(&SceneSpec::default(), 1, &blocker.join("sub")),
        Err(Error::Io { .. })
    ));
    let bad = SceneSpec { num_classes: 1, ..Default::default() };
    assert!(matches!(generate(&bad, 1, dir.path()), Err(Error::Config(_))));
}

/// Per-pixel nearest class-mean colour, fitted on scenes 0..100 and scored on 100..164.
fn nearest_centroid_miou(spec: &SceneSpec) -> f64 {
    let k = spec.num_classes;
    let mut sums = vec![[0f64; 3]; k];
    let mut counts = vec![0f64; k];
    for i in 0..100 {
        let s = render_scene(spec, i);
        let plane = s.labels.len();
        for (p, &y) in s.labels.iter().enumerate() {
            for c in 0..3 {
                sums[y as usize][c] += s.image.data()[c * plane + p] as f64;
            }
            counts[y as usize] += 1.0;
        }
    }
    let means: Vec<[f64; 3]> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.map(|v| v / n.max(1.0)))
        .collect();
    let mut cm = ConfusionMatrix::new(k);
    for i in 100..164 {
        let s = render_scene(spec, i);
        let plane = s.labels.len();
        let pred: Vec<u8> = (0..plane)
            .map(|p| {
                let px: Vec<f64> = (0..3).map(|c| s.image.data()[c * plane + p] as f64).collect();
                let dist = |m: &[f64; 3]| (0..3).map(|c| (px[c] - m[c]).powi(2)).sum::<f64>();
                (0..k).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap() as u8
            })
            .collect();
        cm.accumulate(&pred, &s.labels, 255).unwrap();
    }
    cm.iou().unwrap().miou
}

#[test]
fn default_task_is_linearly_learnable() {
    let miou = nearest_centroid_miou(&SceneSpec::default());
    println!("nearest-centroid mIoU on default scenes: {miou:.4}");
    assert!(miou >= 0.6, "{miou}");
}
